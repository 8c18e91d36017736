//! Causal multi-head / grouped-query attention, KV caches and the
//! linearized-attention reference.
//!
//! Weights are stored column-blocked: `wq` is `D × H·N`, so head `h` owns
//! columns `h·N .. (h+1)·N`. `wo` is `H·N × D`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm, softmax_in_place, vec_mat, MatRef};

/// Rotates consecutive pairs of one head vector by position-dependent angles.
pub fn rotate_pairs<T: Scalar>(head: &mut [T], pos: usize, base: f64, inverse: bool) {
    let n = head.len();
    for i in 0..n / 2 {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / n as f64);
        let (s, c) = theta.sin_cos();
        let (s, c) = (T::lit(if inverse { -s } else { s }), T::lit(c));
        let (x0, x1) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = x0 * c - x1 * s;
        head[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// `out = x / rms(x) * w`.
pub fn rms_norm_row<T: Scalar>(x: &[T], w: &[T], eps: T, out: &mut [T]) {
    let ms = x.iter().map(|&a| a * a).sum::<T>() / T::lit(x.len() as f64);
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &a), &g) in out.iter_mut().zip(x).zip(w) {
        *o = a * inv * g;
    }
}

/// One attention layer's projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub d_model: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub scale: T,
    /// Rotary base when positions are encoded; `None` is NoPE.
    pub rope: Option<f64>,
}

/// The slice of an [`AttentionWeights`] belonging to one query head,
/// each matrix `N × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
    pub head_index: usize,
    pub kv_group_index: usize,
}

/// Copies columns `c0..c0+n` of a row-major `rows × cols` matrix as an `n × rows` matrix.
pub(crate) fn column_block_t<T: Scalar>(m: &[T], rows: usize, cols: usize, c0: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * rows];
    for r in 0..rows {
        for i in 0..n {
            out[i * rows + r] = m[r * cols + c0 + i];
        }
    }
    out
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }

    fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn head(&self, h: usize) -> AttentionHeadParams<T> {
        let (d, n) = (self.d_model, self.head_dim);
        let g = h / self.group();
        AttentionHeadParams {
            w_q: column_block_t(&self.wq, d, self.q_width(), h * n, n),
            w_k: column_block_t(&self.wk, d, self.kv_width(), g * n, n),
            w_v: column_block_t(&self.wv, d, self.kv_width(), g * n, n),
            w_o: self.wo[h * n * d..(h + 1) * n * d].to_vec(),
            head_index: h,
            kv_group_index: g,
        }
    }

    fn project(&self, o: &[T], t: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.d_model;
        let mut q = vec![T::zero(); t * self.q_width()];
        let mut k = vec![T::zero(); t * self.kv_width()];
        let mut v = vec![T::zero(); t * self.kv_width()];
        gemm(MatRef::new(o, t, d), MatRef::new(&self.wq, d, self.q_width()), &mut q, false);
        gemm(MatRef::new(o, t, d), MatRef::new(&self.wk, d, self.kv_width()), &mut k, false);
        gemm(MatRef::new(o, t, d), MatRef::new(&self.wv, d, self.kv_width()), &mut v, false);
        if let Some(base) = self.rope {
            for (pos, row) in q.chunks_exact_mut(self.q_width()).enumerate() {
                for h in row.chunks_exact_mut(self.head_dim) {
                    rotate_pairs(h, pos, base, false);
                }
            }
            for (pos, row) in k.chunks_exact_mut(self.kv_width()).enumerate() {
                for h in row.chunks_exact_mut(self.head_dim) {
                    rotate_pairs(h, pos, base, false);
                }
            }
        }
        (q, k, v)
    }

    fn output(&self, heads_out: &[T], t: usize) -> Vec<T> {
        let mut y = vec![T::zero(); t * self.d_model];
        gemm(
            MatRef::new(heads_out, t, self.q_width()),
            MatRef::new(&self.wo, self.q_width(), self.d_model),
            &mut y,
            false,
        );
        y
    }

    /// Causal softmax attention over `o` (`T × D`), returning `T × D`.
    pub fn forward(&self, o: &[T]) -> Vec<T> {
        let t = o.len() / self.d_model;
        let (q, k, v) = self.project(o, t);
        let (heads_out, _) = causal_attention_core(&q, &k, &v, t, self.heads, self.kv_heads, self.head_dim, self.scale);
        self.output(&heads_out, t)
    }

    /// Processes position `cache.len()` given its normalized input `o_t`.
    pub fn step(&self, o_t: &[T], cache: &mut KvLayer<T>) -> Vec<T> {
        let n = self.head_dim;
        let pos = cache.len;
        let mut q = vec![T::zero(); self.q_width()];
        let mut k = vec![T::zero(); self.kv_width()];
        let mut v = vec![T::zero(); self.kv_width()];
        vec_mat(o_t, &self.wq, &mut q);
        vec_mat(o_t, &self.wk, &mut k);
        vec_mat(o_t, &self.wv, &mut v);
        if let Some(base) = self.rope {
            for h in q.chunks_exact_mut(n) {
                rotate_pairs(h, pos, base, false);
            }
            for h in k.chunks_exact_mut(n) {
                rotate_pairs(h, pos, base, false);
            }
        }
        cache.push(&k, &v);
        let kw = self.kv_width();
        let len = cache.len;
        let mut heads_out = vec![T::zero(); self.q_width()];
        let mut p = vec![T::zero(); len];
        for h in 0..self.heads {
            let g = h / self.group();
            let qh = &q[h * n..(h + 1) * n];
            for (u, pu) in p.iter_mut().enumerate() {
                *pu = dot(qh, &cache.k[u * kw + g * n..u * kw + (g + 1) * n]) * self.scale;
            }
            softmax_in_place(&mut p);
            let out = &mut heads_out[h * n..(h + 1) * n];
            for (u, &pu) in p.iter().enumerate() {
                for (o, &x) in out.iter_mut().zip(&cache.v[u * kw + g * n..u * kw + (g + 1) * n]) {
                    *o += pu * x;
                }
            }
        }
        let mut y = vec![T::zero(); self.d_model];
        vec_mat(&heads_out, &self.wo, &mut y);
        y
    }

    /// Softmax-free attention, recurrent form: a running `Σ K_s ⊗ V_s` per head.
    pub fn linear_forward_recurrent(&self, o: &[T]) -> Vec<T> {
        let t = o.len() / self.d_model;
        let n = self.head_dim;
        let (q, k, v) = self.project(o, t);
        let (qw, kw) = (self.q_width(), self.kv_width());
        let mut state = vec![T::zero(); self.heads * n * n];
        let mut heads_out = vec![T::zero(); t * qw];
        for s in 0..t {
            for h in 0..self.heads {
                let g = h / self.group();
                let st = &mut state[h * n * n..(h + 1) * n * n];
                let ks = &k[s * kw + g * n..s * kw + (g + 1) * n];
                let vs = &v[s * kw + g * n..s * kw + (g + 1) * n];
                for (a, &ka) in ks.iter().enumerate() {
                    for (b, &vb) in vs.iter().enumerate() {
                        st[a * n + b] += ka * vb;
                    }
                }
                let qs = &q[s * qw + h * n..s * qw + (h + 1) * n];
                let out = &mut heads_out[s * qw + h * n..s * qw + (h + 1) * n];
                for (a, &qa) in qs.iter().enumerate() {
                    for (b, o) in out.iter_mut().enumerate() {
                        *o += self.scale * qa * st[a * n + b];
                    }
                }
            }
        }
        self.output(&heads_out, t)
    }

    /// Softmax-free attention, masked quadratic form.
    pub fn linear_forward_quadratic(&self, o: &[T]) -> Vec<T> {
        let t = o.len() / self.d_model;
        let n = self.head_dim;
        let (q, k, v) = self.project(o, t);
        let (qw, kw) = (self.q_width(), self.kv_width());
        let mut heads_out = vec![T::zero(); t * qw];
        for h in 0..self.heads {
            let g = h / self.group();
            for i in 0..t {
                let qi = &q[i * qw + h * n..i * qw + (h + 1) * n];
                for s in 0..=i {
                    let w = self.scale * dot(qi, &k[s * kw + g * n..s * kw + (g + 1) * n]);
                    let out = &mut heads_out[i * qw + h * n..i * qw + (h + 1) * n];
                    for (o, &x) in out.iter_mut().zip(&v[s * kw + g * n..s * kw + (g + 1) * n]) {
                        *o += w * x;
                    }
                }
            }
        }
        self.output(&heads_out, t)
    }
}

/// Per-head causal softmax attention on already projected rows.
/// Returns the concatenated head outputs and the probabilities (`H × T × T`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    t: usize,
    heads: usize,
    kv_heads: usize,
    n: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let group = heads / kv_heads;
    let (qw, kw) = (heads * n, kv_heads * n);
    let mut probs = vec![T::zero(); heads * t * t];
    let mut out = vec![T::zero(); t * qw];
    for h in 0..heads {
        let g = h / group;
        for i in 0..t {
            let qi = &q[i * qw + h * n..i * qw + (h + 1) * n];
            let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            for (u, pu) in p.iter_mut().enumerate() {
                *pu = dot(qi, &k[u * kw + g * n..u * kw + (g + 1) * n]) * scale;
            }
            softmax_in_place(p);
            let o = &mut out[i * qw + h * n..i * qw + (h + 1) * n];
            for (u, &pu) in p.iter().enumerate() {
                for (oo, &x) in o.iter_mut().zip(&v[u * kw + g * n..u * kw + (g + 1) * n]) {
                    *oo += pu * x;
                }
            }
        }
    }
    (out, probs)
}

/// Causal softmax attention: `T × D` in, `T × D` out.
pub fn mha_forward<T: Scalar>(w: &AttentionWeights<T>, o: &[T]) -> Vec<T> {
    w.forward(o)
}

/// Incremental attention for position `t` (1-based); the cache must hold `t-1` positions.
pub fn mha_step<T: Scalar>(w: &AttentionWeights<T>, o_t: &[T], t: usize, cache: &mut KvLayer<T>) -> Result<Vec<T>> {
    if cache.len + 1 != t {
        return Err(Error::CacheLength {
            expected: t.saturating_sub(1),
            actual: cache.len,
        });
    }
    Ok(w.step(o_t, cache))
}

/// Linearized attention, recurrent form.
pub fn linear_attention_forward<T: Scalar>(w: &AttentionWeights<T>, o: &[T]) -> Vec<T> {
    w.linear_forward_recurrent(o)
}

/// Keys and values of one attention layer, position-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KvLayer<T> {
    k: Vec<T>,
    v: Vec<T>,
    width: usize,
    len: usize,
}

impl<T: Scalar> KvLayer<T> {
    pub fn new(width: usize) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            width,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, k: &[T], v: &[T]) {
        debug_assert_eq!(k.len(), self.width);
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
        self.len += 1;
    }

    /// Keeps the first `t` positions (no-op when already shorter).
    pub fn truncate(&mut self, t: usize) {
        let t = t.min(self.len);
        self.k.truncate(t * self.width);
        self.v.truncate(t * self.width);
        self.len = t;
    }
}

/// One [`KvLayer`] per attention layer; all layers share a length.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    pub layers: Vec<KvLayer<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(layers: usize, width: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| KvLayer::new(width)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, KvLayer::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncate(&mut self, t: usize) {
        for l in &mut self.layers {
            l.truncate(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(rng: &mut ChaCha8Rng, d: usize, heads: usize, kv: usize, n: usize) -> AttentionWeights<f64> {
        let mut m = |len: usize| (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
        AttentionWeights {
            d_model: d,
            heads,
            kv_heads: kv,
            head_dim: n,
            wq: m(d * heads * n),
            wk: m(d * kv * n),
            wv: m(d * kv * n),
            wo: m(heads * n * d),
            scale: 1.0 / (n as f64).sqrt(),
            rope: None,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<f64> {
        (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Per-position, per-head loop straight off the attention definition.
    fn loop_oracle(w: &AttentionWeights<f64>, o: &[f64]) -> Vec<f64> {
        let (d, n) = (w.d_model, w.head_dim);
        let t = o.len() / d;
        let mut y = vec![0.0; t * d];
        for h in 0..w.heads {
            let hp = w.head(h);
            let proj = |m: &[f64], row: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..d).map(|c| m[i * d + c] * row[c]).sum()).collect() };
            for i in 0..t {
                let q = proj(&hp.w_q, &o[i * d..(i + 1) * d]);
                let scores: Vec<f64> = (0..=i)
                    .map(|s| {
                        let k = proj(&hp.w_k, &o[s * d..(s + 1) * d]);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (n as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                let mut head_out = vec![0.0; n];
                for (s, sc) in scores.iter().enumerate() {
                    let v = proj(&hp.w_v, &o[s * d..(s + 1) * d]);
                    for c in 0..n {
                        head_out[c] += (sc - mx).exp() / z * v[c];
                    }
                }
                for c in 0..d {
                    y[i * d + c] += (0..n).map(|r| hp.w_o[r * d + c] * head_out[r]).sum::<f64>();
                }
            }
        }
        y
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn single_position_is_value_through_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&mut rng, 8, 2, 2, 4);
        let o = random_input(&mut rng, 1, 8);
        let y = w.forward(&o);
        let mut v = vec![0.0; 8];
        vec_mat(&o, &w.wv, &mut v);
        let mut expect = vec![0.0; 8];
        vec_mat(&v, &w.wo, &mut expect);
        assert!(max_rel(&y, &expect) < 1e-12);
    }

    #[test]
    fn identical_positions_split_attention_evenly() {
        let q = [1.0f64, 2.0];
        let k = [0.5f64, 0.5, 0.5, 0.5];
        let v = [1.0f64, 0.0, 3.0, 4.0];
        let (_, p) = causal_attention_core(&[0.0, 0.0, q[0], q[1]], &k, &v, 2, 1, 1, 2, 1.0);
        assert_eq!(&p[2..4], &[0.5, 0.5]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&mut rng, 8, 2, 2, 4);
        let o = random_input(&mut rng, 6, 8);
        assert!(max_rel(&w.forward(&o), &loop_oracle(&w, &o)) < 1e-5);
        let g = random_weights(&mut rng, 8, 4, 2, 2);
        assert!(max_rel(&g.forward(&o), &loop_oracle(&g, &o)) < 1e-5);
    }

    #[test]
    fn steps_match_batch_and_truncate_replays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = random_weights(&mut rng, 8, 4, 2, 2);
        w.rope = Some(10_000.0);
        let o = random_input(&mut rng, 8, 8);
        let batch = w.forward(&o);
        let mut cache = KvLayer::new(4);
        assert!(matches!(mha_step(&w, &o[..8], 2, &mut cache), Err(Error::CacheLength { .. })));
        let mut stepped = Vec::new();
        for t in 0..8 {
            stepped.extend(mha_step(&w, &o[t * 8..(t + 1) * 8], t + 1, &mut cache).unwrap());
        }
        assert!(max_rel(&stepped, &batch) < 1e-5);

        let mut edited = o.clone();
        for x in &mut edited[5 * 8..] {
            *x = -*x;
        }
        cache.truncate(5);
        let batch2 = w.forward(&edited);
        for t in 5..8 {
            let y = mha_step(&w, &edited[t * 8..(t + 1) * 8], t + 1, &mut cache).unwrap();
            assert!(max_rel(&y, &batch2[t * 8..(t + 1) * 8]) < 1e-5);
        }
    }

    #[test]
    fn linear_attention_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_weights(&mut rng, 8, 4, 2, 2);
        let o = random_input(&mut rng, 7, 8);
        let r = w.linear_forward_recurrent(&o);
        let q = w.linear_forward_quadratic(&o);
        assert!(max_rel(&r, &q) < 1e-5);
    }

    #[test]
    fn linear_attention_single_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&mut rng, 4, 1, 1, 4);
        let o = random_input(&mut rng, 1, 4);
        let y = linear_attention_forward(&w, &o);
        let hp = w.head(0);
        let proj = |m: &[f64]| -> Vec<f64> { (0..4).map(|i| (0..4).map(|c| m[i * 4 + c] * o[c]).sum()).collect() };
        let (q, k, v) = (proj(&hp.w_q), proj(&hp.w_k), proj(&hp.w_v));
        let qk: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        let expect: Vec<f64> = (0..4).map(|c| (0..4).map(|r| hp.w_o[r * 4 + c] * qk * v[r]).sum()).collect();
        assert!(max_rel(&y, &expect) < 1e-12);
    }

    #[test]
    fn orthogonal_keys_give_zero_output() {
        // D=2, N=2: queries read coordinate 0, keys read coordinate 1.
        let w = AttentionWeights {
            d_model: 2,
            heads: 1,
            kv_heads: 1,
            head_dim: 2,
            wq: vec![1.0, 0.0, 0.0, 0.0],
            wk: vec![0.0, 0.0, 0.0, 1.0],
            wv: vec![1.0, 0.0, 0.0, 1.0],
            wo: vec![1.0, 0.0, 0.0, 1.0],
            scale: 1.0 / 2f64.sqrt(),
            rope: None,
        };
        let o = [1.0f64, 2.0, -3.0, 0.5, 0.25, 4.0];
        assert!(linear_attention_forward(&w, &o).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gqa_with_full_kv_is_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_weights(&mut rng, 8, 2, 2, 4);
        for h in 0..2 {
            assert_eq!(w.head(h).kv_group_index, h);
        }
        let o = random_input(&mut rng, 5, 8);
        assert!(max_rel(&w.forward(&o), &loop_oracle(&w, &o)) < 1e-12);
    }

    #[test]
    fn rope_inverse_round_trips() {
        let mut h = [0.3f64, -1.2, 0.7, 2.0];
        let orig = h;
        rotate_pairs(&mut h, 7, 10_000.0, false);
        rotate_pairs(&mut h, 7, 10_000.0, true);
        for (a, b) in h.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
