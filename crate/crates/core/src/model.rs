//! Layer-stacked language model whose token mixers are attention, selective
//! SSM, or absent. A pure-attention stack is the teacher.
//!
//! Parameters live in a flat name → tensor map:
//!
//! | name                          | shape         |
//! |-------------------------------|---------------|
//! | `embed`                       | `V × D`       |
//! | `lm_head`                     | `D × V`       |
//! | `final_norm`                  | `D`           |
//! | `layers.{l}.norm1/norm2`      | `D`           |
//! | `layers.{l}.mlp.gate/up`      | `D × F`       |
//! | `layers.{l}.mlp.down`         | `F × D`       |
//! | `layers.{l}.attn.wq`          | `D × H·N`     |
//! | `layers.{l}.attn.wk/wv`       | `D × Hkv·N`   |
//! | `layers.{l}.attn.wo`          | `H·N × D`     |
//! | `layers.{l}.ssm.wx/wb/wc`     | `D × H·N`     |
//! | `layers.{l}.ssm.wo`           | `H·N × D`     |
//! | `layers.{l}.ssm.a_log`        | `H × N × N'`  |
//! | `layers.{l}.ssm.dt_w`         | `H × N × N'`  |
//! | `layers.{l}.ssm.dt_b`         | `H·N'`        |
//! | `layers.{l}.ssm.conv_w`       | `H·N × L`     |
//! | `layers.{l}.ssm.conv_b`       | `H·N`         |
//! | `layers.{l}.ssm.resample_b/c` | `H × N × N'` (only when `N' ≠ N`) |

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionShape, Graph, ScanShape, Var};
use crate::error::{Error, Result};
use crate::scalar::{inverse_softplus, Scalar};
use crate::ssm::{SsmHeadParams, SsmLayerWeights};
use crate::tensor::Tensor;
use crate::transformer::AttentionWeights;

/// Token mixer of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Attention,
    Ssm,
    /// No mixer: the layer is only its MLP.
    None,
}

pub const MLP_GROUP: &str = "mlp";

fn default_eps() -> f64 {
    1e-5
}

/// Dimensions and layer schedule shared by teacher and hybrid models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridModelSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// `N`.
    pub head_dim: usize,
    /// `N'`.
    pub state_dim: usize,
    pub conv_len: usize,
    pub mlp_hidden: usize,
    pub layer_kinds: Vec<LayerKind>,
    /// Rotary base; absent means no positional encoding.
    #[serde(default)]
    pub rope: Option<f64>,
    /// Scale attention logits by `1/√D` instead of `1/√N`.
    #[serde(default)]
    pub scale_by_model_dim: bool,
    /// SSM layers run with `Δ ≡ 1` and no convolution stage.
    #[serde(default)]
    pub linear_reduction: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Parameter groups excluded from training.
    #[serde(default)]
    pub frozen_groups: BTreeSet<String>,
}

pub type ModelSpec = HybridModelSpec;

impl HybridModelSpec {
    /// Pure-attention spec with `N' = N` and `L = 4`.
    pub fn teacher(vocab: usize, d_model: usize, layers: usize, heads: usize, kv_heads: usize, mlp_hidden: usize) -> Self {
        Self {
            vocab,
            d_model,
            n_heads: heads,
            n_kv_heads: kv_heads,
            head_dim: d_model / heads,
            state_dim: d_model / heads,
            conv_len: 4,
            mlp_hidden,
            layer_kinds: vec![LayerKind::Attention; layers],
            rope: None,
            scale_by_model_dim: false,
            linear_reduction: false,
            norm_eps: default_eps(),
            frozen_groups: BTreeSet::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_kinds.len()
    }

    pub fn attention_fraction(&self) -> f64 {
        let n = self.layer_kinds.len();
        if n == 0 {
            return 0.0;
        }
        self.layer_kinds.iter().filter(|k| **k == LayerKind::Attention).count() as f64 / n as f64
    }

    pub fn attn_scale(&self) -> f64 {
        let d = if self.scale_by_model_dim { self.d_model } else { self.head_dim };
        1.0 / (d as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab == 0 || self.d_model == 0 || self.layer_kinds.is_empty() {
            return bad("vocab, d_model and layer count must be positive");
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad("n_heads must be a positive multiple of n_kv_heads");
        }
        if self.n_heads * self.head_dim != self.d_model {
            return bad("n_heads * head_dim must equal d_model");
        }
        if self.state_dim == 0 {
            return bad("state_dim must be positive");
        }
        if self.linear_reduction && self.state_dim != self.head_dim {
            return bad("linear_reduction requires state_dim == head_dim");
        }
        if self.rope.is_some() && !self.head_dim.is_multiple_of(2) {
            return bad("rotary embeddings need an even head_dim");
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (v, d, f) = (self.vocab, self.d_model, self.mlp_hidden);
        let (h, n, ns) = (self.n_heads, self.head_dim, self.state_dim);
        let kv = self.n_kv_heads * n;
        let mut m = BTreeMap::new();
        m.insert("embed".into(), vec![v, d]);
        m.insert("lm_head".into(), vec![d, v]);
        m.insert("final_norm".into(), vec![d]);
        for (l, kind) in self.layer_kinds.iter().enumerate() {
            let p = format!("layers.{l}");
            m.insert(format!("{p}.norm1"), vec![d]);
            m.insert(format!("{p}.norm2"), vec![d]);
            m.insert(format!("{p}.mlp.gate"), vec![d, f]);
            m.insert(format!("{p}.mlp.up"), vec![d, f]);
            m.insert(format!("{p}.mlp.down"), vec![f, d]);
            match kind {
                LayerKind::Attention => {
                    m.insert(format!("{p}.attn.wq"), vec![d, h * n]);
                    m.insert(format!("{p}.attn.wk"), vec![d, kv]);
                    m.insert(format!("{p}.attn.wv"), vec![d, kv]);
                    m.insert(format!("{p}.attn.wo"), vec![h * n, d]);
                }
                LayerKind::Ssm => {
                    for w in ["wx", "wb", "wc"] {
                        m.insert(format!("{p}.ssm.{w}"), vec![d, h * n]);
                    }
                    m.insert(format!("{p}.ssm.wo"), vec![h * n, d]);
                    m.insert(format!("{p}.ssm.a_log"), vec![h, n, ns]);
                    m.insert(format!("{p}.ssm.dt_w"), vec![h, n, ns]);
                    m.insert(format!("{p}.ssm.dt_b"), vec![h * ns]);
                    m.insert(format!("{p}.ssm.conv_w"), vec![h * n, self.conv_len]);
                    m.insert(format!("{p}.ssm.conv_b"), vec![h * n]);
                    if ns != n {
                        m.insert(format!("{p}.ssm.resample_b"), vec![h, n, ns]);
                        m.insert(format!("{p}.ssm.resample_c"), vec![h, n, ns]);
                    }
                }
                LayerKind::None => {}
            }
        }
        m
    }
}

/// Group a parameter belongs to: `mlp`, `attn`, `ssm`, `norm` or `embed`.
pub fn param_group(name: &str) -> &'static str {
    if name.contains(".mlp.") {
        MLP_GROUP
    } else if name.contains(".attn.") {
        "attn"
    } else if name.contains(".ssm.") {
        "ssm"
    } else if name.ends_with("norm") || name.ends_with("norm1") || name.ends_with("norm2") {
        "norm"
    } else {
        "embed"
    }
}

pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// A model: spec plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridLM<T> {
    pub spec: HybridModelSpec,
    pub params: ParamStore<T>,
}

/// The teacher is the all-attention case.
pub type TransformerLM<T> = HybridLM<T>;

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

/// Fresh SSM dynamics for one layer: `A = -(n'+1)`, log-uniform initial
/// `Δ ∈ [1e-3, 1e-1]`, identity conv tap, truncated-identity resampling.
pub fn init_ssm_dynamics<T: Scalar>(spec: &HybridModelSpec, rng: &mut ChaCha8Rng) -> BTreeMap<&'static str, Tensor<T>> {
    let (h, n, ns, lc) = (spec.n_heads, spec.head_dim, spec.state_dim, spec.conv_len);
    let mut m = BTreeMap::new();
    let a_log: Vec<T> = (0..h * n * ns).map(|i| T::lit(((i % ns) as f64 + 1.0).ln())).collect();
    m.insert("a_log", Tensor::new([h, n, ns], a_log).expect("shape"));
    m.insert(
        "dt_w",
        Tensor::new([h, n, ns], normal_vec(rng, h * n * ns, 0.1 / (n as f64).sqrt())).expect("shape"),
    );
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let dt_b: Vec<T> = (0..h * ns).map(|_| T::lit(inverse_softplus(rng.gen_range(lo..hi).exp()))).collect();
    m.insert("dt_b", Tensor::new([h * ns], dt_b).expect("shape"));
    let mut conv = vec![T::zero(); h * n * lc];
    if lc > 0 {
        for ch in 0..h * n {
            conv[ch * lc + lc - 1] = T::one();
        }
    }
    m.insert("conv_w", Tensor::new([h * n, lc], conv).expect("shape"));
    m.insert("conv_b", Tensor::zeros([h * n]));
    if ns != n {
        let mut eye = vec![T::zero(); h * n * ns];
        for hh in 0..h {
            for i in 0..n.min(ns) {
                eye[hh * n * ns + i * ns + i] = T::one();
            }
        }
        m.insert("resample_b", Tensor::new([h, n, ns], eye.clone()).expect("shape"));
        m.insert("resample_c", Tensor::new([h, n, ns], eye).expect("shape"));
    }
    m
}

impl<T: Scalar> HybridLM<T> {
    /// Random initialization of every parameter the spec calls for. SSM
    /// projections are drawn like attention projections (the random-init
    /// baseline); conversion overwrites them.
    pub fn init(spec: HybridModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec.num_layers() as f64;
        let mut params = BTreeMap::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let fan_in = shape[0] as f64;
            let t = if name.ends_with("norm") || name.ends_with("norm1") || name.ends_with("norm2") {
                Tensor::full(shape, T::one())
            } else if name == "embed" {
                Tensor::new(shape, normal_vec(rng, n, 1.0))?
            } else if name.contains(".ssm.") && !["wx", "wb", "wc", "wo"].iter().any(|w| name.ends_with(&format!(".{w}"))) {
                // filled below from init_ssm_dynamics
                continue;
            } else {
                let mut std = 1.0 / fan_in.sqrt();
                if name.ends_with(".wo") || name.ends_with(".down") {
                    std /= (2.0 * layers).sqrt();
                }
                Tensor::new(shape, normal_vec(rng, n, std))?
            };
            params.insert(name, t);
        }
        for (l, kind) in spec.layer_kinds.iter().enumerate() {
            if *kind == LayerKind::Ssm {
                for (k, t) in init_ssm_dynamics::<T>(&spec, rng) {
                    params.insert(format!("layers.{l}.ssm.{k}"), t);
                }
            }
        }
        Ok(Self { spec, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.spec.frozen_groups.contains(param_group(name))
    }

    /// Pins every SSM layer to the linear-attention limit:
    /// `A = -1e-8`, `Δ ≡ 1`, convolution bypassed. Requires `N' = N`.
    pub fn apply_linear_reduction(&mut self) -> Result<()> {
        self.spec.linear_reduction = true;
        self.spec.validate()?;
        let eps = T::lit(1e-8f64.ln());
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".ssm.a_log") {
                t.data_mut().fill(eps);
            }
        }
        Ok(())
    }

    /// Places every parameter on `g`; trainable ones require gradients when `grad` is set.
    pub fn bind(&self, g: &mut Graph<T>, grad: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| {
                let rg = grad && self.is_trainable(k);
                (k.clone(), g.leaf(t.clone().with_grad(rg)))
            })
            .collect()
    }

    /// Differentiable forward pass; returns `T × V` logits.
    pub fn forward_tape(&self, g: &mut Graph<T>, vars: &BTreeMap<String, Var>, tokens: &[usize]) -> Result<Var> {
        let s = &self.spec;
        let v = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let eps = T::lit(s.norm_eps);
        let t = tokens.len();
        let (h, n, ns) = (s.n_heads, s.head_dim, s.state_dim);
        let mut x = g.embedding(v("embed")?, tokens)?;
        for (l, kind) in s.layer_kinds.iter().enumerate() {
            let p = format!("layers.{l}");
            if *kind != LayerKind::None {
                let o = g.rms_norm(x, v(&format!("{p}.norm1"))?, eps)?;
                let mixed = match kind {
                    LayerKind::Attention => {
                        let mut q = g.matmul(o, v(&format!("{p}.attn.wq"))?)?;
                        let mut k = g.matmul(o, v(&format!("{p}.attn.wk"))?)?;
                        let vv = g.matmul(o, v(&format!("{p}.attn.wv"))?)?;
                        if let Some(base) = s.rope {
                            q = g.rope(q, h, n, base, 0);
                            k = g.rope(k, s.n_kv_heads, n, base, 0);
                        }
                        let shape = AttentionShape {
                            heads: h,
                            kv_heads: s.n_kv_heads,
                            head_dim: n,
                            scale: T::lit(s.attn_scale()),
                        };
                        let a = g.causal_attention(q, k, vv, shape)?;
                        g.matmul(a, v(&format!("{p}.attn.wo"))?)?
                    }
                    LayerKind::Ssm => {
                        let mut xs = g.matmul(o, v(&format!("{p}.ssm.wx"))?)?;
                        let mut b = g.matmul(o, v(&format!("{p}.ssm.wb"))?)?;
                        let mut c = g.matmul(o, v(&format!("{p}.ssm.wc"))?)?;
                        let delta = if s.linear_reduction {
                            g.constant(Tensor::full([t, h * ns], T::one()))
                        } else {
                            let conv = g.causal_conv(xs, v(&format!("{p}.ssm.conv_w"))?, v(&format!("{p}.ssm.conv_b"))?)?;
                            xs = g.silu(conv);
                            let dt = g.head_matmul(xs, v(&format!("{p}.ssm.dt_w"))?, h)?;
                            let dt = g.add(dt, v(&format!("{p}.ssm.dt_b"))?)?;
                            g.softplus(dt)
                        };
                        if ns != n {
                            b = g.head_matmul(b, v(&format!("{p}.ssm.resample_b"))?, h)?;
                            c = g.head_matmul(c, v(&format!("{p}.ssm.resample_c"))?, h)?;
                        }
                        let ea = g.exp(v(&format!("{p}.ssm.a_log"))?);
                        let a = g.neg(ea);
                        let shape = ScanShape {
                            heads: h,
                            channels: n,
                            state: ns,
                        };
                        let y = g.ssm_scan(xs, b, c, delta, a, None, shape)?;
                        g.matmul(y, v(&format!("{p}.ssm.wo"))?)?
                    }
                    LayerKind::None => unreachable!(),
                };
                x = g.add(x, mixed)?;
            }
            let o = g.rms_norm(x, v(&format!("{p}.norm2"))?, eps)?;
            let gate = g.matmul(o, v(&format!("{p}.mlp.gate"))?)?;
            let gate = g.silu(gate);
            let up = g.matmul(o, v(&format!("{p}.mlp.up"))?)?;
            let hmid = g.mul(gate, up)?;
            let down = g.matmul(hmid, v(&format!("{p}.mlp.down"))?)?;
            x = g.add(x, down)?;
        }
        let x = g.rms_norm(x, v("final_norm")?, eps)?;
        g.matmul(x, v("lm_head")?)
    }

    /// Logits for `tokens` without gradients.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_tape(&mut g, &vars, tokens)?;
        Ok(g.value(out).clone())
    }

    pub fn attention_weights(&self, layer: usize) -> Result<AttentionWeights<T>> {
        let s = &self.spec;
        let p = format!("layers.{layer}.attn");
        let get = |w: &str| -> Result<Vec<T>> { Ok(self.param(&format!("{p}.{w}"))?.data().to_vec()) };
        Ok(AttentionWeights {
            d_model: s.d_model,
            heads: s.n_heads,
            kv_heads: s.n_kv_heads,
            head_dim: s.head_dim,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            scale: T::lit(s.attn_scale()),
            rope: s.rope,
        })
    }

    pub fn ssm_weights(&self, layer: usize) -> Result<SsmLayerWeights<T>> {
        let s = &self.spec;
        let p = format!("layers.{layer}.ssm");
        let get = |w: &str| -> Result<Vec<T>> { Ok(self.param(&format!("{p}.{w}"))?.data().to_vec()) };
        let (h, n, ns, lc) = (s.n_heads, s.head_dim, s.state_dim, s.conv_len);
        let (a_log, dt_w, dt_b, conv_w, conv_b) = (get("a_log")?, get("dt_w")?, get("dt_b")?, get("conv_w")?, get("conv_b")?);
        let (rb, rc) = if ns != n {
            (Some(get("resample_b")?), Some(get("resample_c")?))
        } else {
            (None, None)
        };
        let hs = n * ns;
        let heads = (0..h)
            .map(|i| SsmHeadParams {
                channels: n,
                state: ns,
                conv_len: lc,
                a: a_log[i * hs..(i + 1) * hs].iter().map(|&x| -x.exp()).collect(),
                dt_w: dt_w[i * hs..(i + 1) * hs].to_vec(),
                dt_b: dt_b[i * ns..(i + 1) * ns].to_vec(),
                conv_w: conv_w[i * n * lc..(i + 1) * n * lc].to_vec(),
                conv_b: conv_b[i * n..(i + 1) * n].to_vec(),
                resample_b: rb.as_ref().map(|m| m[i * hs..(i + 1) * hs].to_vec()),
                resample_c: rc.as_ref().map(|m| m[i * hs..(i + 1) * hs].to_vec()),
                linear_reduction: s.linear_reduction,
            })
            .collect();
        Ok(SsmLayerWeights {
            d_model: s.d_model,
            wx: get("wx")?,
            wb: get("wb")?,
            wc: get("wc")?,
            wo: get("wo")?,
            heads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> HybridLM<U> {
        HybridLM {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny_spec(kinds: Vec<LayerKind>) -> HybridModelSpec {
        let mut s = HybridModelSpec::teacher(11, 8, kinds.len(), 2, 1, 12);
        s.layer_kinds = kinds;
        s
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let mut s = tiny_spec(vec![LayerKind::Attention]);
        s.n_kv_heads = 3;
        assert!(s.validate().is_err());
        let mut s = tiny_spec(vec![LayerKind::Ssm]);
        s.state_dim = 5;
        s.linear_reduction = true;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_round_trips_and_rejects_unknown_keys() {
        let s = tiny_spec(vec![LayerKind::Attention, LayerKind::Ssm, LayerKind::None]);
        let js = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<HybridModelSpec>(&js).unwrap(), s);
        let mut v: serde_json::Value = serde_json::from_str(&js).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<HybridModelSpec>(v).is_err());
    }

    #[test]
    fn fraction_and_groups() {
        let s = tiny_spec(vec![LayerKind::Attention, LayerKind::Ssm, LayerKind::Attention, LayerKind::Ssm]);
        assert_eq!(s.attention_fraction(), 0.5);
        assert_eq!(param_group("layers.3.mlp.up"), "mlp");
        assert_eq!(param_group("layers.0.norm1"), "norm");
        assert_eq!(param_group("final_norm"), "norm");
        assert_eq!(param_group("embed"), "embed");
        assert_eq!(param_group("layers.1.ssm.a_log"), "ssm");
    }

    #[test]
    fn init_is_seeded_and_complete() {
        let s = tiny_spec(vec![LayerKind::Attention, LayerKind::Ssm]);
        let a = HybridLM::<f32>::init(s.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = HybridLM::<f32>::init(s.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let names: Vec<_> = a.params.keys().cloned().collect();
        let expect: Vec<_> = s.param_shapes().keys().cloned().collect();
        assert_eq!(names, expect);
        for (k, shape) in s.param_shapes() {
            assert_eq!(a.params[&k].shape(), &shape[..], "{k}");
        }
        let a_log = a.param("layers.1.ssm.a_log").unwrap();
        assert_eq!(
            a_log.data()[..4].iter().map(|x| x.exp().round()).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn initial_step_sizes_in_range() {
        let s = tiny_spec(vec![LayerKind::Ssm]);
        let m = HybridLM::<f64>::init(s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for &b in m.param("layers.0.ssm.dt_b").unwrap().data() {
            let d = crate::scalar::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&d), "{d}");
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let s = tiny_spec(vec![LayerKind::Attention, LayerKind::Ssm, LayerKind::None]);
        let m = HybridLM::<f64>::init(s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = m.logits(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 0, 10]).unwrap();
        assert_eq!(&a.data()[..3 * 11], &b.data()[..3 * 11]);
        assert_ne!(&a.data()[3 * 11..4 * 11], &b.data()[3 * 11..4 * 11]);
    }
}
