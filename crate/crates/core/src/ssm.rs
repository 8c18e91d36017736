//! Selective state-space heads: discretization, the sequential scan and its
//! adjoint, single-step inference with a circular convolution buffer, and the
//! range kernel used by speculative verification.
//!
//! Per head the channel axis has size `N` (the value path `x`) and the state
//! axis has size `N'` (`B`, `C`, `Δ`). State `h` is `N × N'`, row-major.

use std::cell::Cell;

use crate::autodiff::ScanShape;
use crate::error::{Error, Result};
use crate::scalar::{silu, softplus, Scalar};
use crate::tensor::vec_mat;
use crate::transformer::column_block_t;

/// `Ā`, `B̄` (`N × N'`) and `C` (`N'`) for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStep<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
}

/// Zero-order hold for `A`, Euler for `B`. Requires `Δ > 0`.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], c: &[T], delta: &[T]) -> Result<DiscreteStep<T>> {
    if let Some(&d) = delta.iter().find(|&&d| d <= T::zero() || d.is_nan()) {
        return Err(Error::NonPositiveDelta(d.as_f64()));
    }
    discretize_unchecked(a, b, c, delta)
}

fn discretize_unchecked<T: Scalar>(a: &[T], b: &[T], c: &[T], delta: &[T]) -> Result<DiscreteStep<T>> {
    let ns = delta.len();
    if b.len() != ns || c.len() != ns || ns == 0 || !a.len().is_multiple_of(ns) {
        return Err(Error::LengthMismatch {
            what: "discretize state axis",
            left: a.len(),
            right: ns,
        });
    }
    let a_bar = a.iter().enumerate().map(|(i, &x)| (delta[i % ns] * x).exp()).collect();
    let b_bar = (0..a.len()).map(|i| delta[i % ns] * b[i % ns]).collect();
    Ok(DiscreteStep {
        a_bar,
        b_bar,
        c: c.to_vec(),
    })
}

/// One recurrence update for a single head, `h ← Ā⊙h + B̄·x`, `y = h·C`.
/// The discretized terms are formed on the fly.
#[inline]
pub fn recurrence_step<T: Scalar>(a: &[T], x: &[T], b: &[T], c: &[T], delta: &[T], h: &mut [T], y: &mut [T]) {
    let ns = delta.len();
    for (n, (hr, ar)) in h.chunks_exact_mut(ns).zip(a.chunks_exact(ns)).enumerate() {
        let xn = x[n];
        let mut acc = T::zero();
        for p in 0..ns {
            let hv = (delta[p] * ar[p]).exp() * hr[p] + delta[p] * b[p] * xn;
            hr[p] = hv;
            acc += c[p] * hv;
        }
        y[n] = acc;
    }
}

/// Multi-head sequential scan. Returns `y` (`T × H·N`) and every state
/// `h_0 … h_T` (`(T+1) × H × N × N'`), which the adjoint consumes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<T: Scalar>(
    x: &[T],
    b: &[T],
    c: &[T],
    delta: &[T],
    a: &[T],
    h0: Option<&[T]>,
    t: usize,
    shape: ScanShape,
) -> (Vec<T>, Vec<T>) {
    let ScanShape {
        heads,
        channels: n,
        state: ns,
    } = shape;
    let hs = n * ns;
    let mut states = vec![T::zero(); (t + 1) * heads * hs];
    if let Some(h0) = h0 {
        states[..heads * hs].copy_from_slice(h0);
    }
    let mut y = vec![T::zero(); t * heads * n];
    for s in 0..t {
        let (prev, next) = states.split_at_mut((s + 1) * heads * hs);
        let cur = &mut next[..heads * hs];
        cur.copy_from_slice(&prev[s * heads * hs..]);
        for h in 0..heads {
            let r = s * heads + h;
            recurrence_step(
                &a[h * hs..(h + 1) * hs],
                &x[r * n..(r + 1) * n],
                &b[r * ns..(r + 1) * ns],
                &c[r * ns..(r + 1) * ns],
                &delta[r * ns..(r + 1) * ns],
                &mut cur[h * hs..(h + 1) * hs],
                &mut y[r * n..(r + 1) * n],
            );
        }
    }
    (y, states)
}

pub(crate) struct ScanGrads<T> {
    pub x: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub h0: Vec<T>,
}

/// Adjoint of [`scan_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Scalar>(
    gy: &[T],
    x: &[T],
    b: &[T],
    c: &[T],
    delta: &[T],
    a: &[T],
    states: &[T],
    t: usize,
    shape: ScanShape,
) -> ScanGrads<T> {
    let ScanShape {
        heads,
        channels: n,
        state: ns,
    } = shape;
    let hs = n * ns;
    let mut g = ScanGrads {
        x: vec![T::zero(); x.len()],
        b: vec![T::zero(); b.len()],
        c: vec![T::zero(); c.len()],
        delta: vec![T::zero(); delta.len()],
        a: vec![T::zero(); a.len()],
        h0: vec![T::zero(); heads * hs],
    };
    // Adjoint of the running state, carried backwards through time.
    let mut gh = vec![T::zero(); heads * hs];
    for s in (0..t).rev() {
        for h in 0..heads {
            let r = s * heads + h;
            let h_cur = &states[((s + 1) * heads + h) * hs..((s + 1) * heads + h + 1) * hs];
            let h_prev = &states[(s * heads + h) * hs..(s * heads + h + 1) * hs];
            for i in 0..n {
                let gyn = gy[r * n + i];
                let xn = x[r * n + i];
                for p in 0..ns {
                    let e = h * hs + i * ns + p;
                    let (dp, bp, cp, ap) = (delta[r * ns + p], b[r * ns + p], c[r * ns + p], a[e]);
                    let abar = (dp * ap).exp();
                    let mut ghv = gh[e] + gyn * cp;
                    g.c[r * ns + p] += gyn * h_cur[i * ns + p];
                    let hp = h_prev[i * ns + p];
                    g.delta[r * ns + p] += ghv * (hp * abar * ap + bp * xn);
                    g.a[e] += ghv * hp * abar * dp;
                    g.b[r * ns + p] += ghv * dp * xn;
                    g.x[r * n + i] += ghv * dp * bp;
                    ghv *= abar;
                    gh[e] = ghv;
                }
            }
        }
    }
    g.h0 = gh;
    g
}

/// Single-head scan: `x` is `T × N`; `b`, `c`, `delta` are `T × N'`; `a`
/// and the optional `h0` are `N × N'`. Returns `y` (`T × N`) and `h_T`.
pub fn ssm_scan<T: Scalar>(a: &[T], x: &[T], b: &[T], c: &[T], delta: &[T], h0: Option<&[T]>, state: usize) -> Result<(Vec<T>, Vec<T>)> {
    if state == 0 || !a.len().is_multiple_of(state) || !b.len().is_multiple_of(state) {
        return Err(Error::LengthMismatch {
            what: "ssm_scan state axis",
            left: a.len(),
            right: state,
        });
    }
    let n = a.len() / state;
    let t = b.len() / state;
    if x.len() != t * n || c.len() != b.len() || delta.len() != b.len() || h0.is_some_and(|h| h.len() != a.len()) {
        return Err(Error::LengthMismatch {
            what: "ssm_scan inputs",
            left: x.len(),
            right: t * n,
        });
    }
    let shape = ScanShape {
        heads: 1,
        channels: n,
        state,
    };
    let (y, states) = scan_forward(x, b, c, delta, a, h0, t, shape);
    Ok((y, states[t * a.len()..].to_vec()))
}

/// Depthwise causal convolution over `T × C` without activation; tap `L-1`
/// multiplies the current position.
pub(crate) fn causal_conv_full<T: Scalar>(x: &[T], c: usize, w: &[T], l: usize, bias: &[T]) -> Vec<T> {
    let t = x.len().checked_div(c).unwrap_or(0);
    let mut out = vec![T::zero(); x.len()];
    for ti in 0..t {
        for ch in 0..c {
            let mut acc = bias[ch];
            for tap in 0..l {
                if let Some(src) = (ti + tap + 1).checked_sub(l) {
                    acc += w[ch * l + tap] * x[src * c + ch];
                }
            }
            out[ti * c + ch] = acc;
        }
    }
    out
}

/// Circular buffer of the last `L` pre-convolution inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRing<T> {
    buf: Vec<T>,
    channels: usize,
    len: usize,
    /// Slot the next input is written to (the oldest entry).
    write: usize,
}

impl<T: Scalar> ConvRing<T> {
    pub fn new(channels: usize, len: usize) -> Self {
        Self {
            buf: vec![T::zero(); channels * len],
            channels,
            len,
            write: 0,
        }
    }

    /// Inputs from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &[T]> {
        (0..self.len).map(move |i| {
            let s = (self.write + i) % self.len;
            &self.buf[s * self.channels..(s + 1) * self.channels]
        })
    }

    /// Stores `x` and returns the pre-activation convolution at this position.
    pub fn push_and_convolve(&mut self, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
        let (c, l) = (self.channels, self.len);
        if l == 0 {
            return bias.to_vec();
        }
        self.buf[self.write * c..(self.write + 1) * c].copy_from_slice(x);
        self.write = (self.write + 1) % l;
        let mut out = bias.to_vec();
        for tap in 0..l {
            let s = (self.write + tap) % l;
            for ch in 0..c {
                out[ch] += w[ch * l + tap] * self.buf[s * c + ch];
            }
        }
        out
    }
}

/// One streaming convolution step followed by SiLU.
pub fn causal_conv_step<T: Scalar>(w: &[T], bias: &[T], x: &[T], ring: &mut ConvRing<T>) -> Vec<T> {
    ring.push_and_convolve(x, w, bias).into_iter().map(silu).collect()
}

/// Dynamics of one head. Projections live in [`SsmLayerWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct SsmHeadParams<T> {
    pub channels: usize,
    pub state: usize,
    pub conv_len: usize,
    /// Continuous-time decay, `N × N'`, every entry negative.
    pub a: Vec<T>,
    /// Step-size projection `N × N'` and bias `N'`.
    pub dt_w: Vec<T>,
    pub dt_b: Vec<T>,
    /// Depthwise kernel `N × L` and bias `N`.
    pub conv_w: Vec<T>,
    pub conv_b: Vec<T>,
    /// `N × N'` maps for `B` and `C`, present only when `N' ≠ N`.
    pub resample_b: Option<Vec<T>>,
    pub resample_c: Option<Vec<T>>,
    /// Degenerate mode: `Δ ≡ 1` and the convolution stage is skipped.
    pub linear_reduction: bool,
}

/// Recurrent state of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmHeadState<T> {
    pub h: Vec<T>,
    pub ring: ConvRing<T>,
    pub position: usize,
}

impl<T: Scalar> SsmHeadState<T> {
    pub fn new(p: &SsmHeadParams<T>) -> Self {
        Self {
            h: vec![T::zero(); p.channels * p.state],
            ring: ConvRing::new(p.channels, p.conv_len),
            position: 0,
        }
    }
}

thread_local! {
    static SNAPSHOTS: Cell<usize> = const { Cell::new(0) };
}

/// Number of head states copied by [`multistep`] on this thread since the last reset.
pub fn snapshot_count() -> usize {
    SNAPSHOTS.with(Cell::get)
}

pub fn reset_snapshot_count() {
    SNAPSHOTS.with(|c| c.set(0));
}

fn snapshot<T: Clone>(s: &T) -> T {
    SNAPSHOTS.with(|c| c.set(c.get() + 1));
    s.clone()
}

impl<T: Scalar> SsmHeadParams<T> {
    /// Post-convolution value path.
    fn conv(&self, x_raw: &[T], ring: &mut ConvRing<T>) -> Vec<T> {
        if self.linear_reduction {
            x_raw.to_vec()
        } else {
            causal_conv_step(&self.conv_w, &self.conv_b, x_raw, ring)
        }
    }

    pub fn delta(&self, x_post: &[T]) -> Vec<T> {
        if self.linear_reduction {
            return vec![T::one(); self.state];
        }
        let mut d = vec![T::zero(); self.state];
        vec_mat(x_post, &self.dt_w, &mut d);
        for (o, &bias) in d.iter_mut().zip(&self.dt_b) {
            *o = softplus(*o + bias);
        }
        d
    }

    fn resample(&self, v: &[T], m: &Option<Vec<T>>) -> Vec<T> {
        match m {
            Some(m) => {
                let mut out = vec![T::zero(); self.state];
                vec_mat(v, m, &mut out);
                out
            }
            None => v.to_vec(),
        }
    }

    /// Conv → Δ → recurrence for one position. `b_raw`, `c_raw` are the
    /// head's `N`-wide projections before resampling.
    pub fn step(&self, x_raw: &[T], b_raw: &[T], c_raw: &[T], state: &mut SsmHeadState<T>) -> Vec<T> {
        let x = self.conv(x_raw, &mut state.ring);
        let delta = self.delta(&x);
        let b = self.resample(b_raw, &self.resample_b);
        let c = self.resample(c_raw, &self.resample_c);
        let mut y = vec![T::zero(); self.channels];
        recurrence_step(&self.a, &x, &b, &c, &delta, &mut state.h, &mut y);
        state.position += 1;
        y
    }

    /// Whole-sequence evaluation from a zero state through the batch scan.
    pub fn forward_batch(&self, x_raw: &[T], b_raw: &[T], c_raw: &[T]) -> Vec<T> {
        let n = self.channels;
        let t = x_raw.len() / n;
        let x = if self.linear_reduction {
            x_raw.to_vec()
        } else {
            causal_conv_full(x_raw, n, &self.conv_w, self.conv_len, &self.conv_b)
                .into_iter()
                .map(silu)
                .collect()
        };
        let mut b = Vec::with_capacity(t * self.state);
        let mut c = Vec::with_capacity(t * self.state);
        let mut delta = Vec::with_capacity(t * self.state);
        for r in 0..t {
            b.extend(self.resample(&b_raw[r * n..(r + 1) * n], &self.resample_b));
            c.extend(self.resample(&c_raw[r * n..(r + 1) * n], &self.resample_c));
            delta.extend(self.delta(&x[r * n..(r + 1) * n]));
        }
        let shape = ScanShape {
            heads: 1,
            channels: n,
            state: self.state,
        };
        scan_forward(&x, &b, &c, &delta, &self.a, None, t, shape).0
    }
}

/// Result of [`multistep`]: outputs for positions `max(j, i+1) ..= k`
/// and the two retained states.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStep<T> {
    pub outputs: Vec<T>,
    pub state_j: SsmHeadState<T>,
    pub state_k: SsmHeadState<T>,
}

fn check_range<T>(state: &SsmHeadState<T>, rows: usize, i: usize, j: usize, k: usize) -> Result<()> {
    if !(i <= j && j <= k) {
        return Err(Error::IndexOrder { i, j, k });
    }
    if state.position != i {
        return Err(Error::CacheLength {
            expected: i,
            actual: state.position,
        });
    }
    if rows != k - i {
        return Err(Error::LengthMismatch {
            what: "multistep input rows vs k - i",
            left: rows,
            right: k - i,
        });
    }
    Ok(())
}

/// Advances `state` (at position `i`) through positions `i+1..=k` in place,
/// copying it exactly once at position `j`. Returns every output from `i+1`.
#[allow(clippy::too_many_arguments)]
pub fn multistep_in_place<T: Scalar>(
    p: &SsmHeadParams<T>,
    state: &mut SsmHeadState<T>,
    x_raw: &[T],
    b_raw: &[T],
    c_raw: &[T],
    i: usize,
    j: usize,
    k: usize,
) -> Result<(Vec<T>, SsmHeadState<T>)> {
    let n = p.channels;
    check_range(state, x_raw.len() / n.max(1), i, j, k)?;
    let mut outputs = Vec::with_capacity((k - i) * n);
    let mut state_j = (j == i).then(|| snapshot(&*state));
    for r in 0..k - i {
        let rows = r * n..(r + 1) * n;
        outputs.extend(p.step(&x_raw[rows.clone()], &b_raw[rows.clone()], &c_raw[rows], state));
        if state.position == j {
            state_j = Some(snapshot(&*state));
        }
    }
    Ok((outputs, state_j.expect("j lies in i..=k")))
}

/// Range kernel: from `state_i` at position `i`, consumes raw inputs for
/// positions `i+1..=k` (rows of `x_raw`, `b_raw`, `c_raw`, each `N` wide) and
/// returns outputs for `max(j, i+1)..=k` plus the states at `j` and `k`.
#[allow(clippy::too_many_arguments)]
pub fn multistep<T: Scalar>(
    p: &SsmHeadParams<T>,
    mut state_i: SsmHeadState<T>,
    x_raw: &[T],
    b_raw: &[T],
    c_raw: &[T],
    i: usize,
    j: usize,
    k: usize,
) -> Result<MultiStep<T>> {
    let (all, state_j) = multistep_in_place(p, &mut state_i, x_raw, b_raw, c_raw, i, j, k)?;
    let first = j.max(i + 1);
    let skip = (first - i - 1) * p.channels;
    Ok(MultiStep {
        outputs: all.get(skip..).map_or_else(Vec::new, <[T]>::to_vec),
        state_j,
        state_k: state_i,
    })
}

/// One SSM layer: shared-input projections and per-head dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmLayerWeights<T> {
    pub d_model: usize,
    /// `D × H·N` projections for the value, `B` and `C` paths.
    pub wx: Vec<T>,
    pub wb: Vec<T>,
    pub wc: Vec<T>,
    /// `H·N × D` output projection.
    pub wo: Vec<T>,
    pub heads: Vec<SsmHeadParams<T>>,
}

/// Which per-head projection to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    X,
    B,
    C,
}

impl<T: Scalar> SsmLayerWeights<T> {
    fn width(&self) -> usize {
        self.heads.iter().map(|h| h.channels).sum()
    }

    fn n(&self) -> usize {
        self.heads.first().map_or(0, |h| h.channels)
    }

    /// `N × D` projection matrix of head `h`.
    pub fn head_projection(&self, h: usize, which: Projection) -> Vec<T> {
        let m = match which {
            Projection::X => &self.wx,
            Projection::B => &self.wb,
            Projection::C => &self.wc,
        };
        column_block_t(m, self.d_model, self.width(), h * self.n(), self.n())
    }

    pub fn init_states(&self) -> Vec<SsmHeadState<T>> {
        self.heads.iter().map(SsmHeadState::new).collect()
    }

    fn project(&self, o: &[T]) -> [Vec<T>; 3] {
        let w = self.width();
        let mut out = [vec![T::zero(); w], vec![T::zero(); w], vec![T::zero(); w]];
        vec_mat(o, &self.wx, &mut out[0]);
        vec_mat(o, &self.wb, &mut out[1]);
        vec_mat(o, &self.wc, &mut out[2]);
        out
    }

    /// One position through every head, summed through `wo`.
    pub fn step(&self, o: &[T], states: &mut [SsmHeadState<T>]) -> Vec<T> {
        let n = self.n();
        let [x, b, c] = self.project(o);
        let mut ys = vec![T::zero(); self.width()];
        for (h, (p, st)) in self.heads.iter().zip(states.iter_mut()).enumerate() {
            let r = h * n..(h + 1) * n;
            let y = p.step(&x[r.clone()], &b[r.clone()], &c[r.clone()], st);
            ys[r].copy_from_slice(&y);
        }
        let mut out = vec![T::zero(); self.d_model];
        vec_mat(&ys, &self.wo, &mut out);
        out
    }

    /// Layer-level range kernel over rows `o` for positions `i+1..=k`:
    /// returns every output row and the per-head states at `j`; `states`
    /// ends at `k`.
    pub fn multistep(&self, o: &[T], states: &mut [SsmHeadState<T>], i: usize, j: usize) -> Result<(Vec<T>, Vec<SsmHeadState<T>>)> {
        let (d, n, w) = (self.d_model, self.n(), self.width());
        let rows = o.len() / d;
        let k = i + rows;
        let mut xs = vec![Vec::with_capacity(rows * n); self.heads.len()];
        let mut bs = xs.clone();
        let mut cs = xs.clone();
        for r in 0..rows {
            let [x, b, c] = self.project(&o[r * d..(r + 1) * d]);
            for h in 0..self.heads.len() {
                xs[h].extend_from_slice(&x[h * n..(h + 1) * n]);
                bs[h].extend_from_slice(&b[h * n..(h + 1) * n]);
                cs[h].extend_from_slice(&c[h * n..(h + 1) * n]);
            }
        }
        let mut ys = vec![T::zero(); rows * w];
        let mut snaps = Vec::with_capacity(self.heads.len());
        for (h, (p, st)) in self.heads.iter().zip(states.iter_mut()).enumerate() {
            let (out, sj) = multistep_in_place(p, st, &xs[h], &bs[h], &cs[h], i, j, k)?;
            for r in 0..rows {
                ys[r * w + h * n..r * w + (h + 1) * n].copy_from_slice(&out[r * n..(r + 1) * n]);
            }
            snaps.push(sj);
        }
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            vec_mat(&ys[r * w..(r + 1) * w], &self.wo, &mut out[r * d..(r + 1) * d]);
        }
        Ok((out, snaps))
    }
}
