//! Incremental inference: per-layer caches, chunked evaluation with state
//! snapshots, and autoregressive generation.
//!
//! Every position goes through exactly the same arithmetic whether it is fed
//! alone or inside a chunk, so logits are bit-identical across the two paths.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HybridLM, HybridModelSpec, LayerKind};
use crate::scalar::{silu, Scalar};
use crate::ssm::{SsmHeadState, SsmLayerWeights};
use crate::tensor::{argmax, softmax_in_place, vec_mat};
use crate::transformer::{rms_norm_row, AttentionWeights, KvLayer};

#[derive(Clone)]
enum Mixer<T> {
    Attention(AttentionWeights<T>),
    Ssm(SsmLayerWeights<T>),
    None,
}

#[derive(Clone)]
struct Layer<T> {
    mixer: Mixer<T>,
    norm1: Vec<T>,
    norm2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    down: Vec<T>,
}

/// Plain-arithmetic copy of a [`HybridLM`] for decoding.
#[derive(Clone)]
pub struct InferenceModel<T> {
    pub spec: HybridModelSpec,
    embed: Vec<T>,
    lm_head: Vec<T>,
    final_norm: Vec<T>,
    layers: Vec<Layer<T>>,
    eps: T,
}

/// Cache of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState<T> {
    Attention(KvLayer<T>),
    Ssm(Vec<SsmHeadState<T>>),
    None,
}

/// Whole-model decoding state after `position` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState<T> {
    pub layers: Vec<LayerState<T>>,
    pub position: usize,
}

/// Logit rows for a fed chunk and the optional snapshot taken on the way.
pub type ChunkOutput<T> = (Vec<Vec<T>>, Option<Snapshot<T>>);

/// Recurrent layers' states at one position. Attention layers are restored
/// by truncation, so they carry nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub position: usize,
    pub ssm: Vec<Option<Vec<SsmHeadState<T>>>>,
}

impl<T: Scalar> DecodeState<T> {
    /// Positions held by each cache; all equal for a consistent state.
    pub fn cache_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerState::Attention(kv) => Some(kv.len()),
                LayerState::Ssm(hs) => hs.first().map(|h| h.position),
                LayerState::None => None,
            })
            .collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.cache_positions().iter().all(|&p| p == self.position)
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            position: self.position,
            ssm: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerState::Ssm(hs) => Some(hs.clone()),
                    _ => None,
                })
                .collect(),
        }
    }

    /// Rewinds to `snap`. Attention caches must be at least that long.
    pub fn restore(&mut self, snap: Snapshot<T>) {
        for (l, s) in self.layers.iter_mut().zip(snap.ssm) {
            match l {
                LayerState::Attention(kv) => kv.truncate(snap.position),
                LayerState::Ssm(hs) => *hs = s.expect("snapshot of an ssm layer"),
                LayerState::None => {}
            }
        }
        self.position = snap.position;
    }

    /// Truncates attention caches; only valid when no layer is recurrent.
    pub fn truncate_attention(&mut self, t: usize) -> Result<()> {
        if self.layers.iter().any(|l| matches!(l, LayerState::Ssm(_))) {
            return Err(Error::Config("cannot truncate a recurrent state".into()));
        }
        for l in &mut self.layers {
            if let LayerState::Attention(kv) = l {
                kv.truncate(t);
            }
        }
        self.position = self.position.min(t);
        Ok(())
    }
}

impl<T: Scalar> InferenceModel<T> {
    pub fn from_model(m: &HybridLM<T>) -> Result<Self> {
        let s = &m.spec;
        let get = |n: &str| -> Result<Vec<T>> { Ok(m.param(n)?.data().to_vec()) };
        let mut layers = Vec::with_capacity(s.num_layers());
        for (l, kind) in s.layer_kinds.iter().enumerate() {
            let p = format!("layers.{l}");
            let mixer = match kind {
                LayerKind::Attention => Mixer::Attention(m.attention_weights(l)?),
                LayerKind::Ssm => Mixer::Ssm(m.ssm_weights(l)?),
                LayerKind::None => Mixer::None,
            };
            layers.push(Layer {
                mixer,
                norm1: get(&format!("{p}.norm1"))?,
                norm2: get(&format!("{p}.norm2"))?,
                gate: get(&format!("{p}.mlp.gate"))?,
                up: get(&format!("{p}.mlp.up"))?,
                down: get(&format!("{p}.mlp.down"))?,
            });
        }
        Ok(Self {
            spec: s.clone(),
            embed: get("embed")?,
            lm_head: get("lm_head")?,
            final_norm: get("final_norm")?,
            layers,
            eps: T::lit(s.norm_eps),
        })
    }

    pub fn has_recurrent_layers(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.mixer, Mixer::Ssm(_)))
    }

    pub fn new_state(&self) -> DecodeState<T> {
        let kv_width = self.spec.n_kv_heads * self.spec.head_dim;
        DecodeState {
            layers: self
                .layers
                .iter()
                .map(|l| match &l.mixer {
                    Mixer::Attention(_) => LayerState::Attention(KvLayer::new(kv_width)),
                    Mixer::Ssm(w) => LayerState::Ssm(w.init_states()),
                    Mixer::None => LayerState::None,
                })
                .collect(),
            position: 0,
        }
    }

    fn mlp(&self, layer: &Layer<T>, x: &mut [T]) {
        let d = self.spec.d_model;
        let f = self.spec.mlp_hidden;
        let mut o = vec![T::zero(); d];
        rms_norm_row(x, &layer.norm2, self.eps, &mut o);
        let mut g = vec![T::zero(); f];
        let mut u = vec![T::zero(); f];
        vec_mat(&o, &layer.gate, &mut g);
        vec_mat(&o, &layer.up, &mut u);
        for (gi, &ui) in g.iter_mut().zip(&u) {
            *gi = silu(*gi) * ui;
        }
        let mut down = vec![T::zero(); d];
        vec_mat(&g, &layer.down, &mut down);
        for (xi, &di) in x.iter_mut().zip(&down) {
            *xi += di;
        }
    }

    fn head(&self, x: &[T]) -> Vec<T> {
        let mut o = vec![T::zero(); x.len()];
        rms_norm_row(x, &self.final_norm, self.eps, &mut o);
        let mut logits = vec![T::zero(); self.spec.vocab];
        vec_mat(&o, &self.lm_head, &mut logits);
        logits
    }

    /// Feeds `tokens` at positions `state.position + 1 ..`, layer by layer,
    /// and returns one logit row per token. When `snapshot_at = Some(j)` the
    /// recurrent states at position `j` are captured on the way.
    pub fn forward_chunk(&self, tokens: &[usize], state: &mut DecodeState<T>, snapshot_at: Option<usize>) -> Result<ChunkOutput<T>> {
        let d = self.spec.d_model;
        let v = self.spec.vocab;
        let i = state.position;
        let k = i + tokens.len();
        if let Some(j) = snapshot_at {
            if j < i || j > k {
                return Err(Error::IndexOrder { i, j, k });
            }
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let mut hidden: Vec<T> = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            hidden.extend_from_slice(&self.embed[t * d..(t + 1) * d]);
        }
        let mut snap = snapshot_at.map(|j| Snapshot {
            position: j,
            ssm: Vec::with_capacity(self.layers.len()),
        });
        let mut o = vec![T::zero(); tokens.len() * d];
        for (layer, ls) in self.layers.iter().zip(state.layers.iter_mut()) {
            let mut layer_snap = None;
            match (&layer.mixer, ls) {
                (Mixer::Attention(w), LayerState::Attention(kv)) => {
                    for r in 0..tokens.len() {
                        rms_norm_row(&hidden[r * d..(r + 1) * d], &layer.norm1, self.eps, &mut o[r * d..(r + 1) * d]);
                        let y = w.step(&o[r * d..(r + 1) * d], kv);
                        for (x, &yy) in hidden[r * d..(r + 1) * d].iter_mut().zip(&y) {
                            *x += yy;
                        }
                    }
                }
                (Mixer::Ssm(w), LayerState::Ssm(heads)) => {
                    for r in 0..tokens.len() {
                        rms_norm_row(&hidden[r * d..(r + 1) * d], &layer.norm1, self.eps, &mut o[r * d..(r + 1) * d]);
                    }
                    match snapshot_at {
                        Some(j) => {
                            let (y, sj) = w.multistep(&o, heads, i, j)?;
                            for (x, &yy) in hidden.iter_mut().zip(&y) {
                                *x += yy;
                            }
                            layer_snap = Some(sj);
                        }
                        None => {
                            for r in 0..tokens.len() {
                                let y = w.step(&o[r * d..(r + 1) * d], heads);
                                for (x, &yy) in hidden[r * d..(r + 1) * d].iter_mut().zip(&y) {
                                    *x += yy;
                                }
                            }
                        }
                    }
                }
                (Mixer::None, LayerState::None) => {}
                _ => return Err(Error::Config("decode state does not match model layers".into())),
            }
            if let Some(s) = snap.as_mut() {
                s.ssm.push(layer_snap);
            }
            for r in 0..tokens.len() {
                self.mlp(layer, &mut hidden[r * d..(r + 1) * d]);
            }
        }
        state.position = k;
        let logits = (0..tokens.len()).map(|r| self.head(&hidden[r * d..(r + 1) * d])).collect();
        Ok((logits, snap))
    }

    /// Feeds one token and returns its logits.
    pub fn step(&self, token: usize, state: &mut DecodeState<T>) -> Result<Vec<T>> {
        let (mut rows, _) = self.forward_chunk(&[token], state, None)?;
        Ok(rows.pop().expect("one row"))
    }
}

/// How the next token is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "tau")]
pub enum DecodePolicy {
    Greedy,
    Temperature(f64),
}

pub fn sample<T: Scalar, R: Rng>(logits: &[T], policy: DecodePolicy, rng: &mut R) -> usize {
    match policy {
        DecodePolicy::Greedy => argmax(logits),
        DecodePolicy::Temperature(tau) => {
            let mut p: Vec<f64> = logits.iter().map(|x| x.as_f64() / tau.max(1e-6)).collect();
            softmax_in_place(&mut p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        }
    }
}

/// Continues `prompt` (non-empty) by up to `max_new` tokens, stopping after `eos`.
pub fn generate<T: Scalar, R: Rng>(
    model: &InferenceModel<T>,
    prompt: &[usize],
    max_new: usize,
    policy: DecodePolicy,
    eos: Option<usize>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::LengthMismatch {
            what: "prompt length",
            left: 0,
            right: 1,
        });
    }
    let mut state = model.new_state();
    let (rows, _) = model.forward_chunk(prompt, &mut state, None)?;
    let mut logits = rows.into_iter().last().expect("non-empty prompt");
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let t = sample(&logits, policy, rng);
        out.push(t);
        if Some(t) == eos || out.len() == max_new {
            break;
        }
        logits = model.step(t, &mut state)?;
    }
    Ok(out)
}

/// [`generate`] with a ChaCha stream seeded by `seed`.
pub fn generate_seeded<T: Scalar>(
    model: &InferenceModel<T>,
    prompt: &[usize],
    max_new: usize,
    policy: DecodePolicy,
    eos: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    generate(model, prompt, max_new, policy, eos, &mut rng)
}

/// Greedy continuation; the reference every speculative run must reproduce.
pub fn greedy_decode<T: Scalar>(model: &InferenceModel<T>, prompt: &[usize], max_new: usize, eos: Option<usize>) -> Result<Vec<usize>> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    generate(model, prompt, max_new, DecodePolicy::Greedy, eos, &mut rng)
}
