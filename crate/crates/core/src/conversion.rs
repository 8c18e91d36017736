//! Turning attention layers into attention-initialized SSM layers, layer
//! schedules, and stepwise replacement.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_ssm_dynamics, HybridLM, HybridModelSpec, LayerKind, MLP_GROUP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::AttentionWeights;

/// How SSM projections are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `W_C ← W_Q/√N`, `W_B ← W_K`, `W_X ← W_V`, `W_O ← W_O`.
    Attention,
    /// Fresh random projections.
    Random,
}

/// Replicates the KV-head column blocks of a `D × Hkv·N` matrix so that
/// query head `h` sees its group's block: result is `D × H·N`.
fn expand_kv<T: Scalar>(m: &[T], d: usize, heads: usize, kv_heads: usize, n: usize) -> Vec<T> {
    let group = heads / kv_heads;
    let (src_w, dst_w) = (kv_heads * n, heads * n);
    let mut out = vec![T::zero(); d * dst_w];
    for r in 0..d {
        for h in 0..heads {
            let g = h / group;
            out[r * dst_w + h * n..r * dst_w + (h + 1) * n].copy_from_slice(&m[r * src_w + g * n..r * src_w + (g + 1) * n]);
        }
    }
    out
}

/// SSM parameters (keyed by suffix, e.g. `"wb"`, `"a_log"`) initialized from
/// one attention layer. Dynamics come from `rng`.
pub fn attention_to_ssm_init<T: Scalar>(
    attn: &AttentionWeights<T>,
    spec: &HybridModelSpec,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<&'static str, Tensor<T>>> {
    if attn.head_dim != spec.head_dim || attn.heads != spec.n_heads || attn.d_model != spec.d_model {
        return Err(Error::Shape {
            op: "attention_to_ssm_init",
            lhs: vec![attn.d_model, attn.heads, attn.head_dim],
            rhs: vec![spec.d_model, spec.n_heads, spec.head_dim],
        });
    }
    let (d, h, n) = (spec.d_model, spec.n_heads, spec.head_dim);
    let scale = attn.scale;
    let mut m = init_ssm_dynamics::<T>(spec, rng);
    m.insert("wc", Tensor::new([d, h * n], attn.wq.iter().map(|&x| x * scale).collect())?);
    m.insert("wb", Tensor::new([d, h * n], expand_kv(&attn.wk, d, h, attn.kv_heads, n))?);
    m.insert("wx", Tensor::new([d, h * n], expand_kv(&attn.wv, d, h, attn.kv_heads, n))?);
    m.insert("wo", Tensor::new([h * n, d], attn.wo.clone())?);
    Ok(m)
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Converts the listed attention layers of `model` to SSM layers in place.
/// Each layer's fresh parameters depend only on `(seed, layer)`.
pub fn convert_layers<T: Scalar>(model: &mut HybridLM<T>, layers: &[usize], init: InitMode, seed: u64) -> Result<()> {
    for &l in layers {
        if model.spec.layer_kinds.get(l) != Some(&LayerKind::Attention) {
            return Err(Error::Config(format!("layer {l} is not an attention layer")));
        }
        let mut rng = layer_rng(seed, l);
        let mut target_spec = model.spec.clone();
        target_spec.layer_kinds[l] = LayerKind::Ssm;
        let fresh = match init {
            InitMode::Attention => attention_to_ssm_init(&model.attention_weights(l)?, &target_spec, &mut rng)?,
            InitMode::Random => {
                let mut single = target_spec.clone();
                single.layer_kinds = vec![LayerKind::Ssm];
                let m = HybridLM::<T>::init(single, &mut rng)?;
                m.params
                    .into_iter()
                    .filter_map(|(k, t)| {
                        let suffix = k.strip_prefix("layers.0.ssm.")?;
                        let key: &'static str = [
                            "wx",
                            "wb",
                            "wc",
                            "wo",
                            "a_log",
                            "dt_w",
                            "dt_b",
                            "conv_w",
                            "conv_b",
                            "resample_b",
                            "resample_c",
                        ]
                        .into_iter()
                        .find(|s| *s == suffix)?;
                        Some((key, t))
                    })
                    .collect()
            }
        };
        let prefix = format!("layers.{l}.attn.");
        model.params.retain(|k, _| !k.starts_with(&prefix));
        for (k, t) in fresh {
            model.params.insert(format!("layers.{l}.ssm.{k}"), t);
        }
        model.spec.layer_kinds[l] = LayerKind::Ssm;
    }
    Ok(())
}

/// Removes the token mixer of the listed layers (they keep their MLP).
pub fn drop_mixers<T: Scalar>(model: &mut HybridLM<T>, layers: &[usize]) {
    for &l in layers {
        let (a, s) = (format!("layers.{l}.attn."), format!("layers.{l}.ssm."));
        model.params.retain(|k, _| !k.starts_with(&a) && !k.starts_with(&s));
        model.spec.layer_kinds[l] = LayerKind::None;
    }
}

/// Builds a hybrid from an all-attention teacher. Shared parts (embeddings,
/// norms, MLPs, kept attention layers) are copied; SSM layers are converted;
/// `None` layers lose their mixer. The MLP group starts frozen.
pub fn build_hybrid<T: Scalar>(teacher: &HybridLM<T>, layer_kinds: &[LayerKind], init: InitMode, seed: u64) -> Result<HybridLM<T>> {
    if layer_kinds.len() != teacher.spec.num_layers() {
        return Err(Error::LengthMismatch {
            what: "layer_kinds vs teacher layers",
            left: layer_kinds.len(),
            right: teacher.spec.num_layers(),
        });
    }
    if teacher.spec.layer_kinds.iter().any(|k| *k != LayerKind::Attention) {
        return Err(Error::Config("teacher must be all-attention".into()));
    }
    let mut m = teacher.clone();
    m.spec.frozen_groups.insert(MLP_GROUP.to_string());
    let ssm: Vec<usize> = (0..layer_kinds.len()).filter(|&l| layer_kinds[l] == LayerKind::Ssm).collect();
    let gaps: Vec<usize> = (0..layer_kinds.len()).filter(|&l| layer_kinds[l] == LayerKind::None).collect();
    convert_layers(&mut m, &ssm, init, seed)?;
    drop_mixers(&mut m, &gaps);
    m.spec.validate()?;
    Ok(m)
}

/// Keeps attention at every `⌈1/fraction⌉`-th layer starting at `offset`
/// (0 by default); the rest become SSM. `fraction = 0` gives all SSM.
pub fn interleave_schedule_with_offset(num_layers: usize, fraction: f64, offset: usize) -> Result<Vec<LayerKind>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("attention fraction {fraction} outside [0, 1]")));
    }
    if fraction == 0.0 {
        return Ok(vec![LayerKind::Ssm; num_layers]);
    }
    let every = (1.0 / fraction - 1e-9).ceil().max(1.0) as usize;
    let kinds: Vec<LayerKind> = (0..num_layers)
        .map(|l| {
            if l >= offset && (l - offset).is_multiple_of(every) {
                LayerKind::Attention
            } else {
                LayerKind::Ssm
            }
        })
        .collect();
    if !kinds.contains(&LayerKind::Attention) {
        return Err(Error::Config(format!(
            "fraction {fraction} keeps no attention layer out of {num_layers}"
        )));
    }
    Ok(kinds)
}

pub fn interleave_schedule(num_layers: usize, fraction: f64) -> Result<Vec<LayerKind>> {
    interleave_schedule_with_offset(num_layers, fraction, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplacementStage {
    pub fraction: f64,
    pub steps: usize,
}

/// Stages with strictly decreasing attention fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplacementSchedule {
    pub stages: Vec<ReplacementStage>,
}

impl ReplacementSchedule {
    pub fn new(stages: Vec<ReplacementStage>) -> Result<Self> {
        if stages.windows(2).any(|w| w[1].fraction >= w[0].fraction) {
            return Err(Error::Config("replacement fractions must strictly decrease".into()));
        }
        Ok(Self { stages })
    }
}

/// Converts layers stage by stage, running `distill` after each stage with
/// `(model, stage_index, steps)`. Earlier SSM layers are kept as trained.
pub fn stepwise_replace<T: Scalar, F>(
    mut model: HybridLM<T>,
    schedule: &ReplacementSchedule,
    init: InitMode,
    seed: u64,
    mut distill: F,
) -> Result<HybridLM<T>>
where
    F: FnMut(&mut HybridLM<T>, usize, usize) -> Result<()>,
{
    model.spec.frozen_groups.insert(MLP_GROUP.to_string());
    for (idx, stage) in schedule.stages.iter().enumerate() {
        let target = interleave_schedule(model.spec.num_layers(), stage.fraction)?;
        let newly: Vec<usize> = (0..target.len())
            .filter(|&l| target[l] == LayerKind::Ssm && model.spec.layer_kinds[l] == LayerKind::Attention)
            .collect();
        convert_layers(&mut model, &newly, init, seed)?;
        distill(&mut model, idx, stage.steps).map_err(|e| match e {
            Error::Diverged { step, .. } => Error::Diverged { stage: idx, step },
            other => other,
        })?;
    }
    Ok(model)
}

/// Layers converted between two schedules (attention in `from`, SSM in `to`).
pub fn newly_converted(from: &[LayerKind], to: &[LayerKind]) -> Vec<usize> {
    (0..from.len().min(to.len()))
        .filter(|&l| from[l] == LayerKind::Attention && to[l] == LayerKind::Ssm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::InferenceModel;
    use crate::ssm::Projection;
    use crate::transformer::column_block_t;
    use rand::Rng;

    fn teacher(layers: usize, heads: usize, kv: usize, seed: u64) -> HybridLM<f64> {
        let s = HybridModelSpec::teacher(17, 8, layers, heads, kv, 16);
        HybridLM::init(s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn kinds(s: &str) -> Vec<LayerKind> {
        s.chars()
            .map(|c| match c {
                'a' => LayerKind::Attention,
                's' => LayerKind::Ssm,
                _ => LayerKind::None,
            })
            .collect()
    }

    #[test]
    fn schedules() {
        let at = |k: Vec<LayerKind>| -> Vec<usize> { (0..k.len()).filter(|&i| k[i] == LayerKind::Attention).collect() };
        assert_eq!(at(interleave_schedule(8, 0.5).unwrap()), vec![0, 2, 4, 6]);
        assert_eq!(at(interleave_schedule(8, 0.25).unwrap()), vec![0, 4]);
        assert_eq!(at(interleave_schedule(8, 0.125).unwrap()), vec![0]);
        assert_eq!(at(interleave_schedule(8, 1.0).unwrap()), (0..8).collect::<Vec<_>>());
        assert!(at(interleave_schedule(8, 0.0).unwrap()).is_empty());
        assert!(interleave_schedule_with_offset(2, 0.25, 3).is_err());
        assert!(interleave_schedule(8, 1.5).is_err());
        assert!(ReplacementSchedule::new(vec![
            ReplacementStage { fraction: 0.25, steps: 1 },
            ReplacementStage { fraction: 0.5, steps: 1 }
        ])
        .is_err());
    }

    #[test]
    fn projections_copied_and_replicated() {
        let t = teacher(2, 4, 2, 1);
        let h = build_hybrid(&t, &kinds("as"), InitMode::Attention, 7).unwrap();
        assert_eq!(h.spec.attention_fraction(), 0.5);
        let attn = t.attention_weights(1).unwrap();
        let ssm = h.ssm_weights(1).unwrap();
        let n = 2;
        // each kv block appears in exactly `group` SSM heads
        for g in 0..2 {
            let wk = column_block_t(&attn.wk, 8, 4, g * n, n);
            let count = (0..4).filter(|&hh| ssm.head_projection(hh, Projection::B) == wk).count();
            assert_eq!(count, 2);
        }
        let wk = column_block_t(&attn.wk, 8, 4, 0, n);
        assert_eq!(ssm.head_projection(0, Projection::B), wk);
        assert_eq!(ssm.wo, attn.wo);
        assert!(h.params.keys().all(|k| !k.starts_with("layers.1.attn")));
        assert!(h.spec.frozen_groups.contains("mlp"));
    }

    #[test]
    fn all_attention_conversion_is_exact() {
        let t = teacher(2, 2, 1, 2);
        let h = build_hybrid(&t, &kinds("aa"), InitMode::Attention, 3).unwrap();
        let toks = [1, 5, 9, 2];
        assert_eq!(t.logits(&toks).unwrap(), h.logits(&toks).unwrap());
    }

    #[test]
    fn converted_model_is_finite() {
        let t = teacher(4, 2, 1, 4);
        let h = build_hybrid(&t, &kinds("asas"), InitMode::Attention, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let toks: Vec<usize> = (0..32).map(|_| rng.gen_range(0..17)).collect();
        assert!(h.logits(&toks).unwrap().all_finite());
    }

    #[test]
    fn rebuild_is_reproducible() {
        let t = teacher(2, 2, 1, 8);
        let a = build_hybrid(&t, &kinds("sa"), InitMode::Attention, 9).unwrap();
        let b = build_hybrid(&t, &kinds("sa"), InitMode::Attention, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_layer_reduces_to_linear_attention() {
        let t = teacher(1, 4, 2, 10);
        let mut h = build_hybrid(&t, &kinds("s"), InitMode::Attention, 11).unwrap();
        h.apply_linear_reduction().unwrap();
        let attn = t.attention_weights(0).unwrap();
        let ssm = h.ssm_weights(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let o: Vec<f64> = (0..8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expect = crate::transformer::linear_attention_forward(&attn, &o);
        let mut states = ssm.init_states();
        let got: Vec<f64> = o.chunks_exact(8).flat_map(|row| ssm.step(row, &mut states)).collect();
        let scale = expect.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err / scale < 1e-4, "{err}");
        // the inference model sees the same degenerate layer
        assert!(InferenceModel::from_model(&h).is_ok());
    }

    #[test]
    fn stepwise_converts_set_differences_and_keeps_earlier_layers() {
        let t = teacher(8, 2, 1, 13);
        let sched = ReplacementSchedule::new(vec![
            ReplacementStage { fraction: 0.5, steps: 3 },
            ReplacementStage { fraction: 0.25, steps: 3 },
        ])
        .unwrap();
        let mut seen = Vec::new();
        let mut after_first = None;
        let out = stepwise_replace(t.clone(), &sched, InitMode::Attention, 14, |m, idx, steps| {
            seen.push((idx, steps, m.spec.layer_kinds.clone()));
            if idx == 0 {
                // perturb a converted layer so retention is observable
                for x in m.params.get_mut("layers.1.ssm.wo").unwrap().data_mut() {
                    *x += 1.0;
                }
                after_first = Some(m.params["layers.1.ssm.wo"].clone());
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen[0].2, interleave_schedule(8, 0.5).unwrap());
        assert_eq!(seen[1].2, interleave_schedule(8, 0.25).unwrap());
        assert_eq!(newly_converted(&seen[0].2, &seen[1].2), vec![2, 6]);
        assert_eq!(out.params["layers.1.ssm.wo"], after_first.unwrap());

        let direct = build_hybrid(&t, &interleave_schedule(8, 0.5).unwrap(), InitMode::Attention, 14).unwrap();
        let zero = ReplacementSchedule::new(vec![ReplacementStage { fraction: 0.5, steps: 0 }]).unwrap();
        let staged = stepwise_replace(t.clone(), &zero, InitMode::Attention, 14, |_, _, _| Ok(())).unwrap();
        assert_eq!(staged, direct);
    }

    #[test]
    fn stepwise_reports_divergent_stage() {
        let t = teacher(4, 2, 1, 15);
        let sched = ReplacementSchedule::new(vec![
            ReplacementStage { fraction: 0.5, steps: 1 },
            ReplacementStage { fraction: 0.25, steps: 1 },
        ])
        .unwrap();
        let err = stepwise_replace(t, &sched, InitMode::Attention, 1, |_, idx, _| {
            if idx == 1 {
                Err(Error::Diverged { stage: 0, step: 4 })
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { stage: 1, step: 4 }));
    }

    #[test]
    fn random_init_differs_from_attention_init() {
        let t = teacher(2, 2, 1, 16);
        let a = build_hybrid(&t, &kinds("as"), InitMode::Attention, 1).unwrap();
        let r = build_hybrid(&t, &kinds("as"), InitMode::Random, 1).unwrap();
        assert_ne!(a.params["layers.1.ssm.wb"], r.params["layers.1.ssm.wb"]);
        assert_eq!(a.params["layers.1.ssm.a_log"], r.params["layers.1.ssm.a_log"]);
        assert_eq!(a.params.keys().collect::<Vec<_>>(), r.params.keys().collect::<Vec<_>>());
    }
}
