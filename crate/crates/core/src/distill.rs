//! Pseudo-labelling, distillation losses and the kd / sft / dpo stages.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::EOS;
use crate::decode::{greedy_decode, sample, DecodePolicy, InferenceModel};
use crate::error::{Error, Result};
use crate::model::{HybridLM, MLP_GROUP};
use crate::optim::OptimConfig;
use crate::scalar::Scalar;
use crate::tensor::softmax_in_place;
use crate::train::{optimize, TrainLog};

/// A prompt with its teacher continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillBatch {
    pub prompt: Vec<usize>,
    pub continuation: Vec<usize>,
    /// Teacher logits that produced each continuation token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_logits: Option<Vec<Vec<f64>>>,
}

impl DistillBatch {
    /// Model input: the prompt and all but the last continuation token.
    pub fn input(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.continuation[..self.continuation.len().saturating_sub(1)]);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_beta_kd() -> f64 {
    0.1
}
fn default_beta_dpo() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta_kd")]
    pub beta_kd: f64,
    #[serde(default = "default_beta_dpo")]
    pub beta_dpo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta_kd: default_beta_kd(),
            beta_dpo: default_beta_dpo(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta_kd >= 0.0 && self.beta_dpo > 0.0) {
            return Err(Error::Config(format!(
                "loss weights need alpha >= 0, beta_kd >= 0, beta_dpo > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Continues every prompt with the teacher until EOS or `max_len` tokens.
/// Prompts that are empty or already end in EOS get an empty continuation.
pub fn generate_pseudo_labels<T: Scalar>(
    teacher: &HybridLM<T>,
    prompts: &[Vec<usize>],
    policy: DecodePolicy,
    max_len: usize,
    cache_logits: bool,
    seed: u64,
) -> Result<Vec<DistillBatch>> {
    let inf = InferenceModel::from_model(teacher)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let mut continuation = Vec::new();
        let mut cached = Vec::new();
        if !prompt.is_empty() && prompt.last() != Some(&EOS) && max_len > 0 {
            let mut state = inf.new_state();
            let (rows, _) = inf.forward_chunk(prompt, &mut state, None)?;
            let mut logits = rows.into_iter().last().expect("non-empty prompt");
            loop {
                let t = sample(&logits, policy, &mut rng);
                if cache_logits {
                    cached.push(logits.iter().map(|x| x.as_f64()).collect());
                }
                continuation.push(t);
                if t == EOS || continuation.len() == max_len {
                    break;
                }
                logits = inf.step(t, &mut state)?;
            }
        }
        out.push(DistillBatch {
            prompt: prompt.clone(),
            continuation,
            teacher_logits: cache_logits.then_some(cached),
        });
    }
    Ok(out)
}

/// Teacher next-token probabilities over the continuation, row-major.
pub fn teacher_probs<T: Scalar>(teacher: &HybridLM<T>, batch: &DistillBatch) -> Result<Vec<f64>> {
    let c = batch.continuation.len();
    let v = teacher.spec.vocab;
    let mut out = Vec::with_capacity(c * v);
    match &batch.teacher_logits {
        Some(rows) => {
            if rows.len() != c {
                return Err(Error::LengthMismatch {
                    what: "cached teacher rows vs continuation",
                    left: rows.len(),
                    right: c,
                });
            }
            for r in rows {
                let mut p = r.clone();
                softmax_in_place(&mut p);
                out.extend(p);
            }
        }
        None if c > 0 => {
            let logits = teacher.logits(&batch.input())?;
            let off = batch.prompt.len() - 1;
            for r in 0..c {
                let mut p: Vec<f64> = logits.row(off + r).iter().map(|x| x.as_f64()).collect();
                softmax_in_place(&mut p);
                out.extend(p);
            }
        }
        None => {}
    }
    Ok(out)
}

/// `mean_t [β·KL(teacher ‖ student) − α·log p_student(ŷ_t)]` over the
/// continuation rows of `student_logits`, computed on the batch's input.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    batch: &DistillBatch,
    teacher_probs: &[f64],
    weights: &LossWeights,
) -> Result<Var> {
    let off = batch.prompt.len().saturating_sub(1);
    let tp: Vec<T> = teacher_probs.iter().map(|&p| T::lit(p)).collect();
    g.kd_loss(
        student_logits,
        off,
        &batch.continuation,
        &tp,
        T::lit(weights.alpha),
        T::lit(weights.beta_kd),
    )
}

/// Pre-sigmoid DPO logit `β·((s_w − r_w) − (s_l − r_l))`; the reference
/// terms are detached.
pub fn dpo_logit<T: Scalar>(g: &mut Graph<T>, s_w: Var, s_l: Var, r_w: Var, r_l: Var, beta: f64) -> Result<Var> {
    let r_w = g.detach(r_w);
    let r_l = g.detach(r_l);
    let dw = g.sub(s_w, r_w)?;
    let dl = g.sub(s_l, r_l)?;
    let z = g.sub(dw, dl)?;
    Ok(g.scale(z, T::lit(beta)))
}

/// `−log σ(dpo_logit) = softplus(−dpo_logit)`.
pub fn dpo_loss<T: Scalar>(g: &mut Graph<T>, s_w: Var, s_l: Var, r_w: Var, r_l: Var, beta: f64) -> Result<Var> {
    let z = dpo_logit(g, s_w, s_l, r_w, r_l, beta)?;
    let n = g.neg(z);
    Ok(g.softplus(n))
}

fn joined(prompt: &[usize], cont: &[usize]) -> Vec<usize> {
    let mut t = prompt.to_vec();
    t.extend_from_slice(&cont[..cont.len().saturating_sub(1)]);
    t
}

/// Summed log-probability of `cont` after `prompt`, on the tape.
pub fn sequence_log_prob<T: Scalar>(
    g: &mut Graph<T>,
    model: &HybridLM<T>,
    vars: &BTreeMap<String, Var>,
    prompt: &[usize],
    cont: &[usize],
) -> Result<Var> {
    if prompt.is_empty() {
        return Err(Error::LengthMismatch {
            what: "prompt length",
            left: 0,
            right: 1,
        });
    }
    let logits = model.forward_tape(g, vars, &joined(prompt, cont))?;
    g.sequence_log_prob(logits, prompt.len() - 1, cont)
}

/// DPO loss of one pair with both models on the same tape.
pub fn dpo_pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: (&HybridLM<T>, &BTreeMap<String, Var>),
    reference: (&HybridLM<T>, &BTreeMap<String, Var>),
    pair: &PreferencePair,
    beta: f64,
) -> Result<Var> {
    let s_w = sequence_log_prob(g, student.0, student.1, &pair.prompt, &pair.chosen)?;
    let s_l = sequence_log_prob(g, student.0, student.1, &pair.prompt, &pair.rejected)?;
    let r_w = sequence_log_prob(g, reference.0, reference.1, &pair.prompt, &pair.chosen)?;
    let r_l = sequence_log_prob(g, reference.0, reference.1, &pair.prompt, &pair.rejected)?;
    dpo_loss(g, s_w, s_l, r_w, r_l, beta)
}

/// Summed log-probability without a tape.
pub fn score<T: Scalar>(model: &HybridLM<T>, prompt: &[usize], cont: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let lp = sequence_log_prob(&mut g, model, &vars, prompt, cont)?;
    Ok(g.value(lp).item().as_f64())
}

/// Greedy teacher continuations paired with token-swap corruptions at rate
/// `rho`; a corruption equal to the original is redrawn, and after a few
/// failed draws one position is forced to change.
pub fn make_preference_pairs<T: Scalar>(
    teacher: &HybridLM<T>,
    prompts: &[Vec<usize>],
    rho: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let inf = InferenceModel::from_model(teacher)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = teacher.spec.vocab.min(256);
    let swap = |rng: &mut ChaCha8Rng, t: usize| loop {
        let u = rng.gen_range(0..alphabet);
        if u != t || alphabet < 2 {
            return u;
        }
    };
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts.iter().filter(|p| !p.is_empty()) {
        let chosen = greedy_decode(&inf, prompt, max_len.max(1), Some(EOS))?;
        let mut rejected = chosen.clone();
        for _ in 0..8 {
            rejected = chosen
                .iter()
                .map(|&t| if rng.gen_bool(rho.clamp(0.0, 1.0)) { swap(&mut rng, t) } else { t })
                .collect();
            if rejected != chosen {
                break;
            }
        }
        if rejected == chosen {
            let at = rng.gen_range(0..rejected.len());
            rejected[at] = swap(&mut rng, rejected[at]);
        }
        out.push(PreferencePair {
            prompt: prompt.clone(),
            chosen,
            rejected,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Kd,
    Sft,
    Dpo,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::Kd => 0,
            Stage::Sft => 1,
            Stage::Dpo => 2,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    #[serde(default = "crate::distill::default_stage_batch")]
    pub batch_size: usize,
    pub optim: OptimConfig,
    #[serde(default)]
    pub weights: LossWeights,
    /// Only consulted by the kd stage.
    #[serde(default = "default_true")]
    pub freeze_mlp: bool,
    #[serde(default)]
    pub seed: u64,
}

pub(crate) fn default_stage_batch() -> usize {
    4
}

pub enum StageData<'a> {
    Kd(&'a [DistillBatch]),
    Sft(&'a [DistillBatch]),
    Dpo(&'a [PreferencePair]),
}

impl StageData<'_> {
    pub fn stage(&self) -> Stage {
        match self {
            StageData::Kd(_) => Stage::Kd,
            StageData::Sft(_) => Stage::Sft,
            StageData::Dpo(_) => Stage::Dpo,
        }
    }
}

/// Trains `model` for one stage; `teacher` supplies missing KD targets and
/// is the frozen DPO reference.
pub fn run_stage<T: Scalar>(model: &mut HybridLM<T>, teacher: &HybridLM<T>, data: StageData<'_>, cfg: &StageConfig) -> Result<TrainLog> {
    cfg.weights.validate()?;
    let stage = data.stage();
    if cfg.steps == 0 {
        return Ok(TrainLog::default());
    }
    let saved_frozen = model.spec.frozen_groups.clone();
    match stage {
        Stage::Kd if cfg.freeze_mlp => {
            model.spec.frozen_groups.insert(MLP_GROUP.to_string());
        }
        _ => {
            model.spec.frozen_groups.remove(MLP_GROUP);
        }
    }
    let result = stage_loop(model, teacher, data, cfg);
    model.spec.frozen_groups = saved_frozen;
    result
}

fn stage_loop<T: Scalar>(model: &mut HybridLM<T>, teacher: &HybridLM<T>, data: StageData<'_>, cfg: &StageConfig) -> Result<TrainLog> {
    let stage = data.stage();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match data {
        StageData::Kd(batches) | StageData::Sft(batches) => {
            let usable: Vec<&DistillBatch> = batches
                .iter()
                .filter(|b| !b.continuation.is_empty() && !b.prompt.is_empty())
                .collect();
            if usable.is_empty() {
                return Err(Error::Config("no batch with a non-empty prompt and continuation".into()));
            }
            let mut weights = cfg.weights;
            let probs: Vec<Vec<f64>> = if stage == Stage::Kd {
                usable.iter().map(|b| teacher_probs(teacher, b)).collect::<Result<_>>()?
            } else {
                weights.beta_kd = 0.0;
                usable.iter().map(|b| vec![0.0; b.continuation.len() * model.spec.vocab]).collect()
            };
            let order = shuffled(usable.len(), cfg.steps * cfg.batch_size.max(1), &mut rng);
            let bs = cfg.batch_size.max(1);
            optimize(model, cfg.steps, bs, &cfg.optim, stage.index(), |m, g, vars, step, b| {
                let i = order[step * bs + b];
                let logits = m.forward_tape(g, vars, &usable[i].input())?;
                kd_loss(g, logits, usable[i], &probs[i], &weights)
            })
        }
        StageData::Dpo(pairs) => {
            let pairs: Vec<&PreferencePair> = pairs.iter().filter(|p| !p.prompt.is_empty()).collect();
            if pairs.is_empty() {
                return Err(Error::Config("no preference pair with a non-empty prompt".into()));
            }
            let refs: Vec<(f64, f64)> = pairs
                .iter()
                .map(|p| Ok((score(teacher, &p.prompt, &p.chosen)?, score(teacher, &p.prompt, &p.rejected)?)))
                .collect::<Result<_>>()?;
            let order = shuffled(pairs.len(), cfg.steps * cfg.batch_size.max(1), &mut rng);
            let bs = cfg.batch_size.max(1);
            let beta = cfg.weights.beta_dpo;
            optimize(model, cfg.steps, bs, &cfg.optim, stage.index(), |m, g, vars, step, b| {
                let i = order[step * bs + b];
                let p = pairs[i];
                let s_w = sequence_log_prob(g, m, vars, &p.prompt, &p.chosen)?;
                let s_l = sequence_log_prob(g, m, vars, &p.prompt, &p.rejected)?;
                let r_w = g.constant(crate::tensor::Tensor::scalar(T::lit(refs[i].0)));
                let r_l = g.constant(crate::tensor::Tensor::scalar(T::lit(refs[i].1)));
                dpo_loss(g, s_w, s_l, r_w, r_l, beta)
            })
        }
    }
}

/// `count` indices cycling through fresh permutations of `0..n`.
fn shuffled(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut perm: Vec<usize> = (0..n).collect();
    while out.len() < count {
        perm.shuffle(rng);
        out.extend(perm.iter().copied().take(count - out.len()));
    }
    out
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<S: DeserializeOwned>(path: &Path) -> Result<Vec<S>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
