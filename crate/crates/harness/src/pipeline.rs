//! Steps shared by the CLI commands and the acceptance runs.

use anyhow::{Context, Result};
use hybrid_core::conversion::{build_hybrid, interleave_schedule, stepwise_replace, ReplacementSchedule, ReplacementStage};
use hybrid_core::corpus::{prompts_from, synthetic_text, Corpus};
use hybrid_core::decode::DecodePolicy;
use hybrid_core::distill::{generate_pseudo_labels, run_stage, DistillBatch, StageData};
use hybrid_core::train::{train_teacher as core_train, TrainConfig, TrainLog};
use hybrid_core::HybridLM32;

use crate::config::{CorpusConfig, DistillConfig, EvalConfig, ModelConfig, RunConfig, TrainSettings};

pub fn load_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let text = match &cfg.path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading corpus {}", p.display()))?,
        None => synthetic_text(cfg.synthetic_seed, cfg.synthetic_bytes),
    };
    Ok(Corpus::from_text(&text)?)
}

pub fn train_teacher(
    model: &ModelConfig,
    train: &TrainSettings,
    corpus: &Corpus,
    seq_len: usize,
    seed: u64,
) -> Result<(HybridLM32, TrainLog)> {
    let tc = TrainConfig {
        steps: train.steps,
        batch_size: train.batch_size,
        seq_len,
        optim: train.optim(),
        seed,
    };
    Ok(core_train(model.teacher_spec(), &corpus.train, &tc)?)
}

/// Pseudo-labels for prompts cut from the validation split.
pub fn pseudo_labels(teacher: &HybridLM32, corpus: &Corpus, cfg: &DistillConfig, seed: u64) -> Result<Vec<DistillBatch>> {
    let prompts = prompts_from(&corpus.val, cfg.prompt_len, cfg.prompts);
    anyhow::ensure!(
        !prompts.is_empty(),
        "validation split too short for {}-token prompts",
        cfg.prompt_len
    );
    let policy = cfg.temperature.map_or(DecodePolicy::Greedy, DecodePolicy::Temperature);
    Ok(generate_pseudo_labels(
        teacher,
        &prompts,
        policy,
        cfg.max_len,
        cfg.cache_logits,
        seed,
    )?)
}

/// Test-split sequences on which KL to the teacher is measured.
pub fn held_out(corpus: &Corpus, cfg: &EvalConfig) -> Vec<Vec<usize>> {
    prompts_from(&corpus.test, cfg.kl_seq_len, cfg.kl_sequences)
}

/// Runs stage-1 KD on `student` with `settings`.
pub fn kd(
    student: &mut HybridLM32,
    teacher: &HybridLM32,
    labels: &[DistillBatch],
    settings: &TrainSettings,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TrainLog> {
    let sc = settings.stage(cfg.weights, cfg.freeze_mlp, seed);
    Ok(run_stage(student, teacher, StageData::Kd(labels), &sc)?)
}

/// Converts the teacher to the configured attention fraction, directly or
/// through the intermediate fractions with KD after each stage.
pub fn convert(teacher: &HybridLM32, cfg: &RunConfig, labels: &[DistillBatch]) -> Result<HybridLM32> {
    let c = &cfg.convert;
    let layers = teacher.spec.num_layers();
    if c.schedule.is_empty() {
        return Ok(build_hybrid(
            teacher,
            &interleave_schedule(layers, c.attention_fraction)?,
            c.init,
            cfg.seed,
        )?);
    }
    let stages = c
        .schedule
        .iter()
        .chain(std::iter::once(&c.attention_fraction))
        .map(|&fraction| ReplacementStage {
            fraction,
            steps: c.stage_steps,
        })
        .collect();
    let schedule = ReplacementSchedule::new(stages)?;
    let settings = TrainSettings {
        steps: c.stage_steps,
        ..cfg.distill.kd.clone()
    };
    let model = stepwise_replace(teacher.clone(), &schedule, c.init, cfg.seed, |m, stage, steps| {
        let s = TrainSettings { steps, ..settings.clone() };
        let sc = s.stage(cfg.distill.weights, true, cfg.seed.wrapping_add(stage as u64));
        run_stage(m, teacher, StageData::Kd(labels), &sc).map(|_| ())
    })?;
    Ok(model)
}
