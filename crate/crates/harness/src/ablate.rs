//! Paired toy experiments over several seeds.

use std::collections::BTreeMap;

use anyhow::Result;
use hybrid_core::conversion::{build_hybrid, drop_mixers, interleave_schedule, InitMode};
use hybrid_core::eval::eval_ppl;
use hybrid_core::{HybridLM32, LayerKind};
use serde::{Deserialize, Serialize};

use crate::config::{DistillConfig, RunConfig};
use crate::pipeline::{kd, load_corpus, pseudo_labels, train_teacher};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Init,
    Freeze,
    Interleave,
    NoMamba,
}

/// One distilled student configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub attention_percent: u32,
    pub init: InitMode,
    pub freeze_mlp: bool,
    /// Converted layers lose their mixer instead of becoming SSM layers.
    pub gaps: bool,
}

impl Variant {
    pub const fn attention(attention_percent: u32) -> Self {
        Self {
            attention_percent,
            init: InitMode::Attention,
            freeze_mlp: true,
            gaps: false,
        }
    }

    pub fn label(&self) -> String {
        let init = match self.init {
            InitMode::Attention => "attn-init",
            InitMode::Random => "random-init",
        };
        let mixer = if self.gaps { "gaps" } else { "ssm" };
        let frz = if self.freeze_mlp { "frozen" } else { "unfrozen" };
        format!("{}%-attn/{mixer}/{init}/{frz}", self.attention_percent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub variant: String,
    pub ppl: f64,
    pub teacher_ppl: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPair {
    pub seed: u64,
    pub lhs: f64,
    pub rhs: f64,
}

/// A predicted ordering `lhs < rhs` (or `<=`) checked per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub claim: String,
    pub metric: String,
    pub per_seed: Vec<SeedPair>,
    pub agreeing_seeds: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: Vec<AblationKind>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    pub comparisons: Vec<Comparison>,
}

struct Claim {
    text: &'static str,
    lhs: Variant,
    rhs: Variant,
    strict: bool,
    /// Compare teacher-relative ratios instead of raw perplexities.
    ratio: bool,
}

fn claims(kind: AblationKind) -> Vec<Claim> {
    let a50 = Variant::attention(50);
    match kind {
        AblationKind::Init => vec![Claim {
            text: "attention-init ppl < random-init ppl",
            lhs: a50,
            rhs: Variant {
                init: InitMode::Random,
                ..a50
            },
            strict: true,
            ratio: false,
        }],
        AblationKind::Freeze => vec![Claim {
            text: "frozen-MLP ppl <= unfrozen-MLP ppl",
            lhs: a50,
            rhs: Variant { freeze_mlp: false, ..a50 },
            strict: false,
            ratio: false,
        }],
        AblationKind::Interleave => vec![
            Claim {
                text: "ppl ratio 50% attention <= 25% attention",
                lhs: a50,
                rhs: Variant::attention(25),
                strict: false,
                ratio: true,
            },
            Claim {
                text: "ppl ratio 25% attention <= 0% attention",
                lhs: Variant::attention(25),
                rhs: Variant::attention(0),
                strict: false,
                ratio: true,
            },
        ],
        AblationKind::NoMamba => vec![Claim {
            text: "hybrid-with-ssm ppl < attention-only-with-gaps ppl",
            lhs: a50,
            rhs: Variant { gaps: true, ..a50 },
            strict: true,
            ratio: false,
        }],
    }
}

/// Distils one student variant from `teacher`.
pub fn distill_variant(
    teacher: &HybridLM32,
    v: Variant,
    labels: &[hybrid_core::distill::DistillBatch],
    cfg: &RunConfig,
    seed: u64,
) -> Result<HybridLM32> {
    let layers = teacher.spec.num_layers();
    let kinds = interleave_schedule(layers, f64::from(v.attention_percent) / 100.0)?;
    let mut student = if v.gaps {
        let mut s = teacher.clone();
        let gone: Vec<usize> = (0..layers).filter(|&l| kinds[l] != LayerKind::Attention).collect();
        drop_mixers(&mut s, &gone);
        s.spec.frozen_groups.insert(hybrid_core::model::MLP_GROUP.to_string());
        s
    } else {
        build_hybrid(teacher, &kinds, v.init, seed)?
    };
    let dc = DistillConfig {
        freeze_mlp: v.freeze_mlp,
        ..cfg.distill.clone()
    };
    kd(&mut student, teacher, labels, &cfg.ablate.kd, &dc, seed)?;
    Ok(student)
}

/// Runs every variant the requested kinds need, once per seed, and checks
/// each predicted ordering.
pub fn run_ablations(kinds: &[AblationKind], cfg: &RunConfig) -> Result<AblationReport> {
    let corpus = load_corpus(&cfg.corpus)?;
    let seq_len = cfg.corpus.seq_len;
    let all_claims: Vec<Claim> = kinds.iter().flat_map(|&k| claims(k)).collect();
    let mut needed: Vec<Variant> = all_claims.iter().flat_map(|c| [c.lhs, c.rhs]).collect();
    needed.sort();
    needed.dedup();
    let mut runs = Vec::new();
    let mut table: BTreeMap<(u64, Variant), (f64, f64)> = BTreeMap::new();
    for &seed in &cfg.ablate.seeds {
        let (teacher, _) = train_teacher(&cfg.ablate.model, &cfg.ablate.teacher, &corpus, seq_len, seed)?;
        let teacher_ppl = eval_ppl(&teacher, &corpus.test, seq_len)?.ppl;
        let labels = pseudo_labels(&teacher, &corpus, &cfg.distill, seed)?;
        for &v in &needed {
            let student = distill_variant(&teacher, v, &labels, cfg, seed)?;
            let ppl = eval_ppl(&student, &corpus.test, seq_len)?.ppl;
            table.insert((seed, v), (ppl, ppl / teacher_ppl));
            runs.push(RunResult {
                seed,
                variant: v.label(),
                ppl,
                teacher_ppl,
                ratio: ppl / teacher_ppl,
            });
        }
    }
    let comparisons = all_claims
        .iter()
        .map(|c| {
            let per_seed: Vec<SeedPair> = cfg
                .ablate
                .seeds
                .iter()
                .map(|&seed| {
                    let pick = |v: Variant| {
                        let (p, r) = table[&(seed, v)];
                        if c.ratio {
                            r
                        } else {
                            p
                        }
                    };
                    SeedPair {
                        seed,
                        lhs: pick(c.lhs),
                        rhs: pick(c.rhs),
                    }
                })
                .collect();
            let agreeing_seeds = per_seed
                .iter()
                .filter(|p| if c.strict { p.lhs < p.rhs } else { p.lhs <= p.rhs })
                .count();
            Comparison {
                claim: c.text.to_string(),
                metric: if c.ratio { "ppl_ratio" } else { "ppl" }.to_string(),
                holds: agreeing_seeds == per_seed.len(),
                per_seed,
                agreeing_seeds,
            }
        })
        .collect();
    Ok(AblationReport {
        kind: kinds.to_vec(),
        seeds: cfg.ablate.seeds.clone(),
        runs,
        comparisons,
    })
}
