//! One function per CLI subcommand. Each writes `<out>/metrics.json` and,
//! where a model is produced, a checkpoint under `<out>/model`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use hybrid_core::checkpoint::{self, Manifest};
use hybrid_core::corpus::{decode as detokenize, encode, prompts_from, unigram_ppl, Corpus, Split, EOS};
use hybrid_core::decode::{generate_seeded, DecodePolicy, InferenceModel};
use hybrid_core::distill::{make_preference_pairs, read_jsonl, run_stage, write_jsonl, DistillBatch, Stage, StageData};
use hybrid_core::eval::{eval_ppl, mean_kl};
use hybrid_core::speculative::spec_bench;
use hybrid_core::HybridLM32;
use serde_json::json;

use crate::ablate::{run_ablations, AblationKind};
use crate::config::RunConfig;
use crate::metrics::{CheckpointRef, Metrics, Timing};
use crate::pipeline::{convert as convert_model, held_out, load_corpus, pseudo_labels, train_teacher as train};

pub const MODEL_DIR: &str = "model";
pub const METRICS_FILE: &str = "metrics.json";

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    start: Instant,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            start: Instant::now(),
        })
    }

    fn corpus(&self) -> Result<Corpus> {
        load_corpus(&self.cfg.corpus)
    }

    fn save(&self, model: &HybridLM32, provenance: Vec<String>) -> Result<CheckpointRef> {
        let dir = self.out.join(MODEL_DIR);
        let m = checkpoint::save(model, &dir, self.cfg.seed, &provenance)?;
        Ok(CheckpointRef {
            path: MODEL_DIR.to_string(),
            manifest_hash: m.manifest_hash,
        })
    }

    fn finish(&self, command: &str, results: serde_json::Value, ckpt: Option<CheckpointRef>) -> Result<Metrics> {
        let m = Metrics {
            command: command.to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            checkpoint: ckpt,
            results,
            timing: Timing {
                wall_secs: self.start.elapsed().as_secs_f64(),
            },
        };
        m.write(&self.out.join(METRICS_FILE))?;
        Ok(m)
    }
}

pub fn load_model(dir: &Path) -> Result<(HybridLM32, Manifest)> {
    checkpoint::load::<f32>(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn with_stage(m: &Manifest, stage: &str) -> Vec<String> {
    let mut p = m.provenance.clone();
    p.push(stage.to_string());
    p
}

pub fn teacher_train(ctx: &Ctx) -> Result<Metrics> {
    let c = ctx.corpus()?;
    let seq = ctx.cfg.corpus.seq_len;
    let (teacher, log) = train(&ctx.cfg.model, &ctx.cfg.teacher, &c, seq, ctx.cfg.seed)?;
    let results = json!({
        "params": teacher.num_params(),
        "corpus_tokens": {"train": c.train.len(), "val": c.val.len(), "test": c.test.len()},
        "initial_loss": log.losses.first(),
        "final_loss": log.final_loss(),
        "val_ppl": eval_ppl(&teacher, &c.val, seq)?.ppl,
        "test_ppl": eval_ppl(&teacher, &c.test, seq)?.ppl,
        "unigram_test_ppl": unigram_ppl(&c.train, &c.test)?,
        "losses": log.losses,
    });
    let ck = ctx.save(&teacher, vec!["teacher-train".into()])?;
    ctx.finish("teacher-train", results, Some(ck))
}

pub fn convert(ctx: &Ctx, teacher_dir: &Path) -> Result<Metrics> {
    let (teacher, man) = load_model(teacher_dir)?;
    let c = ctx.corpus()?;
    let labels = if ctx.cfg.convert.schedule.is_empty() {
        Vec::new()
    } else {
        pseudo_labels(&teacher, &c, &ctx.cfg.distill, ctx.cfg.seed)?
    };
    let student = convert_model(&teacher, &ctx.cfg, &labels)?;
    let seq = ctx.cfg.corpus.seq_len;
    let held = held_out(&c, &ctx.cfg.eval);
    let results = json!({
        "layer_kinds": student.spec.layer_kinds,
        "attention_fraction": student.spec.attention_fraction(),
        "init": ctx.cfg.convert.init,
        "test_ppl": eval_ppl(&student, &c.test, seq)?.ppl,
        "teacher_test_ppl": eval_ppl(&teacher, &c.test, seq)?.ppl,
        "mean_kl_to_teacher": mean_kl(&teacher, &student, &held)?,
    });
    let ck = ctx.save(&student, with_stage(&man, "convert"))?;
    ctx.finish("convert", results, Some(ck))
}

/// Ground-truth windows from the training split as prompt/continuation pairs.
fn sft_batches(c: &Corpus, ctx: &Ctx) -> Vec<DistillBatch> {
    let d = &ctx.cfg.distill;
    prompts_from(&c.train, d.prompt_len + d.max_len, d.prompts)
        .into_iter()
        .map(|w| DistillBatch {
            prompt: w[..d.prompt_len].to_vec(),
            continuation: w[d.prompt_len..].to_vec(),
            teacher_logits: None,
        })
        .collect()
}

pub fn distill(ctx: &Ctx, teacher_dir: &Path, student_dir: &Path, stage: Stage, labels: Option<&Path>) -> Result<Metrics> {
    anyhow::ensure!(stage != Stage::Dpo, "use the dpo command for preference optimization");
    let (teacher, _) = load_model(teacher_dir)?;
    let (mut student, man) = load_model(student_dir)?;
    let c = ctx.corpus()?;
    let d = &ctx.cfg.distill;
    let data = match (labels, stage) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Stage::Kd) => pseudo_labels(&teacher, &c, d, ctx.cfg.seed)?,
        (None, _) => sft_batches(&c, ctx),
    };
    write_jsonl(&ctx.out.join("batches.jsonl"), &data)?;
    let held = held_out(&c, &ctx.cfg.eval);
    let seq = ctx.cfg.corpus.seq_len;
    let kl_before = mean_kl(&teacher, &student, &held)?;
    let ppl_before = eval_ppl(&student, &c.test, seq)?.ppl;
    let (settings, sd, name) = match stage {
        Stage::Kd => (&d.kd, StageData::Kd(&data), "kd"),
        _ => (&d.sft, StageData::Sft(&data), "sft"),
    };
    let sc = settings.stage(d.weights, d.freeze_mlp, ctx.cfg.seed);
    let log = run_stage(&mut student, &teacher, sd, &sc)?;
    let kl_after = mean_kl(&teacher, &student, &held)?;
    let ppl_after = eval_ppl(&student, &c.test, seq)?.ppl;
    let results = json!({
        "stage": name,
        "steps": settings.steps,
        "examples": data.len(),
        "mean_kl_before": kl_before,
        "mean_kl_after": kl_after,
        "test_ppl_before": ppl_before,
        "test_ppl_after": ppl_after,
        "losses": log.losses,
    });
    let ck = ctx.save(&student, with_stage(&man, name))?;
    ctx.finish("distill", results, Some(ck))
}

pub fn dpo(ctx: &Ctx, teacher_dir: &Path, student_dir: &Path) -> Result<Metrics> {
    let (teacher, _) = load_model(teacher_dir)?;
    let (mut student, man) = load_model(student_dir)?;
    let c = ctx.corpus()?;
    let d = &ctx.cfg.distill;
    let prompts = prompts_from(&c.val, d.prompt_len, d.prompts);
    let pairs = make_preference_pairs(&teacher, &prompts, d.rho, d.max_len, ctx.cfg.seed)?;
    write_jsonl(&ctx.out.join("pairs.jsonl"), &pairs)?;
    let margin = |m: &HybridLM32| -> Result<f64> {
        let mut s = 0.0;
        for p in &pairs {
            s += hybrid_core::distill::score(m, &p.prompt, &p.chosen)? - hybrid_core::distill::score(m, &p.prompt, &p.rejected)?;
        }
        Ok(s / pairs.len().max(1) as f64)
    };
    let before = margin(&student)?;
    let sc = d.dpo.stage(d.weights, false, ctx.cfg.seed);
    let log = run_stage(&mut student, &teacher, StageData::Dpo(&pairs), &sc)?;
    let results = json!({
        "pairs": pairs.len(),
        "steps": d.dpo.steps,
        "mean_logp_margin_before": before,
        "mean_logp_margin_after": margin(&student)?,
        "test_ppl_after": eval_ppl(&student, &c.test, ctx.cfg.corpus.seq_len)?.ppl,
        "losses": log.losses,
    });
    let ck = ctx.save(&student, with_stage(&man, "dpo"))?;
    ctx.finish("dpo", results, Some(ck))
}

pub fn generate(ctx: &Ctx, model_dir: &Path, prompt: &str, max_tokens: usize, temperature: Option<f64>) -> Result<(String, Metrics)> {
    let (model, _) = load_model(model_dir)?;
    let inf = InferenceModel::from_model(&model)?;
    let toks = encode(prompt);
    anyhow::ensure!(!toks.is_empty(), "prompt must not be empty");
    let policy = temperature.map_or(DecodePolicy::Greedy, DecodePolicy::Temperature);
    let out = generate_seeded(&inf, &toks, max_tokens, policy, Some(EOS), ctx.cfg.seed)?;
    let text = detokenize(&out);
    let results = json!({"prompt": prompt, "policy": policy, "tokens": out, "text": text});
    let m = ctx.finish("generate", results, None)?;
    Ok((text, m))
}

pub fn eval(ctx: &Ctx, model_dir: &Path, teacher_dir: Option<&Path>, split: Split) -> Result<Metrics> {
    let (model, _) = load_model(model_dir)?;
    let c = ctx.corpus()?;
    let seq = ctx.cfg.corpus.seq_len;
    let r = eval_ppl(&model, c.get(split), seq)?;
    let mut results = json!({
        "split": format!("{split:?}").to_lowercase(),
        "ppl": r.ppl,
        "mean_nll": r.mean_nll,
        "tokens": r.tokens,
        "nll": r.nll,
    });
    if let Some(t) = teacher_dir {
        let (teacher, _) = load_model(t)?;
        let tr = eval_ppl(&teacher, c.get(split), seq)?;
        results["teacher_ppl"] = json!(tr.ppl);
        results["ratio"] = json!(r.ppl / tr.ppl);
    }
    std::fs::write(ctx.out.join("nll.txt"), r.nll.iter().map(|x| format!("{x}\n")).collect::<String>())?;
    ctx.finish("eval-ppl", results, None)
}

pub fn bench(ctx: &Ctx, verifier_dir: &Path, draft_dir: &Path, k: Option<usize>) -> Result<Metrics> {
    let (verifier, _) = load_model(verifier_dir)?;
    let (draft, _) = load_model(draft_dir)?;
    let s = &ctx.cfg.spec;
    let k = k.unwrap_or(s.k);
    anyhow::ensure!(k >= 1, "K must be at least 1");
    let c = ctx.corpus()?;
    let prompts = prompts_from(&c.test, s.prompt_len, s.prompts);
    let rec = spec_bench(
        &InferenceModel::from_model(&verifier)?,
        &InferenceModel::from_model(&draft)?,
        &prompts,
        k,
        s.max_tokens,
        Some(EOS),
        s.runs,
    )?;
    rec.stats.check()?;
    ctx.finish("spec-bench", serde_json::to_value(&rec)?, None)
}

pub fn ablate(ctx: &Ctx, kinds: &[AblationKind]) -> Result<Metrics> {
    let report = run_ablations(kinds, &ctx.cfg)?;
    ctx.finish("ablate", serde_json::to_value(&report)?, None)
}
