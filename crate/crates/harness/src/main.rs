use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use hybrid_core::conversion::InitMode;
use hybrid_core::corpus::{synthetic_text, Split};
use hybrid_core::distill::Stage;
use hybrid_harness::ablate::AblationKind;
use hybrid_harness::commands::{self, Ctx};
use hybrid_harness::config::RunConfig;

/// Train, convert, distil and benchmark toy hybrid attention/SSM models.
#[derive(Parser)]
#[command(name = "hybridctl", version)]
struct Cli {
    /// TOML run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Attention,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Kd,
    Sft,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic training text to a file.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300_000)]
        bytes: usize,
    },
    /// Train the all-attention teacher.
    TeacherTrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace attention layers with attention-initialized SSM layers.
    Convert {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target attention fraction.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        /// Comma-separated intermediate fractions for stepwise conversion.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<f64>>,
    },
    /// Run a distillation stage (kd or sft).
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_enum, default_value = "kd")]
        stage: StageArg,
        /// Pre-generated batches (JSON lines) instead of fresh pseudo-labels.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference optimization against the teacher as reference.
    Dpo {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a text prompt.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        /// Greedy decoding (the default).
        #[arg(long, conflicts_with = "temperature")]
        greedy: bool,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out perplexity, with the teacher ratio when a teacher is given.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speculative decoding benchmark.
    SpecBench {
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long = "k", short = 'k')]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired multi-seed ablations.
    Ablate {
        #[arg(long, value_enum, required = true, value_delimiter = ',')]
        kind: Vec<AblationKind>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::Corpus { out, bytes } => {
            std::fs::write(&out, synthetic_text(cfg.corpus.synthetic_seed, bytes))?;
            println!("wrote {}", out.display());
            return Ok(());
        }
        Cmd::TeacherTrain { out } => report(commands::teacher_train(&Ctx::new(cfg, &out)?)?),
        Cmd::Convert {
            teacher,
            out,
            fraction,
            init,
            schedule,
        } => {
            if let Some(f) = fraction {
                cfg.convert.attention_fraction = f;
            }
            if let Some(i) = init {
                cfg.convert.init = match i {
                    InitArg::Attention => InitMode::Attention,
                    InitArg::Random => InitMode::Random,
                };
            }
            if let Some(s) = schedule {
                cfg.convert.schedule = s;
            }
            cfg.validate()?;
            report(commands::convert(&Ctx::new(cfg, &out)?, &teacher)?)
        }
        Cmd::Distill {
            teacher,
            student,
            stage,
            labels,
            steps,
            out,
        } => {
            let stage = match stage {
                StageArg::Kd => Stage::Kd,
                StageArg::Sft => Stage::Sft,
            };
            if let Some(n) = steps {
                match stage {
                    Stage::Kd => cfg.distill.kd.steps = n,
                    _ => cfg.distill.sft.steps = n,
                }
            }
            report(commands::distill(
                &Ctx::new(cfg, &out)?,
                &teacher,
                &student,
                stage,
                labels.as_deref(),
            )?)
        }
        Cmd::Dpo {
            teacher,
            student,
            steps,
            out,
        } => {
            if let Some(n) = steps {
                cfg.distill.dpo.steps = n;
            }
            report(commands::dpo(&Ctx::new(cfg, &out)?, &teacher, &student)?)
        }
        Cmd::Generate {
            model,
            prompt,
            max_tokens,
            greedy: _,
            temperature,
            out,
        } => {
            let (text, _) = commands::generate(&Ctx::new(cfg, &out)?, &model, &prompt, max_tokens, temperature)?;
            println!("{prompt}{text}");
        }
        Cmd::EvalPpl {
            model,
            teacher,
            split,
            out,
        } => {
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            report(commands::eval(&Ctx::new(cfg, &out)?, &model, teacher.as_deref(), split)?)
        }
        Cmd::SpecBench { verifier, draft, k, out } => report(commands::bench(&Ctx::new(cfg, &out)?, &verifier, &draft, k)?),
        Cmd::Ablate { kind, out } => report(commands::ablate(&Ctx::new(cfg, &out)?, &kind)?),
    }
    Ok(())
}

fn report(m: hybrid_harness::metrics::Metrics) {
    let brief = hybrid_harness::metrics::strip_timing(&m.results);
    let mut shown = serde_json::Map::new();
    if let serde_json::Value::Object(o) = brief {
        for (k, v) in o {
            if !matches!(v, serde_json::Value::Array(ref a) if a.len() > 16) {
                shown.insert(k, v);
            }
        }
    }
    println!("{} ({:.1}s)", m.command, m.timing.wall_secs);
    println!("{}", serde_json::to_string_pretty(&shown).unwrap_or_default());
}
