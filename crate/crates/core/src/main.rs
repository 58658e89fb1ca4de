use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use curriculum_dpo::curriculum::ConditionalGenerator;
use curriculum_dpo::harness::{self, Context, ExperimentConfig, FinetuneMode, Model, Variant};
use curriculum_dpo::rewards::{score_batch, write_scored_csv};
use curriculum_dpo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cdpo",
    version,
    about = "Curriculum preference optimization for toy diffusion and consistency models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Diffusion,
    Consistency,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Reward,
    MaskFree,
}

#[derive(Subcommand)]
enum Command {
    /// Train a diffusion model on the toy data.
    Pretrain(Common),
    /// Distill a consistency model from a diffusion teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Curriculum preference fine-tuning of a base checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Diffusion teacher, needed for consistency models.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Plain DPO without data or model curriculum.
        #[arg(long)]
        plain: bool,
    },
    /// Draw and score samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Reward statistics and win rate against a reference checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Plot series from a run directory's metrics.
    Curves {
        /// Run directory holding `metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(v) = common.variant {
        cfg.variant = match v {
            VariantArg::Diffusion => Variant::Diffusion,
            VariantArg::Consistency => Variant::Consistency,
        };
    }
    if let Some(m) = common.mode {
        cfg.mode = match m {
            ModeArg::Reward => FinetuneMode::Reward,
            ModeArg::MaskFree => FinetuneMode::MaskFree,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(format!("--{name} is required")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load_config(&common)?;
            let out = harness::pretrain(&cfg, Some(&cfg.out_dir))?;
            let first = out.losses.first().copied().unwrap_or(f64::NAN);
            let last = out.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrained {} iterations, loss {first:.4} -> {last:.4}",
                out.losses.len()
            );
        }
        Command::Distill { common, teacher } => {
            let cfg = load_config(&common)?;
            let t = required(teacher, &cfg.paths.teacher, "teacher")?;
            let teacher = Model::load_diffusion(&t)?;
            let out = harness::distill(&cfg, &teacher, Some(&cfg.out_dir))?;
            let last = out.losses.last().copied().unwrap_or(f64::NAN);
            println!("distilled {} iterations, final loss {last:.4}", out.losses.len());
        }
        Command::Finetune {
            common,
            base,
            teacher,
            plain,
        } => {
            let cfg = load_config(&common)?;
            let base = Model::load(&required(base, &cfg.paths.base, "base")?)?;
            let teacher = match teacher.or_else(|| cfg.paths.teacher.clone()) {
                Some(p) => Some(Model::load_diffusion(&p)?),
                None => None,
            };
            let run = if plain {
                harness::finetune_plain
            } else {
                harness::finetune_curriculum
            };
            let out = run(&cfg, &base, teacher.as_ref(), Some(&cfg.out_dir))?;
            for t in &out.transitions {
                println!(
                    "stage {} from iteration {}: rank {}, {} blocks, {} trainable, probe change {:e}",
                    t.stage,
                    t.iteration,
                    t.rank,
                    t.blocks.len(),
                    t.trainable_params,
                    t.probe_max_diff
                );
            }
            println!("{} optimizer steps", out.optimizer_steps);
        }
        Command::Sample {
            common,
            checkpoint,
            n_samples,
        } => {
            let cfg = load_config(&common)?;
            let ctx = Context::new(&cfg)?;
            let model = Model::load(&checkpoint)?;
            let n = n_samples.unwrap_or(cfg.eval.n_samples);
            if n == 0 {
                return Err(Error::Contract("--n-samples must be positive".into()));
            }
            let (ids, c) = ctx.cycled_conditions(n)?;
            let x = ctx.sampler(&model).generate(&c, cfg.eval.seed)?;
            let r = score_batch(&ctx.reward, &x, &ids)?;
            let p = cfg.out_dir.join("samples.csv");
            write_scored_csv(&p, &x, &ids, &r)?;
            println!("wrote {n} samples to {}", p.display());
        }
        Command::Eval {
            common,
            checkpoint,
            reference,
            n_samples,
        } => {
            let cfg = load_config(&common)?;
            let ctx = Context::new(&cfg)?;
            let model = Model::load(&checkpoint)?;
            let reference = match reference {
                Some(p) => Some(Model::load(&p)?),
                None => None,
            };
            let n = n_samples.unwrap_or(cfg.eval.n_samples);
            let s = harness::evaluate(&ctx, &model, reference.as_ref(), n, cfg.eval.seed)?;
            let text = s.to_toml();
            write_text(&cfg.out_dir.join("eval.toml"), &text)?;
            print!("{text}");
        }
        Command::Curves { out } => {
            let files = harness::emit_curves(&out)?;
            println!(
                "wrote {} curve files under {}",
                files.len(),
                out.join("curves").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cdpo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
