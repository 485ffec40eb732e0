use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use odr::config::{RunConfig, Variant};
use odr::pipeline::{self, BaselineKind, PrepareStatus};
use odr::synth::{self, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "odr", version, about = "Origin-destination demand forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic city, trips and ground-truth intensities.
    Synth {
        /// Synthesis settings (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the city seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the OD series, clusters, competition matrix and population levels.
    Prepare(Common),
    /// Train and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test-split metrics of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's best checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `metrics_eval.json` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split metrics of the classical baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// ha, gm, iom, rm or all.
        #[arg(long, default_value = "all")]
        model: String,
        /// Defaults to `<output_dir>/baselines`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the hour-by-attribute attention table of a checkpoint.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated hours; all 24 by default.
        #[arg(long, value_delimiter = ',')]
        hours: Vec<usize>,
        /// Defaults to `attention_dump.csv` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// Ablation flag; repeatable.
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Cluster,
    Edge,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(p) = &self.preset {
            cfg.train.apply_preset(p)?;
            cfg.preset = Some(p.clone());
        }
        for a in &self.ablate {
            cfg.train.ablations.set(a)?;
        }
        if let Some(v) = self.variant {
            cfg.train.variant = match v {
                VariantArg::Cluster => Variant::Cluster,
                VariantArg::Edge => Variant::Edge,
            };
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn checkpoint_or_default(cfg: &RunConfig, ckpt: &Option<PathBuf>) -> PathBuf {
    ckpt.clone().unwrap_or_else(|| pipeline::checkpoint_path(cfg))
}

fn print_metrics(m: &pipeline::MetricsJson) {
    println!(
        "{:<12} rmse {:.4}  mae {:.4}  smape {:.4}  pcc {:.4}  ({} frames)",
        m.model, m.rmse, m.mae, m.smape, m.pcc, m.frames
    );
}

fn synth_cmd(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| odr::Error::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        spec.city.seed = s;
    }
    let summary = synth::write_all(&spec, out)?;
    println!(
        "wrote {} regions, {} attributes, {} trips (expected {:.1}) to {}",
        summary.regions,
        summary.attributes,
        summary.trips,
        summary.expected_trips,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => synth_cmd(&config, &out, seed)?,
        Command::Prepare(common) => {
            let cfg = common.load()?;
            let (m, status) = pipeline::prepare(&cfg)?;
            let dir = pipeline::prepared_dir(&cfg);
            match status {
                PrepareStatus::UpToDate => println!("{} is up to date", dir.display()),
                PrepareStatus::Written => println!(
                    "prepared {} frames ({} train / {} val / {} test), {} regions, {} trips in span into {}",
                    m.frames,
                    m.split.train,
                    m.split.val,
                    m.split.test,
                    m.regions,
                    m.trips_in_span,
                    dir.display()
                ),
            }
        }
        Command::Train { common, epochs } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let report = pipeline::run_training(&cfg, |r| {
                println!("epoch {:>4}  loss {:.6}  val rmse {:.4}  mae {:.4}", r.epoch, r.train_loss, r.val_rmse, r.val_mae)
            })?;
            println!(
                "best epoch {} (step {}); test rmse {:.4} mae {:.4}; outputs in {}",
                report.outcome.best_epoch,
                report.outcome.best_step,
                report.test.rmse,
                report.test.mae,
                report.dir.display()
            );
        }
        Command::Evaluate { common, checkpoint, out } => {
            let cfg = common.load()?;
            let ckpt = checkpoint_or_default(&cfg, &checkpoint);
            let out = out.unwrap_or_else(|| pipeline::run_dir(&cfg).join("metrics_eval.json"));
            let m = pipeline::run_evaluation(&cfg, &ckpt, &out)?;
            print_metrics(&m);
        }
        Command::Baseline { common, model, out } => {
            let cfg = common.load()?;
            let kinds = BaselineKind::parse(&model)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("baselines"));
            for m in pipeline::run_baselines(&cfg, &kinds, &dir)? {
                print_metrics(&m);
            }
        }
        Command::DumpAttention { common, checkpoint, hours, out } => {
            let cfg = common.load()?;
            let ckpt = checkpoint_or_default(&cfg, &checkpoint);
            let hours = if hours.is_empty() { (0..odr::transform::HOURS).collect() } else { hours };
            let out = out.unwrap_or_else(|| pipeline::run_dir(&cfg).join("attention_dump.csv"));
            let rows = pipeline::dump_attention(&cfg, &ckpt, &hours, &out)?;
            println!("wrote {} hours to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<odr::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
