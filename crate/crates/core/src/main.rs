use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dhd::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "dhd",
    version,
    about = "Self-distilled deep hashing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or copy the train/query/database splits into <out>/data.
    GenData(Common),
    /// Train a model and write <out>/checkpoint.dhdk plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Encode database and query splits into packed code files.
    Encode(Common),
    /// Evaluate encoded queries against the encoded database.
    Eval(Common),
    /// Loss-term grid, s_T sweep and deformation table.
    Ablate(Common),
    /// Hamming shift of query codes as s_T varies.
    SweepSt(Common),
    /// mAP under held-out query deformations.
    DeformEval(Common),
}

/// Config file plus flag overrides.
#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    code_length: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    teacher_scale: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// mAP cut-off M.
    #[arg(long)]
    top_m: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.code_length {
            t.code_length = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lambda1 {
            t.loss.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            t.loss.lambda2 = v;
        }
        if let Some(v) = self.tau {
            t.loss.tau = v;
        }
        if let Some(v) = self.sigma {
            t.loss.sigma = v;
        }
        if let Some(v) = self.teacher_scale {
            t.teacher_scale = v;
        }
        if let Some(v) = self.lr {
            t.adam.base_lr = v;
        }
        if let Some(v) = self.top_m {
            cfg.eval.m = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let s = experiment::run_gen_data(&cfg)?;
            println!(
                "wrote {} train / {} query / {} database samples to {}",
                s.train.len(),
                s.query.len(),
                s.database.len(),
                cfg.output_dir.join("data").display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let t = experiment::run_train(&cfg, resume)?;
            println!(
                "trained {} epochs; checkpoint in {}",
                t.epochs_done,
                cfg.output_dir.display()
            );
        }
        Command::Encode(c) => {
            let cfg = c.resolve()?;
            experiment::run_encode(&cfg)?;
            println!(
                "codes written to {}",
                cfg.output_dir.join("codes").display()
            );
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let r = experiment::run_eval(&cfg)?;
            println!(
                "mAP@{} = {:.4} over {} queries",
                r.m, r.map_at_m, r.n_queries
            );
        }
        Command::Ablate(c) => {
            let cfg = c.resolve()?;
            experiment::run_ablation(&cfg)?;
            println!(
                "ablation tables written to {}",
                cfg.output_dir.join("ablation").display()
            );
        }
        Command::SweepSt(c) => {
            let cfg = c.resolve()?;
            print!("{}", experiment::run_sweep_st(&cfg)?);
        }
        Command::DeformEval(c) => {
            let cfg = c.resolve()?;
            print!("{}", experiment::run_deform_eval(&cfg)?);
        }
    }
    Ok(())
}
