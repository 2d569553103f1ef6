use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mkge::cli::{cmd_ablate, cmd_eval, cmd_sweep, cmd_synth, cmd_train, EvalOptions, ExperimentConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "mkge", version, about = "Module embeddings for knowledge graph link prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs have run in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (defaults to the one used for training).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
        /// Rank against all entities without filtering known triples.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train scalar-only, vector-only and full models and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train and evaluate once per embedding multiplier.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated list of k values.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        entities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Settings are resolved as defaults, then preset, then config file, then flags.
#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["fb15k237", "wn18rr", "yago3-10"])]
    preset: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_parser = ["rc", "rh", "hh", "distmult", "rotate"])]
    model: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    lambda2: Option<String>,
    #[arg(long)]
    lambda3: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long, value_parser = ["constant", "exp"])]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_parser = ["scalar", "vector", "both"])]
    ablation: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(preset) = &self.preset {
            cfg.apply_preset(preset)?;
        }
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("dataset", &self.dataset),
            ("model", &self.model),
            ("k", &self.k),
            ("p", &self.p),
            ("lambda", &self.lambda),
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("lambda3", &self.lambda3),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("schedule", &self.schedule),
            ("seed", &self.seed),
            ("ablation", &self.ablation),
            ("eval_interval", &self.eval_interval),
            ("patience", &self.patience),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if cfg.dataset.as_os_str().is_empty() {
            anyhow::bail!("no dataset directory given (use --dataset or dataset= in the config file)");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MKGE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MKGE_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Train {
            config,
            resume,
            stop_after,
        } => {
            let cfg = config.resolve()?;
            cmd_train(&cfg, &TrainOptions { resume, stop_after })?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            raw,
            out,
        } => {
            cmd_eval(&EvalOptions {
                checkpoint,
                dataset,
                split,
                raw,
                out,
            })?;
        }
        Command::Ablate { config } => {
            cmd_ablate(&config.resolve()?)?;
        }
        Command::Sweep { config, ks } => {
            cmd_sweep(&config.resolve()?, &ks)?;
        }
        Command::Synth { out, entities, seed } => {
            let ds = cmd_synth(&out, entities, seed)?;
            println!(
                "{} entities, {} relations, {}/{}/{} train/valid/test triples",
                ds.vocab.num_entities(),
                ds.vocab.num_relations(),
                ds.triples.train.len(),
                ds.triples.valid.len(),
                ds.triples.test.len()
            );
        }
    }
    Ok(())
}
