//! Subcommand implementations. Each writes its outputs as CSV files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::ExperimentConfig;
use super::CliError;
use crate::data::{build_dataset, build_filter_index, generate_synthetic_kg, Dataset, RelationSpec};
use crate::eval::{evaluate, per_relation_table, write_per_relation_csv, FilterIndex, MetricsReport};
use crate::model::{AblationMask, ParameterStore};
use crate::train::{fit, FitCallback, StopAfter, TrainReport, TrainState};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "train_report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PER_RELATION_FILE: &str = "per_relation.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const METRICS_HEADER: &str = "split,filtered,mrr,hits1,hits3,hits10,queries";

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Evaluates `split` and writes the metrics and per-relation files into `out`.
fn write_eval(
    dataset: &Dataset,
    store: &ParameterStore,
    mask: AblationMask,
    split: &str,
    filtered: bool,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    let triples = dataset
        .triples
        .split(split)
        .ok_or_else(|| CliError::Config(format!("unknown split '{split}' (expected train|valid|test)")))?;
    let filter = if filtered {
        build_filter_index(&dataset.triples, &dataset.vocab)
    } else {
        FilterIndex::empty()
    };
    let report = evaluate(triples, store, &filter, mask, dataset.vocab.num_relations())?;
    write_file(&out.join(METRICS_FILE), |w| {
        writeln!(w, "{METRICS_HEADER}")?;
        writeln!(w, "{split},{filtered},{}", report.csv_fields())
    })?;
    let rows = per_relation_table(&report, &dataset.vocab);
    write_file(&out.join(PER_RELATION_FILE), |w| write_per_relation_csv(&rows, w))?;
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/checkpoint.bin`.
    pub resume: bool,
    /// Halt once this many epochs in total have been run.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics: MetricsReport,
    pub report: TrainReport,
    pub free_parameters: usize,
    pub seconds: f64,
}

/// Trains per `cfg` and writes the config, checkpoint, training report,
/// filtered test metrics and per-relation metrics into `cfg.out`.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<RunSummary, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let dataset = build_dataset(&cfg.dataset)?;
    let fingerprint = dataset.fingerprint();
    create_dir(&cfg.out)?;
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let mut state = if opts.resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        ckpt.check_compatible(cfg, &fingerprint)?;
        log::info!("resuming from epoch {}", ckpt.state.epoch);
        ckpt.state
    } else {
        TrainState::new(ParameterStore::init(
            cfg.model,
            cfg.k,
            dataset.vocab.num_entities(),
            dataset.vocab.num_relation_ids(),
            cfg.ablation,
            cfg.seed,
        ))
    };
    write_file(&cfg.out.join(CONFIG_FILE), |w| w.write_all(cfg.to_text().as_bytes()))?;

    let mut stop = opts.stop_after.map(StopAfter);
    let callbacks: &mut dyn FitCallback = match stop.as_mut() {
        Some(s) => s,
        None => &mut (),
    };
    let report = fit(&dataset, &cfg.train_config(), &mut state, callbacks)?;

    let free_parameters = state.store.free_parameter_count(cfg.ablation);
    let ckpt = Checkpoint {
        config_digest: cfg.digest(),
        dataset_fingerprint: fingerprint,
        config: cfg.clone(),
        state,
    };
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_file(&cfg.out.join(REPORT_FILE), |w| report.write_csv(w))?;
    let metrics = write_eval(&dataset, &ckpt.state.store, cfg.ablation, "test", true, &cfg.out)?;
    log::info!("test metrics\n{metrics}");
    Ok(RunSummary {
        metrics,
        report,
        free_parameters,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    pub dataset: Option<PathBuf>,
    pub split: String,
    /// Skip filtering of known true triples.
    pub raw: bool,
    /// Output directory; defaults to `eval_<split>` next to the checkpoint.
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<MetricsReport, CliError> {
    let ckpt = load_checkpoint(&opts.checkpoint)?;
    let dir = opts.dataset.clone().unwrap_or_else(|| ckpt.config.dataset.clone());
    let dataset = build_dataset(&dir)?;
    ckpt.check_dataset(&dataset.fingerprint())?;
    let out = opts.out.clone().unwrap_or_else(|| {
        let parent = opts.checkpoint.parent().unwrap_or(Path::new("."));
        parent.join(format!("eval_{}", opts.split))
    });
    create_dir(&out)?;
    let metrics = write_eval(&dataset, &ckpt.state.store, ckpt.config.ablation, &opts.split, !opts.raw, &out)?;
    println!("{metrics}");
    Ok(metrics)
}

/// Trains scalar-only, vector-only and full models with a shared seed into
/// subdirectories of `cfg.out` and writes a comparison table.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<(AblationMask, RunSummary)>, CliError> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let mut rows = Vec::new();
    for mask in AblationMask::ALL {
        let run = ExperimentConfig {
            ablation: mask,
            out: cfg.out.join(mask.name()),
            ..cfg.clone()
        };
        log::info!("ablation mode {}", mask.name());
        rows.push((mask, cmd_train(&run, &TrainOptions::default())?));
    }
    write_file(&cfg.out.join(ABLATION_FILE), |w| {
        writeln!(w, "mode,mrr,hits1,hits3,hits10,free_parameters")?;
        for (mask, s) in &rows {
            let m = &s.metrics;
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                mask.name(),
                m.mrr,
                m.hits1,
                m.hits3,
                m.hits10,
                s.free_parameters
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// One train and evaluation per embedding multiplier, in the given order.
pub fn cmd_sweep(cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<(usize, RunSummary)>, CliError> {
    if ks.is_empty() {
        return Err(CliError::Config("sweep needs at least one k".into()));
    }
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let mut rows = Vec::new();
    for &k in ks {
        let run = ExperimentConfig {
            k,
            out: cfg.out.join(format!("k{k}")),
            ..cfg.clone()
        };
        run.validate()?;
        log::info!("sweep k={k}");
        rows.push((k, cmd_train(&run, &TrainOptions::default())?));
    }
    write_file(&cfg.out.join(SWEEP_FILE), |w| {
        writeln!(w, "k,mrr,hits1,hits3,hits10,seconds")?;
        for (k, s) in &rows {
            let m = &s.metrics;
            writeln!(w, "{k},{:.6},{:.6},{:.6},{:.6},{:.3}", m.mrr, m.hits1, m.hits3, m.hits10, s.seconds)?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Writes a synthetic dataset as `train.txt`, `valid.txt` and `test.txt`.
pub fn cmd_synth(out: &Path, entities: usize, seed: u64) -> Result<Dataset, CliError> {
    let ds = generate_synthetic_kg(seed, entities, RelationSpec::default())?;
    create_dir(out)?;
    ds.write_dir(out)?;
    Ok(ds)
}
