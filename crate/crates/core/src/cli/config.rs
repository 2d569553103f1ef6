//! Experiment configuration: `key=value` files, presets and overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::CliError;
use crate::model::{AblationMask, Variant};
use crate::train::{LossConfig, Schedule, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: Variant,
    pub k: usize,
    pub p: u32,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub ablation: AblationMask,
    pub eval_interval: usize,
    pub patience: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::new(),
            model: Variant::ModuleHH,
            k: 32,
            p: 3,
            lambda: 0.05,
            lambda1: 2.0,
            lambda2: 0.5,
            lambda3: 2.0,
            epochs: 100,
            batch_size: 500,
            lr: 0.1,
            schedule: Schedule::Constant,
            seed: 0,
            ablation: AblationMask::Both,
            eval_interval: 5,
            patience: 10,
            out: PathBuf::from("out"),
        }
    }
}

/// Keys in the order they are written by [`ExperimentConfig::to_text`].
pub const KEYS: [&str; 17] = [
    "dataset",
    "model",
    "k",
    "p",
    "lambda",
    "lambda1",
    "lambda2",
    "lambda3",
    "epochs",
    "batch_size",
    "lr",
    "schedule",
    "seed",
    "ablation",
    "eval_interval",
    "patience",
    "out",
];

/// Keys that do not affect the trained parameters.
const LOCATION_KEYS: [&str; 2] = ["dataset", "out"];

pub const PRESETS: [&str; 3] = ["fb15k237", "wn18rr", "yago3-10"];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("bad value '{value}' for {key}: {e}")))
}

impl ExperimentConfig {
    /// Applies a named hyperparameter preset on top of the current values.
    pub fn apply_preset(&mut self, name: &str) -> Result<(), CliError> {
        let (batch, lambda, schedule) = match name {
            "fb15k237" => (300, 0.045, Schedule::Constant),
            "wn18rr" => (500, 0.08, Schedule::Exponential),
            "yago3-10" => (1000, 0.005, Schedule::Constant),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown preset '{name}' (expected one of {})",
                    PRESETS.join("|")
                )))
            }
        };
        self.model = Variant::ModuleHH;
        self.epochs = 200;
        self.batch_size = batch;
        self.k = 128;
        self.p = 3;
        self.lambda = lambda;
        self.lambda1 = 2.0;
        self.lambda2 = 0.5;
        self.lambda3 = 2.0;
        self.lr = 0.1;
        self.schedule = schedule;
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "model" => self.model = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "p" => self.p = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "lambda1" => self.lambda1 = parse_value(key, value)?,
            "lambda2" => self.lambda2 = parse_value(key, value)?,
            "lambda3" => self.lambda3 = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" | "batch-size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "schedule" => self.schedule = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "ablation" => self.ablation = parse_value(key, value)?,
            "eval_interval" | "eval-interval" => self.eval_interval = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(CliError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text)
    }

    /// Parses a complete configuration text over the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be ≥ 1");
        }
        if !(2..=3).contains(&self.p) {
            return bad("p must be 2 or 3");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if [self.lambda, self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda values must be finite and ≥ 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and > 0");
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.display().to_string(),
            "model" => self.model.name().to_string(),
            "k" => self.k.to_string(),
            "p" => self.p.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "lambda1" => format!("{:?}", self.lambda1),
            "lambda2" => format!("{:?}", self.lambda2),
            "lambda3" => format!("{:?}", self.lambda3),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            "schedule" => self.schedule.name().to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.name().to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "patience" => self.patience.to_string(),
            "out" => self.out.display().to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Resolved configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.value(key));
        }
        s
    }

    /// SHA-256 over every setting that influences training.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| !LOCATION_KEYS.contains(k)) {
            h.update(format!("{key}={}\n", self.value(key)).as_bytes());
        }
        h.finalize().into()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: self.schedule,
            seed: self.seed,
            loss: LossConfig {
                p: self.p,
                lambda: self.lambda,
                rates: [self.lambda1, self.lambda2, self.lambda3],
            },
            mask: self.ablation,
            eval_interval: self.eval_interval,
            patience: self.patience,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wn18rr_preset() {
        let mut c = ExperimentConfig::default();
        c.apply_preset("wn18rr").unwrap();
        assert_eq!((c.epochs, c.batch_size, c.k, c.p), (200, 500, 128, 3));
        assert_eq!((c.lambda, c.lambda1, c.lambda2, c.lambda3), (0.08, 2.0, 0.5, 2.0));
        assert_eq!(c.schedule, Schedule::Exponential);
        assert!(c.apply_preset("nope").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_preset("fb15k237").unwrap();
        c.dataset = PathBuf::from("data/some dir");
        c.lr = 0.1 + 0.2;
        c.ablation = AblationMask::VectorOnly;
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn digest_ignores_locations() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        b.dataset = PathBuf::from("copy");
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn validation() {
        for bad in ["k=0", "p=4", "batch_size=0", "lambda=-1", "lr=0", "model=transe", "nonsense=1", "k"] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
        let c = ExperimentConfig::parse("# comment\n\n k = 8 \nepochs=0\n").unwrap();
        assert_eq!((c.k, c.epochs), (8, 0));
    }
}
