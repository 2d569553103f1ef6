//! Training checkpoints: the model payload followed by run state.
//!
//! The leading section is exactly the model checkpoint layout, so the
//! parameters can be read by [`ParameterStore::read_from`] alone. It is
//! followed by, little-endian:
//! `"MKGX"`, u32 version, config digest (32 bytes), dataset fingerprint
//! (32 bytes), u64 epoch, u8 stopped-early, u8 + f64 best validation MRR,
//! u64 stale validations, u64 report rows of (u64 epoch, f64 loss, f64 lr,
//! u8 + f64 validation MRR, f64 seconds), the two Adagrad accumulator
//! tables, and the resolved config text as u64 length + UTF-8 bytes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ExperimentConfig;
use super::CliError;
use crate::model::{read_f64s, read_u32, read_u64, write_f64s, ModelError, ParameterStore};
use crate::train::{EpochRecord, OptimizerState, TrainReport, TrainState};

pub const EXTENSION_MAGIC: &[u8; 4] = b"MKGX";
pub const EXTENSION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub dataset_fingerprint: [u8; 32],
    pub config: ExperimentConfig,
    pub state: TrainState,
}

fn write_opt<W: Write>(w: &mut W, x: Option<f64>) -> io::Result<()> {
    w.write_all(&[x.is_some() as u8])?;
    w.write_all(&x.unwrap_or(0.0).to_le_bytes())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, ModelError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|_| ModelError::Truncated("checkpoint state".into()))?;
    Ok(b[0])
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, ModelError> {
    Ok(read_f64s(r, 1)?[0])
}

fn read_opt<R: Read>(r: &mut R) -> Result<Option<f64>, ModelError> {
    let present = read_u8(r)?;
    let x = read_f64(r)?;
    Ok((present != 0).then_some(x))
}

fn read_bytes<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| ModelError::Truncated("checkpoint header".into()))?;
    Ok(b)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let s = &self.state;
        s.store.write_to(w)?;
        w.write_all(EXTENSION_MAGIC)?;
        w.write_all(&EXTENSION_VERSION.to_le_bytes())?;
        w.write_all(&self.config_digest)?;
        w.write_all(&self.dataset_fingerprint)?;
        w.write_all(&(s.epoch as u64).to_le_bytes())?;
        w.write_all(&[s.stopped_early as u8])?;
        write_opt(w, s.best_valid_mrr)?;
        w.write_all(&(s.stale_evals as u64).to_le_bytes())?;
        w.write_all(&(s.report.epochs.len() as u64).to_le_bytes())?;
        for e in &s.report.epochs {
            w.write_all(&(e.epoch as u64).to_le_bytes())?;
            write_f64s(w, &[e.loss, e.lr])?;
            write_opt(w, e.valid_mrr)?;
            write_f64s(w, &[e.seconds])?;
        }
        write_f64s(w, &s.optimizer.entity_acc)?;
        write_f64s(w, &s.optimizer.relation_acc)?;
        let text = self.config.to_text();
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CliError> {
        let store = ParameterStore::read_from(r)?;
        let magic: [u8; 4] = read_bytes(r)?;
        if &magic != EXTENSION_MAGIC {
            return Err(ModelError::BadMagic.into());
        }
        let version = read_u32(r)?;
        if version != EXTENSION_VERSION {
            return Err(ModelError::VersionUnsupported(version).into());
        }
        let config_digest = read_bytes(r)?;
        let dataset_fingerprint = read_bytes(r)?;
        let epoch = read_u64(r)? as usize;
        let stopped_early = read_u8(r)? != 0;
        let best_valid_mrr = read_opt(r)?;
        let stale_evals = read_u64(r)? as usize;
        let rows = read_u64(r)?;
        if rows > epoch as u64 {
            return Err(ModelError::Truncated(format!("{rows} report rows for {epoch} epochs")).into());
        }
        let mut epochs = Vec::with_capacity(rows as usize);
        for _ in 0..rows {
            let epoch = read_u64(r)? as usize;
            let lf = read_f64s(r, 2)?;
            let valid_mrr = read_opt(r)?;
            let seconds = read_f64(r)?;
            epochs.push(EpochRecord {
                epoch,
                loss: lf[0],
                lr: lf[1],
                valid_mrr,
                seconds,
            });
        }
        let optimizer = OptimizerState {
            entity_acc: read_f64s(r, store.entity_table().len())?,
            relation_acc: read_f64s(r, store.relation_table().len())?,
        };
        let len = read_u64(r)?;
        let mut text = Vec::new();
        r.take(len).read_to_end(&mut text).map_err(|e| CliError::Config(e.to_string()))?;
        if text.len() as u64 != len {
            return Err(ModelError::Truncated("embedded config".into()).into());
        }
        let text = String::from_utf8(text).map_err(|_| CliError::Config("embedded config is not UTF-8".into()))?;
        let config = ExperimentConfig::parse(&text)?;
        if config.digest() != config_digest {
            return Err(CliError::DigestMismatch("embedded config does not match its digest".into()));
        }
        Ok(Checkpoint {
            config_digest,
            dataset_fingerprint,
            config,
            state: TrainState {
                store,
                optimizer,
                epoch,
                report: TrainReport { epochs },
                best_valid_mrr,
                stale_evals,
                stopped_early,
            },
        })
    }

    /// Errors unless this checkpoint was produced by `config` on a dataset
    /// with the given fingerprint.
    pub fn check_compatible(&self, config: &ExperimentConfig, fingerprint: &[u8; 32]) -> Result<(), CliError> {
        if self.config_digest != config.digest() {
            return Err(CliError::DigestMismatch("checkpoint was trained with a different config".into()));
        }
        self.check_dataset(fingerprint)
    }

    pub fn check_dataset(&self, fingerprint: &[u8; 32]) -> Result<(), CliError> {
        if &self.dataset_fingerprint != fingerprint {
            return Err(CliError::DigestMismatch("checkpoint was trained on a different dataset".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    ckpt.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::read_from(&mut BufReader::new(file))
}
