//! Checkpoint container: weights, optimizer moments, RNG position, and
//! the schedule parameters, all in one self-describing binary file.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::Adam;
use super::train::Trainer;
use super::{UNet, UNetConfig};
use crate::diffusion::DiffusionSchedule;

const MAGIC: &[u8; 8] = b"LOBCKPT\n";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("serialization failed: {0}")]
    Encode(#[from] bincode::Error),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    meta: String,
    config: UNetConfig,
    schedule: DiffusionSchedule,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    adam: Adam,
    rng: RngState,
    step: u64,
}

/// Serializes a trainer and its schedule. `meta` is an arbitrary
/// provenance string (the CLI stores the config hash there).
pub fn save<W: Write>(
    mut w: W,
    trainer: &mut Trainer,
    sched: &DiffusionSchedule,
    meta: &str,
) -> Result<(), CheckpointError> {
    let params: Vec<(String, Vec<usize>, Vec<f64>)> = trainer
        .net
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.value.to_vec()))
        .collect();
    let file = CheckpointFile {
        meta: meta.to_string(),
        config: trainer.net.cfg.clone(),
        schedule: sched.clone(),
        params,
        adam: trainer.adam.clone(),
        rng: RngState { seed: trainer.rng.get_seed(), word_pos: trainer.rng.get_word_pos() },
        step: trainer.step,
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    bincode::serialize_into(&mut w, &file)?;
    Ok(())
}

/// Restores a trainer, the schedule it was trained against, and the
/// stored provenance string.
pub fn load<R: Read>(mut r: R) -> Result<(Trainer, DiffusionSchedule, String), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    let file: CheckpointFile = bincode::deserialize_from(&mut r)?;
    let mut rng = ChaCha12Rng::from_seed(file.rng.seed);
    // Rebuild with a throwaway RNG; stored weights overwrite the init.
    let mut net = UNet::new(file.config, &mut rng.clone())
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    {
        let mut live = net.params_mut();
        if live.len() != file.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} stored tensors vs {} in the rebuilt network",
                file.params.len(),
                live.len()
            )));
        }
        for (p, (name, shape, data)) in live.iter_mut().zip(file.params.iter()) {
            if &p.name != name || &p.shape != shape || p.value.len() != data.len() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {} (shape {:?}) vs stored {} (shape {:?})",
                    p.name, p.shape, name, shape
                )));
            }
            p.value.copy_from_slice(data);
        }
    }
    rng.set_word_pos(file.rng.word_pos);
    let trainer = Trainer { net, adam: file.adam, rng, step: file.step };
    Ok((trainer, file.schedule, file.meta))
}

pub fn save_file(
    path: &Path,
    trainer: &mut Trainer,
    sched: &DiffusionSchedule,
    meta: &str,
) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    save(std::io::BufWriter::new(f), trainer, sched, meta)
}

pub fn load_file(path: &Path) -> Result<(Trainer, DiffusionSchedule, String), CheckpointError> {
    let f = std::fs::File::open(path)?;
    load(std::io::BufReader::new(f))
}
