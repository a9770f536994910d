use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_vocab_file, write_vocab_file};
use crate::model::{ModelConfig, PolyLm};
use crate::numerics::{ParamStore, Tensor};

use super::{AdamState, Schedule, TrainConfig, TrainError};

pub const MAGIC: &[u8; 4] = b"PLM1";
const FORMAT_VERSION: u32 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PolyLm,
    pub adam: AdamState,
    /// Updates completed so far.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub schedule: Schedule,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    version: u32,
    model: ModelConfig,
    schedule: Schedule,
    train: TrainConfig,
    step: u64,
    adam_t: u64,
    rng: ChaCha8Rng,
    /// Vocabulary file contents (`token\tcount\tsenses` lines).
    vocab: String,
    tensors: u32,
}

fn format_err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        let mut vocab = Vec::new();
        write_vocab_file(&mut vocab, &self.model.vocab, &self.model.inventory)?;
        let params = &self.model.params;
        let meta = Metadata {
            version: FORMAT_VERSION,
            model: self.model.config.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            step: self.step,
            adam_t: self.adam.t,
            rng: self.rng.clone(),
            vocab: String::from_utf8(vocab).expect("vocabulary tokens are UTF-8"),
            tensors: (params.len() * 3) as u32,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| format_err(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        for (id, name, t) in params.iter() {
            write_tensor(&mut w, name, t.shape(), t.data())?;
            write_tensor(&mut w, &format!("{MOMENT_M}{name}"), t.shape(), &self.adam.m[id.0])?;
            write_tensor(&mut w, &format!("{MOMENT_V}{name}"), t.shape(), &self.adam.v[id.0])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: Metadata = serde_json::from_slice(&meta).map_err(|e| format_err(format!("metadata: {e}")))?;
        if meta.version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {}", meta.version)));
        }
        let (vocab, inventory) = read_vocab_file(meta.vocab.as_bytes())?;

        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..meta.tensors {
            let (name, shape, data) = read_tensor(&mut r)?;
            if let Some(base) = name.strip_prefix(MOMENT_M) {
                expect_param(&params, base, m.len())?;
                m.push(data);
            } else if let Some(base) = name.strip_prefix(MOMENT_V) {
                expect_param(&params, base, v.len())?;
                v.push(data);
            } else {
                params.insert(name, Tensor::new(shape, data)?);
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(format_err("optimizer moments missing for some parameters"));
        }
        let model = PolyLm::from_params(meta.model, vocab, inventory, params)?;
        Ok(Checkpoint {
            model,
            adam: AdamState { m, v, t: meta.adam_t },
            step: meta.step,
            rng: meta.rng,
            schedule: meta.schedule,
            train: meta.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        self.write_to(BufWriter::new(fs::File::create(&tmp)?))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

fn expect_param(params: &ParamStore<f32>, name: &str, slot: usize) -> Result<(), TrainError> {
    match params.id(name) {
        Some(id) if id.0 == slot => Ok(()),
        _ => Err(format_err(format!("moment for {name} out of order"))),
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f32>), TrainError> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((name, shape, data))
}

/// `dir/ckpt-00001234.plm`
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.plm"))
}

/// Checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, TrainError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".plm"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            out.push((s, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, TrainError> {
    Ok(list_checkpoints(dir)?.pop().map(|(_, p)| p))
}

/// Deletes all but the newest `keep` checkpoints.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<(), TrainError> {
    let all = list_checkpoints(dir)?;
    let excess = all.len().saturating_sub(keep);
    for (_, p) in &all[..excess] {
        fs::remove_file(p)?;
    }
    Ok(())
}
