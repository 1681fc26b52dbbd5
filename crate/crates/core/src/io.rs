//! On-disk formats: a binary tensor container, model checkpoints, and the
//! metrics stream.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, SegModel};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"PSTN";

/// Writes `magic, rank (u32), dims (u64 each), values (f32)`, little endian.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let bad = |m: &str| Error::Data(format!("tensor container: {m}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(bad("rank too large"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Tensor::new(shape, data))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut std::io::BufReader::new(fs::File::open(path)?))
}

/// Lowercase hex SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A named-parameter snapshot with its shape manifest and the hash of the
/// configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub config_hash: String,
    pub iteration: usize,
    params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture(model: &SegModel, config_hash: &str, iteration: usize) -> Self {
        let params = model
            .entries()
            .iter()
            .map(|e| NamedArray { name: e.name.clone(), shape: e.value.shape().to_vec(), data: e.value.data().to_vec() })
            .collect();
        Self { model: *model.config(), config_hash: config_hash.to_string(), iteration, params }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the model.
    pub fn restore(&self) -> Result<SegModel> {
        let mut model = SegModel::new(self.model, &mut crate::training::init_rng(0))?;
        let values: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| {
                if p.shape.iter().product::<usize>() != p.data.len() {
                    return Err(Error::Checkpoint(format!("parameter `{}` has inconsistent shape", p.name)));
                }
                Ok((p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())))
            })
            .collect::<Result<_>>()?;
        model.load_values(&values)?;
        Ok(model)
    }
}

/// Appends one JSON object per line.
pub fn append_jsonl(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}
