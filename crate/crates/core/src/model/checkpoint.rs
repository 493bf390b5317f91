//! Checkpoint files.
//!
//! ```text
//! magic "LRCK" | version u32 | header_len u32 | header (JSON)
//! n_tensors u32
//! per tensor: name_len u16 | name | ndim u8 | ndim × u32 dims | f32 data
//! ```
//!
//! Integers and floats are little-endian. The header carries the model
//! config, the vocab hash, the training step, and the LoRA config when
//! adapters are attached.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::{LoraConfig, ModelConfig, ModelError, Result};

const MAGIC: &[u8; 4] = b"LRCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_hash: u64,
    pub step: u64,
    /// Pipeline stage that produced the checkpoint ("init", "cpt", "sft", "dpo").
    #[serde(default)]
    pub stage: String,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params,
    /// Tensors that are not model parameters (optimizer moments).
    pub extra: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<NamedTensor> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
    let mut nd = [0u8; 1];
    r.read_exact(&mut nd)?;
    let mut shape = Vec::with_capacity(nd[0] as usize);
    let mut b4 = [0u8; 4];
    for _ in 0..nd[0] {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Ok(NamedTensor { name, shape, data })
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Params, vocab_hash: u64, step: u64, stage: &str) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                config,
                vocab_hash,
                step,
                stage: stage.to_string(),
                lora: params.lora.clone(),
            },
            params,
            extra: Vec::new(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = self.header.clone();
        header.lora = self.params.lora.clone();
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let tensors = self.params.tensors();
        w.write_all(&((tensors.len() + self.extra.len()) as u32).to_le_bytes())?;
        for (name, shape, data) in tensors {
            write_tensor(&mut w, &name, &shape, data)?;
        }
        for t in &self.extra {
            write_tensor(&mut w, &t.name, &t.shape, &t.data)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if &b4 != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b4)?;
        let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            tensors.push(read_tensor(&mut r)?);
        }

        let mut params = Params::init(&header.config)?;
        if let Some(l) = &header.lora {
            params.lora_attach(l, 0)?;
        }
        let mut by_name: std::collections::HashMap<String, NamedTensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|(_, s, _)| s).collect();
        for ((name, dst), shape) in params.tensors_mut().into_iter().zip(shapes) {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        let mut extra: Vec<NamedTensor> = by_name.into_values().collect();
        extra.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Checkpoint { header, params, extra })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(f)
    }
}
