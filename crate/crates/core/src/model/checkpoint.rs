//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "DALABCK1"
//! u32 len, model config text (key=value lines)
//! u32 len, metadata text (key=value lines)
//! u32 tensor count
//! per tensor: u32 name len, UTF-8 name, u32 rank, rank × u64 dims, f32 data
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{parse_kv, ModelConfig};
use super::encoder::Encoder;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DALABCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_encoder(enc: &Encoder<f32>) -> Self {
        Self {
            config: enc.cfg.clone(),
            meta: BTreeMap::new(),
            tensors: enc
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")))
                .collect(),
        }
    }

    /// Rebuilds the encoder from the tensors whose names it expects;
    /// other tensors (optimizer state, for example) are ignored.
    pub fn encoder(&self) -> Result<Encoder<f32>> {
        let template = Encoder::<f32>::from_params(self.config.clone(), {
            let mut p = ParamStore::new();
            for (name, t) in &self.tensors {
                if !name.contains(':') {
                    p.insert(name, t.clone().with_grad())?;
                }
            }
            p
        })?;
        Ok(template)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_text(w, &self.config.to_text())?;
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        write_text(w, &meta)?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_text(w, name)?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let config = ModelConfig::from_text(&read_text(r)?)?;
        let meta = parse_kv(&read_text(r)?)?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_text(r)?;
            let rank = read_u32(r)?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| {
                    Error::Format(format!("dimension of `{name}` overflows usize"))
                })?);
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_u32<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_text<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_text<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("invalid UTF-8 in checkpoint: {e}")))
}
