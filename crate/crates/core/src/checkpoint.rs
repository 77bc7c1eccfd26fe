//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SVTT"  u32 version  u64 header_len  header (UTF-8 JSON)
//! u64 tensor_count
//! per tensor: u64 name_len  name  u64 rank  u64 dims[rank]  f32 payload (row-major)
//! ```
//!
//! Optimizer moments, when present, are stored as extra tensors named
//! `opt.m/<param>` and `opt.v/<param>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::gradengine::{AdamW, AdamWConfig, ParamStore};

pub const MAGIC: &[u8; 4] = b"SVTT";
pub const VERSION: u32 = 1;

/// Where a checkpoint sits in its curriculum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: usize,
    /// Frame counts of every stage this checkpoint has passed through.
    pub frame_history: Vec<usize>,
    /// Optimizer steps completed in the current stage.
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: StageMeta,
    optimizer: Option<AdamWHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamWHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: StageMeta,
    pub optimizer: Option<AdamW>,
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, limit: u64, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(Error::Format(format!("{what} length {n} exceeds {limit}")));
    }
    Ok(n as usize)
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Array2<f64>) -> Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_u64(w, 2)?;
    write_u64(w, t.nrows() as u64)?;
    write_u64(w, t.ncols() as u64)?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Array2<f64>)> {
    let n = read_len(r, 1 << 16, "tensor name")?;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
    let rank = read_len(r, 8, "rank")?;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_len(r, 1 << 32, "dimension")?);
    }
    let (rows, cols) = match dims.as_slice() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => return Err(Error::Format(format!("tensor '{name}' has unsupported rank {rank}"))),
    };
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn new(model: Model, meta: StageMeta) -> Self {
        Checkpoint {
            model,
            meta,
            optimizer: None,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config: self.model.config.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| AdamWHeader {
                config: o.config.clone(),
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_u64(&mut w, json.len() as u64)?;
        w.write_all(&json)?;
        let n_opt = if self.optimizer.is_some() { 2 } else { 0 };
        write_u64(&mut w, (self.model.params.len() * (1 + n_opt)) as u64)?;
        for (_, p) in self.model.params.iter() {
            write_tensor(&mut w, &p.name, &p.value)?;
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("opt.m/", &opt.m), ("opt.v/", &opt.v)] {
                for ((_, p), m) in self.model.params.iter().zip(moments) {
                    write_tensor(&mut w, &format!("{prefix}{}", p.name), m)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = read_len(&mut r, 1 << 24, "header")?;
        let mut json = vec![0u8; n];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let count = read_len(&mut r, 1 << 20, "tensor count")?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut vv = Vec::new();
        for _ in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            if name.starts_with("opt.m/") {
                m.push(t);
            } else if name.starts_with("opt.v/") {
                vv.push(t);
            } else {
                params.insert(name, t)?;
            }
        }
        let model = Model::from_parts(header.config, params)?;
        let optimizer = match header.optimizer {
            Some(h) => {
                if m.len() != model.params.len() || vv.len() != model.params.len() {
                    return Err(Error::Format("optimizer moments do not cover every parameter".into()));
                }
                let mut opt = AdamW::new(h.config, &model.params);
                opt.step = h.step;
                opt.m = m;
                opt.v = vv;
                opt.no_decay = model.decay_mask().iter().map(|d| !d).collect();
                Some(opt)
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            meta: header.meta,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }
}

/// Rounds every parameter to the nearest `f32`, matching what a save/load cycle yields.
pub fn round_to_f32(params: &mut ParamStore) {
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        params.value_mut(id).mapv_inplace(|x| x as f32 as f64);
    }
}
