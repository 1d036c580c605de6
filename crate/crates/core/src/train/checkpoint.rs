//! Binary checkpoint: magic, version, JSON header, then named f32 tensors.
//!
//! ```text
//! b"ADALABCK" | u32 version | u64 header_len | header JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data (LE)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adalabel::AdaLabelConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, Seq2Seq};
use crate::numerics::Tensor;

use super::optim::{Adam, AdamConfig};
use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ADALABCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestScores {
    pub step: u64,
    pub perplexity: f64,
    pub accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_cfg: ModelConfig,
    adalabel_cfg: AdaLabelConfig,
    train_cfg: TrainConfig,
    vocab: Vocabulary,
    step: u64,
    adam_t: Option<u64>,
    best: Option<BestScores>,
}

/// Everything needed to resume training or decode.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub adalabel_cfg: AdaLabelConfig,
    pub train_cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    pub best: Option<BestScores>,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Seq2Seq<f32>> {
        Seq2Seq::from_params(self.model_cfg.clone(), self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model_cfg: self.model_cfg.clone(),
            adalabel_cfg: self.adalabel_cfg.clone(),
            train_cfg: self.train_cfg.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            adam_t: self.adam.as_ref().map(|a| a.t),
            best: self.best,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;

        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(adam) = &self.adam {
            tensors.extend(adam.moment_tensors(&self.params));
        }
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = read_u64(r)? as usize;
        let mut json = vec![0u8; hlen];
        read_exact(r, &mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let count = read_u32(r)? as usize;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut moments: std::collections::HashMap<String, Tensor<f32>> = Default::default();
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let mut name = vec![0u8; nlen];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            if name.starts_with("adam.") {
                moments.insert(name, t);
            } else {
                names.push(name);
                tensors.push(t);
            }
        }
        let params = ParamStore::from_parts(names, tensors);
        params.check_layout(&header.model_cfg)?;

        let adam = match header.adam_t {
            None => None,
            Some(t) => {
                let mut take = |kind: &str| -> Result<Vec<Vec<f32>>> {
                    params
                        .iter()
                        .map(|(n, p)| {
                            let key = format!("adam.{kind}.{n}");
                            let m = moments
                                .remove(&key)
                                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                            if m.shape() != p.shape() {
                                return Err(Error::Checkpoint(format!("`{key}` has the wrong shape")));
                            }
                            Ok(m.into_vec())
                        })
                        .collect()
                };
                let m = take("m")?;
                let v = take("v")?;
                Some(Adam {
                    cfg: AdamConfig::from(&header.train_cfg),
                    t,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            model_cfg: header.model_cfg,
            adalabel_cfg: header.adalabel_cfg,
            train_cfg: header.train_cfg,
            vocab: header.vocab,
            step: header.step,
            best: header.best,
            params,
            adam,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
