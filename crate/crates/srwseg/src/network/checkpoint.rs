//! Versioned binary checkpoints: model parameters, network config, per-layer
//! whitening statistics, optimizer state, progress counters, and the run
//! seed, behind the magic string `SRWSEG1`.
//!
//! Layout: magic (8 bytes, `SRWSEG1\0`) | version u32 | dtype u8 |
//! header length u64 | JSON header | raw little-endian tensor data in header
//! order (parameters, then momentum buffers, then EMA matrices).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use super::{Model, NetworkConfig};
use crate::element::Element;
use crate::error::{Result, SrwError};

const MAGIC: &[u8; 8] = b"SRWSEG1\0";
const VERSION: u32 = 1;

/// Optimizer and progress state carried inside a checkpoint.
#[derive(Debug, Clone)]
pub struct TrainState<A: Element> {
    /// SGD momentum buffers, parallel to the parameter list.
    pub momentum_buffers: Vec<ArrayD<A>>,
    pub epoch: usize,
    pub global_step: usize,
    pub best_val_iou: f64,
    pub seed: u64,
}

/// Whitening statistics of one SRW stage.
#[derive(Debug, Clone)]
pub struct IswStageState<A: Element> {
    pub stage: usize,
    pub momentum: A,
    pub warm_samples: u64,
    pub ema: Option<Array2<A>>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<A: Element> {
    pub model: Model<A>,
    pub isw: Vec<IswStageState<A>>,
    pub train: Option<TrainState<A>>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct IswMeta {
    stage: usize,
    momentum: f64,
    warm_samples: u64,
    channels: usize,
    has_ema: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    epoch: usize,
    global_step: usize,
    best_val_iou: f64,
    seed: u64,
    has_optimizer: bool,
    params: Vec<TensorMeta>,
    isw: Vec<IswMeta>,
}

fn push_tensor<A: Element>(buf: &mut Vec<u8>, t: &ArrayD<A>) {
    for &v in t.iter() {
        v.write_le(buf);
    }
}

fn read_tensor<A: Element>(data: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<A>> {
    let count: usize = shape.iter().product();
    let bytes = count * A::DTYPE_BYTES as usize;
    let end = *offset + bytes;
    if end > data.len() {
        return Err(SrwError::Checkpoint("truncated tensor payload".into()));
    }
    let stride = A::DTYPE_BYTES as usize;
    let values: Vec<A> =
        data[*offset..end].chunks_exact(stride).map(|c| A::read_le(c)).collect();
    *offset = end;
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), values)
        .map_err(|e| SrwError::Checkpoint(format!("bad tensor shape {shape:?}: {e}")))
}

/// Serializes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<A: Element>(path: &Path, ck: &Checkpoint<A>) -> Result<()> {
    let header = Header {
        config: ck.model.config().clone(),
        epoch: ck.train.as_ref().map_or(0, |t| t.epoch),
        global_step: ck.train.as_ref().map_or(0, |t| t.global_step),
        best_val_iou: ck.train.as_ref().map_or(0.0, |t| t.best_val_iou),
        seed: ck.train.as_ref().map_or(0, |t| t.seed),
        has_optimizer: ck.train.is_some(),
        params: ck
            .model
            .params()
            .iter()
            .map(|(name, v)| TensorMeta { name: name.to_string(), shape: v.shape().to_vec() })
            .collect(),
        isw: ck
            .isw
            .iter()
            .map(|s| IswMeta {
                stage: s.stage,
                momentum: s.momentum.as_f64(),
                warm_samples: s.warm_samples,
                channels: s.ema.as_ref().map_or(0, |e| e.dim().0),
                has_ema: s.ema.is_some(),
            })
            .collect(),
    };
    if let Some(train) = &ck.train {
        if train.momentum_buffers.len() != ck.model.params().len() {
            return Err(SrwError::Checkpoint(format!(
                "momentum buffer count {} does not match parameter count {}",
                train.momentum_buffers.len(),
                ck.model.params().len()
            )));
        }
    }
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| SrwError::Checkpoint(format!("header encode: {e}")))?;

    let mut buf = Vec::with_capacity(header_json.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(A::DTYPE_BYTES);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, v) in ck.model.params().iter() {
        push_tensor(&mut buf, v);
    }
    if let Some(train) = &ck.train {
        for m in &train.momentum_buffers {
            push_tensor(&mut buf, m);
        }
    }
    for s in &ck.isw {
        if let Some(ema) = &s.ema {
            push_tensor(&mut buf, &ema.clone().into_dyn());
        }
    }

    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| SrwError::io_at(parent, e))?;
        }
    }
    let mut file = fs::File::create(&tmp).map_err(|e| SrwError::io_at(&tmp, e))?;
    file.write_all(&buf).map_err(|e| SrwError::io_at(&tmp, e))?;
    file.sync_all().map_err(|e| SrwError::io_at(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| SrwError::io_at(path, e))?;
    Ok(())
}

/// Loads a checkpoint; the element type must match the stored dtype.
pub fn load_checkpoint<A: Element>(path: &Path) -> Result<Checkpoint<A>> {
    let data = fs::read(path).map_err(|e| SrwError::io_at(path, e))?;
    if data.len() < MAGIC.len() + 13 {
        return Err(SrwError::Checkpoint(format!("{}: file too short", path.display())));
    }
    if &data[..8] != MAGIC {
        return Err(SrwError::Checkpoint(format!(
            "{}: not an SRWSEG1 checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(SrwError::Checkpoint(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let dtype = data[12];
    if dtype != A::DTYPE_BYTES {
        return Err(SrwError::Checkpoint(format!(
            "{}: checkpoint stores {}-byte scalars but a {}-byte model was requested",
            path.display(),
            dtype,
            A::DTYPE_BYTES
        )));
    }
    let header_len = u64::from_le_bytes(data[13..21].try_into().expect("8 bytes")) as usize;
    let header_end = 21 + header_len;
    if data.len() < header_end {
        return Err(SrwError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&data[21..header_end])
        .map_err(|e| SrwError::Checkpoint(format!("header decode: {e}")))?;

    let mut offset = header_end;
    let mut values = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let t = read_tensor::<A>(&data, &mut offset, &meta.shape)?;
        values.push((meta.name.clone(), t));
    }
    let model = Model::from_parts(header.config.clone(), values)?;
    let train = if header.has_optimizer {
        let mut bufs = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            bufs.push(read_tensor::<A>(&data, &mut offset, &meta.shape)?);
        }
        Some(TrainState {
            momentum_buffers: bufs,
            epoch: header.epoch,
            global_step: header.global_step,
            best_val_iou: header.best_val_iou,
            seed: header.seed,
        })
    } else {
        None
    };
    let mut isw = Vec::with_capacity(header.isw.len());
    for meta in &header.isw {
        let ema = if meta.has_ema {
            let t = read_tensor::<A>(&data, &mut offset, &[meta.channels, meta.channels])?;
            Some(t.into_dimensionality::<ndarray::Ix2>().expect("square EMA"))
        } else {
            None
        };
        isw.push(IswStageState {
            stage: meta.stage,
            momentum: A::lit(meta.momentum),
            warm_samples: meta.warm_samples,
            ema,
        });
    }
    if offset != data.len() {
        return Err(SrwError::Checkpoint(format!(
            "{} trailing bytes after tensor payload",
            data.len() - offset
        )));
    }
    Ok(Checkpoint { model, isw, train })
}
