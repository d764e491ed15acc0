//! Binary checkpoint.
//!
//! Layout (all integers little-endian):
//! `b"AMCKPT"`, u16 version, string config JSON, u64 vocab fingerprint,
//! u64 completed steps, u32 tensor count, then per tensor: string name,
//! u8 rank, u64 dims, f64 values. A trailing u8 flags optimizer state: when
//! 1, string optimizer config JSON, u64 step count, u32 buffer count and
//! the first then second moment buffers as (u64 length, f64 values).

use std::path::Path;

use answerme_core::model::{AnswerMe, ModelConfig};
use answerme_core::optim::OptimizerState;
use answerme_core::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use super::{put_string, Reader};
use crate::config::hex;
use crate::error::{AppError, Result};

const MAGIC: &[u8] = b"AMCKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AnswerMe,
    pub optimizer: Option<OptimizerState>,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
}

pub fn encode(model: &AnswerMe, optimizer: Option<&OptimizerState>, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_string(&mut out, &serde_json::to_string(model.config()).expect("config serializes"));
    out.extend_from_slice(&model.vocab_fingerprint().to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, name, t) in model.params().iter() {
        put_string(&mut out, name);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            put_string(&mut out, &serde_json::to_string(&opt.config).expect("optimizer config serializes"));
            out.extend_from_slice(&opt.step_count.to_le_bytes());
            out.extend_from_slice(&(opt.first_moment.len() as u32).to_le_bytes());
            for buf in opt.first_moment.iter().chain(&opt.second_moment) {
                out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Short content id used in reports.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes)[..8])
}

/// Parses a checkpoint. When `expect` is given, the stored model config and
/// vocabulary fingerprint must match it exactly.
pub fn decode(path: &Path, bytes: &[u8], expect: Option<(&ModelConfig, u64)>) -> Result<Checkpoint> {
    let mut r = Reader::new(path, bytes);
    r.expect(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(&format!("format version {version}, expected {VERSION}")));
    }
    let config: ModelConfig =
        serde_json::from_str(&r.string()?).map_err(|e| r.err(&format!("model config: {e}")))?;
    let fingerprint = r.u64()?;
    if let Some((want, want_fp)) = expect {
        if &config != want {
            return Err(AppError::Mismatch {
                path: path.to_path_buf(),
                reason: "checkpoint model config differs from the run's".into(),
            });
        }
        if fingerprint != want_fp {
            return Err(AppError::Mismatch {
                path: path.to_path_buf(),
                reason: format!("checkpoint vocabulary {fingerprint:#018x}, run vocabulary {want_fp:#018x}"),
            });
        }
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = r.f64s(len)?;
        let t = Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?;
        params.insert(&name, t).map_err(|e| r.err(&e.to_string()))?;
    }
    let model = AnswerMe::from_params(config, fingerprint, params).map_err(|e| AppError::Mismatch {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let config = serde_json::from_str(&r.string()?).map_err(|e| r.err(&format!("optimizer config: {e}")))?;
            let step_count = r.u64()?;
            let n = r.u32()? as usize;
            let mut bufs = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                let len = r.u64()? as usize;
                bufs.push(r.f64s(len)?);
            }
            let second_moment = bufs.split_off(n);
            let mut state = OptimizerState::new(config, model.params()).map_err(|e| r.err(&e.to_string()))?;
            if state.first_moment.len() != n {
                return Err(r.err("optimizer buffers do not match the parameters"));
            }
            for (i, (m, v)) in bufs.iter().zip(&second_moment).enumerate() {
                if m.len() != state.first_moment[i].len() || v.len() != m.len() {
                    return Err(r.err("optimizer buffer shape differs from its parameter"));
                }
            }
            state.step_count = step_count;
            state.first_moment = bufs;
            state.second_moment = second_moment;
            Some(state)
        }
        _ => return Err(r.err("bad optimizer flag")),
    };
    r.finish()?;
    Ok(Checkpoint { model, optimizer, step })
}

pub fn load(path: &Path, expect: Option<(&ModelConfig, u64)>) -> Result<Checkpoint> {
    decode(path, &super::read(path)?, expect)
}
