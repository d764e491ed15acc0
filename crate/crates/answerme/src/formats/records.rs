//! Example record files and their JSON manifests.
//!
//! Record file: `b"AMDATA"`, u16 version, u64 count, then per example: u8
//! tag code, u8 image count, per image (u64 scene id, u16 height, u16 width,
//! RGB bytes), string input, string target. Strings are u32 length plus
//! UTF-8 bytes.

use std::collections::BTreeSet;
use std::path::Path;

use answerme_core::raster::Raster;
use answerme_core::tasks::{TaskExample, TaskTag};
use serde::{Deserialize, Serialize};

use super::{put_string, Reader};
use crate::error::{AppError, Result};

const MAGIC: &[u8] = b"AMDATA";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Family name, or `captions` for the pretraining pairs.
    pub family: String,
    pub split: String,
    pub seed: u64,
    pub count: usize,
    pub scene_ids: BTreeSet<u64>,
    pub file: String,
}

pub fn encode(examples: &[TaskExample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    for ex in examples {
        out.push(ex.tag.code());
        out.push(ex.images.len() as u8);
        for (img, id) in ex.images.iter().zip(&ex.image_ids) {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(img.height() as u16).to_le_bytes());
            out.extend_from_slice(&(img.width() as u16).to_le_bytes());
            out.extend_from_slice(img.pixels());
        }
        put_string(&mut out, &ex.input_text);
        put_string(&mut out, &ex.target_text);
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<TaskExample>> {
    let mut r = Reader::new(path, bytes);
    r.expect(MAGIC)?;
    if r.u16()? != VERSION {
        return Err(r.err("unsupported record version"));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let tag = TaskTag::from_code(r.u8()?).ok_or_else(|| r.err("unknown task tag"))?;
        let n = r.u8()? as usize;
        let mut images = Vec::with_capacity(n);
        let mut image_ids = Vec::with_capacity(n);
        for _ in 0..n {
            image_ids.push(r.u64()?);
            let h = r.u16()? as usize;
            let w = r.u16()? as usize;
            let px = r.bytes(h * w * 3)?.to_vec();
            images.push(Raster::new(h, w, px).map_err(|e| r.err(&e.to_string()))?);
        }
        let input_text = r.string()?;
        let target_text = r.string()?;
        out.push(TaskExample {
            images,
            image_ids,
            input_text,
            target_text,
            tag,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Writes `<stem>.bin` and `<stem>.json` under `dir`.
pub fn write_split(dir: &Path, stem: &str, manifest: &Manifest, examples: &[TaskExample]) -> Result<()> {
    super::write_once(&dir.join(format!("{stem}.bin")), &encode(examples))?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    super::write_once(&dir.join(format!("{stem}.json")), json.as_bytes())
}

/// Reads a split and checks it against its manifest.
pub fn read_split(dir: &Path, stem: &str) -> Result<(Manifest, Vec<TaskExample>)> {
    let mpath = dir.join(format!("{stem}.json"));
    let manifest: Manifest =
        serde_json::from_slice(&super::read(&mpath)?).map_err(|e| AppError::format(&mpath, e.to_string()))?;
    let path = dir.join(&manifest.file);
    let examples = decode(&path, &super::read(&path)?)?;
    if examples.len() != manifest.count {
        return Err(AppError::format(
            &path,
            format!("{} records, manifest says {}", examples.len(), manifest.count),
        ));
    }
    let ids: BTreeSet<u64> = examples.iter().flat_map(|e| e.image_ids.iter().copied()).collect();
    if ids != manifest.scene_ids {
        return Err(AppError::format(&path, "scene ids differ from the manifest"));
    }
    Ok((manifest, examples))
}
