//! Dataset file format.
//!
//! ```text
//! DECODE-DS <header json>\n
//! repeated `count` times:
//!     <record json>\n
//!     <payload: record.floats little-endian f64>
//! ```
//!
//! The header carries `version`, `t_p`, `t_f`, `n_nb`, `dt`, `count` and
//! `train_count` (the first `train_count` scenes form the training split).
//! Each record names `scene_id`, `domain_tag`, the neighbour `mask` and the
//! payload length; the payload is past, future, then neighbour tracks,
//! flattened point by point. An empty file is an empty dataset.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Point, Scene, SceneDims};
use crate::error::{DecodeError, Result};

pub const DATASET_MAGIC: &str = "DECODE-DS";
pub const DATASET_VERSION: u32 = 1;

const MAX_LINE: usize = 1 << 16;
const MAX_DIM: usize = 1 << 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: SceneDims,
    pub train_count: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn train(&self) -> &[Scene] {
        &self.scenes[..self.train_count.min(self.scenes.len())]
    }

    pub fn val(&self) -> &[Scene] {
        &self.scenes[self.train_count.min(self.scenes.len())..]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let header = Header {
            version: DATASET_VERSION,
            t_p: self.dims.t_p,
            t_f: self.dims.t_f,
            n_nb: self.dims.n_nb,
            dt: self.dims.dt,
            count: self.scenes.len(),
            train_count: self.train_count,
        };
        out.extend_from_slice(DATASET_MAGIC.as_bytes());
        out.push(b' ');
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (i, s) in self.scenes.iter().enumerate() {
            if s.past.len() != self.dims.t_p
                || s.future.len() != self.dims.t_f
                || s.neighbors.len() != self.dims.n_nb
                || s.mask.len() != self.dims.n_nb
                || s.neighbors.iter().any(|n| n.len() != self.dims.t_p)
            {
                return Err(DecodeError::invalid(format!(
                    "scene {i} (id {}) does not match dataset dimensions",
                    s.scene_id
                )));
            }
            let record = Record {
                scene_id: s.scene_id,
                domain_tag: s.domain_tag,
                mask: s.mask.clone(),
                floats: payload_len(&self.dims),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.push(b'\n');
            let points = s
                .past
                .iter()
                .chain(&s.future)
                .chain(s.neighbors.iter().flatten());
            for p in points {
                out.extend_from_slice(&p[0].to_le_bytes());
                out.extend_from_slice(&p[1].to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.is_empty() {
            return Ok(Dataset {
                dims: SceneDims::default(),
                train_count: 0,
                scenes: Vec::new(),
            });
        }
        let mut cur = Cursor { bytes, pos: 0 };
        let header_err = |offset: u64, reason: String| DecodeError::Dataset {
            index: 0,
            offset,
            reason: format!("header: {reason}"),
        };
        let line = cur
            .line()
            .map_err(|r| header_err(0, r))?;
        let rest = line
            .strip_prefix(DATASET_MAGIC.as_bytes())
            .and_then(|r| r.strip_prefix(b" "))
            .ok_or_else(|| header_err(0, format!("missing `{DATASET_MAGIC}` magic")))?;
        let header: Header =
            serde_json::from_slice(rest).map_err(|e| header_err(0, e.to_string()))?;
        if header.version != DATASET_VERSION {
            return Err(DecodeError::UnsupportedVersion {
                what: "dataset",
                found: header.version,
                supported: DATASET_VERSION,
            });
        }
        let dims = SceneDims {
            t_p: header.t_p,
            t_f: header.t_f,
            n_nb: header.n_nb,
            dt: header.dt,
        };
        if dims.t_p > MAX_DIM || dims.t_f > MAX_DIM || dims.n_nb > MAX_DIM {
            return Err(header_err(0, format!("implausible dimensions {dims:?}")));
        }
        dims.validate().map_err(|e| header_err(0, e.to_string()))?;
        if header.train_count > header.count {
            return Err(header_err(
                0,
                format!("train_count {} exceeds count {}", header.train_count, header.count),
            ));
        }
        let expected = payload_len(&dims);
        let mut scenes = Vec::with_capacity(header.count.min(4096));
        for index in 0..header.count {
            let offset = cur.pos as u64;
            let fail = |reason: String| DecodeError::Dataset {
                index,
                offset,
                reason,
            };
            let line = cur.line().map_err(fail)?;
            let record: Record =
                serde_json::from_slice(line).map_err(|e| fail(e.to_string()))?;
            if record.floats != expected {
                return Err(fail(format!(
                    "payload holds {} floats, dimensions require {expected}",
                    record.floats
                )));
            }
            if record.mask.len() != dims.n_nb {
                return Err(fail(format!(
                    "mask has {} entries for {} neighbour slots",
                    record.mask.len(),
                    dims.n_nb
                )));
            }
            let raw = cur
                .take(expected * 8)
                .ok_or_else(|| fail(format!("truncated payload, expected {} bytes", expected * 8)))?;
            let mut floats = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
            let mut points = |n: usize| -> Vec<Point> {
                (0..n)
                    .map(|_| [floats.next().unwrap(), floats.next().unwrap()])
                    .collect()
            };
            let past = points(dims.t_p);
            let future = points(dims.t_f);
            let neighbors = (0..dims.n_nb).map(|_| points(dims.t_p)).collect();
            scenes.push(Scene {
                scene_id: record.scene_id,
                domain_tag: record.domain_tag,
                past,
                future,
                neighbors,
                mask: record.mask,
            });
        }
        if cur.pos != bytes.len() {
            return Err(DecodeError::Dataset {
                index: header.count,
                offset: cur.pos as u64,
                reason: format!("{} trailing bytes after the last record", bytes.len() - cur.pos),
            });
        }
        Ok(Dataset {
            dims,
            train_count: header.train_count,
            scenes,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    t_p: usize,
    t_f: usize,
    n_nb: usize,
    dt: f64,
    count: usize,
    train_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene_id: u64,
    domain_tag: u8,
    mask: Vec<bool>,
    floats: usize,
}

fn payload_len(d: &SceneDims) -> usize {
    2 * (d.t_p + d.t_f + d.n_nb * d.t_p)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> std::result::Result<&'a [u8], String> {
        let rest = &self.bytes[self.pos..];
        if rest.is_empty() {
            return Err("unexpected end of file".into());
        }
        let window = &rest[..rest.len().min(MAX_LINE)];
        match window.iter().position(|&b| b == b'\n') {
            Some(n) => {
                self.pos += n + 1;
                Ok(&rest[..n])
            }
            None if rest.len() > MAX_LINE => Err(format!("line longer than {MAX_LINE} bytes")),
            None => Err("unterminated line (truncated file?)".into()),
        }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = dataset.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
