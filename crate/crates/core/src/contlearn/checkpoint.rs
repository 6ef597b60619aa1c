//! Checkpoint file format.
//!
//! ```text
//! magic      "DECODE-CK"                9 bytes
//! version    u32 little-endian
//! length     u64 little-endian          manifest byte length
//! digest     32 bytes                   SHA-256 of the manifest
//! manifest   JSON
//! blocks     little-endian f64 arrays   layout listed in the manifest
//! trailer    32 bytes                   SHA-256 of everything before it
//! ```
//!
//! The manifest echoes the configuration, every tensor manifest, the query
//! pool, the training-log digests and each block's offset, length and
//! SHA-256. Serialization is canonical, so loading and re-saving reproduces
//! the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Framework, PhaseLog};
use crate::bundle::{Manifest, ParamBundle};
use crate::config::Config;
use crate::error::{DecodeError, Result};
use crate::flow::FlowSpec;
use crate::hyper::{DomainQuery, HyperSpec, HypernetState, StoredTarget, TargetGenerator};
use crate::prednet::{Anchors, Encoder, EncoderSpec, HeadSpec};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"DECODE-CK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 9 + 4 + 8 + 32;
const MAX_MANIFEST: u64 = 1 << 26;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkManifest {
    config: Config,
    encoder: EncoderSpec,
    head: HeadSpec,
    flow: FlowSpec,
    hyper: HyperSpec,
    manifests: Vec<Manifest>,
    queries: Vec<QueryRecord>,
    logs: Vec<LogRecord>,
    blocks: Vec<BlockRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    id: u32,
    finalized: bool,
    stored: bool,
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    digest: String,
    #[serde(flatten)]
    log: PhaseLog,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    name: String,
    /// Byte offset from the start of the file.
    offset: u64,
    /// Number of f64 values.
    len: u64,
    sha256: String,
}

fn blocks_of(fw: &Framework) -> Vec<(String, Vec<f64>)> {
    let mut b = vec![
        ("encoder".to_string(), fw.encoder.params.flat.clone()),
        ("generalized".to_string(), fw.generalized.flat.clone()),
        ("anchors".to_string(), fw.anchors.points.iter().flatten().copied().collect()),
        ("hyper.decoder.trunk".to_string(), fw.hyper.decoder.trunk.flat.clone()),
        ("hyper.decoder.bank".to_string(), fw.hyper.decoder.bank.clone()),
        ("hyper.flow.trunk".to_string(), fw.hyper.flow.trunk.flat.clone()),
        ("hyper.flow.bank".to_string(), fw.hyper.flow.bank.clone()),
    ];
    for q in &fw.hyper.queries {
        b.push((format!("query.{}", q.id), q.q.clone()));
    }
    for s in &fw.hyper.stored {
        b.push((format!("stored.{}.decoder", s.query_id), s.decoder.clone()));
        b.push((format!("stored.{}.flow", s.query_id), s.flow.clone()));
    }
    b
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn save_checkpoint(fw: &Framework) -> Result<Vec<u8>> {
    let blocks = blocks_of(fw);
    let mut records = Vec::with_capacity(blocks.len());
    let mut payload = Vec::new();
    for (name, data) in &blocks {
        let mut raw = Vec::with_capacity(data.len() * 8);
        for v in data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        records.push(BlockRecord {
            name: name.clone(),
            offset: payload.len() as u64,
            len: data.len() as u64,
            sha256: hex::encode(sha(&raw)),
        });
        payload.extend(raw);
    }
    let mut manifest = CkManifest {
        config: fw.config.clone(),
        encoder: fw.encoder.spec,
        head: fw.head_spec(),
        flow: fw.flow_spec()?,
        hyper: fw.hyper.spec.clone(),
        manifests: vec![
            fw.encoder.params.manifest.clone(),
            fw.generalized.manifest.clone(),
            fw.hyper.decoder.target.clone(),
            fw.hyper.decoder.trunk.manifest.clone(),
            fw.hyper.flow.target.clone(),
            fw.hyper.flow.trunk.manifest.clone(),
        ],
        queries: fw
            .hyper
            .queries
            .iter()
            .map(|q| QueryRecord {
                id: q.id,
                finalized: q.finalized,
                stored: fw.hyper.stored.iter().any(|s| s.query_id == q.id),
            })
            .collect(),
        logs: fw
            .logs
            .iter()
            .map(|l| LogRecord {
                digest: l.digest(),
                log: l.clone(),
            })
            .collect(),
        blocks: Vec::new(),
    };
    // Block offsets are absolute, so they depend on the manifest length,
    // which depends on the offsets. Iterate until the length is stable.
    let mut base = 0u64;
    let json = loop {
        manifest.blocks = records
            .iter()
            .map(|r| BlockRecord {
                name: r.name.clone(),
                offset: base + r.offset,
                len: r.len,
                sha256: r.sha256.clone(),
            })
            .collect();
        let json = serde_json::to_vec(&manifest)?;
        let next = (HEADER + json.len()) as u64;
        if next == base {
            break json;
        }
        base = next;
    };
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&sha(&json));
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = sha(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupted(offset: usize, reason: impl Into<String>) -> DecodeError {
    DecodeError::Corrupted {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Framework> {
    if bytes.len() < 9 || &bytes[..9] != CHECKPOINT_MAGIC {
        return Err(corrupted(0, "missing DECODE-CK magic"));
    }
    if bytes.len() < HEADER + 32 {
        return Err(corrupted(bytes.len(), "file too short for a checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DecodeError::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes"));
    if mlen > MAX_MANIFEST || HEADER as u64 + mlen + 32 > bytes.len() as u64 {
        return Err(corrupted(13, format!("manifest length {mlen} exceeds the file")));
    }
    let mend = HEADER + mlen as usize;
    let json = &bytes[HEADER..mend];
    if sha(json)[..] != bytes[21..53] {
        return Err(corrupted(HEADER, "manifest digest mismatch"));
    }
    let manifest: CkManifest =
        serde_json::from_slice(json).map_err(|e| corrupted(HEADER, format!("manifest: {e}")))?;
    let trailer = bytes.len() - 32;
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::with_capacity(manifest.blocks.len());
    let mut expected_offset = mend as u64;
    for b in &manifest.blocks {
        let at = b.offset as usize;
        if b.offset != expected_offset {
            return Err(corrupted(at, format!("block `{}` is not contiguous", b.name)));
        }
        let end = b
            .len
            .checked_mul(8)
            .and_then(|n| n.checked_add(b.offset))
            .filter(|&e| e <= trailer as u64)
            .ok_or_else(|| corrupted(at, format!("block `{}` runs past the end of the file", b.name)))?
            as usize;
        let raw = &bytes[at..end];
        if hex::encode(sha(raw)) != b.sha256 {
            return Err(corrupted(at, format!("block `{}` digest mismatch", b.name)));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push((b.name.clone(), data));
        expected_offset = end as u64;
    }
    if expected_offset != trailer as u64 {
        return Err(corrupted(expected_offset as usize, "unaccounted bytes before the trailer"));
    }
    if sha(&bytes[..trailer])[..] != bytes[trailer..] {
        return Err(corrupted(trailer, "file digest mismatch"));
    }
    let fw = assemble(manifest, blocks)?;
    if save_checkpoint(&fw)? != bytes {
        return Err(corrupted(HEADER, "checkpoint is not in canonical form"));
    }
    Ok(fw)
}

fn assemble(m: CkManifest, blocks: Vec<(String, Vec<f64>)>) -> Result<Framework> {
    let mut blocks = blocks.into_iter();
    let mut take = |name: &str| -> Result<Vec<f64>> {
        match blocks.next() {
            Some((n, d)) if n == name => Ok(d),
            Some((n, _)) => Err(DecodeError::invalid(format!("expected block `{name}`, found `{n}`"))),
            None => Err(DecodeError::invalid(format!("missing block `{name}`"))),
        }
    };
    let [enc_m, gen_m, dec_target, dec_trunk, flow_target, flow_trunk]: [Manifest; 6] = m
        .manifests
        .try_into()
        .map_err(|_| DecodeError::invalid("checkpoint must list six tensor manifests"))?;
    let encoder = Encoder::new(m.encoder, m.config.data.dims, ParamBundle::new(enc_m, take("encoder")?)?)?;
    let generalized = ParamBundle::new(gen_m, take("generalized")?)?;
    m.head.manifest().check_matches(&generalized.manifest)?;
    let a = take("anchors")?;
    let anchors = Anchors {
        points: a.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
    };
    m.head.manifest().check_matches(&dec_target)?;
    m.flow.manifest().check_matches(&flow_target)?;
    m.hyper.trunk_manifest(m.hyper.chunk_decoder).check_matches(&dec_trunk)?;
    m.hyper.trunk_manifest(m.hyper.chunk_flow).check_matches(&flow_trunk)?;
    let gen = |target: Manifest, trunk: Manifest, chunk: usize, t: Vec<f64>, bank: Vec<f64>| -> Result<TargetGenerator> {
        let g = TargetGenerator {
            target,
            chunk,
            d_b: m.hyper.d_b,
            trunk: ParamBundle::new(trunk, t)?,
            bank,
        };
        if g.bank.len() != g.n_chunks() * g.d_b {
            return Err(DecodeError::invalid("chunk bank size does not match its target"));
        }
        Ok(g)
    };
    let decoder = gen(dec_target, dec_trunk, m.hyper.chunk_decoder, take("hyper.decoder.trunk")?, take("hyper.decoder.bank")?)?;
    let flow = gen(flow_target, flow_trunk, m.hyper.chunk_flow, take("hyper.flow.trunk")?, take("hyper.flow.bank")?)?;
    let mut queries = Vec::with_capacity(m.queries.len());
    for q in &m.queries {
        queries.push(DomainQuery {
            id: q.id,
            q: take(&format!("query.{}", q.id))?,
            finalized: q.finalized,
        });
    }
    let mut stored = Vec::new();
    for q in m.queries.iter().filter(|q| q.stored) {
        stored.push(StoredTarget {
            query_id: q.id,
            decoder: take(&format!("stored.{}.decoder", q.id))?,
            flow: take(&format!("stored.{}.flow", q.id))?,
        });
    }
    let logs = m.logs.into_iter().map(|l| l.log).collect();
    Ok(Framework {
        config: m.config,
        encoder,
        generalized,
        anchors,
        hyper: HypernetState {
            spec: m.hyper,
            decoder,
            flow,
            queries,
            stored,
        },
        logs,
    })
}

/// Hex SHA-256 of checkpoint bytes.
pub fn checkpoint_digest(bytes: &[u8]) -> String {
    hex::encode(sha(bytes))
}

pub fn write_checkpoint(path: &Path, fw: &Framework) -> Result<()> {
    std::fs::write(path, save_checkpoint(fw)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Framework> {
    load_checkpoint(&std::fs::read(path)?)
}
