//! Versioned binary checkpoints: a fixed header (magic, version, dtype,
//! spec hash, member count, coordinate dimension) followed by raw
//! little-endian coordinate vectors with their provenance seeds. The
//! format is bit-exact, so reloading reproduces member outputs exactly
//! and coupling runs can resume from recorded state.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::ensemble::MemberProvenance;
use crate::error::{Error, Result};
use crate::training::DType;

const MAGIC: &[u8; 4] = b"EQFW";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub dtype: DType,
    pub spec_hash: [u8; 32],
    pub p: usize,
    pub members: Vec<(MemberProvenance, Vec<f64>)>,
    /// Raw bit patterns per member for exact f32 round-trips.
    pub raw_f32: Option<Vec<Vec<f32>>>,
}

pub fn save_f32(path: &Path, spec_hash: [u8; 32], members: &[(MemberProvenance, Vec<f32>)]) -> Result<()> {
    save_impl(path, DType::F32, spec_hash, members.len(), members.first().map(|m| m.1.len()).unwrap_or(0), |out| {
        for (prov, coords) in members {
            out.extend_from_slice(&prov.seed.to_le_bytes());
            out.extend_from_slice(&prov.member.to_le_bytes());
            for c in coords {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    })
}

pub fn save_f64(path: &Path, spec_hash: [u8; 32], members: &[(MemberProvenance, Vec<f64>)]) -> Result<()> {
    save_impl(path, DType::F64, spec_hash, members.len(), members.first().map(|m| m.1.len()).unwrap_or(0), |out| {
        for (prov, coords) in members {
            out.extend_from_slice(&prov.seed.to_le_bytes());
            out.extend_from_slice(&prov.member.to_le_bytes());
            for c in coords {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    })
}

fn save_impl(
    path: &Path,
    dtype: DType,
    spec_hash: [u8; 32],
    count: usize,
    p: usize,
    fill: impl FnOnce(&mut Vec<u8>),
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&spec_hash);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(p as u64).to_le_bytes());
    fill(&mut out);
    File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path, expected_hash: Option<[u8; 32]>) -> Result<CheckpointData> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 56 || &raw[0..4] != MAGIC {
        return Err(Error::Checkpoint("not an equiflow checkpoint".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = match raw[8] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    };
    let mut spec_hash = [0u8; 32];
    spec_hash.copy_from_slice(&raw[12..44]);
    if let Some(expected) = expected_hash {
        if expected != spec_hash {
            return Err(Error::Checkpoint(
                "spec hash mismatch between config and checkpoint".into(),
            ));
        }
    }
    let count = u32::from_le_bytes(raw[44..48].try_into().unwrap()) as usize;
    let p = u64::from_le_bytes(raw[48..56].try_into().unwrap()) as usize;
    let scalar = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let per_member = 16 + p * scalar;
    if raw.len() != 56 + count * per_member {
        return Err(Error::Checkpoint(format!(
            "file has {} bytes, header implies {}",
            raw.len(),
            56 + count * per_member
        )));
    }
    let mut members = Vec::with_capacity(count);
    let mut raw_f32 = if matches!(dtype, DType::F32) {
        Some(Vec::with_capacity(count))
    } else {
        None
    };
    for m in 0..count {
        let base = 56 + m * per_member;
        let seed = u64::from_le_bytes(raw[base..base + 8].try_into().unwrap());
        let member = u64::from_le_bytes(raw[base + 8..base + 16].try_into().unwrap());
        let prov = MemberProvenance { seed, member };
        let mut coords = Vec::with_capacity(p);
        match dtype {
            DType::F32 => {
                let mut bits = Vec::with_capacity(p);
                for i in 0..p {
                    let off = base + 16 + i * 4;
                    let v = f32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
                    bits.push(v);
                    coords.push(v as f64);
                }
                raw_f32.as_mut().unwrap().push(bits);
            }
            DType::F64 => {
                for i in 0..p {
                    let off = base + 16 + i * 8;
                    coords.push(f64::from_le_bytes(raw[off..off + 8].try_into().unwrap()));
                }
            }
        }
        members.push((prov, coords));
    }
    Ok(CheckpointData {
        dtype,
        spec_hash,
        p,
        members,
        raw_f32,
    })
}
