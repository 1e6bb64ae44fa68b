//! Binary score-matrix files. Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "FBSM"
//! 4       4   u32     version (1)
//! 8       4   u32     plane count P (1 = shadow scores, 2 = base + unlearned)
//! 12      4   u32     rows R (shadow models or shadow pairs)
//! 16      4   u32     columns Q (queries)
//! 20      4·P·R·Q     f32 score planes, each row-major R × Q
//! …       R·Q         u8 mask plane (1 = IN / FORGOTTEN, 0 = OUT / NEVER)
//! …       L           UTF-8 JSON footer
//! end-12  8   u64     footer length L
//! end-4   4           trailer "FBSE"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MatrixProvenance, PairedScoreMatrix, ScoreMatrix};
use crate::error::{BenchError, Result};
use crate::store::write_atomic;

pub const SCORE_FILE_MAGIC: [u8; 4] = *b"FBSM";
pub const SCORE_FILE_TRAILER: [u8; 4] = *b"FBSE";
pub const SCORE_FILE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Serialize, Deserialize)]
struct Footer {
    queries: Vec<u32>,
    query_classes: Vec<u32>,
    provenance: MatrixProvenance,
}

struct Raw {
    rows: usize,
    planes: Vec<Vec<f32>>,
    mask: Vec<bool>,
    footer: Footer,
}

fn encode(raw: &Raw) -> Vec<u8> {
    let cols = raw.footer.queries.len();
    let footer = serde_json::to_vec(&raw.footer).expect("footer serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + raw.planes.len() * raw.rows * cols * 4 + raw.mask.len() + footer.len() + 12);
    out.extend_from_slice(&SCORE_FILE_MAGIC);
    for v in [SCORE_FILE_VERSION, raw.planes.len() as u32, raw.rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for plane in &raw.planes {
        for v in plane {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(raw.mask.iter().map(|&m| m as u8));
    out.extend_from_slice(&footer);
    out.extend_from_slice(&(footer.len() as u64).to_le_bytes());
    out.extend_from_slice(&SCORE_FILE_TRAILER);
    out
}

fn decode(bytes: &[u8], path: &Path, expect_planes: u32) -> Result<Raw> {
    let bad = |reason: String| BenchError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN + 12 || bytes[..4] != SCORE_FILE_MAGIC {
        return Err(bad("missing FBSM header".into()));
    }
    if bytes[bytes.len() - 4..] != SCORE_FILE_TRAILER {
        return Err(bad("missing FBSE trailer".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != SCORE_FILE_VERSION {
        return Err(bad(format!("unsupported version {}", u32_at(4))));
    }
    let planes = u32_at(8);
    if planes != expect_planes {
        return Err(bad(format!("expected {expect_planes} planes, found {planes}")));
    }
    let (rows, cols) = (u32_at(12) as usize, u32_at(16) as usize);
    let cells = rows * cols;
    let footer_len = u64::from_le_bytes(bytes[bytes.len() - 12..bytes.len() - 4].try_into().expect("8 bytes")) as usize;
    let body = HEADER_LEN + planes as usize * cells * 4 + cells;
    if body + footer_len + 12 != bytes.len() {
        return Err(bad(format!("length {} does not match {rows}x{cols} with footer {footer_len}", bytes.len())));
    }
    let mut planes_out = Vec::with_capacity(planes as usize);
    for p in 0..planes as usize {
        let start = HEADER_LEN + p * cells * 4;
        planes_out.push(
            bytes[start..start + cells * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    let mask_start = HEADER_LEN + planes as usize * cells * 4;
    let mask = bytes[mask_start..mask_start + cells]
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(bad(format!("mask byte {other}"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    let footer: Footer =
        serde_json::from_slice(&bytes[body..body + footer_len]).map_err(|e| bad(format!("footer: {e}")))?;
    if footer.queries.len() != cols {
        return Err(bad(format!("footer lists {} queries for {cols} columns", footer.queries.len())));
    }
    Ok(Raw {
        rows,
        planes: planes_out,
        mask,
        footer,
    })
}

fn read(path: &Path, planes: u32) -> Result<Raw> {
    let bytes = std::fs::read(path).map_err(|e| BenchError::io(path, e))?;
    decode(&bytes, path, planes)
}

impl ScoreMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&Raw {
            rows: self.shadows,
            planes: vec![self.scores.clone()],
            mask: self.member.clone(),
            footer: Footer {
                queries: self.queries.clone(),
                query_classes: self.query_classes.clone(),
                provenance: self.provenance.clone(),
            },
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_raw(decode(bytes, Path::new("<memory>"), 1)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(read(path, 1)?)
    }

    fn from_raw(mut raw: Raw) -> Result<Self> {
        let m = ScoreMatrix {
            shadows: raw.rows,
            queries: raw.footer.queries,
            query_classes: raw.footer.query_classes,
            scores: raw.planes.remove(0),
            member: raw.mask,
            provenance: raw.footer.provenance,
        };
        m.validate()?;
        Ok(m)
    }
}

impl PairedScoreMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&Raw {
            rows: self.pairs,
            planes: vec![self.base.clone(), self.unlearned.clone()],
            mask: self.forgotten.clone(),
            footer: Footer {
                queries: self.queries.clone(),
                query_classes: self.query_classes.clone(),
                provenance: self.provenance.clone(),
            },
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_raw(decode(bytes, Path::new("<memory>"), 2)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(read(path, 2)?)
    }

    fn from_raw(mut raw: Raw) -> Result<Self> {
        let unlearned = raw.planes.pop().expect("two planes");
        let base = raw.planes.pop().expect("two planes");
        let m = PairedScoreMatrix {
            pairs: raw.rows,
            queries: raw.footer.queries,
            query_classes: raw.footer.query_classes,
            base,
            unlearned,
            forgotten: raw.mask,
            provenance: raw.footer.provenance,
        };
        m.validate()?;
        Ok(m)
    }
}
