use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fingerprint::{Fingerprint, FingerprintError};
use crate::domain::Idx;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("fingerprint width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("duplicate idx {0} in similarity index")]
    DuplicateIdx(Idx),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed fingerprint line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
}

/// Population count of `a XOR b`.
pub fn hamming_distance(a: &Fingerprint, b: &Fingerprint) -> Result<u32, IndexError> {
    if a.width() != b.width() {
        return Err(IndexError::WidthMismatch { expected: a.width(), got: b.width() });
    }
    Ok(a.words().iter().zip(b.words()).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Exact linear-scan index over equal-width fingerprints.
#[derive(Debug, Clone, Default)]
pub struct SimilarityIndex {
    entries: Vec<(Idx, Fingerprint)>,
    positions: HashMap<Idx, usize>,
    width: usize,
}

impl SimilarityIndex {
    pub fn new(width: usize) -> Self {
        Self { entries: Vec::new(), positions: HashMap::new(), width }
    }

    pub fn build(width: usize, entries: impl IntoIterator<Item = (Idx, Fingerprint)>) -> Result<Self, IndexError> {
        let mut index = Self::new(width);
        for (idx, fp) in entries {
            index.insert(idx, fp)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, idx: Idx, fp: Fingerprint) -> Result<(), IndexError> {
        if fp.width() != self.width {
            return Err(IndexError::WidthMismatch { expected: self.width, got: fp.width() });
        }
        if self.positions.contains_key(&idx) {
            return Err(IndexError::DuplicateIdx(idx));
        }
        self.positions.insert(idx, self.entries.len());
        self.entries.push((idx, fp));
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Idx, Fingerprint)] {
        &self.entries
    }

    pub fn get(&self, idx: Idx) -> Option<&Fingerprint> {
        self.positions.get(&idx).map(|&p| &self.entries[p].1)
    }
}

/// The `k` nearest entries by Hamming distance, ascending, ties by ascending idx.
pub fn top_k_similar(index: &SimilarityIndex, query: &Fingerprint, k: usize) -> Result<Vec<(Idx, u32)>, IndexError> {
    if query.width() != index.width {
        return Err(IndexError::WidthMismatch { expected: index.width, got: query.width() });
    }
    let mut scored: Vec<(u32, Idx)> = index
        .entries
        .iter()
        .map(|(idx, fp)| hamming_distance(query, fp).map(|d| (d, *idx)))
        .collect::<Result<_, _>>()?;
    if k < scored.len() {
        if k == 0 {
            return Ok(Vec::new());
        }
        scored.select_nth_unstable(k - 1);
        scored.truncate(k);
    }
    scored.sort_unstable();
    Ok(scored.into_iter().map(|(d, idx)| (idx, d)).collect())
}

#[derive(Serialize, Deserialize)]
struct FingerprintLine {
    idx: Idx,
    bits: String,
}

/// Reads precomputed fingerprints: JSONL of `{idx, bits}` with `bits` hex of length width/4.
pub fn load_fingerprints(path: &Path) -> Result<SimilarityIndex, IndexError> {
    let text = fs::read_to_string(path).map_err(|source| IndexError::Io { path: path.display().to_string(), source })?;
    let mut index: Option<SimilarityIndex> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: FingerprintLine = serde_json::from_str(line)
            .map_err(|e| IndexError::MalformedLine { line: i + 1, reason: e.to_string() })?;
        let fp = Fingerprint::from_hex(&row.bits)?;
        index.get_or_insert_with(|| SimilarityIndex::new(fp.width())).insert(row.idx, fp)?;
    }
    Ok(index.unwrap_or_default())
}

pub fn write_fingerprints(index: &SimilarityIndex) -> String {
    let mut out = String::new();
    for (idx, fp) in &index.entries {
        out.push_str(&serde_json::to_string(&FingerprintLine { idx: *idx, bits: fp.to_hex() }).unwrap());
        out.push('\n');
    }
    out
}
