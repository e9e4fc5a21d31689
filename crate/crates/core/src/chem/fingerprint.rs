use std::collections::BTreeSet;
use std::fmt;

use super::tokenizer::{tokenize_smiles, TokenizeError};
use crate::domain::Reaction;

pub const DEFAULT_WIDTH: usize = 2048;
pub const DEFAULT_N_MAX: usize = 3;

/// Seed folded into every shingle hash. Changing it changes every fingerprint.
const SHINGLE_SEED: u64 = 0x41524d4f525f4650; // "ARMOR_FP"

/// A token n-gram tagged with its order `n`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Shingle {
    pub n: usize,
    pub text: String,
}

impl Shingle {
    pub fn new(n: usize, text: impl Into<String>) -> Self {
        Self { n, text: text.into() }
    }
}

impl fmt::Display for Shingle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FingerprintError {
    #[error("reactants: {0}")]
    Reactants(TokenizeError),
    #[error("product: {0}")]
    Product(TokenizeError),
    #[error("fingerprint width must be positive")]
    ZeroWidth,
    #[error("invalid hex fingerprint: {0}")]
    BadHex(String),
}

fn ngrams(tokens: &[String], n_max: usize) -> BTreeSet<Shingle> {
    let mut out = BTreeSet::new();
    for n in 1..=n_max {
        for window in tokens.windows(n) {
            out.insert(Shingle::new(n, window.concat()));
        }
    }
    out
}

/// Symmetric difference of the n-gram shingle sets (orders `1..=n_max`) of
/// the reactant and product token streams.
pub fn reaction_shingles(r: &Reaction, n_max: usize) -> Result<BTreeSet<Shingle>, FingerprintError> {
    let left = tokenize_smiles(&r.reactants).map_err(FingerprintError::Reactants)?;
    let right = tokenize_smiles(&r.product).map_err(FingerprintError::Product)?;
    let a = ngrams(left.tokens(), n_max);
    let b = ngrams(right.tokens(), n_max);
    Ok(a.symmetric_difference(&b).cloned().collect())
}

/// FNV-1a over `"{n}:{text}"` starting from the standard offset basis XOR
/// [`SHINGLE_SEED`], finished with the splitmix64 avalanche step.
pub fn shingle_hash(shingle: &Shingle) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET ^ SHINGLE_SEED;
    for b in shingle.to_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Fixed-width bit vector. Bits past `width` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    width: usize,
}

impl Fingerprint {
    pub fn zeros(width: usize) -> Self {
        Self { words: vec![0; width.div_ceil(64)], width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn set(&mut self, bit: usize) {
        assert!(bit < self.width, "bit {bit} out of range for width {}", self.width);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        bit < self.width && self.words[bit / 64] & (1 << (bit % 64)) != 0
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Builds from a `0`/`1` string where character `i` is bit `i`.
    pub fn from_bit_str(bits: &str) -> Option<Self> {
        let mut fp = Fingerprint::zeros(bits.len());
        for (i, c) in bits.chars().enumerate() {
            match c {
                '1' => fp.set(i),
                '0' => {}
                _ => return None,
            }
        }
        Some(fp)
    }

    /// Hex form: character `j` encodes bits `4j..4j+4`, bit `4j` most significant.
    /// Width must be a multiple of 4.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.width / 4);
        for j in 0..self.width.div_ceil(4) {
            let mut nibble = 0u32;
            for k in 0..4 {
                nibble = (nibble << 1) | self.get(4 * j + k) as u32;
            }
            out.push(char::from_digit(nibble, 16).unwrap());
        }
        out
    }

    pub fn from_hex(hex: &str) -> Result<Self, FingerprintError> {
        if hex.is_empty() {
            return Err(FingerprintError::ZeroWidth);
        }
        let mut fp = Fingerprint::zeros(hex.len() * 4);
        for (j, c) in hex.chars().enumerate() {
            let nibble = c.to_digit(16).ok_or_else(|| FingerprintError::BadHex(hex.chars().take(16).collect()))?;
            for k in 0..4 {
                if nibble & (1 << (3 - k)) != 0 {
                    fp.set(4 * j + k);
                }
            }
        }
        Ok(fp)
    }
}

/// Hashes each differential shingle into bit `hash mod width`.
pub fn fingerprint(r: &Reaction, width: usize, n_max: usize) -> Result<Fingerprint, FingerprintError> {
    if width == 0 {
        return Err(FingerprintError::ZeroWidth);
    }
    let mut fp = Fingerprint::zeros(width);
    for shingle in reaction_shingles(r, n_max)? {
        fp.set((shingle_hash(&shingle) % width as u64) as usize);
    }
    Ok(fp)
}

/// Fingerprint settings bundled for callers that fingerprint many reactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Fingerprinter {
    pub width: usize,
    pub n_max: usize,
}

impl Default for Fingerprinter {
    fn default() -> Self {
        Self { width: DEFAULT_WIDTH, n_max: DEFAULT_N_MAX }
    }
}

impl Fingerprinter {
    pub fn fingerprint(&self, r: &Reaction) -> Result<Fingerprint, FingerprintError> {
        fingerprint(r, self.width, self.n_max)
    }
}
