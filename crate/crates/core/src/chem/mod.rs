//! SMILES tokenization, a token-shingle differential reaction fingerprint,
//! and exact Hamming top-K retrieval.

mod fingerprint;
mod index;
mod tokenizer;

pub use fingerprint::{
    fingerprint, reaction_shingles, shingle_hash, Fingerprint, FingerprintError, Fingerprinter, Shingle,
    DEFAULT_N_MAX, DEFAULT_WIDTH,
};
pub use index::{hamming_distance, load_fingerprints, top_k_similar, write_fingerprints, IndexError, SimilarityIndex};
pub use tokenizer::{tokenize_smiles, TokenKind, TokenStream, TokenizeError};
