//! Tool orchestration for reaction feasibility prediction.

pub mod chem;
pub mod domain;
pub mod http;
pub mod llm;
pub mod tools;
pub mod util;
pub mod patterns;
pub mod memory;
pub mod eval;
pub mod pipeline;
pub mod synth;
