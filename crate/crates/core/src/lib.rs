//! Two-stage recognizer for compositional glyph scripts.
//!
//! Stage one aligns rendered character images with their ideographic
//! description sequences (IDS) in a shared embedding space, producing a
//! canonical representation per character class. Stage two trains a
//! text-line recognizer whose decoder output is matched against those
//! frozen representations, so classes never seen in training can still
//! be recognized by appending their IDS embedding to the candidate set.

pub mod clip;
pub mod config;
pub mod ctr;
pub mod error;
pub mod eval;
pub mod glyph;
pub mod ids;
pub mod seed;
pub mod tensor;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
