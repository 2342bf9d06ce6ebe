//! Transformers with hand-set weights that recognize and generate
//! bounded-depth Dyck languages, plus the tools to check them.

pub mod corpus;
pub mod dyck;
pub mod encoding;
pub mod error;
pub mod gates;
pub mod generator;
pub mod precision;
pub mod recognizer;
pub mod tensor;

pub use dyck::{legal_next_tokens, oracle_recognize, OracleVerdict, Token};
pub use error::{Error, Result};
pub use tensor::{Network, NumericConfig};
