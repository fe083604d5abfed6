//! Contextual entity embeddings for multi-table relational databases.
//!
//! Every cell of a table row is an entity token living in the embedding space
//! of its column. Rows (and FK-PK joined row pairs) are fed to a transformer
//! encoder that carries no positional signal, trained with masked-entity
//! prediction and join (next-sentence) prediction.
//!
//! This crate is `no_std` + `alloc`: it holds the numerics, the models and
//! the data transformations. File formats, CSV/JSON IO and the command line
//! live in the `reltab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod rng;
pub mod schema;
pub mod task;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use schema::{ColumnId, DatabaseSchema};
pub use tensor::{Real, Tensor};
