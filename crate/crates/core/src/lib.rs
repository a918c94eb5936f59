//! Anonymous topic-based publish/subscribe over non-colluding servers.
//!
//! Publishers write one row per round into a database that is secret-shared
//! across the servers with distributed point functions; subscribers fetch
//! whole topic blocks by XOR-based private information retrieval through a
//! rotating proxy. Every client sends the same amount of traffic every round.

pub mod analysis;
pub mod audit;
pub mod client;
pub mod dpf;
pub mod envelope;
pub mod error;
pub mod model;
pub mod netlab;
pub mod pir;
pub mod server;
pub mod stats;

pub use error::{Error, Result};
