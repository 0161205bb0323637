//! wardendb: a replicated embedded database that tolerates storage
//! corruption at a minority of replicas.
//!
//! A cluster runs N identical replicas. Clients sign requests and append
//! them to a shared ordered log; every replica executes the same log with a
//! deterministic concurrent executor, so healthy replicas hold identical
//! state at every log position. Corruption is caught two ways: result
//! envelopes are voted on per transaction (passive), and Merkle forests over
//! every table are compared at explicit barriers (active). A corrupted
//! replica is repaired online by diffing its forest against a healthy
//! majority, copying only the damaged rows, and replaying the log tail,
//! while the rest of the cluster keeps serving.

pub mod clientagg;
pub mod codec;
pub mod crypto;
pub mod detexec;
pub mod harness;
pub mod hash;
pub mod logsvc;
pub mod merkle;
pub mod proc;
pub mod recovery;
pub mod replica;
pub mod store;

/// Replica identifiers are small and dense: 0..n.
pub type ReplicaId = u32;
