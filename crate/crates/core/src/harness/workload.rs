//! Deterministic workload generation.
//!
//! Everything downstream of a seed is reproducible: the same scenario file
//! produces the same operation stream, and because clients sign with
//! deterministic schemes, the same log bytes. Key popularity follows either
//! a uniform or a zipfian distribution; zipf ranks are scrambled so hot keys
//! are spread across the key space instead of clustering in one Merkle leaf.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;

use crate::store::TableSchema;

use super::scenario::{KeyDistribution, ScenarioConfig};

/// One transaction to submit: which client identity sends it and the
/// procedure call it carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadOp {
    pub client: u32,
    pub proc: &'static str,
    pub args: Vec<Vec<u8>>,
}

pub fn workload_schema(table: &str) -> TableSchema {
    TableSchema::new(table, &["f0", "f1"]).expect("workload schema is well formed")
}

pub fn row_key(index: u64) -> Vec<u8> {
    format!("user{index:08}").into_bytes()
}

fn scramble(x: u64) -> u64 {
    // splitmix64 finalizer; spreads adjacent zipf ranks across the space.
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct WorkloadGen {
    rng: ChaCha8Rng,
    seed: u64,
    rows: u64,
    clients: u32,
    table: String,
    distribution: KeyDistribution,
    zipf: Option<Zipf<f64>>,
    mix: [(u32, Kind); 6],
    scan_len: u32,
    next_insert: u64,
    op_index: u64,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Read,
    Update,
    Rmw,
    Scan,
    Insert,
    Delete,
}

impl WorkloadGen {
    pub fn new(cfg: &ScenarioConfig) -> WorkloadGen {
        let zipf = match cfg.distribution {
            KeyDistribution::Zipfian => {
                Some(Zipf::new(cfg.rows, cfg.zipf_exponent).expect("valid zipf parameters"))
            }
            KeyDistribution::Uniform => None,
        };
        // Cumulative mix thresholds; a draw in 0..100 picks the first bucket
        // whose bound exceeds it.
        let m = &cfg.mix;
        let mut acc = 0;
        let mut bound = |share: u32, kind: Kind| {
            acc += share;
            (acc, kind)
        };
        let mix = [
            bound(m.read, Kind::Read),
            bound(m.update, Kind::Update),
            bound(m.rmw, Kind::Rmw),
            bound(m.scan, Kind::Scan),
            bound(m.insert, Kind::Insert),
            bound(m.delete, Kind::Delete),
        ];
        WorkloadGen {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            seed: cfg.seed,
            rows: cfg.rows,
            clients: cfg.clients,
            table: cfg.table.clone(),
            distribution: cfg.distribution,
            zipf,
            mix,
            scan_len: cfg.scan_len,
            next_insert: cfg.rows,
            op_index: 0,
        }
    }

    /// Inserts that load the initial rows, keyed `user00000000..`. Driven by
    /// a separate rng stream so seeding does not perturb the op stream.
    pub fn seed_ops(&self) -> Vec<WorkloadOp> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        (0..self.rows)
            .map(|i| {
                let key = row_key(i);
                WorkloadOp {
                    client: self.owner(i),
                    proc: "insert",
                    args: vec![
                        self.table.clone().into_bytes(),
                        key,
                        value_bytes(&mut rng),
                        value_bytes(&mut rng),
                    ],
                }
            })
            .collect()
    }

    /// The client that owns a key index. Initial rows are range partitioned
    /// across clients; inserted overflow keys rotate.
    fn owner(&self, index: u64) -> u32 {
        if index < self.rows {
            (index * self.clients as u64 / self.rows) as u32
        } else {
            (index % self.clients as u64) as u32
        }
    }

    fn sample_index(&mut self) -> u64 {
        match self.distribution {
            KeyDistribution::Uniform => self.rng.gen_range(0..self.rows),
            KeyDistribution::Zipfian => {
                let rank = self.zipf.as_ref().expect("zipf set").sample(&mut self.rng) as u64;
                scramble(rank - 1) % self.rows
            }
        }
    }

    pub fn next_op(&mut self) -> WorkloadOp {
        let draw = self.rng.gen_range(0..100u32);
        let kind = self
            .mix
            .iter()
            .find(|(bound, _)| draw < *bound)
            .map(|(_, kind)| *kind)
            .expect("mix sums to 100");
        let table = self.table.clone().into_bytes();
        self.op_index += 1;
        let reader = (self.op_index % self.clients as u64) as u32;
        match kind {
            Kind::Read => {
                let key = row_key(self.sample_index());
                WorkloadOp { client: reader, proc: "read", args: vec![table, key] }
            }
            Kind::Scan => {
                let start = row_key(self.sample_index());
                let count = self.scan_len.to_string().into_bytes();
                WorkloadOp { client: reader, proc: "scan", args: vec![table, start, count] }
            }
            Kind::Update => {
                let idx = self.sample_index();
                let value = value_bytes(&mut self.rng);
                WorkloadOp {
                    client: self.owner(idx),
                    proc: "update",
                    args: vec![table, row_key(idx), b"f0".to_vec(), value],
                }
            }
            Kind::Rmw => {
                let idx = self.sample_index();
                let value = value_bytes(&mut self.rng);
                WorkloadOp {
                    client: self.owner(idx),
                    proc: "rmw",
                    args: vec![table, row_key(idx), b"f1".to_vec(), value],
                }
            }
            Kind::Insert => {
                let idx = self.next_insert;
                self.next_insert += 1;
                let (a, b) = (value_bytes(&mut self.rng), value_bytes(&mut self.rng));
                WorkloadOp {
                    client: self.owner(idx),
                    proc: "insert",
                    args: vec![table, row_key(idx), a, b],
                }
            }
            Kind::Delete => {
                let idx = self.sample_index();
                WorkloadOp { client: self.owner(idx), proc: "delete", args: vec![table, row_key(idx)] }
            }
        }
    }
}

fn value_bytes(rng: &mut ChaCha8Rng) -> Vec<u8> {
    format!("w{:016x}", rng.gen::<u64>()).into_bytes()
}
