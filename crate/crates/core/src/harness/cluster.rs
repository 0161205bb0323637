//! In-process cluster assembly and fault injection.
//!
//! A cluster is N replicas sharing one ordered log, a vote aggregator fed
//! by every replica's envelope sink, client agents registered through
//! admin-signed key updates, and a supervisor for detection and repair.
//! Fault injectors touch exactly one replica's store and nothing else, so
//! any cross-replica symptom a scenario observes was carried there by the
//! protocol, not by the harness.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::clientagg::{Aggregator, ClientAgent, VoteMode};
use crate::crypto::Keypair;
use crate::hash::Hash256;
use crate::logsvc::{InProcessLog, LogBackend, Payload};
use crate::merkle::NodeId;
use crate::proc::{ProcRegistry, Procedure};
use crate::recovery::{RecoveryOptions, Supervisor};
use crate::replica::{
    client_table_forest, client_table_schema, EnvelopeSink, Replica, ReplicaConfig,
};
use crate::store::tx::{TxCtx, TxFailure};
use crate::store::{Row, Snapshot, Store};
use crate::ReplicaId;

use super::scenario::ScenarioConfig;
use super::workload::{workload_schema, WorkloadOp};
use super::HarnessError;

/// Procedure whose writes depend on replica-local state. Registered on
/// every replica under the same name but salted with the replica id, it
/// models a transaction that consults an uncoordinated random source.
struct NondetWriteProc {
    salt: ReplicaId,
    table: String,
}

impl Procedure for NondetWriteProc {
    fn name(&self) -> &str {
        "nondet-write"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let key = args.first().cloned().unwrap_or_else(|| b"chaos".to_vec());
        let value = Hash256::of(&self.salt.to_le_bytes()).to_hex();
        ctx.put(&self.table, &key, &[("f0", value.as_bytes()), ("f1", b"local")])?;
        Ok(b"ok".to_vec())
    }
}

pub struct Cluster {
    pub config: ScenarioConfig,
    pub log: Arc<InProcessLog>,
    pub replicas: BTreeMap<ReplicaId, Arc<Replica>>,
    pub aggregator: Arc<Aggregator>,
    pub supervisor: Supervisor,
    pub admin: Arc<Keypair>,
    agents: Vec<ClientAgent>,
    handles: Vec<JoinHandle<()>>,
    fault_rng: Mutex<ChaCha8Rng>,
    chaos_keys: AtomicU64,
}

impl Cluster {
    pub fn build(cfg: &ScenarioConfig) -> Cluster {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc175_7e12);
        let admin = Arc::new(Keypair::generate(cfg.scheme, &mut rng));

        let mut keypairs = Vec::new();
        let mut replica_keys = BTreeMap::new();
        for id in 0..cfg.replicas {
            let kp = Arc::new(Keypair::generate(cfg.scheme, &mut rng));
            replica_keys.insert(id as ReplicaId, kp.public().clone());
            keypairs.push(kp);
        }
        let mode = if cfg.vote_on_roots { VoteMode::ResultAndRoots } else { VoteMode::ResultOnly };
        let aggregator = Arc::new(Aggregator::new(replica_keys, 0, mode));
        let sink: EnvelopeSink = {
            let agg = Arc::clone(&aggregator);
            Arc::new(move |env| agg.ingest(&env))
        };

        let log = Arc::new(InProcessLog::new());
        let forest = cfg.merkle.then_some(cfg.forest);
        let mut replicas = BTreeMap::new();
        let mut handles = Vec::new();
        for (id, keypair) in keypairs.into_iter().enumerate() {
            let id = id as ReplicaId;
            let store = Arc::new(Store::new());
            store
                .create_table(workload_schema(&cfg.table), forest)
                .expect("fresh store accepts the workload table");
            store
                .create_system_table(client_table_schema(), Some(client_table_forest()))
                .expect("fresh store accepts the client table");
            let mut registry = ProcRegistry::with_builtins();
            registry.register(Arc::new(NondetWriteProc { salt: id, table: cfg.table.clone() }));

            let mut rcfg = ReplicaConfig::new(id, keypair, admin.public().clone());
            rcfg.workers = cfg.workers;
            rcfg.retained = cfg.retained;
            let replica = Replica::new(
                rcfg,
                store,
                Arc::clone(&log) as Arc<dyn LogBackend>,
                Arc::new(registry),
                Arc::clone(&sink),
            );
            handles.extend(replica.start());
            replicas.insert(id, replica);
        }

        // Register client identities. Every client gets the read side plus
        // writes; the chaos procedure stays with client 0.
        let mut agents = Vec::new();
        for c in 0..cfg.clients {
            let name = format!("c{c}");
            let key = Arc::new(Keypair::generate(cfg.scheme, &mut rng));
            let mut grants: Vec<String> =
                ["read", "scan", "insert", "update", "rmw", "delete"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
            if c == 0 {
                grants.push("nondet-write".into());
            }
            log.append(signed_key_update(&admin, &name, &key, 1, grants));
            agents.push(ClientAgent::new(name, key, Arc::clone(&log) as Arc<dyn LogBackend>));
        }

        let supervisor = Supervisor::new(
            Arc::clone(&log) as Arc<dyn LogBackend>,
            Arc::clone(&admin),
            replicas.clone(),
            RecoveryOptions::default(),
        );

        Cluster {
            config: cfg.clone(),
            log,
            replicas,
            aggregator,
            supervisor,
            admin,
            agents,
            handles,
            fault_rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfa_17)),
            chaos_keys: AtomicU64::new(0),
        }
    }

    pub fn agent(&self, client: u32) -> &ClientAgent {
        &self.agents[client as usize]
    }

    pub fn submit(&self, op: &WorkloadOp) -> u64 {
        self.agent(op.client).submit(op.proc, op.args.clone())
    }

    /// Wait until every unpaused replica has executed the whole log.
    /// Timing out is an invariant violation: a live replica stopped making
    /// progress.
    pub fn wait_all(&self, timeout: Duration) -> Result<u64, HarnessError> {
        let target = self.log.len();
        for (id, r) in &self.replicas {
            if r.is_paused() {
                continue;
            }
            let reached = r.wait_frontier(target, timeout);
            if reached < target {
                return Err(HarnessError::Invariant(format!(
                    "replica {id} stuck at {reached}, log at {target}"
                )));
            }
        }
        Ok(target)
    }

    /// Corrupt `rows` committed rows on one replica, spread uniformly over
    /// `leaves` distinct Merkle leaves of `table`. Returns the damaged keys.
    /// With `stealth` the forest is left stale, hiding the damage from
    /// digest comparison until a transaction reads an affected row.
    pub fn inject_corruption(
        &self,
        replica: ReplicaId,
        table: &str,
        rows: u64,
        leaves: u64,
        stealth: bool,
    ) -> Result<Vec<Vec<u8>>, HarnessError> {
        let victim = self
            .replicas
            .get(&replica)
            .ok_or_else(|| HarnessError::Invariant(format!("no replica {replica}")))?;
        let store = victim.store();
        // Tampering excludes commits so no row is caught mid-version.
        let was_paused = victim.is_paused();
        victim.pause();
        let mut rng = self.fault_rng.lock().expect("fault rng lock");
        let result = corrupt_rows(store, table, rows, leaves, stealth, &mut rng);
        drop(rng);
        if !was_paused {
            victim.resume();
        }
        result
    }

    /// Submit a transaction whose writes differ on every replica. Returns
    /// its log index.
    pub fn inject_nondet(&self) -> u64 {
        let n = self.chaos_keys.fetch_add(1, Ordering::Relaxed);
        let key = format!("chaos{n:04}").into_bytes();
        self.agents[0].submit("nondet-write", vec![key])
    }

    /// Combined state digest of one replica at a fixed log offset.
    pub fn digest_at(&self, id: ReplicaId, offset: u64) -> Result<Hash256, HarnessError> {
        let store = self.replicas[&id].store();
        Ok(store.digests(Snapshot::at(offset))?.combined())
    }

    pub fn shutdown(mut self) {
        for r in self.replicas.values() {
            r.stop();
            r.resume();
        }
        for h in self.handles.drain(..) {
            h.join().expect("replica worker exits cleanly");
        }
    }
}

/// Overwrite `rows` committed rows of `table`, spread round-robin over
/// `leaves` distinct populated Merkle leaves, choosing uniformly with `rng`.
/// With `stealth` the forest keeps its stale hashes. The caller is
/// responsible for excluding concurrent commits.
pub fn corrupt_rows(
    store: &Store,
    table: &str,
    rows: u64,
    leaves: u64,
    stealth: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u8>>, HarnessError> {
    let config = store
        .forest_config(table)?
        .ok_or_else(|| HarnessError::Invariant(format!("{table} has no forest")))?;
    if leaves == 0 || rows < leaves {
        return Err(HarnessError::Invariant(format!(
            "cannot spread {rows} rows over {leaves} leaves"
        )));
    }
    let snap = store.take_snapshot();
    let schema = store.schema(table)?;

    // Draw distinct leaves that actually hold rows.
    let total = config.total_leaves();
    let mut chosen: Vec<(NodeId, Vec<Vec<u8>>)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut attempts = 0;
    while (chosen.len() as u64) < leaves {
        attempts += 1;
        if attempts > total.max(leaves * 50) {
            return Err(HarnessError::Invariant(format!(
                "could not find {leaves} populated leaves in {table}"
            )));
        }
        let global = rng.gen_range(0..total);
        if !seen.insert(global) {
            continue;
        }
        let leaf = config.leaf_at(global);
        let mut keys = store.rows_for_leaf(snap, table, leaf)?;
        if keys.is_empty() {
            continue;
        }
        keys.shuffle(rng);
        chosen.push((leaf, keys));
    }

    // Round-robin across the chosen leaves for an even spread.
    let mut picked: Vec<Vec<u8>> = Vec::with_capacity(rows as usize);
    let mut cursors = vec![0usize; chosen.len()];
    while (picked.len() as u64) < rows {
        let mut advanced = false;
        for (i, (_, keys)) in chosen.iter().enumerate() {
            if (picked.len() as u64) == rows {
                break;
            }
            if cursors[i] < keys.len() {
                picked.push(keys[cursors[i]].clone());
                cursors[i] += 1;
                advanced = true;
            }
        }
        if !advanced {
            return Err(HarnessError::Invariant(format!(
                "{} leaves hold fewer than {rows} rows",
                chosen.len()
            )));
        }
    }

    for (i, key) in picked.iter().enumerate() {
        let current = store
            .get(snap, table, key)?
            .ok_or_else(|| HarnessError::Invariant("picked key vanished".into()))?;
        let mut fields: Vec<(String, Vec<u8>)> =
            current.fields().iter().map(|(f, v)| (f.clone(), v.clone())).collect();
        fields[0].1 = format!("corrupt-{i:05}").into_bytes();
        let borrowed: Vec<(&str, &[u8])> =
            fields.iter().map(|(f, v)| (f.as_str(), v.as_slice())).collect();
        let row = Row::normalized(&schema, key, &borrowed)?;
        store.tamper_row(table, key, Some(row), !stealth)?;
    }
    Ok(picked)
}

/// Admin-signed client registration payload.
pub fn signed_key_update(
    admin: &Keypair,
    client: &str,
    key: &Keypair,
    key_version: u64,
    grants: Vec<String>,
) -> Payload {
    let mut p = Payload::KeyUpdate {
        client: client.to_string(),
        public_key: key.public().encode(),
        key_version,
        grants,
        admin_sig: Vec::new(),
    };
    let sig = admin.sign(&p.admin_region().expect("key updates have an admin region"));
    if let Payload::KeyUpdate { admin_sig, .. } = &mut p {
        *admin_sig = sig;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Scheme;
    use crate::harness::scenario::ScenarioConfig;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            replicas: 3,
            workers: 2,
            scheme: Scheme::Null,
            rows: 60,
            transactions: 0,
            clients: 2,
            forest: crate::merkle::ForestConfig { partitions: 2, fanout: 2, levels: 2 },
            ..ScenarioConfig::default()
        }
    }

    fn seeded(cfg: &ScenarioConfig) -> Cluster {
        let cluster = Cluster::build(cfg);
        let gen = crate::harness::workload::WorkloadGen::new(cfg);
        for op in gen.seed_ops() {
            cluster.submit(&op);
        }
        cluster.wait_all(Duration::from_secs(30)).unwrap();
        cluster
    }

    #[test]
    fn builds_and_converges() {
        let cluster = seeded(&small_cfg());
        let offset = cluster.log.len();
        let d0 = cluster.digest_at(0, offset).unwrap();
        for id in 1..3 {
            assert_eq!(cluster.digest_at(id, offset).unwrap(), d0);
        }
        cluster.shutdown();
    }

    #[test]
    fn corruption_stays_on_the_target() {
        let cluster = seeded(&small_cfg());
        let keys = cluster.inject_corruption(1, "kv", 8, 4, false).unwrap();
        assert_eq!(keys.len(), 8);
        let offset = cluster.log.len();
        let healthy = cluster.digest_at(0, offset).unwrap();
        assert_eq!(cluster.digest_at(2, offset).unwrap(), healthy);
        assert_ne!(cluster.digest_at(1, offset).unwrap(), healthy);

        // The corrupted rows really changed, and only on replica 1.
        let snap = Snapshot::at(offset);
        for key in &keys {
            let tampered = cluster.replicas[&1].store().get(snap, "kv", key).unwrap().unwrap();
            let clean = cluster.replicas[&0].store().get(snap, "kv", key).unwrap().unwrap();
            assert_ne!(tampered.canonical_bytes(), clean.canonical_bytes());
        }
        cluster.shutdown();
    }

    #[test]
    fn corruption_spreads_over_the_requested_leaves() {
        let cluster = seeded(&small_cfg());
        let keys = cluster.inject_corruption(1, "kv", 12, 4, false).unwrap();
        let config = cluster.replicas[&1].store().forest_config("kv").unwrap().unwrap();
        let mut per_leaf = BTreeMap::new();
        for key in &keys {
            *per_leaf.entry(config.leaf_for_key(key)).or_insert(0u64) += 1;
        }
        assert_eq!(per_leaf.len(), 4);
        assert!(per_leaf.values().all(|&c| c == 3), "expected an even 3 per leaf: {per_leaf:?}");
        cluster.shutdown();
    }

    #[test]
    fn stealth_corruption_leaves_digests_untouched() {
        let cluster = seeded(&small_cfg());
        let offset = cluster.log.len();
        let before = cluster.digest_at(1, offset).unwrap();
        cluster.inject_corruption(1, "kv", 4, 2, true).unwrap();
        assert_eq!(cluster.digest_at(1, offset).unwrap(), before);
        cluster.shutdown();
    }

    #[test]
    fn nondet_tx_splits_replica_states() {
        let cluster = seeded(&small_cfg());
        let index = cluster.inject_nondet();
        cluster.wait_all(Duration::from_secs(30)).unwrap();
        let mut digests = std::collections::BTreeSet::new();
        for id in 0..3 {
            digests.insert(cluster.digest_at(id, index).unwrap().to_hex());
        }
        assert_eq!(digests.len(), 3, "each replica wrote its own value");
        cluster.shutdown();
    }
}
