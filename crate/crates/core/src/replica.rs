//! A replica: one full copy of the database, driven by the shared log.
//!
//! Worker threads claim log slots in order and execute them through the
//! deterministic executor, so any number of workers yields the state a
//! serial replay would. For every slot the replica emits a signed result
//! envelope carrying the result hash and the partition roots the slot
//! touched; honest replicas emit identical envelope bodies, which is what
//! the client-side voter checks.
//!
//! The replica also enforces admission: requests are only executed if the
//! client's registered key verifies the signature, the per-client sequence
//! number advances by exactly one, and the client holds a grant for the
//! procedure. Rejected requests still consume their log slot (every replica
//! rejects them identically) but write nothing.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::codec::{CodecError, Dec, Enc};
use crate::crypto::{Keypair, PublicKey};
use crate::detexec::{ExecConfig, Executor, TxResult, TxTask};
use crate::hash::Hash256;
use crate::logsvc::{LogBackend, LogEntry, Payload, SignedRequest};
use crate::merkle::{ForestConfig, NodeId, NodeHashSource, StateDigests};
use crate::proc::ProcRegistry;
use crate::store::tx::{TxCtx, TxFailure};
use crate::store::{CommitReceipt, Key, Row, Snapshot, Store, StoreError, TableSchema};
use crate::ReplicaId;

/// Registry of client credentials, one row per client id. Forested like
/// any user table so corrupted credentials are caught by state comparison.
pub const CLIENT_TABLE: &str = "~clients";

const FIELD_KEY: &str = "pk";
const FIELD_SEQ: &str = "seq";
const FIELD_KEY_VERSION: &str = "kv";
const FIELD_GRANTS: &str = "grants";

/// Barrier snapshots kept around for recovery to reference.
const SAVED_STATES_KEPT: usize = 16;

pub fn client_table_schema() -> TableSchema {
    TableSchema::new(CLIENT_TABLE, &[FIELD_KEY, FIELD_SEQ, FIELD_KEY_VERSION, FIELD_GRANTS])
        .expect("client registry schema")
}

/// Default forest shape for the client registry: small, clients are few.
pub fn client_table_forest() -> ForestConfig {
    ForestConfig { partitions: 1, fanout: 4, levels: 2 }
}

/// One client's registered credentials, as stored in its registry row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientRecord {
    pub key: PublicKey,
    pub seq: u64,
    pub key_version: u64,
    pub grants: BTreeSet<String>,
}

impl ClientRecord {
    fn from_row(row: &Row) -> Result<ClientRecord, String> {
        let get = |f: &str| row.get(f).ok_or_else(|| format!("missing field {f}"));
        let key = PublicKey::decode(get(FIELD_KEY)?).map_err(|e| e.to_string())?;
        let seq = u64_field(get(FIELD_SEQ)?)?;
        let key_version = u64_field(get(FIELD_KEY_VERSION)?)?;
        let mut d = Dec::new(get(FIELD_GRANTS)?);
        let grants: Vec<String> =
            d.list(|d| d.str()).map_err(|e| e.to_string())?;
        d.done().map_err(|e| e.to_string())?;
        Ok(ClientRecord { key, seq, key_version, grants: grants.into_iter().collect() })
    }

    fn write(&self, ctx: &mut TxCtx<'_>, client: &str) -> Result<(), StoreError> {
        let pk = self.key.encode();
        let seq = self.seq.to_le_bytes();
        let kv = self.key_version.to_le_bytes();
        let mut e = Enc::new();
        let grants: Vec<&String> = self.grants.iter().collect();
        e.list(&grants, |e, g| {
            e.str(g);
        });
        let grants = e.finish();
        ctx.put_system(
            CLIENT_TABLE,
            client.as_bytes(),
            &[
                (FIELD_KEY, pk.as_slice()),
                (FIELD_SEQ, &seq),
                (FIELD_KEY_VERSION, &kv),
                (FIELD_GRANTS, &grants),
            ],
        )
    }
}

fn u64_field(raw: &[u8]) -> Result<u64, String> {
    let bytes: [u8; 8] = raw.try_into().map_err(|_| "bad u64 field".to_string())?;
    Ok(u64::from_le_bytes(bytes))
}

/// How a slot ended. `Failed` is a deterministic business failure (the
/// procedure itself declined); `Rejected` means admission control refused
/// the request and nothing was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlotStatus {
    Ok,
    Failed,
    Rejected,
}

impl SlotStatus {
    pub fn tag(self) -> u8 {
        match self {
            SlotStatus::Ok => 0,
            SlotStatus::Failed => 1,
            SlotStatus::Rejected => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<SlotStatus, CodecError> {
        Ok(match tag {
            0 => SlotStatus::Ok,
            1 => SlotStatus::Failed,
            2 => SlotStatus::Rejected,
            _ => return Err(CodecError::Malformed("slot status tag")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SlotStatus::Ok => "ok",
            SlotStatus::Failed => "failed",
            SlotStatus::Rejected => "rejected",
        }
    }
}

/// Full slot outcome. The encoding is what result hashes commit to and what
/// the leader ships as the full result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotResult {
    Ok(Vec<u8>),
    Failed(String),
    Rejected(String),
}

impl SlotResult {
    pub fn status(&self) -> SlotStatus {
        match self {
            SlotResult::Ok(_) => SlotStatus::Ok,
            SlotResult::Failed(_) => SlotStatus::Failed,
            SlotResult::Rejected(_) => SlotStatus::Rejected,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new();
        match self {
            SlotResult::Ok(bytes) => e.u8(0).bytes(bytes),
            SlotResult::Failed(reason) => e.u8(1).str(reason),
            SlotResult::Rejected(reason) => e.u8(2).str(reason),
        };
        e.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<SlotResult, CodecError> {
        let mut d = Dec::new(buf);
        let out = match d.u8()? {
            0 => SlotResult::Ok(d.bytes()?.to_vec()),
            1 => SlotResult::Failed(d.str()?),
            2 => SlotResult::Rejected(d.str()?),
            _ => return Err(CodecError::Malformed("slot result tag")),
        };
        d.done()?;
        Ok(out)
    }

    pub fn result_hash(&self) -> Hash256 {
        Hash256::of(&self.encode())
    }
}

/// Per-slot vote, signed by the emitting replica. The signature covers
/// replica, index, status, result hash, and the touched partition roots;
/// the `replayed` flag is deliberately outside the signed region so an
/// envelope re-emitted during recovery replay carries the identical
/// signature bytes a healthy first run would have produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultEnvelope {
    pub replica: ReplicaId,
    pub index: u64,
    pub status: SlotStatus,
    pub result_hash: Hash256,
    /// `(table, partition, root)` for every partition root the slot
    /// changed; for barrier entries, the full root listing.
    pub roots: Vec<(String, u32, Hash256)>,
    /// True while the emitting replica is replaying already-voted slots
    /// after repair. Voters ignore these.
    pub replayed: bool,
    /// The encoded `SlotResult`, attached only by the designated leader.
    pub full_result: Option<Vec<u8>>,
    pub signature: Vec<u8>,
}

impl ResultEnvelope {
    pub fn signed_region(
        replica: ReplicaId,
        index: u64,
        status: SlotStatus,
        result_hash: Hash256,
        roots: &[(String, u32, Hash256)],
    ) -> Vec<u8> {
        let mut e = Enc::new();
        e.u32(replica).u64(index).u8(status.tag()).bytes(result_hash.as_bytes());
        e.list(roots, |e, (table, partition, root)| {
            e.str(table).u32(*partition).bytes(root.as_bytes());
        });
        e.finish()
    }

    pub fn region(&self) -> Vec<u8> {
        Self::signed_region(self.replica, self.index, self.status, self.result_hash, &self.roots)
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.region(), &self.signature)
    }
}

/// Barrier snapshot: state pinned at a compare/sync slot, plus its digests.
#[derive(Debug, Clone)]
pub struct SavedState {
    pub offset: u64,
    pub snapshot: Snapshot,
    pub digests: StateDigests,
}

pub type EnvelopeSink = Arc<dyn Fn(ResultEnvelope) + Send + Sync>;

pub struct ReplicaConfig {
    pub id: ReplicaId,
    /// Which replica ships full results (everyone else ships hashes).
    pub leader: ReplicaId,
    pub workers: usize,
    /// Read/write-set generations the executor keeps for conflict checks;
    /// `None` takes the executor default for the worker count.
    pub retained: Option<usize>,
    pub keypair: Arc<Keypair>,
    pub admin_key: PublicKey,
    /// Encoded slot results kept for fetch-on-demand.
    pub result_cache: usize,
}

impl ReplicaConfig {
    pub fn new(id: ReplicaId, keypair: Arc<Keypair>, admin_key: PublicKey) -> ReplicaConfig {
        ReplicaConfig {
            id,
            leader: 0,
            workers: 1,
            retained: None,
            keypair,
            admin_key,
            result_cache: 4096,
        }
    }
}

struct ReplState {
    /// Next log index no worker has claimed yet. Claims are dense: every
    /// index below it is committed or in flight.
    next_index: u64,
    inflight: usize,
    paused: bool,
    stop: bool,
    /// Slots at or below this were already voted on before a rewind;
    /// envelopes for them are flagged as replayed.
    replay_until: u64,
    /// Every slot at or below this is committed AND its envelope has left
    /// the sink; the frontier other components may rely on.
    emit_frontier: u64,
    /// Emitted slots above the dense frontier, waiting for the gap to fill.
    emitted: std::collections::BTreeSet<u64>,
    saved: std::collections::BTreeMap<u64, SavedState>,
    results: std::collections::BTreeMap<u64, Vec<u8>>,
}

enum Claim {
    Slot { index: u64, replayed: bool },
    WaitForLog { min_len: u64 },
    Stop,
}

pub struct Replica {
    cfg: ReplicaConfig,
    store: Arc<Store>,
    exec: Executor,
    procs: Arc<ProcRegistry>,
    log: Arc<dyn LogBackend>,
    sink: EnvelopeSink,
    state: Mutex<ReplState>,
    state_cv: Condvar,
}

impl Replica {
    pub fn new(
        cfg: ReplicaConfig,
        store: Arc<Store>,
        log: Arc<dyn LogBackend>,
        procs: Arc<ProcRegistry>,
        sink: EnvelopeSink,
    ) -> Arc<Replica> {
        let mut exec_cfg = ExecConfig::with_workers(cfg.workers);
        if let Some(k) = cfg.retained {
            exec_cfg.retained = k.max(cfg.workers);
        }
        let exec = Executor::new(Arc::clone(&store), exec_cfg);
        let next_index = store.last_committed() + 1;
        Arc::new(Replica {
            cfg,
            store,
            exec,
            procs,
            log,
            sink,
            state: Mutex::new(ReplState {
                next_index,
                inflight: 0,
                paused: false,
                stop: false,
                replay_until: 0,
                emit_frontier: next_index - 1,
                emitted: Default::default(),
                saved: Default::default(),
                results: Default::default(),
            }),
            state_cv: Condvar::new(),
        })
    }

    pub fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn executor(&self) -> &Executor {
        &self.exec
    }

    pub fn public_key(&self) -> &PublicKey {
        self.cfg.keypair.public()
    }

    /// Highest log index applied to the store.
    /// Highest slot that is committed with its envelope emitted. Commit
    /// order alone is not enough here: a caller that saw the frontier must
    /// be able to assume the votes below it have reached the sink.
    pub fn frontier(&self) -> u64 {
        self.state.lock().expect("replica state").emit_frontier
    }

    pub fn is_paused(&self) -> bool {
        self.state.lock().expect("replica state").paused
    }

    pub fn saved_state(&self, offset: u64) -> Option<SavedState> {
        self.state.lock().expect("replica state").saved.get(&offset).cloned()
    }

    pub fn full_result(&self, index: u64) -> Option<Vec<u8>> {
        self.state.lock().expect("replica state").results.get(&index).cloned()
    }

    /// Spawn the worker threads. Call once.
    pub fn start(self: &Arc<Self>) -> Vec<JoinHandle<()>> {
        (0..self.cfg.workers.max(1))
            .map(|w| {
                let me = Arc::clone(self);
                std::thread::Builder::new()
                    .name(format!("replica-{}-w{}", self.cfg.id, w))
                    .spawn(move || me.worker_loop())
                    .expect("spawn replica worker")
            })
            .collect()
    }

    pub fn stop(&self) {
        let mut st = self.state.lock().expect("replica state");
        st.stop = true;
        self.state_cv.notify_all();
    }

    /// Stop claiming new slots and wait until every claimed slot has
    /// committed. On return the store frontier is stable.
    pub fn pause(&self) {
        let mut st = self.state.lock().expect("replica state");
        st.paused = true;
        self.state_cv.notify_all();
        while st.inflight > 0 {
            st = self.state_cv.wait(st).expect("replica state");
        }
    }

    pub fn resume(&self) {
        let mut st = self.state.lock().expect("replica state");
        st.paused = false;
        self.state_cv.notify_all();
    }

    /// Discard all state above `mark` and aim the workers back at
    /// `mark + 1`. Only legal while paused; the replica stays paused.
    pub fn rewind_to(&self, mark: u64) -> Result<(), StoreError> {
        let mut st = self.state.lock().expect("replica state");
        assert!(st.paused && st.inflight == 0, "rewind requires a paused replica");
        self.store.truncate_above(mark)?;
        self.exec.reset_for_replay(mark);
        st.next_index = mark + 1;
        st.emit_frontier = st.emit_frontier.min(mark);
        let keep = st.emit_frontier;
        st.emitted.retain(|i| *i <= keep);
        st.saved.retain(|k, _| *k <= mark);
        st.results.retain(|k, _| *k <= mark);
        Ok(())
    }

    /// Mark slots up to `upto` as replays so voters can tell re-emitted
    /// envelopes from first-run votes.
    pub fn set_replay_until(&self, upto: u64) {
        let mut st = self.state.lock().expect("replica state");
        st.replay_until = st.replay_until.max(upto);
    }

    /// Wait until the emit frontier reaches `target`.
    pub fn wait_frontier(&self, target: u64, timeout: Duration) -> u64 {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().expect("replica state");
        loop {
            if st.emit_frontier >= target {
                return st.emit_frontier;
            }
            let now = Instant::now();
            if now >= deadline {
                return st.emit_frontier;
            }
            let (guard, _) = self
                .state_cv
                .wait_timeout(st, deadline - now)
                .expect("replica state");
            st = guard;
        }
    }

    fn worker_loop(self: Arc<Self>) {
        loop {
            let claim = {
                let mut st = self.state.lock().expect("replica state");
                loop {
                    if st.stop {
                        break Claim::Stop;
                    }
                    if st.paused {
                        st = self.state_cv.wait(st).expect("replica state");
                        continue;
                    }
                    if self.log.len() >= st.next_index {
                        let index = st.next_index;
                        st.next_index += 1;
                        st.inflight += 1;
                        break Claim::Slot { index, replayed: index <= st.replay_until };
                    }
                    break Claim::WaitForLog { min_len: st.next_index };
                }
            };
            match claim {
                Claim::Stop => return,
                Claim::WaitForLog { min_len } => {
                    self.log.wait_for(min_len, Duration::from_millis(5));
                }
                Claim::Slot { index, replayed } => {
                    let entry = self.log.entry(index).expect("claimed log entry exists");
                    let envelope = self.process_entry(&entry, replayed);
                    (self.sink)(envelope);
                    let mut st = self.state.lock().expect("replica state");
                    st.inflight -= 1;
                    st.emitted.insert(index);
                    loop {
                        let next = st.emit_frontier + 1;
                        if !st.emitted.remove(&next) {
                            break;
                        }
                        st.emit_frontier = next;
                    }
                    self.state_cv.notify_all();
                }
            }
        }
    }

    /// Execute one log slot to completion and build its signed envelope.
    fn process_entry(&self, entry: &LogEntry, replayed: bool) -> ResultEnvelope {
        let index = entry.index;
        let (slot, receipt) = match &entry.payload {
            Payload::Tx(req) => self.run_user_tx(index, req),
            control => self.run_control(index, control),
        };

        let roots = match &entry.payload {
            // Barriers vote on the whole state, not just what they touched.
            Payload::CompareStates { .. } | Payload::SaveSyncState { .. } => {
                self.full_root_listing(Snapshot::at(index))
            }
            _ => receipt.touched_roots.clone(),
        };

        let encoded = slot.encode();
        let status = slot.status();
        let result_hash = slot.result_hash();
        {
            let mut st = self.state.lock().expect("replica state");
            st.results.insert(index, encoded.clone());
            while st.results.len() > self.cfg.result_cache.max(1) {
                st.results.pop_first();
            }
        }

        let region =
            ResultEnvelope::signed_region(self.cfg.id, index, status, result_hash, &roots);
        let signature = self.cfg.keypair.sign(&region);
        ResultEnvelope {
            replica: self.cfg.id,
            index,
            status,
            result_hash,
            roots,
            replayed,
            full_result: (self.cfg.id == self.cfg.leader).then_some(encoded),
            signature,
        }
    }

    fn full_root_listing(&self, snap: Snapshot) -> Vec<(String, u32, Hash256)> {
        let mut out = Vec::new();
        let digests = self.store.digests(snap).expect("digest own state");
        for (table, td) in &digests.tables {
            for (partition, root) in td.roots.iter().enumerate() {
                out.push((table.clone(), partition as u32, *root));
            }
        }
        out
    }

    fn run_user_tx(&self, index: u64, req: &SignedRequest) -> (SlotResult, CommitReceipt) {
        let out: Mutex<Option<SlotResult>> = Mutex::new(None);
        let task = UserTxTask { replica: self, req, out: &out };
        let outcome = self.exec.run(index, &task).expect("slot commit");
        let slot = out.into_inner().expect("task ran").expect("task recorded outcome");
        (slot, outcome.receipt)
    }

    fn run_control(&self, index: u64, payload: &Payload) -> (SlotResult, CommitReceipt) {
        let sig = match payload {
            Payload::CompareStates { admin_sig }
            | Payload::SaveSyncState { admin_sig, .. }
            | Payload::KeyUpdate { admin_sig, .. } => admin_sig,
            Payload::Tx(_) => unreachable!("user entries take the tx path"),
        };
        let region = payload.admin_region().expect("control entries have an admin region");
        if !self.cfg.admin_key.verify(&region, sig) {
            // Commit the slot as a no-op; every honest replica rejects it
            // the same way.
            let outcome = self
                .exec
                .run(index, &FnTaskNoop)
                .expect("slot commit");
            return (SlotResult::Rejected("bad-admin-signature".into()), outcome.receipt);
        }

        match payload {
            Payload::KeyUpdate { client, public_key, key_version, grants, .. } => {
                let out: Mutex<Option<SlotResult>> = Mutex::new(None);
                let task = KeyUpdateTask {
                    client,
                    public_key,
                    key_version: *key_version,
                    grants,
                    out: &out,
                };
                let outcome = self.exec.run(index, &task).expect("slot commit");
                let slot = out.into_inner().expect("task ran").expect("task recorded outcome");
                (slot, outcome.receipt)
            }
            Payload::CompareStates { .. } => {
                let outcome = self.exec.run(index, &FnTaskNoop).expect("slot commit");
                let saved = self.save_barrier_state(index);
                (SlotResult::Ok(saved.digests.encode()), outcome.receipt)
            }
            Payload::SaveSyncState { references, .. } => {
                let outcome = self.exec.run(index, &FnTaskNoop).expect("slot commit");
                self.save_barrier_state(index);
                if !references.contains(&self.cfg.id) {
                    // Not a reference copy: hold position here and wait for
                    // repair. Workers already past this slot are harmless,
                    // recovery rewinds to the barrier anyway.
                    let mut st = self.state.lock().expect("replica state");
                    st.paused = true;
                    self.state_cv.notify_all();
                }
                (SlotResult::Ok(b"sync-state-saved".to_vec()), outcome.receipt)
            }
            Payload::Tx(_) => unreachable!(),
        }
    }

    fn save_barrier_state(&self, index: u64) -> SavedState {
        let snapshot = Snapshot::at(index);
        let digests = self.store.digests(snapshot).expect("digest own state");
        let saved = SavedState { offset: index, snapshot, digests };
        let mut st = self.state.lock().expect("replica state");
        st.saved.insert(index, saved.clone());
        while st.saved.len() > SAVED_STATES_KEPT {
            st.saved.pop_first();
        }
        saved
    }

    /// Admission control and procedure dispatch for one client request.
    /// Check order is part of the replicated behavior: unknown client,
    /// signature, sequence, grant, procedure existence.
    fn user_tx_body(&self, ctx: &mut TxCtx<'_>, req: &SignedRequest) -> SlotResult {
        let body = |ctx: &mut TxCtx<'_>| -> Result<SlotResult, TxFailure> {
            let Some(client_row) = ctx.get(CLIENT_TABLE, req.client.as_bytes())? else {
                return Ok(SlotResult::Rejected("unknown-client".into()));
            };
            let record = match ClientRecord::from_row(&client_row) {
                Ok(r) => r,
                Err(e) => return Ok(SlotResult::Failed(format!("client record corrupt: {e}"))),
            };
            if !record.key.verify(&req.region(), &req.signature) {
                return Ok(SlotResult::Rejected("bad-signature".into()));
            }
            if req.seq != record.seq + 1 {
                let reason = if req.seq <= record.seq {
                    format!("replay: seq {} already used", req.seq)
                } else {
                    format!("sequence-gap: expected {}, got {}", record.seq + 1, req.seq)
                };
                return Ok(SlotResult::Rejected(reason));
            }
            if !record.grants.contains(&req.proc) {
                return Ok(SlotResult::Rejected("unauthorized".into()));
            }
            let Some(proc) = self.procs.get(&req.proc) else {
                return Ok(SlotResult::Rejected("unknown-procedure".into()));
            };

            // Admitted. The sequence bump must survive even if the body
            // fails, so it goes in before the rollback mark: a failed
            // request cannot be replayed any more than a successful one.
            let bumped = ClientRecord { seq: req.seq, ..record };
            bumped.write(ctx, &req.client)?;
            let mark = ctx.write_mark();
            let ran = proc.execute(ctx, &req.args).and_then(|out| {
                ctx.validate_constraints()?;
                Ok(out)
            });
            Ok(match ran {
                Ok(bytes) => SlotResult::Ok(bytes),
                Err(f) => {
                    ctx.rollback_writes(mark);
                    SlotResult::Failed(f.reason)
                }
            })
        };
        match body(ctx) {
            Ok(slot) => slot,
            Err(f) => SlotResult::Failed(f.reason),
        }
    }
}

struct UserTxTask<'a> {
    replica: &'a Replica,
    req: &'a SignedRequest,
    out: &'a Mutex<Option<SlotResult>>,
}

impl TxTask for UserTxTask<'_> {
    fn execute(&self, ctx: &mut TxCtx<'_>) -> TxResult {
        let slot = self.replica.user_tx_body(ctx, self.req);
        let result = match &slot {
            SlotResult::Ok(bytes) => TxResult::Ok(bytes.clone()),
            SlotResult::Failed(r) | SlotResult::Rejected(r) => TxResult::Failed(r.clone()),
        };
        *self.out.lock().expect("slot outcome") = Some(slot);
        result
    }
}

struct KeyUpdateTask<'a> {
    client: &'a str,
    public_key: &'a [u8],
    key_version: u64,
    grants: &'a [String],
    out: &'a Mutex<Option<SlotResult>>,
}

impl TxTask for KeyUpdateTask<'_> {
    fn execute(&self, ctx: &mut TxCtx<'_>) -> TxResult {
        let slot = self.run(ctx);
        let result = match &slot {
            SlotResult::Ok(bytes) => TxResult::Ok(bytes.clone()),
            SlotResult::Failed(r) | SlotResult::Rejected(r) => TxResult::Failed(r.clone()),
        };
        *self.out.lock().expect("slot outcome") = Some(slot);
        result
    }
}

impl KeyUpdateTask<'_> {
    fn run(&self, ctx: &mut TxCtx<'_>) -> SlotResult {
        let body = |ctx: &mut TxCtx<'_>| -> Result<SlotResult, TxFailure> {
            let existing = ctx.get(CLIENT_TABLE, self.client.as_bytes())?;
            let (expected_version, seq) = match &existing {
                Some(row) => match ClientRecord::from_row(row) {
                    Ok(r) => (r.key_version + 1, r.seq),
                    Err(e) => {
                        return Ok(SlotResult::Failed(format!("client record corrupt: {e}")))
                    }
                },
                None => (1, 0),
            };
            // A stale version means someone replayed an old registration;
            // accepting it would re-install a retired (possibly leaked) key.
            if self.key_version != expected_version {
                return Ok(SlotResult::Rejected(format!(
                    "stale-key-version: expected {expected_version}, got {}",
                    self.key_version
                )));
            }
            let Ok(key) = PublicKey::decode(self.public_key) else {
                return Ok(SlotResult::Rejected("malformed-key".into()));
            };
            let record = ClientRecord {
                key,
                seq,
                key_version: self.key_version,
                grants: self.grants.iter().cloned().collect(),
            };
            record.write(ctx, self.client)?;
            Ok(SlotResult::Ok(b"key-updated".to_vec()))
        };
        match body(ctx) {
            Ok(slot) => slot,
            Err(f) => SlotResult::Failed(f.reason),
        }
    }
}

struct FnTaskNoop;

impl TxTask for FnTaskNoop {
    fn execute(&self, _ctx: &mut TxCtx<'_>) -> TxResult {
        TxResult::Ok(Vec::new())
    }
}

/// Read-only view of one replica's state pinned at a barrier, as the
/// repair path consumes it. Counts fetches so transfer cost is observable.
pub struct StatePeer {
    replica: Arc<Replica>,
    snapshot: Snapshot,
    fetches: AtomicU64,
}

impl StatePeer {
    pub fn new(replica: Arc<Replica>, mark: u64) -> StatePeer {
        StatePeer { replica, snapshot: Snapshot::at(mark), fetches: AtomicU64::new(0) }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot
    }

    pub fn fetches(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    pub fn node_hash(&self, table: &str, id: NodeId) -> Result<Hash256, StoreError> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        self.replica.store.node_hash(self.snapshot, table, id)
    }

    pub fn rows_for_leaf(&self, table: &str, leaf: NodeId) -> Result<Vec<Key>, StoreError> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        self.replica.store.rows_for_leaf(self.snapshot, table, leaf)
    }

    pub fn fetch_row(&self, table: &str, key: &[u8]) -> Result<Option<Row>, StoreError> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        self.replica.store.get(self.snapshot, table, key)
    }

    pub fn scan_all(&self, table: &str) -> Result<Vec<Row>, StoreError> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        self.replica.store.scan(self.snapshot, table, &[], None)
    }

    pub fn digests(&self) -> Result<StateDigests, StoreError> {
        self.replica.store.digests(self.snapshot)
    }

    pub fn node_source<'a>(&'a self, table: &str) -> PeerNodeSource<'a> {
        PeerNodeSource { peer: self, table: table.to_string() }
    }
}

pub struct PeerNodeSource<'a> {
    peer: &'a StatePeer,
    table: String,
}

impl NodeHashSource for PeerNodeSource<'_> {
    fn node_hash(&mut self, id: NodeId) -> Result<Hash256, StoreError> {
        self.peer.node_hash(&self.table, id)
    }
}
