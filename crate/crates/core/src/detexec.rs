//! Deterministic concurrent execution of an ordered transaction stream.
//!
//! Transactions arrive with dense ids (their log positions). Any number of
//! workers execute them speculatively against snapshots, but commits happen
//! strictly in id order, and before committing, a transaction validates its
//! read/write set against every transaction that committed after its
//! snapshot. Any overlap (read-write, scanned-range-write, or write-write)
//! sends it back to re-execute on a fresh snapshot.
//!
//! The discipline buys replica determinism: whatever the interleaving, the
//! transaction that finally commits at slot k saw a state equivalent to
//! "all of 1..k-1 applied, none of k.." for every key it touched, so its
//! writes and its result bytes are a pure function of the log prefix.
//! Wall-clock scheduling can change how often a transaction retries, never
//! what it commits.
//!
//! Recent read/write sets are retained in two fixed-size generation tables
//! (ids 1..cap in one, cap+1..2cap in the other, alternating; a table is
//! cleared when the next generation reaches it). A validator only ever
//! needs transactions newer than its snapshot, and no more than
//! `worker-count` transactions are in flight, so sizing the tables at
//! max(worker-count, 64) keeps every needed set resident.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::codec::Enc;
use crate::hash::Hash256;
use crate::store::tx::{RwSet, TxCtx};
use crate::store::{CommitReceipt, Snapshot, Store, StoreError, TxId};

/// Tuning for one executor instance.
#[derive(Debug, Clone)]
pub struct ExecConfig {
    /// Concurrent workers the caller will run. Capped in flight, so also
    /// the retention requirement.
    pub workers: usize,
    /// Capacity of each rw-set generation table.
    pub retained: usize,
    /// How long a waiter sleeps before re-checking commit progress; a
    /// backstop against missed wakeups, not a correctness knob.
    pub wait_timeout: Duration,
}

impl ExecConfig {
    pub fn with_workers(workers: usize) -> ExecConfig {
        ExecConfig {
            workers: workers.max(1),
            retained: workers.max(64),
            wait_timeout: Duration::from_millis(1),
        }
    }
}

/// Outcome of a transaction body. `Failed` marks a deterministic failure:
/// the slot is still consumed and the result reported; what the failure
/// rolls back is decided by the task itself before returning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxResult {
    Ok(Vec<u8>),
    Failed(String),
}

impl TxResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new();
        match self {
            TxResult::Ok(bytes) => e.u8(0).bytes(bytes),
            TxResult::Failed(reason) => e.u8(1).str(reason),
        };
        e.finish()
    }

    pub fn result_hash(&self) -> Hash256 {
        Hash256::of(&self.encode())
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, TxResult::Ok(_))
    }
}

/// A transaction body: reads and writes through the context, returns the
/// result bytes. Must be deterministic in the snapshot state; it may run
/// several times.
pub trait TxTask: Sync {
    fn execute(&self, ctx: &mut TxCtx<'_>) -> TxResult;
}

/// Adapter for closures, mostly for tests and internal plumbing.
pub struct FnTask<F>(pub F);

impl<F> TxTask for FnTask<F>
where
    F: Fn(&mut TxCtx<'_>) -> TxResult + Sync,
{
    fn execute(&self, ctx: &mut TxCtx<'_>) -> TxResult {
        (self.0)(ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxOutcome {
    pub result: TxResult,
    pub receipt: CommitReceipt,
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecMetrics {
    pub commits: u64,
    pub reexecutions: u64,
}

impl ExecMetrics {
    pub fn mean_retries(&self) -> f64 {
        self.reexecutions as f64 / self.commits.max(1) as f64
    }
}

/// Two-generation retention of committed read/write sets.
struct SetTables {
    capacity: u64,
    tables: [GenTable; 2],
}

struct GenTable {
    generation: Option<u64>,
    sets: HashMap<TxId, Arc<RwSet>>,
}

impl SetTables {
    fn new(capacity: usize) -> SetTables {
        SetTables {
            capacity: capacity as u64,
            tables: [
                GenTable { generation: None, sets: HashMap::new() },
                GenTable { generation: None, sets: HashMap::new() },
            ],
        }
    }

    /// Ids are 1-based; generation g covers ids g*cap+1 ..= (g+1)*cap and
    /// lands in table g mod 2.
    fn slot(&self, id: TxId) -> (usize, u64) {
        let generation = (id - 1) / self.capacity;
        ((generation % 2) as usize, generation)
    }

    fn insert(&mut self, id: TxId, rw: Arc<RwSet>) {
        let (idx, generation) = self.slot(id);
        let table = &mut self.tables[idx];
        if table.generation != Some(generation) {
            table.sets.clear();
            table.generation = Some(generation);
        }
        table.sets.insert(id, rw);
    }

    fn get(&self, id: TxId) -> Option<Arc<RwSet>> {
        let (idx, generation) = self.slot(id);
        let table = &self.tables[idx];
        if table.generation == Some(generation) {
            table.sets.get(&id).cloned()
        } else {
            None
        }
    }
}

pub struct Executor {
    store: Arc<Store>,
    config: ExecConfig,
    sets: Mutex<SetTables>,
    progress: Mutex<TxId>,
    progress_cv: Condvar,
    commits: AtomicU64,
    reexecutions: AtomicU64,
}

impl Executor {
    pub fn new(store: Arc<Store>, config: ExecConfig) -> Executor {
        assert!(config.workers >= 1, "need at least one worker");
        assert!(
            config.workers <= config.retained,
            "retention tables must cover every in-flight transaction"
        );
        let progress = store.last_committed();
        let retained = config.retained.max(1);
        Executor {
            store,
            config,
            sets: Mutex::new(SetTables::new(retained)),
            progress: Mutex::new(progress),
            progress_cv: Condvar::new(),
            commits: AtomicU64::new(0),
            reexecutions: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &ExecConfig {
        &self.config
    }

    pub fn last_committed(&self) -> TxId {
        *self.progress.lock().expect("progress lock")
    }

    pub fn metrics(&self) -> ExecMetrics {
        ExecMetrics {
            commits: self.commits.load(Ordering::Relaxed),
            reexecutions: self.reexecutions.load(Ordering::Relaxed),
        }
    }

    /// Block until some transaction newer than `current` commits. May
    /// return `current` on timeout; callers loop.
    pub fn wait_for_commit_progress(&self, current: TxId) -> TxId {
        let guard = self.progress.lock().expect("progress lock");
        if *guard > current {
            return *guard;
        }
        let (guard, _) = self
            .progress_cv
            .wait_timeout(guard, self.config.wait_timeout)
            .expect("progress wait");
        *guard
    }

    /// Execute and commit the transaction for slot `id`, re-executing on
    /// conflict until it validates. Callers must feed dense ids and may do
    /// so from any number of threads; commits leave here in id order.
    pub fn run(&self, id: TxId, task: &dyn TxTask) -> Result<TxOutcome, StoreError> {
        let mut retries = 0u32;
        loop {
            let snapshot = self.store.take_snapshot();
            debug_assert!(snapshot.visible_through < id, "slot {id} already committed");
            // Ids at or below the snapshot were validated implicitly by
            // reading them; re-validation never needs to revisit them.
            let check_from = snapshot.visible_through + 1;

            let mut ctx = TxCtx::new(&self.store, snapshot);
            let result = task.execute(&mut ctx);
            let (rw, writes) = ctx.finish();

            if self.validate(id, snapshot, check_from, &rw) {
                let receipt = self.store.commit_writes(id, &writes)?;
                // Publish the rw-set before announcing progress so later
                // validators can always find it.
                self.sets.lock().expect("sets lock").insert(id, Arc::new(rw));
                {
                    // Monotonic: a thread parked here since an earlier
                    // commit must not drag progress back down.
                    let mut progress = self.progress.lock().expect("progress lock");
                    if id > *progress {
                        *progress = id;
                    }
                    self.progress_cv.notify_all();
                }
                self.commits.fetch_add(1, Ordering::Relaxed);
                return Ok(TxOutcome { result, receipt, retries });
            }
            retries += 1;
            self.reexecutions.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Wait for every predecessor and check overlaps. True = clean.
    fn validate(&self, id: TxId, snapshot: Snapshot, check_from: TxId, rw: &RwSet) -> bool {
        let mut oldest = snapshot.visible_through;
        while oldest != id - 1 {
            let latest = self.wait_for_commit_progress(oldest);
            if latest == oldest {
                continue;
            }
            if self.window_conflicts(rw, oldest, latest, check_from) {
                return false;
            }
            oldest = latest;
        }
        true
    }

    /// Conflicts between `rw` and committed transactions in (from, to],
    /// skipping ids below `check_from`.
    fn window_conflicts(&self, rw: &RwSet, from: TxId, to: TxId, check_from: TxId) -> bool {
        let sets = self.sets.lock().expect("sets lock");
        for id in (from + 1)..=to {
            if id < check_from {
                continue;
            }
            let their = sets
                .get(id)
                .unwrap_or_else(|| panic!("rw-set {id} evicted while still needed"));
            if rw.conflicts_with(&their) {
                return true;
            }
        }
        false
    }

    /// Reset after the store was rewound to `tx`: forget retained sets and
    /// counters so replay can feed ids from `tx + 1` again.
    pub fn reset_for_replay(&self, tx: TxId) {
        debug_assert_eq!(self.store.last_committed(), tx, "store must be rewound first");
        let mut sets = self.sets.lock().expect("sets lock");
        *sets = SetTables::new(self.config.retained.max(1));
        drop(sets);
        let mut progress = self.progress.lock().expect("progress lock");
        *progress = tx;
        self.progress_cv.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::TableSchema;
    use std::sync::atomic::AtomicU64;

    fn executor(workers: usize) -> Arc<Executor> {
        let store = Arc::new(Store::new());
        store.create_table(TableSchema::new("t", &["n"]).unwrap(), None).unwrap();
        Arc::new(Executor::new(store, ExecConfig::with_workers(workers)))
    }

    /// Pump ids 1..=count through `workers` threads, each pulling the next
    /// free id; mirrors how a replica feeds its executor.
    fn pump(exec: &Arc<Executor>, count: u64, workers: usize, task: &(impl TxTask + Send)) {
        let next = AtomicU64::new(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let id = next.fetch_add(1, Ordering::Relaxed);
                    if id > count {
                        return;
                    }
                    exec.run(id, task).unwrap();
                });
            }
        });
    }

    fn counter_value(exec: &Executor) -> u64 {
        let snap = exec.store().take_snapshot();
        exec.store()
            .get(snap, "t", b"counter")
            .unwrap()
            .map(|r| {
                u64::from_le_bytes(r.get("n").unwrap().try_into().unwrap())
            })
            .unwrap_or(0)
    }

    #[test]
    fn read_modify_write_storm_loses_nothing() {
        for workers in [1usize, 4] {
            let exec = executor(workers);
            let task = FnTask(|ctx: &mut TxCtx| {
                let current = ctx
                    .get("t", b"counter")
                    .unwrap()
                    .map(|r| u64::from_le_bytes(r.get("n").unwrap().try_into().unwrap()))
                    .unwrap_or(0);
                ctx.put("t", b"counter", &[("n", (current + 1).to_le_bytes().as_slice())])
                    .unwrap();
                TxResult::Ok(current.to_le_bytes().to_vec())
            });
            pump(&exec, 200, workers, &task);
            assert_eq!(counter_value(&exec), 200, "workers={workers}");
            assert_eq!(exec.metrics().commits, 200);
            assert_eq!(exec.last_committed(), 200);
        }
    }

    #[test]
    fn results_equal_slot_order_regardless_of_interleaving() {
        // The read-modify-write result reveals the state each transaction
        // saw; determinism demands result(k) == k-1 under any schedule.
        let exec = executor(8);
        let results = Mutex::new(vec![None; 101]);
        let task = FnTask(|ctx: &mut TxCtx| {
            let current = ctx
                .get("t", b"counter")
                .unwrap()
                .map(|r| u64::from_le_bytes(r.get("n").unwrap().try_into().unwrap()))
                .unwrap_or(0);
            ctx.put("t", b"counter", &[("n", (current + 1).to_le_bytes().as_slice())])
                .unwrap();
            TxResult::Ok(current.to_le_bytes().to_vec())
        });

        let next = AtomicU64::new(1);
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| loop {
                    let id = next.fetch_add(1, Ordering::Relaxed);
                    if id > 100 {
                        return;
                    }
                    let outcome = exec.run(id, &task).unwrap();
                    let TxResult::Ok(bytes) = outcome.result else { panic!() };
                    results.lock().unwrap()[id as usize] =
                        Some(u64::from_le_bytes(bytes.try_into().unwrap()));
                });
            }
        });

        for id in 1..=100u64 {
            assert_eq!(results.lock().unwrap()[id as usize], Some(id - 1));
        }
    }

    #[test]
    fn blind_write_storm_stays_live() {
        // Pure write-write conflicts on one hot key: every transaction must
        // still commit (the oldest in-flight id can always make progress).
        let exec = executor(4);
        struct HotWriter;
        impl TxTask for HotWriter {
            fn execute(&self, ctx: &mut TxCtx<'_>) -> TxResult {
                ctx.put("t", b"hot", &[("n", b"x")]).unwrap();
                TxResult::Ok(Vec::new())
            }
        }
        pump(&exec, 50, 4, &HotWriter);
        assert_eq!(exec.metrics().commits, 50);
        assert_eq!(exec.store().last_committed(), 50);
    }

    #[test]
    fn scan_plus_insert_keeps_count_consistent() {
        // Each transaction counts rows with a scan and inserts a fresh key;
        // phantom misses would make the counts skip.
        let exec = executor(4);
        struct ScanInsert(AtomicU64);
        impl TxTask for ScanInsert {
            fn execute(&self, ctx: &mut TxCtx<'_>) -> TxResult {
                let seen = ctx.scan("t", b"row-", Some(b"row-~")).unwrap().len() as u64;
                let unique = self.0.fetch_add(1, Ordering::Relaxed);
                ctx.put(
                    "t",
                    format!("row-{unique:06}").as_bytes(),
                    &[("n", seen.to_le_bytes().as_slice())],
                )
                .unwrap();
                TxResult::Ok(seen.to_le_bytes().to_vec())
            }
        }
        let task = ScanInsert(AtomicU64::new(0));
        pump(&exec, 120, 4, &task);

        // Committed in slot order, each transaction must have seen exactly
        // slot-1 rows.
        let snap = exec.store().take_snapshot();
        let mut counts: Vec<u64> = exec
            .store()
            .scan(snap, "t", b"row-", Some(b"row-~"))
            .unwrap()
            .iter()
            .map(|r| u64::from_le_bytes(r.get("n").unwrap().try_into().unwrap()))
            .collect();
        counts.sort_unstable();
        let expected: Vec<u64> = (0..120).collect();
        assert_eq!(counts, expected);
    }

    #[test]
    fn first_slot_commits_without_waiting() {
        let exec = executor(1);
        let task = FnTask(|_ctx: &mut TxCtx| TxResult::Ok(b"done".to_vec()));
        let outcome = exec.run(1, &task).unwrap();
        assert_eq!(outcome.retries, 0);
        assert_eq!(outcome.result, TxResult::Ok(b"done".to_vec()));
    }

    #[test]
    fn wait_for_commit_progress_unblocks_on_commit() {
        let exec = executor(2);
        let waiter = {
            let exec = Arc::clone(&exec);
            std::thread::spawn(move || {
                let mut current = 0;
                while current < 1 {
                    current = exec.wait_for_commit_progress(current);
                }
                current
            })
        };
        std::thread::sleep(Duration::from_millis(5));
        exec.run(1, &FnTask(|_: &mut TxCtx| TxResult::Ok(Vec::new()))).unwrap();
        assert_eq!(waiter.join().unwrap(), 1);
    }

    #[test]
    fn generation_tables_cover_exactly_two_generations() {
        let mut tables = SetTables::new(3);
        let rw = Arc::new(RwSet::default());
        for id in 1..=6 {
            tables.insert(id, Arc::clone(&rw));
        }
        assert!(tables.get(1).is_some(), "generation 0 resident");
        assert!(tables.get(6).is_some(), "generation 1 resident");
        tables.insert(7, Arc::clone(&rw));
        assert!(tables.get(1).is_none(), "generation 0 evicted by generation 2");
        assert!(tables.get(2).is_none());
        assert!(tables.get(4).is_some(), "generation 1 still resident");
        assert!(tables.get(7).is_some());
    }

    #[test]
    fn failed_results_hash_distinctly() {
        let ok = TxResult::Ok(b"x".to_vec());
        let failed = TxResult::Failed("x".to_string());
        assert_ne!(ok.result_hash(), failed.result_hash());
        assert_eq!(ok.result_hash(), TxResult::Ok(b"x".to_vec()).result_hash());
    }

    #[test]
    fn reset_for_replay_allows_recommitting_the_tail() {
        let exec = executor(1);
        let task = FnTask(|ctx: &mut TxCtx| {
            ctx.put("t", b"k", &[("n", b"v")]).unwrap();
            TxResult::Ok(Vec::new())
        });
        for id in 1..=5 {
            exec.run(id, &task).unwrap();
        }
        exec.store().truncate_above(3).unwrap();
        exec.reset_for_replay(3);
        assert_eq!(exec.last_committed(), 3);
        for id in 4..=6 {
            exec.run(id, &task).unwrap();
        }
        assert_eq!(exec.store().last_committed(), 6);
    }
}
