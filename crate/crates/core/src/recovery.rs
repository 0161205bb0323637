//! Detection rounds and online repair.
//!
//! The supervisor owns the administrative side of corruption handling: it
//! appends signed barrier entries, collects the digests every replica
//! publishes there, groups replicas by agreement, and drives divergent
//! copies through rollback, Merkle-diff repair, and log replay while the
//! rest of the cluster keeps committing.
//!
//! Repair transfers only what provably differs: the forest walk isolates
//! the damaged leaves and only rows in those leaves whose encodings differ
//! move across. A damage estimate above `full_copy_fraction` of leaves
//! flips to a straight table copy since walking the forest would cost more
//! than it saves.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::crypto::Keypair;
use crate::hash::Hash256;
use crate::logsvc::{LogBackend, Payload};
use crate::merkle::{diff_leaves, NodeId};
use crate::replica::{Replica, SavedState, StatePeer};
use crate::store::{Row, Snapshot, SnapshotNodeSource, StoreError};
use crate::ReplicaId;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("no reference replica available: {0}")]
    NoReference(String),
    #[error("replica {0} did not reach log offset {1} in time")]
    Lagging(ReplicaId, u64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct RecoveryOptions {
    /// How long a detection round waits for every replica's digests.
    pub digest_timeout: Duration,
    /// Fraction of a table's leaves above which repair abandons the
    /// leaf-by-leaf walk and copies the whole table.
    pub full_copy_fraction: f64,
    /// Pause between transferred rows. Zero for as-fast-as-possible;
    /// nonzero spreads repair out, bounding its interference.
    pub row_delay: Duration,
    /// How long to wait for a repaired replica to replay back to the head.
    pub replay_timeout: Duration,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            digest_timeout: Duration::from_secs(10),
            full_copy_fraction: 0.25,
            row_delay: Duration::ZERO,
            replay_timeout: Duration::from_secs(120),
        }
    }
}

/// Replicas whose digests at a barrier were bit-identical.
#[derive(Debug, Clone)]
pub struct DigestGroup {
    pub members: Vec<ReplicaId>,
    pub combined: Hash256,
}

/// Outcome of one compareStates round.
#[derive(Debug, Clone)]
pub struct DetectionRound {
    pub mark: u64,
    /// Largest group first; ties broken toward the group holding the
    /// lowest replica id.
    pub groups: Vec<DigestGroup>,
    /// Index into `groups` of the strict-majority group, if one exists.
    pub majority: Option<usize>,
    /// Everyone outside the majority group, unresponsive replicas included.
    pub flagged: Vec<ReplicaId>,
    pub unresponsive: Vec<ReplicaId>,
}

impl DetectionRound {
    pub fn healthy(&self) -> bool {
        self.groups.len() == 1 && self.unresponsive.is_empty() && self.majority == Some(0)
    }

    pub fn reference(&self) -> Option<ReplicaId> {
        self.majority.map(|g| self.groups[g].members[0])
    }
}

/// Per-table accounting of one repair.
#[derive(Debug, Clone, Serialize)]
pub struct TableRepair {
    pub table: String,
    pub leaves_diffed: u64,
    pub full_copy: bool,
    pub rows_updated: u64,
    pub rows_inserted: u64,
    pub rows_deleted: u64,
    pub bytes_copied: u64,
    /// Remote node hashes fetched during the forest walk.
    pub node_fetches: u64,
}

impl TableRepair {
    pub fn rows_transferred(&self) -> u64 {
        self.rows_updated + self.rows_inserted + self.rows_deleted
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RepairReport {
    pub replica: ReplicaId,
    pub reference: ReplicaId,
    pub mark: u64,
    pub replayed_to: u64,
    pub tables: Vec<TableRepair>,
    pub diff_ms: f64,
    pub copy_ms: f64,
    pub replay_ms: f64,
    /// Digests matched the reference at the mark before replay resumed.
    pub converged: bool,
}

impl RepairReport {
    pub fn rows_transferred(&self) -> u64 {
        self.tables.iter().map(TableRepair::rows_transferred).sum()
    }
}

pub struct Supervisor {
    log: Arc<dyn LogBackend>,
    admin: Arc<Keypair>,
    replicas: BTreeMap<ReplicaId, Arc<Replica>>,
    opts: RecoveryOptions,
}

/// Build a signed compareStates entry.
pub fn signed_compare_states(admin: &Keypair) -> Payload {
    let mut payload = Payload::CompareStates { admin_sig: Vec::new() };
    let sig = admin.sign(&payload.admin_region().expect("control payload"));
    if let Payload::CompareStates { admin_sig } = &mut payload {
        *admin_sig = sig;
    }
    payload
}

/// Build a signed saveSyncState entry naming the reference replicas.
pub fn signed_save_sync_state(admin: &Keypair, references: &[ReplicaId]) -> Payload {
    let mut payload =
        Payload::SaveSyncState { references: references.to_vec(), admin_sig: Vec::new() };
    let sig = admin.sign(&payload.admin_region().expect("control payload"));
    if let Payload::SaveSyncState { admin_sig, .. } = &mut payload {
        *admin_sig = sig;
    }
    payload
}

impl Supervisor {
    pub fn new(
        log: Arc<dyn LogBackend>,
        admin: Arc<Keypair>,
        replicas: BTreeMap<ReplicaId, Arc<Replica>>,
        opts: RecoveryOptions,
    ) -> Supervisor {
        Supervisor { log, admin, replicas, opts }
    }

    pub fn options(&self) -> &RecoveryOptions {
        &self.opts
    }

    pub fn replica(&self, id: ReplicaId) -> &Arc<Replica> {
        &self.replicas[&id]
    }

    /// Append a compareStates barrier and group the digests every replica
    /// publishes for it.
    pub fn detection_round(&self) -> DetectionRound {
        let mark = self.log.append(signed_compare_states(&self.admin));
        self.collect_round(mark)
    }

    /// Gather saved digests for an existing barrier.
    pub fn collect_round(&self, mark: u64) -> DetectionRound {
        let deadline = Instant::now() + self.opts.digest_timeout;
        let mut saved: BTreeMap<ReplicaId, SavedState> = BTreeMap::new();
        loop {
            for (id, replica) in &self.replicas {
                if !saved.contains_key(id) {
                    if let Some(s) = replica.saved_state(mark) {
                        saved.insert(*id, s);
                    }
                }
            }
            if saved.len() == self.replicas.len() || Instant::now() >= deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }

        let mut by_digest: BTreeMap<Hash256, Vec<ReplicaId>> = BTreeMap::new();
        for (id, state) in &saved {
            by_digest.entry(state.digests.combined()).or_default().push(*id);
        }
        let mut groups: Vec<DigestGroup> = by_digest
            .into_iter()
            .map(|(combined, members)| DigestGroup { members, combined })
            .collect();
        groups.sort_by_key(|g| (std::cmp::Reverse(g.members.len()), g.members[0]));

        let n = self.replicas.len();
        let majority = groups.iter().position(|g| g.members.len() > n / 2);
        let unresponsive: Vec<ReplicaId> =
            self.replicas.keys().filter(|id| !saved.contains_key(id)).copied().collect();
        let flagged: Vec<ReplicaId> = match majority {
            Some(m) => self
                .replicas
                .keys()
                .filter(|id| !groups[m].members.contains(id))
                .copied()
                .collect(),
            None => self.replicas.keys().copied().collect(),
        };
        DetectionRound { mark, groups, majority, flagged, unresponsive }
    }

    /// Repair one replica from a reference, both pinned at `mark`, then
    /// replay it back to the head of the log. The reference keeps running
    /// throughout; its pinned snapshot stays valid regardless.
    pub fn repair(
        &self,
        corrupt: ReplicaId,
        reference: ReplicaId,
        mark: u64,
    ) -> Result<RepairReport, RecoveryError> {
        let target_replica = Arc::clone(&self.replicas[&corrupt]);
        let ref_replica = Arc::clone(&self.replicas[&reference]);

        // Park the damaged replica exactly at the mark. It may be ahead
        // (claims past the barrier) or behind (lagging); rewind handles the
        // overshoot once it has processed through the mark.
        let deadline = Instant::now() + self.opts.replay_timeout;
        loop {
            target_replica.pause();
            if target_replica.frontier() >= mark {
                break;
            }
            if Instant::now() >= deadline {
                return Err(RecoveryError::Lagging(corrupt, mark));
            }
            target_replica.resume();
            target_replica.wait_frontier(mark, Duration::from_millis(50));
        }
        target_replica.rewind_to(mark)?;
        ref_replica.wait_frontier(mark, self.opts.replay_timeout);

        let store = target_replica.store();
        let peer = StatePeer::new(ref_replica, mark);
        let snap = Snapshot::at(mark);

        // Rows arrive in whatever order the walk finds them, so parent rows
        // may temporarily be missing; checks come back before replay.
        store.set_constraints_enabled(false);

        let mut tables = Vec::new();
        let mut diff_total = Duration::ZERO;
        let mut copy_total = Duration::ZERO;
        for table in store.protected_tables() {
            let (repair, diff_t, copy_t) = self.repair_table(&table, store, &peer, snap)?;
            diff_total += diff_t;
            copy_total += copy_t;
            tables.push(repair);
        }

        // The whole point: after transfer the states must be identical.
        let mut converged =
            store.digests(snap)?.combined() == peer.digests()?.combined();
        if !converged {
            // Leaf-level transfer missed something (damaged forest lying
            // about its own contents). Fall back to full copies.
            for t in &mut tables {
                let started = Instant::now();
                let (upd, ins, del, bytes) = self.full_table_copy(&t.table, store, &peer, snap)?;
                copy_total += started.elapsed();
                t.full_copy = true;
                t.rows_updated += upd;
                t.rows_inserted += ins;
                t.rows_deleted += del;
                t.bytes_copied += bytes;
            }
            converged = store.digests(snap)?.combined() == peer.digests()?.combined();
        }

        if converged {
            store.revalidate_constraints(snap)?;
        }
        store.set_constraints_enabled(true);

        // Replay the suffix. Envelopes for slots the cluster already voted
        // on go out flagged as replays.
        let replay_started = Instant::now();
        let target = self.log.len();
        target_replica.set_replay_until(target);
        target_replica.resume();
        let replayed_to = target_replica.wait_frontier(target, self.opts.replay_timeout);

        Ok(RepairReport {
            replica: corrupt,
            reference,
            mark,
            replayed_to,
            tables,
            diff_ms: diff_total.as_secs_f64() * 1e3,
            copy_ms: copy_total.as_secs_f64() * 1e3,
            replay_ms: replay_started.elapsed().as_secs_f64() * 1e3,
            converged,
        })
    }

    fn repair_table(
        &self,
        table: &str,
        store: &Arc<crate::store::Store>,
        peer: &StatePeer,
        snap: Snapshot,
    ) -> Result<(TableRepair, Duration, Duration), StoreError> {
        let config = store.forest_config(table)?.expect("protected table has a forest");

        let diff_started = Instant::now();
        let fetches_before = peer.fetches();
        let mut local = SnapshotNodeSource::new(store, snap, table);
        let mut remote = peer.node_source(table);
        let leaves = diff_leaves(&config, &mut local, &mut remote)?;
        let node_fetches = peer.fetches() - fetches_before;
        let diff_elapsed = diff_started.elapsed();

        let mut repair = TableRepair {
            table: table.to_string(),
            leaves_diffed: leaves.len() as u64,
            full_copy: false,
            rows_updated: 0,
            rows_inserted: 0,
            rows_deleted: 0,
            bytes_copied: 0,
            node_fetches,
        };

        let copy_started = Instant::now();
        let wide_damage =
            leaves.len() as f64 > self.opts.full_copy_fraction * config.total_leaves() as f64;
        if wide_damage {
            repair.full_copy = true;
            let (upd, ins, del, bytes) = self.full_table_copy(table, store, peer, snap)?;
            repair.rows_updated = upd;
            repair.rows_inserted = ins;
            repair.rows_deleted = del;
            repair.bytes_copied = bytes;
        } else {
            for leaf in leaves {
                self.repair_leaf(table, leaf, store, peer, snap, &mut repair)?;
            }
        }
        Ok((repair, diff_elapsed, copy_started.elapsed()))
    }

    /// Reconcile one leaf: the union of both sides' keys, row by row.
    fn repair_leaf(
        &self,
        table: &str,
        leaf: NodeId,
        store: &Arc<crate::store::Store>,
        peer: &StatePeer,
        snap: Snapshot,
        repair: &mut TableRepair,
    ) -> Result<(), StoreError> {
        let mut keys: Vec<Vec<u8>> = peer.rows_for_leaf(table, leaf)?;
        keys.extend(store.rows_for_leaf(snap, table, leaf)?);
        keys.sort();
        keys.dedup();

        for key in keys {
            let theirs = peer.fetch_row(table, &key)?;
            let mine = store.get(snap, table, &key)?;
            if theirs == mine {
                continue;
            }
            match (&theirs, &mine) {
                (Some(row), Some(_)) => {
                    repair.rows_updated += 1;
                    repair.bytes_copied += row.canonical_bytes().len() as u64;
                }
                (Some(row), None) => {
                    repair.rows_inserted += 1;
                    repair.bytes_copied += row.canonical_bytes().len() as u64;
                }
                (None, Some(_)) => repair.rows_deleted += 1,
                (None, None) => unreachable!("filtered above"),
            }
            store.repair_row(table, &key, theirs)?;
            if !self.opts.row_delay.is_zero() {
                std::thread::sleep(self.opts.row_delay);
            }
        }
        Ok(())
    }

    fn full_table_copy(
        &self,
        table: &str,
        store: &Arc<crate::store::Store>,
        peer: &StatePeer,
        snap: Snapshot,
    ) -> Result<(u64, u64, u64, u64), StoreError> {
        let theirs: BTreeMap<Vec<u8>, Row> =
            peer.scan_all(table)?.into_iter().map(|r| (r.key.clone(), r)).collect();
        let mine: BTreeMap<Vec<u8>, Row> = store
            .scan(snap, table, &[], None)?
            .into_iter()
            .map(|r| (r.key.clone(), r))
            .collect();

        let (mut updated, mut inserted, mut deleted, mut bytes) = (0, 0, 0, 0u64);
        for (key, row) in &theirs {
            match mine.get(key) {
                Some(m) if m == row => continue,
                Some(_) => updated += 1,
                None => inserted += 1,
            }
            bytes += row.canonical_bytes().len() as u64;
            store.repair_row(table, key, Some(row.clone()))?;
            if !self.opts.row_delay.is_zero() {
                std::thread::sleep(self.opts.row_delay);
            }
        }
        for key in mine.keys() {
            if !theirs.contains_key(key) {
                deleted += 1;
                store.repair_row(table, key, None)?;
            }
        }
        Ok((updated, inserted, deleted, bytes))
    }

    /// Majority-exists path: repair every flagged replica from the
    /// majority's first member at the round's own barrier.
    pub fn recover_after_detection(
        &self,
        round: &DetectionRound,
    ) -> Result<Vec<RepairReport>, RecoveryError> {
        let reference = round
            .reference()
            .ok_or_else(|| RecoveryError::NoReference("no majority digest group".into()))?;
        let mut reports = Vec::new();
        for id in &round.flagged {
            if self.replicas.contains_key(id) && !round.unresponsive.contains(id) {
                reports.push(self.repair(*id, reference, round.mark)?);
            }
        }
        Ok(reports)
    }

    /// No-majority path (nondeterminism has scattered the digests): pick a
    /// reference group, declare it in a saveSyncState barrier, and rebuild
    /// everyone else from it at that exact offset.
    pub fn sync_state_recovery(&self) -> Result<(u64, Vec<RepairReport>), RecoveryError> {
        let round = self.detection_round();
        // Largest group wins; ties already fall toward the lowest id
        // through the group ordering.
        let reference_group = round.groups.first().cloned().ok_or_else(|| {
            RecoveryError::NoReference("no replica published digests for the round".into())
        })?;
        let references = reference_group.members.clone();
        let mark = self.log.append(signed_save_sync_state(&self.admin, &references));

        let reference = references[0];
        self.replicas[&reference].wait_frontier(mark, self.opts.replay_timeout);

        let mut reports = Vec::new();
        for id in self.replicas.keys() {
            if references.contains(id) {
                continue;
            }
            // Each diverged replica parks itself when it executes the
            // barrier; repair() then rewinds it onto the exact mark.
            reports.push(self.repair(*id, reference, mark)?);
        }
        Ok((mark, reports))
    }

    /// Rebuild a replica's forests from its rows (paused throughout).
    /// For corruption that bypassed forest maintenance: afterwards the
    /// forest tells the truth about the damaged rows, so the next
    /// detection round can find and repair them.
    pub fn rebuild_forest(&self, id: ReplicaId) -> Result<u64, StoreError> {
        let replica = &self.replicas[&id];
        replica.pause();
        let store = replica.store();
        let mut rewritten = 0;
        for table in store.protected_tables() {
            rewritten += store.rebuild_forest(&table)?;
        }
        replica.resume();
        Ok(rewritten)
    }
}
