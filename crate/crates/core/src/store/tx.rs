//! Transaction execution context: snapshot reads, buffered writes, and the
//! read/write sets that conflict validation runs on.
//!
//! A transaction executes against a frozen snapshot and buffers every write
//! locally; nothing touches the store until the executor commits the
//! finished write set. Reads see the transaction's own buffered writes
//! first (those reads are not recorded, they depend on nobody), then the
//! snapshot (recorded). Scans record the whole scanned interval so a
//! concurrent insert into the range is caught as a conflict, not silently
//! missed.
//!
//! For tables protected by a forest, `finish` adds the node rows on the
//! write paths to the recorded write set. Two transactions whose rows share
//! a tree path then collide like any other write-write pair, which is what
//! keeps incremental forest maintenance serializable.

use std::collections::{BTreeMap, BTreeSet};

use crate::merkle;
use crate::store::row::{Key, Row, TableSchema};
use crate::store::{ForestConfig, Snapshot, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    Insert,
    Update,
    Delete,
}

/// Closed scan interval; `hi = None` means unbounded above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeRead {
    pub table: String,
    pub lo: Key,
    pub hi: Option<Key>,
}

impl RangeRead {
    fn covers(&self, table: &str, key: &[u8]) -> bool {
        self.table == table
            && self.lo.as_slice() <= key
            && self.hi.as_deref().is_none_or(|hi| key <= hi)
    }
}

/// What a transaction read and wrote, as used by conflict validation.
#[derive(Debug, Clone, Default)]
pub struct RwSet {
    pub point_reads: BTreeSet<(String, Key)>,
    pub range_reads: Vec<RangeRead>,
    pub writes: BTreeMap<(String, Key), WriteKind>,
}

impl RwSet {
    /// True when a transaction that committed after our snapshot invalidates
    /// us: it wrote a key we read, a key inside a range we scanned, or a key
    /// we also write.
    pub fn conflicts_with(&self, committed: &RwSet) -> bool {
        for loc in committed.writes.keys() {
            if self.point_reads.contains(loc) || self.writes.contains_key(loc) {
                return true;
            }
        }
        for range in &self.range_reads {
            let lo = (range.table.clone(), range.lo.clone());
            let mut hits = committed
                .writes
                .range(lo..)
                .take_while(|((t, k), _)| range.covers(t, k));
            if hits.next().is_some() {
                return true;
            }
        }
        false
    }
}

/// Writes ready to commit: final value per location, `None` for deletion.
pub type WriteSet = BTreeMap<(String, Key), Option<Row>>;

/// Deterministic transaction failure. The request occupies its log slot
/// and reports the reason; whether any writes survive is the caller's
/// policy (procedure bodies are rolled back, bookkeeping is kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxFailure {
    pub reason: String,
}

impl TxFailure {
    pub fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

impl std::fmt::Display for TxFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.reason)
    }
}

impl From<StoreError> for TxFailure {
    fn from(e: StoreError) -> Self {
        TxFailure::new(e.to_string())
    }
}

/// Saved write-buffer state; restoring it rolls back everything buffered
/// after the mark while keeping recorded reads.
pub struct WriteMark(BTreeMap<(String, Key), (WriteKind, Option<Row>)>);

pub struct TxCtx<'a> {
    store: &'a Store,
    snapshot: Snapshot,
    point_reads: BTreeSet<(String, Key)>,
    range_reads: Vec<RangeRead>,
    writes: BTreeMap<(String, Key), (WriteKind, Option<Row>)>,
    table_cache: BTreeMap<String, (TableSchema, Option<ForestConfig>)>,
}

impl<'a> TxCtx<'a> {
    pub fn new(store: &'a Store, snapshot: Snapshot) -> Self {
        Self {
            store,
            snapshot,
            point_reads: BTreeSet::new(),
            range_reads: Vec::new(),
            writes: BTreeMap::new(),
            table_cache: BTreeMap::new(),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot
    }

    /// Schema lookup for procedures shaping rows. Schemas are fixed at
    /// startup, so this is not a recorded read.
    pub fn schema(&mut self, table: &str) -> Result<TableSchema, StoreError> {
        Ok(self.table_info(table)?.0)
    }

    fn table_info(&mut self, table: &str) -> Result<(TableSchema, Option<ForestConfig>), StoreError> {
        if let Some(info) = self.table_cache.get(table) {
            return Ok(info.clone());
        }
        let info = (self.store.schema(table)?, self.store.forest_config(table)?);
        self.table_cache.insert(table.to_string(), info.clone());
        Ok(info)
    }

    /// Read one row: own buffered write first (unrecorded), then the
    /// snapshot (recorded as a point read).
    pub fn get(&mut self, table: &str, key: &[u8]) -> Result<Option<Row>, StoreError> {
        self.table_info(table)?;
        let loc = (table.to_string(), key.to_vec());
        if let Some((_, buffered)) = self.writes.get(&loc) {
            return Ok(buffered.clone());
        }
        let row = self.store.get(self.snapshot, table, key)?;
        self.point_reads.insert(loc);
        Ok(row)
    }

    /// Rows in `[lo, hi]` (closed; unbounded above when `hi` is `None`),
    /// merged with buffered writes. Records the interval.
    pub fn scan(
        &mut self,
        table: &str,
        lo: &[u8],
        hi: Option<&[u8]>,
    ) -> Result<Vec<Row>, StoreError> {
        self.table_info(table)?;
        let merged = self.merged_range(table, lo, hi)?;
        self.range_reads.push(RangeRead {
            table: table.to_string(),
            lo: lo.to_vec(),
            hi: hi.map(|h| h.to_vec()),
        });
        Ok(merged.into_values().collect())
    }

    /// At most `n` rows starting at `start`. Records `[start, last-key]`
    /// when `n` rows were found, otherwise the unbounded tail: a later
    /// insert that would have appeared in the result must conflict.
    pub fn scan_first_n(
        &mut self,
        table: &str,
        start: &[u8],
        n: usize,
    ) -> Result<Vec<Row>, StoreError> {
        self.table_info(table)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let merged = self.merged_range(table, start, None)?;
        let rows: Vec<Row> = merged.into_values().take(n).collect();
        let hi = if rows.len() == n { Some(rows.last().unwrap().key.clone()) } else { None };
        self.range_reads.push(RangeRead { table: table.to_string(), lo: start.to_vec(), hi });
        Ok(rows)
    }

    fn merged_range(
        &self,
        table: &str,
        lo: &[u8],
        hi: Option<&[u8]>,
    ) -> Result<BTreeMap<Key, Row>, StoreError> {
        let mut merged: BTreeMap<Key, Row> = self
            .store
            .scan(self.snapshot, table, lo, hi)?
            .into_iter()
            .map(|r| (r.key.clone(), r))
            .collect();
        let from = (table.to_string(), lo.to_vec());
        for ((t, k), (_, value)) in self.writes.range(from..) {
            if t != table || hi.is_some_and(|hi| k.as_slice() > hi) {
                break;
            }
            match value {
                Some(row) => merged.insert(k.clone(), row.clone()),
                None => merged.remove(k),
            };
        }
        Ok(merged)
    }

    /// Buffer a full-row write. The row is normalized against the schema;
    /// `~`-prefixed tables are system-managed and rejected here.
    pub fn put(
        &mut self,
        table: &str,
        key: &[u8],
        fields: &[(&str, &[u8])],
    ) -> Result<(), StoreError> {
        if table.starts_with('~') {
            return Err(StoreError::SystemTableWrite(table.to_string()));
        }
        self.put_internal(table, key, fields)
    }

    /// Write path for replication bookkeeping (client registry rows);
    /// bypasses only the system-name check.
    pub(crate) fn put_system(
        &mut self,
        table: &str,
        key: &[u8],
        fields: &[(&str, &[u8])],
    ) -> Result<(), StoreError> {
        self.put_internal(table, key, fields)
    }

    fn put_internal(
        &mut self,
        table: &str,
        key: &[u8],
        fields: &[(&str, &[u8])],
    ) -> Result<(), StoreError> {
        let (schema, _) = self.table_info(table)?;
        if table.starts_with("~forest~") {
            return Err(StoreError::SystemTableWrite(table.to_string()));
        }
        let row = Row::normalized(&schema, key, fields)?;
        // Net effect relative to the snapshot decides insert vs update;
        // the peek is deliberately unrecorded (the kind is reporting only,
        // the write itself is what validation sees).
        let kind = if self.store.get(self.snapshot, table, key)?.is_some() {
            WriteKind::Update
        } else {
            WriteKind::Insert
        };
        self.writes.insert((table.to_string(), key.to_vec()), (kind, Some(row)));
        Ok(())
    }

    pub fn delete(&mut self, table: &str, key: &[u8]) -> Result<(), StoreError> {
        if table.starts_with('~') {
            return Err(StoreError::SystemTableWrite(table.to_string()));
        }
        self.table_info(table)?;
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        self.writes.insert((table.to_string(), key.to_vec()), (WriteKind::Delete, None));
        Ok(())
    }

    /// Referential checks over the buffered writes, reading parents through
    /// this context so the dependencies are recorded and revalidated like
    /// any other read. Skipped entirely while constraints are disabled
    /// (repair windows).
    pub fn validate_constraints(&mut self) -> Result<(), TxFailure> {
        if !self.store.constraints_enabled() {
            return Ok(());
        }
        let fks = self.store.foreign_keys();
        if fks.is_empty() {
            return Ok(());
        }
        for fk in &fks {
            let child_writes: Vec<(Key, Option<Vec<u8>>)> = self
                .writes
                .range((fk.child_table.clone(), Vec::new())..)
                .take_while(|((t, _), _)| *t == fk.child_table)
                .filter_map(|((_, k), (_, v))| {
                    v.as_ref().map(|row| (k.clone(), row.get(&fk.child_field).map(|x| x.to_vec())))
                })
                .collect();
            for (child_key, reference) in child_writes {
                let Some(reference) = reference else { continue };
                if self.get(&fk.parent_table, &reference)?.is_none() {
                    return Err(TxFailure::new(format!(
                        "foreign key violation: {}[{}].{} references missing {} key {}",
                        fk.child_table,
                        hex::encode(&child_key),
                        fk.child_field,
                        fk.parent_table,
                        hex::encode(&reference)
                    )));
                }
            }

            let parent_deletes: Vec<Key> = self
                .writes
                .range((fk.parent_table.clone(), Vec::new())..)
                .take_while(|((t, _), _)| *t == fk.parent_table)
                .filter_map(|((_, k), (_, v))| v.is_none().then(|| k.clone()))
                .collect();
            for deleted in parent_deletes {
                let children = self.scan(&fk.child_table, b"", None)?;
                if children.iter().any(|row| row.get(&fk.child_field) == Some(&deleted[..])) {
                    return Err(TxFailure::new(format!(
                        "foreign key violation: delete of {} key {} still referenced by {}.{}",
                        fk.parent_table,
                        hex::encode(&deleted),
                        fk.child_table,
                        fk.child_field
                    )));
                }
            }
        }
        Ok(())
    }

    /// Snapshot the write buffer; restoring rolls back later writes while
    /// keeping every recorded read.
    pub fn write_mark(&self) -> WriteMark {
        WriteMark(self.writes.clone())
    }

    pub fn rollback_writes(&mut self, mark: WriteMark) {
        self.writes = mark.0;
    }

    /// Close the transaction: produce the validated read/write sets and the
    /// committable writes. Forest node rows on the write paths are added to
    /// the recorded writes here.
    pub fn finish(mut self) -> (RwSet, WriteSet) {
        let mut rw = RwSet {
            point_reads: self.point_reads,
            range_reads: self.range_reads,
            writes: BTreeMap::new(),
        };
        let mut writes: WriteSet = BTreeMap::new();
        for ((table, key), (kind, value)) in std::mem::take(&mut self.writes) {
            if let Some(config) = self.table_cache.get(&table).and_then(|(_, f)| *f) {
                let leaf = config.leaf_for_key(&key);
                let node_table = merkle::node_table_name(&table);
                for pos in config.path_to_root(leaf.position) {
                    let global = config.global_index(merkle::NodeId {
                        partition: leaf.partition,
                        position: pos,
                    });
                    rw.writes
                        .insert((node_table.clone(), merkle::node_row_key(global)), WriteKind::Update);
                }
            }
            rw.writes.insert((table.clone(), key.clone()), kind);
            writes.insert((table, key), value);
        }
        (rw, writes)
    }
}
