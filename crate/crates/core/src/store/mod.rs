//! Multi-version table store with built-in Merkle forest maintenance.
//!
//! Tables map byte-string primary keys to rows. Every write appends a
//! version tagged with the committing transaction id, so a snapshot is just
//! a number: "versions visible through transaction t". Snapshots cost
//! nothing to take, stay valid forever (no vacuuming by default), and give
//! the recovery machinery a frozen view to diff while commits continue.
//!
//! Commits are strictly ordered: transaction t can only commit after t-1,
//! which is what makes replicas executing the same log arrive at identical
//! stores. The committed counter moves under the same lock that applies the
//! writes, so a snapshot can never observe half a transaction.
//!
//! Tables may carry a Merkle forest (see `merkle`). Node values are rows of
//! a companion `~forest~` table maintained inside the same commit, and a
//! commit reports which partition roots it touched so result envelopes can
//! carry them.

mod row;
#[cfg(test)]
mod tests;
pub mod tx;

use std::collections::BTreeMap;
use std::sync::RwLock;

pub use row::{Key, Row, TableSchema};
pub use tx::{RangeRead, RwSet, TxCtx, TxFailure, WriteKind, WriteSet};

use thiserror::Error;

use crate::codec::{CodecError, Dec, Enc};
use crate::hash::Hash256;
use crate::merkle::{
    self, ForestConfig, ForestError, NodeId, StateDigests, TableDigests, NODE_VALUE_FIELD,
};

pub type TxId = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("no such table {0:?}")]
    NoSuchTable(String),
    #[error("table {0:?} already exists")]
    TableExists(String),
    #[error("no field {field:?} in table {table:?}")]
    NoSuchField { table: String, field: String },
    #[error("invalid table name {0:?}")]
    InvalidName(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("row keys must be non-empty")]
    EmptyKey,
    #[error("commit out of order: expected {expected}, got {got}")]
    CommitOrder { expected: TxId, got: TxId },
    #[error("table {0:?} is system-managed")]
    SystemTableWrite(String),
    #[error("foreign key violation: {0}")]
    ForeignKey(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A frozen view of the store: every version committed by a transaction id
/// less than or equal to `visible_through`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Snapshot {
    pub visible_through: TxId,
}

impl Snapshot {
    pub fn at(tx: TxId) -> Snapshot {
        Snapshot { visible_through: tx }
    }
}

/// Referential constraint: every non-absent `child_field` value in
/// `child_table` must be the key of a live row in `parent_table`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForeignKey {
    pub child_table: String,
    pub child_field: String,
    pub parent_table: String,
}

/// What a commit touched, as seen by everyone comparing replicas: the
/// post-commit root hash of every forest partition the writes landed in.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommitReceipt {
    pub tx: TxId,
    pub touched_roots: Vec<(String, u32, Hash256)>,
}

/// Version chain for one key, ascending by transaction id. `None` marks a
/// deletion.
#[derive(Debug, Default)]
struct Versions(Vec<(TxId, Option<Row>)>);

impl Versions {
    fn visible(&self, through: TxId) -> Option<&Row> {
        let idx = self.0.partition_point(|(t, _)| *t <= through);
        if idx == 0 {
            None
        } else {
            self.0[idx - 1].1.as_ref()
        }
    }

    fn head(&self) -> Option<&Row> {
        self.0.last().and_then(|(_, r)| r.as_ref())
    }

    /// Append a version, replacing the head if it carries the same id.
    /// Replacement is how repair rewrites current state in place.
    fn set_at(&mut self, tx: TxId, value: Option<Row>) {
        if let Some(last) = self.0.last_mut() {
            debug_assert!(last.0 <= tx, "version ids must ascend");
            if last.0 == tx {
                last.1 = value;
                return;
            }
        }
        self.0.push((tx, value));
    }

    fn truncate_above(&mut self, tx: TxId) {
        while matches!(self.0.last(), Some((t, _)) if *t > tx) {
            self.0.pop();
        }
    }
}

struct Table {
    schema: TableSchema,
    forest: Option<ForestConfig>,
    rows: BTreeMap<Key, Versions>,
}

struct Inner {
    tables: BTreeMap<String, Table>,
    committed: TxId,
    foreign_keys: Vec<ForeignKey>,
    constraints_enabled: bool,
}

impl Inner {
    fn table(&self, name: &str) -> Result<&Table, StoreError> {
        self.tables.get(name).ok_or_else(|| StoreError::NoSuchTable(name.to_string()))
    }

    fn table_mut(&mut self, name: &str) -> Result<&mut Table, StoreError> {
        self.tables.get_mut(name).ok_or_else(|| StoreError::NoSuchTable(name.to_string()))
    }

    /// Current head value of a forest node row.
    fn node_value(&self, user_table: &str, global: u64) -> Hash256 {
        let nt = merkle::node_table_name(user_table);
        let row = self
            .tables
            .get(&nt)
            .and_then(|t| t.rows.get(&merkle::node_row_key(global)))
            .and_then(|v| v.head());
        match row.and_then(|r| r.get(NODE_VALUE_FIELD)) {
            Some(v) => Hash256::from_slice(v).expect("node row holds a hash"),
            None => Hash256::ZERO,
        }
    }

    /// Write one row version and fold its hash delta into `deltas`
    /// (keyed by user table and global node index).
    fn write_row(
        &mut self,
        tx: TxId,
        table_name: &str,
        key: &Key,
        value: Option<Row>,
        deltas: &mut BTreeMap<(String, u64), Hash256>,
    ) -> Result<(), StoreError> {
        let table = self.table_mut(table_name)?;
        if let Some(row) = &value {
            debug_assert_eq!(&row.key, key, "row key must match write key");
        }
        let chain = table.rows.entry(key.clone()).or_default();
        let old_hash = chain.head().map(Row::content_hash);
        if value.is_none() && old_hash.is_none() {
            // Deleting a key that holds nothing is a no-op; don't grow a
            // chain for it.
            if chain.0.is_empty() {
                table.rows.remove(key);
            }
            return Ok(());
        }
        let new_hash = value.as_ref().map(Row::content_hash);
        chain.set_at(tx, value);

        if let Some(config) = table.forest {
            let mut delta = old_hash.unwrap_or(Hash256::ZERO);
            delta.xor_assign(&new_hash.unwrap_or(Hash256::ZERO));
            let leaf = config.leaf_for_key(key);
            for pos in config.path_to_root(leaf.position) {
                let global = config.global_index(NodeId { partition: leaf.partition, position: pos });
                deltas
                    .entry((table_name.to_string(), global))
                    .or_insert(Hash256::ZERO)
                    .xor_assign(&delta);
            }
        }
        Ok(())
    }

    /// Apply accumulated node deltas as node-row versions and report the
    /// post-write root of every touched partition.
    fn apply_node_deltas(
        &mut self,
        tx: TxId,
        deltas: BTreeMap<(String, u64), Hash256>,
    ) -> Vec<(String, u32, Hash256)> {
        let mut touched: BTreeMap<(String, u32), ()> = BTreeMap::new();
        for ((user_table, global), delta) in &deltas {
            let config = self.tables[user_table.as_str()].forest.expect("delta from forest table");
            touched.insert((user_table.clone(), self.partition_of(&config, *global)), ());
            if delta.is_zero() {
                // Value unchanged; the partition still counts as touched
                // but there is nothing to rewrite.
                continue;
            }
            let new_value = self.node_value(user_table, *global).xor(delta);
            self.set_node_value(tx, user_table, *global, new_value);
        }
        touched
            .into_keys()
            .map(|(table, partition)| {
                let config = self.tables[table.as_str()].forest.unwrap();
                let root_global = config
                    .global_index(NodeId { partition, position: 0 });
                let root = self.node_value(&table, root_global);
                (table, partition, root)
            })
            .collect()
    }

    fn partition_of(&self, config: &ForestConfig, global: u64) -> u32 {
        config.from_global_index(global).partition
    }

    fn set_node_value(&mut self, tx: TxId, user_table: &str, global: u64, value: Hash256) {
        let nt = merkle::node_table_name(user_table);
        let schema = &self.tables[nt.as_str()].schema;
        let row = Row::normalized(schema, &merkle::node_row_key(global), &[(
            NODE_VALUE_FIELD,
            value.as_bytes(),
        )])
        .expect("node row construction");
        self.tables
            .get_mut(nt.as_str())
            .unwrap()
            .rows
            .entry(merkle::node_row_key(global))
            .or_default()
            .set_at(tx, Some(row));
    }

    fn check_foreign_keys_at(&self, through: TxId) -> Result<(), StoreError> {
        for fk in &self.foreign_keys {
            let child = self.table(&fk.child_table)?;
            let parent = self.table(&fk.parent_table)?;
            for versions in child.rows.values() {
                let Some(row) = versions.visible(through) else { continue };
                let Some(value) = row.get(&fk.child_field) else { continue };
                let ok = parent.rows.get(value).and_then(|v| v.visible(through)).is_some();
                if !ok {
                    return Err(StoreError::ForeignKey(format!(
                        "{}.{} -> {} missing key {}",
                        fk.child_table,
                        fk.child_field,
                        fk.parent_table,
                        hex::encode(value)
                    )));
                }
            }
        }
        Ok(())
    }
}

pub struct Store {
    inner: RwLock<Inner>,
}

impl Default for Store {
    fn default() -> Self {
        Self::new()
    }
}

impl Store {
    pub fn new() -> Store {
        Store {
            inner: RwLock::new(Inner {
                tables: BTreeMap::new(),
                committed: 0,
                foreign_keys: Vec::new(),
                constraints_enabled: true,
            }),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().expect("store lock")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().expect("store lock")
    }

    /// Create a user table, optionally protected by a forest. The node
    /// companion table is created alongside with every node row
    /// materialized at the zero hash, so node reads never miss.
    pub fn create_table(
        &self,
        schema: TableSchema,
        forest: Option<ForestConfig>,
    ) -> Result<(), StoreError> {
        if schema.name.starts_with('~') {
            return Err(StoreError::InvalidName(schema.name));
        }
        if !schema.name.bytes().all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b)) {
            return Err(StoreError::InvalidName(schema.name));
        }
        self.create_table_raw(schema, forest)
    }

    /// System-table variant: permits the reserved `~` prefix.
    pub(crate) fn create_system_table(
        &self,
        schema: TableSchema,
        forest: Option<ForestConfig>,
    ) -> Result<(), StoreError> {
        self.create_table_raw(schema, forest)
    }

    fn create_table_raw(
        &self,
        schema: TableSchema,
        forest: Option<ForestConfig>,
    ) -> Result<(), StoreError> {
        if let Some(f) = &forest {
            f.validate()?;
        }
        let mut inner = self.write();
        if inner.tables.contains_key(&schema.name) {
            return Err(StoreError::TableExists(schema.name));
        }
        let name = schema.name.clone();
        inner.tables.insert(name.clone(), Table { schema, forest, rows: BTreeMap::new() });

        if let Some(config) = forest {
            let node_schema = TableSchema::new(&merkle::node_table_name(&name), &[NODE_VALUE_FIELD])
                .expect("node schema");
            let node_name = node_schema.name.clone();
            if inner.tables.contains_key(&node_name) {
                return Err(StoreError::TableExists(node_name));
            }
            let mut rows = BTreeMap::new();
            for global in 0..config.total_nodes() {
                let key = merkle::node_row_key(global);
                let row = Row::normalized(&node_schema, &key, &[(
                    NODE_VALUE_FIELD,
                    Hash256::ZERO.as_bytes(),
                )])
                .expect("node row");
                rows.insert(key, Versions(vec![(0, Some(row))]));
            }
            inner
                .tables
                .insert(node_name, Table { schema: node_schema, forest: None, rows });
        }
        Ok(())
    }

    /// Install initial rows as part of genesis (transaction 0). Only legal
    /// before any commit.
    pub fn bootstrap_rows(&self, table: &str, rows: &[Row]) -> Result<(), StoreError> {
        let mut inner = self.write();
        if inner.committed != 0 {
            return Err(StoreError::CommitOrder { expected: 0, got: inner.committed });
        }
        let mut deltas = BTreeMap::new();
        for row in rows {
            inner.write_row(0, table, &row.key.clone(), Some(row.clone()), &mut deltas)?;
        }
        inner.apply_node_deltas(0, deltas);
        Ok(())
    }

    pub fn take_snapshot(&self) -> Snapshot {
        Snapshot { visible_through: self.read().committed }
    }

    pub fn last_committed(&self) -> TxId {
        self.read().committed
    }

    /// Apply one transaction's writes. Commits must arrive in strict id
    /// order; the caller (the executor) is responsible for sequencing.
    pub fn commit_writes(&self, tx: TxId, writes: &WriteSet) -> Result<CommitReceipt, StoreError> {
        let mut inner = self.write();
        if tx != inner.committed + 1 {
            return Err(StoreError::CommitOrder { expected: inner.committed + 1, got: tx });
        }
        // Validate every table before mutating anything so a bad write set
        // cannot leave a half-applied transaction behind.
        for (table, _) in writes.keys() {
            inner.table(table)?;
        }
        let mut deltas = BTreeMap::new();
        for ((table, key), value) in writes {
            inner.write_row(tx, table, key, value.clone(), &mut deltas)?;
        }
        let touched_roots = inner.apply_node_deltas(tx, deltas);
        inner.committed = tx;
        Ok(CommitReceipt { tx, touched_roots })
    }

    /// Advance the committed counter without writing anything: rejected
    /// requests and control entries still occupy their log slot.
    pub fn commit_noop(&self, tx: TxId) -> Result<CommitReceipt, StoreError> {
        let mut inner = self.write();
        if tx != inner.committed + 1 {
            return Err(StoreError::CommitOrder { expected: inner.committed + 1, got: tx });
        }
        inner.committed = tx;
        Ok(CommitReceipt { tx, touched_roots: Vec::new() })
    }

    pub fn get(&self, snap: Snapshot, table: &str, key: &[u8]) -> Result<Option<Row>, StoreError> {
        let inner = self.read();
        Ok(inner
            .table(table)?
            .rows
            .get(key)
            .and_then(|v| v.visible(snap.visible_through))
            .cloned())
    }

    /// Rows in the closed interval `[lo, hi]` (unbounded above when `hi` is
    /// `None`), in key order.
    pub fn scan(
        &self,
        snap: Snapshot,
        table: &str,
        lo: &[u8],
        hi: Option<&[u8]>,
    ) -> Result<Vec<Row>, StoreError> {
        let inner = self.read();
        let t = inner.table(table)?;
        let range: Box<dyn Iterator<Item = (&Key, &Versions)>> = match hi {
            Some(hi) => Box::new(t.rows.range(lo.to_vec()..=hi.to_vec())),
            None => Box::new(t.rows.range(lo.to_vec()..)),
        };
        Ok(range.filter_map(|(_, v)| v.visible(snap.visible_through).cloned()).collect())
    }

    pub fn schema(&self, table: &str) -> Result<TableSchema, StoreError> {
        Ok(self.read().table(table)?.schema.clone())
    }

    pub fn forest_config(&self, table: &str) -> Result<Option<ForestConfig>, StoreError> {
        Ok(self.read().table(table)?.forest)
    }

    pub fn table_names(&self) -> Vec<String> {
        self.read().tables.keys().cloned().collect()
    }

    /// Tables that carry a forest, in name order; the unit of state
    /// comparison.
    pub fn protected_tables(&self) -> Vec<String> {
        let inner = self.read();
        inner
            .tables
            .iter()
            .filter(|(_, t)| t.forest.is_some())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn node_hash(&self, snap: Snapshot, table: &str, id: NodeId) -> Result<Hash256, StoreError> {
        let inner = self.read();
        let config =
            inner.table(table)?.forest.ok_or_else(|| StoreError::NoSuchTable(table.into()))?;
        let nt = merkle::node_table_name(table);
        let key = merkle::node_row_key(config.global_index(id));
        let row = inner
            .table(&nt)?
            .rows
            .get(&key)
            .and_then(|v| v.visible(snap.visible_through));
        match row.and_then(|r| r.get(NODE_VALUE_FIELD)) {
            Some(v) => Ok(Hash256::from_slice(v)?),
            None => Ok(Hash256::ZERO),
        }
    }

    pub fn partition_roots(&self, snap: Snapshot, table: &str) -> Result<Vec<Hash256>, StoreError> {
        let config =
            self.forest_config(table)?.ok_or_else(|| StoreError::NoSuchTable(table.into()))?;
        (0..config.partitions)
            .map(|p| self.node_hash(snap, table, NodeId { partition: p, position: 0 }))
            .collect()
    }

    /// Partition roots of every protected table at one snapshot.
    pub fn digests(&self, snap: Snapshot) -> Result<StateDigests, StoreError> {
        let mut out = StateDigests::default();
        for table in self.protected_tables() {
            let config = self.forest_config(&table)?.unwrap();
            let roots = self.partition_roots(snap, &table)?;
            out.tables.insert(table.clone(), TableDigests { table, config, roots });
        }
        Ok(out)
    }

    /// Keys whose rows live in `leaf`, at the given snapshot. The reverse of
    /// `ForestConfig::leaf_for_key`, answered by a scan; repair touches few
    /// leaves so per-leaf cost stays flat.
    pub fn rows_for_leaf(
        &self,
        snap: Snapshot,
        table: &str,
        leaf: NodeId,
    ) -> Result<Vec<Key>, StoreError> {
        let inner = self.read();
        let t = inner.table(table)?;
        let config = t.forest.ok_or_else(|| StoreError::NoSuchTable(table.into()))?;
        Ok(t.rows
            .iter()
            .filter(|(key, versions)| {
                versions.visible(snap.visible_through).is_some() && config.leaf_for_key(key) == leaf
            })
            .map(|(key, _)| key.clone())
            .collect())
    }

    /// Every stored node value by global index. Test and repair aid.
    pub fn forest_nodes(&self, snap: Snapshot, table: &str) -> Result<Vec<Hash256>, StoreError> {
        let config =
            self.forest_config(table)?.ok_or_else(|| StoreError::NoSuchTable(table.into()))?;
        (0..config.total_nodes())
            .map(|g| self.node_hash(snap, table, config.from_global_index(g)))
            .collect()
    }

    /// Recompute what every node value should be from the rows themselves.
    /// Oracle for the incremental maintenance and input to forest rebuilds.
    pub fn recompute_forest(&self, snap: Snapshot, table: &str) -> Result<Vec<Hash256>, StoreError> {
        let inner = self.read();
        let t = inner.table(table)?;
        let config = t.forest.ok_or_else(|| StoreError::NoSuchTable(table.into()))?;
        let hashes: Vec<(NodeId, Hash256)> = t
            .rows
            .iter()
            .filter_map(|(key, versions)| {
                versions
                    .visible(snap.visible_through)
                    .map(|row| (config.leaf_for_key(key), row.content_hash()))
            })
            .collect();
        Ok(merkle::recompute_nodes(&config, hashes.into_iter()))
    }

    /// Rewrite every node row of `table` from a fresh recomputation at the
    /// current head. Repairs forests that no longer match their rows.
    pub fn rebuild_forest(&self, table: &str) -> Result<u64, StoreError> {
        let computed = self.recompute_forest(self.take_snapshot(), table)?;
        let mut inner = self.write();
        let tx = inner.committed;
        let mut rewritten = 0;
        for (global, value) in computed.iter().enumerate() {
            let global = global as u64;
            if inner.node_value(table, global) != *value {
                inner.set_node_value(tx, table, global, *value);
                rewritten += 1;
            }
        }
        Ok(rewritten)
    }

    /// Overwrite current state during repair: the new value becomes visible
    /// at the head snapshot without consuming a transaction id, and the
    /// forest is patched to match.
    pub fn repair_row(&self, table: &str, key: &[u8], value: Option<Row>) -> Result<(), StoreError> {
        let mut inner = self.write();
        let tx = inner.committed;
        let mut deltas = BTreeMap::new();
        inner.write_row(tx, table, &key.to_vec(), value, &mut deltas)?;
        inner.apply_node_deltas(tx, deltas);
        Ok(())
    }

    /// Fault injection. With `update_forest` the forest is maintained, so
    /// the damage is only visible by comparing against other replicas;
    /// without it the rows change behind the forest's back, modeling
    /// corruption that bypassed the write path.
    pub fn tamper_row(
        &self,
        table: &str,
        key: &[u8],
        value: Option<Row>,
        update_forest: bool,
    ) -> Result<(), StoreError> {
        if update_forest {
            return self.repair_row(table, key, value);
        }
        let mut inner = self.write();
        let tx = inner.committed;
        let table_ref = inner.table_mut(table)?;
        let chain = table_ref.rows.entry(key.to_vec()).or_default();
        chain.set_at(tx, value);
        Ok(())
    }

    /// Drop every version above `tx` and rewind the committed counter.
    /// Because node rows are versioned like everything else, the forest
    /// rewinds consistently for free.
    pub fn truncate_above(&self, tx: TxId) -> Result<(), StoreError> {
        let mut inner = self.write();
        if tx > inner.committed {
            return Err(StoreError::CommitOrder { expected: inner.committed, got: tx });
        }
        for table in inner.tables.values_mut() {
            table.rows.retain(|_, versions| {
                versions.truncate_above(tx);
                !versions.0.is_empty()
            });
        }
        inner.committed = tx;
        Ok(())
    }

    pub fn add_foreign_key(&self, fk: ForeignKey) -> Result<(), StoreError> {
        let mut inner = self.write();
        inner.table(&fk.child_table)?;
        inner.table(&fk.parent_table)?;
        let child = inner.table(&fk.child_table)?;
        if child.schema.field_index(&fk.child_field).is_none() {
            return Err(StoreError::NoSuchField {
                table: fk.child_table.clone(),
                field: fk.child_field.clone(),
            });
        }
        inner.foreign_keys.push(fk);
        Ok(())
    }

    pub fn foreign_keys(&self) -> Vec<ForeignKey> {
        self.read().foreign_keys.clone()
    }

    /// Constraint enforcement toggle; repair turns it off while rows are
    /// copied in arbitrary order and revalidates before turning it back on.
    pub fn set_constraints_enabled(&self, enabled: bool) {
        self.write().constraints_enabled = enabled;
    }

    pub fn constraints_enabled(&self) -> bool {
        self.read().constraints_enabled
    }

    /// Full referential check of the visible state at `snap`.
    pub fn revalidate_constraints(&self, snap: Snapshot) -> Result<(), StoreError> {
        self.read().check_foreign_keys_at(snap.visible_through)
    }

    /// Canonical serialization of the visible state: tables in name order,
    /// rows in key order, one hex-encoded record per line. Two stores that
    /// committed identical transactions serialize identically.
    pub fn canonical_dump(&self, snap: Snapshot) -> String {
        let inner = self.read();
        let mut out = String::new();
        for (name, table) in &inner.tables {
            let mut e = Enc::new();
            e.u8(DUMP_TABLE_TAG).str(name).list(&table.schema.fields, |e, f| {
                e.str(f);
            });
            match &table.forest {
                None => e.u8(0),
                Some(f) => e.u8(1).u32(f.partitions).u32(f.fanout).u32(f.levels),
            };
            out.push_str(&hex::encode(e.finish()));
            out.push('\n');
            for versions in table.rows.values() {
                if let Some(row) = versions.visible(snap.visible_through) {
                    let mut e = Enc::new();
                    e.u8(DUMP_ROW_TAG).bytes(&row.canonical_bytes());
                    out.push_str(&hex::encode(e.finish()));
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Hash of the canonical dump; the one-line answer to "is this state
    /// identical".
    pub fn state_digest(&self, snap: Snapshot) -> Hash256 {
        Hash256::of(self.canonical_dump(snap).as_bytes())
    }
}

const DUMP_TABLE_TAG: u8 = 1;
const DUMP_ROW_TAG: u8 = 2;

/// One table's worth of a parsed dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpTable {
    pub name: String,
    pub fields: Vec<String>,
    pub forest: Option<ForestConfig>,
    pub rows: Vec<Row>,
}

/// Parse a canonical dump back into structured form, verifying framing.
pub fn parse_dump(text: &str) -> Result<Vec<DumpTable>, StoreError> {
    let mut out: Vec<DumpTable> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bytes = hex::decode(line)
            .map_err(|_| StoreError::Codec(CodecError::Malformed("dump line is not hex")))?;
        let mut d = Dec::new(&bytes);
        match d.u8()? {
            DUMP_TABLE_TAG => {
                let name = d.str()?;
                let fields = d.list(|d| d.str())?;
                let forest = match d.u8()? {
                    0 => None,
                    1 => Some(ForestConfig {
                        partitions: d.u32()?,
                        fanout: d.u32()?,
                        levels: d.u32()?,
                    }),
                    _ => return Err(CodecError::Malformed("forest tag").into()),
                };
                d.done()?;
                out.push(DumpTable { name, fields, forest, rows: Vec::new() });
            }
            DUMP_ROW_TAG => {
                let row = Row::decode(d.bytes()?)?;
                d.done()?;
                let Some(current) = out.last_mut() else {
                    return Err(CodecError::Malformed("row before table header").into());
                };
                current.rows.push(row);
            }
            _ => {
                let _ = lineno;
                return Err(CodecError::Malformed("unknown dump record tag").into());
            }
        }
    }
    Ok(out)
}

/// Adapter: read node hashes of one table from a store snapshot, counting
/// fetches so tests and repair can assert traversal bounds.
pub struct SnapshotNodeSource<'a> {
    pub store: &'a Store,
    pub snapshot: Snapshot,
    pub table: String,
    pub fetches: u64,
}

impl<'a> SnapshotNodeSource<'a> {
    pub fn new(store: &'a Store, snapshot: Snapshot, table: &str) -> Self {
        Self { store, snapshot, table: table.to_string(), fetches: 0 }
    }
}

impl merkle::NodeHashSource for SnapshotNodeSource<'_> {
    fn node_hash(&mut self, id: NodeId) -> Result<Hash256, StoreError> {
        self.fetches += 1;
        self.store.node_hash(self.snapshot, &self.table, id)
    }
}
