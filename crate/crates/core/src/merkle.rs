//! Partitioned Merkle forests over table rows.
//!
//! Every protected table carries a forest: `partitions` independent trees,
//! each a complete tree of `fanout`-ary shape with `levels` levels below the
//! root. A row is assigned to one leaf by hashing its primary key, a leaf
//! holds the XOR of the hashes of its rows, and an inner node holds the XOR
//! of its children. XOR aggregation makes a row update an O(levels) patch
//! (XOR the old-hash/new-hash delta into the leaf and its ancestors) and
//! makes the leaf value independent of insertion order.
//!
//! Node values live in a companion table (`~forest~<name>`) as ordinary
//! rows, keyed by node id. Tree maintenance therefore rides the same
//! write-conflict machinery as user data: two transactions that touch the
//! same tree path collide on the node rows and one of them re-executes.
//!
//! Comparing two replicas starts at the partition roots and descends only
//! into subtrees that differ, so locating `k` damaged leaves costs
//! O(partitions + k * fanout * levels) node fetches instead of a full scan.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{CodecError, Dec, Enc};
use crate::hash::Hash256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ForestError {
    #[error("forest must have at least 1 partition, fanout 2, and 1 level")]
    DegenerateShape,
    #[error("forest shape overflows addressing")]
    TooLarge,
    #[error("malformed digest listing: {0}")]
    MalformedDigests(String),
}

/// Shape of the forest kept over one table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ForestConfig {
    pub partitions: u32,
    pub fanout: u32,
    pub levels: u32,
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.partitions < 1 || self.fanout < 2 || self.levels < 1 {
            return Err(ForestError::DegenerateShape);
        }
        let f = self.fanout as u128;
        let nodes = (f.pow(self.levels + 1) - 1) / (f - 1);
        let total = nodes.checked_mul(self.partitions as u128).ok_or(ForestError::TooLarge)?;
        if total > u64::MAX as u128 / 2 {
            return Err(ForestError::TooLarge);
        }
        Ok(())
    }

    /// Leaves in one partition tree: fanout^levels.
    pub fn leaves_per_partition(&self) -> u64 {
        (self.fanout as u64).pow(self.levels)
    }

    /// All nodes in one partition tree: (fanout^(levels+1) - 1) / (fanout - 1).
    pub fn nodes_per_partition(&self) -> u64 {
        let f = self.fanout as u64;
        (f.pow(self.levels + 1) - 1) / (f - 1)
    }

    pub fn total_leaves(&self) -> u64 {
        self.partitions as u64 * self.leaves_per_partition()
    }

    pub fn total_nodes(&self) -> u64 {
        self.partitions as u64 * self.nodes_per_partition()
    }

    /// Breadth-first position of the first leaf within a partition tree.
    pub fn first_leaf_position(&self) -> u64 {
        self.nodes_per_partition() - self.leaves_per_partition()
    }

    pub fn is_leaf(&self, position: u64) -> bool {
        position >= self.first_leaf_position()
    }

    /// Children of an inner node, in breadth-first numbering.
    pub fn children(&self, position: u64) -> std::ops::RangeInclusive<u64> {
        let f = self.fanout as u64;
        f * position + 1..=f * position + f
    }

    pub fn parent(&self, position: u64) -> Option<u64> {
        if position == 0 {
            None
        } else {
            Some((position - 1) / self.fanout as u64)
        }
    }

    /// Leaf position plus all ancestors up to the root, leaf first.
    pub fn path_to_root(&self, leaf_position: u64) -> Vec<u64> {
        let mut path = vec![leaf_position];
        let mut pos = leaf_position;
        while let Some(p) = self.parent(pos) {
            path.push(p);
            pos = p;
        }
        path
    }

    /// The leaf a row lives in, by hash of its primary key. Stable for the
    /// life of the table: repartitioning means rebuilding the forest.
    pub fn leaf_for_key(&self, key: &[u8]) -> NodeId {
        let digest = Hash256::of(key);
        let h = u64::from_le_bytes(digest.0[..8].try_into().unwrap());
        let leaves = self.leaves_per_partition();
        let slot = h % (self.partitions as u64 * leaves);
        NodeId {
            partition: (slot / leaves) as u32,
            position: self.first_leaf_position() + slot % leaves,
        }
    }

    /// The `ordinal`-th leaf of the whole forest, counting partition by
    /// partition. Inverse of the slot numbering in [`Self::leaf_for_key`].
    pub fn leaf_at(&self, ordinal: u64) -> NodeId {
        let leaves = self.leaves_per_partition();
        NodeId {
            partition: (ordinal / leaves) as u32,
            position: self.first_leaf_position() + ordinal % leaves,
        }
    }

    /// Flat ordinal of a node across the whole forest; keys the node row.
    pub fn global_index(&self, id: NodeId) -> u64 {
        id.partition as u64 * self.nodes_per_partition() + id.position
    }

    pub fn from_global_index(&self, global: u64) -> NodeId {
        let n = self.nodes_per_partition();
        NodeId { partition: (global / n) as u32, position: global % n }
    }
}

/// One node of one partition tree, in breadth-first numbering: position 0
/// is the root, children of p are fanout*p+1 ..= fanout*p+fanout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub partition: u32,
    pub position: u64,
}

/// Name of the companion table holding a table's node rows. The `~` prefix
/// is reserved for system tables so this can never collide with user names.
pub fn node_table_name(table: &str) -> String {
    format!("~forest~{table}")
}

/// Node rows are keyed by the node's big-endian global index so they sort
/// in tree order.
pub fn node_row_key(global_index: u64) -> Vec<u8> {
    global_index.to_be_bytes().to_vec()
}

pub const NODE_VALUE_FIELD: &str = "h";

/// Source of node hashes for tree comparison. Implementations read a local
/// store snapshot or a remote replica's recovery session; both sides are
/// behind this trait so `diff` can count fetches uniformly.
pub trait NodeHashSource {
    fn node_hash(&mut self, id: NodeId) -> Result<Hash256, crate::store::StoreError>;
}

/// Walk two forests top-down and return the leaves whose values differ.
/// Only subtrees with differing roots are descended.
pub fn diff_leaves(
    config: &ForestConfig,
    local: &mut dyn NodeHashSource,
    remote: &mut dyn NodeHashSource,
) -> Result<Vec<NodeId>, crate::store::StoreError> {
    let mut out = Vec::new();
    for partition in 0..config.partitions {
        let mut stack = Vec::new();
        let root = NodeId { partition, position: 0 };
        if local.node_hash(root)? != remote.node_hash(root)? {
            stack.push(0u64);
        }
        while let Some(pos) = stack.pop() {
            if config.is_leaf(pos) {
                out.push(NodeId { partition, position: pos });
                continue;
            }
            for child in config.children(pos) {
                let id = NodeId { partition, position: child };
                if local.node_hash(id)? != remote.node_hash(id)? {
                    stack.push(child);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Full recomputation of every node value from a row-hash listing.
/// This is the oracle the incremental maintenance is checked against, and
/// the repair path for forests that are themselves suspect. Returns values
/// indexed by global node index, zeros included.
pub fn recompute_nodes(
    config: &ForestConfig,
    row_hashes: impl Iterator<Item = (NodeId, Hash256)>,
) -> Vec<Hash256> {
    let n = config.nodes_per_partition();
    let mut nodes = vec![Hash256::ZERO; config.total_nodes() as usize];
    for (leaf, h) in row_hashes {
        debug_assert!(config.is_leaf(leaf.position));
        nodes[config.global_index(leaf) as usize].xor_assign(&h);
    }
    for partition in 0..config.partitions as u64 {
        let base = partition * n;
        for pos in (0..config.first_leaf_position()).rev() {
            let mut acc = Hash256::ZERO;
            for child in config.children(pos) {
                acc.xor_assign(&nodes[(base + child) as usize]);
            }
            nodes[(base + pos) as usize] = acc;
        }
    }
    nodes
}

/// Partition roots of one table at one snapshot, plus the shape needed to
/// interpret them. This is the unit replicas exchange and vote on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDigests {
    pub table: String,
    pub config: ForestConfig,
    pub roots: Vec<Hash256>,
}

impl TableDigests {
    /// Single hash summarizing the table: hash of the concatenated roots.
    pub fn digest(&self) -> Hash256 {
        let mut h = crate::hash::Hasher::new();
        for r in &self.roots {
            h.update(r.as_bytes());
        }
        h.finish()
    }

    pub fn encode(&self, e: &mut Enc) {
        e.str(&self.table)
            .u32(self.config.partitions)
            .u32(self.config.fanout)
            .u32(self.config.levels)
            .list(&self.roots, |e, r| {
                e.bytes(r.as_bytes());
            });
    }

    pub fn decode(d: &mut Dec) -> Result<TableDigests, CodecError> {
        let table = d.str()?;
        let config = ForestConfig {
            partitions: d.u32()?,
            fanout: d.u32()?,
            levels: d.u32()?,
        };
        let roots = d.list(|d| Hash256::from_slice(d.bytes()?))?;
        Ok(TableDigests { table, config, roots })
    }
}

/// Digest listing for a whole store at one snapshot: every protected
/// table's partition roots, keyed by table name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateDigests {
    pub tables: BTreeMap<String, TableDigests>,
}

impl StateDigests {
    /// One hash covering every table; equal iff the listings are equal.
    pub fn combined(&self) -> Hash256 {
        Hash256::of(&self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new();
        let tables: Vec<&TableDigests> = self.tables.values().collect();
        e.u32(tables.len() as u32);
        for t in tables {
            t.encode(&mut e);
        }
        e.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<StateDigests, CodecError> {
        let mut d = Dec::new(buf);
        let n = d.u32()? as usize;
        let mut tables = BTreeMap::new();
        for _ in 0..n {
            let t = TableDigests::decode(&mut d)?;
            tables.insert(t.table.clone(), t);
        }
        d.done()?;
        Ok(StateDigests { tables })
    }

    /// Human-readable listing: per table a header line
    /// `table <name> <partitions> <fanout> <levels>` followed by one hex
    /// root per line. Stable across replicas and runs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in self.tables.values() {
            out.push_str(&format!(
                "table {} {} {} {}\n",
                t.table, t.config.partitions, t.config.fanout, t.config.levels
            ));
            for r in &t.roots {
                out.push_str(&r.to_hex());
                out.push('\n');
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<StateDigests, ForestError> {
        let mut tables = BTreeMap::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(header) = lines.next() {
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "table" {
                return Err(ForestError::MalformedDigests(format!("bad header: {header}")));
            }
            let parse_u32 = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| ForestError::MalformedDigests(format!("bad number: {s}")))
            };
            let config = ForestConfig {
                partitions: parse_u32(parts[2])?,
                fanout: parse_u32(parts[3])?,
                levels: parse_u32(parts[4])?,
            };
            let mut roots = Vec::with_capacity(config.partitions as usize);
            for _ in 0..config.partitions {
                let line = lines
                    .next()
                    .ok_or_else(|| ForestError::MalformedDigests("truncated roots".into()))?;
                roots.push(
                    Hash256::from_hex(line.trim())
                        .map_err(|_| ForestError::MalformedDigests(format!("bad root: {line}")))?,
                );
            }
            tables.insert(
                parts[1].to_string(),
                TableDigests { table: parts[1].to_string(), config, roots },
            );
        }
        Ok(StateDigests { tables })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn cfg(partitions: u32, fanout: u32, levels: u32) -> ForestConfig {
        ForestConfig { partitions, fanout, levels }
    }

    #[test]
    fn node_count_formula_matches_enumeration() {
        // Independently enumerate a complete 3-ary tree of 2 levels:
        // 1 root + 3 inner + 9 leaves = 13 nodes.
        let c = cfg(1, 3, 2);
        assert_eq!(c.nodes_per_partition(), 13);
        assert_eq!(c.leaves_per_partition(), 9);
        assert_eq!(c.first_leaf_position(), 4);

        // Shapes used in practice.
        assert_eq!(cfg(1, 8, 3).leaves_per_partition(), 512);
        assert_eq!(cfg(1, 8, 3).nodes_per_partition(), 585);
        assert_eq!(cfg(1, 16, 1).nodes_per_partition(), 17);
        assert_eq!(cfg(200, 16, 1).total_nodes(), 3400);
    }

    #[test]
    fn parent_child_numbering_is_consistent() {
        let c = cfg(1, 4, 3);
        for pos in 0..c.nodes_per_partition() {
            if !c.is_leaf(pos) {
                for child in c.children(pos) {
                    assert_eq!(c.parent(child), Some(pos));
                }
            }
        }
        assert_eq!(c.parent(0), None);
    }

    #[test]
    fn path_to_root_has_levels_plus_one_nodes() {
        let c = cfg(1, 8, 3);
        for leaf in c.first_leaf_position()..c.nodes_per_partition() {
            let path = c.path_to_root(leaf);
            assert_eq!(path.len(), 4);
            assert_eq!(*path.last().unwrap(), 0);
        }
    }

    #[test]
    fn keys_spread_over_all_partitions_and_stay_put() {
        let c = cfg(8, 2, 2);
        let mut seen = vec![0u32; c.partitions as usize];
        for i in 0..4000u32 {
            let key = format!("user{i:08}");
            let leaf = c.leaf_for_key(key.as_bytes());
            assert!(c.is_leaf(leaf.position));
            assert_eq!(c.leaf_for_key(key.as_bytes()), leaf);
            seen[leaf.partition as usize] += 1;
        }
        for (p, count) in seen.iter().enumerate() {
            assert!(*count > 0, "partition {p} never hit");
        }
    }

    #[test]
    fn global_index_roundtrip() {
        let c = cfg(5, 3, 2);
        for partition in 0..c.partitions {
            for position in 0..c.nodes_per_partition() {
                let id = NodeId { partition, position };
                assert_eq!(c.from_global_index(c.global_index(id)), id);
            }
        }
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        assert!(cfg(0, 2, 1).validate().is_err());
        assert!(cfg(1, 1, 1).validate().is_err());
        assert!(cfg(1, 2, 0).validate().is_err());
        assert!(cfg(200, 16, 1).validate().is_ok());
        assert!(cfg(1, 2, 63).validate().is_err());
    }

    struct MapSource<'a>(&'a HashMap<NodeId, Hash256>, u64);

    impl NodeHashSource for MapSource<'_> {
        fn node_hash(&mut self, id: NodeId) -> Result<Hash256, crate::store::StoreError> {
            self.1 += 1;
            Ok(self.0.get(&id).copied().unwrap_or(Hash256::ZERO))
        }
    }

    fn forest_from_rows(c: &ForestConfig, rows: &[(&[u8], &[u8])]) -> HashMap<NodeId, Hash256> {
        let nodes = recompute_nodes(
            c,
            rows.iter().map(|(k, v)| (c.leaf_for_key(k), Hash256::of(v))),
        );
        let mut map = HashMap::new();
        for (g, h) in nodes.iter().enumerate() {
            map.insert(c.from_global_index(g as u64), *h);
        }
        map
    }

    #[test]
    fn diff_finds_exactly_the_changed_leaves() {
        let c = cfg(4, 2, 3);
        let rows: Vec<(Vec<u8>, Vec<u8>)> = (0..200)
            .map(|i| (format!("k{i:04}").into_bytes(), format!("v{i}").into_bytes()))
            .collect();
        let borrowed: Vec<(&[u8], &[u8])> =
            rows.iter().map(|(k, v)| (k.as_slice(), v.as_slice())).collect();
        let a = forest_from_rows(&c, &borrowed);

        // Change one row's value.
        let mut changed = borrowed.clone();
        changed[17].1 = b"different";
        let b = forest_from_rows(&c, &changed);

        let expected_leaf = c.leaf_for_key(borrowed[17].0);
        let mut sa = MapSource(&a, 0);
        let mut sb = MapSource(&b, 0);
        let diffs = diff_leaves(&c, &mut sa, &mut sb).unwrap();
        assert_eq!(diffs, vec![expected_leaf]);

        // Fetch bound: roots for every partition plus one fanout batch per
        // level on the single divergent path.
        let bound = c.partitions as u64 + c.levels as u64 * c.fanout as u64;
        assert!(sa.1 <= bound, "fetched {} > bound {}", sa.1, bound);
    }

    #[test]
    fn diff_of_identical_forests_is_empty_after_partition_roots() {
        let c = cfg(4, 2, 2);
        let rows: Vec<(Vec<u8>, Vec<u8>)> =
            (0..50).map(|i| (format!("k{i}").into_bytes(), vec![i as u8])).collect();
        let borrowed: Vec<(&[u8], &[u8])> =
            rows.iter().map(|(k, v)| (k.as_slice(), v.as_slice())).collect();
        let a = forest_from_rows(&c, &borrowed);
        let b = forest_from_rows(&c, &borrowed);
        let mut sa = MapSource(&a, 0);
        let mut sb = MapSource(&b, 0);
        assert_eq!(diff_leaves(&c, &mut sa, &mut sb).unwrap(), vec![]);
        assert_eq!(sa.1, c.partitions as u64);
    }

    #[test]
    fn recompute_is_insertion_order_independent() {
        let c = cfg(3, 2, 2);
        let rows: Vec<(Vec<u8>, Hash256)> =
            (0..40).map(|i| (format!("k{i}").into_bytes(), Hash256::of(&[i as u8]))).collect();
        let forward = recompute_nodes(&c, rows.iter().map(|(k, h)| (c.leaf_for_key(k), *h)));
        let reverse =
            recompute_nodes(&c, rows.iter().rev().map(|(k, h)| (c.leaf_for_key(k), *h)));
        assert_eq!(forward, reverse);
    }

    #[test]
    fn empty_forest_is_all_zero() {
        let c = cfg(2, 2, 2);
        let nodes = recompute_nodes(&c, std::iter::empty());
        assert!(nodes.iter().all(|h| h.is_zero()));
    }

    #[test]
    fn digest_text_roundtrip() {
        let c = cfg(3, 2, 1);
        let t = TableDigests {
            table: "users".into(),
            config: c,
            roots: vec![Hash256::of(b"a"), Hash256::of(b"b"), Hash256::ZERO],
        };
        let mut digests = StateDigests::default();
        digests.tables.insert(t.table.clone(), t);
        let text = digests.to_text();
        let parsed = StateDigests::parse_text(&text).unwrap();
        assert_eq!(parsed, digests);
        assert_eq!(parsed.combined(), digests.combined());

        let decoded = StateDigests::decode(&digests.encode()).unwrap();
        assert_eq!(decoded, digests);
    }

    #[test]
    fn digest_changes_when_any_root_changes() {
        let c = cfg(2, 2, 1);
        let mk = |r0: &[u8]| {
            let t = TableDigests {
                table: "t".into(),
                config: c,
                roots: vec![Hash256::of(r0), Hash256::of(b"fixed")],
            };
            let mut d = StateDigests::default();
            d.tables.insert("t".into(), t);
            d.combined()
        };
        assert_ne!(mk(b"one"), mk(b"two"));
    }
}
