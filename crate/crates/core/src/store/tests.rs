use std::sync::Arc;

use crate::hash::Hash256;
use crate::merkle::{ForestConfig, NodeId};
use crate::store::tx::TxCtx;
use crate::store::{parse_dump, Row, Snapshot, Store, StoreError, TableSchema, WriteSet};

fn forest(p: u32, f: u32, l: u32) -> ForestConfig {
    ForestConfig { partitions: p, fanout: f, levels: l }
}

fn new_store(config: Option<ForestConfig>) -> Store {
    let store = Store::new();
    store.create_table(TableSchema::new("t", &["a", "b"]).unwrap(), config).unwrap();
    store
}

fn commit_put(store: &Store, tx: u64, key: &[u8], a: &[u8]) {
    let mut ctx = TxCtx::new(store, store.take_snapshot());
    ctx.put("t", key, &[("a", a)]).unwrap();
    let (_, writes) = ctx.finish();
    store.commit_writes(tx, &writes).unwrap();
}

fn commit_delete(store: &Store, tx: u64, key: &[u8]) {
    let mut ctx = TxCtx::new(store, store.take_snapshot());
    ctx.delete("t", key).unwrap();
    let (_, writes) = ctx.finish();
    store.commit_writes(tx, &writes).unwrap();
}

#[test]
fn snapshots_see_exactly_their_prefix() {
    let store = new_store(None);
    commit_put(&store, 1, b"k", b"v1");
    commit_put(&store, 2, b"k", b"v2");
    commit_delete(&store, 3, b"k");
    commit_put(&store, 4, b"k", b"v4");

    let value_at = |tx: u64| {
        store
            .get(Snapshot::at(tx), "t", b"k")
            .unwrap()
            .map(|r| r.get("a").unwrap().to_vec())
    };
    assert_eq!(value_at(0), None);
    assert_eq!(value_at(1), Some(b"v1".to_vec()));
    assert_eq!(value_at(2), Some(b"v2".to_vec()));
    assert_eq!(value_at(3), None);
    assert_eq!(value_at(4), Some(b"v4".to_vec()));
    // Old snapshots remain valid indefinitely.
    assert_eq!(value_at(1), Some(b"v1".to_vec()));
}

#[test]
fn commits_must_be_strictly_ordered() {
    let store = new_store(None);
    let writes: WriteSet = WriteSet::new();
    assert!(matches!(
        store.commit_writes(2, &writes),
        Err(StoreError::CommitOrder { expected: 1, got: 2 })
    ));
    store.commit_writes(1, &writes).unwrap();
    assert!(store.commit_writes(1, &writes).is_err());
    store.commit_noop(2).unwrap();
    assert_eq!(store.last_committed(), 2);
}

#[test]
fn snapshot_taken_during_commit_is_never_torn() {
    let store = Arc::new(new_store(None));
    // Wide transactions: a torn snapshot would see part of one.
    let keys: Vec<Vec<u8>> = (0..64u32).map(|i| format!("k{i:02}").into_bytes()).collect();

    let writer = {
        let store = Arc::clone(&store);
        let keys = keys.clone();
        std::thread::spawn(move || {
            for tx in 1..=50u64 {
                let mut ctx = TxCtx::new(&store, store.take_snapshot());
                for k in &keys {
                    ctx.put("t", k, &[("a", tx.to_le_bytes().as_slice())]).unwrap();
                }
                let (_, writes) = ctx.finish();
                store.commit_writes(tx, &writes).unwrap();
            }
        })
    };

    let mut observed = 0u64;
    while observed < 50 {
        let snap = store.take_snapshot();
        let rows = store.scan(snap, "t", b"", None).unwrap();
        if snap.visible_through == 0 {
            assert!(rows.is_empty());
            continue;
        }
        let expected = snap.visible_through.to_le_bytes();
        assert_eq!(rows.len(), keys.len(), "partial transaction visible");
        for row in &rows {
            assert_eq!(row.get("a").unwrap(), expected, "torn snapshot at {snap:?}");
        }
        observed = snap.visible_through;
    }
    writer.join().unwrap();
}

#[test]
fn canonical_dump_is_stable_and_parseable() {
    let build = || {
        let store = new_store(Some(forest(2, 2, 1)));
        commit_put(&store, 1, b"k1", b"v1");
        commit_put(&store, 2, b"k2", b"v2");
        commit_delete(&store, 3, b"k1");
        store
    };
    let a = build();
    let b = build();
    let snap = a.take_snapshot();
    assert_eq!(a.canonical_dump(snap), b.canonical_dump(snap));
    assert_eq!(a.state_digest(snap), b.state_digest(snap));

    let parsed = parse_dump(&a.canonical_dump(snap)).unwrap();
    let names: Vec<&str> = parsed.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, vec!["t", "~forest~t"], "name order, system tables included");
    assert_eq!(parsed[0].rows.len(), 1);
    assert_eq!(parsed[0].rows[0].key, b"k2");
    assert_eq!(parsed[1].rows.len(), forest(2, 2, 1).total_nodes() as usize);

    commit_put(&b, 4, b"k2", b"changed");
    assert_ne!(a.state_digest(snap), b.state_digest(b.take_snapshot()));
}

#[test]
fn dump_of_older_snapshot_ignores_later_commits() {
    let store = new_store(None);
    commit_put(&store, 1, b"k", b"v1");
    let early = store.take_snapshot();
    let dump_early = store.canonical_dump(early);
    commit_put(&store, 2, b"k", b"v2");
    assert_eq!(store.canonical_dump(early), dump_early);
    assert_ne!(store.canonical_dump(store.take_snapshot()), dump_early);
}

#[test]
fn node_rows_are_materialized_at_zero() {
    let config = forest(3, 2, 2);
    let store = new_store(Some(config));
    let snap = store.take_snapshot();
    let nodes = store.forest_nodes(snap, "t").unwrap();
    assert_eq!(nodes.len(), config.total_nodes() as usize);
    assert!(nodes.iter().all(|h| h.is_zero()));
    assert_eq!(store.partition_roots(snap, "t").unwrap().len(), 3);
}

#[test]
fn incremental_forest_matches_recomputation_through_mixed_ops() {
    let config = forest(4, 2, 2);
    let store = new_store(Some(config));
    let mut tx = 0u64;
    for i in 0..120u32 {
        tx += 1;
        let key = format!("k{:03}", i % 40).into_bytes();
        let mut ctx = TxCtx::new(&store, store.take_snapshot());
        match i % 5 {
            4 => ctx.delete("t", &key).unwrap(),
            _ => ctx.put("t", &key, &[("a", format!("v{i}").as_bytes())]).unwrap(),
        }
        let (_, writes) = ctx.finish();
        store.commit_writes(tx, &writes).unwrap();

        if i % 30 == 29 {
            let snap = store.take_snapshot();
            assert_eq!(
                store.forest_nodes(snap, "t").unwrap(),
                store.recompute_forest(snap, "t").unwrap(),
                "incremental maintenance diverged at tx {tx}"
            );
        }
    }
    // Historical snapshots also verify: node rows are versioned.
    for tx in [30u64, 60, 90, 120] {
        let snap = Snapshot::at(tx);
        assert_eq!(
            store.forest_nodes(snap, "t").unwrap(),
            store.recompute_forest(snap, "t").unwrap()
        );
    }
}

#[test]
fn commit_receipt_reports_touched_partition_roots() {
    let config = forest(4, 2, 1);
    let store = new_store(Some(config));
    let mut ctx = TxCtx::new(&store, store.take_snapshot());
    ctx.put("t", b"key-a", &[("a", b"1")]).unwrap();
    ctx.put("t", b"key-b", &[("a", b"2")]).unwrap();
    let (_, writes) = ctx.finish();
    let receipt = store.commit_writes(1, &writes).unwrap();

    let mut expected: Vec<u32> = [b"key-a".as_slice(), b"key-b".as_slice()]
        .iter()
        .map(|k| config.leaf_for_key(k).partition)
        .collect();
    expected.sort_unstable();
    expected.dedup();
    let touched: Vec<u32> = receipt.touched_roots.iter().map(|(_, p, _)| *p).collect();
    assert_eq!(touched, expected);

    // Reported roots equal what the store holds after the commit.
    let snap = store.take_snapshot();
    for (table, partition, root) in &receipt.touched_roots {
        let live = store
            .node_hash(snap, table, NodeId { partition: *partition, position: 0 })
            .unwrap();
        assert_eq!(live, *root);
    }

    let noop = store.commit_noop(2).unwrap();
    assert!(noop.touched_roots.is_empty());
}

#[test]
fn overwriting_with_identical_row_touches_but_does_not_change_roots() {
    let store = new_store(Some(forest(2, 2, 1)));
    commit_put(&store, 1, b"k", b"same");
    let before = store.partition_roots(store.take_snapshot(), "t").unwrap();
    let mut ctx = TxCtx::new(&store, store.take_snapshot());
    ctx.put("t", b"k", &[("a", b"same")]).unwrap();
    let (_, writes) = ctx.finish();
    let receipt = store.commit_writes(2, &writes).unwrap();
    assert_eq!(receipt.touched_roots.len(), 1);
    assert_eq!(store.partition_roots(store.take_snapshot(), "t").unwrap(), before);
}

#[test]
fn truncate_above_rewinds_state_and_forest_consistently() {
    let store = new_store(Some(forest(2, 2, 2)));
    commit_put(&store, 1, b"k1", b"v1");
    commit_put(&store, 2, b"k2", b"v2");
    let mark = store.take_snapshot();
    let digest_at_mark = store.state_digest(mark);

    commit_put(&store, 3, b"k1", b"v3");
    commit_delete(&store, 4, b"k2");
    assert_ne!(store.state_digest(store.take_snapshot()), digest_at_mark);

    store.truncate_above(2).unwrap();
    assert_eq!(store.last_committed(), 2);
    assert_eq!(store.state_digest(store.take_snapshot()), digest_at_mark);
    let snap = store.take_snapshot();
    assert_eq!(
        store.forest_nodes(snap, "t").unwrap(),
        store.recompute_forest(snap, "t").unwrap()
    );
    assert!(store.truncate_above(10).is_err(), "cannot truncate above the head");
}

#[test]
fn repair_row_rewrites_head_in_place() {
    let store = new_store(Some(forest(2, 2, 1)));
    commit_put(&store, 1, b"k", b"bad");
    commit_put(&store, 2, b"other", b"x");
    let head = store.take_snapshot();

    let schema = store.schema("t").unwrap();
    let fixed = Row::normalized(&schema, b"k", &[("a", b"good")]).unwrap();
    store.repair_row("t", b"k", Some(fixed.clone())).unwrap();

    // Repair does not consume a transaction id and is visible at the same
    // head snapshot.
    assert_eq!(store.last_committed(), 2);
    assert_eq!(store.get(head, "t", b"k").unwrap().unwrap(), fixed);
    let snap = store.take_snapshot();
    assert_eq!(
        store.forest_nodes(snap, "t").unwrap(),
        store.recompute_forest(snap, "t").unwrap(),
        "forest patched along with the repair"
    );

    store.repair_row("t", b"k", None).unwrap();
    assert_eq!(store.get(store.take_snapshot(), "t", b"k").unwrap(), None);
    assert_eq!(
        store.forest_nodes(snap, "t").unwrap(),
        store.recompute_forest(snap, "t").unwrap()
    );
}

#[test]
fn tamper_modes_differ_in_forest_visibility() {
    let schema = TableSchema::new("t", &["a", "b"]).unwrap();
    let corrupt = Row::normalized(&schema, b"k", &[("a", b"garbage")]).unwrap();

    // Consistent tamper: rows and forest both change, so roots move.
    let store = new_store(Some(forest(2, 2, 1)));
    commit_put(&store, 1, b"k", b"v");
    let before = store.partition_roots(store.take_snapshot(), "t").unwrap();
    store.tamper_row("t", b"k", Some(corrupt.clone()), true).unwrap();
    assert_ne!(store.partition_roots(store.take_snapshot(), "t").unwrap(), before);

    // Stealthy tamper: rows change behind the forest's back.
    let store = new_store(Some(forest(2, 2, 1)));
    commit_put(&store, 1, b"k", b"v");
    let before = store.partition_roots(store.take_snapshot(), "t").unwrap();
    store.tamper_row("t", b"k", Some(corrupt), false).unwrap();
    let snap = store.take_snapshot();
    assert_eq!(store.partition_roots(snap, "t").unwrap(), before, "roots unchanged");
    assert_ne!(
        store.forest_nodes(snap, "t").unwrap(),
        store.recompute_forest(snap, "t").unwrap(),
        "recomputation exposes the lie"
    );

    let rewritten = store.rebuild_forest("t").unwrap();
    assert!(rewritten > 0);
    let snap = store.take_snapshot();
    assert_eq!(
        store.forest_nodes(snap, "t").unwrap(),
        store.recompute_forest(snap, "t").unwrap(),
        "rebuild restores consistency"
    );
}

#[test]
fn rows_for_leaf_matches_brute_force() {
    let config = forest(3, 2, 2);
    let store = new_store(Some(config));
    for i in 0..60u64 {
        commit_put(&store, i + 1, format!("k{i:03}").as_bytes(), b"v");
    }
    commit_delete(&store, 61, b"k007");
    let snap = store.take_snapshot();

    for partition in 0..config.partitions {
        for position in config.first_leaf_position()..config.nodes_per_partition() {
            let leaf = NodeId { partition, position };
            let got = store.rows_for_leaf(snap, "t", leaf).unwrap();
            let expected: Vec<Vec<u8>> = store
                .scan(snap, "t", b"", None)
                .unwrap()
                .into_iter()
                .filter(|r| config.leaf_for_key(&r.key) == leaf)
                .map(|r| r.key)
                .collect();
            assert_eq!(got, expected);
        }
    }
}

#[test]
fn bootstrap_rows_are_genesis_state() {
    let store = new_store(Some(forest(2, 2, 1)));
    let schema = store.schema("t").unwrap();
    let rows: Vec<Row> = (0..10u32)
        .map(|i| {
            Row::normalized(&schema, format!("k{i}").as_bytes(), &[("a", b"seed")]).unwrap()
        })
        .collect();
    store.bootstrap_rows("t", &rows).unwrap();

    let genesis = Snapshot::at(0);
    assert_eq!(store.scan(genesis, "t", b"", None).unwrap().len(), 10);
    assert_eq!(
        store.forest_nodes(genesis, "t").unwrap(),
        store.recompute_forest(genesis, "t").unwrap()
    );

    commit_put(&store, 1, b"later", b"x");
    assert!(store.bootstrap_rows("t", &rows).is_err(), "bootstrap only before commits");
}

#[test]
fn table_name_rules() {
    let store = Store::new();
    assert!(store.create_table(TableSchema::new("~x", &["a"]).unwrap(), None).is_err());
    assert!(store.create_table(TableSchema::new("has space", &["a"]).unwrap(), None).is_err());
    store.create_table(TableSchema::new("ok-name_1.x", &["a"]).unwrap(), None).unwrap();
    assert!(matches!(
        store.create_table(TableSchema::new("ok-name_1.x", &["a"]).unwrap(), None),
        Err(StoreError::TableExists(_))
    ));
    assert!(matches!(
        store.get(store.take_snapshot(), "missing", b"k"),
        Err(StoreError::NoSuchTable(_))
    ));
}

#[test]
fn protected_tables_lists_forested_tables_only() {
    let store = Store::new();
    store.create_table(TableSchema::new("plain", &["a"]).unwrap(), None).unwrap();
    store
        .create_table(TableSchema::new("guarded", &["a"]).unwrap(), Some(forest(2, 2, 1)))
        .unwrap();
    assert_eq!(store.protected_tables(), vec!["guarded".to_string()]);
    let digests = store.digests(store.take_snapshot()).unwrap();
    assert_eq!(digests.tables.len(), 1);
    assert_eq!(digests.tables["guarded"].roots.len(), 2);
}

#[test]
fn scan_interval_is_closed_on_both_ends() {
    let store = new_store(None);
    for (i, k) in [b"a", b"b", b"c", b"d"].iter().enumerate() {
        commit_put(&store, i as u64 + 1, *k, b"v");
    }
    let snap = store.take_snapshot();
    let keys = |lo: &[u8], hi: Option<&[u8]>| {
        store
            .scan(snap, "t", lo, hi)
            .unwrap()
            .into_iter()
            .map(|r| r.key)
            .collect::<Vec<_>>()
    };
    assert_eq!(keys(b"b", Some(b"c")), vec![b"b".to_vec(), b"c".to_vec()]);
    assert_eq!(keys(b"b", None), vec![b"b".to_vec(), b"c".to_vec(), b"d".to_vec()]);
    assert_eq!(keys(b"", Some(b"a")), vec![b"a".to_vec()]);
    assert_eq!(keys(b"e", None), Vec::<Vec<u8>>::new());
}

#[test]
fn state_digest_is_hash_of_dump() {
    let store = new_store(None);
    commit_put(&store, 1, b"k", b"v");
    let snap = store.take_snapshot();
    assert_eq!(
        store.state_digest(snap),
        Hash256::of(store.canonical_dump(snap).as_bytes())
    );
}
