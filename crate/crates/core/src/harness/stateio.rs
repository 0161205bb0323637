//! Saving and loading replica state as files.
//!
//! A state directory holds one canonical dump per replica plus the shared
//! log, which makes cluster states portable: dump a run, inspect it, damage
//! it, verify it, or repair it offline. Foreign-key declarations are not
//! part of a dump; a loaded store carries rows, forests, and schemas only.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::logsvc::{InProcessLog, LogBackend};
use crate::merkle::diff_leaves;
use crate::store::{parse_dump, Snapshot, SnapshotNodeSource, Store};
use crate::ReplicaId;

use super::cluster::Cluster;
use super::HarnessError;

pub fn state_file(dir: &Path, id: ReplicaId) -> PathBuf {
    dir.join(format!("replica-{id}.state"))
}

pub fn log_file(dir: &Path) -> PathBuf {
    dir.join("log.txt")
}

/// Rebuild a store from a canonical dump. The loaded store reproduces the
/// dump byte for byte, including any node rows that no longer match the
/// data they claim to cover.
pub fn load_state(text: &str) -> Result<Store, HarnessError> {
    let tables = parse_dump(text)?;
    let store = Store::new();
    for t in &tables {
        if t.name.starts_with("~forest~") {
            continue;
        }
        let fields: Vec<&str> = t.fields.iter().map(String::as_str).collect();
        let schema = crate::store::TableSchema::new(&t.name, &fields)?;
        store.create_system_table(schema, t.forest)?;
        store.bootstrap_rows(&t.name, &t.rows)?;
    }
    for t in &tables {
        if !t.name.starts_with("~forest~") {
            continue;
        }
        for row in &t.rows {
            store.tamper_row(&t.name, &row.key, Some(row.clone()), false)?;
        }
    }
    let reloaded = store.canonical_dump(store.take_snapshot());
    if reloaded != text {
        return Err(HarnessError::Invariant(
            "loaded state does not reproduce its dump".into(),
        ));
    }
    Ok(store)
}

/// Write every replica's state at a common log offset, plus the log itself.
pub fn save_cluster(cluster: &Cluster, dir: &Path) -> Result<u64, HarnessError> {
    fs::create_dir_all(dir)?;
    let offset = cluster.log.len();
    for (id, replica) in &cluster.replicas {
        let dump = replica.store().canonical_dump(Snapshot::at(offset));
        fs::write(state_file(dir, *id), dump)?;
    }
    let mut log_out = fs::File::create(log_file(dir))?;
    cluster.log.dump_to(&mut log_out)?;
    Ok(offset)
}

/// Load every `replica-<id>.state` in a directory.
pub fn load_dir(dir: &Path) -> Result<BTreeMap<ReplicaId, Store>, HarnessError> {
    let mut stores = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(id) = name
            .strip_prefix("replica-")
            .and_then(|rest| rest.strip_suffix(".state"))
            .and_then(|id| id.parse::<ReplicaId>().ok())
        else {
            continue;
        };
        let text = fs::read_to_string(&path)?;
        stores.insert(id, load_state(&text)?);
    }
    if stores.is_empty() {
        return Err(HarnessError::Invariant(format!(
            "no replica-<id>.state files under {}",
            dir.display()
        )));
    }
    Ok(stores)
}

pub fn load_log(dir: &Path) -> Result<InProcessLog, HarnessError> {
    let file = fs::File::open(log_file(dir))?;
    Ok(InProcessLog::load_from(BufReader::new(file))?)
}

/// Check each store's forests against its rows. Returns the tables whose
/// stored node hashes disagree with a recomputation, per replica; damage
/// that skipped forest maintenance shows up here.
pub fn verify_forests(
    stores: &BTreeMap<ReplicaId, Store>,
) -> Result<BTreeMap<ReplicaId, Vec<String>>, HarnessError> {
    let mut bad = BTreeMap::new();
    for (id, store) in stores {
        let snap = store.take_snapshot();
        let mut tables = Vec::new();
        for table in store.protected_tables() {
            let stored = store.forest_nodes(snap, &table)?;
            let expected = store.recompute_forest(snap, &table)?;
            if stored != expected {
                tables.push(table);
            }
        }
        if !tables.is_empty() {
            bad.insert(*id, tables);
        }
    }
    Ok(bad)
}

/// Digest groups over loaded stores, majority first. Same ordering rule as
/// live detection: larger group wins, ties toward the lowest replica id.
pub fn digest_groups(
    stores: &BTreeMap<ReplicaId, Store>,
) -> Result<Vec<Vec<ReplicaId>>, HarnessError> {
    let mut by_digest: BTreeMap<String, Vec<ReplicaId>> = BTreeMap::new();
    for (id, store) in stores {
        let snap = store.take_snapshot();
        by_digest.entry(store.digests(snap)?.combined().to_hex()).or_default().push(*id);
    }
    let mut groups: Vec<Vec<ReplicaId>> = by_digest.into_values().collect();
    groups.sort_by_key(|g| (std::cmp::Reverse(g.len()), g[0]));
    Ok(groups)
}

#[derive(Debug)]
pub struct OfflineRepair {
    pub reference: ReplicaId,
    /// (replica, rows copied) for each store brought back in line.
    pub repaired: Vec<(ReplicaId, u64)>,
}

/// Repair divergent loaded stores from the majority group's first member,
/// leaf diff first, row copies after. Only forested tables participate;
/// a store with damage in an unprotected table cannot be diffed.
pub fn offline_repair(
    stores: &BTreeMap<ReplicaId, Store>,
) -> Result<OfflineRepair, HarnessError> {
    let groups = digest_groups(stores)?;
    let majority = stores.len() / 2 + 1;
    if groups[0].len() < majority {
        return Err(HarnessError::Invariant(format!(
            "largest digest group holds {} of {}, no majority to repair from",
            groups[0].len(),
            stores.len()
        )));
    }
    let reference = groups[0][0];
    let healthy: std::collections::BTreeSet<ReplicaId> = groups[0].iter().copied().collect();
    let mut repaired = Vec::new();
    for (id, store) in stores {
        if healthy.contains(id) {
            continue;
        }
        let rows = repair_store(store, &stores[&reference])?;
        repaired.push((*id, rows));
    }
    Ok(OfflineRepair { reference, repaired })
}

fn repair_store(target: &Store, reference: &Store) -> Result<u64, HarnessError> {
    let t_snap = target.take_snapshot();
    let r_snap = reference.take_snapshot();
    let mut copied = 0;
    for table in reference.protected_tables() {
        let config = reference
            .forest_config(&table)?
            .expect("protected tables have a forest");
        let mut local = SnapshotNodeSource::new(target, t_snap, &table);
        let mut remote = SnapshotNodeSource::new(reference, r_snap, &table);
        let leaves = diff_leaves(&config, &mut local, &mut remote)?;
        for leaf in leaves {
            let mut keys: std::collections::BTreeSet<Vec<u8>> = Default::default();
            keys.extend(target.rows_for_leaf(t_snap, &table, leaf)?);
            keys.extend(reference.rows_for_leaf(r_snap, &table, leaf)?);
            for key in keys {
                let want = reference.get(r_snap, &table, &key)?;
                let have = target.get(t_snap, &table, &key)?;
                let differs = match (&want, &have) {
                    (Some(w), Some(h)) => w.canonical_bytes() != h.canonical_bytes(),
                    (None, None) => false,
                    _ => true,
                };
                if differs {
                    target.repair_row(&table, &key, want)?;
                    copied += 1;
                }
            }
        }
    }
    let fixed = target.digests(target.take_snapshot())?.combined();
    let goal = reference.digests(r_snap)?.combined();
    if fixed != goal {
        return Err(HarnessError::Invariant(
            "offline repair did not converge on the reference digest".into(),
        ));
    }
    Ok(copied)
}
