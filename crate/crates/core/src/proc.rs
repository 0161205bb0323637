//! Stored procedures: the only way application logic touches data.
//!
//! Every transaction names a registered procedure plus byte-string
//! arguments. Procedures must be deterministic functions of their arguments
//! and the reads they perform through [`TxCtx`]; the registry is fixed at
//! startup and identical on every replica, so a given log is replayable
//! bit-for-bit.
//!
//! The builtins cover the usual key-value workload shapes: point read,
//! insert, field update, read-modify-write, delete, and short range scan.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::Enc;
use crate::store::tx::{TxCtx, TxFailure};
use crate::store::Row;

/// A deterministic transaction body. `execute` sees buffered writes through
/// the context and reports business failures as `Err`; either way the
/// replica commits the slot (failures just commit nothing from the body).
pub trait Procedure: Send + Sync {
    fn name(&self) -> &str;
    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure>;
}

/// Name-to-procedure map, frozen once built.
#[derive(Default)]
pub struct ProcRegistry {
    procs: BTreeMap<String, Arc<dyn Procedure>>,
}

impl ProcRegistry {
    pub fn new() -> ProcRegistry {
        Self::default()
    }

    /// Registry with the six builtin procedures.
    pub fn with_builtins() -> ProcRegistry {
        let mut r = ProcRegistry::new();
        r.register(Arc::new(ReadProc));
        r.register(Arc::new(InsertProc));
        r.register(Arc::new(UpdateProc));
        r.register(Arc::new(RmwProc));
        r.register(Arc::new(DeleteProc));
        r.register(Arc::new(ScanProc));
        r
    }

    pub fn register(&mut self, proc: Arc<dyn Procedure>) {
        self.procs.insert(proc.name().to_string(), proc);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Procedure>> {
        self.procs.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.procs.keys().cloned().collect()
    }
}

fn arg_str<'a>(args: &'a [Vec<u8>], i: usize, what: &str) -> Result<&'a str, TxFailure> {
    let raw = args
        .get(i)
        .ok_or_else(|| TxFailure::new(format!("missing argument {i} ({what})")))?;
    std::str::from_utf8(raw)
        .map_err(|_| TxFailure::new(format!("argument {i} ({what}) is not utf-8")))
}

fn arg_bytes<'a>(args: &'a [Vec<u8>], i: usize, what: &str) -> Result<&'a [u8], TxFailure> {
    args.get(i)
        .map(Vec::as_slice)
        .ok_or_else(|| TxFailure::new(format!("missing argument {i} ({what})")))
}

fn encode_row(row: &Row) -> Vec<u8> {
    row.canonical_bytes()
}

/// `read(table, key)`: returns the row encoding, or a tagged absence.
struct ReadProc;

impl Procedure for ReadProc {
    fn name(&self) -> &str {
        "read"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let table = arg_str(args, 0, "table")?;
        let key = arg_bytes(args, 1, "key")?;
        let row = ctx.get(table, key)?;
        let mut e = Enc::new();
        e.opt_bytes(row.map(|r| encode_row(&r)).as_deref());
        Ok(e.finish())
    }
}

/// `insert(table, key, v0, v1, ...)`: writes a full row, one value per
/// schema field in order. Overwrites silently, like a key-value put.
struct InsertProc;

impl Procedure for InsertProc {
    fn name(&self) -> &str {
        "insert"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let table = arg_str(args, 0, "table")?.to_string();
        let key = arg_bytes(args, 1, "key")?.to_vec();
        let schema = ctx.schema(&table)?;
        let values = &args[2..];
        if values.len() != schema.fields.len() {
            return Err(TxFailure::new(format!(
                "insert into {} expects {} values, got {}",
                table,
                schema.fields.len(),
                values.len()
            )));
        }
        let fields: Vec<(&str, &[u8])> = schema
            .fields
            .iter()
            .map(String::as_str)
            .zip(values.iter().map(Vec::as_slice))
            .collect();
        ctx.put(&table, &key, &fields)?;
        Ok(b"ok".to_vec())
    }
}

/// `update(table, key, field, value)`: rewrites one field of an existing
/// row. Fails deterministically if the row is absent.
struct UpdateProc;

impl Procedure for UpdateProc {
    fn name(&self) -> &str {
        "update"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let table = arg_str(args, 0, "table")?.to_string();
        let key = arg_bytes(args, 1, "key")?.to_vec();
        let field = arg_str(args, 2, "field")?.to_string();
        let value = arg_bytes(args, 3, "value")?.to_vec();

        let Some(row) = ctx.get(&table, &key)? else {
            return Err(TxFailure::new(format!(
                "update of missing row in {table}"
            )));
        };
        let mut fields = row.fields().to_vec();
        let slot = fields
            .iter_mut()
            .find(|(f, _)| *f == field)
            .ok_or_else(|| TxFailure::new(format!("no field {field} in {table}")))?;
        slot.1 = value;
        let refs: Vec<(&str, &[u8])> =
            fields.iter().map(|(f, v)| (f.as_str(), v.as_slice())).collect();
        ctx.put(&table, &key, &refs)?;
        Ok(b"ok".to_vec())
    }
}

/// `rmw(table, key, field, value)`: like update but returns the prior row
/// encoding, so the caller observes what it replaced.
struct RmwProc;

impl Procedure for RmwProc {
    fn name(&self) -> &str {
        "rmw"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let table = arg_str(args, 0, "table")?.to_string();
        let key = arg_bytes(args, 1, "key")?.to_vec();
        let field = arg_str(args, 2, "field")?.to_string();
        let value = arg_bytes(args, 3, "value")?.to_vec();

        let Some(row) = ctx.get(&table, &key)? else {
            return Err(TxFailure::new(format!("rmw of missing row in {table}")));
        };
        let before = encode_row(&row);
        let mut fields = row.fields().to_vec();
        let slot = fields
            .iter_mut()
            .find(|(f, _)| *f == field)
            .ok_or_else(|| TxFailure::new(format!("no field {field} in {table}")))?;
        slot.1 = value;
        let refs: Vec<(&str, &[u8])> =
            fields.iter().map(|(f, v)| (f.as_str(), v.as_slice())).collect();
        ctx.put(&table, &key, &refs)?;
        Ok(before)
    }
}

/// `delete(table, key)`: blind delete; succeeds whether or not the row
/// existed (like a key-value delete).
struct DeleteProc;

impl Procedure for DeleteProc {
    fn name(&self) -> &str {
        "delete"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let table = arg_str(args, 0, "table")?.to_string();
        let key = arg_bytes(args, 1, "key")?;
        ctx.delete(&table, key)?;
        Ok(b"ok".to_vec())
    }
}

/// `scan(table, start, count)`: up to `count` rows from `start` in key
/// order. `count` is decimal ascii to keep scenario files writable by hand.
struct ScanProc;

impl Procedure for ScanProc {
    fn name(&self) -> &str {
        "scan"
    }

    fn execute(&self, ctx: &mut TxCtx<'_>, args: &[Vec<u8>]) -> Result<Vec<u8>, TxFailure> {
        let table = arg_str(args, 0, "table")?.to_string();
        let start = arg_bytes(args, 1, "start")?.to_vec();
        let count: usize = arg_str(args, 2, "count")?
            .parse()
            .map_err(|_| TxFailure::new("scan count is not a number"))?;
        let rows = ctx.scan_first_n(&table, &start, count)?;
        let mut e = Enc::new();
        e.list(&rows, |e, r| {
            e.bytes(&encode_row(r));
        });
        Ok(e.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merkle::ForestConfig;
    use crate::store::{Snapshot, Store, TableSchema};

    fn store_with_table() -> Store {
        let store = Store::new();
        store
            .create_table(
                TableSchema::new("kv", &["f0", "f1"]).unwrap(),
                Some(ForestConfig { partitions: 2, fanout: 2, levels: 2 }),
            )
            .unwrap();
        store
    }

    fn run_proc(
        store: &Store,
        tx: u64,
        proc: &dyn Procedure,
        args: &[&[u8]],
    ) -> Result<Vec<u8>, TxFailure> {
        let snap = store.take_snapshot();
        let mut ctx = TxCtx::new(store, snap);
        let args: Vec<Vec<u8>> = args.iter().map(|a| a.to_vec()).collect();
        let out = proc.execute(&mut ctx, &args);
        if out.is_ok() {
            let (_, writes) = ctx.finish();
            store.commit_writes(tx, &writes).unwrap();
        }
        out
    }

    #[test]
    fn builtins_cover_crud_and_scan() {
        let store = store_with_table();
        run_proc(&store, 1, &InsertProc, &[b"kv", b"a", b"1", b"x"]).unwrap();
        run_proc(&store, 2, &InsertProc, &[b"kv", b"b", b"2", b"y"]).unwrap();

        let read = run_proc(&store, 3, &ReadProc, &[b"kv", b"a"]).unwrap();
        let row = Row::normalized(
            &store.schema("kv").unwrap(),
            b"a",
            &[("f0", b"1"), ("f1", b"x")],
        )
        .unwrap();
        let mut e = Enc::new();
        e.opt_bytes(Some(&row.canonical_bytes()));
        assert_eq!(read, e.finish());

        let before = run_proc(&store, 4, &RmwProc, &[b"kv", b"a", b"f1", b"z"]).unwrap();
        assert_eq!(before, row.canonical_bytes());
        let snap = store.take_snapshot();
        let after = store.get(snap, "kv", b"a").unwrap().unwrap();
        assert_eq!(after.get("f1"), Some(&b"z"[..]));

        run_proc(&store, 5, &UpdateProc, &[b"kv", b"b", b"f0", b"9"]).unwrap();
        let scanned = run_proc(&store, 6, &ScanProc, &[b"kv", b"a", b"10"]).unwrap();
        assert!(!scanned.is_empty());

        run_proc(&store, 7, &DeleteProc, &[b"kv", b"a"]).unwrap();
        let snap = store.take_snapshot();
        assert!(store.get(snap, "kv", b"a").unwrap().is_none());
        assert_eq!(snap, Snapshot::at(7));
    }

    #[test]
    fn failures_are_deterministic_messages() {
        let store = store_with_table();
        let err = run_proc(&store, 1, &UpdateProc, &[b"kv", b"nope", b"f0", b"v"]).unwrap_err();
        assert_eq!(err.reason, "update of missing row in kv");

        let err = run_proc(&store, 1, &InsertProc, &[b"kv", b"a", b"only-one"]).unwrap_err();
        assert_eq!(err.reason, "insert into kv expects 2 values, got 1");

        let err = run_proc(&store, 1, &ReadProc, &[b"kv"]).unwrap_err();
        assert_eq!(err.reason, "missing argument 1 (key)");

        let err = run_proc(&store, 1, &ScanProc, &[b"kv", b"a", b"lots"]).unwrap_err();
        assert_eq!(err.reason, "scan count is not a number");
    }

    #[test]
    fn registry_lookup_and_names() {
        let r = ProcRegistry::with_builtins();
        assert!(r.get("read").is_some());
        assert!(r.get("rmw").is_some());
        assert!(r.get("nonsense").is_none());
        assert_eq!(
            r.names(),
            vec!["delete", "insert", "read", "rmw", "scan", "update"]
        );
    }
}
