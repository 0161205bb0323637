//! C bindings for driving a wardendb cluster from a non-Rust host.
//!
//! Every function returns a [`WdbStatus`]; anything but `WDB_STATUS_OK`
//! leaves a human-readable message behind [`wdb_last_error`]. Structured
//! results (detection rounds, repair reports, alerts) come back as JSON
//! strings with the same field names the scenario report uses, so a host
//! can share one decoder between embedded use and report files.
//!
//! Ownership rules are the usual ones: strings returned through `char**`
//! belong to the caller and must go back through [`wdb_string_free`], byte
//! buffers through [`wdb_bytes_free`], and a cluster handle through
//! [`wdb_cluster_close`]. Handles must not be shared across threads without
//! external locking; the error slot is per-thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

use wardendb::clientagg::Verdict;
use wardendb::harness::{self, Cluster, ScenarioConfig, WorkloadGen};
use wardendb::logsvc::LogBackend;
use wardendb::replica::SlotResult;

/// Result of every call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdbStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The scenario text failed to parse or validate.
    BadScenario = 3,
    /// The operation itself failed; see `wdb_last_error`.
    Runtime = 4,
    /// The cluster did not reach the requested point in time.
    Timeout = 5,
    /// The transaction was voted on but no result reached a majority.
    NoMajority = 6,
    /// The procedure executed and failed or was rejected on every replica.
    ProcedureFailed = 7,
    /// A scenario run finished but broke an agreement guarantee.
    Violation = 8,
    /// A panic was caught at the boundary; the handle may be unusable.
    Panic = 9,
}

/// A borrowed byte range, used to pass procedure arguments in.
#[repr(C)]
pub struct WdbSlice {
    pub ptr: *const u8,
    pub len: usize,
}

/// Opaque handle to a running cluster.
pub struct WdbCluster {
    _private: [u8; 0],
}

struct Handle {
    cluster: Option<Cluster>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn fail(status: WdbStatus, msg: impl std::fmt::Display) -> WdbStatus {
    set_error(msg);
    status
}

/// Run `body` with panics converted into a status, so unwinding never
/// crosses into the C caller.
fn guarded(body: impl FnOnce() -> WdbStatus) -> WdbStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(WdbStatus::Panic, format_args!("panic: {msg}"))
        }
    }
}

unsafe fn handle_mut<'a>(c: *mut WdbCluster) -> Option<&'a mut Handle> {
    (c as *mut Handle).as_mut()
}

/// Borrow the live cluster or report why it cannot be borrowed.
fn live(h: &Handle) -> Result<&Cluster, WdbStatus> {
    h.cluster
        .as_ref()
        .ok_or_else(|| fail(WdbStatus::Runtime, "cluster already shut down"))
}

unsafe fn utf8_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, WdbStatus> {
    if p.is_null() {
        return Err(fail(WdbStatus::NullArgument, format_args!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(WdbStatus::InvalidUtf8, format_args!("{what} is not UTF-8")))
}

fn give_string(out: *mut *mut c_char, text: String) {
    if out.is_null() {
        return;
    }
    let c = CString::new(text.replace('\0', " ")).unwrap_or_default();
    unsafe { *out = c.into_raw() };
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn wdb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn wdb_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned through a `char**` out-parameter.
#[no_mangle]
pub unsafe extern "C" fn wdb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Free a buffer returned through `wdb_await`.
#[no_mangle]
pub unsafe extern "C" fn wdb_bytes_free(p: *mut u8, len: usize) {
    if !p.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(p, len)));
    }
}

/// Build a cluster from scenario text (the same `key = value` format the
/// CLI reads), seed the configured rows, and wait until every replica has
/// executed the seed. The scenario's transaction count and fault script are
/// ignored; the caller drives the cluster instead.
#[no_mangle]
pub unsafe extern "C" fn wdb_cluster_open(
    scenario: *const c_char,
    out: *mut *mut WdbCluster,
) -> WdbStatus {
    guarded(|| {
        if out.is_null() {
            return fail(WdbStatus::NullArgument, "out is null");
        }
        let text = match utf8_arg(scenario, "scenario") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ScenarioConfig::parse(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(cfg) => cfg,
            Err(e) => return fail(WdbStatus::BadScenario, e),
        };
        let cluster = Cluster::build(&cfg);
        let gen = WorkloadGen::new(&cfg);
        for op in gen.seed_ops() {
            cluster.submit(&op);
        }
        if let Err(e) = cluster.wait_all(harness::PROGRESS_TIMEOUT) {
            return fail(WdbStatus::Timeout, e);
        }
        let boxed = Box::new(Handle { cluster: Some(cluster) });
        *out = Box::into_raw(boxed) as *mut WdbCluster;
        WdbStatus::Ok
    })
}

/// Stop every replica and free the handle. Safe to call with null.
#[no_mangle]
pub unsafe extern "C" fn wdb_cluster_close(c: *mut WdbCluster) {
    if c.is_null() {
        return;
    }
    let _ = guarded(|| {
        let mut boxed = Box::from_raw(c as *mut Handle);
        if let Some(cluster) = boxed.cluster.take() {
            cluster.shutdown();
        }
        WdbStatus::Ok
    });
}

/// Sign and append one procedure call as the given client. Returns the log
/// index the request landed on through `out_index`; pair with `wdb_await`
/// to read the voted result.
#[no_mangle]
pub unsafe extern "C" fn wdb_submit(
    c: *mut WdbCluster,
    client: u32,
    proc_name: *const c_char,
    args: *const WdbSlice,
    nargs: usize,
    out_index: *mut u64,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let name = match utf8_arg(proc_name, "proc_name") {
            Ok(n) => n,
            Err(s) => return s,
        };
        if args.is_null() && nargs > 0 {
            return fail(WdbStatus::NullArgument, "args is null with nargs > 0");
        }
        if client >= cluster.config.clients {
            return fail(
                WdbStatus::Runtime,
                format_args!("client {client} out of range, scenario has {}", cluster.config.clients),
            );
        }
        let mut owned = Vec::with_capacity(nargs);
        for i in 0..nargs {
            let slice = &*args.add(i);
            if slice.ptr.is_null() && slice.len > 0 {
                return fail(WdbStatus::NullArgument, format_args!("args[{i}].ptr is null"));
            }
            let bytes = if slice.len == 0 {
                Vec::new()
            } else {
                std::slice::from_raw_parts(slice.ptr, slice.len).to_vec()
            };
            owned.push(bytes);
        }
        let index = cluster.agent(client).submit(name, owned);
        if !out_index.is_null() {
            *out_index = index;
        }
        WdbStatus::Ok
    })
}

/// Wait until the cluster has voted on the slot at `index` and hand back the
/// majority result bytes. Returns `ProcedureFailed` when the transaction
/// itself failed or was rejected (message in `wdb_last_error`), and
/// `NoMajority` when the replicas could not agree on one result.
#[no_mangle]
pub unsafe extern "C" fn wdb_await(
    c: *mut WdbCluster,
    index: u64,
    timeout_ms: u64,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let timeout = Duration::from_millis(timeout_ms);
        let deadline = std::time::Instant::now() + timeout;
        match cluster.aggregator.wait_decided(index, timeout) {
            Verdict::Pending => {
                return fail(WdbStatus::Timeout, format_args!("slot {index} still undecided"))
            }
            Verdict::NoMajority => {
                return fail(
                    WdbStatus::NoMajority,
                    format_args!("slot {index} decided with no majority result"),
                )
            }
            Verdict::Decided(_) => {}
        }
        // The verdict can land before the leader's envelope carrying the
        // full result bytes does; poll for the body until the deadline.
        let result = loop {
            if let Some(r) = cluster.aggregator.result_of(index) {
                break r;
            }
            if std::time::Instant::now() >= deadline {
                return fail(
                    WdbStatus::Timeout,
                    format_args!("slot {index} decided but result bytes never arrived"),
                );
            }
            std::thread::sleep(Duration::from_millis(2));
        };
        match result {
            SlotResult::Ok(bytes) => {
                if !out_bytes.is_null() && !out_len.is_null() {
                    let boxed = bytes.into_boxed_slice();
                    *out_len = boxed.len();
                    *out_bytes = Box::into_raw(boxed) as *mut u8;
                } else if !out_len.is_null() {
                    *out_len = bytes.len();
                }
                WdbStatus::Ok
            }
            SlotResult::Failed(reason) => fail(WdbStatus::ProcedureFailed, reason),
            SlotResult::Rejected(reason) => fail(WdbStatus::ProcedureFailed, reason),
        }
    })
}

/// Block until every running replica has executed and voted on the whole
/// log as of the call.
#[no_mangle]
pub unsafe extern "C" fn wdb_wait_all(c: *mut WdbCluster, timeout_ms: u64) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match cluster.wait_all(Duration::from_millis(timeout_ms)) {
            Ok(_) => WdbStatus::Ok,
            Err(e) => fail(WdbStatus::Timeout, e),
        }
    })
}

/// Current length of the shared log.
#[no_mangle]
pub unsafe extern "C" fn wdb_log_len(c: *mut WdbCluster, out: *mut u64) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(WdbStatus::NullArgument, "out is null");
        }
        *out = cluster.log.len();
        WdbStatus::Ok
    })
}

/// Overwrite `rows` rows spread over `leaves` distinct forest leaves on one
/// replica, as a fault to exercise detection and repair. With `stealth` the
/// forest is left stale, hiding the damage from digest comparison until the
/// forest is rebuilt or a transaction reads a damaged row.
#[no_mangle]
pub unsafe extern "C" fn wdb_inject_corruption(
    c: *mut WdbCluster,
    replica: u32,
    table: *const c_char,
    rows: u64,
    leaves: u64,
    stealth: bool,
    out_rows: *mut u64,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let table = match utf8_arg(table, "table") {
            Ok(t) => t.to_string(),
            Err(s) => return s,
        };
        match cluster.inject_corruption(replica, &table, rows, leaves, stealth) {
            Ok(keys) => {
                if !out_rows.is_null() {
                    *out_rows = keys.len() as u64;
                }
                WdbStatus::Ok
            }
            Err(e) => fail(WdbStatus::Runtime, e),
        }
    })
}

/// Append a transaction whose result depends on the executing replica, as a
/// fault to force a no-majority slot. Returns its log index.
#[no_mangle]
pub unsafe extern "C" fn wdb_inject_nondet(c: *mut WdbCluster, out_index: *mut u64) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let index = cluster.inject_nondet();
        if !out_index.is_null() {
            *out_index = index;
        }
        WdbStatus::Ok
    })
}

fn round_json(round: &wardendb::recovery::DetectionRound) -> String {
    serde_json::json!({
        "mark": round.mark,
        "groups": round.groups.iter().map(|g| g.members.clone()).collect::<Vec<_>>(),
        "flagged": round.flagged,
        "unresponsive": round.unresponsive,
        "healthy": round.healthy(),
    })
    .to_string()
}

/// Write a comparison barrier into the log, gather every replica's state
/// digest at that exact position, and return the round as JSON:
/// `{"mark","groups","flagged","unresponsive","healthy"}`.
#[no_mangle]
pub unsafe extern "C" fn wdb_compare_states(
    c: *mut WdbCluster,
    out_json: *mut *mut c_char,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let round = cluster.supervisor.detection_round();
        give_string(out_json, round_json(&round));
        WdbStatus::Ok
    })
}

/// Run a comparison round and repair whatever it flags from the majority,
/// while the healthy replicas keep serving. Returns a JSON array of repair
/// reports; an empty array means the round found nothing to repair.
#[no_mangle]
pub unsafe extern "C" fn wdb_recover(c: *mut WdbCluster, out_json: *mut *mut c_char) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let round = cluster.supervisor.detection_round();
        if round.healthy() {
            give_string(out_json, "[]".to_string());
            return WdbStatus::Ok;
        }
        match cluster.supervisor.recover_after_detection(&round) {
            Ok(reports) => {
                let json = serde_json::to_string(&reports).unwrap_or_else(|_| "[]".into());
                let converged = reports.iter().all(|r| r.converged);
                give_string(out_json, json);
                if converged {
                    WdbStatus::Ok
                } else {
                    fail(WdbStatus::Runtime, "repair did not converge")
                }
            }
            Err(e) => fail(WdbStatus::Runtime, e),
        }
    })
}

/// Recover from a no-majority state: pick the largest digest group as the
/// reference, write a barrier declaring it, and rebuild everyone else from
/// it at that offset. Returns the repair reports as JSON.
#[no_mangle]
pub unsafe extern "C" fn wdb_sync_state(
    c: *mut WdbCluster,
    out_json: *mut *mut c_char,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match cluster.supervisor.sync_state_recovery() {
            Ok((_, reports)) => {
                let json = serde_json::to_string(&reports).unwrap_or_else(|_| "[]".into());
                give_string(out_json, json);
                WdbStatus::Ok
            }
            Err(e) => fail(WdbStatus::Runtime, e),
        }
    })
}

/// Rebuild one replica's forests from its actual rows, making any stealth
/// damage visible to the next comparison round. Returns the number of
/// rewritten forest nodes through `out_nodes`.
#[no_mangle]
pub unsafe extern "C" fn wdb_rebuild_forest(
    c: *mut WdbCluster,
    replica: u32,
    out_nodes: *mut u64,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        if !cluster.replicas.contains_key(&replica) {
            return fail(WdbStatus::Runtime, format_args!("no replica {replica}"));
        }
        match cluster.supervisor.rebuild_forest(replica) {
            Ok(nodes) => {
                if !out_nodes.is_null() {
                    *out_nodes = nodes;
                }
                WdbStatus::Ok
            }
            Err(e) => fail(WdbStatus::Runtime, e),
        }
    })
}

/// One replica's combined state digest over the whole log as of the call,
/// as a hex string. Healthy replicas return identical digests at the same
/// log position.
#[no_mangle]
pub unsafe extern "C" fn wdb_digest(
    c: *mut WdbCluster,
    replica: u32,
    out_hex: *mut *mut c_char,
) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        if out_hex.is_null() {
            return fail(WdbStatus::NullArgument, "out_hex is null");
        }
        if !cluster.replicas.contains_key(&replica) {
            return fail(WdbStatus::Runtime, format_args!("no replica {replica}"));
        }
        let at = cluster.log.len();
        match cluster.digest_at(replica, at) {
            Ok(digest) => {
                give_string(out_hex, digest.to_hex());
                WdbStatus::Ok
            }
            Err(e) => fail(WdbStatus::Runtime, e),
        }
    })
}

/// Every alert the vote aggregator has raised so far, as a JSON array of
/// `{"index","reason","divergent"}` objects sorted by slot.
#[no_mangle]
pub unsafe extern "C" fn wdb_alerts(c: *mut WdbCluster, out_json: *mut *mut c_char) -> WdbStatus {
    guarded(|| {
        let Some(h) = handle_mut(c) else {
            return fail(WdbStatus::NullArgument, "cluster is null");
        };
        let cluster = match live(h) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let mut alerts = cluster.aggregator.alerts();
        alerts.sort_by_key(|a| (a.index, a.reason));
        let items: Vec<serde_json::Value> = alerts
            .iter()
            .map(|a| {
                serde_json::json!({
                    "index": a.index,
                    "reason": a.reason.name(),
                    "divergent": a.divergent,
                })
            })
            .collect();
        give_string(out_json, serde_json::Value::Array(items).to_string());
        WdbStatus::Ok
    })
}

/// Parse scenario text, run the whole workload and fault script, and return
/// the full report as JSON lines. `Violation` means the run finished but an
/// agreement guarantee broke; the report is still returned so the caller
/// can see where.
#[no_mangle]
pub unsafe extern "C" fn wdb_run_scenario(
    scenario: *const c_char,
    out_report: *mut *mut c_char,
) -> WdbStatus {
    guarded(|| {
        let text = match utf8_arg(scenario, "scenario") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ScenarioConfig::parse(text) {
            Ok(cfg) => cfg,
            Err(e) => return fail(WdbStatus::BadScenario, e),
        };
        match harness::run_scenario(&cfg) {
            Ok(outcome) => {
                give_string(out_report, outcome.report.to_jsonl());
                if outcome.violated() {
                    fail(
                        WdbStatus::Violation,
                        format_args!(
                            "ok={} agreement={} unrepaired={}",
                            outcome.ok, outcome.agreement, outcome.unrepaired
                        ),
                    )
                } else {
                    WdbStatus::Ok
                }
            }
            Err(e) => fail(WdbStatus::Runtime, e),
        }
    })
}
