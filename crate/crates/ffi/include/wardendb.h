#ifndef WARDENDB_H
#define WARDENDB_H

/* Generated by cbindgen from wardendb-ffi; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call in this interface.
typedef enum WdbStatus {
  // The call succeeded.
  WDB_STATUS_OK = 0,
  // A required pointer argument was null.
  WDB_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  WDB_STATUS_INVALID_UTF8 = 2,
  // The scenario text failed to parse or validate.
  WDB_STATUS_BAD_SCENARIO = 3,
  // The operation itself failed; see `wdb_last_error`.
  WDB_STATUS_RUNTIME = 4,
  // The cluster did not reach the requested point in time.
  WDB_STATUS_TIMEOUT = 5,
  // The transaction was voted on but no result reached a majority.
  WDB_STATUS_NO_MAJORITY = 6,
  // The procedure executed and failed or was rejected on every replica.
  WDB_STATUS_PROCEDURE_FAILED = 7,
  // A scenario run finished but broke an agreement guarantee.
  WDB_STATUS_VIOLATION = 8,
  // A panic was caught at the boundary; the handle may be unusable.
  WDB_STATUS_PANIC = 9,
} WdbStatus;

// Opaque handle to a running cluster.
typedef struct WdbCluster WdbCluster;

// A borrowed byte range, used to pass procedure arguments in.
typedef struct WdbSlice {
  const uint8_t *ptr;
  size_t len;
} WdbSlice;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *wdb_version(void);

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next failing call on the same thread; do not free.
const char *wdb_last_error(void);

// Free a string returned through a `char**` out-parameter.
void wdb_string_free(char *s);

// Free a buffer returned through `wdb_await`.
void wdb_bytes_free(uint8_t *p, size_t len);

// Build a cluster from scenario text (the same `key = value` format the
// CLI reads), seed the configured rows, and wait until every replica has
// executed the seed. The scenario's transaction count and fault script are
// ignored; the caller drives the cluster instead.
enum WdbStatus wdb_cluster_open(const char *scenario, struct WdbCluster **out);

// Stop every replica and free the handle. Safe to call with null.
void wdb_cluster_close(struct WdbCluster *c);

// Sign and append one procedure call as the given client. Returns the log
// index the request landed on through `out_index`; pair with `wdb_await`
// to read the voted result.
enum WdbStatus wdb_submit(struct WdbCluster *c,
                          uint32_t client,
                          const char *proc_name,
                          const struct WdbSlice *args,
                          size_t nargs,
                          uint64_t *out_index);

// Wait until the cluster has voted on the slot at `index` and hand back the
// majority result bytes. Returns `ProcedureFailed` when the transaction
// itself failed or was rejected (message in `wdb_last_error`), and
// `NoMajority` when the replicas could not agree on one result.
enum WdbStatus wdb_await(struct WdbCluster *c,
                         uint64_t index,
                         uint64_t timeout_ms,
                         uint8_t **out_bytes,
                         size_t *out_len);

// Block until every running replica has executed and voted on the whole
// log as of the call.
enum WdbStatus wdb_wait_all(struct WdbCluster *c, uint64_t timeout_ms);

// Current length of the shared log.
enum WdbStatus wdb_log_len(struct WdbCluster *c, uint64_t *out);

// Overwrite `rows` rows spread over `leaves` distinct forest leaves on one
// replica, as a fault to exercise detection and repair. With `stealth` the
// forest is left stale, hiding the damage from digest comparison until the
// forest is rebuilt or a transaction reads a damaged row.
enum WdbStatus wdb_inject_corruption(struct WdbCluster *c,
                                     uint32_t replica,
                                     const char *table,
                                     uint64_t rows,
                                     uint64_t leaves,
                                     bool stealth,
                                     uint64_t *out_rows);

// Append a transaction whose result depends on the executing replica, as a
// fault to force a no-majority slot. Returns its log index.
enum WdbStatus wdb_inject_nondet(struct WdbCluster *c, uint64_t *out_index);

// Write a comparison barrier into the log, gather every replica's state
// digest at that exact position, and return the round as JSON:
// `{"mark","groups","flagged","unresponsive","healthy"}`.
enum WdbStatus wdb_compare_states(struct WdbCluster *c, char **out_json);

// Run a comparison round and repair whatever it flags from the majority,
// while the healthy replicas keep serving. Returns a JSON array of repair
// reports; an empty array means the round found nothing to repair.
enum WdbStatus wdb_recover(struct WdbCluster *c, char **out_json);

// Recover from a no-majority state: pick the largest digest group as the
// reference, write a barrier declaring it, and rebuild everyone else from
// it at that offset. Returns the repair reports as JSON.
enum WdbStatus wdb_sync_state(struct WdbCluster *c, char **out_json);

// Rebuild one replica's forests from its actual rows, making any stealth
// damage visible to the next comparison round. Returns the number of
// rewritten forest nodes through `out_nodes`.
enum WdbStatus wdb_rebuild_forest(struct WdbCluster *c, uint32_t replica, uint64_t *out_nodes);

// One replica's combined state digest over the whole log as of the call,
// as a hex string. Healthy replicas return identical digests at the same
// log position.
enum WdbStatus wdb_digest(struct WdbCluster *c, uint32_t replica, char **out_hex);

// Every alert the vote aggregator has raised so far, as a JSON array of
// `{"index","reason","divergent"}` objects sorted by slot.
enum WdbStatus wdb_alerts(struct WdbCluster *c, char **out_json);

// Parse scenario text, run the whole workload and fault script, and return
// the full report as JSON lines. `Violation` means the run finished but an
// agreement guarantee broke; the report is still returned so the caller
// can see where.
enum WdbStatus wdb_run_scenario(const char *scenario, char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WARDENDB_H */
