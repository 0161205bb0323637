/* Exercises the generated header end to end: open a cluster, write and
 * read through the voted path, corrupt a replica, detect, repair, and
 * check the digests agree again. Exits nonzero on the first failure. */

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "wardendb.h"

#define CHECK(cond)                                                      \
    do {                                                                 \
        if (!(cond)) {                                                   \
            fprintf(stderr, "FAIL %s:%d: %s (last error: %s)\n",         \
                    __FILE__, __LINE__, #cond, wdb_last_error());        \
            return 1;                                                    \
        }                                                                \
    } while (0)

static const char *SCENARIO =
    "replicas = 3\n"
    "workers = 2\n"
    "signatures = null\n"
    "table = kv\n"
    "partitions = 4\n"
    "fanout = 4\n"
    "levels = 1\n"
    "rows = 120\n"
    "transactions = 0\n"
    "clients = 2\n"
    "seed = 3\n";

static WdbSlice arg(const char *s) {
    WdbSlice a;
    a.ptr = (const uint8_t *)s;
    a.len = strlen(s);
    return a;
}

int main(void) {
    CHECK(strlen(wdb_version()) > 0);

    WdbCluster *bad = NULL;
    CHECK(wdb_cluster_open("nonsense = 1", &bad) == WDB_STATUS_BAD_SCENARIO);
    CHECK(strlen(wdb_last_error()) > 0);

    WdbCluster *c = NULL;
    CHECK(wdb_cluster_open(SCENARIO, &c) == WDB_STATUS_OK);

    /* Write one field, then read it back through the voted path. */
    WdbSlice put_args[4];
    put_args[0] = arg("kv");
    put_args[1] = arg("user00000007");
    put_args[2] = arg("f0");
    put_args[3] = arg("from-c");
    uint64_t index = 0;
    CHECK(wdb_submit(c, 0, "update", put_args, 4, &index) == WDB_STATUS_OK);
    CHECK(wdb_await(c, index, 30000, NULL, NULL) == WDB_STATUS_OK);

    WdbSlice get_args[2];
    get_args[0] = arg("kv");
    get_args[1] = arg("user00000007");
    uint8_t *bytes = NULL;
    size_t len = 0;
    CHECK(wdb_submit(c, 1, "read", get_args, 2, &index) == WDB_STATUS_OK);
    CHECK(wdb_await(c, index, 30000, &bytes, &len) == WDB_STATUS_OK);
    CHECK(bytes != NULL && len >= strlen("from-c"));
    int found = 0;
    for (size_t i = 0; i + strlen("from-c") <= len; i++) {
        if (memcmp(bytes + i, "from-c", strlen("from-c")) == 0) {
            found = 1;
            break;
        }
    }
    CHECK(found);
    wdb_bytes_free(bytes, len);

    /* Damage one replica, catch it, repair it. */
    uint64_t damaged = 0;
    CHECK(wdb_inject_corruption(c, 2, "kv", 6, 2, false, &damaged) == WDB_STATUS_OK);
    CHECK(damaged == 6);

    char *round = NULL;
    CHECK(wdb_compare_states(c, &round) == WDB_STATUS_OK);
    CHECK(strstr(round, "\"healthy\":false") != NULL);
    CHECK(strstr(round, "\"flagged\":[2]") != NULL);
    wdb_string_free(round);

    char *reports = NULL;
    CHECK(wdb_recover(c, &reports) == WDB_STATUS_OK);
    CHECK(strstr(reports, "\"converged\":true") != NULL);
    wdb_string_free(reports);

    CHECK(wdb_wait_all(c, 30000) == WDB_STATUS_OK);
    char *d0 = NULL;
    char *d2 = NULL;
    CHECK(wdb_digest(c, 0, &d0) == WDB_STATUS_OK);
    CHECK(wdb_digest(c, 2, &d2) == WDB_STATUS_OK);
    CHECK(strcmp(d0, d2) == 0);
    wdb_string_free(d0);
    wdb_string_free(d2);

    wdb_cluster_close(c);
    printf("c smoke ok\n");
    return 0;
}
