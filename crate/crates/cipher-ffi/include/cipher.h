/* C ABI for the cipher synthesis library.
 *
 * Conventions: every fallible function returns an int32_t status code
 * (CIPHER_OK on success) and records a message for the most recent
 * failure on the current thread, readable via cipher_last_error().
 * String outputs fill a caller-supplied buffer and report the size
 * they need (including the NUL terminator) through a `written`
 * out-parameter; pass a NULL buffer to query the size first.
 *
 * This header is maintained by hand and checked against the Rust
 * exports by the crate's test suite.
 */

#ifndef CIPHER_H
#define CIPHER_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define CIPHER_OK 0
/* Invalid input: malformed JSON, unknown attributes, bad parameters. */
#define CIPHER_ERR_INVALID 2
/* Numerical failure inside the pipeline. */
#define CIPHER_ERR_NUMERICAL 3
/* API misuse: null pointer where one is not allowed, bad index. */
#define CIPHER_ERR_USAGE 4
/* The caller's buffer is too small; retry with the reported size. */
#define CIPHER_ERR_BUFFER 5
/* A panic was caught at the boundary. */
#define CIPHER_ERR_PANIC 6

/* Opaque synthesis result: replicate CSVs plus the report JSON. */
typedef struct cipher_synthesis cipher_synthesis;

/* Library version as a static NUL-terminated string. */
const char *cipher_version(void);

/* Message of the most recent failure on this thread, or an empty
 * string. Valid until the next failing call on the same thread. */
const char *cipher_last_error(void);

/* Runs the synthesize pipeline from a JSON config document (the same
 * one the CLI's --config flag accepts: data/schema paths, epsilon,
 * method, and so on). On success *out receives a handle the caller
 * must release with cipher_synthesis_free(). */
int32_t cipher_synthesize(const char *config_json, cipher_synthesis **out);

/* Number of replicates in the handle; 0 for a NULL handle. */
size_t cipher_synthesis_replicate_count(const cipher_synthesis *handle);

/* Copies the report JSON into buf (see the sizing convention). */
int32_t cipher_synthesis_report(const cipher_synthesis *handle, char *buf,
                                size_t len, size_t *written);

/* Copies replicate `index` (0-based) as CSV into buf. */
int32_t cipher_synthesis_replicate_csv(const cipher_synthesis *handle,
                                       size_t index, char *buf, size_t len,
                                       size_t *written);

/* Releases a handle. NULL is a no-op. */
void cipher_synthesis_free(cipher_synthesis *handle);

/* Storage calculator: counts the tables and total cells a selection
 * stores over the given schema JSON. kway 0 means the single full
 * table; kway k > 0 means all k-way marginal tables. The cell total is
 * written as a decimal string, since it can exceed 64 bits. */
int32_t cipher_cellcount(const char *schema_json, uint32_t kway,
                         uint64_t *tables_out, char *cells_buf,
                         size_t cells_len, size_t *cells_written);

#ifdef __cplusplus
}
#endif

#endif /* CIPHER_H */
