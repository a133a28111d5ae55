#ifndef SKILLKB_H
#define SKILLKB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SkbStatus {
  SKB_STATUS_OK = 0,
  SKB_STATUS_NULL_ARGUMENT = 1,
  SKB_STATUS_INVALID_UTF8 = 2,
  SKB_STATUS_NOT_FOUND = 3,
  SKB_STATUS_IO = 4,
  SKB_STATUS_FORMAT = 5,
  SKB_STATUS_VERSION = 6,
  SKB_STATUS_INVALID = 7,
  SKB_STATUS_GATEWAY = 8,
  SKB_STATUS_PANIC = 9,
} SkbStatus;

/**
 * Opaque library handle.
 */
typedef struct SkbLibrary SkbLibrary;

/**
 * Opaque retriever: an index over a library plus offline gateways.
 */
typedef struct SkbRetriever SkbRetriever;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library; valid until the next call on this thread.
 */
const char *skb_last_error(void);

/**
 * Free a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void skb_string_free(char *s);

/**
 * Load a library file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SkbStatus skb_library_load(const char *path, struct SkbLibrary **out);

/**
 * A new empty library.
 */
struct SkbLibrary *skb_library_new(void);

/**
 * # Safety
 * `lib` must come from this library and not have been freed. Null is ignored.
 */
void skb_library_free(struct SkbLibrary *lib);

/**
 * Number of skills, optionally at one level (0 planning, 1 functional,
 * 2 atomic, any other value for all levels). Returns -1 on a null handle.
 *
 * # Safety
 * `lib` must be a live handle or null.
 */
int skb_library_len(const struct SkbLibrary *lib, int level);

/**
 * Save in canonical form; `digest_out`, when non-null, receives the
 * sha256 of the written bytes.
 *
 * # Safety
 * `lib` must be a live handle; `path` a NUL-terminated string.
 */
enum SkbStatus skb_library_save(const struct SkbLibrary *lib, const char *path, char **digest_out);

/**
 * Canonical JSON text of the library.
 *
 * # Safety
 * `lib` must be a live handle; `out` writable.
 */
enum SkbStatus skb_library_to_json(const struct SkbLibrary *lib, char **out);

/**
 * Structural and static schema checks on every skill. `violations_out`
 * receives the count and `report_out`, when non-null, one line per
 * violation.
 *
 * # Safety
 * `lib` must be a live handle; `schemas_path` a NUL-terminated string.
 */
enum SkbStatus skb_library_validate(const struct SkbLibrary *lib,
                                    const char *schemas_path,
                                    size_t *violations_out,
                                    char **report_out);

/**
 * Build a retriever over a copy of `lib` using the offline mock chat
 * gateway (table at `mock_table_path`, or the scripted responder when
 * null) and the hash embedder.
 *
 * # Safety
 * `lib` must be a live handle; `mock_table_path` null or a NUL-terminated
 * string; `out` writable.
 */
enum SkbStatus skb_retriever_new(const struct SkbLibrary *lib,
                                 const char *mock_table_path,
                                 uint64_t seed,
                                 struct SkbRetriever **out);

/**
 * # Safety
 * `r` must come from this library and not have been freed. Null is ignored.
 */
void skb_retriever_free(struct SkbRetriever *r);

/**
 * Retrieve for `query`. `bundle_out` receives the bundle JSON
 * `{plan_steps, selected, trace}`; `prompt_out`, when non-null, the
 * assembled skill prompt.
 *
 * # Safety
 * `r` must be a live handle; `query` a NUL-terminated string.
 */
enum SkbStatus skb_retriever_retrieve(const struct SkbRetriever *r,
                                      const char *query,
                                      char **bundle_out,
                                      char **prompt_out);

/**
 * Run the command line with `argv` (program name first). The exit code
 * is returned through `exit_out` and the printed text through
 * `stdout_out`.
 *
 * # Safety
 * `argv` must hold `argc` NUL-terminated strings; outputs must be writable.
 */
enum SkbStatus skb_cli_run(int argc, const char *const *argv, int *exit_out, char **stdout_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLKB_H */
