#ifndef CAUSALID_H
#define CAUSALID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CidStatus {
  CID_STATUS_OK = 0,
  CID_STATUS_NULL_POINTER = 1,
  CID_STATUS_INVALID_UTF8 = 2,
  CID_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Malformed or inconsistent scenario / graph.
   */
  CID_STATUS_VALIDATION = 4,
  /**
   * The identification pipeline failed.
   */
  CID_STATUS_RUNTIME = 5,
  CID_STATUS_PANIC = 6,
} CidStatus;

/**
 * Result of `cid_identify`.
 */
typedef struct CidReport CidReport;

/**
 * A validated scenario.
 */
typedef struct CidScenario CidScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses and validates a scenario JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum CidStatus cid_scenario_from_json(const char *json, struct CidScenario **out);

/**
 * A built-in scenario (`appendix_c`, `kinematic_robot`, `integrator1`, `bilinear2`).
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum CidStatus cid_scenario_builtin(const char *name,
                                    uint64_t master_seed,
                                    struct CidScenario **out);

/**
 * # Safety
 * `scenario` must come from this library and not be used concurrently.
 */
enum CidStatus cid_scenario_set_seed(struct CidScenario *scenario, uint64_t master_seed);

/**
 * # Safety
 * `scenario` must come from this library (or be null) and not be used afterwards.
 */
void cid_scenario_free(struct CidScenario *scenario);

/**
 * Runs identification. Pairs that could not be tested are reported through
 * `cid_report_failure_count`, not through the status.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum CidStatus cid_identify(const struct CidScenario *scenario, struct CidReport **out);

/**
 * # Safety
 * `report` must come from this library (or be null) and not be used afterwards.
 */
void cid_report_free(struct CidReport *report);

/**
 * The graph as JSON (same document as `graph.json`). Free with `cid_string_free`.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum CidStatus cid_report_graph_json(const struct CidReport *report, char **out);

/**
 * Whether `source -> x_target` is causal. Indices are zero-based; the source
 * is input `source` when `source_is_input` is true, else state `source`.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum CidStatus cid_report_is_causal(const struct CidReport *report,
                                    bool source_is_input,
                                    size_t source,
                                    size_t target,
                                    bool *out);

/**
 * Number of sources whose tests could not be completed.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum CidStatus cid_report_failure_count(const struct CidReport *report, size_t *out);

/**
 * Compares a graph JSON document with the ground truth of an LTI scenario.
 * `mismatches` receives the number of differing edges.
 *
 * # Safety
 * `scenario` must be a live handle, `graph_json` NUL-terminated, `mismatches` writable.
 */
enum CidStatus cid_verify(const struct CidScenario *scenario,
                          const char *graph_json,
                          size_t *mismatches);

/**
 * Unbiased MMD² with a Gaussian kernel between two row-major `m x d` sample
 * sets whose rows are paired by index.
 *
 * # Safety
 * `x` and `y` must point to `m * d` doubles; `out` must be writable.
 */
enum CidStatus cid_mmd2_unbiased(const double *x,
                                 const double *y,
                                 size_t m,
                                 size_t d,
                                 double lengthscale,
                                 double *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *cid_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library (or be null) and not be used afterwards.
 */
void cid_string_free(char *s);

/**
 * Library version, static storage.
 */
const char *cid_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAUSALID_H */
