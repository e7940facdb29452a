#ifndef TAPER_FFI_H
#define TAPER_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible entry point.
 */
typedef enum TaperStatus {
  TaperStatus_Ok = 0,
  TaperStatus_NullArgument = 1,
  TaperStatus_InvalidUtf8 = 2,
  TaperStatus_ParseError = 3,
  TaperStatus_InvalidArgument = 4,
  TaperStatus_IoError = 5,
  TaperStatus_SimulationError = 6,
} TaperStatus;

/**
 * Opaque trace handle.
 */
typedef struct TaperTrace TaperTrace;

/**
 * Simulation parameters. `policy` is one of "off", "cap2", "cap5",
 * "eager", "taper"; `rho` is ignored unless the policy is "taper".
 */
typedef struct TaperSimParams {
  double slo_tpot_ms;
  double rho;
  uint64_t seed;
  uint64_t kv_capacity_blocks;
  uint32_t kv_block_size;
  /**
   * Ground-truth latency coefficients and noise.
   */
  double gt_a;
  double gt_b;
  double gt_c;
  double gt_noise_sigma;
} TaperSimParams;

/**
 * Workload statistics, mirrored as a plain C struct.
 */
typedef struct TaperWorkloadStats {
  double pdr;
  double pts;
  double abf;
} TaperWorkloadStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *taper_last_error(void);

/**
 * Default-initialize a parameter block.
 */
enum TaperStatus taper_sim_params_init(struct TaperSimParams *params);

/**
 * Parse a JSONL trace file into a new handle.
 */
enum TaperStatus taper_trace_parse(const char *path, struct TaperTrace **out);

/**
 * Generate a synthetic trace from a regime spec given as JSON text.
 */
enum TaperStatus taper_trace_generate(const char *regime_json,
                                      uint64_t seed,
                                      struct TaperTrace **out);

/**
 * Number of requests in the trace.
 */
uintptr_t taper_trace_len(const struct TaperTrace *trace);

void taper_trace_free(struct TaperTrace *trace);

/**
 * PDR / PTS / ABF of a trace.
 */
enum TaperStatus taper_characterize(const struct TaperTrace *trace, struct TaperWorkloadStats *out);

/**
 * Run one simulation and return the run summary as a JSON string. The
 * caller owns the string and must release it with `taper_string_free`.
 */
enum TaperStatus taper_simulate(const struct TaperTrace *trace,
                                const char *policy,
                                const struct TaperSimParams *params,
                                char **out_summary_json);

void taper_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TAPER_FFI_H */
