#ifndef TRANSACTIVE_H
#define TRANSACTIVE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  TX_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TX_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  TX_STATUS_INVALID_UTF8 = 2,
  /**
   * Scenario, profile or parameter error.
   */
  TX_STATUS_CONFIG = 3,
  /**
   * Some agent has no feasible schedule.
   */
  TX_STATUS_INFEASIBLE = 4,
  /**
   * Consensus stopped at the round limit; results are still available.
   */
  TX_STATUS_NOT_CONVERGED = 5,
  /**
   * The QP solver failed to reach its tolerance.
   */
  TX_STATUS_SOLVER = 6,
  /**
   * File could not be read or written.
   */
  TX_STATUS_IO = 7,
  /**
   * Agent or slot index out of range.
   */
  TX_STATUS_OUT_OF_RANGE = 8,
  /**
   * Internal panic; the handle arguments are left untouched.
   */
  TX_STATUS_PANIC = 9,
} TxStatus;

/**
 * Schedules and costs of one standalone or coordinated run.
 */
typedef struct TxResult TxResult;

/**
 * Resolved scenario: agents, topology and run settings.
 */
typedef struct TxScenario TxScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a scenario file; relative profile paths resolve against its directory.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` a writable pointer.
 */
TxStatus tx_scenario_load(const char *path, TxScenario **out);

/**
 * Parses a scenario from TOML text. `base_dir` may be null.
 *
 * # Safety
 * `toml` is a NUL-terminated string, `base_dir` null or NUL-terminated,
 * and `out` a writable pointer.
 */
TxStatus tx_scenario_from_toml(const char *toml, const char *base_dir, TxScenario **out);

/**
 * # Safety
 * `scenario` is null or a handle from this library, not used afterwards.
 */
void tx_scenario_free(TxScenario *scenario);

/**
 * Number of agents, or 0 for a null handle.
 *
 * # Safety
 * `scenario` is null or a live handle.
 */
size_t tx_scenario_agents(const TxScenario *scenario);

/**
 * Number of slots, or 0 for a null handle.
 *
 * # Safety
 * `scenario` is null or a live handle.
 */
size_t tx_scenario_slots(const TxScenario *scenario);

/**
 * Replaces the learning rate of later coordinated runs.
 *
 * # Safety
 * `scenario` is null or a live handle.
 */
TxStatus tx_scenario_set_epsilon(TxScenario *scenario, double epsilon);

/**
 * Replaces the round limit of later coordinated runs.
 *
 * # Safety
 * `scenario` is null or a live handle.
 */
TxStatus tx_scenario_set_max_rounds(TxScenario *scenario, size_t max_rounds);

/**
 * Solves every agent without trading.
 *
 * # Safety
 * `scenario` is a live handle and `out` a writable pointer.
 */
TxStatus tx_run_standalone(const TxScenario *scenario, TxResult **out);

/**
 * Runs the consensus market. When the round limit is hit the result is
 * still written to `out` and must be freed.
 *
 * # Safety
 * `scenario` is a live handle and `out` a writable pointer.
 */
TxStatus tx_run_coordinated(const TxScenario *scenario, TxResult **out);

/**
 * # Safety
 * `result` is null or a handle from this library, not used afterwards.
 */
void tx_result_free(TxResult *result);

/**
 * 1 if the run converged (always for standalone runs), 0 otherwise or for null.
 *
 * # Safety
 * `result` is null or a live handle.
 */
int32_t tx_result_converged(const TxResult *result);

/**
 * Consensus rounds used; 0 for standalone runs or null.
 *
 * # Safety
 * `result` is null or a live handle.
 */
size_t tx_result_rounds(const TxResult *result);

/**
 * Largest final pool imbalance over slots, kW; NaN for null.
 *
 * # Safety
 * `result` is null or a live handle.
 */
double tx_result_clearing_residual(const TxResult *result);

/**
 * Cost of agent `agent` (by position), $.
 *
 * # Safety
 * `result` is a live handle and `value` a writable pointer.
 */
TxStatus tx_result_cost(const TxResult *result, size_t agent, double *value);

/**
 * Trade of agent `agent` in slot `slot`, kW (negative when selling).
 *
 * # Safety
 * `result` is a live handle and `value` a writable pointer.
 */
TxStatus tx_result_trade(const TxResult *result, size_t agent, size_t slot, double *value);

/**
 * Grid draw of agent `agent` in slot `slot`, kW.
 *
 * # Safety
 * `result` is a live handle and `value` a writable pointer.
 */
TxStatus tx_result_grid(const TxResult *result, size_t agent, size_t slot, double *value);

/**
 * Agent-averaged final price of slot `slot`, $/kWh. Standalone results have none.
 *
 * # Safety
 * `result` is a live handle and `value` a writable pointer.
 */
TxStatus tx_result_price(const TxResult *result, size_t slot, double *value);

/**
 * Spectral gap of the Metropolis weights of `kind` ("complete", "star:0", "ring:2", ...).
 *
 * # Safety
 * `kind` is a NUL-terminated string and `gap` a writable pointer.
 */
TxStatus tx_spectral_gap(const char *kind, size_t agents, double *gap);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *tx_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tx_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSACTIVE_H */
