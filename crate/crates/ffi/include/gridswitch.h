/* C interface for the gridswitch microgrid resilience toolkit. */

#ifndef GRIDSWITCH_H
#define GRIDSWITCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum GsStatus {
  GsStatus_Ok = 0,
  GsStatus_NullArgument = 1,
  GsStatus_Utf8 = 2,
  GsStatus_Io = 3,
  GsStatus_Parse = 4,
  GsStatus_Config = 5,
  GsStatus_Topology = 6,
  GsStatus_InvalidState = 7,
  GsStatus_Numerical = 8,
  GsStatus_Data = 9,
  GsStatus_Shape = 10,
  GsStatus_Calibration = 11,
  GsStatus_TrainingDiverged = 12,
  GsStatus_CapExceeded = 13,
  GsStatus_AllTreesCompromised = 14,
  GsStatus_Panic = 15,
} GsStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct GsModel GsModel;

/**
 * Opaque scenario handle.
 */
typedef struct GsScenario GsScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread as a NUL-terminated string; never
 * null. Free with `gs_string_free`.
 */
char *gs_last_error_message(void);

/**
 * Release a string returned by this library. Null is accepted.
 *
 * # Safety
 * `s` must have been returned by a gridswitch FFI function and not freed
 * before.
 */
void gs_string_free(char *s);

/**
 * Load and validate a scenario TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum GsStatus gs_scenario_load(const char *path, struct GsScenario **out);

/**
 * Release a scenario handle. Null is accepted.
 *
 * # Safety
 * `scenario` must come from `gs_scenario_load` and not be freed twice.
 */
void gs_scenario_free(struct GsScenario *scenario);

/**
 * Number of DGs in the scenario, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be a live handle or null.
 */
uint32_t gs_scenario_dg_count(const struct GsScenario *scenario);

/**
 * Number of candidate spanning trees, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be a live handle or null.
 */
uint32_t gs_scenario_tree_count(const struct GsScenario *scenario);

/**
 * Estimator feature width (3n^2+1), or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be a live handle or null.
 */
uint32_t gs_scenario_feature_width(const struct GsScenario *scenario);

/**
 * Exact arborescence count for `root` (1-based DG index) by the
 * matrix-tree determinant.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be a valid pointer.
 */
enum GsStatus gs_scenario_count_arborescences(const struct GsScenario *scenario,
                                              uint32_t root,
                                              uint64_t *out);

/**
 * Load a trained model JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum GsStatus gs_model_load(const char *path, struct GsModel **out);

/**
 * Release a model handle. Null is accepted.
 *
 * # Safety
 * `model` must come from `gs_model_load` and not be freed twice.
 */
void gs_model_free(struct GsModel *model);

/**
 * Input feature count expected by the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint32_t gs_model_input_dim(const struct GsModel *model);

/**
 * Estimate the fused abnormality from a feature vector laid out as the
 * flattened received-measurement matrices plus the leader reference.
 *
 * # Safety
 * `features` must point to `len` doubles; `out` must be a valid pointer.
 */
enum GsStatus gs_model_estimate(const struct GsModel *model,
                                const double *features,
                                uintptr_t len,
                                double *out);

/**
 * Run a closed-loop case study. A null `model` selects the analytic
 * detector. When `out_dir` is non-null the trajectory CSV and report JSON
 * are written there. On success `json_out` receives the report document;
 * free it with `gs_string_free`.
 *
 * # Safety
 * Pointer arguments must be valid as described; strings NUL-terminated.
 */
enum GsStatus gs_run_case(const struct GsScenario *scenario,
                          const struct GsModel *model,
                          bool mitigation,
                          const char *out_dir,
                          char **json_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRIDSWITCH_H */
