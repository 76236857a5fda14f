#ifndef MOLRL_H
#define MOLRL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MolrlStatus {
  MOLRL_STATUS_OK = 0,
  MOLRL_STATUS_NULL_POINTER = 1,
  MOLRL_STATUS_INVALID_ARGUMENT = 2,
  MOLRL_STATUS_DOMAIN = 3,
  MOLRL_STATUS_IO = 4,
  MOLRL_STATUS_CHECKPOINT = 5,
  MOLRL_STATUS_MODEL = 6,
  MOLRL_STATUS_NUMERIC = 7,
  MOLRL_STATUS_PANIC = 99,
} MolrlStatus;

/**
 * Which tail of the property distribution counts as success.
 */
typedef enum MolrlDirection {
  MOLRL_DIRECTION_MAXIMIZE = 0,
  MOLRL_DIRECTION_MINIMIZE = 1,
} MolrlDirection;

/**
 * A loaded checkpoint ready for sampling.
 */
typedef struct MolrlModel MolrlModel;

/**
 * Noise schedule handle.
 */
typedef struct MolrlSchedule MolrlSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *molrl_last_error_message(void);

/**
 * Library version, static storage.
 */
const char *molrl_version(void);

/**
 * Creates a schedule with `steps` steps and endpoint clamp `clamp`.
 */
enum MolrlStatus molrl_schedule_new(size_t steps, double clamp, struct MolrlSchedule **out_handle);

/**
 * # Safety
 * `handle` must come from [`molrl_schedule_new`] and not be used afterwards.
 */
void molrl_schedule_free(struct MolrlSchedule *handle);

enum MolrlStatus molrl_schedule_alpha(const struct MolrlSchedule *handle, size_t t, double *value);

enum MolrlStatus molrl_schedule_sigma(const struct MolrlSchedule *handle, size_t t, double *value);

enum MolrlStatus molrl_schedule_snr(const struct MolrlSchedule *handle, size_t t, double *value);

enum MolrlStatus molrl_schedule_steps(const struct MolrlSchedule *handle, size_t *steps);

/**
 * Probability that a property with the given mean and variances clears
 * `cutoff` in `dir` (a [`MolrlDirection`] value).
 */
enum MolrlStatus molrl_single_objective_prob(double mean,
                                             double var_aleatoric,
                                             double var_epistemic,
                                             double cutoff,
                                             uint32_t dir,
                                             double *prob);

/**
 * Joint probability over `n` independent objectives; each array has `n` entries.
 */
enum MolrlStatus molrl_multi_objective_prob(size_t n,
                                            const double *means,
                                            const double *var_aleatoric,
                                            const double *var_epistemic,
                                            const double *cutoffs,
                                            const uint32_t *directions,
                                            double *prob);

/**
 * Splits a Normal-Inverse-Gamma head into mean, aleatoric and epistemic variance.
 */
enum MolrlStatus molrl_nig_to_estimate(double gamma,
                                       double nu,
                                       double alpha,
                                       double beta,
                                       double *mean,
                                       double *var_aleatoric,
                                       double *var_epistemic);

/**
 * Loads a checkpoint file written by the `molrl` CLI.
 *
 * # Safety
 * `path` must be a nul-terminated UTF-8 string.
 */
enum MolrlStatus molrl_model_load(const char *path, struct MolrlModel **out_handle);

/**
 * # Safety
 * `handle` must come from [`molrl_model_load`] and not be used afterwards.
 */
void molrl_model_free(struct MolrlModel *handle);

/**
 * Number of atom types and length of the condition vector the model expects.
 */
enum MolrlStatus molrl_model_info(const struct MolrlModel *handle,
                                  size_t *num_types,
                                  size_t *condition_dim);

/**
 * Element symbol of atom type `index`; owned by the handle.
 */
const char *molrl_model_symbol(const struct MolrlModel *handle, size_t index);

/**
 * Draws one molecule with `num_atoms` atoms. Writes `num_atoms * 3`
 * row-major coordinates and `num_atoms` atom-type indices. The same
 * (model, seed, num_atoms, condition) always gives the same molecule.
 */
enum MolrlStatus molrl_model_sample(const struct MolrlModel *handle,
                                    uint64_t seed,
                                    size_t num_atoms,
                                    const double *condition,
                                    size_t condition_len,
                                    double *coords,
                                    uint32_t *types);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOLRL_H */
