#ifndef SOS_H
#define SOS_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum SosStatus {
  SOS_STATUS_OK = 0,
  SOS_STATUS_NULL_POINTER = 1,
  SOS_STATUS_CONFIG = 2,
  SOS_STATUS_NUMERIC = 3,
  SOS_STATUS_DATA = 4,
  SOS_STATUS_PANIC = 5,
} SosStatus;

/* Opaque model handle. */
typedef struct SosModel SosModel;

/* Opaque filter handle. */
typedef struct SosFilter SosFilter;

/* Structural parameters, per day. */
typedef struct SosParams {
  double m0;
  double gamma_kbar;
  double b;
  double sigma_delta;
  uint32_t kbar;
  double g_c;
  double g_d;
  double r_f;
  double sigma_c;
  double sigma_d_bar;
  double rho_cd;
  double q_bar;
} SosParams;

/* Summary of one filter step. state_mean is the filtered mean of the
 * agent's price-dividend ratio (learning), nature's price-dividend ratio
 * (full information) or the latent state (linear-Gaussian). */
typedef struct SosStepRecord {
  double log_increment;
  double bandwidth;
  double ess;
  double state_mean;
} SosStepRecord;

const char *sos_version(void);

/* Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on this thread. */
const char *sos_last_error(void);

SosStatus sos_params_daily_calibration(uint32_t kbar, SosParams *out);

SosStatus sos_model_learning_new(const SosParams *params, size_t burn_in, SosModel **out);

SosStatus sos_model_full_information_new(const SosParams *params, SosModel **out);

SosStatus sos_model_linear_gaussian_new(double phi,
                                        double sigma_state,
                                        double sigma_obs,
                                        double prior_mean,
                                        double prior_sd,
                                        SosModel **out);

void sos_model_free(SosModel *model);

/* Writes len observations into out. */
SosStatus sos_model_simulate(const SosModel *model, size_t len, uint64_t seed, double *out);

/* Exact full-information log-likelihood. */
SosStatus sos_fi_loglik(const SosParams *params, const double *returns, size_t len, double *out);

/* The model is copied; the model handle may be freed afterwards. */
SosStatus sos_filter_new(const SosModel *model, size_t particles, uint64_t seed, SosFilter **out);

/* out may be NULL. */
SosStatus sos_filter_step(SosFilter *filter, double observation, SosStepRecord *out);

SosStatus sos_filter_loglik(const SosFilter *filter, double *out);

size_t sos_filter_steps(const SosFilter *filter);

/* VaR as a positive loss. */
SosStatus sos_filter_var(const SosFilter *filter,
                         size_t horizon,
                         double level,
                         size_t paths_per_particle,
                         uint64_t seed,
                         double *out);

void sos_filter_free(SosFilter *filter);

#ifdef __cplusplus
}  /* extern "C" */
#endif

#endif  /* SOS_H */
