#pragma once

#include <vector>

#include "facepaint/grid.hpp"
#include "facepaint/rng.hpp"

namespace facepaint {

// Timestep index standing for the clean sample (alpha_bar == 1). Used as the
// target of the last sampler step.
inline constexpr int kCleanStep = -1;

struct NoiseSchedule {
    int num_train_steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    // alpha_bar for a training timestep, or 1.0 for kCleanStep.
    double alpha_bar(int t) const;
    void check_timestep(int t) const;
};

struct ScheduleDefaults {
    static constexpr int num_train_steps = 1000;
    static constexpr double beta_start = 0.00085;
    static constexpr double beta_end = 0.012;
};

// Linear beta ramp from beta_start to beta_end over num_steps.
NoiseSchedule make_schedule(int num_steps = ScheduleDefaults::num_train_steps,
                            double beta_start = ScheduleDefaults::beta_start,
                            double beta_end = ScheduleDefaults::beta_end);

// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps
LatentGrid forward_diffuse(const LatentGrid& z0, int t, const LatentGrid& eps,
                           const NoiseSchedule& schedule);
LatentGrid forward_diffuse(const LatentGrid& z0, const LatentGrid& eps, double alpha_bar);

// Clean-sample estimate implied by a noise prediction.
LatentGrid predict_clean(const LatentGrid& z_t, const LatentGrid& eps_hat, double alpha_bar);

// Deterministic DDIM update from t to t - 1.
LatentGrid reverse_step(const LatentGrid& z_t, const LatentGrid& eps_hat, int t,
                        const NoiseSchedule& schedule);
// Deterministic DDIM update from t to an arbitrary earlier timestep (or kCleanStep).
LatentGrid reverse_step(const LatentGrid& z_t, const LatentGrid& eps_hat, int t, int t_prev,
                        const NoiseSchedule& schedule);

// Ancestral DDPM update (DDIM with eta = 1); draws fresh noise from rng.
LatentGrid ddpm_step(const LatentGrid& z_t, const LatentGrid& eps_hat, int t, int t_prev,
                     const NoiseSchedule& schedule, Rng& rng);

// Evenly strided descending subset of training timesteps ("trailing" spacing:
// the first entry is always num_train_steps - 1).
std::vector<int> inference_timesteps(const NoiseSchedule& schedule, int num_inference_steps);

}  // namespace facepaint
