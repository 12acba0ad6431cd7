#include "facepaint/schedule.hpp"

#include <cmath>
#include <string>

#include "facepaint/errors.hpp"

namespace facepaint {

double NoiseSchedule::alpha_bar(int t) const {
    if (t == kCleanStep) return 1.0;
    check_timestep(t);
    return alpha_bars[static_cast<std::size_t>(t)];
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t >= num_train_steps) {
        throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(num_train_steps) + ")");
    }
}

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end) {
    if (num_steps < 1) throw InvalidArgument("num_steps must be >= 1");
    if (!std::isfinite(beta_start) || !std::isfinite(beta_end)) {
        throw InvalidArgument("betas must be finite");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw InvalidArgument("betas must satisfy 0 < beta_start <= beta_end < 1");
    }

    NoiseSchedule s;
    s.num_train_steps = num_steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(num_steps);
    s.alphas.resize(num_steps);
    s.alpha_bars.resize(num_steps);
    double running = 1.0;
    for (int i = 0; i < num_steps; ++i) {
        const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
        const double beta = i + 1 == num_steps ? beta_end : beta_start + (beta_end - beta_start) * frac;
        s.betas[i] = beta;
        s.alphas[i] = 1.0 - beta;
        running *= s.alphas[i];
        s.alpha_bars[i] = running;
        if (!(running > 0.0) || (i > 0 && !(running < s.alpha_bars[i - 1]))) {
            throw InvalidArgument("alpha_bar underflows at step " + std::to_string(i));
        }
    }
    return s;
}

LatentGrid forward_diffuse(const LatentGrid& z0, const LatentGrid& eps, double alpha_bar) {
    require_same_shape(z0, eps, "forward_diffuse");
    const double a = std::sqrt(alpha_bar);
    const double b = std::sqrt(1.0 - alpha_bar);
    LatentGrid out(z0.height(), z0.width(), z0.channels());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

LatentGrid forward_diffuse(const LatentGrid& z0, int t, const LatentGrid& eps,
                           const NoiseSchedule& schedule) {
    schedule.check_timestep(t);
    return forward_diffuse(z0, eps, schedule.alpha_bar(t));
}

LatentGrid predict_clean(const LatentGrid& z_t, const LatentGrid& eps_hat, double alpha_bar) {
    require_same_shape(z_t, eps_hat, "predict_clean");
    const double a = std::sqrt(alpha_bar);
    const double b = std::sqrt(1.0 - alpha_bar);
    LatentGrid out(z_t.height(), z_t.width(), z_t.channels());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] - b * eps_hat[i]) / a;
    return out;
}

LatentGrid reverse_step(const LatentGrid& z_t, const LatentGrid& eps_hat, int t, int t_prev,
                        const NoiseSchedule& schedule) {
    require_same_shape(z_t, eps_hat, "reverse_step");
    schedule.check_timestep(t);
    if (t_prev != kCleanStep) {
        schedule.check_timestep(t_prev);
        if (t_prev >= t) throw InvalidArgument("reverse_step target must precede t");
    }
    if (!eps_hat.all_finite()) throw NonFiniteValue("reverse_step: non-finite noise prediction");

    const double ab_prev = schedule.alpha_bar(t_prev);
    const LatentGrid z0_hat = predict_clean(z_t, eps_hat, schedule.alpha_bar(t));
    const double a = std::sqrt(ab_prev);
    const double b = std::sqrt(1.0 - ab_prev);
    LatentGrid out(z_t.height(), z_t.width(), z_t.channels());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0_hat[i] + b * eps_hat[i];
    return out;
}

LatentGrid reverse_step(const LatentGrid& z_t, const LatentGrid& eps_hat, int t,
                        const NoiseSchedule& schedule) {
    if (t < 1) throw InvalidArgument("reverse_step requires t >= 1");
    return reverse_step(z_t, eps_hat, t, t - 1, schedule);
}

LatentGrid ddpm_step(const LatentGrid& z_t, const LatentGrid& eps_hat, int t, int t_prev,
                     const NoiseSchedule& schedule, Rng& rng) {
    require_same_shape(z_t, eps_hat, "ddpm_step");
    schedule.check_timestep(t);
    if (t_prev != kCleanStep && (t_prev >= t || t_prev < 0)) {
        throw InvalidArgument("ddpm_step target must precede t");
    }
    if (!eps_hat.all_finite()) throw NonFiniteValue("ddpm_step: non-finite noise prediction");

    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    // posterior std with eta = 1
    const double sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
    const double sigma = std::sqrt(std::max(0.0, sigma2));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma2));

    const LatentGrid z0_hat = predict_clean(z_t, eps_hat, ab_t);
    const double a = std::sqrt(ab_prev);
    LatentGrid out(z_t.height(), z_t.width(), z_t.channels());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a * z0_hat[i] + dir * eps_hat[i] + sigma * rng.normal();
    }
    return out;
}

std::vector<int> inference_timesteps(const NoiseSchedule& schedule, int num_inference_steps) {
    const int total = schedule.num_train_steps;
    if (num_inference_steps < 1 || num_inference_steps > total) {
        throw InvalidArgument("num_inference_steps must lie in [1, " + std::to_string(total) + "]");
    }
    std::vector<int> steps;
    steps.reserve(num_inference_steps);
    const double ratio = static_cast<double>(total) / num_inference_steps;
    for (int i = 0; i < num_inference_steps; ++i) {
        steps.push_back(static_cast<int>(std::lround(total - i * ratio)) - 1);
    }
    return steps;
}

}  // namespace facepaint
