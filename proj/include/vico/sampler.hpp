#pragma once

#include "vico/conceptalign.hpp"
#include "vico/schedule.hpp"

#include <functional>

namespace vico {

// Editing hyper-parameters: step counts, K-sample averaging, mask threshold,
// guidance strength, measurement noise, CFG scales, seed.
struct EditConfig {
    int n_steps = 50;
    int n_max = 47;
    double t_start = 1.0;
    int k_samples = 3;
    double tau = 0.25;
    double alpha_guidance = 0.5;
    double sigma_meas = 0.0;
    double cfg_src_text = 1.5;
    double cfg_tar_text = 5.5;
    double cfg_tar_image = 1.0;
    std::uint64_t seed = 0;
    GuidanceMode guidance_mode = GuidanceMode::Detached;
    bool record_trajectory = false;

    void validate() const;
    TimeGrid make_grid() const { return make_uniform_grid(n_steps, t_start, n_max); }
};

struct StepDiagnostics {
    double t = 0.0;
    double v_tilde_norm = 0.0;
    double v_hat_norm = 0.0;
    double masked_residual = 0.0;  // ||y - mask .* decode(z0_hat)||
    double mask_fraction = 0.0;
};

struct EditResult {
    StateVector z_final;
    StateVector x_final;
    std::vector<StepDiagnostics> per_step;  // n_max entries, t strictly decreasing
    std::uint64_t seed = 0;
    std::string config_digest;
    // Filled only when EditConfig::record_trajectory is set; aligned with
    // per_step (state entering each step, and its one-step denoised estimate).
    std::vector<Vec> z_trace;
    std::vector<Vec> z0_hat_trace;
};

// z_{t_prev} = z + (t_prev - t_i) v; the factor is negative on a descending
// grid.
StateVector euler_step(const StateVector& z, const Velocity& v, double t_i, double t_prev);

using VelocityFn = std::function<Velocity(const Vec&, double)>;

// Euler the ODE from t_N down to t_0 (left endpoints of each interval in the
// integration direction, i.e. velocity evaluated at t_i when stepping to
// t_{i-1}).
StateVector integrate_down(const VelocityFn& velocity, const TimeGrid& grid, StateVector z,
                           int from_index);
// Euler from t_0 up to t_{to_index}, evaluating at t_i when stepping to
// t_{i+1}.
StateVector integrate_up(const VelocityFn& velocity, const TimeGrid& grid, StateVector z,
                         int to_index);

// Sample z_1 ~ N(0, I) and integrate the conditional velocity field down the
// full grid. Deterministic given the seed.
StateVector generate(const FlowModel& model, const Condition& cond, const TimeGrid& grid,
                     std::uint64_t seed);
StateVector generate_from(const FlowModel& model, const Condition& cond, const TimeGrid& grid,
                          StateVector z_init);
// First-order Euler inversion of a clean sample to noise level t_N.
StateVector invert(const FlowModel& model, const Condition& cond, const TimeGrid& grid,
                   const StateVector& z0);

// Coupled inverse/sampling latents sharing one noise draw:
// z_src_t = (1-t) z1 + t eps,  z_tar_t = z_src_t + (z_t - z1).
// The sum is associated so z_t == z1 gives z_tar_t == z_src_t exactly.
std::pair<StateVector, StateVector> flowedit_pair(const StateVector& z_t, const StateVector& z1,
                                                  const StateVector& eps, double t);

struct CombinedVelocity {
    Velocity v_tilde;
    std::vector<Vec> concept_dists;   // one per sample when concepts were given
    std::vector<double> sample_norms; // per-sample ||v_tar - v_src||
    Mat tar_jacobian_mean;            // (1/K) sum d v_tar / d z_t, when requested
};

// K-sample average of the coupled velocity difference (fresh eps per sample),
// with CFG applied per branch: c_src_text on the source velocity and
// (c_tar_image, c_tar_text) on the target velocity. cond_src must carry no
// context.
CombinedVelocity combined_velocity(const FlowModel& model, const Vec& z_t, const Vec& z1,
                                   const Condition& cond_src, const Condition& cond_tar, double t,
                                   int k_samples, Rng& rng, const EditConfig& cfg,
                                   const ConceptSet* concepts = nullptr,
                                   bool want_jacobian = false);
// Same computation with caller-supplied noise draws (one per sample).
CombinedVelocity combined_velocity_with_noise(const FlowModel& model, const Vec& z_t, const Vec& z1,
                                              const Condition& cond_src, const Condition& cond_tar,
                                              double t, const std::vector<Vec>& noises,
                                              const EditConfig& cfg,
                                              const ConceptSet* concepts = nullptr,
                                              bool want_jacobian = false);

// Context-aware editing loop: per step draws K noises, averages the coupled
// velocity difference and concept distributions, thresholds the mask, forms
// the masked measurement of x_src, takes the one-step denoised estimate, adds
// the concept-alignment guidance, and Eulers down to t_0. Deterministic given
// config.seed.
EditResult vicoedit_run(const FlowModel& model, const StateVector& z_src, const Condition& cond_src,
                        const Condition& cond_tar, const ConceptSet* concepts, const Vec& x_src,
                        const EditConfig& config);

// Ablation pipeline: Euler-invert the source to t_{n_max} under the source
// prompt, then run guided conditional generation back down under the target
// prompt. Keeps the concept-alignment guidance so the comparison isolates
// inversion against the coupled trajectory.
EditResult inversion_baseline_run(const FlowModel& model, const StateVector& z_src,
                                  const Condition& cond_src, const Condition& cond_tar,
                                  const ConceptSet* concepts, const Vec& x_src,
                                  const EditConfig& config);

}  // namespace vico
