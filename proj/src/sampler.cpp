#include "vico/sampler.hpp"

#include <cmath>
#include <sstream>

namespace vico {

void EditConfig::validate() const {
    if (n_steps < 1) throw std::invalid_argument("EditConfig: n_steps must be >= 1");
    if (n_max < 1 || n_max > n_steps)
        throw std::invalid_argument("EditConfig: n_max out of range [1, n_steps]");
    if (!(t_start > 0.0) || t_start > 1.0)
        throw std::invalid_argument("EditConfig: t_start must lie in (0, 1]");
    if (k_samples < 1) throw std::invalid_argument("EditConfig: k_samples must be >= 1");
    if (!(tau > 0.0) || !(tau < 1.0)) throw std::invalid_argument("EditConfig: tau must lie in (0, 1)");
    if (alpha_guidance < 0.0) throw std::invalid_argument("EditConfig: alpha_guidance must be >= 0");
    if (sigma_meas < 0.0) throw std::invalid_argument("EditConfig: sigma_meas must be >= 0");
    // Grid construction re-checks t_{n_max} < 1.
    make_uniform_grid(n_steps, t_start, n_max);
}

namespace {

std::string edit_config_digest(const EditConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << c.n_steps << '|' << c.n_max << '|' << c.t_start << '|' << c.k_samples << '|' << c.tau
       << '|' << c.alpha_guidance << '|' << c.sigma_meas << '|' << c.cfg_src_text << '|'
       << c.cfg_tar_text << '|' << c.cfg_tar_image << '|' << c.seed << '|'
       << to_string(c.guidance_mode);
    return hex_digest(fnv1a(os.str()));
}

// CFG-combined velocity of one branch. The image term evaluates the null
// prompt with the branch's context attached; without a context it collapses
// onto the null velocity, so c_image acts as an implicit 1.
Velocity branch_velocity(const FlowModel& model, const Vec& z, double t,
                         const std::string& prompt_id, const std::optional<Vec>& context,
                         double c_image, double c_text) {
    const Condition full{prompt_id, context, {}};
    const double ci = context ? c_image : 1.0;  // image scale is moot without a context
    if (ci == 1.0 && c_text == 1.0) return model.velocity(z, t, full);
    const Velocity v_null = model.velocity(z, t, Condition::unconditional());
    const Velocity v_img =
        context ? model.velocity(z, t, Condition{kNullPromptId, context, {}}) : v_null;
    const Velocity v_full = model.velocity(z, t, full);
    return cfg_combine(v_null, v_img, v_full, ci, c_text);
}

Mat branch_jacobian(const FlowModel& model, const Vec& z, double t, const std::string& prompt_id,
                    const std::optional<Vec>& context, double c_image, double c_text) {
    const Condition full{prompt_id, context, {}};
    const double ci = context ? c_image : 1.0;
    if (ci == 1.0 && c_text == 1.0) return model.velocity_jacobian(z, t, full);
    const Mat j_null = model.velocity_jacobian(z, t, Condition::unconditional());
    const Mat j_img = context
                          ? model.velocity_jacobian(z, t, Condition{kNullPromptId, context, {}})
                          : j_null;
    const Mat j_full = model.velocity_jacobian(z, t, full);
    return j_null + ci * (j_img - j_null) + c_text * (j_full - j_img);
}

}  // namespace

StateVector euler_step(const StateVector& z, const Velocity& v, double t_i, double t_prev) {
    if (!(t_prev < t_i)) throw std::invalid_argument("euler_step: requires t_prev < t_i");
    if (z.size() != v.size()) throw std::invalid_argument("euler_step: dimension mismatch");
    if (!all_finite(z) || !all_finite(v))
        throw std::invalid_argument("euler_step: non-finite inputs");
    return z + (t_prev - t_i) * v;
}

StateVector integrate_down(const VelocityFn& velocity, const TimeGrid& grid, StateVector z,
                           int from_index) {
    for (int i = from_index; i >= 1; --i) {
        const double t_i = grid.t(i);
        z += (grid.t(i - 1) - t_i) * velocity(z, t_i);
    }
    return z;
}

StateVector integrate_up(const VelocityFn& velocity, const TimeGrid& grid, StateVector z,
                         int to_index) {
    for (int i = 0; i < to_index; ++i) {
        const double t_i = grid.t(i);
        z += (grid.t(i + 1) - t_i) * velocity(z, t_i);
    }
    return z;
}

StateVector generate(const FlowModel& model, const Condition& cond, const TimeGrid& grid,
                     std::uint64_t seed) {
    Rng rng(seed);
    return generate_from(model, cond, grid, rng.normal_vec(model.latent_dim()));
}

StateVector generate_from(const FlowModel& model, const Condition& cond, const TimeGrid& grid,
                          StateVector z_init) {
    return integrate_down([&](const Vec& z, double t) { return model.velocity(z, t, cond); }, grid,
                          std::move(z_init), grid.n_steps());
}

StateVector invert(const FlowModel& model, const Condition& cond, const TimeGrid& grid,
                   const StateVector& z0) {
    return integrate_up([&](const Vec& z, double t) { return model.velocity(z, t, cond); }, grid,
                        z0, grid.n_steps());
}

std::pair<StateVector, StateVector> flowedit_pair(const StateVector& z_t, const StateVector& z1,
                                                  const StateVector& eps, double t) {
    if (z_t.size() != z1.size() || z_t.size() != eps.size())
        throw std::invalid_argument("flowedit_pair: dimension mismatch");
    StateVector z_src = (1.0 - t) * z1 + t * eps;
    StateVector z_tar = z_src + (z_t - z1);
    return {std::move(z_src), std::move(z_tar)};
}

CombinedVelocity combined_velocity_with_noise(const FlowModel& model, const Vec& z_t, const Vec& z1,
                                              const Condition& cond_src, const Condition& cond_tar,
                                              double t, const std::vector<Vec>& noises,
                                              const EditConfig& cfg, const ConceptSet* concepts,
                                              bool want_jacobian) {
    if (noises.empty()) throw std::invalid_argument("combined_velocity: need at least one sample");
    if (cond_src.context)
        throw std::invalid_argument("combined_velocity: the inverse branch must not carry a context");
    if (want_jacobian && !model.has_velocity_jacobian())
        throw std::runtime_error(
            "combined_velocity: through-model guidance needs a model with velocity Jacobians");

    const auto K = noises.size();
    CombinedVelocity out;
    out.v_tilde = Vec::Zero(z_t.size());
    out.sample_norms.reserve(K);
    if (want_jacobian) out.tar_jacobian_mean = Mat::Zero(z_t.size(), z_t.size());

    for (const Vec& eps : noises) {
        const auto [z_src_k, z_tar_k] = flowedit_pair(z_t, z1, eps, t);
        const Velocity v_src = branch_velocity(model, z_src_k, t, cond_src.prompt_id, {}, 1.0,
                                               cfg.cfg_src_text);
        const Velocity v_tar = branch_velocity(model, z_tar_k, t, cond_tar.prompt_id,
                                               cond_tar.context, cfg.cfg_tar_image,
                                               cfg.cfg_tar_text);
        const Velocity diff = v_tar - v_src;
        out.sample_norms.push_back(diff.norm());
        out.v_tilde += diff;
        if (concepts)
            out.concept_dists.push_back(
                model.concept_distribution(z_tar_k, t, cond_tar, *concepts));
        if (want_jacobian)
            out.tar_jacobian_mean += branch_jacobian(model, z_tar_k, t, cond_tar.prompt_id,
                                                     cond_tar.context, cfg.cfg_tar_image,
                                                     cfg.cfg_tar_text);
    }
    out.v_tilde /= static_cast<double>(K);
    if (want_jacobian) out.tar_jacobian_mean /= static_cast<double>(K);
    return out;
}

CombinedVelocity combined_velocity(const FlowModel& model, const Vec& z_t, const Vec& z1,
                                   const Condition& cond_src, const Condition& cond_tar, double t,
                                   int k_samples, Rng& rng, const EditConfig& cfg,
                                   const ConceptSet* concepts, bool want_jacobian) {
    if (k_samples < 1) throw std::invalid_argument("combined_velocity: k_samples must be >= 1");
    std::vector<Vec> noises;
    noises.reserve(static_cast<std::size_t>(k_samples));
    for (int k = 0; k < k_samples; ++k) noises.push_back(rng.normal_vec(model.latent_dim()));
    return combined_velocity_with_noise(model, z_t, z1, cond_src, cond_tar, t, noises, cfg,
                                        concepts, want_jacobian);
}

namespace {

void check_edit_inputs(const FlowModel& model, const StateVector& z_src, const Condition& cond_src,
                       const ConceptSet* concepts, const Vec& x_src, const EditConfig& config) {
    config.validate();
    if (z_src.size() != model.latent_dim())
        throw std::invalid_argument("edit: source latent dimension mismatch");
    if (cond_src.context)
        throw std::invalid_argument("edit: the source condition must not carry a context");
    if (concepts) concepts->validate();
    const Vec decoded = model.decode(z_src);
    if ((x_src - decoded).cwiseAbs().maxCoeff() >
        1e-12 * std::max(1.0, decoded.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("edit: x_src must equal decode(z_src)");
}

struct GuidedStep {
    Velocity v_hat;
    StepDiagnostics diag;
};

// Shared mask/measurement/guidance block of one sampling step. d_mean is the
// aggregated concept distribution (empty when no concepts are in play).
GuidedStep guided_step(const FlowModel& model, const Vec& z, double t, const Velocity& v_tilde,
                       const Vec& d_mean, const ConceptSet* concepts, const Vec& x_src,
                       const EditConfig& config, const Mat* tar_jacobian, Rng& rng,
                       Vec* z0_hat_out) {
    const int pixel_dim = model.pixel_dim();
    const ConceptMask mask = concepts
                                 ? compute_mask_broadcast(d_mean, pixel_dim, *concepts, config.tau)
                                 : ConceptMask::all_zeros(pixel_dim, config.tau);
    const Measurement meas = make_measurement(x_src, mask, config.sigma_meas, rng);
    const Vec s_tilde = config.sigma_meas * rng.normal_vec(pixel_dim);

    const Vec z0_hat = tweedie_z0(z, v_tilde, t);
    const Vec g0 = guidance_gradient_z0(z0_hat, meas, model, s_tilde);
    Velocity v_hat;
    if (config.guidance_mode == GuidanceMode::Detached) {
        v_hat = config.alpha_guidance * g0;
    } else {
        if (!tar_jacobian) throw std::logic_error("guided_step: through-model mode needs a Jacobian");
        const Mat dz0_dz = Mat::Identity(z.size(), z.size()) - t * (*tar_jacobian);
        v_hat = config.alpha_guidance * (dz0_dz.transpose() * g0);
    }

    GuidedStep out;
    out.diag.t = t;
    out.diag.v_tilde_norm = v_tilde.norm();
    out.diag.v_hat_norm = v_hat.norm();
    out.diag.masked_residual =
        (meas.y - meas.mask.values.cwiseProduct(model.decode(z0_hat))).norm();
    out.diag.mask_fraction = mask.fraction();
    out.v_hat = std::move(v_hat);
    if (z0_hat_out) *z0_hat_out = z0_hat;
    return out;
}

void check_result(const EditResult& r, int n_max) {
    if (static_cast<int>(r.per_step.size()) != n_max)
        throw std::logic_error("edit: diagnostics length != n_max");
    for (const auto& d : r.per_step) {
        if (!std::isfinite(d.v_tilde_norm) || !std::isfinite(d.v_hat_norm) ||
            !std::isfinite(d.masked_residual))
            throw std::runtime_error("edit: non-finite diagnostics recorded");
    }
}

}  // namespace

EditResult vicoedit_run(const FlowModel& model, const StateVector& z_src, const Condition& cond_src,
                        const Condition& cond_tar, const ConceptSet* concepts, const Vec& x_src,
                        const EditConfig& config) {
    check_edit_inputs(model, z_src, cond_src, concepts, x_src, config);
    const TimeGrid grid = config.make_grid();
    Rng rng(config.seed);
    const bool want_jac = config.guidance_mode == GuidanceMode::ThroughModel;

    EditResult result;
    result.seed = config.seed;
    result.config_digest = edit_config_digest(config);
    result.per_step.reserve(static_cast<std::size_t>(config.n_max));

    const StateVector& z1 = z_src;
    StateVector z = z_src;
    for (int i = config.n_max; i >= 1; --i) {
        const double t_i = grid.t(i);
        try {
            const CombinedVelocity cv =
                combined_velocity(model, z, z1, cond_src, cond_tar, t_i, config.k_samples, rng,
                                  config, concepts, want_jac);
            const Vec d_mean = concepts ? aggregate_concepts(cv.concept_dists) : Vec();
            Vec z0_hat;
            GuidedStep step = guided_step(model, z, t_i, cv.v_tilde, d_mean, concepts, x_src,
                                          config, want_jac ? &cv.tar_jacobian_mean : nullptr, rng,
                                          config.record_trajectory ? &z0_hat : nullptr);
            if (config.record_trajectory) {
                result.z_trace.push_back(z);
                result.z0_hat_trace.push_back(std::move(z0_hat));
            }
            result.per_step.push_back(step.diag);
            z = euler_step(z, cv.v_tilde + step.v_hat, t_i, grid.t(i - 1));
        } catch (const std::exception& e) {
            throw std::runtime_error("vicoedit_run: step i=" + std::to_string(i) + " (t=" +
                                     std::to_string(t_i) + "): " + e.what());
        }
    }

    result.z_final = z;
    result.x_final = model.decode(z);
    check_result(result, config.n_max);
    return result;
}

EditResult inversion_baseline_run(const FlowModel& model, const StateVector& z_src,
                                  const Condition& cond_src, const Condition& cond_tar,
                                  const ConceptSet* concepts, const Vec& x_src,
                                  const EditConfig& config) {
    check_edit_inputs(model, z_src, cond_src, concepts, x_src, config);
    const TimeGrid grid = config.make_grid();
    Rng rng(config.seed);
    const bool want_jac = config.guidance_mode == GuidanceMode::ThroughModel;

    EditResult result;
    result.seed = config.seed;
    result.config_digest = edit_config_digest(config);
    result.per_step.reserve(static_cast<std::size_t>(config.n_max));

    // Inversion phase: climb the grid to t_{n_max} under the source prompt.
    StateVector z = integrate_up(
        [&](const Vec& state, double t) {
            return branch_velocity(model, state, t, cond_src.prompt_id, {}, 1.0,
                                   config.cfg_src_text);
        },
        grid, z_src, config.n_max);

    // Sampling phase: guided conditional generation under the target prompt.
    for (int i = config.n_max; i >= 1; --i) {
        const double t_i = grid.t(i);
        try {
            const Velocity v_tar = branch_velocity(model, z, t_i, cond_tar.prompt_id,
                                                   cond_tar.context, config.cfg_tar_image,
                                                   config.cfg_tar_text);
            Vec d_mean;
            if (concepts) d_mean = model.concept_distribution(z, t_i, cond_tar, *concepts);
            Mat jac;
            if (want_jac)
                jac = branch_jacobian(model, z, t_i, cond_tar.prompt_id, cond_tar.context,
                                      config.cfg_tar_image, config.cfg_tar_text);
            Vec z0_hat;
            GuidedStep step =
                guided_step(model, z, t_i, v_tar, d_mean, concepts, x_src, config,
                            want_jac ? &jac : nullptr, rng,
                            config.record_trajectory ? &z0_hat : nullptr);
            if (config.record_trajectory) {
                result.z_trace.push_back(z);
                result.z0_hat_trace.push_back(std::move(z0_hat));
            }
            result.per_step.push_back(step.diag);
            z = euler_step(z, v_tar + step.v_hat, t_i, grid.t(i - 1));
        } catch (const std::exception& e) {
            throw std::runtime_error("inversion_baseline_run: step i=" + std::to_string(i) +
                                     " (t=" + std::to_string(t_i) + "): " + e.what());
        }
    }

    result.z_final = z;
    result.x_final = model.decode(z);
    check_result(result, config.n_max);
    return result;
}

}  // namespace vico
