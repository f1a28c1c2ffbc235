#include "vico/conceptalign.hpp"

namespace vico {

ConceptMask ConceptMask::all_zeros(int pixel_dim, double tau) {
    ConceptMask m;
    m.values = Vec::Zero(pixel_dim);
    m.pos_prob = Vec::Zero(pixel_dim);
    m.tau_used = tau;
    return m;
}

Vec aggregate_concepts(const std::vector<Vec>& per_sample_dists) {
    if (per_sample_dists.empty())
        throw std::invalid_argument("aggregate_concepts: empty sample list");
    const Eigen::Index n = per_sample_dists.front().size();
    Vec mean = Vec::Zero(n);
    for (const Vec& d : per_sample_dists) {
        if (d.size() != n) throw std::invalid_argument("aggregate_concepts: size mismatch");
        mean += d;
    }
    return mean / static_cast<double>(per_sample_dists.size());
}

ConceptMask compute_mask(const Mat& d, const ConceptSet& concepts, double tau) {
    concepts.validate();
    if (!(tau > 0.0) || !(tau < 1.0))
        throw std::invalid_argument("compute_mask: tau must lie in (0, 1)");
    const auto n_concepts = static_cast<Eigen::Index>(concepts.pos.size() + concepts.neg.size());
    if (d.cols() != n_concepts)
        throw std::invalid_argument("compute_mask: distribution width != |pos| + |neg|");

    ConceptMask m;
    m.tau_used = tau;
    m.pos_prob = d.leftCols(static_cast<Eigen::Index>(concepts.pos.size())).rowwise().sum();
    m.values = Vec(d.rows());
    for (Eigen::Index i = 0; i < d.rows(); ++i) m.values[i] = m.pos_prob[i] >= tau ? 1.0 : 0.0;
    return m;
}

ConceptMask compute_mask_broadcast(const Vec& d, int pixel_dim, const ConceptSet& concepts,
                                   double tau) {
    Mat rows(pixel_dim, d.size());
    rows.rowwise() = d.transpose();
    return compute_mask(rows, concepts, tau);
}

Measurement make_measurement(const Vec& x0, const ConceptMask& mask, double sigma, Rng& rng) {
    if (sigma < 0.0) throw std::invalid_argument("make_measurement: sigma must be >= 0");
    if (mask.values.size() != x0.size())
        throw std::invalid_argument("make_measurement: mask/signal size mismatch");
    Measurement meas;
    meas.mask = mask;
    meas.sigma = sigma;
    meas.noise_s = sigma * rng.normal_vec(x0.size());
    meas.y = mask.values.cwiseProduct(x0) + meas.noise_s;
    return meas;
}

Vec tweedie_z0(const Vec& z_t, const Velocity& v_tilde, double t) {
    if (z_t.size() != v_tilde.size())
        throw std::invalid_argument("tweedie_z0: dimension mismatch");
    return z_t - t * v_tilde;
}

GuidanceMode guidance_mode_from_string(const std::string& name) {
    if (name == "detached") return GuidanceMode::Detached;
    if (name == "through-model") return GuidanceMode::ThroughModel;
    throw std::invalid_argument("unknown guidance mode '" + name + "'");
}

std::string to_string(GuidanceMode mode) {
    return mode == GuidanceMode::Detached ? "detached" : "through-model";
}

Vec guidance_gradient_z0(const Vec& z0_hat, const Measurement& meas, const FlowModel& model,
                         const Vec& s_tilde) {
    const Vec decoded = model.decode(z0_hat);
    const Vec residual = meas.y - meas.mask.values.cwiseProduct(decoded) - s_tilde;
    // d/d(decoded) of ||residual||^2 is -2 mask .* residual; pull back through
    // the decoder.
    return -2.0 * model.decode_vjp(z0_hat, meas.mask.values.cwiseProduct(residual));
}

Velocity guidance_velocity(const Vec& z_t, const Velocity& v_tilde, double t,
                           const Measurement& meas, const FlowModel& model, const Condition& cond,
                           double alpha, double sigma, GuidanceMode mode, Rng& rng) {
    if (alpha < 0.0) throw std::invalid_argument("guidance_velocity: alpha must be >= 0");
    if (sigma < 0.0) throw std::invalid_argument("guidance_velocity: sigma must be >= 0");
    const Vec s_tilde = sigma * rng.normal_vec(meas.y.size());
    const Vec z0_hat = tweedie_z0(z_t, v_tilde, t);
    const Vec g0 = guidance_gradient_z0(z0_hat, meas, model, s_tilde);
    if (mode == GuidanceMode::Detached) return alpha * g0;

    if (!model.has_velocity_jacobian())
        throw std::runtime_error(
            "guidance_velocity: through-model mode needs a model with velocity Jacobians");
    const Mat jac = model.velocity_jacobian(z_t, t, cond);
    const Mat dz0_dz = Mat::Identity(z_t.size(), z_t.size()) - t * jac;
    return alpha * (dz0_dz.transpose() * g0);
}

}  // namespace vico
