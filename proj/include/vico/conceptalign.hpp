#pragma once

#include "vico/flowmodel.hpp"

namespace vico {

// Binary per-coordinate mask: values[i] = 1 exactly when pos_prob[i] >= tau.
struct ConceptMask {
    Vec values;
    double tau_used = 0.0;
    Vec pos_prob;

    double fraction() const { return values.size() == 0 ? 0.0 : values.mean(); }
    static ConceptMask all_zeros(int pixel_dim, double tau);
};

// Masked clean signal plus optional Gaussian noise: y = mask .* x0 + s.
struct Measurement {
    Vec y;
    ConceptMask mask;
    double sigma = 0.0;
    Vec noise_s;
};

// Elementwise mean of K per-sample concept distributions.
Vec aggregate_concepts(const std::vector<Vec>& per_sample_dists);

// Threshold the summed positive-concept probability at tau (boundary
// inclusive). Rows of d are pixel coordinates, columns follow
// concepts.ordered().
ConceptMask compute_mask(const Mat& d, const ConceptSet& concepts, double tau);
// Same distribution at every coordinate (the toy-scale resolution match).
ConceptMask compute_mask_broadcast(const Vec& d, int pixel_dim, const ConceptSet& concepts,
                                   double tau);

Measurement make_measurement(const Vec& x0, const ConceptMask& mask, double sigma, Rng& rng);

// Inversion-free one-step denoising: z0_hat = z_t - t * v_tilde.
Vec tweedie_z0(const Vec& z_t, const Velocity& v_tilde, double t);

enum class GuidanceMode {
    Detached,      // d z0_hat / d z_t taken as identity
    ThroughModel,  // include the model velocity's Jacobian
};

GuidanceMode guidance_mode_from_string(const std::string& name);
std::string to_string(GuidanceMode mode);

// Gradient of ||y - (mask .* decode(z0_hat) + s_tilde)||^2 with respect to
// z0_hat; the chain-rule core shared by both guidance modes.
Vec guidance_gradient_z0(const Vec& z0_hat, const Measurement& meas, const FlowModel& model,
                         const Vec& s_tilde);

// Concept-alignment guidance velocity alpha * grad_{z_t} L. Draws s_tilde ~
// N(0, sigma^2 I) from rng. Through-model mode differentiates z0_hat =
// z_t - t * v(z_t, cond) using the model's velocity Jacobian and requires the
// model to provide one.
Velocity guidance_velocity(const Vec& z_t, const Velocity& v_tilde, double t,
                           const Measurement& meas, const FlowModel& model, const Condition& cond,
                           double alpha, double sigma, GuidanceMode mode, Rng& rng);

}  // namespace vico
