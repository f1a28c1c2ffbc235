#pragma once

#include "vico/common.hpp"
#include "vico/schedule.hpp"

#include <functional>

namespace vico::oracle {

// Raw mixture description. The oracle owns its Gaussian algebra end to end so
// cross-checks against flowmodel share no code path beyond Eigen.
struct MixtureSpec {
    std::vector<double> weights;
    std::vector<Vec> means;
    std::vector<Mat> covs;

    int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
    int n_components() const { return static_cast<int>(weights.size()); }
};

struct McEstimate {
    Vec mean;
    Vec standard_error;
    long n_samples = 0;
    double effective_sample_size = 0.0;
    bool low_ess_warning = false;  // set when ESS < 100
};

enum class McTarget {
    Z0Mean,    // E[z_0 | z_t]
    Velocity,  // E[z_1 - z_0 | z_t]
};

// Self-normalized importance estimate under the rectified-flow kernel
// z_t = (1-t) z_0 + t z_1, weighting prior draws by the transition density.
McEstimate mc_conditional(const MixtureSpec& spec, const Vec& z_t, double t, McTarget target,
                          long n, Rng& rng);

// Same machinery for a general Gaussian kernel x_t = a x_0 + s * eps;
// estimates E[x_0 | x_t]. Used for variance-preserving cross-checks.
McEstimate mc_posterior_mean_kernel(const MixtureSpec& spec, const Vec& x_t, double a, double s,
                                    long n, Rng& rng);

// Closed-form mixture quantities under the kernel x_t = a x_0 + s * eps.
Vec mixture_score_kernel(const MixtureSpec& spec, const Vec& x, double a, double s);
Vec mixture_posterior_mean_kernel(const MixtureSpec& spec, const Vec& x, double a, double s);
// Gaussian-path velocity alpha_dot E[x0|x] + sigma_dot E[eps|x] for any scheduler.
Vec mixture_path_velocity(const MixtureSpec& spec, const Vec& x, const PathScheduler& sched,
                          double t);

struct GaussianPosterior {
    Vec mean;
    Mat cov;
};

// Exact conjugate posterior for y = A x + noise, noise ~ N(0, sigma^2 I),
// prior x ~ N(prior_mean, prior_cov). Handles sigma = 0 when A is invertible.
GaussianPosterior analytic_linear_gaussian_posterior(const Vec& prior_mean, const Mat& prior_cov,
                                                     const Mat& forward_matrix, double sigma,
                                                     const Vec& y);

// Central finite differences of a scalar loss, default step 1e-6 (balanced
// truncation vs double-precision cancellation; halve for very flat losses).
Vec fd_gradient(const std::function<double(const Vec&)>& loss, const Vec& z, double h = 1e-6);

// Variance-preserving Tweedie reference:
// x0_hat = (x_t + (1 - abar_t) score(x_t)) / sqrt(abar_t), abar_t = alpha_t^2.
Vec vp_tweedie(const std::function<Vec(const Vec&)>& score, const Vec& x_t, double t,
               const PathScheduler& sched);

// Analytic grad_z log p(y | z_t) for a single-Gaussian prior under the
// rectified-flow kernel, with y = A x0 + N(0, sigma_y^2 I). Ground truth for
// the guided-sampling recovery check.
Vec rf_linear_gaussian_guidance_score(const Vec& prior_mean, const Mat& prior_cov, const Mat& forward_matrix,
                                      double sigma_y, const Vec& y, const Vec& z, double t);

}  // namespace vico::oracle
