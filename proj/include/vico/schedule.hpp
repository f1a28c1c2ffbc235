#pragma once

#include "vico/common.hpp"

namespace vico {

// Descending timestep sequence t_N..t_0 plus the index n_max where sampling
// starts. Stored ascending (times[0] = 0) so times[i] is the value at index i.
class TimeGrid {
public:
    TimeGrid(std::vector<double> times, int n_max);

    int n_steps() const { return static_cast<int>(times_.size()) - 1; }
    int n_max() const { return n_max_; }
    double t(int i) const { return times_.at(static_cast<std::size_t>(i)); }
    const std::vector<double>& times() const { return times_; }

private:
    std::vector<double> times_;
    int n_max_ = 0;
};

// Uniform grid on [0, t_start]: times[i] = i * t_start / n_steps.
TimeGrid make_uniform_grid(int n_steps, double t_start, int n_max);

enum class PathKind {
    RectifiedFlow,       // alpha_t = 1 - t, sigma_t = t
    VariancePreserving,  // linear-beta schedule, alpha_t^2 + sigma_t^2 = 1
};

// Gaussian-path scheduler (alpha_t, sigma_t) with alpha_0 = 1, sigma_0 = 0.
class PathScheduler {
public:
    static PathScheduler rectified_flow();
    // beta(t) = beta_min + (beta_max - beta_min) * t
    static PathScheduler variance_preserving(double beta_min, double beta_max);

    PathKind kind() const { return kind_; }
    double alpha(double t) const;
    double sigma(double t) const;
    double alpha_dot(double t) const;
    double sigma_dot(double t) const;
    double sigma2_dot(double t) const;  // d(sigma^2)/dt, finite at sigma = 0

private:
    PathScheduler(PathKind kind, double beta_min, double beta_max)
        : kind_(kind), beta_min_(beta_min), beta_max_(beta_max) {}

    double beta(double t) const { return beta_min_ + (beta_max_ - beta_min_) * t; }
    // Integral of beta over [0, t].
    double beta_int(double t) const {
        return beta_min_ * t + 0.5 * (beta_max_ - beta_min_) * t * t;
    }

    PathKind kind_;
    double beta_min_ = 0.0;
    double beta_max_ = 0.0;
};

struct PathCoeffs {
    double a;  // alpha_dot / alpha
    double b;  // (alpha_dot * sigma - alpha * sigma_dot) * sigma / alpha
};

// Coefficients relating a Gaussian-path velocity field to its score:
// u_t(z) = a_t z + b_t score(z). Singular at t = 1 for rectified flow.
PathCoeffs path_coeffs(const PathScheduler& s, double t);

struct DiffusionCoeffs {
    double f;   // d log(alpha) / dt
    double g2;  // d(sigma^2)/dt - 2 f sigma^2
};

// Probability-flow ODE coefficients; satisfy f_t = a_t and -g2_t/2 = b_t.
DiffusionCoeffs diffusion_coeffs(const PathScheduler& s, double t);

}  // namespace vico
