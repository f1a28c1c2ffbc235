#include "vico/schedule.hpp"

#include <cmath>

namespace vico {

TimeGrid::TimeGrid(std::vector<double> times, int n_max) : times_(std::move(times)), n_max_(n_max) {
    const int n = static_cast<int>(times_.size()) - 1;
    if (n < 1) throw std::invalid_argument("TimeGrid: need at least two time points");
    if (times_.front() != 0.0) throw std::invalid_argument("TimeGrid: times[0] must be 0");
    for (std::size_t i = 0; i + 1 < times_.size(); ++i) {
        if (!(times_[i] < times_[i + 1]))
            throw std::invalid_argument("TimeGrid: times must be strictly increasing from t_0 to t_N");
    }
    if (times_.back() > 1.0) throw std::invalid_argument("TimeGrid: times must lie in [0, 1]");
    if (n_max_ < 1 || n_max_ > n) throw std::invalid_argument("TimeGrid: n_max out of range [1, n_steps]");
    if (!(times_[static_cast<std::size_t>(n_max_)] < 1.0))
        throw std::invalid_argument("TimeGrid: t_{n_max} must be strictly below 1");
}

TimeGrid make_uniform_grid(int n_steps, double t_start, int n_max) {
    if (n_steps < 1) throw std::invalid_argument("make_uniform_grid: n_steps must be >= 1");
    if (!(t_start > 0.0) || t_start > 1.0)
        throw std::invalid_argument("make_uniform_grid: t_start must lie in (0, 1]");
    if (n_max < 1 || n_max > n_steps)
        throw std::invalid_argument("make_uniform_grid: n_max out of range [1, n_steps]");
    std::vector<double> times(static_cast<std::size_t>(n_steps) + 1);
    for (int i = 0; i <= n_steps; ++i)
        times[static_cast<std::size_t>(i)] = static_cast<double>(i) * t_start / n_steps;
    times[0] = 0.0;
    return TimeGrid(std::move(times), n_max);
}

PathScheduler PathScheduler::rectified_flow() {
    return PathScheduler(PathKind::RectifiedFlow, 0.0, 0.0);
}

PathScheduler PathScheduler::variance_preserving(double beta_min, double beta_max) {
    if (!(beta_min > 0.0) || beta_max < beta_min)
        throw std::invalid_argument("variance_preserving: need 0 < beta_min <= beta_max");
    return PathScheduler(PathKind::VariancePreserving, beta_min, beta_max);
}

double PathScheduler::alpha(double t) const {
    if (kind_ == PathKind::RectifiedFlow) return 1.0 - t;
    return std::exp(-0.5 * beta_int(t));
}

double PathScheduler::sigma(double t) const {
    if (kind_ == PathKind::RectifiedFlow) return t;
    return std::sqrt(std::max(0.0, 1.0 - std::exp(-beta_int(t))));
}

double PathScheduler::alpha_dot(double t) const {
    if (kind_ == PathKind::RectifiedFlow) return -1.0;
    return -0.5 * beta(t) * alpha(t);
}

double PathScheduler::sigma_dot(double t) const {
    if (kind_ == PathKind::RectifiedFlow) return 1.0;
    const double s = sigma(t);
    if (s == 0.0) throw std::domain_error("sigma_dot: singular at t = 0 for VP schedule");
    // d/dt sqrt(1 - exp(-B)) = beta exp(-B) / (2 sigma)
    return beta(t) * std::exp(-beta_int(t)) / (2.0 * s);
}

double PathScheduler::sigma2_dot(double t) const {
    if (kind_ == PathKind::RectifiedFlow) return 2.0 * t;
    return beta(t) * std::exp(-beta_int(t));
}

PathCoeffs path_coeffs(const PathScheduler& s, double t) {
    if (s.kind() == PathKind::RectifiedFlow) {
        if (t >= 1.0) throw std::domain_error("path_coeffs: b_t singular at t = 1 for rectified flow");
        return {-1.0 / (1.0 - t), -t / (1.0 - t)};
    }
    const double a = s.alpha_dot(t) / s.alpha(t);
    const double sg = s.sigma(t);
    // b = (alpha_dot sigma - alpha sigma_dot) sigma / alpha, rearranged through
    // d(sigma^2)/dt so the sigma -> 0 endpoint stays finite.
    const double b = a * sg * sg - 0.5 * s.sigma2_dot(t);
    return {a, b};
}

DiffusionCoeffs diffusion_coeffs(const PathScheduler& s, double t) {
    const double a = s.alpha(t);
    if (a <= 0.0) throw std::domain_error("diffusion_coeffs: alpha_t must be positive");
    const double f = s.alpha_dot(t) / a;
    const double sg = s.sigma(t);
    const double g2 = s.sigma2_dot(t) - 2.0 * f * sg * sg;
    return {f, g2};
}

}  // namespace vico
