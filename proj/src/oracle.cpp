#include "vico/oracle.hpp"

#include <cmath>
#include <limits>

namespace vico::oracle {

namespace {

void check_spec(const MixtureSpec& spec) {
    if (spec.weights.empty() || spec.weights.size() != spec.means.size() ||
        spec.weights.size() != spec.covs.size())
        throw std::invalid_argument("MixtureSpec: weights/means/covs size mismatch");
}

Vec sample_mixture(const MixtureSpec& spec, Rng& rng, std::vector<Eigen::LLT<Mat>>& chols) {
    const int k = rng.categorical(spec.weights);
    const Vec eps = rng.normal_vec(spec.dim());
    return spec.means[static_cast<std::size_t>(k)] +
           chols[static_cast<std::size_t>(k)].matrixL() * eps;
}

McEstimate weighted_estimate(const std::vector<Vec>& values, const std::vector<double>& log_w,
                             long n) {
    const Eigen::Index d = values.front().size();
    double max_lw = -std::numeric_limits<double>::infinity();
    for (double lw : log_w) max_lw = std::max(max_lw, lw);

    std::vector<double> w(log_w.size());
    double sum_w = 0.0;
    for (std::size_t i = 0; i < log_w.size(); ++i) {
        w[i] = std::exp(log_w[i] - max_lw);
        sum_w += w[i];
    }

    Vec mean = Vec::Zero(d);
    double sum_w2 = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] /= sum_w;
        sum_w2 += w[i] * w[i];
        mean += w[i] * values[i];
    }

    Vec se = Vec::Zero(d);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const Vec dv = values[i] - mean;
        se += (w[i] * w[i]) * dv.cwiseProduct(dv);
    }
    se = se.cwiseSqrt();

    McEstimate est;
    est.mean = std::move(mean);
    est.standard_error = std::move(se);
    est.n_samples = n;
    est.effective_sample_size = 1.0 / sum_w2;
    est.low_ess_warning = est.effective_sample_size < 100.0;
    return est;
}

}  // namespace

McEstimate mc_conditional(const MixtureSpec& spec, const Vec& z_t, double t, McTarget target,
                          long n, Rng& rng) {
    check_spec(spec);
    if (n < 2) throw std::invalid_argument("mc_conditional: need n >= 2");
    if (t == 0.0) {
        if (target == McTarget::Velocity)
            throw std::invalid_argument("mc_conditional: velocity target undefined at t = 0");
        // Degenerate kernel: z_0 = z_t with certainty.
        McEstimate est;
        est.mean = z_t;
        est.standard_error = Vec::Zero(z_t.size());
        est.n_samples = n;
        est.effective_sample_size = static_cast<double>(n);
        return est;
    }

    std::vector<Eigen::LLT<Mat>> chols;
    chols.reserve(spec.covs.size());
    for (const Mat& c : spec.covs) {
        chols.emplace_back(c);
        if (chols.back().info() != Eigen::Success)
            throw std::invalid_argument("mc_conditional: covariance not positive definite");
    }

    std::vector<Vec> values(static_cast<std::size_t>(n));
    std::vector<double> log_w(static_cast<std::size_t>(n));
    const double inv_2t2 = 1.0 / (2.0 * t * t);
    for (long i = 0; i < n; ++i) {
        const Vec z0 = sample_mixture(spec, rng, chols);
        const Vec r = z_t - (1.0 - t) * z0;
        log_w[static_cast<std::size_t>(i)] = -r.squaredNorm() * inv_2t2;
        if (target == McTarget::Z0Mean) {
            values[static_cast<std::size_t>(i)] = z0;
        } else {
            // z_1 is pinned by (z_0, z_t): z_1 = (z_t - (1-t) z_0) / t.
            values[static_cast<std::size_t>(i)] = r / t - z0;
        }
    }
    return weighted_estimate(values, log_w, n);
}

McEstimate mc_posterior_mean_kernel(const MixtureSpec& spec, const Vec& x_t, double a, double s,
                                    long n, Rng& rng) {
    check_spec(spec);
    if (n < 2) throw std::invalid_argument("mc_posterior_mean_kernel: need n >= 2");
    if (s <= 0.0) throw std::invalid_argument("mc_posterior_mean_kernel: need noise scale s > 0");

    std::vector<Eigen::LLT<Mat>> chols;
    chols.reserve(spec.covs.size());
    for (const Mat& c : spec.covs) chols.emplace_back(c);

    std::vector<Vec> values(static_cast<std::size_t>(n));
    std::vector<double> log_w(static_cast<std::size_t>(n));
    const double inv_2s2 = 1.0 / (2.0 * s * s);
    for (long i = 0; i < n; ++i) {
        const Vec x0 = sample_mixture(spec, rng, chols);
        log_w[static_cast<std::size_t>(i)] = -(x_t - a * x0).squaredNorm() * inv_2s2;
        values[static_cast<std::size_t>(i)] = x0;
    }
    return weighted_estimate(values, log_w, n);
}

namespace {

struct KernelComponents {
    std::vector<double> resp;       // responsibilities
    std::vector<Vec> whitened;      // C_k^{-1} (x - m_k)
    std::vector<Eigen::LDLT<Mat>> marginal_chol;
};

KernelComponents kernel_components(const MixtureSpec& spec, const Vec& x, double a, double s) {
    check_spec(spec);
    const int K = spec.n_components();
    const Eigen::Index d = x.size();

    KernelComponents out;
    out.resp.resize(static_cast<std::size_t>(K));
    out.whitened.resize(static_cast<std::size_t>(K));

    std::vector<double> log_resp(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Mat marginal_cov =
            a * a * spec.covs[ks] + s * s * Mat::Identity(d, d);
        Eigen::LDLT<Mat> ldlt(marginal_cov);
        const Vec diff = x - a * spec.means[ks];
        const Vec solved = ldlt.solve(diff);
        double log_det = 0.0;
        for (Eigen::Index i = 0; i < d; ++i) log_det += std::log(ldlt.vectorD()[i]);
        log_resp[ks] = std::log(spec.weights[ks]) - 0.5 * diff.dot(solved) - 0.5 * log_det;
        out.whitened[ks] = solved;
    }

    double max_lr = -std::numeric_limits<double>::infinity();
    for (double lr : log_resp) max_lr = std::max(max_lr, lr);
    double total = 0.0;
    for (int k = 0; k < K; ++k) {
        out.resp[static_cast<std::size_t>(k)] = std::exp(log_resp[static_cast<std::size_t>(k)] - max_lr);
        total += out.resp[static_cast<std::size_t>(k)];
    }
    for (double& r : out.resp) r /= total;
    return out;
}

}  // namespace

Vec mixture_score_kernel(const MixtureSpec& spec, const Vec& x, double a, double s) {
    const KernelComponents kc = kernel_components(spec, x, a, s);
    Vec score = Vec::Zero(x.size());
    for (int k = 0; k < spec.n_components(); ++k)
        score -= kc.resp[static_cast<std::size_t>(k)] * kc.whitened[static_cast<std::size_t>(k)];
    return score;
}

Vec mixture_posterior_mean_kernel(const MixtureSpec& spec, const Vec& x, double a, double s) {
    const KernelComponents kc = kernel_components(spec, x, a, s);
    Vec mean = Vec::Zero(x.size());
    for (int k = 0; k < spec.n_components(); ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Vec cond = spec.means[ks] + a * (spec.covs[ks] * kc.whitened[ks]);
        mean += kc.resp[ks] * cond;
    }
    return mean;
}

Vec mixture_path_velocity(const MixtureSpec& spec, const Vec& x, const PathScheduler& sched,
                          double t) {
    const double a = sched.alpha(t);
    const double s = sched.sigma(t);
    if (s <= 0.0) throw std::domain_error("mixture_path_velocity: sigma_t must be positive");
    const KernelComponents kc = kernel_components(spec, x, a, s);

    Vec x0_mean = Vec::Zero(x.size());
    for (int k = 0; k < spec.n_components(); ++k) {
        const auto ks = static_cast<std::size_t>(k);
        x0_mean += kc.resp[ks] * (spec.means[ks] + a * (spec.covs[ks] * kc.whitened[ks]));
    }
    const Vec eps_mean = (x - a * x0_mean) / s;
    return sched.alpha_dot(t) * x0_mean + sched.sigma_dot(t) * eps_mean;
}

GaussianPosterior analytic_linear_gaussian_posterior(const Vec& prior_mean, const Mat& prior_cov,
                                                     const Mat& forward_matrix, double sigma,
                                                     const Vec& y) {
    if (forward_matrix.cols() != prior_mean.size())
        throw std::invalid_argument("analytic_linear_gaussian_posterior: dimension mismatch");
    if (forward_matrix.rows() != y.size())
        throw std::invalid_argument("analytic_linear_gaussian_posterior: y dimension mismatch");
    if (sigma < 0.0) throw std::invalid_argument("analytic_linear_gaussian_posterior: sigma < 0");

    const Mat cross = prior_cov * forward_matrix.transpose();  // C A^T
    const Mat gram = forward_matrix * cross +
                     sigma * sigma * Mat::Identity(y.size(), y.size());
    Eigen::FullPivLU<Mat> lu(gram);
    if (!lu.isInvertible())
        throw std::invalid_argument(
            "analytic_linear_gaussian_posterior: A C A^T + sigma^2 I is singular");

    const Mat gain = cross * lu.inverse();  // C A^T (A C A^T + s^2 I)^-1
    GaussianPosterior post;
    post.mean = prior_mean + gain * (y - forward_matrix * prior_mean);
    post.cov = prior_cov - gain * forward_matrix * prior_cov;
    return post;
}

Vec fd_gradient(const std::function<double(const Vec&)>& loss, const Vec& z, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: step must be positive");
    Vec g(z.size());
    Vec zp = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double zi = z[i];
        zp[i] = zi + h;
        const double up = loss(zp);
        zp[i] = zi - h;
        const double dn = loss(zp);
        zp[i] = zi;
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

Vec vp_tweedie(const std::function<Vec(const Vec&)>& score, const Vec& x_t, double t,
               const PathScheduler& sched) {
    if (sched.kind() != PathKind::VariancePreserving)
        throw std::invalid_argument("vp_tweedie: requires a variance-preserving scheduler");
    const double alpha = sched.alpha(t);
    const double abar = alpha * alpha;
    if (!(abar > 0.0)) throw std::domain_error("vp_tweedie: abar_t must be positive");
    if (t == 0.0) return x_t;
    return (x_t + (1.0 - abar) * score(x_t)) / std::sqrt(abar);
}

Vec rf_linear_gaussian_guidance_score(const Vec& prior_mean, const Mat& prior_cov, const Mat& forward_matrix,
                                      double sigma_y, const Vec& y, const Vec& z, double t) {
    const Eigen::Index d = z.size();
    const double om = 1.0 - t;
    const Mat S = om * om * prior_cov + t * t * Mat::Identity(d, d);
    const Eigen::LDLT<Mat> S_ldlt(S);

    // Posterior of z0 given z_t under the rectified-flow kernel.
    const Mat cross = om * prior_cov;  // Cov(z0, z_t)
    const Mat gain = cross * S_ldlt.solve(Mat::Identity(d, d));
    const Vec m_z = prior_mean + gain * (z - om * prior_mean);
    const Mat P = prior_cov - gain * cross.transpose();

    const Mat obs_cov = forward_matrix * P * forward_matrix.transpose() +
                        sigma_y * sigma_y * Mat::Identity(y.size(), y.size());
    const Eigen::LDLT<Mat> obs_ldlt(obs_cov);
    const Vec resid = obs_ldlt.solve(y - forward_matrix * m_z);
    const Mat dm_dz = forward_matrix * gain;  // d(A m(z))/dz
    return dm_dz.transpose() * resid;
}

}  // namespace vico::oracle
