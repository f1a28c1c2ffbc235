#include "vico/verify.hpp"

#include "vico/conceptalign.hpp"
#include "vico/flowmodel.hpp"
#include "vico/oracle.hpp"
#include "vico/sampler.hpp"
#include "vico/schedule.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

namespace vico::verify {

namespace {

using oracle::MixtureSpec;

// Fixed 3-component 2D mixture used by every cross-check; covariances are
// intentionally anisotropic and correlated.
MixtureSpec verification_mixture() {
    MixtureSpec spec;
    spec.weights = {0.5, 0.3, 0.2};
    spec.means = {Vec{{1.5, -0.5}}, Vec{{-1.0, 1.0}}, Vec{{0.0, 2.0}}};
    Mat c0(2, 2), c1(2, 2), c2(2, 2);
    c0 << 0.30, 0.10, 0.10, 0.20;
    c1 << 0.15, -0.05, -0.05, 0.25;
    c2 << 0.40, 0.00, 0.00, 0.10;
    spec.covs = {c0, c1, c2};
    return spec;
}

DomainMixtureModel model_from_spec(const MixtureSpec& spec, const std::string& prompt) {
    std::vector<MixtureComponent> comps;
    for (int k = 0; k < spec.n_components(); ++k) {
        MixtureComponent c;
        c.weight = spec.weights[static_cast<std::size_t>(k)];
        c.mean = spec.means[static_cast<std::size_t>(k)];
        c.cov = spec.covs[static_cast<std::size_t>(k)];
        c.concept_id = "c" + std::to_string(k);
        comps.push_back(std::move(c));
    }
    std::map<std::string, std::vector<MixtureComponent>> prompts;
    prompts.emplace(prompt, std::move(comps));
    return DomainMixtureModel(2, std::move(prompts));
}

CheckResult check_max(const std::string& name, double measured, double tol,
                      std::string detail = {}) {
    return {name, measured <= tol, measured, tol, std::move(detail)};
}

// Draw z_t from the time-t rectified-flow marginal of a mixture, so the
// importance-sampling oracle is evaluated where it is well conditioned.
Vec sample_rf_marginal(const MixtureSpec& spec, double t, Rng& rng) {
    const Vec z0_eps = rng.normal_vec(spec.dim());
    const auto k = static_cast<std::size_t>(rng.categorical(spec.weights));
    const Eigen::LLT<Mat> llt(spec.covs[k]);
    const Vec z0 = spec.means[k] + llt.matrixL() * z0_eps;
    const Vec z1 = rng.normal_vec(spec.dim());
    return (1.0 - t) * z0 + t * z1;
}

// Constant-velocity model with a zero Jacobian; lets the two guidance modes be
// compared where they must coincide.
class ConstantVelocityModel final : public FlowModel {
public:
    explicit ConstantVelocityModel(Vec v) : v_(std::move(v)) {}
    int latent_dim() const override { return static_cast<int>(v_.size()); }
    int pixel_dim() const override { return static_cast<int>(v_.size()); }
    Velocity velocity(const Vec&, double, const Condition&) const override { return v_; }
    Vec concept_distribution(const Vec&, double, const Condition&,
                             const ConceptSet& concepts) const override {
        const auto n = static_cast<Eigen::Index>(concepts.ordered().size());
        return Vec::Constant(n, 1.0 / static_cast<double>(n));
    }
    Vec decode(const Vec& z) const override { return z; }
    Vec decode_vjp(const Vec&, const Vec& c) const override { return c; }
    bool has_velocity_jacobian() const override { return true; }
    Mat velocity_jacobian(const Vec&, double, const Condition&) const override {
        return Mat::Zero(v_.size(), v_.size());
    }

private:
    Vec v_;
};

SuiteReport suite_schedule() {
    SuiteReport rep;
    rep.suite = "schedule";

    const PathScheduler rf = PathScheduler::rectified_flow();
    const PathScheduler vp = PathScheduler::variance_preserving(0.1, 20.0);

    for (const auto& [label, sched] : {std::pair{"rf", &rf}, std::pair{"vp", &vp}}) {
        double worst_f = 0.0, worst_g = 0.0;
        for (int i = 0; i <= 99; ++i) {
            const double t = 0.99 * i / 99.0;
            const auto pc = path_coeffs(*sched, t);
            const auto dc = diffusion_coeffs(*sched, t);
            worst_f = std::max(worst_f, std::abs(dc.f - pc.a) / std::max(1.0, std::abs(pc.a)));
            worst_g = std::max(worst_g,
                               std::abs(-0.5 * dc.g2 - pc.b) / std::max(1.0, std::abs(pc.b)));
        }
        rep.checks.push_back(
            check_max(std::string(label) + "/f_equals_a", worst_f, 1e-10));
        rep.checks.push_back(
            check_max(std::string(label) + "/neg_half_g2_equals_b", worst_g, 1e-10));
    }

    // Scheduler derivatives against central finite differences.
    const double h = 1e-5;
    for (const auto& [label, sched] : {std::pair{"rf", &rf}, std::pair{"vp", &vp}}) {
        double worst = 0.0;
        for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
            const double ad_fd = (sched->alpha(t + h) - sched->alpha(t - h)) / (2 * h);
            const double sd_fd = (sched->sigma(t + h) - sched->sigma(t - h)) / (2 * h);
            worst = std::max(worst, std::abs(ad_fd - sched->alpha_dot(t)) /
                                        std::max(1.0, std::abs(sched->alpha_dot(t))));
            worst = std::max(worst, std::abs(sd_fd - sched->sigma_dot(t)) /
                                        std::max(1.0, std::abs(sched->sigma_dot(t))));
        }
        rep.checks.push_back(
            check_max(std::string(label) + "/derivatives_vs_fd", worst, 1e-5));
    }

    // Interpolation endpoints of the straight path z_t = (1-t) z0 + t z1.
    Rng rng(1234);
    double worst_ep = 0.0;
    for (int i = 0; i < 10; ++i) {
        const Vec z0 = rng.normal_vec(3), z1 = rng.normal_vec(3);
        const Vec path0 = (1.0 - 0.0) * z0 + 0.0 * z1;
        const Vec path1 = (1.0 - 1.0) * z0 + 1.0 * z1;
        worst_ep = std::max(worst_ep, (path0 - z0).norm());
        worst_ep = std::max(worst_ep, (path1 - z1).norm());
    }
    rep.checks.push_back(check_max("rf/interpolation_endpoints", worst_ep, 0.0));
    return rep;
}

SuiteReport suite_flowmodel() {
    SuiteReport rep;
    rep.suite = "flowmodel";

    const MixtureSpec spec = verification_mixture();
    const DomainMixtureModel model = model_from_spec(spec, "p");
    const Condition cond{"p", {}, {}};
    const PathScheduler rf = PathScheduler::rectified_flow();

    Rng rng(99);
    double worst_rf = 0.0;
    for (int i = 0; i < 50; ++i) {
        const Vec z = 2.0 * rng.normal_vec(2);
        const double t = 0.02 + 0.96 * rng.uniform();
        const auto pc = path_coeffs(rf, t);
        const Vec u = model.velocity(z, t, cond);
        const Vec rhs = pc.a * z + pc.b * model.score(z, t, cond);
        worst_rf = std::max(worst_rf, (u - rhs).norm() / (1.0 + u.norm()));
    }
    rep.checks.push_back(check_max("rf/velocity_score_identity", worst_rf, 1e-6));

    // Same identity on a variance-preserving path, fully inside the oracle.
    const PathScheduler vp = PathScheduler::variance_preserving(0.1, 20.0);
    double worst_vp = 0.0;
    for (int i = 0; i < 50; ++i) {
        const Vec z = 2.0 * rng.normal_vec(2);
        const double t = 0.05 + 0.9 * rng.uniform();
        const auto pc = path_coeffs(vp, t);
        const Vec u = oracle::mixture_path_velocity(spec, z, vp, t);
        const Vec rhs =
            pc.a * z + pc.b * oracle::mixture_score_kernel(spec, z, vp.alpha(t), vp.sigma(t));
        worst_vp = std::max(worst_vp, (u - rhs).norm() / (1.0 + u.norm()));
    }
    rep.checks.push_back(check_max("vp/velocity_score_identity", worst_vp, 1e-6));

    // Closed-form velocity against the Monte-Carlo conditional expectation.
    double worst_sigmas = 0.0;
    double min_ess = 1e18;
    for (int i = 0; i < 6; ++i) {
        const double t = 0.2 + 0.6 * rng.uniform();
        const Vec z = sample_rf_marginal(spec, t, rng);
        Rng mc_rng(derive_seed(500, static_cast<std::uint64_t>(i)));
        const auto est =
            oracle::mc_conditional(spec, z, t, oracle::McTarget::Velocity, 200000, mc_rng);
        min_ess = std::min(min_ess, est.effective_sample_size);
        const Vec u = model.velocity(z, t, cond);
        for (Eigen::Index j = 0; j < 2; ++j) {
            const double se = std::max(est.standard_error[j], 1e-12);
            worst_sigmas = std::max(worst_sigmas, std::abs(u[j] - est.mean[j]) / se);
        }
    }
    rep.checks.push_back(check_max("rf/velocity_vs_mc", worst_sigmas, 3.0,
                                   "units of SE, min ESS " + std::to_string(min_ess)));

    // E[z0|z] = z - t u(z) identically on the true path.
    double worst_tw = 0.0;
    for (int i = 0; i < 50; ++i) {
        const Vec z = 2.0 * rng.normal_vec(2);
        const double t = 0.02 + 0.96 * rng.uniform();
        const Vec lhs = model.posterior_mean_z0(z, t, cond);
        const Vec rhs = z - t * model.velocity(z, t, cond);
        worst_tw = std::max(worst_tw, (lhs - rhs).norm() / (1.0 + lhs.norm()));
    }
    rep.checks.push_back(check_max("rf/posterior_mean_consistency", worst_tw, 1e-8));

    return rep;
}

SuiteReport suite_tweedie() {
    SuiteReport rep;
    rep.suite = "tweedie";

    // Exactness on a single-Gaussian plain generation path.
    Mat cov(2, 2);
    cov << 0.5, 0.2, 0.2, 0.8;
    const Vec mean{{1.0, -2.0}};
    MixtureSpec single;
    single.weights = {1.0};
    single.means = {mean};
    single.covs = {cov};
    const DomainMixtureModel model = model_from_spec(single, "p");
    const Condition cond{"p", {}, {}};

    Rng rng(777);
    double worst = 0.0;
    for (int i = 0; i < 25; ++i) {
        const Vec z = mean + 2.0 * rng.normal_vec(2);
        const double t = 0.05 + 0.9 * rng.uniform();
        const Vec est = tweedie_z0(z, model.velocity(z, t, cond), t);
        const Vec exact = model.posterior_mean_z0(z, t, cond);
        worst = std::max(worst, (est - exact).norm() / (1.0 + exact.norm()));
    }
    rep.checks.push_back(check_max("rf/single_gaussian_exact", worst, 1e-8));

    // Mixture case against the MC posterior mean at the canonical timesteps.
    const MixtureSpec spec = verification_mixture();
    const DomainMixtureModel mix_model = model_from_spec(spec, "p");
    double worst_sigmas = 0.0;
    int idx = 0;
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        Rng z_rng(derive_seed(42, static_cast<std::uint64_t>(idx)));
        const Vec z = sample_rf_marginal(spec, t, z_rng);
        Rng mc_rng(derive_seed(4242, static_cast<std::uint64_t>(idx)));
        const auto est =
            oracle::mc_conditional(spec, z, t, oracle::McTarget::Z0Mean, 200000, mc_rng);
        const Vec tw = tweedie_z0(z, mix_model.velocity(z, t, cond), t);
        for (Eigen::Index j = 0; j < 2; ++j) {
            const double se = std::max(est.standard_error[j], 1e-12);
            worst_sigmas = std::max(worst_sigmas, std::abs(tw[j] - est.mean[j]) / se);
        }
        ++idx;
    }
    rep.checks.push_back(check_max("rf/mixture_vs_mc", worst_sigmas, 3.0, "units of SE"));

    // VP Tweedie: single Gaussian matches the conjugate posterior exactly.
    const PathScheduler vp = PathScheduler::variance_preserving(0.1, 20.0);
    double worst_vp = 0.0;
    for (double t : {0.1, 0.4, 0.8}) {
        const double a = vp.alpha(t), s = vp.sigma(t);
        const Vec x = mean * a + Vec{{0.3, -0.6}};
        const Vec tw = oracle::vp_tweedie(
            [&](const Vec& xt) { return oracle::mixture_score_kernel(single, xt, a, s); }, x, t,
            vp);
        const auto post = oracle::analytic_linear_gaussian_posterior(
            mean, cov, a * Mat::Identity(2, 2), s, x);
        worst_vp = std::max(worst_vp, (tw - post.mean).norm() / (1.0 + post.mean.norm()));
    }
    rep.checks.push_back(check_max("vp/single_gaussian_exact", worst_vp, 1e-10));

    // VP Tweedie on the mixture against the kernel-adapted MC oracle.
    double worst_vp_mc = 0.0;
    idx = 0;
    for (double t : {0.3, 0.6}) {
        const double a = vp.alpha(t), s = vp.sigma(t);
        const Vec x = Vec{{0.6, 0.4}} + 0.5 * static_cast<double>(idx) * Vec{{-1.0, 1.0}};
        Rng mc_rng(derive_seed(999, static_cast<std::uint64_t>(idx)));
        const auto est = oracle::mc_posterior_mean_kernel(spec, x, a, s, 200000, mc_rng);
        const Vec tw = oracle::vp_tweedie(
            [&](const Vec& xt) { return oracle::mixture_score_kernel(spec, xt, a, s); }, x, t, vp);
        for (Eigen::Index j = 0; j < 2; ++j) {
            const double se = std::max(est.standard_error[j], 1e-12);
            worst_vp_mc = std::max(worst_vp_mc, std::abs(tw[j] - est.mean[j]) / se);
        }
        ++idx;
    }
    rep.checks.push_back(check_max("vp/mixture_vs_mc", worst_vp_mc, 3.0, "units of SE"));

    return rep;
}

SuiteReport suite_dps() {
    SuiteReport rep;
    rep.suite = "dps";

    const MixtureSpec spec = verification_mixture();
    const DomainMixtureModel model = model_from_spec(spec, "p");
    const Condition cond{"p", {}, {}};
    const ConceptSet concepts{{"c0"}, {"c1", "c2"}};

    Rng rng(31337);
    double worst_detached = 0.0, worst_through = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Vec z = 1.5 * rng.normal_vec(2);
        const double t = 0.15 + 0.7 * rng.uniform();
        const Vec x_src = rng.normal_vec(2);
        const Vec d = model.concept_distribution(z, t, cond, concepts);
        const ConceptMask mask = compute_mask_broadcast(d, 2, concepts, 0.25);
        Rng meas_rng(derive_seed(7, static_cast<std::uint64_t>(i)));
        const Measurement meas = make_measurement(x_src, mask, 0.0, meas_rng);
        const Vec v_tilde = model.velocity(z, t, cond);
        const double alpha = 0.5;

        Rng g_rng(1);
        const Vec g_det = guidance_velocity(z, v_tilde, t, meas, model, cond, alpha, 0.0,
                                            GuidanceMode::Detached, g_rng);
        const Vec fd_det = oracle::fd_gradient(
            [&](const Vec& zz) {
                const Vec z0 = tweedie_z0(zz, v_tilde, t);  // v_tilde frozen
                return (meas.y - meas.mask.values.cwiseProduct(model.decode(z0))).squaredNorm();
            },
            z);
        worst_detached =
            std::max(worst_detached, (g_det / alpha - fd_det).norm() / (1.0 + fd_det.norm()));

        Rng g_rng2(1);
        const Vec g_thr = guidance_velocity(z, v_tilde, t, meas, model, cond, alpha, 0.0,
                                            GuidanceMode::ThroughModel, g_rng2);
        const Vec fd_thr = oracle::fd_gradient(
            [&](const Vec& zz) {
                const Vec z0 = tweedie_z0(zz, model.velocity(zz, t, cond), t);
                return (meas.y - meas.mask.values.cwiseProduct(model.decode(z0))).squaredNorm();
            },
            z);
        worst_through =
            std::max(worst_through, (g_thr / alpha - fd_thr).norm() / (1.0 + fd_thr.norm()));
    }
    rep.checks.push_back(check_max("detached_vs_fd", worst_detached, 1e-4));
    rep.checks.push_back(check_max("through_model_vs_fd", worst_through, 1e-4));

    // Uninformative measurement: all-zero mask and sigma 0 give exactly zero.
    {
        Rng z_rng(5);
        const Vec z = z_rng.normal_vec(2);
        const ConceptMask zeros = ConceptMask::all_zeros(2, 0.25);
        Rng m_rng(6);
        const Measurement meas = make_measurement(Vec{{1.0, 2.0}}, zeros, 0.0, m_rng);
        Rng g_rng(7);
        const Vec g = guidance_velocity(z, model.velocity(z, 0.5, cond), 0.5, meas, model, cond,
                                        0.7, 0.0, GuidanceMode::Detached, g_rng);
        rep.checks.push_back(check_max("zero_mask_zero_guidance", g.norm(), 0.0));
    }

    // The two modes coincide on a constant-velocity model (zero Jacobian).
    {
        const ConstantVelocityModel cmodel(Vec{{0.4, -0.2}});
        const Vec z{{0.3, 0.9}};
        const Vec x_src{{1.0, -1.0}};
        ConceptMask ones;
        ones.values = Vec::Ones(2);
        ones.pos_prob = Vec::Ones(2);
        ones.tau_used = 0.25;
        Rng m_rng(8);
        const Measurement meas = make_measurement(x_src, ones, 0.0, m_rng);
        const Vec v = cmodel.velocity(z, 0.5, cond);
        Rng r1(9), r2(9);
        const Vec gd = guidance_velocity(z, v, 0.5, meas, cmodel, cond, 1.0, 0.0,
                                         GuidanceMode::Detached, r1);
        const Vec gt = guidance_velocity(z, v, 0.5, meas, cmodel, cond, 1.0, 0.0,
                                         GuidanceMode::ThroughModel, r2);
        rep.checks.push_back(check_max("modes_agree_zero_jacobian", (gd - gt).norm(), 1e-14));
    }

    return rep;
}

SuiteReport suite_decomposition() {
    SuiteReport rep;
    rep.suite = "decomposition";

    // Linear-Gaussian posterior recovery: guide the analytic velocity field
    // with b_t * grad log p(y|z_t) and compare the sample mean of guided
    // generations with the conjugate posterior.
    const Vec prior_mean{{1.0, -1.0}};
    Mat prior_cov(2, 2);
    prior_cov << 0.8, 0.2, 0.2, 0.5;
    Mat fwd(1, 2);
    fwd << 1.0, 0.0;
    const double sigma_y = 0.5;
    const Vec y{{1.8}};

    MixtureSpec single;
    single.weights = {1.0};
    single.means = {prior_mean};
    single.covs = {prior_cov};
    const DomainMixtureModel model = model_from_spec(single, "p");
    const Condition cond{"p", {}, {}};
    const PathScheduler rf = PathScheduler::rectified_flow();

    const auto posterior =
        oracle::analytic_linear_gaussian_posterior(prior_mean, prior_cov, fwd, sigma_y, y);

    const TimeGrid grid = make_uniform_grid(400, 0.998, 399);
    const auto guided = [&](const Vec& z, double t) -> Velocity {
        const auto pc = path_coeffs(rf, t);
        return model.velocity(z, t, cond) +
               pc.b * oracle::rf_linear_gaussian_guidance_score(prior_mean, prior_cov, fwd,
                                                                sigma_y, y, z, t);
    };

    const int n_runs = 500;
    Mat samples(n_runs, 2);
    for (int r = 0; r < n_runs; ++r) {
        Rng rng(derive_seed(20250, static_cast<std::uint64_t>(r)));
        Vec z = rng.normal_vec(2);
        z = integrate_down(guided, grid, std::move(z), grid.n_steps());
        samples.row(r) = z;
    }
    const Vec sample_mean = samples.colwise().mean();
    double worst_sigmas = 0.0;
    for (Eigen::Index j = 0; j < 2; ++j) {
        const double sd = std::sqrt(
            (samples.col(j).array() - sample_mean[j]).square().sum() / (n_runs - 1));
        const double se = sd / std::sqrt(static_cast<double>(n_runs));
        worst_sigmas = std::max(worst_sigmas, std::abs(sample_mean[j] - posterior.mean[j]) / se);
    }
    rep.checks.push_back(
        check_max("guided_generation_recovers_posterior_mean", worst_sigmas, 3.0, "units of SE"));
    return rep;
}

}  // namespace

bool SuiteReport::all_pass() const {
    for (const auto& c : checks)
        if (!c.pass) return false;
    return true;
}

const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names = {"schedule", "flowmodel", "tweedie", "dps",
                                                   "decomposition"};
    return names;
}

SuiteReport run_suite(const std::string& name) {
    const auto start = std::chrono::steady_clock::now();
    SuiteReport rep;
    if (name == "schedule") rep = suite_schedule();
    else if (name == "flowmodel") rep = suite_flowmodel();
    else if (name == "tweedie") rep = suite_tweedie();
    else if (name == "dps") rep = suite_dps();
    else if (name == "decomposition") rep = suite_decomposition();
    else throw std::invalid_argument("verify: unknown suite '" + name + "'");
    rep.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

std::vector<SuiteReport> run_suites(const std::string& name) {
    std::vector<SuiteReport> out;
    if (name == "all") {
        for (const auto& s : suite_names()) out.push_back(run_suite(s));
    } else {
        out.push_back(run_suite(name));
    }
    return out;
}

void print_reports(const std::vector<SuiteReport>& reports, std::ostream& os) {
    for (const auto& rep : reports) {
        for (const auto& c : rep.checks) {
            os << (c.pass ? "[PASS] " : "[FAIL] ") << rep.suite << "/" << c.name
               << "  measured=" << c.measured << "  tol=" << c.tolerance;
            if (!c.detail.empty()) os << "  (" << c.detail << ")";
            os << "\n";
        }
        os << "suite " << rep.suite << ": " << (rep.all_pass() ? "pass" : "FAIL") << " ("
           << rep.elapsed_seconds << " s)\n";
    }
}

}  // namespace vico::verify
