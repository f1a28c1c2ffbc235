#include "vico/sampler.hpp"

#include "toy_models.hpp"
#include "vico/oracle.hpp"

#include <doctest.h>

using namespace vico;

namespace {

EditConfig plain_config() {
    EditConfig c;
    c.n_steps = 50;
    c.n_max = 47;
    c.k_samples = 3;
    c.tau = 0.25;
    c.alpha_guidance = 0.0;
    c.sigma_meas = 0.0;
    c.cfg_src_text = 1.0;
    c.cfg_tar_text = 1.0;
    c.cfg_tar_image = 1.0;
    c.seed = 1;
    return c;
}

}  // namespace

TEST_CASE("euler step arithmetic") {
    CHECK(euler_step(Vec{{0.0}}, Vec{{1.0}}, 0.5, 0.48)[0] == doctest::Approx(-0.02));
    const Vec z{{0.7, -0.4}};
    CHECK((euler_step(z, Vec::Zero(2), 0.5, 0.2) - z).norm() == 0.0);
    const Vec out = euler_step(Vec{{1.0, 1.0}}, Vec{{2.0, -2.0}}, 1.0, 0.0);
    CHECK(out[0] == doctest::Approx(-1.0));
    CHECK(out[1] == doctest::Approx(3.0));

    CHECK_THROWS_AS(euler_step(z, Vec::Zero(2), 0.2, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(euler_step(Vec{{std::nan("")}}, Vec{{0.0}}, 0.5, 0.4), std::invalid_argument);
}

TEST_CASE("coupled latents of the inverse and sampling processes") {
    const Vec z1{{1.0, 0.0}};
    const Vec z_t{{0.4, 0.2}};
    const Vec eps{{0.0, 2.0}};

    SUBCASE("endpoints") {
        const auto [s0, t0] = flowedit_pair(z_t, z1, eps, 0.0);
        CHECK((s0 - z1).norm() == 0.0);
        CHECK((t0 - z_t).norm() == 0.0);
        const auto [s1, t1] = flowedit_pair(z_t, z1, eps, 1.0);
        CHECK((s1 - eps).norm() == 0.0);
        CHECK((t1 - (z_t + eps - z1)).norm() <= 1e-15);
    }

    SUBCASE("first step collapses the pair when z_t = z1") {
        const auto [src, tar] = flowedit_pair(z1, z1, eps, 0.5);
        CHECK(src[0] == doctest::Approx(0.5));
        CHECK(src[1] == doctest::Approx(1.0));
        // Exact, not approximate: the association makes z_tar bitwise z_src.
        CHECK((tar - src).norm() == 0.0);
    }

    CHECK_THROWS_AS(flowedit_pair(z_t, z1, Vec{{1.0}}, 0.5), std::invalid_argument);
}

TEST_CASE("generation") {
    SUBCASE("zero-velocity model returns the initial noise draw") {
        const testing::ZeroVelocityModel model(3);
        const TimeGrid grid = make_uniform_grid(20, 0.95, 19);
        const StateVector out = generate(model, Condition{"p", {}, {}}, grid, 42);
        Rng replay(42);
        CHECK((out - replay.normal_vec(3)).norm() == 0.0);
    }

    SUBCASE("same seed gives bitwise-identical output") {
        const auto model = testing::mixture3_model();
        const TimeGrid grid = make_uniform_grid(30, 0.99, 29);
        const StateVector a = generate(model, Condition{"p", {}, {}}, grid, 7);
        const StateVector b = generate(model, Condition{"p", {}, {}}, grid, 7);
        CHECK((a - b).norm() == 0.0);
        const StateVector c = generate(model, Condition{"p", {}, {}}, grid, 8);
        CHECK((a - c).norm() > 0.0);
    }

    SUBCASE("samples land on a tight Gaussian target") {
        const Vec mu{{0.8, -0.3}};
        const auto model = testing::single_gaussian_model(mu, 0.01 * Mat::Identity(2, 2));
        const TimeGrid grid = make_uniform_grid(200, 0.999, 199);
        const int runs = 500;
        Mat samples(runs, 2);
        for (int r = 0; r < runs; ++r)
            samples.row(r) =
                generate(model, Condition{"prior", {}, {}}, grid, derive_seed(90, static_cast<std::uint64_t>(r)));
        const Vec mean = samples.colwise().mean();
        for (int j = 0; j < 2; ++j) {
            const double sd = std::sqrt(
                (samples.col(j).array() - mean[j]).square().sum() / (runs - 1));
            const double se = sd / std::sqrt(static_cast<double>(runs));
            CHECK(std::abs(mean[j] - mu[j]) <= 3.0 * se + 5e-3);  // 5e-3 Euler bias headroom
        }
    }
}

TEST_CASE("inversion") {
    SUBCASE("zero-velocity model inverts to itself") {
        const testing::ZeroVelocityModel model(2);
        const TimeGrid grid = make_uniform_grid(10, 1.0, 9);
        const Vec z0{{0.3, -0.6}};
        CHECK((invert(model, Condition{"p", {}, {}}, grid, z0) - z0).norm() == 0.0);
    }

    SUBCASE("invert then generate reconstructs, finer grids reconstruct better") {
        const auto model = testing::single_gaussian_model(Vec{{1.0, -1.0}},
                                                          0.25 * Mat::Identity(2, 2));
        const Condition cond{"prior", {}, {}};
        const Vec z0{{1.3, -0.7}};

        const auto roundtrip = [&](int n) {
            const TimeGrid grid = make_uniform_grid(n, 0.999, n - 1);
            const StateVector noise = invert(model, cond, grid, z0);
            return (generate_from(model, cond, grid, noise) - z0).norm();
        };
        const double err_fine = roundtrip(500);
        const double err_coarse = roundtrip(20);
        CHECK(err_fine <= 1e-2 * z0.norm());
        CHECK(err_coarse > err_fine);
    }
}

TEST_CASE("combined velocity") {
    const auto model = testing::two_domain_model();
    const Vec z_src{{2.1, -0.9}};

    SUBCASE("identity edit gives exactly zero samples") {
        const EditConfig cfg = plain_config();
        const Condition src{"src", {}, {}};
        Rng rng(5);
        const CombinedVelocity cv =
            combined_velocity(model, z_src, z_src, src, src, 0.9, 3, rng, cfg);
        CHECK(cv.v_tilde.norm() == 0.0);
        for (double n : cv.sample_norms) CHECK(n == 0.0);
    }

    SUBCASE("zero-velocity model for both conditions") {
        const testing::ZeroVelocityModel zero(2);
        const EditConfig cfg = plain_config();
        Rng rng(6);
        const CombinedVelocity cv = combined_velocity(zero, Vec{{0.1, 0.2}}, Vec{{0.3, 0.4}},
                                                      Condition{"a", {}, {}},
                                                      Condition{"b", {}, {}}, 0.7, 2, rng, cfg);
        CHECK(cv.v_tilde.norm() == 0.0);
    }

    SUBCASE("source branch must not carry a context") {
        const EditConfig cfg = plain_config();
        Rng rng(7);
        CHECK_THROWS_AS(combined_velocity(model, z_src, z_src,
                                          Condition{"src", Vec{{0.0, 0.0}}, {}},
                                          Condition{"tar", {}, {}}, 0.9, 1, rng, cfg),
                        std::invalid_argument);
    }

    SUBCASE("K-sample averaging shrinks the variance like 1/K") {
        const EditConfig cfg = plain_config();
        const Condition src{"src", {}, {}};
        const Condition tar{"tar", testing::two_domain_context(), {}};
        const double t = 0.9;
        const int seeds = 100;

        const auto variance_for = [&](int k) {
            Mat draws(seeds, 2);
            for (int s = 0; s < seeds; ++s) {
                Rng rng(derive_seed(1000 + k, static_cast<std::uint64_t>(s)));
                draws.row(s) =
                    combined_velocity(model, z_src, z_src, src, tar, t, k, rng, cfg).v_tilde;
            }
            const Vec mean = draws.colwise().mean();
            double pooled = 0.0;
            for (int j = 0; j < 2; ++j)
                pooled += (draws.col(j).array() - mean[j]).square().sum() / (seeds - 1);
            return pooled;
        };

        const double v1 = variance_for(1);
        const double v3 = variance_for(3);
        CHECK(v3 >= 0.7 * v1 / 3.0);
        CHECK(v3 <= 1.3 * v1 / 3.0);
    }

    SUBCASE("concept distributions ride along with the target branch") {
        const EditConfig cfg = plain_config();
        const ConceptSet cs = testing::two_domain_concepts();
        Rng rng(8);
        const CombinedVelocity cv = combined_velocity(
            model, z_src, z_src, Condition{"src", {}, {}},
            Condition{"tar", testing::two_domain_context(), cs}, 0.9, 3, rng, cfg, &cs);
        REQUIRE(cv.concept_dists.size() == 3);
        for (const auto& d : cv.concept_dists) {
            CHECK(d.size() == 2);
            CHECK(std::abs(d.sum() - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("vicoedit run identity fixpoint") {
    const auto model = testing::two_domain_model();
    const Condition src{"src", {}, {}};
    const Vec z_src{{2.05, -1.1}};
    const Vec x_src = model.decode(z_src);

    for (int n : {10, 50}) {
        for (int k : {1, 3}) {
            EditConfig cfg = plain_config();
            cfg.n_steps = n;
            cfg.n_max = n - 3;
            cfg.k_samples = k;
            cfg.cfg_src_text = 1.5;
            cfg.cfg_tar_text = 1.5;  // equal text scales keep the branches twinned
            const EditResult res = vicoedit_run(model, z_src, src, src, nullptr, x_src, cfg);
            CHECK((res.z_final - z_src).norm() <= 1e-10);
            CHECK((res.x_final - x_src).norm() <= 1e-10);
            for (const auto& d : res.per_step) CHECK(d.v_tilde_norm == 0.0);
        }
    }
}

TEST_CASE("vicoedit run structure and determinism") {
    const auto model = testing::two_domain_model();
    const Condition src{"src", {}, {}};
    const Condition tar{"tar", testing::two_domain_context(), testing::two_domain_concepts()};
    const ConceptSet cs = testing::two_domain_concepts();
    const Vec z_src{{2.05, -1.1}};
    const Vec x_src = model.decode(z_src);

    EditConfig cfg = plain_config();
    cfg.alpha_guidance = 0.5;
    cfg.cfg_tar_text = 2.0;
    cfg.seed = 99;

    const EditResult a = vicoedit_run(model, z_src, src, tar, &cs, x_src, cfg);
    const EditResult b = vicoedit_run(model, z_src, src, tar, &cs, x_src, cfg);

    SUBCASE("bitwise determinism") {
        CHECK((a.z_final - b.z_final).norm() == 0.0);
        REQUIRE(a.per_step.size() == b.per_step.size());
        for (std::size_t i = 0; i < a.per_step.size(); ++i) {
            CHECK(a.per_step[i].v_tilde_norm == b.per_step[i].v_tilde_norm);
            CHECK(a.per_step[i].masked_residual == b.per_step[i].masked_residual);
        }
    }

    SUBCASE("diagnostics cover exactly the sampling steps with descending t") {
        CHECK(static_cast<int>(a.per_step.size()) == cfg.n_max);
        for (std::size_t i = 1; i < a.per_step.size(); ++i)
            CHECK(a.per_step[i].t < a.per_step[i - 1].t);
        CHECK(a.per_step.front().t == doctest::Approx(0.94));
        CHECK(a.seed == 99);
        CHECK_FALSE(a.config_digest.empty());
    }

    SUBCASE("trajectory recording is aligned with the step diagnostics") {
        EditConfig rec = cfg;
        rec.record_trajectory = true;
        const EditResult r = vicoedit_run(model, z_src, src, tar, &cs, x_src, rec);
        CHECK(r.z_trace.size() == r.per_step.size());
        CHECK(r.z0_hat_trace.size() == r.per_step.size());
        CHECK((r.z_trace.front() - z_src).norm() == 0.0);
    }
}

TEST_CASE("hyper-parameter table row runs to completion") {
    // N=50, n_max=47, K=3, tau=0.25, alpha=0.5, sigma=0, source text scale 1.5
    // with a unified target scale.
    const auto model = testing::two_domain_model();
    EditConfig cfg;
    cfg.n_steps = 50;
    cfg.n_max = 47;
    cfg.k_samples = 3;
    cfg.tau = 0.25;
    cfg.alpha_guidance = 0.5;
    cfg.sigma_meas = 0.0;
    cfg.cfg_src_text = 1.5;
    cfg.cfg_tar_text = 5.5;
    cfg.cfg_tar_image = 5.5;
    cfg.seed = 3;
    cfg.validate();

    const Vec z_src{{2.0, -1.0}};
    const ConceptSet cs = testing::two_domain_concepts();
    const EditResult res = vicoedit_run(model, z_src, Condition{"src", {}, {}},
                                        Condition{"tar", testing::two_domain_context(), cs}, &cs,
                                        model.decode(z_src), cfg);
    CHECK(res.per_step.size() == 47);
    CHECK(all_finite(res.z_final));
}

TEST_CASE("guidance pulls preserved coordinates toward the source") {
    const auto model = testing::two_domain_model();
    const Condition src{"src", {}, {}};
    const Condition tar{"tar", testing::two_domain_context(), testing::two_domain_concepts()};
    const ConceptSet cs = testing::two_domain_concepts();

    int improved = 0;
    const int seeds = 20;
    for (int s = 0; s < seeds; ++s) {
        Rng src_rng(derive_seed(777, static_cast<std::uint64_t>(s)));
        const Vec z_src = model.sample_prompt("src", src_rng);
        const Vec x_src = model.decode(z_src);

        EditConfig off = plain_config();
        off.cfg_tar_text = 2.0;
        off.seed = derive_seed(31, static_cast<std::uint64_t>(s));
        EditConfig on = off;
        on.alpha_guidance = 0.5;

        const EditResult r_off = vicoedit_run(model, z_src, src, tar, &cs, x_src, off);
        const EditResult r_on = vicoedit_run(model, z_src, src, tar, &cs, x_src, on);
        const double e_off = std::abs(r_off.x_final[0] - x_src[0]);
        const double e_on = std::abs(r_on.x_final[0] - x_src[0]);
        if (e_on < e_off) ++improved;
    }
    CHECK(improved >= seeds * 7 / 10);
}

TEST_CASE("through-model guidance matches finite differences along the coupled path") {
    const auto model = testing::two_domain_model();
    const EditConfig cfg = [] {
        EditConfig c = plain_config();
        c.cfg_tar_text = 2.0;
        c.guidance_mode = GuidanceMode::ThroughModel;
        return c;
    }();
    const Condition src{"src", {}, {}};
    const Condition tar{"tar", testing::two_domain_context(), {}};
    const ConceptSet cs = testing::two_domain_concepts();

    const Vec z1{{2.05, -1.1}};
    const Vec z_t{{2.0, -0.2}};
    const double t = 0.8;
    Rng noise_rng(17);
    std::vector<Vec> noises;
    for (int k = 0; k < 3; ++k) noises.push_back(noise_rng.normal_vec(2));

    const CombinedVelocity cv =
        combined_velocity_with_noise(model, z_t, z1, src, tar, t, noises, cfg, &cs, true);

    const Vec x_src = model.decode(z1);
    const ConceptMask mask =
        compute_mask_broadcast(aggregate_concepts(cv.concept_dists), 2, cs, cfg.tau);
    Rng mrng(3);
    const Measurement meas = make_measurement(x_src, mask, 0.0, mrng);

    const Vec g0 = guidance_gradient_z0(tweedie_z0(z_t, cv.v_tilde, t), meas, model, Vec::Zero(2));
    const Mat dz0_dz = Mat::Identity(2, 2) - t * cv.tar_jacobian_mean;
    const Vec grad = dz0_dz.transpose() * g0;

    const Vec fd = oracle::fd_gradient(
        [&](const Vec& zz) {
            const CombinedVelocity c2 =
                combined_velocity_with_noise(model, zz, z1, src, tar, t, noises, cfg);
            const Vec z0 = tweedie_z0(zz, c2.v_tilde, t);
            return (meas.y - meas.mask.values.cwiseProduct(model.decode(z0))).squaredNorm();
        },
        z_t);
    CHECK((grad - fd).norm() <= 1e-4 * (1.0 + fd.norm()));
}

TEST_CASE("edit errors carry the step index") {
    const auto model = testing::two_domain_model();
    EditConfig cfg = plain_config();
    const Vec z_src{{2.0, -1.0}};
    try {
        vicoedit_run(model, z_src, Condition{"src", {}, {}}, Condition{"missing", {}, {}}, nullptr,
                     model.decode(z_src), cfg);
        CHECK(false);
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("step i=47") != std::string::npos);
    }

    CHECK_THROWS_AS(vicoedit_run(model, z_src, Condition{"src", {}, {}},
                                 Condition{"tar", {}, {}}, nullptr, Vec{{9.0, 9.0}}, cfg),
                    std::invalid_argument);
}

TEST_CASE("inversion baseline pipeline") {
    const auto model = testing::two_domain_model();
    const ConceptSet cs = testing::two_domain_concepts();
    EditConfig cfg = plain_config();
    cfg.alpha_guidance = 0.5;
    cfg.cfg_tar_text = 2.0;
    cfg.seed = 12;

    Rng src_rng(55);
    const Vec z_src = model.sample_prompt("src", src_rng);
    const EditResult res = inversion_baseline_run(
        model, z_src, Condition{"src", {}, {}},
        Condition{"tar", testing::two_domain_context(), cs}, &cs, model.decode(z_src), cfg);
    CHECK(res.per_step.size() == static_cast<std::size_t>(cfg.n_max));
    CHECK(all_finite(res.z_final));

    const EditResult res2 = inversion_baseline_run(
        model, z_src, Condition{"src", {}, {}},
        Condition{"tar", testing::two_domain_context(), cs}, &cs, model.decode(z_src), cfg);
    CHECK((res.z_final - res2.z_final).norm() == 0.0);
}

TEST_CASE("edit config validation names the offending field") {
    EditConfig cfg = plain_config();
    cfg.tau = 1.5;
    try {
        cfg.validate();
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("tau") != std::string::npos);
    }

    EditConfig k0 = plain_config();
    k0.k_samples = 0;
    CHECK_THROWS_AS(k0.validate(), std::invalid_argument);

    EditConfig nm = plain_config();
    nm.n_max = 50;
    nm.t_start = 1.0;
    CHECK_THROWS_AS(nm.validate(), std::invalid_argument);
}
