#pragma once

#include "vico/flowmodel.hpp"

namespace vico::testing {

inline MixtureComponent component(double w, Vec mean, Mat cov, std::string concept_id,
                                  double sensitivity = 0.0) {
    MixtureComponent c;
    c.weight = w;
    c.mean = std::move(mean);
    c.cov = std::move(cov);
    c.concept_id = std::move(concept_id);
    c.context_sensitivity = sensitivity;
    return c;
}

// Single standard normal prior under prompt "prior".
inline DomainMixtureModel standard_normal_model(int dim = 2) {
    std::map<std::string, std::vector<MixtureComponent>> prompts;
    prompts["prior"] = {component(1.0, Vec::Zero(dim), Mat::Identity(dim, dim), "all")};
    return DomainMixtureModel(dim, std::move(prompts));
}

inline DomainMixtureModel single_gaussian_model(const Vec& mean, const Mat& cov) {
    std::map<std::string, std::vector<MixtureComponent>> prompts;
    prompts["prior"] = {component(1.0, mean, cov, "all")};
    return DomainMixtureModel(static_cast<int>(mean.size()), std::move(prompts));
}

// The 3-component anisotropic 2D mixture used across cross-checks.
inline DomainMixtureModel mixture3_model() {
    Mat c0(2, 2), c1(2, 2), c2(2, 2);
    c0 << 0.30, 0.10, 0.10, 0.20;
    c1 << 0.15, -0.05, -0.05, 0.25;
    c2 << 0.40, 0.00, 0.00, 0.10;
    std::map<std::string, std::vector<MixtureComponent>> prompts;
    prompts["p"] = {component(0.5, Vec{{1.5, -0.5}}, c0, "c0"),
                    component(0.3, Vec{{-1.0, 1.0}}, c1, "c1"),
                    component(0.2, Vec{{0.0, 2.0}}, c2, "c2")};
    return DomainMixtureModel(2, std::move(prompts));
}

// Editing toy: a source domain and a target domain that share the background
// coordinate (index 0) but move the subject coordinate (index 1); the target
// prompt keeps a background-anchored component so concept responsibilities are
// informative along the edit trajectory.
inline DomainMixtureModel two_domain_model() {
    const Mat cov = 0.02 * Mat::Identity(2, 2);
    std::map<std::string, std::vector<MixtureComponent>> prompts;
    prompts["src"] = {component(1.0, Vec{{2.0, -1.0}}, cov, "background", 0.0)};
    prompts["tar"] = {component(0.35, Vec{{2.0, -1.0}}, cov, "background", 0.0),
                      component(0.65, Vec{{2.0, 1.5}}, cov, "subject", 0.6)};
    return DomainMixtureModel(2, std::move(prompts));
}

inline Vec two_domain_context() { return Vec{{2.0, 3.0}}; }
inline ConceptSet two_domain_concepts() { return ConceptSet{{"background"}, {"subject"}}; }

class ZeroVelocityModel final : public FlowModel {
public:
    explicit ZeroVelocityModel(int dim) : dim_(dim) {}
    int latent_dim() const override { return dim_; }
    int pixel_dim() const override { return dim_; }
    Velocity velocity(const Vec& z, double, const Condition&) const override {
        return Vec::Zero(z.size());
    }
    Vec concept_distribution(const Vec&, double, const Condition&,
                             const ConceptSet& concepts) const override {
        const auto n = static_cast<Eigen::Index>(concepts.ordered().size());
        return Vec::Constant(n, 1.0 / static_cast<double>(n));
    }
    Vec decode(const Vec& z) const override { return z; }
    Vec decode_vjp(const Vec&, const Vec& c) const override { return c; }
    bool has_velocity_jacobian() const override { return true; }
    Mat velocity_jacobian(const Vec&, double, const Condition&) const override {
        return Mat::Zero(dim_, dim_);
    }

private:
    int dim_;
};

}  // namespace vico::testing
