#include "vico/flowmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace vico {

std::vector<std::string> ConceptSet::ordered() const {
    std::vector<std::string> ids = pos;
    ids.insert(ids.end(), neg.begin(), neg.end());
    return ids;
}

void ConceptSet::validate() const {
    if (pos.empty() && neg.empty())
        throw std::invalid_argument("ConceptSet: pos and neg are jointly empty");
    std::set<std::string> seen;
    for (const auto& id : ordered()) {
        if (id.empty()) throw std::invalid_argument("ConceptSet: empty concept id");
        if (!seen.insert(id).second)
            throw std::invalid_argument("ConceptSet: duplicate concept id '" + id + "'");
    }
}

Mat FlowModel::velocity_jacobian(const Vec&, double, const Condition&) const {
    throw std::runtime_error("velocity_jacobian: not available for this model");
}

namespace {

void check_time(double t) {
    if (!(t >= 0.0) || t >= 1.0)
        throw std::domain_error("model evaluation requires t in [0, 1)");
}

}  // namespace

DomainMixtureModel::DomainMixtureModel(int latent_dim,
                                       std::map<std::string, std::vector<MixtureComponent>> prompts,
                                       Mat decoder_matrix, double default_context_sensitivity)
    : latent_dim_(latent_dim),
      prompts_(std::move(prompts)),
      decoder_(std::move(decoder_matrix)),
      default_context_sensitivity_(default_context_sensitivity) {
    if (latent_dim_ < 1) throw std::invalid_argument("DomainMixtureModel: latent_dim must be >= 1");
    if (prompts_.empty()) throw std::invalid_argument("DomainMixtureModel: no prompts");
    if (prompts_.count(kNullPromptId))
        throw std::invalid_argument("DomainMixtureModel: prompt id 'null' is reserved");
    if (decoder_.cols() != latent_dim_)
        throw std::invalid_argument("DomainMixtureModel: decoder column count != latent_dim");
    Eigen::ColPivHouseholderQR<Mat> qr(decoder_);
    if (qr.rank() != latent_dim_)
        throw std::invalid_argument("DomainMixtureModel: decoder must have full column rank");
    if (default_context_sensitivity_ < 0.0 || default_context_sensitivity_ > 1.0)
        throw std::invalid_argument("DomainMixtureModel: context sensitivity must lie in [0, 1]");

    std::set<std::string> vocab;
    for (auto& [id, comps] : prompts_) {
        if (comps.empty())
            throw std::invalid_argument("DomainMixtureModel: prompt '" + id + "' has no components");
        double total = 0.0;
        for (auto& c : comps) {
            if (!(c.weight > 0.0))
                throw std::invalid_argument("DomainMixtureModel: weights must be positive");
            total += c.weight;
            if (c.mean.size() != latent_dim_)
                throw std::invalid_argument("DomainMixtureModel: mean dimension mismatch");
            if (c.cov.rows() != latent_dim_ || c.cov.cols() != latent_dim_)
                throw std::invalid_argument("DomainMixtureModel: covariance shape mismatch");
            const double scale = std::max(1.0, c.cov.cwiseAbs().maxCoeff());
            if ((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
                throw std::invalid_argument("DomainMixtureModel: covariance not symmetric");
            c.cov = 0.5 * (c.cov + c.cov.transpose());
            if (Eigen::LLT<Mat>(c.cov).info() != Eigen::Success)
                throw std::invalid_argument("DomainMixtureModel: covariance not positive definite");
            if (c.concept_id.empty())
                throw std::invalid_argument("DomainMixtureModel: component without concept id");
            if (c.context_sensitivity < 0.0 || c.context_sensitivity > 1.0)
                throw std::invalid_argument("DomainMixtureModel: context sensitivity must lie in [0, 1]");
            vocab.insert(c.concept_id);
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument("DomainMixtureModel: weights of prompt '" + id +
                                        "' must sum to 1 within 1e-12");
    }
    vocabulary_.assign(vocab.begin(), vocab.end());

    // The unconditional branch: weight-averaged union of all prompt mixtures.
    const double inv_p = 1.0 / static_cast<double>(prompts_.size());
    for (const auto& [id, comps] : prompts_) {
        for (const auto& c : comps) {
            MixtureComponent pooled = c;
            pooled.weight = c.weight * inv_p;
            null_components_.push_back(std::move(pooled));
        }
    }
}

DomainMixtureModel::DomainMixtureModel(int latent_dim,
                                       std::map<std::string, std::vector<MixtureComponent>> prompts,
                                       double default_context_sensitivity)
    : DomainMixtureModel(latent_dim, std::move(prompts), Mat::Identity(latent_dim, latent_dim),
                         default_context_sensitivity) {}

bool DomainMixtureModel::has_prompt(const std::string& id) const {
    return id == kNullPromptId || prompts_.count(id) > 0;
}

std::vector<DomainMixtureModel::EffectiveComponent> DomainMixtureModel::select(
    const Condition& cond) const {
    const std::vector<MixtureComponent>* comps = nullptr;
    if (cond.prompt_id == kNullPromptId) {
        comps = &null_components_;
    } else {
        auto it = prompts_.find(cond.prompt_id);
        if (it == prompts_.end())
            throw std::runtime_error("DomainMixtureModel: unknown prompt_id '" + cond.prompt_id + "'");
        comps = &it->second;
    }
    if (cond.context && cond.context->size() != latent_dim_)
        throw std::invalid_argument("Condition: context dimension mismatch");

    std::vector<EffectiveComponent> out;
    out.reserve(comps->size());
    for (const auto& c : *comps) {
        EffectiveComponent e{c.weight, c.mean, &c.cov, &c.concept_id};
        if (cond.context)
            e.mean = c.mean + c.context_sensitivity * (*cond.context - c.mean);
        out.push_back(std::move(e));
    }
    return out;
}

struct DomainMixtureModel::TimeSlice {
    std::vector<EffectiveComponent> comps;
    std::vector<double> resp;
    std::vector<Vec> whitened;              // S_k^{-1} (z - (1-t) mu_k)
    std::vector<Eigen::LDLT<Mat>> solvers;  // factorization of S_k
    double t = 0.0;
};

DomainMixtureModel::TimeSlice DomainMixtureModel::slice(const Vec& z, double t,
                                                        const Condition& cond) const {
    check_time(t);
    if (z.size() != latent_dim_)
        throw std::invalid_argument("DomainMixtureModel: state dimension mismatch");

    TimeSlice s;
    s.t = t;
    s.comps = select(cond);
    const std::size_t K = s.comps.size();
    s.resp.resize(K);
    s.whitened.resize(K);
    s.solvers.reserve(K);

    const double om = 1.0 - t;
    std::vector<double> log_resp(K);
    for (std::size_t k = 0; k < K; ++k) {
        const Mat S = om * om * (*s.comps[k].cov) + t * t * Mat::Identity(latent_dim_, latent_dim_);
        s.solvers.emplace_back(S);
        const Vec delta = z - om * s.comps[k].mean;
        s.whitened[k] = s.solvers.back().solve(delta);
        double log_det = 0.0;
        for (Eigen::Index i = 0; i < latent_dim_; ++i)
            log_det += std::log(s.solvers.back().vectorD()[i]);
        log_resp[k] = std::log(s.comps[k].weight) - 0.5 * delta.dot(s.whitened[k]) - 0.5 * log_det;
    }

    const double max_lr = *std::max_element(log_resp.begin(), log_resp.end());
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        s.resp[k] = std::exp(log_resp[k] - max_lr);
        total += s.resp[k];
    }
    for (double& r : s.resp) r /= total;
    return s;
}

Velocity DomainMixtureModel::velocity(const Vec& z, double t, const Condition& cond) const {
    const TimeSlice s = slice(z, t, cond);
    const double om = 1.0 - t;
    Vec u = Vec::Zero(latent_dim_);
    for (std::size_t k = 0; k < s.comps.size(); ++k) {
        // E[z1 | z, k] - E[z0 | z, k]
        const Vec cond_z1 = t * s.whitened[k];
        const Vec cond_z0 = s.comps[k].mean + om * (*s.comps[k].cov * s.whitened[k]);
        u += s.resp[k] * (cond_z1 - cond_z0);
    }
    return u;
}

Vec DomainMixtureModel::score(const Vec& z, double t, const Condition& cond) const {
    const TimeSlice s = slice(z, t, cond);
    Vec g = Vec::Zero(latent_dim_);
    for (std::size_t k = 0; k < s.comps.size(); ++k) g -= s.resp[k] * s.whitened[k];
    return g;
}

Vec DomainMixtureModel::posterior_mean_z0(const Vec& z, double t, const Condition& cond) const {
    const TimeSlice s = slice(z, t, cond);
    const double om = 1.0 - t;
    Vec m = Vec::Zero(latent_dim_);
    for (std::size_t k = 0; k < s.comps.size(); ++k)
        m += s.resp[k] * (s.comps[k].mean + om * (*s.comps[k].cov * s.whitened[k]));
    return m;
}

Vec DomainMixtureModel::concept_distribution(const Vec& z, double t, const Condition& cond,
                                             const ConceptSet& concepts) const {
    concepts.validate();
    const auto order = concepts.ordered();
    for (const auto& id : order) {
        if (!std::binary_search(vocabulary_.begin(), vocabulary_.end(), id))
            throw std::runtime_error("DomainMixtureModel: concept '" + id + "' unknown to model");
    }

    const TimeSlice s = slice(z, t, cond);
    Vec d = Vec::Zero(static_cast<Eigen::Index>(order.size()));
    for (std::size_t k = 0; k < s.comps.size(); ++k) {
        const auto it = std::find(order.begin(), order.end(), *s.comps[k].concept_id);
        if (it == order.end()) continue;  // component's concept not queried
        d[static_cast<Eigen::Index>(it - order.begin())] += s.resp[k];
    }
    const double total = d.sum();
    if (!(total > 0.0))
        throw std::runtime_error(
            "DomainMixtureModel: no queried concept appears in the conditioned mixture");
    return d / total;
}

Vec DomainMixtureModel::decode(const Vec& z) const {
    if (z.size() != latent_dim_)
        throw std::invalid_argument("decode: state dimension mismatch");
    return decoder_ * z;
}

Vec DomainMixtureModel::decode_vjp(const Vec& z, const Vec& cotangent) const {
    if (z.size() != latent_dim_)
        throw std::invalid_argument("decode_vjp: state dimension mismatch");
    if (cotangent.size() != decoder_.rows())
        throw std::invalid_argument("decode_vjp: cotangent dimension mismatch");
    return decoder_.transpose() * cotangent;
}

Mat DomainMixtureModel::velocity_jacobian(const Vec& z, double t, const Condition& cond) const {
    const TimeSlice s = slice(z, t, cond);
    const double om = 1.0 - t;
    const Mat eye = Mat::Identity(latent_dim_, latent_dim_);

    // score = sum_k r_k grad log N_k with grad log N_k = -whitened_k
    Vec score_vec = Vec::Zero(latent_dim_);
    for (std::size_t k = 0; k < s.comps.size(); ++k) score_vec -= s.resp[k] * s.whitened[k];

    Mat jac = Mat::Zero(latent_dim_, latent_dim_);
    for (std::size_t k = 0; k < s.comps.size(); ++k) {
        const Mat S_inv = s.solvers[k].solve(eye);
        const Mat A_k = (t * eye - om * (*s.comps[k].cov)) * S_inv;
        const Vec u_k =
            t * s.whitened[k] - (s.comps[k].mean + om * (*s.comps[k].cov * s.whitened[k]));
        const Vec grad_log_r = -s.whitened[k] - score_vec;
        jac += s.resp[k] * (A_k + u_k * grad_log_r.transpose());
    }
    return jac;
}

Vec DomainMixtureModel::effective_mean(const std::string& prompt_id, int component_index,
                                       const std::optional<Vec>& context) const {
    Condition cond{prompt_id, context, {}};
    const auto comps = select(cond);
    if (component_index < 0 || component_index >= static_cast<int>(comps.size()))
        throw std::invalid_argument("effective_mean: component index out of range");
    return comps[static_cast<std::size_t>(component_index)].mean;
}

Vec DomainMixtureModel::sample_prompt(const std::string& prompt_id, Rng& rng) const {
    const auto comps = select(Condition{prompt_id, {}, {}});
    std::vector<double> weights;
    weights.reserve(comps.size());
    for (const auto& c : comps) weights.push_back(c.weight);
    const auto k = static_cast<std::size_t>(rng.categorical(weights));
    const Eigen::LLT<Mat> llt(*comps[k].cov);
    return comps[k].mean + llt.matrixL() * rng.normal_vec(latent_dim_);
}

Velocity cfg_combine(const Velocity& v_null, const Velocity& v_img, const Velocity& v_full,
                     double c_image, double c_text) {
    if (v_null.size() != v_img.size() || v_null.size() != v_full.size())
        throw std::invalid_argument("cfg_combine: dimension mismatch");
    if (c_image == 1.0 && c_text == 1.0) return v_full;  // exact telescoping
    return v_null + c_image * (v_img - v_null) + c_text * (v_full - v_img);
}

}  // namespace vico
