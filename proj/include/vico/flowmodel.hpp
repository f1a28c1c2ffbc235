#pragma once

#include "vico/common.hpp"

#include <map>
#include <optional>

namespace vico {

// Prompt id reserved for the CFG unconditional branch; models may not define
// a prompt with this name, the mixture behind it is synthesized at load.
inline constexpr const char* kNullPromptId = "null";

// Concept words to preserve (pos) and to modify (neg). Distributions over a
// ConceptSet are ordered pos first, then neg.
struct ConceptSet {
    std::vector<std::string> pos;
    std::vector<std::string> neg;

    std::vector<std::string> ordered() const;
    void validate() const;  // pos/neg disjoint and jointly nonempty
};

// Selects a prompt-conditioned distribution, optionally shifted by a visual
// context vector; concept_set rides along for concept queries.
struct Condition {
    std::string prompt_id;
    std::optional<Vec> context;
    std::optional<ConceptSet> concept_set;

    static Condition unconditional() { return Condition{kNullPromptId, {}, {}}; }
};

// Velocity-field model abstraction the samplers integrate.
class FlowModel {
public:
    virtual ~FlowModel() = default;

    virtual int latent_dim() const = 0;
    virtual int pixel_dim() const = 0;

    virtual Velocity velocity(const Vec& z, double t, const Condition& cond) const = 0;
    // Per-point categorical over the ids in `concepts` (pos then neg order).
    virtual Vec concept_distribution(const Vec& z, double t, const Condition& cond,
                                     const ConceptSet& concepts) const = 0;
    // Categorical per pixel coordinate (rows). The default broadcasts the
    // per-point distribution; models whose pixel and latent resolutions
    // coincide can resolve concepts coordinate-wise.
    virtual Mat concept_distribution_field(const Vec& z, double t, const Condition& cond,
                                           const ConceptSet& concepts) const;
    virtual Vec decode(const Vec& z) const = 0;
    virtual Vec decode_vjp(const Vec& z, const Vec& cotangent) const = 0;

    virtual bool has_velocity_jacobian() const { return false; }
    virtual Mat velocity_jacobian(const Vec& z, double t, const Condition& cond) const;
};

struct MixtureComponent {
    double weight = 0.0;
    Vec mean;
    Mat cov;
    std::string concept_id;
    // Fraction of the (context - mean) translation this component follows when
    // the condition carries a context vector.
    double context_sensitivity = 0.0;
};

// Analytic stand-in for a pretrained flow + decoder: per-prompt Gaussian
// mixtures give closed-form velocity, score, posterior mean, responsibilities;
// a full-column-rank linear map plays the VAE decoder.
class DomainMixtureModel : public FlowModel {
public:
    DomainMixtureModel(int latent_dim, std::map<std::string, std::vector<MixtureComponent>> prompts,
                       Mat decoder_matrix, double default_context_sensitivity);

    // Identity decoder convenience.
    DomainMixtureModel(int latent_dim, std::map<std::string, std::vector<MixtureComponent>> prompts,
                       double default_context_sensitivity = 0.0);

    int latent_dim() const override { return latent_dim_; }
    int pixel_dim() const override { return static_cast<int>(decoder_.rows()); }

    Velocity velocity(const Vec& z, double t, const Condition& cond) const override;
    Vec concept_distribution(const Vec& z, double t, const Condition& cond,
                             const ConceptSet& concepts) const override;
    Vec decode(const Vec& z) const override;
    Vec decode_vjp(const Vec& z, const Vec& cotangent) const override;

    bool has_velocity_jacobian() const override { return true; }
    Mat velocity_jacobian(const Vec& z, double t, const Condition& cond) const override;

    // Closed-form marginal score of the time-t mixture selected by cond.
    Vec score(const Vec& z, double t, const Condition& cond) const;
    // Closed-form E[z_0 | z_t = z] under the rectified-flow coupling.
    Vec posterior_mean_z0(const Vec& z, double t, const Condition& cond) const;

    const std::map<std::string, std::vector<MixtureComponent>>& prompts() const { return prompts_; }
    const Mat& decoder_matrix() const { return decoder_; }
    double default_context_sensitivity() const { return default_context_sensitivity_; }
    const std::vector<std::string>& concept_vocabulary() const { return vocabulary_; }
    bool has_prompt(const std::string& id) const;

    // Time-0 mean of one component after the condition's context shift.
    Vec effective_mean(const std::string& prompt_id, int component_index,
                       const std::optional<Vec>& context) const;

    // Exact draw from a prompt's time-0 mixture.
    Vec sample_prompt(const std::string& prompt_id, Rng& rng) const;

private:
    struct EffectiveComponent {
        double weight;
        Vec mean;
        const Mat* cov;
        const std::string* concept_id;
    };
    std::vector<EffectiveComponent> select(const Condition& cond) const;

    struct TimeSlice;  // responsibilities + per-component conditioning at (z, t)
    TimeSlice slice(const Vec& z, double t, const Condition& cond) const;

    int latent_dim_;
    std::map<std::string, std::vector<MixtureComponent>> prompts_;
    std::vector<MixtureComponent> null_components_;
    Mat decoder_;
    double default_context_sensitivity_;
    std::vector<std::string> vocabulary_;
};

// Dual-modality classifier-free guidance:
// v_null + c_I (v_img - v_null) + c_T (v_full - v_img).
// Exact identity on v_full when both scales are 1.
Velocity cfg_combine(const Velocity& v_null, const Velocity& v_img, const Velocity& v_full,
                     double c_image, double c_text);

}  // namespace vico
