#pragma once

#include "vico/flowmodel.hpp"

#include <nlohmann/json_fwd.hpp>
#include <string>

namespace vico {

// Model file schema v1; see docs/FORMATS.md. Unknown keys are rejected.
DomainMixtureModel model_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const DomainMixtureModel& model);

DomainMixtureModel load_model(const std::string& path);
void save_model(const DomainMixtureModel& model, const std::string& path);

// Shared strict-parsing helpers (also used by the experiment config reader).
namespace jsonio {
void require_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                  const std::string& where);
Vec parse_vec(const nlohmann::json& j, const std::string& where);
Mat parse_mat(const nlohmann::json& j, const std::string& where);
nlohmann::json vec_to_json(const Vec& v);
nlohmann::json mat_to_json(const Mat& m);
}  // namespace jsonio

}  // namespace vico
