#include "vico/model_io.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace vico {

using nlohmann::json;

namespace jsonio {

void require_keys(const json& j, const std::vector<std::string>& allowed,
                  const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
}

Vec parse_vec(const json& j, const std::string& where) {
    if (!j.is_array()) throw std::invalid_argument(where + ": expected an array of numbers");
    Vec v(static_cast<Eigen::Index>(j.size()));
    Eigen::Index i = 0;
    for (const auto& x : j) {
        if (!x.is_number()) throw std::invalid_argument(where + ": expected a number");
        v[i++] = x.get<double>();
    }
    return v;
}

Mat parse_mat(const json& j, const std::string& where) {
    if (!j.is_array() || j.empty())
        throw std::invalid_argument(where + ": expected a non-empty array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    Vec first = parse_vec(j.at(0), where);
    Mat m(rows, first.size());
    m.row(0) = first;
    for (Eigen::Index r = 1; r < rows; ++r) {
        Vec row = parse_vec(j.at(static_cast<std::size_t>(r)), where);
        if (row.size() != m.cols()) throw std::invalid_argument(where + ": ragged matrix rows");
        m.row(r) = row;
    }
    return m;
}

json vec_to_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

json mat_to_json(const Mat& m) {
    json a = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(vec_to_json(m.row(r)));
    return a;
}

}  // namespace jsonio

namespace {

MixtureComponent parse_component(const json& j, double default_sensitivity,
                                 const std::string& where) {
    jsonio::require_keys(j, {"weight", "mean", "cov", "concept", "context_sensitivity"}, where);
    MixtureComponent c;
    c.weight = j.at("weight").get<double>();
    c.mean = jsonio::parse_vec(j.at("mean"), where + ".mean");
    c.cov = jsonio::parse_mat(j.at("cov"), where + ".cov");
    c.concept_id = j.at("concept").get<std::string>();
    c.context_sensitivity =
        j.contains("context_sensitivity") ? j.at("context_sensitivity").get<double>()
                                          : default_sensitivity;
    return c;
}

}  // namespace

DomainMixtureModel model_from_json(const json& j) {
    jsonio::require_keys(
        j, {"schema_version", "latent_dim", "decoder", "context_sensitivity", "prompts"}, "model");
    if (j.at("schema_version").get<int>() != 1)
        throw std::invalid_argument("model: unsupported schema_version");
    const int latent_dim = j.at("latent_dim").get<int>();
    const double default_sensitivity =
        j.contains("context_sensitivity") ? j.at("context_sensitivity").get<double>() : 0.0;

    std::map<std::string, std::vector<MixtureComponent>> prompts;
    for (const auto& [prompt_id, comps] : j.at("prompts").items()) {
        if (!comps.is_array())
            throw std::invalid_argument("model.prompts['" + prompt_id + "']: expected an array");
        std::vector<MixtureComponent> list;
        int idx = 0;
        for (const auto& cj : comps) {
            list.push_back(parse_component(
                cj, default_sensitivity,
                "model.prompts['" + prompt_id + "'][" + std::to_string(idx) + "]"));
            ++idx;
        }
        prompts.emplace(prompt_id, std::move(list));
    }

    Mat decoder = j.contains("decoder")
                      ? jsonio::parse_mat(j.at("decoder"), "model.decoder")
                      : Mat(Mat::Identity(latent_dim, latent_dim));
    return DomainMixtureModel(latent_dim, std::move(prompts), std::move(decoder),
                              default_sensitivity);
}

json model_to_json(const DomainMixtureModel& model) {
    json j;
    j["schema_version"] = 1;
    j["latent_dim"] = model.latent_dim();
    j["context_sensitivity"] = model.default_context_sensitivity();
    j["decoder"] = jsonio::mat_to_json(model.decoder_matrix());
    json prompts = json::object();
    for (const auto& [id, comps] : model.prompts()) {
        json arr = json::array();
        for (const auto& c : comps) {
            json cj;
            cj["weight"] = c.weight;
            cj["mean"] = jsonio::vec_to_json(c.mean);
            cj["cov"] = jsonio::mat_to_json(c.cov);
            cj["concept"] = c.concept_id;
            cj["context_sensitivity"] = c.context_sensitivity;
            arr.push_back(std::move(cj));
        }
        prompts[id] = std::move(arr);
    }
    j["prompts"] = std::move(prompts);
    return j;
}

DomainMixtureModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_model: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("load_model: " + path + ": " + e.what());
    }
    return model_from_json(j);
}

void save_model(const DomainMixtureModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_model: cannot open '" + path + "' for writing");
    out << model_to_json(model).dump(2) << "\n";
}

}  // namespace vico
