#include "vico/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace vico {

using nlohmann::json;
using jsonio::parse_mat;
using jsonio::parse_vec;
using jsonio::require_keys;
using jsonio::vec_to_json;

const std::vector<std::string>& task_names() {
    static const std::vector<std::string> names = {
        "generate",           "invert-roundtrip",       "edit-flowedit",
        "edit-vicoedit",      "edit-inversion-baseline", "ablation-skip-early",
        "ablation-k"};
    return names;
}

namespace {

bool is_edit_task(const std::string& task) {
    return task == "edit-flowedit" || task == "edit-vicoedit" ||
           task == "edit-inversion-baseline" || task == "ablation-skip-early" ||
           task == "ablation-k";
}

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n == 0) return 0.0;
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void RunConfig::validate() const {
    if (std::find(task_names().begin(), task_names().end(), task) == task_names().end())
        throw std::invalid_argument("config: unknown task '" + task + "'");
    if (model_path.empty()) throw std::invalid_argument("config: model path required");
    if (repeats < 1) throw std::invalid_argument("config: repeats must be >= 1");
    edit.validate();

    const bool needs_source =
        is_edit_task(task) || task == "invert-roundtrip";
    if (needs_source) {
        if (!source) throw std::invalid_argument("config: task '" + task + "' requires a source");
        if (source_prompt.empty())
            throw std::invalid_argument("config: task '" + task + "' requires prompts.source");
    }
    if (is_edit_task(task) || task == "generate") {
        if (target_prompt.empty())
            throw std::invalid_argument("config: task '" + task + "' requires prompts.target");
    }
    if (source) {
        if (source->kind == SourceSpec::Kind::Explicit && source->value.size() == 0)
            throw std::invalid_argument("config: explicit source needs a value");
        if (source->kind == SourceSpec::Kind::Sample && source->prompt.empty())
            throw std::invalid_argument("config: sampled source needs a prompt");
    }
    if ((task == "generate" || task == "invert-roundtrip") && edit.t_start >= 1.0)
        throw std::invalid_argument(
            "config: task '" + task + "' evaluates the velocity at t_start and needs t_start < 1");

    if (task == "ablation-k") {
        if (ablation_k_values.empty())
            throw std::invalid_argument("config: ablation-k requires ablation.k_values");
        for (int k : ablation_k_values)
            if (k < 1) throw std::invalid_argument("config: ablation.k_values entries must be >= 1");
    } else if (!ablation_k_values.empty()) {
        throw std::invalid_argument("config: ablation.k_values only valid for task ablation-k");
    }
    if (task == "ablation-skip-early") {
        if (ablation_n_max_values.empty())
            throw std::invalid_argument(
                "config: ablation-skip-early requires ablation.n_max_values");
        for (int nm : ablation_n_max_values) {
            EditConfig probe = edit;
            probe.n_max = nm;
            probe.validate();
        }
    } else if (!ablation_n_max_values.empty()) {
        throw std::invalid_argument(
            "config: ablation.n_max_values only valid for task ablation-skip-early");
    }
    if (concepts) concepts->validate();
    for (int c : metrics.preserved_coords)
        if (c < 0) throw std::invalid_argument("config: metrics.preserved_coords must be >= 0");
    if (metrics.target_mode_component < 0)
        throw std::invalid_argument("config: metrics.target_mode.component must be >= 0");
}

namespace {

EditConfig edit_from_json(const json& j) {
    require_keys(j,
                 {"n_steps", "n_max", "t_start", "k_samples", "tau", "alpha_guidance",
                  "sigma_meas", "cfg_src_text", "cfg_tar_text", "cfg_tar_image", "guidance_mode"},
                 "config.edit");
    EditConfig e;
    if (j.contains("n_steps")) e.n_steps = j.at("n_steps").get<int>();
    if (j.contains("n_max")) e.n_max = j.at("n_max").get<int>();
    if (j.contains("t_start")) e.t_start = j.at("t_start").get<double>();
    if (j.contains("k_samples")) e.k_samples = j.at("k_samples").get<int>();
    if (j.contains("tau")) e.tau = j.at("tau").get<double>();
    if (j.contains("alpha_guidance")) e.alpha_guidance = j.at("alpha_guidance").get<double>();
    if (j.contains("sigma_meas")) e.sigma_meas = j.at("sigma_meas").get<double>();
    if (j.contains("cfg_src_text")) e.cfg_src_text = j.at("cfg_src_text").get<double>();
    if (j.contains("cfg_tar_text")) e.cfg_tar_text = j.at("cfg_tar_text").get<double>();
    if (j.contains("cfg_tar_image")) e.cfg_tar_image = j.at("cfg_tar_image").get<double>();
    if (j.contains("guidance_mode"))
        e.guidance_mode = guidance_mode_from_string(j.at("guidance_mode").get<std::string>());
    return e;
}

json edit_to_json(const EditConfig& e) {
    json j;
    j["n_steps"] = e.n_steps;
    j["n_max"] = e.n_max;
    j["t_start"] = e.t_start;
    j["k_samples"] = e.k_samples;
    j["tau"] = e.tau;
    j["alpha_guidance"] = e.alpha_guidance;
    j["sigma_meas"] = e.sigma_meas;
    j["cfg_src_text"] = e.cfg_src_text;
    j["cfg_tar_text"] = e.cfg_tar_text;
    j["cfg_tar_image"] = e.cfg_tar_image;
    j["guidance_mode"] = to_string(e.guidance_mode);
    return j;
}

std::vector<std::string> parse_string_list(const json& j, const std::string& where) {
    if (!j.is_array()) throw std::invalid_argument(where + ": expected an array of strings");
    std::vector<std::string> out;
    for (const auto& x : j) {
        if (!x.is_string()) throw std::invalid_argument(where + ": expected a string");
        out.push_back(x.get<std::string>());
    }
    return out;
}

}  // namespace

RunConfig config_from_json(const json& j) {
    require_keys(j,
                 {"schema_version", "task", "model", "output_dir", "repeats", "seed", "edit",
                  "prompts", "concepts", "context", "source", "metrics", "ablation"},
                 "config");
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
        throw std::invalid_argument("config: schema_version 1 required");

    RunConfig c;
    c.task = j.at("task").get<std::string>();
    c.model_path = j.at("model").get<std::string>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("repeats")) c.repeats = j.at("repeats").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("edit")) c.edit = edit_from_json(j.at("edit"));

    if (j.contains("prompts")) {
        const auto& p = j.at("prompts");
        require_keys(p, {"source", "target"}, "config.prompts");
        if (p.contains("source")) c.source_prompt = p.at("source").get<std::string>();
        if (p.contains("target")) c.target_prompt = p.at("target").get<std::string>();
    }
    if (j.contains("concepts")) {
        const auto& cc = j.at("concepts");
        require_keys(cc, {"pos", "neg"}, "config.concepts");
        ConceptSet cs;
        if (cc.contains("pos")) cs.pos = parse_string_list(cc.at("pos"), "config.concepts.pos");
        if (cc.contains("neg")) cs.neg = parse_string_list(cc.at("neg"), "config.concepts.neg");
        c.concepts = std::move(cs);
    }
    if (j.contains("context")) c.context = parse_vec(j.at("context"), "config.context");
    if (j.contains("source")) {
        const auto& s = j.at("source");
        require_keys(s, {"kind", "value", "prompt", "seed"}, "config.source");
        SourceSpec spec;
        const std::string kind = s.at("kind").get<std::string>();
        if (kind == "explicit") {
            spec.kind = SourceSpec::Kind::Explicit;
            if (s.contains("value")) spec.value = parse_vec(s.at("value"), "config.source.value");
        } else if (kind == "sample") {
            spec.kind = SourceSpec::Kind::Sample;
            if (s.contains("prompt")) spec.prompt = s.at("prompt").get<std::string>();
            if (s.contains("seed")) spec.seed = s.at("seed").get<std::uint64_t>();
        } else {
            throw std::invalid_argument("config.source.kind: expected 'explicit' or 'sample'");
        }
        c.source = std::move(spec);
    }
    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        require_keys(m, {"preserved_coords", "target_mode"}, "config.metrics");
        if (m.contains("preserved_coords")) {
            for (const auto& x : m.at("preserved_coords"))
                c.metrics.preserved_coords.push_back(x.get<int>());
        }
        if (m.contains("target_mode")) {
            const auto& tm = m.at("target_mode");
            require_keys(tm, {"prompt", "component"}, "config.metrics.target_mode");
            c.metrics.target_mode_prompt = tm.at("prompt").get<std::string>();
            if (tm.contains("component"))
                c.metrics.target_mode_component = tm.at("component").get<int>();
        }
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        require_keys(a, {"k_values", "n_max_values"}, "config.ablation");
        if (a.contains("k_values"))
            for (const auto& x : a.at("k_values")) c.ablation_k_values.push_back(x.get<int>());
        if (a.contains("n_max_values"))
            for (const auto& x : a.at("n_max_values"))
                c.ablation_n_max_values.push_back(x.get<int>());
    }

    c.validate();
    return c;
}

json config_to_json(const RunConfig& c) {
    json j;
    j["schema_version"] = 1;
    j["task"] = c.task;
    j["model"] = c.model_path;
    j["output_dir"] = c.output_dir;
    j["repeats"] = c.repeats;
    j["seed"] = c.seed;
    j["edit"] = edit_to_json(c.edit);
    json prompts;
    prompts["source"] = c.source_prompt;
    prompts["target"] = c.target_prompt;
    j["prompts"] = std::move(prompts);
    if (c.concepts) {
        json cc;
        cc["pos"] = c.concepts->pos;
        cc["neg"] = c.concepts->neg;
        j["concepts"] = std::move(cc);
    }
    if (c.context) j["context"] = vec_to_json(*c.context);
    if (c.source) {
        json s;
        if (c.source->kind == SourceSpec::Kind::Explicit) {
            s["kind"] = "explicit";
            s["value"] = vec_to_json(c.source->value);
        } else {
            s["kind"] = "sample";
            s["prompt"] = c.source->prompt;
            s["seed"] = c.source->seed;
        }
        j["source"] = std::move(s);
    }
    json m;
    m["preserved_coords"] = c.metrics.preserved_coords;
    if (!c.metrics.target_mode_prompt.empty()) {
        json tm;
        tm["prompt"] = c.metrics.target_mode_prompt;
        tm["component"] = c.metrics.target_mode_component;
        m["target_mode"] = std::move(tm);
    }
    j["metrics"] = std::move(m);
    if (!c.ablation_k_values.empty() || !c.ablation_n_max_values.empty()) {
        json a;
        if (!c.ablation_k_values.empty()) a["k_values"] = c.ablation_k_values;
        if (!c.ablation_n_max_values.empty()) a["n_max_values"] = c.ablation_n_max_values;
        j["ablation"] = std::move(a);
    }
    return j;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("parse_config: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("parse_config: " + path + ": " + e.what());
    }
    return config_from_json(j);
}

namespace {

double rmse(const Vec& a, const Vec& b, const std::vector<int>& coords) {
    if (a.size() != b.size()) throw std::invalid_argument("rmse: size mismatch");
    if (coords.empty()) {
        return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
    }
    double acc = 0.0;
    for (int c : coords) {
        if (c >= a.size()) throw std::invalid_argument("rmse: preserved coordinate out of range");
        const double d = a[c] - b[c];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(coords.size()));
}

void write_trajectory_csv(const std::string& path, const std::vector<StepDiagnostics>& steps) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("run_experiment: cannot write '" + path + "'");
    out.precision(17);
    out << "step,t,v_tilde_norm,v_hat_norm,residual,mask_fraction\n";
    int step = static_cast<int>(steps.size());
    for (const auto& d : steps) {
        out << step << ',' << d.t << ',' << d.v_tilde_norm << ',' << d.v_hat_norm << ','
            << d.masked_residual << ',' << d.mask_fraction << "\n";
        --step;
    }
}

void write_final_state(const std::string& path, const Vec& z_final, const Vec& x_final) {
    json j;
    j["z_final"] = vec_to_json(z_final);
    j["x_final"] = vec_to_json(x_final);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("run_experiment: cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

struct Arm {
    std::string label;
    EditConfig edit;
};

std::vector<Arm> build_arms(const RunConfig& c) {
    std::vector<Arm> arms;
    if (c.task == "ablation-k") {
        for (int k : c.ablation_k_values) {
            EditConfig e = c.edit;
            e.k_samples = k;
            arms.push_back({"K=" + std::to_string(k), e});
        }
    } else if (c.task == "ablation-skip-early") {
        for (int nm : c.ablation_n_max_values) {
            EditConfig e = c.edit;
            e.n_max = nm;
            arms.push_back({"n_max=" + std::to_string(nm), e});
        }
    } else {
        arms.push_back({"main", c.edit});
    }
    return arms;
}

}  // namespace

RunRecord run_experiment(const RunConfig& config) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    const DomainMixtureModel model = load_model(config.model_path);

    if (config.context && config.context->size() != model.latent_dim())
        throw std::invalid_argument("run_experiment: context dimension mismatch");

    const json config_json = config_to_json(config);
    RunRecord record;
    record.config = config_json;
    record.config_digest = hex_digest(fnv1a(config_json.dump()));

    const bool write_files = !config.output_dir.empty();
    if (write_files) std::filesystem::create_directories(config.output_dir);

    const std::vector<Arm> arms = build_arms(config);
    const Condition cond_src{config.source_prompt, {}, {}};
    const Condition cond_tar{config.target_prompt, config.context, config.concepts};
    const ConceptSet* concepts = config.concepts ? &*config.concepts : nullptr;

    for (int r = 0; r < config.repeats; ++r) {
        const std::uint64_t seed_r = derive_seed(config.seed, static_cast<std::uint64_t>(r));
        record.seeds.push_back(seed_r);

        std::optional<Vec> z_src;
        if (config.source) {
            if (config.source->kind == SourceSpec::Kind::Explicit) {
                z_src = config.source->value;
            } else {
                Rng src_rng(derive_seed(config.source->seed, static_cast<std::uint64_t>(r)));
                z_src = model.sample_prompt(config.source->prompt, src_rng);
            }
            if (z_src->size() != model.latent_dim())
                throw std::invalid_argument("run_experiment: source dimension mismatch");
        }
        const std::optional<Vec> x_src =
            z_src ? std::optional<Vec>(model.decode(*z_src)) : std::nullopt;

        for (const Arm& arm : arms) {
            EditConfig ec = arm.edit;
            ec.seed = seed_r;

            RepeatRecord rr;
            rr.arm = arm.label;
            rr.seed = seed_r;

            Vec z_final, x_final;
            double residual_final = 0.0;
            std::vector<StepDiagnostics> steps;

            try {
                if (config.task == "generate") {
                    z_final = generate(model, cond_tar, ec.make_grid(), seed_r);
                } else if (config.task == "invert-roundtrip") {
                    const TimeGrid grid = ec.make_grid();
                    const Vec noise = invert(model, cond_src, grid, *z_src);
                    z_final = generate_from(model, cond_src, grid, noise);
                } else if (config.task == "edit-flowedit") {
                    EditConfig fe = ec;
                    fe.alpha_guidance = 0.0;
                    const Condition plain_tar{config.target_prompt, {}, {}};
                    const EditResult res = vicoedit_run(model, *z_src, cond_src, plain_tar,
                                                        nullptr, *x_src, fe);
                    z_final = res.z_final;
                    steps = res.per_step;
                    residual_final = res.per_step.back().masked_residual;
                } else if (config.task == "edit-inversion-baseline") {
                    const EditResult res = inversion_baseline_run(model, *z_src, cond_src,
                                                                  cond_tar, concepts, *x_src, ec);
                    z_final = res.z_final;
                    steps = res.per_step;
                    residual_final = res.per_step.back().masked_residual;
                } else {
                    const EditResult res =
                        vicoedit_run(model, *z_src, cond_src, cond_tar, concepts, *x_src, ec);
                    z_final = res.z_final;
                    steps = res.per_step;
                    residual_final = res.per_step.back().masked_residual;
                }
            } catch (const std::exception& e) {
                throw std::runtime_error("run_experiment: repeat " + std::to_string(r) + " arm '" +
                                         arm.label + "': " + e.what());
            }

            x_final = model.decode(z_final);
            rr.metrics.residual_final = residual_final;
            if (x_src) {
                rr.metrics.source_rmse_masked =
                    rmse(x_final, *x_src, config.metrics.preserved_coords);
                rr.metrics.source_rmse_unmasked = rmse(x_final, *x_src, {});
            }
            if (!config.metrics.target_mode_prompt.empty()) {
                const Vec mode = model.effective_mean(config.metrics.target_mode_prompt,
                                                      config.metrics.target_mode_component,
                                                      config.context);
                rr.metrics.target_mode_distance = (z_final - mode).norm();
            }
            for (double m : {rr.metrics.source_rmse_masked, rr.metrics.source_rmse_unmasked,
                             rr.metrics.target_mode_distance, rr.metrics.residual_final}) {
                if (!std::isfinite(m))
                    throw std::runtime_error("run_experiment: non-finite metric recorded");
            }

            if (write_files) {
                const std::string tag = sanitize(arm.label) + "_r" + std::to_string(r);
                if (!steps.empty()) {
                    rr.trajectory_file = "trajectory_" + tag + ".csv";
                    write_trajectory_csv(config.output_dir + "/" + rr.trajectory_file, steps);
                }
                rr.final_state_file = "final_" + tag + ".json";
                write_final_state(config.output_dir + "/" + rr.final_state_file, z_final, x_final);
            }
            record.repeats.push_back(std::move(rr));
        }
    }

    for (const Arm& arm : arms) {
        std::vector<double> m1, m2, m3, m4;
        for (const auto& rr : record.repeats) {
            if (rr.arm != arm.label) continue;
            m1.push_back(rr.metrics.source_rmse_masked);
            m2.push_back(rr.metrics.source_rmse_unmasked);
            m3.push_back(rr.metrics.target_mode_distance);
            m4.push_back(rr.metrics.residual_final);
        }
        MetricSet med;
        med.source_rmse_masked = median(m1);
        med.source_rmse_unmasked = median(m2);
        med.target_mode_distance = median(m3);
        med.residual_final = median(m4);
        record.arm_medians.emplace(arm.label, med);
    }

    record.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (write_files) {
        std::ofstream out(config.output_dir + "/manifest.json");
        if (!out)
            throw std::runtime_error("run_experiment: cannot write manifest in '" +
                                     config.output_dir + "'");
        out << record_to_json(record).dump(2) << "\n";
    }
    return record;
}

namespace {

json metrics_to_json(const MetricSet& m) {
    json j;
    j["source_rmse_masked"] = m.source_rmse_masked;
    j["source_rmse_unmasked"] = m.source_rmse_unmasked;
    j["target_mode_distance"] = m.target_mode_distance;
    j["residual_final"] = m.residual_final;
    return j;
}

MetricSet metrics_from_json(const json& j) {
    require_keys(j,
                 {"source_rmse_masked", "source_rmse_unmasked", "target_mode_distance",
                  "residual_final"},
                 "manifest.metrics");
    MetricSet m;
    m.source_rmse_masked = j.at("source_rmse_masked").get<double>();
    m.source_rmse_unmasked = j.at("source_rmse_unmasked").get<double>();
    m.target_mode_distance = j.at("target_mode_distance").get<double>();
    m.residual_final = j.at("residual_final").get<double>();
    return m;
}

}  // namespace

json record_to_json(const RunRecord& record) {
    json j;
    j["schema_version"] = record.schema_version;
    j["config_digest"] = record.config_digest;
    j["config"] = record.config;
    j["seeds"] = record.seeds;
    json reps = json::array();
    for (const auto& rr : record.repeats) {
        json r;
        r["arm"] = rr.arm;
        r["seed"] = rr.seed;
        r["metrics"] = metrics_to_json(rr.metrics);
        r["trajectory_file"] = rr.trajectory_file;
        r["final_state_file"] = rr.final_state_file;
        reps.push_back(std::move(r));
    }
    j["repeats"] = std::move(reps);
    json medians;
    for (const auto& [arm, m] : record.arm_medians) medians[arm] = metrics_to_json(m);
    j["arm_medians"] = std::move(medians);
    j["wall_time_seconds"] = record.wall_time_seconds;
    return j;
}

RunRecord record_from_json(const json& j) {
    require_keys(j,
                 {"schema_version", "config_digest", "config", "seeds", "repeats", "arm_medians",
                  "wall_time_seconds"},
                 "manifest");
    RunRecord record;
    record.schema_version = j.at("schema_version").get<int>();
    if (record.schema_version != 1)
        throw std::invalid_argument("manifest: unsupported schema_version");
    record.config_digest = j.at("config_digest").get<std::string>();
    record.config = j.at("config");
    if (hex_digest(fnv1a(record.config.dump())) != record.config_digest)
        throw std::invalid_argument("manifest: config digest mismatch");
    for (const auto& s : j.at("seeds")) record.seeds.push_back(s.get<std::uint64_t>());
    for (const auto& r : j.at("repeats")) {
        require_keys(r, {"arm", "seed", "metrics", "trajectory_file", "final_state_file"},
                     "manifest.repeats");
        RepeatRecord rr;
        rr.arm = r.at("arm").get<std::string>();
        rr.seed = r.at("seed").get<std::uint64_t>();
        rr.metrics = metrics_from_json(r.at("metrics"));
        rr.trajectory_file = r.at("trajectory_file").get<std::string>();
        rr.final_state_file = r.at("final_state_file").get<std::string>();
        record.repeats.push_back(std::move(rr));
    }
    for (const auto& [arm, m] : j.at("arm_medians").items())
        record.arm_medians.emplace(arm, metrics_from_json(m));
    record.wall_time_seconds = j.at("wall_time_seconds").get<double>();
    return record;
}

RunRecord load_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_record: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("load_record: " + path + ": " + e.what());
    }
    return record_from_json(j);
}

std::string show_record(const RunRecord& record) {
    std::ostringstream os;
    os.precision(6);
    os << "task: " << record.config.value("task", std::string("?")) << "\n";
    os << "config digest: " << record.config_digest << "\n";
    os << "repeats: " << record.repeats.size() << " (" << record.seeds.size() << " seeds)\n";
    os << "wall time: " << record.wall_time_seconds << " s\n";
    for (const auto& [arm, m] : record.arm_medians) {
        os << "arm " << arm << ": median source_rmse_masked=" << m.source_rmse_masked
           << " source_rmse_unmasked=" << m.source_rmse_unmasked
           << " target_mode_distance=" << m.target_mode_distance
           << " residual_final=" << m.residual_final << "\n";
    }
    return os.str();
}

}  // namespace vico
