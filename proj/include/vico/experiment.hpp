#pragma once

#include "vico/model_io.hpp"
#include "vico/sampler.hpp"

#include <nlohmann/json.hpp>

namespace vico {

// Where the edited source latent comes from: an explicit vector, or a seeded
// draw from one of the model's domains.
struct SourceSpec {
    enum class Kind { Explicit, Sample };
    Kind kind = Kind::Sample;
    Vec value;
    std::string prompt;
    std::uint64_t seed = 0;
};

struct MetricSpec {
    std::vector<int> preserved_coords;  // empty: all pixel coordinates
    std::string target_mode_prompt;     // empty: target-mode distance reported as 0
    int target_mode_component = 0;
};

struct RunConfig {
    std::string task;
    std::string model_path;
    std::string output_dir;
    int repeats = 1;
    std::uint64_t seed = 0;
    EditConfig edit;
    std::string source_prompt;
    std::string target_prompt;
    std::optional<ConceptSet> concepts;
    std::optional<Vec> context;
    std::optional<SourceSpec> source;
    MetricSpec metrics;
    std::vector<int> ablation_k_values;
    std::vector<int> ablation_n_max_values;

    void validate() const;
};

const std::vector<std::string>& task_names();

RunConfig parse_config(const std::string& path);
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);

// Toy stand-ins for the usual editing metrics: pixel RMSE on preserved
// coordinates, distance of the final latent to the (context-shifted) target
// mode, and the last masked measurement residual.
struct MetricSet {
    double source_rmse_masked = 0.0;
    double source_rmse_unmasked = 0.0;
    double target_mode_distance = 0.0;
    double residual_final = 0.0;
};

struct RepeatRecord {
    std::string arm;
    std::uint64_t seed = 0;
    MetricSet metrics;
    std::string trajectory_file;   // relative to output_dir; empty when not written
    std::string final_state_file;
};

struct RunRecord {
    int schema_version = 1;
    std::string config_digest;
    nlohmann::json config;  // embedded so any record reproduces bitwise
    std::vector<std::uint64_t> seeds;
    std::vector<RepeatRecord> repeats;
    std::map<std::string, MetricSet> arm_medians;
    double wall_time_seconds = 0.0;
};

// Executes `repeats` seeded runs for every arm of the configured task, writes
// the manifest plus per-repeat trajectory/final-state files into output_dir
// (skipped when output_dir is empty), and returns the record. Metrics are
// bitwise deterministic given the config.
RunRecord run_experiment(const RunConfig& config);

nlohmann::json record_to_json(const RunRecord& record);
RunRecord record_from_json(const nlohmann::json& j);
RunRecord load_record(const std::string& path);

std::string show_record(const RunRecord& record);

}  // namespace vico
