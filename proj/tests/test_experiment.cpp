#include "vico/experiment.hpp"

#include "toy_models.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace vico;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("vico_" + tag + "_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

json base_config(const std::string& model_path) {
    json j;
    j["schema_version"] = 1;
    j["task"] = "edit-vicoedit";
    j["model"] = model_path;
    j["repeats"] = 2;
    j["seed"] = 11;
    j["edit"] = {{"n_steps", 50},       {"n_max", 47},        {"k_samples", 3},
                 {"tau", 0.25},         {"alpha_guidance", 0.5}, {"sigma_meas", 0.0},
                 {"cfg_src_text", 1.5}, {"cfg_tar_text", 5.5},   {"cfg_tar_image", 5.5}};
    j["prompts"] = {{"source", "src"}, {"target", "tar"}};
    j["concepts"] = {{"pos", {"background"}}, {"neg", {"subject"}}};
    j["context"] = {2.0, 3.0};
    j["source"] = {{"kind", "sample"}, {"prompt", "src"}, {"seed", 5}};
    j["metrics"] = {{"preserved_coords", {0}},
                    {"target_mode", {{"prompt", "tar"}, {"component", 1}}}};
    return j;
}

std::string write_two_domain_model(const TempDir& dir) {
    const std::string path = (dir.path / "model.json").string();
    save_model(testing::two_domain_model(), path);
    return path;
}

}  // namespace

TEST_CASE("config parsing") {
    TempDir dir("cfg");
    const std::string model_path = write_two_domain_model(dir);

    SUBCASE("a hyper-parameter-table config is accepted") {
        const RunConfig c = config_from_json(base_config(model_path));
        CHECK(c.task == "edit-vicoedit");
        CHECK(c.edit.n_steps == 50);
        CHECK(c.edit.n_max == 47);
        CHECK(c.edit.k_samples == 3);
        CHECK(c.edit.tau == 0.25);
        CHECK(c.edit.cfg_src_text == 1.5);
        CHECK(c.concepts.has_value());
        CHECK(c.context.has_value());
    }

    SUBCASE("tau out of range names the field") {
        auto j = base_config(model_path);
        j["edit"]["tau"] = 1.5;
        try {
            config_from_json(j);
            CHECK(false);
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("tau") != std::string::npos);
        }
    }

    SUBCASE("unknown keys are rejected in strict mode") {
        auto j = base_config(model_path);
        j["edit"]["taus"] = 0.3;
        try {
            config_from_json(j);
            CHECK(false);
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("taus") != std::string::npos);
        }

        auto top = base_config(model_path);
        top["colour"] = "blue";
        CHECK_THROWS_AS(config_from_json(top), std::invalid_argument);
    }

    SUBCASE("task-specific requirements") {
        auto j = base_config(model_path);
        j["task"] = "ablation-k";
        CHECK_THROWS_AS(config_from_json(j), std::invalid_argument);  // missing k_values
        j["ablation"] = {{"k_values", {1, 3}}};
        CHECK_NOTHROW(config_from_json(j));

        auto gen = base_config(model_path);
        gen["task"] = "generate";
        CHECK_THROWS_AS(config_from_json(gen), std::invalid_argument);  // t_start = 1
        gen["edit"]["t_start"] = 0.999;
        CHECK_NOTHROW(config_from_json(gen));

        auto bad = base_config(model_path);
        bad["task"] = "paint";
        CHECK_THROWS_AS(config_from_json(bad), std::invalid_argument);
    }

    SUBCASE("file round trip") {
        TempDir dir2("cfg_rt");
        const std::string cfg_path = (dir2.path / "config.json").string();
        {
            std::ofstream out(cfg_path);
            out << base_config(model_path).dump(2);
        }
        const RunConfig c = parse_config(cfg_path);
        CHECK(c.model_path == model_path);
        CHECK_THROWS_AS(parse_config((dir2.path / "missing.json").string()), std::runtime_error);
    }
}

TEST_CASE("identity-edit experiment reports zero source error") {
    TempDir dir("identity");
    const std::string model_path = write_two_domain_model(dir);
    auto j = base_config(model_path);
    j["task"] = "edit-vicoedit";
    j["edit"]["alpha_guidance"] = 0.0;
    j["edit"]["cfg_src_text"] = 1.0;
    j["edit"]["cfg_tar_text"] = 1.0;
    j["edit"]["cfg_tar_image"] = 1.0;
    j["prompts"]["target"] = "src";
    j.erase("concepts");
    j.erase("context");
    j["metrics"].erase("target_mode");
    j["repeats"] = 3;

    RunConfig c = config_from_json(j);
    c.output_dir.clear();
    const RunRecord record = run_experiment(c);
    REQUIRE(record.repeats.size() == 3);
    for (const auto& rr : record.repeats) {
        CHECK(rr.metrics.source_rmse_unmasked <= 1e-10);
        CHECK(rr.metrics.source_rmse_masked <= 1e-10);
    }
}

TEST_CASE("experiments are bitwise reproducible") {
    TempDir dir("repro");
    const std::string model_path = write_two_domain_model(dir);
    RunConfig c = config_from_json(base_config(model_path));
    c.output_dir.clear();
    c.repeats = 2;

    const RunRecord r1 = run_experiment(c);
    const RunRecord r2 = run_experiment(c);
    REQUIRE(r1.repeats.size() == r2.repeats.size());
    for (std::size_t i = 0; i < r1.repeats.size(); ++i) {
        CHECK(r1.repeats[i].metrics.source_rmse_masked == r2.repeats[i].metrics.source_rmse_masked);
        CHECK(r1.repeats[i].metrics.target_mode_distance ==
              r2.repeats[i].metrics.target_mode_distance);
        CHECK(r1.repeats[i].metrics.residual_final == r2.repeats[i].metrics.residual_final);
    }
    CHECK(r1.config_digest == r2.config_digest);
}

TEST_CASE("ablation arms share matched seeds") {
    TempDir dir("ablk");
    const std::string model_path = write_two_domain_model(dir);
    auto j = base_config(model_path);
    j["task"] = "ablation-k";
    j["ablation"] = {{"k_values", {1, 3}}};
    j["repeats"] = 2;
    RunConfig c = config_from_json(j);
    c.output_dir.clear();

    const RunRecord record = run_experiment(c);
    REQUIRE(record.repeats.size() == 4);  // 2 arms x 2 repeats
    std::map<std::string, std::vector<std::uint64_t>> seeds_by_arm;
    for (const auto& rr : record.repeats) seeds_by_arm[rr.arm].push_back(rr.seed);
    REQUIRE(seeds_by_arm.size() == 2);
    CHECK(seeds_by_arm.at("K=1") == seeds_by_arm.at("K=3"));
    CHECK(record.arm_medians.count("K=1") == 1);
    CHECK(record.arm_medians.count("K=3") == 1);
}

TEST_CASE("run records persist and round-trip") {
    TempDir dir("record");
    const std::string model_path = write_two_domain_model(dir);
    auto j = base_config(model_path);
    j["repeats"] = 2;
    RunConfig c = config_from_json(j);
    c.output_dir = (dir.path / "out").string();

    const RunRecord record = run_experiment(c);
    const std::string manifest = c.output_dir + "/manifest.json";
    CHECK(fs::exists(manifest));
    for (const auto& rr : record.repeats) {
        CHECK(fs::exists(fs::path(c.output_dir) / rr.trajectory_file));
        CHECK(fs::exists(fs::path(c.output_dir) / rr.final_state_file));
    }

    // Trajectory dumps are CSV with the documented header.
    {
        std::ifstream in(fs::path(c.output_dir) / record.repeats.front().trajectory_file);
        std::string header;
        std::getline(in, header);
        CHECK(header == "step,t,v_tilde_norm,v_hat_norm,residual,mask_fraction");
        int rows = 0;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 47);
    }

    const RunRecord loaded = load_record(manifest);
    CHECK(record_to_json(loaded) == record_to_json(record));

    // The embedded config reproduces the run bitwise.
    RunConfig replay = config_from_json(loaded.config);
    replay.output_dir.clear();
    const RunRecord again = run_experiment(replay);
    REQUIRE(again.repeats.size() == record.repeats.size());
    for (std::size_t i = 0; i < again.repeats.size(); ++i)
        CHECK(again.repeats[i].metrics.source_rmse_masked ==
              record.repeats[i].metrics.source_rmse_masked);

    // Tampered digests are caught.
    auto tampered = record_to_json(record);
    tampered["config"]["seed"] = 12345;
    CHECK_THROWS_AS(record_from_json(tampered), std::invalid_argument);
}

TEST_CASE("show summarizes a record") {
    TempDir dir("show");
    const std::string model_path = write_two_domain_model(dir);
    RunConfig c = config_from_json(base_config(model_path));
    c.output_dir.clear();
    c.repeats = 1;
    const RunRecord record = run_experiment(c);
    const std::string text = show_record(record);
    CHECK(text.find("edit-vicoedit") != std::string::npos);
    CHECK(text.find("arm main") != std::string::npos);
    CHECK(text.find("source_rmse_masked") != std::string::npos);
}

TEST_CASE("generate and invert-roundtrip tasks") {
    TempDir dir("gen");
    const std::string model_path = write_two_domain_model(dir);

    auto j = base_config(model_path);
    j["task"] = "generate";
    j["edit"]["t_start"] = 0.999;
    j.erase("concepts");
    j.erase("source");
    RunConfig c = config_from_json(j);
    c.output_dir.clear();
    c.repeats = 3;
    const RunRecord record = run_experiment(c);
    CHECK(record.repeats.size() == 3);
    for (const auto& rr : record.repeats) CHECK(std::isfinite(rr.metrics.target_mode_distance));

    auto r = base_config(model_path);
    r["task"] = "invert-roundtrip";
    r["edit"]["t_start"] = 0.999;
    r["edit"]["n_steps"] = 400;
    r["edit"]["n_max"] = 399;
    r.erase("concepts");
    r.erase("context");
    r["metrics"].erase("target_mode");
    RunConfig rc = config_from_json(r);
    rc.output_dir.clear();
    rc.repeats = 2;
    const RunRecord round = run_experiment(rc);
    for (const auto& rr : round.repeats) CHECK(rr.metrics.source_rmse_unmasked <= 0.05);
}
