#include "vico/experiment.hpp"
#include "vico/verify.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

int cmd_run(const std::string& config_path, const std::string& output_dir, bool has_seed,
            std::uint64_t seed, int repeats, bool quiet) {
    vico::RunConfig config = vico::parse_config(config_path);
    if (!output_dir.empty()) config.output_dir = output_dir;
    if (has_seed) config.seed = seed;
    if (repeats > 0) config.repeats = repeats;
    config.validate();

    const vico::RunRecord record = vico::run_experiment(config);
    if (!quiet) {
        std::cout << vico::show_record(record);
        if (!config.output_dir.empty())
            std::cout << "manifest: " << config.output_dir << "/manifest.json\n";
    }
    return 0;
}

int cmd_verify(const std::string& suite, bool quiet) {
    const auto reports = vico::verify::run_suites(suite);
    if (!quiet) vico::verify::print_reports(reports, std::cout);
    for (const auto& rep : reports) {
        if (!rep.all_pass()) {
            std::cerr << "verification failed in suite '" << rep.suite << "'\n";
            return 2;
        }
    }
    return 0;
}

int cmd_show(const std::string& manifest_path) {
    const vico::RunRecord record = vico::load_record(manifest_path);
    std::cout << vico::show_record(record);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Inversion-free context-aware editing sampler on analytic flow models"};
    app.require_subcommand(1);

    std::string config_path, output_dir, suite = "all", manifest_path;
    std::uint64_t seed = 0;
    int repeats = 0;
    bool quiet = false;

    auto* run = app.add_subcommand("run", "execute a run config and write a run record");
    run->add_option("config", config_path, "path to a run config file")->required();
    run->add_option("--output-dir", output_dir, "override the config's output directory");
    auto* seed_opt = run->add_option("--seed", seed, "override the config's base seed");
    run->add_option("--repeats", repeats, "override the config's repeat count");
    run->add_flag("--quiet", quiet, "suppress the summary printout");

    auto* verify = app.add_subcommand("verify", "run oracle cross-check suites");
    verify->add_option("suite", suite,
                       "one of: schedule, flowmodel, tweedie, dps, decomposition, all");
    verify->add_flag("--quiet", quiet, "suppress per-check lines");

    auto* show = app.add_subcommand("show", "summarize a run manifest");
    show->add_option("manifest", manifest_path, "path to manifest.json")->required();

    try {
        app.parse(argc, argv);
        if (run->parsed())
            return cmd_run(config_path, output_dir, seed_opt->count() > 0, seed, repeats, quiet);
        if (verify->parsed()) return cmd_verify(suite, quiet);
        if (show->parsed()) return cmd_show(manifest_path);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
