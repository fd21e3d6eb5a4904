// Command-line driver for the benchmark pipeline. Each subcommand runs one
// stage against a run directory; later stages read what earlier ones wrote.

#include <exception>
#include <iostream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "dbench/errors.h"
#include "dbench/pipeline.h"

namespace {

struct Options {
    std::string config;
    std::string out = "run";
    std::vector<std::string> sets;
    long long seed = -1;
    int threads = 0;
    std::string method, attribute, model, split_mode;
    int layer = -1, k = 0;
};

dbench::RunConfig resolve(const Options& o) {
    dbench::RunConfig cfg = o.config.empty() ? dbench::RunConfig{} : dbench::load_run_config(o.config);
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw dbench::SpecError("--set expects section.key=value, got '" + s + "'");
        dbench::set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (o.seed >= 0) cfg.run.seed = std::uint64_t(o.seed);
    if (o.threads > 0) cfg.run.threads = o.threads;
    if (!o.method.empty()) cfg.featurizer.method = o.method;
    if (!o.attribute.empty()) cfg.featurizer.attribute = o.attribute;
    if (!o.model.empty()) cfg.run.model = o.model;
    if (!o.split_mode.empty()) cfg.run.split_mode = o.split_mode;
    if (o.layer >= 0) cfg.featurizer.layer = o.layer;
    if (o.k > 0) cfg.featurizer.k = o.k;
    dbench::validate_run_config(cfg);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Feature-disentanglement benchmark pipeline"};
    app.require_subcommand(1);
    Options o;

    using Stage = void (*)(const dbench::RunConfig&, const dbench::RunPaths&, std::ostream&);
    const std::vector<std::tuple<const char*, const char*, Stage>> stages{
        {"gen-world", "Generate the world and intervention tuples", dbench::stage_gen_world},
        {"train-lm", "Train the micro language model on the world", dbench::stage_train_lm},
        {"filter", "Keep the entities and templates the model answers reliably", dbench::stage_filter},
        {"fit-featurizer", "Fit a featurizer per attribute", dbench::stage_fit_featurizer},
        {"evaluate", "Score fitted featurizers on test tuples", dbench::stage_evaluate},
        {"sweep", "Fit and score over a grid of layers and ranks", dbench::stage_sweep},
        {"report", "Collect scores into summary tables and heatmaps", dbench::stage_report},
    };
    Stage chosen = nullptr;
    for (const auto& [name, help, fn] : stages) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", o.config, "Config file")->check(CLI::ExistingFile);
        sub->add_option("-o,--out", o.out, "Run directory")->capture_default_str();
        sub->add_option("--seed", o.seed, "Root seed");
        sub->add_option("--threads", o.threads, "Worker threads");
        sub->add_option("--set", o.sets, "Override a config value (section.key=value)");
        if (std::string(name) != "gen-world" && std::string(name) != "train-lm") {
            sub->add_option("--model", o.model, "lm or planted");
            sub->add_option("--split-mode", o.split_mode, "entity or context");
        }
        if (std::string(name) == "fit-featurizer" || std::string(name) == "evaluate" ||
            std::string(name) == "sweep") {
            sub->add_option("--method", o.method, "Featurizer method");
            sub->add_option("--attribute", o.attribute, "Attribute name or 'all'");
            sub->add_option("--layer", o.layer, "Site layer");
            sub->add_option("--k", o.k, "Subspace rank");
        }
        Stage f = fn;
        sub->callback([&chosen, f] { chosen = f; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    std::exception_ptr error;
    try {
        const auto cfg = resolve(o);
        chosen(cfg, dbench::RunPaths{o.out}, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        error = std::current_exception();
    } catch (...) {
        error = std::current_exception();
    }
    return dbench::exit_code(error);
}
