#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dbench/featurizers.h"
#include "dbench/lm.h"
#include "dbench/planted.h"
#include "dbench/world.h"

namespace dbench {

// Every pipeline knob, grouped by config section. Defaults here are the
// recorded defaults echoed into each output directory.
struct RunConfig {
    struct Run {
        std::uint64_t seed = 0;
        std::string split_mode = "entity";  // entity | context
        int threads = 1;
        std::string model = "lm";     // lm | planted
        std::string world = "auto";   // filter | world | auto (filter for lm, world for planted)
        std::string match = "first_token";  // first_token | exact
    } run;

    struct WorldSection {
        std::string spec;  // JSON world spec; empty uses the built-in defaults
        int n_entities = 0;  // > 0 overrides the spec
        int n_attribute_templates = 0;
        int n_entity_templates = 0;
    } world;

    struct Tuples {
        int n_train = 2000;
        int n_dev = 400;
        int n_test = 400;
        double entity_source_rate = 0.5;
        bool distinct_values = true;
    } tuples;

    LmConfig lm;
    LmTrainConfig lm_train;

    PlantedConfig planted;

    struct Filter {
        double threshold = 0.95;
    } filter;

    struct Featurizer {
        std::string method = "das";  // full-rep | pca | sae | rlap | das | mdas | dbm | mdbm
        std::string attribute = "all";
        int layer = 3;
        int k = 8;
        int steps = 1000;
        int batch_size = 64;
        double lr = 1e-3;
        double lambda = -1.0;
        double t_start = 1e-2;
        double t_end = 1e-7;
        double eps = 0.5;
        bool l1_on_logits = false;
        int sae_latent = 0;
        double sae_l1 = 1e-3;
        int sae_steps = 3000;
        double sae_lr = 1e-3;
        int rlap_iterations = 100;
        int rlap_probe_steps = 10;
        double rlap_lr = 0.05;
        double rlap_w_lr = 1.0;
        double select_c = 1.0;
        double select_eps = 1e-3;
    } featurizer;

    struct Sweep {
        std::vector<int> layers;  // empty: every layer
        std::vector<int> ks{2, 4, 8, 16, 32};
    } sweep;

    // Seed of a pipeline stage, derived from the root seed.
    std::uint64_t stage_seed(const std::string& stage) const;
    SplitMode split_mode() const { return parse_split_mode(run.split_mode); }
    bool uses_planted() const { return run.model == "planted"; }
};

// Parses "[section]" headers and "key = value" lines; '#' starts a comment.
// Unknown sections or keys, malformed values and duplicate keys throw
// SpecError naming the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& file);
// Sets one "section.key" to a value, with the parser's checks. Does not
// validate the whole config.
void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

// Every key with its resolved value, in the same format parse_run_config reads.
std::string dump_run_config(const RunConfig& cfg);

// Throws SpecError for values outside their allowed sets or ranges.
void validate_run_config(const RunConfig& cfg);

}  // namespace dbench
