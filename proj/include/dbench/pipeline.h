#pragma once

#include <exception>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "dbench/evaluation.h"
#include "dbench/featurizers.h"
#include "dbench/run_config.h"
#include "dbench/site_model.h"
#include "dbench/world.h"

namespace dbench {

// Layout of a run directory. Every stage reads its inputs from, and writes
// its own subdirectory of, one run root:
//   world/  lm/  filter/  featurizers/<method>/<attribute>/  eval/<method>/
//   sweep/<method>/  report/
struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path world() const { return root / "world"; }
    std::filesystem::path lm() const { return root / "lm"; }
    std::filesystem::path filter() const { return root / "filter"; }
    std::filesystem::path featurizers(const std::string& method) const { return root / "featurizers" / method; }
    std::filesystem::path eval(const std::string& method) const { return root / "eval" / method; }
    std::filesystem::path sweep(const std::string& method) const { return root / "sweep" / method; }
    std::filesystem::path report() const { return root / "report"; }
};

// Stages. Each throws on failure; exit_code() maps the exception.
void stage_gen_world(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);
void stage_train_lm(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);
void stage_filter(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);
void stage_fit_featurizer(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);
void stage_evaluate(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);
void stage_sweep(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);
void stage_report(const RunConfig& cfg, const RunPaths& paths, std::ostream& log);

// 0 ok, 1 empty instance or unexpected failure, 2 usage or configuration,
// 3 missing artifact, 4 numerical failure.
int exit_code(std::exception_ptr error);

// ---- building blocks shared by the stages and the acceptance run -----------

// World generated from the configured spec with the stage-derived seed.
World build_world(const RunConfig& cfg);
// Intervention tuples for every split mode the world supports, every part and
// every attribute.
std::vector<TupleSet> build_tuple_sets(const World& world, const RunConfig& cfg);

// Directory holding the world used by downstream stages.
std::filesystem::path source_world_dir(const RunConfig& cfg, const RunPaths& paths);
std::unique_ptr<SiteModel> load_site_model(const RunConfig& cfg, const RunPaths& paths, const World& world);
PlantedConfig planted_config(const RunConfig& cfg);

// Site activations and attribute values of every usable prompt of a part;
// attribute < 0 takes all prompts (with label -1).
struct Activations {
    Tensor x;
    std::vector<int> labels;
};
Activations collect_activations(const SiteModel& model, const World& world, const Split& split, Part part,
                                std::size_t layer, int attribute);

// Fits one handle for an attribute with the configured method at (layer, k).
FeatureHandle fit_handle(const RunConfig& cfg, const SiteModel& model, const World& world, const Split& split,
                         std::span<const InterventionTuple> train, int attribute, std::size_t layer, std::size_t k,
                         const TrainLog& log = {});
// The k_or_eps column for a fitted handle.
std::string k_or_eps(const RunConfig& cfg, const FeatureHandle& handle);

}  // namespace dbench
