#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dbench/intervention.h"
#include "dbench/site_model.h"
#include "dbench/world.h"

namespace dbench {

enum class MatchRule {
    first_token,  // first generated token vs first gold token
    exact,        // greedy continuation equals the whole gold tokenization
};

// Whether each tuple's intervened prediction matches its label.
std::vector<char> intervention_hits(const SiteModel& model, const World& world, const FeatureHandle& handle,
                                    std::span<const InterventionTuple> tuples, MatchRule rule = MatchRule::first_token);

// Fraction of cause tuples whose intervened prediction is the source entity's value.
double score_cause(const SiteModel& model, const World& world, const FeatureHandle& handle,
                   std::span<const InterventionTuple> tuples, MatchRule rule = MatchRule::first_token);
// Per-distractor match rates averaged uniformly over the distractors present.
double score_iso(const SiteModel& model, const World& world, const FeatureHandle& handle,
                 std::span<const InterventionTuple> tuples, MatchRule rule = MatchRule::first_token);
double score_disentangle(double cause, double iso);

// One line of scores.csv.
struct ScoreRow {
    std::string method;
    std::string split_mode;
    std::string attribute;
    std::size_t layer = 0;
    std::string k_or_eps;
    double cause = 0, iso = 0, disentangle = 0;
    std::size_t n_cause = 0, n_iso = 0;
    std::optional<double> recon_error;

    bool operator==(const ScoreRow&) const = default;
};

// Cause and iso on a mixed tuple list.
ScoreRow score_tuples(const SiteModel& model, const World& world, const FeatureHandle& handle,
                      std::span<const InterventionTuple> tuples, MatchRule rule = MatchRule::first_token);

// C[A][B]: rate at which intervening with handles[A] flips B queries to the
// source entity's B value, over the cause tuples of B.
using Matrix = std::vector<std::vector<double>>;
Matrix cross_attribute_matrix(const SiteModel& model, const World& world, std::span<const FeatureHandle> handles,
                              std::span<const std::vector<InterventionTuple>> cause_tuples,
                              MatchRule rule = MatchRule::first_token);

// ---- sweeps -----------------------------------------------------------------

struct SweepCell {
    std::size_t layer = 0;
    std::size_t k = 0;
    ScoreRow dev, test;
};

struct SweepResult {
    std::vector<SweepCell> cells;  // layer-major, k ascending
    std::size_t best = 0;
};

using CellFitter = std::function<FeatureHandle(std::size_t layer, std::size_t k)>;
using CellScorer = std::function<ScoreRow(const FeatureHandle& handle, Part part)>;

// Fits and scores every (layer, k) cell, up to `threads` at a time, then picks
// the best cell by dev disentangle.
SweepResult sweep(std::span<const std::size_t> layers, std::span<const std::size_t> ks, const CellFitter& fit,
                  const CellScorer& score, unsigned threads = 1);

// Highest dev disentangle; ties go to the smaller k, then the earlier layer.
std::size_t select_best(std::span<const SweepCell> cells);

// Step-by-step monotonicity of cause (non-decreasing) and iso
// (non-increasing) along ascending k.
struct TrendCheck {
    std::size_t steps = 0;
    std::size_t cause_ok = 0;
    std::size_t iso_ok = 0;
    std::vector<std::string> violations;
};
TrendCheck k_trend(std::span<const ScoreRow> rows_by_k, std::span<const std::size_t> ks);

// ---- model-accuracy filtering ------------------------------------------------

struct FilterReport {
    double threshold = 0;
    std::vector<double> entity_accuracy;    // per entity, over its attribute prompts
    std::vector<double> template_accuracy;  // per attribute template; NaN for entity templates
    Matrix accuracy;                        // [entity][attribute] after filtering
    std::size_t entities_kept = 0, templates_kept = 0, prompts_dropped = 0;
    double accuracy_before = 0, accuracy_after = 0;
};

// Keeps entities and attribute templates whose first-token accuracy reaches
// the threshold, and drops the remaining wrong prompts individually. Throws
// EmptyInstanceError when fewer than two entities, or no template of some
// attribute, survive.
World filter_instance(const World& world, const SiteModel& model, double threshold, FilterReport* report = nullptr);

// ---- output -----------------------------------------------------------------

std::string format_score(double v);  // 3 decimals
std::string format_percent(double v);  // 1 decimal percent, no sign

std::string scores_csv(std::span<const ScoreRow> rows);
std::vector<ScoreRow> parse_scores_csv(const std::string& text);
std::string matrix_csv(std::span<const std::string> names, const Matrix& m);
// Heatmap with cell fill interpolated linearly from white (0) to dark blue (1).
std::string heatmap_svg(std::span<const std::string> names, const Matrix& m, const std::string& title);
std::string heat_color(double v);

// Mean disentangle per method and split mode, as a text table and CSV.
struct SummaryReport {
    std::string text;
    std::string csv;
};
SummaryReport summarize(std::span<const ScoreRow> rows);

}  // namespace dbench
