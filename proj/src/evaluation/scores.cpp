#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "dbench/errors.h"
#include "dbench/evaluation.h"

namespace dbench {

namespace {

constexpr std::size_t kChunk = 256;

}  // namespace

std::vector<char> intervention_hits(const SiteModel& model, const World& world, const FeatureHandle& handle,
                                    std::span<const InterventionTuple> tuples, MatchRule rule) {
    std::vector<char> hits;
    hits.reserve(tuples.size());
    std::vector<Prompt> base, source;
    for (std::size_t lo = 0; lo < tuples.size(); lo += kChunk) {
        const auto chunk = tuples.subspan(lo, std::min(kChunk, tuples.size() - lo));
        tuple_prompts(model, world, chunk, base, source);
        std::vector<std::vector<int>> gold;
        std::size_t longest = 1;
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            gold.push_back(rule == MatchRule::exact ? model.label_tokens(base[i], chunk[i].label)
                                                    : std::vector<int>{model.label_token(base[i], chunk[i].label)});
            longest = std::max(longest, gold.back().size());
        }
        std::vector<char> ok(chunk.size(), 1);
        for (std::size_t step = 0; step < longest; ++step) {
            const auto pred = interchange_intervene(model, handle, base, source);
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                if (step < gold[i].size() && pred[i] != gold[i][step]) ok[i] = 0;
                base[i].tokens.push_back(pred[i]);
            }
        }
        hits.insert(hits.end(), ok.begin(), ok.end());
    }
    return hits;
}

double score_cause(const SiteModel& model, const World& world, const FeatureHandle& handle,
                   std::span<const InterventionTuple> tuples, MatchRule rule) {
    if (tuples.empty()) throw ContractError("score_cause: empty tuple list");
    for (const auto& t : tuples)
        if (t.kind != TupleKind::cause) throw ContractError("score_cause: received an iso tuple");
    const auto hits = intervention_hits(model, world, handle, tuples, rule);
    std::size_t n = 0;
    for (char h : hits) n += std::size_t(h);
    return double(n) / double(hits.size());
}

double score_iso(const SiteModel& model, const World& world, const FeatureHandle& handle,
                 std::span<const InterventionTuple> tuples, MatchRule rule) {
    if (tuples.empty()) throw ContractError("score_iso: empty tuple list");
    for (const auto& t : tuples)
        if (t.kind != TupleKind::iso) throw ContractError("score_iso: received a cause tuple");
    const auto hits = intervention_hits(model, world, handle, tuples, rule);
    std::map<int, std::pair<std::size_t, std::size_t>> per;  // A* -> (hits, total)
    for (std::size_t i = 0; i < tuples.size(); ++i) {
        auto& [h, n] = per[tuples[i].target_attribute];
        h += std::size_t(hits[i]);
        ++n;
    }
    double s = 0;
    for (const auto& [a, hn] : per) s += double(hn.first) / double(hn.second);
    return s / double(per.size());
}

double score_disentangle(double cause, double iso) { return (cause + iso) / 2.0; }

ScoreRow score_tuples(const SiteModel& model, const World& world, const FeatureHandle& handle,
                      std::span<const InterventionTuple> tuples, MatchRule rule) {
    std::vector<InterventionTuple> cause, iso;
    for (const auto& t : tuples) (t.kind == TupleKind::cause ? cause : iso).push_back(t);
    ScoreRow r;
    r.layer = handle.layer;
    r.method = handle.featurizer ? handle.featurizer->method() : "";
    r.n_cause = cause.size();
    r.n_iso = iso.size();
    r.cause = score_cause(model, world, handle, cause, rule);
    // Without distractor attributes there is nothing to disturb.
    r.iso = iso.empty() ? 1.0 : score_iso(model, world, handle, iso, rule);
    r.disentangle = score_disentangle(r.cause, r.iso);
    return r;
}

Matrix cross_attribute_matrix(const SiteModel& model, const World& world, std::span<const FeatureHandle> handles,
                              std::span<const std::vector<InterventionTuple>> cause_tuples, MatchRule rule) {
    const std::size_t n = world.n_attributes();
    if (handles.size() != n) throw ContractError("cross_attribute_matrix: expected one handle per attribute");
    if (cause_tuples.size() != n) throw ContractError("cross_attribute_matrix: expected cause tuples per attribute");
    for (std::size_t a = 0; a < n; ++a)
        if (!handles[a].featurizer)
            throw ContractError("cross_attribute_matrix: missing handle for '" + world.attributes[a].name + "'");
    Matrix m(n, std::vector<double>(n, 0.0));
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) m[a][b] = score_cause(model, world, handles[a], cause_tuples[b], rule);
    return m;
}

// ---- sweeps -----------------------------------------------------------------

std::size_t select_best(std::span<const SweepCell> cells) {
    if (cells.empty()) throw ContractError("select_best: no cells");
    std::size_t best = 0;
    for (std::size_t i = 1; i < cells.size(); ++i) {
        const auto& c = cells[i];
        const auto& b = cells[best];
        if (c.dev.disentangle > b.dev.disentangle ||
            (c.dev.disentangle == b.dev.disentangle && (c.k < b.k || (c.k == b.k && c.layer < b.layer))))
            best = i;
    }
    return best;
}

SweepResult sweep(std::span<const std::size_t> layers, std::span<const std::size_t> ks, const CellFitter& fit,
                  const CellScorer& score, unsigned threads) {
    if (layers.empty() || ks.empty()) throw ContractError("sweep: empty layer or k grid");
    SweepResult r;
    for (auto l : layers)
        for (auto k : ks) r.cells.push_back({l, k, {}, {}});

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= r.cells.size()) return;
            try {
                auto& c = r.cells[i];
                const FeatureHandle h = fit(c.layer, c.k);
                c.dev = score(h, Part::dev);
                c.test = score(h, Part::test);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    const unsigned n = std::max(1u, std::min<unsigned>(threads, unsigned(r.cells.size())));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    r.best = select_best(r.cells);
    return r;
}

TrendCheck k_trend(std::span<const ScoreRow> rows, std::span<const std::size_t> ks) {
    if (rows.size() != ks.size()) throw ContractError("k_trend: one row per k expected");
    TrendCheck t;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        ++t.steps;
        const auto step = "k " + std::to_string(ks[i - 1]) + " -> " + std::to_string(ks[i]);
        if (rows[i].cause >= rows[i - 1].cause)
            ++t.cause_ok;
        else
            t.violations.push_back(step + ": cause fell " + format_score(rows[i - 1].cause) + " -> " +
                                   format_score(rows[i].cause));
        if (rows[i].iso <= rows[i - 1].iso)
            ++t.iso_ok;
        else
            t.violations.push_back(step + ": iso rose " + format_score(rows[i - 1].iso) + " -> " +
                                   format_score(rows[i].iso));
    }
    return t;
}

}  // namespace dbench
