#include <cmath>
#include <sstream>

#include "dbench/adam.h"
#include "dbench/errors.h"
#include "dbench/featurizers.h"
#include "dbench/rng.h"

namespace dbench {

InterventionBatch make_intervention_batch(const SiteModel& model, const World& world,
                                          std::span<const InterventionTuple> tuples, std::size_t layer) {
    InterventionBatch b;
    b.n_groups = world.n_attributes();
    std::vector<Prompt> sources;
    for (const auto& t : tuples) {
        b.base.push_back(model.make_prompt(world, t.base_entity, t.base_template));
        sources.push_back(model.make_prompt(world, t.source_entity, t.source_template));
        b.gold.push_back(model.label_token(b.base.back(), t.label));
        if (t.kind == TupleKind::cause) {
            b.group.push_back(0);
        } else {
            // Distractors are numbered in attribute order, skipping A.
            b.group.push_back(1 + t.target_attribute - (t.target_attribute > t.attribute ? 1 : 0));
        }
    }
    NoGradGuard no_grad;
    b.source_rows = sources.empty() ? Tensor::zeros({0, model.site_dim()}) : model.site_values(sources, layer);
    return b;
}

double multitask_loss(double cause, std::span<const double> iso) {
    if (iso.empty()) return cause;
    double s = 0;
    for (double v : iso) s += v;
    return cause + s / double(iso.size());
}

Tensor multitask_loss(const Tensor& cause, std::span<const Tensor> iso) {
    if (iso.empty()) return cause;
    Tensor s = iso[0];
    for (std::size_t i = 1; i < iso.size(); ++i) s = add(s, iso[i]);
    return add(cause, scale(s, 1.0f / float(iso.size())));
}

namespace {

struct StepBatch {
    std::vector<Prompt> base;
    Tensor source;
    std::vector<std::vector<std::size_t>> rows;  // per group
    std::vector<std::vector<int>> gold;          // per group
};

StepBatch sample(const InterventionBatch& all, std::span<const std::size_t> pool, std::size_t batch, Rng& rng) {
    StepBatch s;
    s.rows.resize(all.n_groups);
    s.gold.resize(all.n_groups);
    std::vector<std::size_t> idx;
    const std::size_t B = std::min(batch, pool.size());
    for (std::size_t i = 0; i < B; ++i) idx.push_back(pool[rng.index(pool.size())]);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto j = idx[i];
        s.base.push_back(all.base[j]);
        s.rows[std::size_t(all.group[j])].push_back(i);
        s.gold[std::size_t(all.group[j])].push_back(all.gold[j]);
    }
    s.source = gather_rows(all.source_rows, idx);
    return s;
}

// Cause CE plus (multi-task) the averaged per-distractor iso CE.
Tensor task_loss(const Tensor& logits, const StepBatch& s) {
    Tensor cause;
    std::vector<Tensor> iso;
    for (std::size_t g = 0; g < s.rows.size(); ++g) {
        if (s.rows[g].empty()) continue;
        Tensor ce = softmax_cross_entropy(gather_rows(logits, s.rows[g]), s.gold[g]);
        if (g == 0)
            cause = ce;
        else
            iso.push_back(ce);
    }
    if (!cause.defined()) {
        // A minibatch without cause rows: the iso average alone.
        Tensor sum_iso = iso[0];
        for (std::size_t i = 1; i < iso.size(); ++i) sum_iso = add(sum_iso, iso[i]);
        return scale(sum_iso, 1.0f / float(iso.size()));
    }
    return multitask_loss(cause, iso);
}

std::vector<std::size_t> training_pool(std::span<const InterventionTuple> tuples, bool multi_task, const char* who) {
    std::vector<std::size_t> pool;
    bool any_cause = false;
    for (std::size_t i = 0; i < tuples.size(); ++i) {
        const bool cause = tuples[i].kind == TupleKind::cause;
        any_cause |= cause;
        if (cause || multi_task) pool.push_back(i);
    }
    if (!any_cause) throw ContractError(std::string(who) + " needs at least one cause tuple");
    return pool;
}

void check_loss(const Tensor& loss, const char* who, int step) {
    if (!std::isfinite(loss.item())) throw DivergenceError(std::string(who) + ": non-finite loss", std::size_t(step));
}

}  // namespace

FeatureHandle fit_das(const SiteModel& model, const World& world, std::span<const InterventionTuple> tuples,
                      std::size_t layer, const DasConfig& cfg, const TrainLog& log) {
    const std::size_t n = model.site_dim();
    if (cfg.k > n) throw ContractError("fit_das: k = " + std::to_string(cfg.k) + " exceeds site dimension " + std::to_string(n));
    if (cfg.k == 0) throw SpecError("fit_das: k must be positive");
    if (layer >= model.num_layers()) throw IndexError("fit_das: layer " + std::to_string(layer) + " out of range");
    const auto pool = training_pool(tuples, cfg.multi_task, "fit_das");
    const std::string method = cfg.multi_task ? "mdas" : "das";

    Rng rng(cfg.seed);
    std::vector<float> init(cfg.k * n);
    const double bound = 1.0 / std::sqrt(double(n));
    for (auto& v : init) v = float(rng.uniform(-bound, bound));
    Tensor w0 = qr_orthonormalize(Tensor({cfg.k, n}, std::move(init)));
    Tensor w({cfg.k, n}, std::vector<float>(w0.data().begin(), w0.data().end()), true);

    // With k = n every orthonormal W spans the whole site; nothing to learn.
    if (cfg.k < n) {
        const auto all = make_intervention_batch(model, world, tuples, layer);
        Adam opt({w}, AdamConfig{.lr = cfg.lr});
        for (int step = 0; step < cfg.steps; ++step) {
            const StepBatch s = sample(all, pool, std::size_t(cfg.batch_size), rng);
            const Splice splice{layer, [&](const Tensor& rows) {
                                    return add(rows, matmul(matmul_nt(sub(s.source, rows), w), w));
                                }};
            const Tensor loss = task_loss(model.next_logits(s.base, &splice), s);
            check_loss(loss, "fit_das", step);
            opt.zero_grad();
            backward(loss);
            opt.step();
            const Tensor q = qr_orthonormalize(w.detach());
            std::copy(q.data().begin(), q.data().end(), w.data_mut().begin());
            if (log && (step + 1) % 100 == 0) {
                std::ostringstream os;
                os << method << " step " << step + 1 << " loss " << loss.item();
                log(os.str());
            }
        }
    }

    FeatureHandle h;
    h.featurizer = std::make_shared<OrthogonalFeaturizer>(method, complete_orthonormal_basis(w.detach()), cfg.k);
    for (std::size_t i = 0; i < cfg.k; ++i) h.features.push_back(i);
    h.layer = layer;
    return h;
}

FeatureHandle fit_dbm(const SiteModel& model, const World& world, std::span<const InterventionTuple> tuples,
                      std::size_t layer, const DbmConfig& cfg, const TrainLog& log) {
    const std::size_t n = model.site_dim();
    if (layer >= model.num_layers()) throw IndexError("fit_dbm: layer " + std::to_string(layer) + " out of range");
    if (!(cfg.t_start > 0 && cfg.t_end > 0)) throw SpecError("fit_dbm: temperatures must be positive");
    const auto pool = training_pool(tuples, cfg.multi_task, "fit_dbm");
    const std::string method = cfg.multi_task ? "mdbm" : "dbm";
    const double lambda = cfg.resolved_lambda();

    Rng rng(cfg.seed);
    Tensor m = Tensor::zeros({n}, true);
    const auto all = make_intervention_batch(model, world, tuples, layer);
    Adam opt({m}, AdamConfig{.lr = cfg.lr});
    double temperature = cfg.t_start;
    for (int step = 0; step < cfg.steps; ++step) {
        // Geometric schedule from t_start to t_end.
        const double frac = cfg.steps > 1 ? double(step) / double(cfg.steps - 1) : 1.0;
        temperature = cfg.t_start * std::pow(cfg.t_end / cfg.t_start, frac);
        const Tensor s_mask = logistic(scale(m, float(1.0 / temperature)));
        const StepBatch s = sample(all, pool, std::size_t(cfg.batch_size), rng);
        const Splice splice{layer, [&](const Tensor& rows) {
                                return add(rows, mul_row(sub(s.source, rows), s_mask));
                            }};
        Tensor loss = task_loss(model.next_logits(s.base, &splice), s);
        if (lambda > 0) {
            const Tensor penalty = cfg.l1_on_logits ? sum(abs(m)) : sum(s_mask);
            loss = add(loss, scale(penalty, float(lambda)));
        }
        check_loss(loss, "fit_dbm", step);
        opt.zero_grad();
        backward(loss);
        opt.step();
        if (log && (step + 1) % 100 == 0) {
            std::ostringstream os;
            os << method << " step " << step + 1 << " loss " << loss.item() << " T " << temperature;
            log(os.str());
        }
    }

    auto f = std::make_shared<MaskFeaturizer>(method, m.detach(), temperature);
    FeatureHandle h;
    h.features = f->selected(cfg.eps);
    h.featurizer = std::move(f);
    h.layer = layer;
    return h;
}

}  // namespace dbench
