#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "dbench/adam.h"
#include "dbench/errors.h"
#include "dbench/lm.h"
#include "dbench/rng.h"

namespace dbench {

std::vector<std::pair<int, int>> attribute_pairs(const World& world) {
    std::vector<std::pair<int, int>> out;
    for (int e = 0; e < int(world.entities.size()); ++e)
        for (int t = 0; t < int(world.templates.size()); ++t)
            if (world.templates[t].attribute >= 0 && world.prompt_usable(e, t)) out.emplace_back(e, t);
    return out;
}

void holdout_split(const World& world, std::uint64_t seed, double fraction, std::vector<std::pair<int, int>>& train,
                   std::vector<std::pair<int, int>>& heldout) {
    auto pairs = attribute_pairs(world);
    Rng rng(seed);
    rng.shuffle(pairs);
    const std::size_t n_hold = std::size_t(std::floor(fraction * double(pairs.size())));
    heldout.assign(pairs.begin(), pairs.begin() + n_hold);
    train.assign(pairs.begin() + n_hold, pairs.end());
    std::sort(heldout.begin(), heldout.end());
    std::sort(train.begin(), train.end());
}

double prompt_accuracy(const SiteModel& model, const World& world, std::span<const std::pair<int, int>> pairs) {
    if (pairs.empty()) return 0.0;
    NoGradGuard no_grad;
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
        const std::size_t end = std::min(pairs.size(), start + kChunk);
        std::vector<Prompt> prompts;
        std::vector<int> gold;
        for (std::size_t i = start; i < end; ++i) {
            auto [e, t] = pairs[i];
            prompts.push_back(model.make_prompt(world, e, t));
            gold.push_back(model.label_token(prompts.back(), world.value(world.templates[t].attribute, e)));
        }
        const auto pred = argmax_rows(model.next_logits(prompts));
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == gold[i];
    }
    return double(correct) / double(pairs.size());
}

namespace {

struct Example {
    std::vector<int> tokens;
    std::vector<std::size_t> loss_positions;
    std::vector<int> targets;
    bool entity_prompt = false;
};

struct SwapBatch {
    std::vector<Prompt> bases, sources;
    std::vector<int> targets;
};

// Base prompts come from training pairs; each source entity is one that also
// has a training pair with the base template, so no held-out fact is shown.
class SwapSampler {
   public:
    SwapSampler(const World& world, const SiteModel& model, std::span<const std::pair<int, int>> train)
        : world_(world), model_(model), train_(train.begin(), train.end()) {
        for (auto [e, t] : train_) by_template_[t].push_back(e);
        for (int t = 0; t < int(world.templates.size()); ++t) all_templates_.push_back(t);
    }

    SwapBatch draw(Rng& rng, std::size_t n) const {
        SwapBatch b;
        for (std::size_t i = 0; i < n; ++i) {
            const auto [e, t] = train_[rng.index(train_.size())];
            const auto& peers = by_template_.at(t);
            if (peers.size() < 2) continue;
            int src = e;
            while (src == e) src = peers[rng.index(peers.size())];
            int ts = all_templates_[rng.index(all_templates_.size())];
            while (!world_.prompt_usable(src, ts)) ts = all_templates_[rng.index(all_templates_.size())];
            b.bases.push_back(model_.make_prompt(world_, e, t));
            b.sources.push_back(model_.make_prompt(world_, src, ts));
            b.targets.push_back(model_.label_token(b.bases.back(), world_.value(world_.templates[t].attribute, src)));
        }
        return b;
    }

   private:
    const World& world_;
    const SiteModel& model_;
    std::vector<std::pair<int, int>> train_;
    std::map<int, std::vector<int>> by_template_;
    std::vector<int> all_templates_;
};

Tensor swapped_logits(const LanguageModel& model, const SwapBatch& b, std::size_t layer) {
    const Tensor src = model.site_values(b.sources, layer);
    const Splice splice{layer, [&](const Tensor&) { return src; }};
    return model.next_logits(b.bases, &splice);
}

}  // namespace

TrainedLm train_lm(const World& world, LmConfig cfg, const LmTrainConfig& tcfg,
                   const std::function<void(const std::string&)>& log) {
    const auto t0 = std::chrono::steady_clock::now();
    Tokenizer tok = Tokenizer::build(world);
    LanguageModel model(cfg, tok, true);

    std::vector<std::pair<int, int>> train_pairs, heldout;
    holdout_split(world, derive_seed(cfg.seed, "lm/holdout"), tcfg.holdout_fraction, train_pairs, heldout);
    if (train_pairs.empty()) throw ContractError("train_lm: no training prompts");

    std::vector<Example> examples;
    for (auto [e, t] : train_pairs) {
        Prompt p = model.make_prompt(world, e, t);
        Example ex;
        ex.targets.push_back(model.label_token(p, world.value(world.templates[t].attribute, e)));
        ex.loss_positions.push_back(p.tokens.size() - 1);
        ex.tokens = std::move(p.tokens);
        examples.push_back(std::move(ex));
    }
    if (tcfg.entity_prompt_weight > 0) {
        for (int t : world.templates_for(-1)) {
            for (int e = 0; e < int(world.entities.size()); ++e) {
                if (!world.prompt_usable(e, t)) continue;
                Prompt p = model.make_prompt(world, e, t);
                Example ex;
                ex.entity_prompt = true;
                for (std::size_t i = p.entity_end - 1; i + 1 < p.tokens.size(); ++i) {
                    ex.loss_positions.push_back(i);
                    ex.targets.push_back(p.tokens[i + 1]);
                }
                if (ex.targets.empty()) continue;
                ex.tokens = std::move(p.tokens);
                examples.push_back(std::move(ex));
            }
        }
    }

    const std::size_t swap_top = tcfg.swap_max_layer >= 0 ? std::size_t(tcfg.swap_max_layer)
                                                          : std::size_t(cfg.n_layers / 2);
    const std::size_t swap_low = std::size_t(std::max(0, tcfg.swap_min_layer));
    if (swap_top >= std::size_t(cfg.n_layers) || swap_low > swap_top)
        throw SpecError("swap layers must satisfy swap_min_layer <= swap_max_layer < n_layers");
    const SwapSampler swaps(world, model, train_pairs);
    Rng swap_rng(derive_seed(cfg.seed, "lm/swaps"));
    const std::size_t n_swap = std::size_t(std::lround(tcfg.swap_rate * tcfg.batch_size));
    // Fixed probe set for measuring how well swaps transfer, one batch per site.
    std::vector<SwapBatch> probes;
    if (n_swap > 0) {
        Rng prng(derive_seed(cfg.seed, "lm/swap-probes"));
        for (std::size_t l = swap_low; l <= swap_top; ++l) probes.push_back(swaps.draw(prng, 128));
    }
    auto swap_accuracy = [&] {
        NoGradGuard no_grad;
        std::size_t hit = 0, total = 0;
        for (std::size_t l = 0; l < probes.size(); ++l) {
            const auto pred = argmax_rows(swapped_logits(model, probes[l], swap_low + l));
            for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == probes[l].targets[i];
            total += pred.size();
        }
        return total ? double(hit) / double(total) : 1.0;
    };

    Adam opt(model.parameters(), AdamConfig{.lr = tcfg.lr, .weight_decay = tcfg.weight_decay});
    Rng rng(derive_seed(cfg.seed, "lm/batches"));
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();

    LmTrainReport report;
    std::vector<std::vector<int>> seqs;
    std::vector<std::size_t> attr_rows, ent_rows;
    std::vector<int> attr_targets, ent_targets;
    for (int step = 1; step <= tcfg.max_steps; ++step) {
        seqs.clear();
        attr_rows.clear();
        ent_rows.clear();
        attr_targets.clear();
        ent_targets.clear();
        std::size_t off = 0;
        for (int b = 0; b < tcfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const Example& ex = examples[order[cursor++]];
            for (std::size_t i = 0; i < ex.targets.size(); ++i) {
                (ex.entity_prompt ? ent_rows : attr_rows).push_back(off + ex.loss_positions[i]);
                (ex.entity_prompt ? ent_targets : attr_targets).push_back(ex.targets[i]);
            }
            off += ex.tokens.size();
            seqs.push_back(ex.tokens);
        }
        std::vector<std::size_t> rows = attr_rows;
        rows.insert(rows.end(), ent_rows.begin(), ent_rows.end());
        const Tensor logits = model.logits_at(seqs, rows);
        Tensor loss;
        if (!attr_rows.empty()) {
            std::vector<std::size_t> idx(attr_rows.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            loss = softmax_cross_entropy(gather_rows(logits, idx), attr_targets);
        }
        if (!ent_rows.empty()) {
            std::vector<std::size_t> idx(ent_rows.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = attr_rows.size() + i;
            Tensor le = scale(softmax_cross_entropy(gather_rows(logits, idx), ent_targets),
                              float(tcfg.entity_prompt_weight));
            loss = loss.defined() ? add(loss, le) : le;
        }
        if (n_swap > 0) {
            const SwapBatch sb = swaps.draw(swap_rng, n_swap);
            if (!sb.bases.empty()) {
                const std::size_t layer = swap_low + swap_rng.index(swap_top - swap_low + 1);
                Tensor ls = scale(softmax_cross_entropy(swapped_logits(model, sb, layer), sb.targets),
                                  float(tcfg.swap_weight));
                loss = loss.defined() ? add(loss, ls) : ls;
            }
        }
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw DivergenceError("language model loss is not finite", std::size_t(step));

        const float warm = tcfg.warmup_steps > 0 ? std::min(1.0f, float(step) / float(tcfg.warmup_steps)) : 1.0f;
        opt.set_lr(tcfg.lr * warm);
        opt.zero_grad();
        backward(loss);
        opt.step();
        report.steps = step;
        report.final_loss = lv;

        if (step % tcfg.eval_every == 0 || step == tcfg.max_steps) {
            const double acc = heldout.empty() ? 1.0 : prompt_accuracy(model, world, heldout);
            report.accuracy_curve.emplace_back(step, acc);
            report.heldout_accuracy = acc;
            report.swap_accuracy = swap_accuracy();
            if (log) {
                log("step " + std::to_string(step) + " loss " + std::to_string(lv) + " held-out accuracy " +
                    std::to_string(acc) + " swap accuracy " + std::to_string(report.swap_accuracy));
            }
            if (acc >= tcfg.target_accuracy && report.swap_accuracy >= tcfg.target_accuracy) {
                report.reached_target = true;
                break;
            }
        }
    }
    model.freeze();
    report.train_accuracy = prompt_accuracy(model, world, train_pairs);
    report.heldout_accuracy = heldout.empty() ? 1.0 : prompt_accuracy(model, world, heldout);
    report.swap_accuracy = swap_accuracy();
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(model), report};
}

}  // namespace dbench
