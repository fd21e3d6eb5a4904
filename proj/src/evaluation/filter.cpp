#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dbench/errors.h"
#include "dbench/evaluation.h"

namespace dbench {

World filter_instance(const World& world, const SiteModel& model, double threshold, FilterReport* report) {
    const std::size_t E = world.entities.size(), T = world.templates.size(), A = world.n_attributes();
    std::vector<std::pair<int, int>> prompts;
    for (std::size_t e = 0; e < E; ++e)
        for (std::size_t t = 0; t < T; ++t)
            if (world.templates[t].attribute >= 0 && world.prompt_usable(int(e), int(t)))
                prompts.emplace_back(int(e), int(t));
    if (prompts.empty()) throw EmptyInstanceError("filter: the instance has no usable attribute prompts");

    std::vector<char> correct(prompts.size(), 0);
    {
        NoGradGuard no_grad;
        std::vector<Prompt> batch;
        std::vector<int> gold;
        for (std::size_t lo = 0; lo < prompts.size(); lo += 256) {
            const std::size_t hi = std::min(prompts.size(), lo + 256);
            batch.clear();
            gold.clear();
            for (std::size_t i = lo; i < hi; ++i) {
                const auto [e, t] = prompts[i];
                batch.push_back(model.make_prompt(world, e, t));
                gold.push_back(model.label_token(batch.back(), world.value(world.templates[std::size_t(t)].attribute, e)));
            }
            const auto pred = argmax_rows(model.next_logits(batch));
            for (std::size_t i = lo; i < hi; ++i) correct[i] = pred[i - lo] == gold[i - lo];
        }
    }

    std::vector<double> e_hit(E, 0), e_n(E, 0), t_hit(T, 0), t_n(T, 0);
    double hits = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto [e, t] = prompts[i];
        e_hit[std::size_t(e)] += correct[i];
        e_n[std::size_t(e)] += 1;
        t_hit[std::size_t(t)] += correct[i];
        t_n[std::size_t(t)] += 1;
        hits += correct[i];
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> e_acc(E, nan), t_acc(T, nan);
    for (std::size_t e = 0; e < E; ++e)
        if (e_n[e] > 0) e_acc[e] = e_hit[e] / e_n[e];
    for (std::size_t t = 0; t < T; ++t)
        if (t_n[t] > 0) t_acc[t] = t_hit[t] / t_n[t];

    World out = world;
    for (std::size_t e = 0; e < E; ++e)
        if (out.entity_kept[e] && !(e_acc[e] >= threshold)) out.entity_kept[e] = 0;
    for (std::size_t t = 0; t < T; ++t)
        if (out.template_kept[t] && world.templates[t].attribute >= 0 && !(t_acc[t] >= threshold))
            out.template_kept[t] = 0;
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto [e, t] = prompts[i];
        if (!correct[i] && out.entity_kept[std::size_t(e)] && out.template_kept[std::size_t(t)]) {
            out.dropped_prompts.push_back(prompts[i]);
            ++dropped;
        }
    }
    std::sort(out.dropped_prompts.begin(), out.dropped_prompts.end());
    out.dropped_prompts.erase(std::unique(out.dropped_prompts.begin(), out.dropped_prompts.end()),
                              out.dropped_prompts.end());

    std::size_t n_entities = 0, n_templates = 0;
    for (char k : out.entity_kept) n_entities += std::size_t(k);
    std::vector<std::size_t> per_attr(A, 0);
    for (std::size_t t = 0; t < T; ++t)
        if (out.template_kept[t] && world.templates[t].attribute >= 0) {
            ++per_attr[std::size_t(world.templates[t].attribute)];
            ++n_templates;
        }
    const auto best_of = [](const std::vector<double>& v) {
        double b = 0;
        for (double x : v)
            if (!std::isnan(x)) b = std::max(b, x);
        return b;
    };
    if (n_entities < 2) {
        std::ostringstream os;
        os << "filter: " << n_entities << " entities reach accuracy " << threshold << " (best entity accuracy "
           << best_of(e_acc) << ", overall " << hits / double(prompts.size()) << ")";
        throw EmptyInstanceError(os.str());
    }
    for (std::size_t a = 0; a < A; ++a)
        if (per_attr[a] == 0) {
            std::ostringstream os;
            os << "filter: no template for '" << world.attributes[a].name << "' reaches accuracy " << threshold
               << " (best template accuracy " << best_of(t_acc) << ")";
            throw EmptyInstanceError(os.str());
        }

    if (report) {
        report->threshold = threshold;
        report->entity_accuracy = e_acc;
        report->template_accuracy = t_acc;
        report->entities_kept = n_entities;
        report->templates_kept = n_templates;
        report->prompts_dropped = dropped;
        report->accuracy_before = hits / double(prompts.size());
        Matrix m(E, std::vector<double>(A, 0.0)), n(E, std::vector<double>(A, 0.0));
        double kept_hits = 0, kept_n = 0;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const auto [e, t] = prompts[i];
            if (!out.entity_kept[std::size_t(e)] || !out.template_kept[std::size_t(t)]) continue;
            const auto a = std::size_t(world.templates[std::size_t(t)].attribute);
            m[std::size_t(e)][a] += correct[i];
            n[std::size_t(e)][a] += 1;
            kept_hits += correct[i];
            kept_n += 1;
        }
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t a = 0; a < A; ++a) m[e][a] = n[e][a] > 0 ? m[e][a] / n[e][a] : nan;
        report->accuracy = std::move(m);
        report->accuracy_after = kept_n > 0 ? kept_hits / kept_n : 0.0;
    }
    return out;
}

}  // namespace dbench
