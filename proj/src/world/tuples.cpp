#include <algorithm>

#include "dbench/errors.h"
#include "dbench/rng.h"
#include "dbench/world.h"

namespace dbench {

std::string to_string(TupleKind k) { return k == TupleKind::cause ? "cause" : "iso"; }

std::string expected_label(const World& world, const InterventionTuple& t) {
    return t.kind == TupleKind::cause ? world.value(t.attribute, t.source_entity)
                                      : world.value(t.target_attribute, t.base_entity);
}

std::vector<InterventionTuple> pair_interventions(const World& world, const Split& split, Part part, int attribute,
                                                  int n, std::uint64_t seed, const PairOptions& opts) {
    if (attribute < 0 || attribute >= int(world.n_attributes())) throw IndexError("attribute index out of range");
    if (n < 0) throw ContractError("negative tuple count");
    std::vector<InterventionTuple> out;
    if (n == 0) return out;

    const PartPool pool = part_pool(world, split, part);
    if (pool.entities.size() < 2) throw ContractError("need at least 2 entities in the " + to_string(part) +
                                                      " part to pair interventions");
    const int n_attr = int(world.n_attributes());
    std::vector<std::vector<int>> by_attr(n_attr);
    std::vector<int> entity_templates;
    for (int t : pool.templates) {
        const int a = world.templates[t].attribute;
        (a < 0 ? entity_templates : by_attr[a]).push_back(t);
    }

    std::vector<int> distractors;
    for (int a = 0; a < n_attr; ++a)
        if (a != attribute) distractors.push_back(a);
    const int n_iso = distractors.empty() ? 0 : n / 2;
    const int n_cause = n - n_iso;

    Rng rng(seed);
    auto pick = [&](const std::vector<int>& v) { return v[rng.index(v.size())]; };
    auto usable_templates = [&](int entity, const std::vector<int>& candidates) {
        std::vector<int> ok;
        for (int t : candidates)
            if (world.prompt_usable(entity, t)) ok.push_back(t);
        return ok;
    };

    constexpr int kMaxTries = 10000;
    for (int i = 0; i < n_cause + n_iso; ++i) {
        InterventionTuple t;
        t.attribute = attribute;
        t.kind = i < n_cause ? TupleKind::cause : TupleKind::iso;
        t.target_attribute = t.kind == TupleKind::cause ? attribute : distractors[(i - n_cause) % distractors.size()];
        if (by_attr[t.target_attribute].empty())
            throw ContractError("no usable templates for attribute '" + world.attributes[t.target_attribute].name + "'");
        bool done = false;
        for (int tries = 0; tries < kMaxTries && !done; ++tries) {
            const int e = pick(pool.entities);
            const int e2 = pick(pool.entities);
            if (e == e2) continue;
            if (opts.distinct_values &&
                world.entities[e].values[t.target_attribute] == world.entities[e2].values[t.target_attribute])
                continue;
            const auto base_ok = usable_templates(e, by_attr[t.target_attribute]);
            if (base_ok.empty()) continue;
            std::vector<int> src_ok;
            if (!entity_templates.empty() && rng.uniform() < opts.entity_source_rate) {
                src_ok = usable_templates(e2, entity_templates);
            } else {
                src_ok = usable_templates(e2, by_attr[rng.index(n_attr)]);
            }
            if (src_ok.empty()) continue;
            t.base_entity = e;
            t.source_entity = e2;
            t.base_template = pick(base_ok);
            t.source_template = pick(src_ok);
            done = true;
        }
        if (!done) throw ContractError("could not sample a valid tuple for attribute '" +
                                       world.attributes[t.target_attribute].name + "' in the " + to_string(part) +
                                       " part");
        t.base_text = world.render(t.base_entity, t.base_template);
        t.source_text = world.render(t.source_entity, t.source_template);
        t.label = expected_label(world, t);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace dbench
