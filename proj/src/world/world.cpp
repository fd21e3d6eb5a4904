#include "dbench/world.h"

#include <algorithm>
#include <array>
#include <set>

#include "dbench/errors.h"
#include "dbench/rng.h"

namespace dbench {

namespace {

constexpr std::array<const char*, 30> kEntitySyllables = {
    "ka", "lo", "mir", "ten", "sa", "vo",  "ri", "dun", "pe", "zul", "ba", "nor", "fi", "gal", "tu",
    "mes", "ro", "kin", "da", "vel", "su", "bor", "ne", "lan", "tor", "mi", "ga", "rus", "fe", "dol"};

// Disjoint from the entity inventory so values never share subwords with names.
constexpr std::array<const char*, 20> kValueSyllables = {"qua", "xe", "yor", "wen", "thal", "ju",  "hra",
                                                         "oph", "ix", "uly", "cre", "vash", "pli", "ost",
                                                         "eum", "zy", "ath", "ogg", "ser", "ani"};

constexpr std::array<const char*, 7> kNaturalTemplates = {
    "<E> has the {a} of",
    "The {a} of <E> is",
    "<E> is associated with the {a}",
    "Q: What is the {a} of <E>? A:",
    "In terms of {a}, <E> goes with",
    "When asked about {a}, <E> answers",
    "<E> | {a} :",
};

constexpr std::array<const char*, 3> kJsonTemplates = {
    "{\"entity\": \"<E>\", \"{a}\": \"",
    "{\"name\": \"<E>\", \"{a}\": \"",
    "{\"item\": \"<E>\", \"{a}\":",
};

constexpr std::array<const char*, 6> kEntityTemplates = {
    "<E> is a place worth visiting.",  "Many stories mention <E>.",          "<E> appears on old maps.",
    "We talked about <E> yesterday.", "{\"entity\": \"<E>\"}", "Visitors often describe <E> fondly.",
};

std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

std::string fill_attribute(std::string tmpl, const std::string& attr) {
    const auto pos = tmpl.find("{a}");
    if (pos != std::string::npos) tmpl.replace(pos, 3, attr);
    return tmpl;
}

// Attribute indices ordered so that parents precede children.
std::vector<int> topo_order(const WorldSpec& spec) {
    const int n = static_cast<int>(spec.attributes.size());
    std::vector<int> parent(n, -1);
    for (int i = 0; i < n; ++i) {
        const auto& a = spec.attributes[i];
        if (a.dependency == Dependency::independent) continue;
        for (int j = 0; j < n; ++j)
            if (spec.attributes[j].name == a.parent) parent[i] = j;
        if (parent[i] < 0) throw SpecError("attribute '" + a.name + "' depends on unknown attribute '" + a.parent + "'");
    }
    std::vector<int> order, state(n, 0);
    for (int start = 0; start < n; ++start) {
        // Follow the parent chain; every attribute has at most one parent.
        std::vector<int> chain;
        int cur = start;
        while (cur >= 0 && state[cur] == 0) {
            state[cur] = 1;
            chain.push_back(cur);
            cur = parent[cur];
        }
        if (cur >= 0 && state[cur] == 1) throw SpecError("attribute dependencies form a cycle through '" +
                                                         spec.attributes[cur].name + "'");
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
            state[*it] = 2;
            order.push_back(*it);
        }
    }
    return order;
}

}  // namespace

WorldSpec WorldSpec::defaults() {
    WorldSpec s;
    s.attributes = {
        {"country", 10, Dependency::independent, "", 0.0},
        {"continent", 4, Dependency::function_of, "country", 0.0},
        {"language", 8, Dependency::noisy_function_of, "country", 0.1},
        {"climate", 5, Dependency::independent, "", 0.0},
    };
    return s;
}

void validate_spec(const WorldSpec& spec) {
    if (spec.n_entities < 2) throw SpecError("n_entities must be at least 2");
    if (spec.attributes.empty()) throw SpecError("world needs at least one attribute");
    std::set<std::string> names;
    for (const auto& a : spec.attributes) {
        if (a.name.empty()) throw SpecError("attribute with empty name");
        for (char c : a.name)
            if (!(c >= 'a' && c <= 'z')) throw SpecError("attribute name '" + a.name + "' must be lowercase letters");
        if (!names.insert(a.name).second) throw SpecError("duplicate attribute '" + a.name + "'");
        if (a.n_values < 2) throw SpecError("attribute '" + a.name + "' needs at least 2 values");
        if (a.dependency == Dependency::noisy_function_of && (a.noise_rate < 0 || a.noise_rate > 1))
            throw SpecError("noise rate of '" + a.name + "' outside [0,1]");
    }
    if (spec.n_attribute_templates < 1 ||
        spec.n_attribute_templates > int(kNaturalTemplates.size() + kJsonTemplates.size()))
        throw SpecError("n_attribute_templates must be in [1, 10]");
    if (spec.n_entity_templates < 1 || spec.n_entity_templates > int(kEntityTemplates.size()))
        throw SpecError("n_entity_templates must be in [1, 6]");
    if (spec.few_shot < 0) throw SpecError("few_shot must be non-negative");
    std::size_t n_values = 0;
    for (const auto& a : spec.attributes) n_values += a.n_values;
    if (n_values > kValueSyllables.size() * kValueSyllables.size())
        throw SpecError("too many attribute values for the value inventory");
    const double max_names = 30.0 * 30 + 30.0 * 30 * 30;
    if (spec.n_entities > max_names / 2) throw SpecError("n_entities too large for the name inventory");
    topo_order(spec);
}

World generate_world(const WorldSpec& spec) {
    validate_spec(spec);
    const auto order = topo_order(spec);
    World w;
    w.spec = spec;
    const int n_attr = static_cast<int>(spec.attributes.size());

    // Value vocabularies: distinct two-syllable words across all attributes.
    Rng vrng(derive_seed(spec.seed, "world/values"));
    std::set<std::string> used;
    for (const auto& as : spec.attributes) {
        Attribute a;
        a.name = as.name;
        a.dependency = as.dependency;
        a.noise_rate = as.dependency == Dependency::noisy_function_of ? as.noise_rate : 0.0;
        while (int(a.values.size()) < as.n_values) {
            std::string word = capitalize(std::string(kValueSyllables[vrng.index(kValueSyllables.size())]) +
                                          kValueSyllables[vrng.index(kValueSyllables.size())]);
            if (used.insert(word).second) a.values.push_back(word);
        }
        w.attributes.push_back(std::move(a));
    }
    for (int i = 0; i < n_attr; ++i) {
        auto& a = w.attributes[i];
        if (a.dependency == Dependency::independent) continue;
        a.parent = w.attribute_index(spec.attributes[i].parent);
        const int np = int(w.attributes[a.parent].values.size());
        const int nv = int(a.values.size());
        // Cover every child value when the parent has enough values.
        std::vector<int> m(np);
        for (int j = 0; j < np; ++j) m[j] = j < nv ? j : int(vrng.index(nv));
        vrng.shuffle(m);
        a.map = std::move(m);
    }

    // Entity names: 2-3 syllables, unique.
    Rng nrng(derive_seed(spec.seed, "world/names"));
    std::set<std::string> names;
    while (int(w.entities.size()) < spec.n_entities) {
        Entity e;
        const int len = 2 + int(nrng.index(2));
        for (int s = 0; s < len; ++s) e.syllables.push_back(kEntitySyllables[nrng.index(kEntitySyllables.size())]);
        e.syllables[0] = capitalize(e.syllables[0]);
        for (const auto& s : e.syllables) e.name += s;
        if (!names.insert(e.name).second) continue;
        e.values.assign(n_attr, 0);
        w.entities.push_back(std::move(e));
    }

    Rng arng(derive_seed(spec.seed, "world/attributes"));
    for (int ai : order) {
        const auto& a = w.attributes[ai];
        const int nv = int(a.values.size());
        for (auto& e : w.entities) {
            if (a.dependency == Dependency::independent) {
                e.values[ai] = int(arng.index(nv));
                continue;
            }
            int v = a.map[e.values[a.parent]];
            if (a.dependency == Dependency::noisy_function_of && arng.uniform() < a.noise_rate) {
                // Flip to a uniformly chosen different value.
                v = (v + 1 + int(arng.index(nv - 1))) % nv;
            }
            e.values[ai] = v;
        }
    }

    Rng trng(derive_seed(spec.seed, "world/templates"));
    for (int ai = 0; ai < n_attr; ++ai) {
        std::vector<int> nat(kNaturalTemplates.size()), js(kJsonTemplates.size());
        for (std::size_t i = 0; i < nat.size(); ++i) nat[i] = int(i);
        for (std::size_t i = 0; i < js.size(); ++i) js[i] = int(i);
        trng.shuffle(nat);
        trng.shuffle(js);
        // One JSON template is always present; the rest mix both formats.
        std::vector<std::pair<int, bool>> rest;
        for (int i : nat) rest.emplace_back(i, false);
        for (std::size_t i = 1; i < js.size(); ++i) rest.emplace_back(js[i], true);
        trng.shuffle(rest);
        std::vector<std::pair<int, bool>> pick{{js[0], true}};
        for (int i = 0; int(pick.size()) < spec.n_attribute_templates; ++i) pick.push_back(rest[i]);
        std::sort(pick.begin(), pick.end(), [](auto a, auto b) { return a.second != b.second ? !a.second : a.first < b.first; });
        for (auto [i, json] : pick) {
            const char* raw = json ? kJsonTemplates[i] : kNaturalTemplates[i];
            w.templates.push_back({fill_attribute(raw, w.attributes[ai].name), ai, json ? "json" : "natural"});
        }
    }
    std::vector<int> ent(kEntityTemplates.size());
    for (std::size_t i = 0; i < ent.size(); ++i) ent[i] = int(i);
    trng.shuffle(ent);
    ent.resize(spec.n_entity_templates);
    std::sort(ent.begin(), ent.end());
    for (int i : ent) {
        const std::string t = kEntityTemplates[i];
        w.templates.push_back({t, -1, t.front() == '{' ? "json" : "natural"});
    }

    w.entity_kept.assign(w.entities.size(), 1);
    w.template_kept.assign(w.templates.size(), 1);
    return w;
}

int World::attribute_index(const std::string& name) const {
    for (std::size_t i = 0; i < attributes.size(); ++i)
        if (attributes[i].name == name) return int(i);
    throw SpecError("unknown attribute '" + name + "'");
}

std::vector<int> World::templates_for(int attribute) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < templates.size(); ++i)
        if (templates[i].attribute == attribute) out.push_back(int(i));
    return out;
}

bool World::prompt_usable(int entity, int tmpl) const {
    if (!entity_kept[entity] || !template_kept[tmpl]) return false;
    return !std::binary_search(dropped_prompts.begin(), dropped_prompts.end(), std::make_pair(entity, tmpl));
}

std::string World::render(int entity, int tmpl) const {
    std::string t = templates.at(tmpl).text;
    const auto pos = t.find(kEntitySlot);
    t.replace(pos, std::string(kEntitySlot).size(), entities.at(entity).name);
    return t;
}

// ---- splits -----------------------------------------------------------------

std::string to_string(SplitMode m) { return m == SplitMode::entity ? "entity" : "context"; }

std::string to_string(Part p) {
    switch (p) {
        case Part::train: return "train";
        case Part::dev: return "dev";
        default: return "test";
    }
}

SplitMode parse_split_mode(const std::string& s) {
    if (s == "entity") return SplitMode::entity;
    if (s == "context") return SplitMode::context;
    throw SpecError("unknown split mode '" + s + "' (expected entity or context)");
}

Part parse_part(const std::string& s) {
    if (s == "train") return Part::train;
    if (s == "dev") return Part::dev;
    if (s == "test") return Part::test;
    throw SpecError("unknown split part '" + s + "'");
}

const std::vector<int>& Split::part(Part p) const {
    switch (p) {
        case Part::train: return train;
        case Part::dev: return dev;
        default: return test;
    }
}

namespace {

void split_group(std::vector<int> items, Rng& rng, Split& out, const std::string& what) {
    if (items.size() < 4) throw SpecError("cannot split " + what + ": need at least 4 items, have " +
                                          std::to_string(items.size()));
    rng.shuffle(items);
    const std::size_t q = items.size() / 4;
    out.dev.insert(out.dev.end(), items.begin(), items.begin() + q);
    out.test.insert(out.test.end(), items.begin() + q, items.begin() + 2 * q);
    out.train.insert(out.train.end(), items.begin() + 2 * q, items.end());
}

}  // namespace

Split make_splits(const World& world, SplitMode mode) {
    Split s;
    s.mode = mode;
    Rng rng(derive_seed(world.spec.seed, "split/" + to_string(mode)));
    if (mode == SplitMode::entity) {
        std::vector<int> ids(world.entities.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = int(i);
        split_group(ids, rng, s, "entities");
    } else {
        for (int a = 0; a < int(world.n_attributes()); ++a)
            split_group(world.templates_for(a), rng, s, "templates of '" + world.attributes[a].name + "'");
        split_group(world.templates_for(-1), rng, s, "entity templates");
    }
    for (auto* v : {&s.train, &s.dev, &s.test}) std::sort(v->begin(), v->end());
    return s;
}

PartPool part_pool(const World& world, const Split& split, Part part) {
    PartPool pool;
    const auto& members = split.part(part);
    auto in_part = [&](int id) { return std::binary_search(members.begin(), members.end(), id); };
    for (int e = 0; e < int(world.entities.size()); ++e) {
        if (!world.entity_kept[e]) continue;
        if (split.mode == SplitMode::entity && !in_part(e)) continue;
        pool.entities.push_back(e);
    }
    for (int t = 0; t < int(world.templates.size()); ++t) {
        if (!world.template_kept[t]) continue;
        if (split.mode == SplitMode::context && !in_part(t)) continue;
        pool.templates.push_back(t);
    }
    return pool;
}

}  // namespace dbench
