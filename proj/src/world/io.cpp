#include <algorithm>
#include <sstream>

#include "dbench/checkpoint.h"
#include "dbench/errors.h"
#include "dbench/world.h"
#include "json.hpp"

namespace dbench {

using nlohmann::json;

namespace {

std::string dependency_name(Dependency d) {
    switch (d) {
        case Dependency::independent: return "independent";
        case Dependency::function_of: return "function_of";
        default: return "noisy_function_of";
    }
}

Dependency parse_dependency(const std::string& s) {
    if (s == "independent") return Dependency::independent;
    if (s == "function_of") return Dependency::function_of;
    if (s == "noisy_function_of") return Dependency::noisy_function_of;
    throw SpecError("unknown dependency '" + s + "'");
}

std::vector<json> read_jsonl(const std::filesystem::path& file) {
    std::istringstream in(read_file(file));
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw SpecError(file.string() + ": " + e.what());
        }
    }
    return rows;
}

json split_json(const Split& s) { return json{{"train", s.train}, {"dev", s.dev}, {"test", s.test}}; }

json spec_to_json(const WorldSpec& spec) {
    json attrs = json::array();
    for (const auto& a : spec.attributes) {
        attrs.push_back({{"name", a.name},
                         {"n_values", a.n_values},
                         {"dependency", dependency_name(a.dependency)},
                         {"parent", a.parent},
                         {"noise_rate", a.noise_rate}});
    }
    return {{"n_entities", spec.n_entities},
            {"attributes", attrs},
            {"n_attribute_templates", spec.n_attribute_templates},
            {"n_entity_templates", spec.n_entity_templates},
            {"few_shot", spec.few_shot},
            {"seed", spec.seed}};
}

WorldSpec spec_from_json(const json& j) {
    WorldSpec s;
    s.n_entities = j.at("n_entities");
    s.n_attribute_templates = j.at("n_attribute_templates");
    s.n_entity_templates = j.at("n_entity_templates");
    s.few_shot = j.at("few_shot");
    s.seed = j.at("seed");
    for (const auto& a : j.at("attributes")) {
        s.attributes.push_back({a.at("name"), a.at("n_values"), parse_dependency(a.at("dependency")),
                                a.at("parent"), a.at("noise_rate")});
    }
    return s;
}

}  // namespace

std::string world_spec_to_json(const WorldSpec& spec) { return spec_to_json(spec).dump(2) + "\n"; }

WorldSpec parse_world_spec(const std::string& text) {
    WorldSpec s;
    try {
        const json j = json::parse(text);
        // Missing keys fall back to defaults; unknown keys are rejected.
        const WorldSpec d = WorldSpec::defaults();
        json full = spec_to_json(d);
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!full.contains(it.key())) throw SpecError("unknown world spec key '" + it.key() + "'");
            full[it.key()] = it.value();
        }
        s = spec_from_json(full);
    } catch (const json::exception& e) {
        throw SpecError(std::string("malformed world spec: ") + e.what());
    }
    validate_spec(s);
    return s;
}

void save_world(const World& w, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string ents;
    for (const auto& e : w.entities) {
        json attrs = json::object();
        for (std::size_t a = 0; a < w.n_attributes(); ++a) attrs[w.attributes[a].name] = w.attributes[a].values[e.values[a]];
        ents += json{{"name", e.name}, {"syllables", e.syllables}, {"attributes", attrs}}.dump() + "\n";
    }
    write_file_atomic(dir / "entities.jsonl", ents);

    std::string tmpls;
    for (const auto& t : w.templates) {
        json attr = t.attribute < 0 ? json(nullptr) : json(w.attributes[t.attribute].name);
        tmpls += json{{"template", t.text}, {"attribute", attr}, {"format", t.format}}.dump() + "\n";
    }
    write_file_atomic(dir / "templates.jsonl", tmpls);

    json attrs = json::array();
    for (const auto& a : w.attributes) {
        attrs.push_back({{"name", a.name},
                         {"values", a.values},
                         {"dependency", dependency_name(a.dependency)},
                         {"parent", a.parent},
                         {"noise_rate", a.noise_rate},
                         {"map", a.map}});
    }
    json dropped = json::array();
    for (auto [e, t] : w.dropped_prompts) dropped.push_back({e, t});
    json meta{{"spec", spec_to_json(w.spec)},
              {"attributes", attrs},
              {"entity_kept", std::vector<int>(w.entity_kept.begin(), w.entity_kept.end())},
              {"template_kept", std::vector<int>(w.template_kept.begin(), w.template_kept.end())},
              {"dropped_prompts", dropped}};
    write_file_atomic(dir / "world.json", meta.dump(2) + "\n");
    save_splits(w, dir / "splits.json");
}

void save_splits(const World& w, const std::filesystem::path& file) {
    json j{{"entity", split_json(make_splits(w, SplitMode::entity))}};
    // Context mode needs at least 4 templates per group; record its absence otherwise.
    try {
        j["context"] = split_json(make_splits(w, SplitMode::context));
    } catch (const SpecError&) {
        j["context"] = nullptr;
    }
    write_file_atomic(file, j.dump(2) + "\n");
}

World load_world(const std::filesystem::path& dir) {
    World w;
    json meta;
    try {
        meta = json::parse(read_file(dir / "world.json"));
        w.spec = spec_from_json(meta.at("spec"));
        for (const auto& a : meta.at("attributes")) {
            Attribute at;
            at.name = a.at("name");
            at.values = a.at("values").get<std::vector<std::string>>();
            at.dependency = parse_dependency(a.at("dependency"));
            at.parent = a.at("parent");
            at.noise_rate = a.at("noise_rate");
            at.map = a.at("map").get<std::vector<int>>();
            w.attributes.push_back(std::move(at));
        }
        for (const auto& row : read_jsonl(dir / "entities.jsonl")) {
            Entity e;
            e.name = row.at("name");
            e.syllables = row.at("syllables").get<std::vector<std::string>>();
            for (const auto& a : w.attributes) {
                const std::string v = row.at("attributes").at(a.name);
                auto it = std::find(a.values.begin(), a.values.end(), v);
                if (it == a.values.end()) throw SpecError("entity '" + e.name + "' has unknown value '" + v + "'");
                e.values.push_back(int(it - a.values.begin()));
            }
            w.entities.push_back(std::move(e));
        }
        for (const auto& row : read_jsonl(dir / "templates.jsonl")) {
            Template t;
            t.text = row.at("template");
            t.attribute = row.at("attribute").is_null() ? -1 : w.attribute_index(row.at("attribute"));
            t.format = row.at("format");
            w.templates.push_back(std::move(t));
        }
        for (int v : meta.at("entity_kept")) w.entity_kept.push_back(char(v));
        for (int v : meta.at("template_kept")) w.template_kept.push_back(char(v));
        for (const auto& p : meta.at("dropped_prompts")) w.dropped_prompts.emplace_back(p.at(0), p.at(1));
    } catch (const json::exception& e) {
        throw SpecError("malformed world in " + dir.string() + ": " + e.what());
    }
    if (w.entity_kept.size() != w.entities.size() || w.template_kept.size() != w.templates.size())
        throw SpecError("world.json filter state does not match entity/template counts");
    return w;
}

namespace {

json tuple_json(const InterventionTuple& t, const World& w) {
    return json{{"x", t.base_text},
                {"x'", t.source_text},
                {"A", w.attributes[t.attribute].name},
                {"A*", w.attributes[t.target_attribute].name},
                {"y", t.label},
                {"kind", to_string(t.kind)},
                {"base", {t.base_entity, t.base_template}},
                {"source", {t.source_entity, t.source_template}}};
}

InterventionTuple tuple_from_json(const json& row, const World& w) {
    InterventionTuple t;
    t.base_text = row.at("x");
    t.source_text = row.at("x'");
    t.attribute = w.attribute_index(row.at("A"));
    t.target_attribute = w.attribute_index(row.at("A*"));
    t.label = row.at("y");
    const std::string kind = row.at("kind");
    if (kind != "cause" && kind != "iso") throw SpecError("unknown tuple kind '" + kind + "'");
    t.kind = kind == "cause" ? TupleKind::cause : TupleKind::iso;
    t.base_entity = row.at("base").at(0);
    t.base_template = row.at("base").at(1);
    t.source_entity = row.at("source").at(0);
    t.source_template = row.at("source").at(1);
    return t;
}

}  // namespace

void save_tuples(const std::vector<InterventionTuple>& tuples, const World& w, const std::filesystem::path& file) {
    std::string out;
    for (const auto& t : tuples) out += tuple_json(t, w).dump() + "\n";
    write_file_atomic(file, out);
}

std::vector<InterventionTuple> load_tuples(const World& w, const std::filesystem::path& file) {
    std::vector<InterventionTuple> out;
    try {
        for (const auto& row : read_jsonl(file)) out.push_back(tuple_from_json(row, w));
    } catch (const json::exception& e) {
        throw SpecError("malformed tuples in " + file.string() + ": " + e.what());
    }
    return out;
}

void save_tuple_sets(std::span<const TupleSet> sets, const World& w, const std::filesystem::path& file) {
    std::string out;
    for (const auto& set : sets)
        for (const auto& t : set.tuples) {
            json j = tuple_json(t, w);
            j["split_mode"] = to_string(set.mode);
            j["part"] = to_string(set.part);
            out += j.dump() + "\n";
        }
    write_file_atomic(file, out);
}

std::vector<InterventionTuple> load_tuple_set(const World& w, const std::filesystem::path& file, SplitMode mode,
                                              Part part, int attribute) {
    std::vector<InterventionTuple> out;
    const std::string m = to_string(mode), p = to_string(part);
    try {
        for (const auto& row : read_jsonl(file)) {
            if (row.at("split_mode") != m || row.at("part") != p) continue;
            auto t = tuple_from_json(row, w);
            if (attribute < 0 || t.attribute == attribute) out.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        throw SpecError("malformed tuples in " + file.string() + ": " + e.what());
    }
    return out;
}

}  // namespace dbench
