#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "dbench/errors.h"
#include "dbench/world.h"
#include "doctest.h"

using namespace dbench;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dbench_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

// Two-city world with hand-written facts.
World city_world() {
    World w;
    w.spec.n_entities = 2;
    w.attributes = {{"continent", {"Europe", "Asia"}, Dependency::independent, -1, 0.0, {}},
                    {"language", {"French", "Japanese"}, Dependency::independent, -1, 0.0, {}}};
    w.entities = {{"Paris", {"Paris"}, {0, 0}}, {"Tokyo", {"Tokyo"}, {1, 1}}};
    w.templates = {{"<E> is in the continent of", 0, "natural"},
                   {"People in <E> usually speak", 1, "natural"},
                   {"<E> is a city", -1, "natural"}};
    w.entity_kept.assign(2, 1);
    w.template_kept.assign(3, 1);
    return w;
}

Split everything_in_train(const World& w) {
    Split s;
    for (int e = 0; e < int(w.entities.size()); ++e) s.train.push_back(e);
    return s;
}

}  // namespace

TEST_CASE("default world shape") {
    auto spec = WorldSpec::defaults();
    auto w = generate_world(spec);
    CHECK(w.entities.size() == 200);
    CHECK(w.n_attributes() == 4);
    std::set<std::string> names;
    for (const auto& e : w.entities) {
        names.insert(e.name);
        REQUIRE(e.values.size() == 4);
        for (std::size_t a = 0; a < 4; ++a) {
            CHECK(e.values[a] >= 0);
            CHECK(e.values[a] < int(w.attributes[a].values.size()));
        }
        CHECK(e.syllables.size() >= 2);
        CHECK(e.syllables.size() <= 3);
    }
    CHECK(names.size() == 200);
    // Value words are unique across attributes.
    std::set<std::string> vals;
    std::size_t total = 0;
    for (const auto& a : w.attributes) {
        vals.insert(a.values.begin(), a.values.end());
        total += a.values.size();
    }
    CHECK(vals.size() == total);
}

TEST_CASE("templates hold one entity slot and cover both formats") {
    auto w = generate_world(WorldSpec::defaults());
    for (const auto& t : w.templates) {
        const auto first = t.text.find(kEntitySlot);
        REQUIRE(first != std::string::npos);
        CHECK(t.text.find(kEntitySlot, first + 1) == std::string::npos);
    }
    for (int a = 0; a < 4; ++a) {
        auto ids = w.templates_for(a);
        CHECK(ids.size() == 6);
        bool json = false, natural = false;
        for (int t : ids) (w.templates[t].format == "json" ? json : natural) = true;
        CHECK(json);
        CHECK(natural);
    }
    CHECK(w.templates_for(-1).size() == 4);
}

TEST_CASE("function-of dependency holds for every entity") {
    auto w = generate_world(WorldSpec::defaults());
    const int country = w.attribute_index("country");
    const int continent = w.attribute_index("continent");
    CHECK(w.attributes[continent].parent == country);
    for (const auto& e : w.entities)
        CHECK(e.values[continent] == w.attributes[continent].map[e.values[country]]);
}

TEST_CASE("noisy dependency violation rate") {
    WorldSpec spec;
    spec.seed = 4;
    spec.attributes = {{"country", 10, Dependency::independent, "", 0},
                       {"language", 8, Dependency::noisy_function_of, "country", 0.2}};
    auto w = generate_world(spec);
    int violations = 0;
    for (const auto& e : w.entities) violations += e.values[1] != w.attributes[1].map[e.values[0]];
    const double rate = violations / 200.0;
    CHECK(rate >= 0.15);
    CHECK(rate <= 0.25);
}

TEST_CASE("spec validation") {
    WorldSpec spec;
    spec.attributes = {{"a", 3, Dependency::function_of, "b", 0}, {"b", 3, Dependency::function_of, "a", 0}};
    CHECK_THROWS_AS(generate_world(spec), SpecError);
    spec.attributes = {{"a", 3, Dependency::function_of, "zzz", 0}};
    CHECK_THROWS_AS(generate_world(spec), SpecError);
    spec.attributes = {{"a", 1, Dependency::independent, "", 0}};
    CHECK_THROWS_AS(generate_world(spec), SpecError);
    spec.attributes = {{"a", 2, Dependency::independent, "", 0}, {"a", 2, Dependency::independent, "", 0}};
    CHECK_THROWS_AS(generate_world(spec), SpecError);
    // A chain is fine.
    spec.attributes = {{"c", 2, Dependency::function_of, "b", 0},
                       {"b", 3, Dependency::function_of, "a", 0},
                       {"a", 4, Dependency::independent, "", 0}};
    auto w = generate_world(spec);
    for (const auto& e : w.entities) {
        CHECK(e.values[1] == w.attributes[1].map[e.values[2]]);
        CHECK(e.values[0] == w.attributes[0].map[e.values[1]]);
    }
}

TEST_CASE("generation is seed-deterministic") {
    auto spec = WorldSpec::defaults();
    CHECK(generate_world(spec) == generate_world(spec));
    auto other = spec;
    other.seed = 99;
    CHECK_FALSE(generate_world(spec) == generate_world(other));
}

TEST_CASE("entity split proportions") {
    auto w = generate_world(WorldSpec::defaults());
    auto s = make_splits(w, SplitMode::entity);
    CHECK(s.train.size() == 100);
    CHECK(s.dev.size() == 50);
    CHECK(s.test.size() == 50);
    std::set<int> all(s.train.begin(), s.train.end());
    for (int e : s.dev) CHECK(all.insert(e).second);
    for (int e : s.test) CHECK(all.insert(e).second);
    CHECK(all.size() == 200);
}

TEST_CASE("context split rounding") {
    auto spec = WorldSpec::defaults();
    spec.n_attribute_templates = 7;
    auto w = generate_world(spec);
    auto s = make_splits(w, SplitMode::context);
    for (int a = 0; a < 4; ++a) {
        std::map<Part, int> count;
        for (int t : w.templates_for(a)) {
            for (Part p : {Part::train, Part::dev, Part::test}) {
                const auto& v = s.part(p);
                count[p] += std::count(v.begin(), v.end(), t);
            }
        }
        // floor(7/4) = 1 for dev and test; train keeps the remaining 5.
        CHECK(count[Part::train] == 5);
        CHECK(count[Part::dev] == 1);
        CHECK(count[Part::test] == 1);
    }
    std::set<int> all;
    for (Part p : {Part::train, Part::dev, Part::test})
        for (int t : s.part(p)) CHECK(all.insert(t).second);
    CHECK(all.size() == w.templates.size());

    spec.n_entity_templates = 3;
    CHECK_THROWS_AS(make_splits(generate_world(spec), SplitMode::context), SpecError);
}

TEST_CASE("pairing: worked city example") {
    auto w = city_world();
    auto split = everything_in_train(w);
    auto tuples = pair_interventions(w, split, Part::train, 0, 40, 3);
    int cause_paris = 0, iso_paris = 0;
    for (const auto& t : tuples) {
        CHECK(t.base_entity != t.source_entity);
        if (t.base_entity != 0) continue;
        if (t.kind == TupleKind::cause) {
            CHECK(t.base_text == "Paris is in the continent of");
            CHECK(t.label == "Asia");
            ++cause_paris;
        } else {
            CHECK(t.target_attribute == 1);
            CHECK(t.label == "French");
            ++iso_paris;
        }
    }
    CHECK(cause_paris > 0);
    CHECK(iso_paris > 0);
    CHECK(pair_interventions(w, split, Part::train, 0, 0, 3).empty());
}

TEST_CASE("pairing invariants") {
    auto w = generate_world(WorldSpec::defaults());
    auto split = make_splits(w, SplitMode::entity);
    const int continent = w.attribute_index("continent");
    auto tuples = pair_interventions(w, split, Part::test, continent, 301, 11);
    REQUIRE(tuples.size() == 301);
    std::map<int, int> per_target;
    int cause = 0, entity_sources = 0;
    std::set<int> train(split.train.begin(), split.train.end());
    for (const auto& t : tuples) {
        CHECK(t.label == expected_label(w, t));
        CHECK(t.base_entity != t.source_entity);
        CHECK(w.templates[t.base_template].attribute == t.target_attribute);
        CHECK(t.base_text == w.render(t.base_entity, t.base_template));
        CHECK(w.entities[t.base_entity].values[t.target_attribute] !=
              w.entities[t.source_entity].values[t.target_attribute]);
        CHECK(train.count(t.base_entity) == 0);
        CHECK(train.count(t.source_entity) == 0);
        if (t.kind == TupleKind::cause) {
            ++cause;
            CHECK(t.target_attribute == continent);
        } else {
            CHECK(t.target_attribute != continent);
            ++per_target[t.target_attribute];
        }
        entity_sources += w.templates[t.source_template].attribute < 0;
    }
    CHECK(cause == 151);
    REQUIRE(per_target.size() == 3);
    for (auto [a, c] : per_target) CHECK(c == 50);
    CHECK(entity_sources > 110);
    CHECK(entity_sources < 190);
    CHECK(pair_interventions(w, split, Part::test, continent, 301, 11) == tuples);

    auto ctx = make_splits(w, SplitMode::context);
    std::set<int> train_templates(ctx.train.begin(), ctx.train.end());
    for (const auto& t : pair_interventions(w, ctx, Part::test, continent, 100, 5)) {
        CHECK(train_templates.count(t.base_template) == 0);
        CHECK(train_templates.count(t.source_template) == 0);
    }
}

TEST_CASE("pairing respects filtering and needs two entities") {
    auto w = city_world();
    auto split = everything_in_train(w);
    w.dropped_prompts = {{1, 0}};  // Tokyo's continent prompt is unusable
    for (const auto& t : pair_interventions(w, split, Part::train, 0, 20, 8)) {
        CHECK_FALSE((t.base_entity == 1 && t.base_template == 0));
        CHECK_FALSE((t.source_entity == 1 && t.source_template == 0));
    }
    w.entity_kept[1] = 0;
    CHECK_THROWS_AS(pair_interventions(w, split, Part::train, 0, 4, 8), ContractError);
}

TEST_CASE("world serialization round trip") {
    auto w = generate_world(WorldSpec::defaults());
    w.entity_kept[3] = 0;
    w.dropped_prompts = {{1, 2}, {5, 0}};
    auto dir = scratch_dir("world");
    save_world(w, dir);
    for (const char* f : {"entities.jsonl", "templates.jsonl", "splits.json", "world.json"})
        CHECK(std::filesystem::exists(dir / f));
    CHECK(load_world(dir) == w);

    auto split = make_splits(w, SplitMode::entity);
    auto tuples = pair_interventions(w, split, Part::dev, 0, 50, 2);
    save_tuples(tuples, w, dir / "tuples.jsonl");
    CHECK(load_tuples(w, dir / "tuples.jsonl") == tuples);
    CHECK_THROWS_AS(load_world(dir / "missing"), MissingArtifactError);
}

TEST_CASE("world spec parsing") {
    auto s = parse_world_spec(R"({"n_entities": 40, "seed": 3})");
    CHECK(s.n_entities == 40);
    CHECK(s.seed == 3);
    CHECK(s.attributes == WorldSpec::defaults().attributes);
    CHECK(parse_world_spec(world_spec_to_json(s)) == s);
    CHECK_THROWS_AS(parse_world_spec(R"({"n_entites": 40})"), SpecError);
    CHECK_THROWS_AS(parse_world_spec("{"), SpecError);
}
