#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dbench {

enum class Dependency { independent, function_of, noisy_function_of };

struct AttributeSpec {
    std::string name;
    int n_values = 2;
    Dependency dependency = Dependency::independent;
    std::string parent;       // for function_of / noisy_function_of
    double noise_rate = 0.0;  // noisy_function_of only

    bool operator==(const AttributeSpec&) const = default;
};

struct WorldSpec {
    int n_entities = 200;
    std::vector<AttributeSpec> attributes;
    int n_attribute_templates = 6;
    int n_entity_templates = 4;
    int few_shot = 0;
    std::uint64_t seed = 0;

    // 200 entities; country, continent = g(country), language = noisy g(country), climate.
    static WorldSpec defaults();
    bool operator==(const WorldSpec&) const = default;
};

struct Attribute {
    std::string name;
    std::vector<std::string> values;
    Dependency dependency = Dependency::independent;
    int parent = -1;
    double noise_rate = 0.0;
    std::vector<int> map;  // parent value index -> value index

    bool operator==(const Attribute&) const = default;
};

struct Entity {
    std::string name;
    std::vector<std::string> syllables;
    std::vector<int> values;  // value index per attribute

    bool operator==(const Entity&) const = default;
};

inline constexpr const char* kEntitySlot = "<E>";

struct Template {
    std::string text;    // contains kEntitySlot exactly once
    int attribute = -1;  // -1: entity template (queries nothing)
    std::string format;  // "natural" or "json"

    bool operator==(const Template&) const = default;
};

struct World {
    WorldSpec spec;
    std::vector<Attribute> attributes;
    std::vector<Entity> entities;
    std::vector<Template> templates;

    // Filtering state. Dropped prompts are (entity, template) pairs the model
    // got wrong inside otherwise retained entities/templates.
    std::vector<char> entity_kept;
    std::vector<char> template_kept;
    std::vector<std::pair<int, int>> dropped_prompts;  // sorted

    std::size_t n_attributes() const { return attributes.size(); }
    int attribute_index(const std::string& name) const;
    const std::string& value(int attribute, int entity) const {
        return attributes[attribute].values[entities[entity].values[attribute]];
    }
    std::vector<int> templates_for(int attribute) const;  // attribute = -1 for entity templates
    bool prompt_usable(int entity, int tmpl) const;
    std::string render(int entity, int tmpl) const;

    bool operator==(const World&) const = default;
};

World generate_world(const WorldSpec& spec);
void validate_spec(const WorldSpec& spec);

enum class SplitMode { entity, context };
enum class Part { train, dev, test };

std::string to_string(SplitMode m);
std::string to_string(Part p);
SplitMode parse_split_mode(const std::string& s);
Part parse_part(const std::string& s);

// Entity mode partitions entity ids; context mode partitions template ids
// (each attribute's templates and the entity templates separately).
struct Split {
    SplitMode mode = SplitMode::entity;
    std::vector<int> train, dev, test;

    const std::vector<int>& part(Part p) const;
};

// dev = test = floor(n/4) per group, train takes the remainder.
Split make_splits(const World& world, SplitMode mode);

// Entities and templates eligible for a split part, after filtering.
struct PartPool {
    std::vector<int> entities;
    std::vector<int> templates;  // attribute and entity templates
};
PartPool part_pool(const World& world, const Split& split, Part part);

enum class TupleKind { cause, iso };

struct InterventionTuple {
    int attribute = 0;         // the featurized attribute A
    int target_attribute = 0;  // A*
    int base_entity = 0, base_template = 0;
    int source_entity = 0, source_template = 0;
    std::string base_text, source_text;
    std::string label;
    TupleKind kind = TupleKind::cause;

    bool operator==(const InterventionTuple&) const = default;
};

struct PairOptions {
    // Require the base and source entities to differ on A*, so that a no-op
    // intervention never scores as a cause success by accident.
    bool distinct_values = true;
    double entity_source_rate = 0.5;
};

// Half the tuples (rounded up) are cause tuples; iso tuples cycle through the
// distractor attributes in index order.
std::vector<InterventionTuple> pair_interventions(const World& world, const Split& split, Part part, int attribute,
                                                  int n, std::uint64_t seed, const PairOptions& opts = {});

// Re-derives a tuple's label from the attribute table.
std::string expected_label(const World& world, const InterventionTuple& t);

std::string to_string(TupleKind k);

// ---- serialization ----------------------------------------------------------

// JSON form of a spec; parse_world_spec fills omitted keys from defaults().
std::string world_spec_to_json(const WorldSpec& spec);
WorldSpec parse_world_spec(const std::string& text);

void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);
void save_splits(const World& world, const std::filesystem::path& file);
void save_tuples(const std::vector<InterventionTuple>& tuples, const World& world, const std::filesystem::path& file);
std::vector<InterventionTuple> load_tuples(const World& world, const std::filesystem::path& file);

// Tuples of one split mode and part, possibly covering several attributes.
struct TupleSet {
    SplitMode mode = SplitMode::entity;
    Part part = Part::train;
    std::vector<InterventionTuple> tuples;
};
// One JSON line per tuple, tagged with its split mode and part.
void save_tuple_sets(std::span<const TupleSet> sets, const World& world, const std::filesystem::path& file);
// Tuples of the given mode and part; attribute < 0 keeps every attribute.
std::vector<InterventionTuple> load_tuple_set(const World& world, const std::filesystem::path& file, SplitMode mode,
                                              Part part, int attribute = -1);

}  // namespace dbench
