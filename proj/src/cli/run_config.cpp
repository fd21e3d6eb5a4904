#include "dbench/run_config.h"

#include <charconv>
#include <cstdio>
#include <set>
#include <sstream>
#include <variant>

#include "dbench/checkpoint.h"
#include "dbench/errors.h"
#include "dbench/rng.h"

namespace dbench {

namespace {

// PlantedConfig::site_dim is stored through the uint64 slot.
static_assert(std::is_same_v<std::size_t, std::uint64_t>);

using Slot = std::variant<std::uint64_t*, int*, double*, float*, bool*, std::string*, std::vector<int>*>;

struct Field {
    const char* section;
    const char* key;
    Slot slot;
};

// The table is built against a specific config object so both parsing and
// dumping walk the same list in the same order.
std::vector<Field> fields(RunConfig& c) {
    auto& f = c.featurizer;
    return {
        {"run", "seed", &c.run.seed},
        {"run", "split_mode", &c.run.split_mode},
        {"run", "threads", &c.run.threads},
        {"run", "model", &c.run.model},
        {"run", "world", &c.run.world},
        {"run", "match", &c.run.match},

        {"world", "spec", &c.world.spec},
        {"world", "n_entities", &c.world.n_entities},
        {"world", "n_attribute_templates", &c.world.n_attribute_templates},
        {"world", "n_entity_templates", &c.world.n_entity_templates},

        {"tuples", "n_train", &c.tuples.n_train},
        {"tuples", "n_dev", &c.tuples.n_dev},
        {"tuples", "n_test", &c.tuples.n_test},
        {"tuples", "entity_source_rate", &c.tuples.entity_source_rate},
        {"tuples", "distinct_values", &c.tuples.distinct_values},

        {"lm", "n_layers", &c.lm.n_layers},
        {"lm", "d_model", &c.lm.d_model},
        {"lm", "n_heads", &c.lm.n_heads},
        {"lm", "d_ff", &c.lm.d_ff},
        {"lm", "max_seq_len", &c.lm.max_seq_len},
        {"lm", "max_steps", &c.lm_train.max_steps},
        {"lm", "batch_size", &c.lm_train.batch_size},
        {"lm", "lr", &c.lm_train.lr},
        {"lm", "weight_decay", &c.lm_train.weight_decay},
        {"lm", "warmup_steps", &c.lm_train.warmup_steps},
        {"lm", "eval_every", &c.lm_train.eval_every},
        {"lm", "target_accuracy", &c.lm_train.target_accuracy},
        {"lm", "holdout_fraction", &c.lm_train.holdout_fraction},
        {"lm", "entity_prompt_weight", &c.lm_train.entity_prompt_weight},
        {"lm", "swap_rate", &c.lm_train.swap_rate},
        {"lm", "swap_min_layer", &c.lm_train.swap_min_layer},
        {"lm", "swap_max_layer", &c.lm_train.swap_max_layer},
        {"lm", "swap_weight", &c.lm_train.swap_weight},

        {"planted", "site_dim", &c.planted.site_dim},
        {"planted", "overlap_deg", &c.planted.overlap_deg},
        {"planted", "derived_readouts", &c.planted.derived_readouts},
        {"planted", "code_scale", &c.planted.code_scale},
        {"planted", "readout_beta", &c.planted.readout_beta},
        {"planted", "noise", &c.planted.noise},
        {"planted", "context_noise", &c.planted.context_noise},

        {"filter", "threshold", &c.filter.threshold},

        {"featurizer", "method", &f.method},
        {"featurizer", "attribute", &f.attribute},
        {"featurizer", "layer", &f.layer},
        {"featurizer", "k", &f.k},
        {"featurizer", "steps", &f.steps},
        {"featurizer", "batch_size", &f.batch_size},
        {"featurizer", "lr", &f.lr},
        {"featurizer", "lambda", &f.lambda},
        {"featurizer", "t_start", &f.t_start},
        {"featurizer", "t_end", &f.t_end},
        {"featurizer", "eps", &f.eps},
        {"featurizer", "l1_on_logits", &f.l1_on_logits},
        {"featurizer", "sae_latent", &f.sae_latent},
        {"featurizer", "sae_l1", &f.sae_l1},
        {"featurizer", "sae_steps", &f.sae_steps},
        {"featurizer", "sae_lr", &f.sae_lr},
        {"featurizer", "rlap_iterations", &f.rlap_iterations},
        {"featurizer", "rlap_probe_steps", &f.rlap_probe_steps},
        {"featurizer", "rlap_lr", &f.rlap_lr},
        {"featurizer", "rlap_w_lr", &f.rlap_w_lr},
        {"featurizer", "select_c", &f.select_c},
        {"featurizer", "select_eps", &f.select_eps},

        {"sweep", "layers", &c.sweep.layers},
        {"sweep", "ks", &c.sweep.ks},
    };
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw SpecError("expected a number, got '" + v + "'");
    return out;
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(trim(item)));
    return out;
}

void assign(const Slot& slot, const std::string& v) {
    std::visit(
        [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
                *p = v;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (v == "true" || v == "1") *p = true;
                else if (v == "false" || v == "0") *p = false;
                else throw SpecError("expected true or false, got '" + v + "'");
            } else if constexpr (std::is_same_v<T, std::vector<int>>) {
                *p = parse_int_list(v);
            } else {
                *p = parse_number<T>(v);
            }
        },
        slot);
}

std::string show(const Slot& slot) {
    return std::visit(
        [](auto* p) -> std::string {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
                return *p;
            } else if constexpr (std::is_same_v<T, bool>) {
                return *p ? "true" : "false";
            } else if constexpr (std::is_same_v<T, std::vector<int>>) {
                std::string s;
                for (std::size_t i = 0; i < p->size(); ++i) s += (i ? "," : "") + std::to_string((*p)[i]);
                return s;
            } else if constexpr (std::is_floating_point_v<T>) {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.9g", double(*p));
                return buf;
            } else {
                return std::to_string(*p);
            }
        },
        slot);
}

}  // namespace

std::uint64_t RunConfig::stage_seed(const std::string& stage) const { return derive_seed(run.seed, stage); }

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    auto table = fields(cfg);
    std::set<std::string> sections, seen;
    for (const auto& f : table) sections.insert(f.section);

    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw SpecError(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (!sections.count(section)) throw SpecError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw SpecError(where + "expected key = value");
        if (section.empty()) throw SpecError(where + "key outside any section");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const Field* field = nullptr;
        for (const auto& f : table)
            if (section == f.section && key == f.key) field = &f;
        if (!field) throw SpecError(where + "unknown key '" + key + "' in [" + section + "]");
        if (!seen.insert(section + "." + key).second) throw SpecError(where + "duplicate key '" + key + "'");
        try {
            assign(field->slot, value);
        } catch (const SpecError& e) {
            throw SpecError(where + section + "." + key + ": " + e.what());
        }
    }
    validate_run_config(cfg);
    return cfg;
}

void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
    const auto dot = dotted_key.find('.');
    if (dot == std::string::npos) throw SpecError("override '" + dotted_key + "' must be section.key");
    const std::string section = dotted_key.substr(0, dot), key = dotted_key.substr(dot + 1);
    for (const auto& f : fields(cfg)) {
        if (section != f.section || key != f.key) continue;
        try {
            assign(f.slot, trim(value));
        } catch (const SpecError& e) {
            throw SpecError(dotted_key + ": " + e.what());
        }
        return;
    }
    throw SpecError("unknown config key '" + dotted_key + "'");
}

RunConfig load_run_config(const std::filesystem::path& file) { return parse_run_config(read_file(file)); }

std::string dump_run_config(const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::string out, section;
    for (const auto& f : fields(copy)) {
        if (section != f.section) {
            if (!section.empty()) out += "\n";
            section = f.section;
            out += "[" + section + "]\n";
        }
        out += std::string(f.key) + " = " + show(f.slot) + "\n";
    }
    return out;
}

void validate_run_config(const RunConfig& c) {
    auto one_of = [](const std::string& what, const std::string& v, std::initializer_list<const char*> ok) {
        for (const char* o : ok)
            if (v == o) return;
        std::string list;
        for (const char* o : ok) list += std::string(list.empty() ? "" : ", ") + o;
        throw SpecError(what + " must be one of " + list + ", got '" + v + "'");
    };
    one_of("run.split_mode", c.run.split_mode, {"entity", "context"});
    one_of("run.model", c.run.model, {"lm", "planted"});
    one_of("run.world", c.run.world, {"auto", "filter", "world"});
    one_of("run.match", c.run.match, {"first_token", "exact"});
    one_of("featurizer.method", c.featurizer.method, {"full-rep", "pca", "sae", "rlap", "das", "mdas", "dbm", "mdbm"});
    if (c.run.threads < 1) throw SpecError("run.threads must be at least 1");
    if (c.tuples.n_train < 1 || c.tuples.n_dev < 1 || c.tuples.n_test < 1)
        throw SpecError("tuples counts must be positive");
    if (c.filter.threshold < 0) throw SpecError("filter.threshold must be non-negative");
    if (c.featurizer.layer < 0) throw SpecError("featurizer.layer must be non-negative");
    if (c.featurizer.k < 1) throw SpecError("featurizer.k must be positive");
    if (c.featurizer.select_c <= 0) throw SpecError("featurizer.select_c must be positive");
    for (int l : c.sweep.layers)
        if (l < 0) throw SpecError("sweep.layers must be non-negative");
    if (c.sweep.ks.empty()) throw SpecError("sweep.ks must not be empty");
    for (int k : c.sweep.ks)
        if (k < 1) throw SpecError("sweep.ks entries must be positive");
}

}  // namespace dbench
