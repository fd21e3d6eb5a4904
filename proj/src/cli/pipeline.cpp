#include "dbench/pipeline.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

#include "dbench/checkpoint.h"
#include "dbench/errors.h"
#include "dbench/lm.h"
#include "dbench/planted.h"
#include "json.hpp"

namespace dbench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_config(const fs::path& dir, const RunConfig& cfg, const std::string& stage,
                  std::initializer_list<std::string> seeds) {
    std::string head = "# resolved configuration of stage " + stage + "\n";
    for (const auto& s : seeds) head += "# seed " + s + " = " + std::to_string(cfg.stage_seed(s)) + "\n";
    write_file_atomic(dir / "config.ini", head + "\n" + dump_run_config(cfg));
}

void require(const fs::path& file) {
    if (!fs::exists(file)) throw MissingArtifactError("missing file: " + file.string());
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<int> target_attributes(const RunConfig& cfg, const World& world) {
    std::vector<int> out;
    if (cfg.featurizer.attribute == "all") {
        for (std::size_t a = 0; a < world.n_attributes(); ++a) out.push_back(int(a));
    } else {
        out.push_back(world.attribute_index(cfg.featurizer.attribute));
    }
    return out;
}

bool is_k_method(const std::string& m) { return m == "das" || m == "mdas" || m == "rlap"; }

// Runs body(i) for i in [0, n) on up to `threads` workers; the first
// exception is rethrown after all workers stop.
template <typename F>
void parallel_for(std::size_t n, int threads, F body) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex mu;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    const auto t = std::size_t(std::max(1, threads));
    if (t == 1 || n <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < std::min(t, n); ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (error) std::rethrow_exception(error);
}

MatchRule match_rule(const RunConfig& cfg) {
    return cfg.run.match == "exact" ? MatchRule::exact : MatchRule::first_token;
}

std::size_t checked_layer(const SiteModel& model, int layer) {
    if (layer < 0 || std::size_t(layer) >= model.num_layers())
        throw SpecError("layer " + std::to_string(layer) + " is outside the model's " +
                        std::to_string(model.num_layers()) + " sites");
    return std::size_t(layer);
}

Matrix parse_matrix_csv(const std::string& text, std::vector<std::string>& names) {
    std::istringstream in(text);
    std::string line;
    Matrix m;
    names.clear();
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        if (header) {
            names.assign(cells.begin() + 1, cells.end());
            header = false;
            continue;
        }
        std::vector<double> row;
        for (std::size_t i = 1; i < cells.size(); ++i) row.push_back(std::stod(cells[i]));
        m.push_back(std::move(row));
    }
    if (m.size() != names.size()) throw SpecError("matrix.csv is not square");
    return m;
}

}  // namespace

// ---- building blocks --------------------------------------------------------

World build_world(const RunConfig& cfg) {
    if (!cfg.world.spec.empty() && !fs::exists(cfg.world.spec))
        throw SpecError("world spec not found: " + cfg.world.spec);
    WorldSpec spec = cfg.world.spec.empty() ? WorldSpec::defaults() : parse_world_spec(read_file(cfg.world.spec));
    if (cfg.world.n_entities > 0) spec.n_entities = cfg.world.n_entities;
    if (cfg.world.n_attribute_templates > 0) spec.n_attribute_templates = cfg.world.n_attribute_templates;
    if (cfg.world.n_entity_templates > 0) spec.n_entity_templates = cfg.world.n_entity_templates;
    spec.seed = cfg.stage_seed("gen-world");
    return generate_world(spec);
}

std::vector<TupleSet> build_tuple_sets(const World& world, const RunConfig& cfg) {
    std::vector<TupleSet> sets;
    PairOptions opts;
    opts.distinct_values = cfg.tuples.distinct_values;
    opts.entity_source_rate = cfg.tuples.entity_source_rate;
    for (SplitMode mode : {SplitMode::entity, SplitMode::context}) {
        Split split;
        try {
            split = make_splits(world, mode);
        } catch (const SpecError&) {
            continue;  // too few templates for a context split
        }
        for (Part part : {Part::train, Part::dev, Part::test}) {
            const int n = part == Part::train ? cfg.tuples.n_train : part == Part::dev ? cfg.tuples.n_dev : cfg.tuples.n_test;
            TupleSet set{mode, part, {}};
            for (std::size_t a = 0; a < world.n_attributes(); ++a) {
                const auto seed = cfg.stage_seed("tuples/" + to_string(mode) + "/" + to_string(part) + "/" +
                                                 world.attributes[a].name);
                auto t = pair_interventions(world, split, part, int(a), n, seed, opts);
                set.tuples.insert(set.tuples.end(), t.begin(), t.end());
            }
            sets.push_back(std::move(set));
        }
    }
    return sets;
}

fs::path source_world_dir(const RunConfig& cfg, const RunPaths& paths) {
    std::string w = cfg.run.world;
    if (w == "auto") w = cfg.uses_planted() ? "world" : "filter";
    return w == "filter" ? paths.filter() : paths.world();
}

PlantedConfig planted_config(const RunConfig& cfg) {
    PlantedConfig p = cfg.planted;
    p.seed = cfg.stage_seed("planted");
    return p;
}

std::unique_ptr<SiteModel> load_site_model(const RunConfig& cfg, const RunPaths& paths, const World& world) {
    if (cfg.uses_planted()) return std::make_unique<PlantedModel>(world, planted_config(cfg));
    require(paths.lm() / "model.cdl");
    require(paths.lm() / "model.json");
    auto lm = LanguageModel::load(paths.lm() / "model.cdl", paths.lm() / "model.json");
    return std::make_unique<LanguageModel>(std::move(lm));
}

Activations collect_activations(const SiteModel& model, const World& world, const Split& split, Part part,
                                std::size_t layer, int attribute) {
    const auto pool = part_pool(world, split, part);
    std::vector<Prompt> prompts;
    Activations out;
    for (int e : pool.entities)
        for (int t : pool.templates) {
            const int a = world.templates[std::size_t(t)].attribute;
            if (attribute >= 0 && a != attribute) continue;
            if (!world.prompt_usable(e, t)) continue;
            prompts.push_back(model.make_prompt(world, e, t));
            out.labels.push_back(attribute >= 0 ? world.entities[std::size_t(e)].values[std::size_t(attribute)] : -1);
        }
    if (prompts.empty()) throw ContractError("no usable prompts in the " + to_string(part) + " part");
    NoGradGuard no_grad;
    std::vector<float> rows;
    rows.reserve(prompts.size() * model.site_dim());
    for (std::size_t lo = 0; lo < prompts.size(); lo += 256) {
        const auto chunk = std::span<const Prompt>(prompts).subspan(lo, std::min<std::size_t>(256, prompts.size() - lo));
        const Tensor v = model.site_values(chunk, layer);
        rows.insert(rows.end(), v.data().begin(), v.data().end());
    }
    out.x = Tensor({prompts.size(), model.site_dim()}, std::move(rows));
    return out;
}

FeatureHandle fit_handle(const RunConfig& cfg, const SiteModel& model, const World& world, const Split& split,
                         std::span<const InterventionTuple> train, int attribute, std::size_t layer, std::size_t k,
                         const TrainLog& log) {
    const auto& f = cfg.featurizer;
    const std::string& m = f.method;
    const auto seed = cfg.stage_seed("fit/" + m + "/" + world.attributes[std::size_t(attribute)].name + "/" +
                                     std::to_string(layer) + "/" + std::to_string(k));
    FeatureHandle h;
    if (m == "full-rep") {
        h = full_rep_handle(model.site_dim(), layer);
    } else if (m == "pca" || m == "sae") {
        const auto all = collect_activations(model, world, split, Part::train, layer, -1);
        std::shared_ptr<const Featurizer> feat;
        if (m == "pca") {
            feat = fit_pca(all.x);
        } else {
            SaeConfig sc;
            sc.latent = std::size_t(f.sae_latent);
            sc.l1 = f.sae_l1;
            sc.steps = f.sae_steps;
            sc.batch_size = f.batch_size;
            sc.lr = float(f.sae_lr);
            sc.seed = seed;
            feat = fit_sae(all.x, sc);
        }
        const auto a = collect_activations(model, world, split, Part::train, layer, attribute);
        Tensor enc;
        {
            NoGradGuard no_grad;
            enc = feat->encode(a.x);
        }
        h.featurizer = feat;
        h.features = select_features_l1(enc, a.labels, f.select_c, f.select_eps);
    } else if (m == "rlap") {
        const auto a = collect_activations(model, world, split, Part::train, layer, attribute);
        RlapConfig rc;
        rc.k = k;
        rc.iterations = f.rlap_iterations;
        rc.probe_steps = f.rlap_probe_steps;
        rc.lr = float(f.rlap_lr);
        rc.w_lr = float(f.rlap_w_lr);
        rc.seed = seed;
        h = fit_rlap(a.x, a.labels, rc, layer);
    } else if (m == "das" || m == "mdas") {
        DasConfig dc;
        dc.k = k;
        dc.multi_task = m == "mdas";
        dc.steps = f.steps;
        dc.batch_size = f.batch_size;
        dc.lr = float(f.lr);
        dc.seed = seed;
        h = fit_das(model, world, train, layer, dc, log);
    } else {
        DbmConfig bc;
        bc.multi_task = m == "mdbm";
        bc.lambda = f.lambda;
        bc.t_start = f.t_start;
        bc.t_end = f.t_end;
        bc.eps = f.eps;
        bc.l1_on_logits = f.l1_on_logits;
        bc.steps = f.steps;
        bc.batch_size = f.batch_size;
        bc.lr = float(f.lr);
        bc.seed = seed;
        h = fit_dbm(model, world, train, layer, bc, log);
    }
    h.layer = layer;
    return h;
}

std::string k_or_eps(const RunConfig& cfg, const FeatureHandle& handle) {
    const auto& m = cfg.featurizer.method;
    if (m == "dbm" || m == "mdbm") return fmt("%g", cfg.featurizer.eps);
    return std::to_string(handle.features.size());
}

int exit_code(std::exception_ptr error) {
    if (!error) return 0;
    try {
        std::rethrow_exception(error);
    } catch (const EmptyInstanceError&) {
        return 1;
    } catch (const SpecError&) {
        return 2;
    } catch (const MissingArtifactError&) {
        return 3;
    } catch (const DivergenceError&) {
        return 4;
    } catch (const DegeneracyError&) {
        return 4;
    } catch (...) {
        return 1;
    }
}

// ---- stages -----------------------------------------------------------------

void stage_gen_world(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    const World world = build_world(cfg);
    const auto sets = build_tuple_sets(world, cfg);
    const auto dir = paths.world();
    save_world(world, dir);
    save_tuple_sets(sets, world, dir / "tuples.jsonl");
    write_config(dir, cfg, "gen-world", {"gen-world"});

    log << "world: " << world.entities.size() << " entities, " << world.n_attributes() << " attributes, "
        << world.templates.size() << " templates\n";
    for (const auto& a : world.attributes) log << "  " << a.name << ": " << a.values.size() << " values\n";
    for (const auto& s : sets)
        log << "  tuples " << to_string(s.mode) << "/" << to_string(s.part) << ": " << s.tuples.size() << "\n";
    log << "wrote " << dir.string() << "\n";
}

void stage_train_lm(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    require(paths.world() / "world.json");
    const World world = load_world(paths.world());
    LmConfig lc = cfg.lm;
    lc.seed = cfg.stage_seed("train-lm");
    const auto t0 = std::chrono::steady_clock::now();
    auto trained = train_lm(world, lc, cfg.lm_train, [&](const std::string& s) { log << s << "\n"; });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& r = trained.report;

    const auto dir = paths.lm();
    fs::create_directories(dir);
    const json extra{{"steps", r.steps},
                     {"final_loss", r.final_loss},
                     {"train_accuracy", r.train_accuracy},
                     {"heldout_accuracy", r.heldout_accuracy},
                     {"swap_accuracy", r.swap_accuracy},
                     {"reached_target", r.reached_target}};
    trained.model.save(dir / "model.cdl", dir / "model.json", extra.dump());
    std::string curve = "step,heldout_accuracy\n";
    for (auto [step, acc] : r.accuracy_curve) curve += std::to_string(step) + "," + format_score(acc) + "\n";
    write_file_atomic(dir / "accuracy_curve.csv", curve);
    write_config(dir, cfg, "train-lm", {"train-lm"});

    log << "trained " << r.steps << " steps in " << fmt("%.1f", secs) << " s; held-out accuracy "
        << format_score(r.heldout_accuracy) << ", swap accuracy " << format_score(r.swap_accuracy)
        << (r.reached_target ? "" : " (target not reached)") << "\n";
}

void stage_filter(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    require(paths.world() / "world.json");
    const World world = load_world(paths.world());
    const auto model = load_site_model(cfg, paths, world);
    FilterReport rep;
    const World filtered = filter_instance(world, *model, cfg.filter.threshold, &rep);
    const auto sets = build_tuple_sets(filtered, cfg);

    const auto dir = paths.filter();
    save_world(filtered, dir);
    save_tuple_sets(sets, filtered, dir / "tuples.jsonl");
    const json summary{{"threshold", rep.threshold},
                       {"entities_kept", rep.entities_kept},
                       {"templates_kept", rep.templates_kept},
                       {"prompts_dropped", rep.prompts_dropped},
                       {"accuracy_before", rep.accuracy_before},
                       {"accuracy_after", rep.accuracy_after}};
    write_file_atomic(dir / "filter_report.json", summary.dump(2) + "\n");
    std::string acc = "entity";
    for (const auto& a : world.attributes) acc += "," + a.name;
    acc += "\n";
    for (std::size_t e = 0; e < world.entities.size(); ++e) {
        if (!filtered.entity_kept[e]) continue;
        acc += world.entities[e].name;
        for (double v : rep.accuracy[e]) acc += "," + (std::isnan(v) ? std::string() : format_score(v));
        acc += "\n";
    }
    write_file_atomic(dir / "accuracy.csv", acc);
    write_config(dir, cfg, "filter", {"gen-world"});

    log << "filter at " << cfg.filter.threshold << ": kept " << rep.entities_kept << "/" << world.entities.size()
        << " entities and " << rep.templates_kept << " attribute templates, dropped " << rep.prompts_dropped
        << " prompts; accuracy " << format_score(rep.accuracy_before) << " -> " << format_score(rep.accuracy_after)
        << "\n";
}

void stage_fit_featurizer(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    const auto& method = cfg.featurizer.method;
    const auto out = paths.featurizers(method);
    if (method == "full-rep") {
        fs::create_directories(out);
        write_config(out, cfg, "fit-featurizer", {});
        log << "full-rep needs no fitting\n";
        return;
    }
    const auto wdir = source_world_dir(cfg, paths);
    require(wdir / "world.json");
    require(wdir / "tuples.jsonl");
    const World world = load_world(wdir);
    const auto model = load_site_model(cfg, paths, world);
    const Split split = make_splits(world, cfg.split_mode());
    const std::size_t layer = checked_layer(*model, cfg.featurizer.layer);
    const auto attrs = target_attributes(cfg, world);

    std::mutex log_mu;
    parallel_for(attrs.size(), cfg.run.threads, [&](std::size_t i) {
        const int a = attrs[i];
        const auto& name = world.attributes[std::size_t(a)].name;
        const auto train = load_tuple_set(world, wdir / "tuples.jsonl", cfg.split_mode(), Part::train, a);
        auto tlog = [&](const std::string& s) {
            std::lock_guard lock(log_mu);
            log << "[" << name << "] " << s << "\n";
        };
        const auto h = fit_handle(cfg, *model, world, split, train, a, layer, std::size_t(cfg.featurizer.k), tlog);
        json meta{{"attribute", name},
                  {"split_mode", cfg.run.split_mode},
                  {"k_or_eps", k_or_eps(cfg, h)},
                  {"n_train_tuples", train.size()}};
        if (auto* s = dynamic_cast<const SaeFeaturizer*>(h.featurizer.get())) meta["recon_error"] = s->recon_error;
        fs::create_directories(out / name);
        save_featurizer(h, out / name / "featurizer.cdl", out / name / "featurizer.json", meta.dump());
        std::lock_guard lock(log_mu);
        log << "fitted " << method << " for " << name << ": " << h.features.size() << " features at layer " << layer
            << "\n";
    });
    write_config(out, cfg, "fit-featurizer", {});
}

void stage_evaluate(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    const auto& method = cfg.featurizer.method;
    const auto wdir = source_world_dir(cfg, paths);
    require(wdir / "world.json");
    require(wdir / "tuples.jsonl");
    const World world = load_world(wdir);
    const auto model = load_site_model(cfg, paths, world);
    const auto attrs = target_attributes(cfg, world);
    const auto mode = cfg.split_mode();

    std::vector<FeatureHandle> handles;
    for (int a : attrs) {
        if (method == "full-rep") {
            handles.push_back(full_rep_handle(model->site_dim(), checked_layer(*model, cfg.featurizer.layer)));
        } else {
            const auto dir = paths.featurizers(method) / world.attributes[std::size_t(a)].name;
            require(dir / "featurizer.cdl");
            require(dir / "featurizer.json");
            handles.push_back(load_featurizer(dir / "featurizer.cdl", dir / "featurizer.json"));
        }
    }

    std::vector<ScoreRow> rows;
    std::vector<std::vector<InterventionTuple>> cause_by_attr;
    for (std::size_t i = 0; i < attrs.size(); ++i) {
        const auto test = load_tuple_set(world, wdir / "tuples.jsonl", mode, Part::test, attrs[i]);
        ScoreRow r = score_tuples(*model, world, handles[i], test, match_rule(cfg));
        r.method = method;
        r.split_mode = cfg.run.split_mode;
        r.attribute = world.attributes[std::size_t(attrs[i])].name;
        r.k_or_eps = k_or_eps(cfg, handles[i]);
        if (auto* s = dynamic_cast<const SaeFeaturizer*>(handles[i].featurizer.get())) r.recon_error = s->recon_error;
        rows.push_back(r);
        std::vector<InterventionTuple> cause;
        for (const auto& t : test)
            if (t.kind == TupleKind::cause) cause.push_back(t);
        cause_by_attr.push_back(std::move(cause));
        log << r.attribute << ": cause " << format_score(r.cause) << " iso " << format_score(r.iso) << " disentangle "
            << format_score(r.disentangle) << "\n";
    }

    const auto out = paths.eval(method);
    fs::create_directories(out);
    write_file_atomic(out / "scores.csv", scores_csv(rows));
    if (attrs.size() == world.n_attributes()) {
        const Matrix m = cross_attribute_matrix(*model, world, handles, cause_by_attr, match_rule(cfg));
        std::vector<std::string> names;
        for (const auto& a : world.attributes) names.push_back(a.name);
        write_file_atomic(out / "matrix.csv", matrix_csv(names, m));
        write_file_atomic(out / "matrix.svg", heatmap_svg(names, m, method + " (" + cfg.run.split_mode + ")"));
    }
    write_config(out, cfg, "evaluate", {});
}

void stage_sweep(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    const auto& method = cfg.featurizer.method;
    const auto wdir = source_world_dir(cfg, paths);
    require(wdir / "world.json");
    require(wdir / "tuples.jsonl");
    const World world = load_world(wdir);
    const auto model = load_site_model(cfg, paths, world);
    const Split split = make_splits(world, cfg.split_mode());
    const auto mode = cfg.split_mode();

    std::vector<std::size_t> layers, ks;
    if (cfg.sweep.layers.empty())
        for (std::size_t l = 0; l < model->num_layers(); ++l) layers.push_back(l);
    for (int l : cfg.sweep.layers) layers.push_back(checked_layer(*model, l));
    if (is_k_method(method)) {
        for (int k : cfg.sweep.ks)
            if (std::size_t(k) < model->site_dim() || (method != "rlap" && std::size_t(k) == model->site_dim()))
                ks.push_back(std::size_t(k));
        if (ks.empty()) throw SpecError("sweep.ks has no rank below the site dimension");
    } else {
        ks.push_back(0);
    }

    std::string cells_csv = "attribute,layer,k,dev_cause,dev_iso,dev_disentangle,test_cause,test_iso,test_disentangle\n";
    std::string layer_csv = "attribute,layer,k,cause,iso,disentangle\n";
    std::string trend;
    std::vector<ScoreRow> best_rows;
    std::mutex log_mu;
    for (int a : target_attributes(cfg, world)) {
        const auto& name = world.attributes[std::size_t(a)].name;
        const auto train = load_tuple_set(world, wdir / "tuples.jsonl", mode, Part::train, a);
        const auto dev = load_tuple_set(world, wdir / "tuples.jsonl", mode, Part::dev, a);
        const auto test = load_tuple_set(world, wdir / "tuples.jsonl", mode, Part::test, a);
        auto fit = [&](std::size_t layer, std::size_t k) {
            return fit_handle(cfg, *model, world, split, train, a, layer, k ? k : std::size_t(cfg.featurizer.k));
        };
        auto score = [&](const FeatureHandle& h, Part part) {
            ScoreRow r = score_tuples(*model, world, h, part == Part::dev ? dev : test, match_rule(cfg));
            r.method = method;
            r.split_mode = cfg.run.split_mode;
            r.attribute = name;
            r.k_or_eps = k_or_eps(cfg, h);
            if (auto* s = dynamic_cast<const SaeFeaturizer*>(h.featurizer.get())) r.recon_error = s->recon_error;
            std::lock_guard lock(log_mu);
            log << "[" << name << "] layer " << h.layer << " k " << r.k_or_eps << " " << to_string(part)
                << " disentangle " << format_score(r.disentangle) << "\n";
            return r;
        };
        const auto res = sweep(layers, ks, fit, score, unsigned(cfg.run.threads));
        for (const auto& c : res.cells)
            cells_csv += name + "," + std::to_string(c.layer) + "," + c.test.k_or_eps + "," + format_score(c.dev.cause) +
                         "," + format_score(c.dev.iso) + "," + format_score(c.dev.disentangle) + "," +
                         format_score(c.test.cause) + "," + format_score(c.test.iso) + "," +
                         format_score(c.test.disentangle) + "\n";
        for (std::size_t li = 0; li < layers.size(); ++li) {
            const auto first = res.cells.begin() + std::ptrdiff_t(li * ks.size());
            const std::vector<SweepCell> row(first, first + std::ptrdiff_t(ks.size()));
            const auto& b = row[select_best(row)];
            layer_csv += name + "," + std::to_string(b.layer) + "," + b.test.k_or_eps + "," + format_score(b.test.cause) +
                         "," + format_score(b.test.iso) + "," + format_score(b.test.disentangle) + "\n";
        }
        const auto& best = res.cells[res.best];
        best_rows.push_back(best.test);
        if (ks.size() > 1) {
            std::vector<ScoreRow> by_k;
            for (const auto& c : res.cells)
                if (c.layer == best.layer) by_k.push_back(c.test);
            const auto t = k_trend(by_k, ks);
            trend += name + " at layer " + std::to_string(best.layer) + ": cause non-decreasing in " +
                     std::to_string(t.cause_ok) + "/" + std::to_string(t.steps) + " steps, iso non-increasing in " +
                     std::to_string(t.iso_ok) + "/" + std::to_string(t.steps) + " steps\n";
            for (const auto& v : t.violations) trend += "  " + v + "\n";
        }
        log << name << ": best layer " << best.layer << " k " << best.test.k_or_eps << " test disentangle "
            << format_score(best.test.disentangle) << "\n";
    }

    const auto out = paths.sweep(method);
    fs::create_directories(out);
    write_file_atomic(out / "cells.csv", cells_csv);
    write_file_atomic(out / "layer_sweep.csv", layer_csv);
    write_file_atomic(out / "best_scores.csv", scores_csv(best_rows));
    if (!trend.empty()) {
        write_file_atomic(out / "trend.txt", trend);
        log << trend;
    }
    write_config(out, cfg, "sweep", {});
}

void stage_report(const RunConfig& cfg, const RunPaths& paths, std::ostream& log) {
    std::vector<ScoreRow> rows;
    std::vector<fs::path> methods;
    if (fs::exists(paths.root / "eval"))
        for (const auto& d : fs::directory_iterator(paths.root / "eval"))
            if (d.is_directory()) methods.push_back(d.path());
    std::sort(methods.begin(), methods.end());

    const auto out = paths.report();
    fs::create_directories(out);
    for (const auto& m : methods) {
        if (fs::exists(m / "scores.csv")) {
            const auto r = parse_scores_csv(read_file(m / "scores.csv"));
            rows.insert(rows.end(), r.begin(), r.end());
        }
        if (fs::exists(m / "matrix.csv")) {
            std::vector<std::string> names;
            const Matrix mat = parse_matrix_csv(read_file(m / "matrix.csv"), names);
            const std::string method = m.filename().string();
            write_file_atomic(out / ("heatmap_" + method + ".svg"), heatmap_svg(names, mat, method));
        }
    }
    if (rows.empty()) log << "warning: no scores found under " << (paths.root / "eval").string() << "\n";
    const auto s = summarize(rows);
    write_file_atomic(out / "summary.txt", s.text);
    write_file_atomic(out / "summary.csv", s.csv);
    write_config(out, cfg, "report", {});
    log << s.text;
}

}  // namespace dbench
