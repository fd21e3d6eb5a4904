#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>

#include "dbench/checkpoint.h"
#include "dbench/errors.h"
#include "dbench/pipeline.h"
#include "doctest.h"

using namespace dbench;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dbench_cli_" + name);
    fs::remove_all(p);
    return p;
}

// Relative path -> contents for every file under root.
std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
    return out;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DBENCH_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

RunConfig planted_run(std::uint64_t seed, int threads) {
    RunConfig c;
    c.run.seed = seed;
    c.run.model = "planted";
    c.run.threads = threads;
    c.world.n_entities = 120;
    c.tuples.n_train = 400;
    c.tuples.n_dev = 100;
    c.tuples.n_test = 200;
    c.featurizer.method = "mdas";
    c.featurizer.layer = 0;
    c.featurizer.k = 2;
    c.featurizer.steps = 300;
    c.featurizer.lr = 1e-2;
    return c;
}

void run_planted_pipeline(RunConfig cfg, const fs::path& root) {
    std::ostringstream log;
    const RunPaths paths{root};
    stage_gen_world(cfg, paths, log);
    stage_fit_featurizer(cfg, paths, log);
    stage_evaluate(cfg, paths, log);
    cfg.featurizer.method = "full-rep";
    stage_evaluate(cfg, paths, log);
    stage_report(cfg, paths, log);
}

}  // namespace

TEST_CASE("config parsing accepts comments and rejects unknown or repeated keys") {
    const auto c = parse_run_config(
        "# top comment\n"
        "[run]\n"
        "seed = 42   # trailing\n"
        "model = planted\n"
        "\n"
        "[sweep]\n"
        "ks = 1, 2,3\n");
    CHECK(c.run.seed == 42);
    CHECK(c.uses_planted());
    CHECK(c.sweep.ks == std::vector<int>{1, 2, 3});
    CHECK(c.featurizer.k == RunConfig{}.featurizer.k);

    CHECK_THROWS_AS(parse_run_config("[run]\nsed = 1\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[runn]\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[run]\nseed = 1\nseed = 2\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("seed = 1\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[run]\nseed = one\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[run]\nseed\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[run\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[tuples]\ndistinct_values = maybe\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[featurizer]\nmethod = lasso\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[featurizer]\nk = 0\n"), SpecError);
    CHECK_THROWS_AS(parse_run_config("[sweep]\nks =\n"), SpecError);

    try {
        parse_run_config("[run]\n\nbogus = 3\n");
        FAIL("expected SpecError");
    } catch (const SpecError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("dumped config parses back to the same config") {
    RunConfig c;
    c.run.seed = 123456789012345ULL;
    c.run.split_mode = "context";
    c.featurizer.method = "dbm";
    c.featurizer.lr = 3.25e-4;
    c.featurizer.lambda = 0.7;
    c.planted.overlap_deg = 12.5;
    c.sweep.layers = {0, 2};
    c.world.spec = "some/spec.json";
    const auto text = dump_run_config(c);
    const auto back = parse_run_config(text);
    CHECK(dump_run_config(back) == text);
    CHECK(back.run.seed == c.run.seed);
    CHECK(back.featurizer.lr == doctest::Approx(3.25e-4));
    CHECK(back.sweep.layers == c.sweep.layers);
}

TEST_CASE("single values can be overridden by dotted key") {
    RunConfig c;
    set_config_value(c, "featurizer.k", "4");
    set_config_value(c, "run.model", " planted ");
    CHECK(c.featurizer.k == 4);
    CHECK(c.run.model == "planted");
    CHECK_THROWS_AS(set_config_value(c, "featurizer", "4"), SpecError);
    CHECK_THROWS_AS(set_config_value(c, "featurizer.kk", "4"), SpecError);
    CHECK_THROWS_AS(set_config_value(c, "featurizer.k", "four"), SpecError);
}

TEST_CASE("stage seeds differ by stage and follow the root seed") {
    RunConfig a, b;
    b.run.seed = 1;
    CHECK(a.stage_seed("gen-world") != a.stage_seed("train-lm"));
    CHECK(a.stage_seed("gen-world") != b.stage_seed("gen-world"));
    CHECK(a.stage_seed("gen-world") == RunConfig{}.stage_seed("gen-world"));
}

TEST_CASE("exceptions map to exit codes") {
    auto code = [](auto e) { return exit_code(std::make_exception_ptr(e)); };
    CHECK(exit_code(nullptr) == 0);
    CHECK(code(SpecError("x")) == 2);
    CHECK(code(MissingArtifactError("x")) == 3);
    CHECK(code(DivergenceError("x", 7)) == 4);
    CHECK(code(DegeneracyError("x")) == 4);
    CHECK(code(EmptyInstanceError("x")) == 1);
    CHECK(code(std::runtime_error("x")) == 1);
}

TEST_CASE("gen-world output is byte-identical for a fixed seed") {
    RunConfig c;
    c.run.seed = 5;
    c.tuples.n_train = 200;
    std::ostringstream log;
    const auto a = scratch_dir("gen_a"), b = scratch_dir("gen_b"), d = scratch_dir("gen_d");
    stage_gen_world(c, RunPaths{a}, log);
    stage_gen_world(c, RunPaths{b}, log);
    const auto sa = snapshot(a);
    CHECK(sa.count("world/world.json"));
    CHECK(sa.count("world/tuples.jsonl"));
    CHECK(sa.count("world/config.ini"));
    CHECK(sa == snapshot(b));

    c.run.seed = 6;
    stage_gen_world(c, RunPaths{d}, log);
    CHECK(snapshot(d).at("world/world.json") != sa.at("world/world.json"));
}

TEST_CASE("planted pipeline writes every artifact and reruns identically") {
    const auto a = scratch_dir("pipe_a"), b = scratch_dir("pipe_b");
    run_planted_pipeline(planted_run(3, 1), a);
    run_planted_pipeline(planted_run(3, 4), b);

    const auto sa = snapshot(a), sb = snapshot(b);
    for (const char* f : {"eval/mdas/scores.csv", "eval/mdas/matrix.csv", "eval/mdas/matrix.svg",
                          "eval/full-rep/scores.csv", "report/summary.txt", "report/summary.csv",
                          "report/heatmap_mdas.svg", "featurizers/mdas/country/featurizer.cdl"})
        CHECK_MESSAGE(sa.count(f), f);
    for (const auto& [name, text] : sa) {
        if (name.ends_with("config.ini")) continue;  // echoes the thread count
        REQUIRE_MESSAGE(sb.count(name), name);
        CHECK_MESSAGE(sb.at(name) == text, name);
    }

    const auto rows = parse_scores_csv(sa.at("eval/mdas/scores.csv"));
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
        CHECK(r.cause >= 0.9);
        CHECK(r.iso >= 0.9);
    }
    for (const auto& r : parse_scores_csv(sa.at("eval/full-rep/scores.csv"))) {
        CHECK(r.cause >= 0.99);
        CHECK(r.iso <= 0.05);
    }
    CHECK(sa.at("eval/mdas/config.ini").find("method = mdas") != std::string::npos);
}

TEST_CASE("stages report missing inputs as missing artifacts") {
    const auto root = scratch_dir("missing");
    RunConfig c = planted_run(1, 1);
    std::ostringstream log;
    CHECK_THROWS_AS(stage_fit_featurizer(c, RunPaths{root}, log), MissingArtifactError);
    stage_gen_world(c, RunPaths{root}, log);
    CHECK_THROWS_AS(stage_evaluate(c, RunPaths{root}, log), MissingArtifactError);
    c.run.model = "lm";
    CHECK_THROWS_AS(stage_filter(c, RunPaths{root}, log), MissingArtifactError);
    c.run.model = "planted";
    c.featurizer.layer = 3;
    CHECK_THROWS_AS(stage_fit_featurizer(c, RunPaths{root}, log), SpecError);
}

TEST_CASE("report over an empty run warns and writes empty tables") {
    const auto root = scratch_dir("empty_report");
    std::ostringstream log;
    stage_report(RunConfig{}, RunPaths{root}, log);
    CHECK(log.str().find("warning") != std::string::npos);
    CHECK(fs::exists(root / "report" / "summary.csv"));
}

TEST_CASE("command-line exit codes") {
    const auto root = scratch_dir("exit");
    const std::string out = " -o " + root.string();
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("gen-world --config /nonexistent/run.ini" + out) == 2);
    CHECK(run_cli("gen-world --set world.spec=/nonexistent/spec.json" + out) == 2);
    CHECK(run_cli("gen-world --set run.colour=red" + out) == 2);
    CHECK(run_cli("evaluate --method das --model planted" + out) == 3);
    CHECK(run_cli("train-lm" + out) == 3);

    CHECK(run_cli("gen-world --seed 2 --set world.n_entities=60" + out) == 0);
    CHECK(run_cli("filter --model planted --set filter.threshold=1.01" + out) == 1);
    CHECK(run_cli("filter --model planted --set filter.threshold=0.9" + out) == 0);
    CHECK(fs::exists(root / "filter" / "filter_report.json"));
    CHECK(run_cli("evaluate --method full-rep --model planted --layer 0" + out) == 0);
    CHECK(run_cli("report" + out) == 0);
    CHECK(fs::exists(root / "report" / "summary.txt"));
}
