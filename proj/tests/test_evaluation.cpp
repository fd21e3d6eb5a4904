#include <algorithm>
#include <cmath>

#include "dbench/errors.h"
#include "dbench/evaluation.h"
#include "dbench/featurizers.h"
#include "dbench/planted.h"
#include "dbench/rng.h"
#include "doctest.h"

using namespace dbench;

namespace {

World three_attribute_world(int n_entities = 120, std::uint64_t seed = 11) {
    WorldSpec s;
    s.n_entities = n_entities;
    s.seed = seed;
    s.attributes = {{"alpha", 8, Dependency::independent, "", 0},
                    {"beta", 6, Dependency::independent, "", 0},
                    {"gamma", 5, Dependency::independent, "", 0}};
    s.n_attribute_templates = 3;
    s.n_entity_templates = 2;
    return generate_world(s);
}

FeatureHandle subspace_handle(const Tensor& rows) {
    FeatureHandle h;
    h.featurizer = std::make_shared<OrthogonalFeaturizer>("oracle", complete_orthonormal_basis(rows), rows.rows());
    for (std::size_t i = 0; i < rows.rows(); ++i) h.features.push_back(i);
    return h;
}

std::vector<InterventionTuple> only(const std::vector<InterventionTuple>& ts, TupleKind k) {
    std::vector<InterventionTuple> out;
    for (const auto& t : ts)
        if (t.kind == k) out.push_back(t);
    return out;
}

ScoreRow row(const std::string& method, const std::string& mode, double c, double i) {
    ScoreRow r;
    r.method = method;
    r.split_mode = mode;
    r.attribute = "alpha";
    r.layer = 1;
    r.k_or_eps = "4";
    r.cause = c;
    r.iso = i;
    r.disentangle = score_disentangle(c, i);
    r.n_cause = 10;
    r.n_iso = 12;
    return r;
}

}  // namespace

// ---- metric arithmetic ------------------------------------------------------

TEST_CASE("disentangle is the exact mean") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double c = rng.uniform(), s = rng.uniform();
        const double d = score_disentangle(c, s);
        CHECK(d == (c + s) / 2.0);
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
    }
    CHECK(score_disentangle(1.0, 1.0) == 1.0);
    CHECK(score_disentangle(0.0, 1.0) == 0.5);
}

TEST_CASE("score formatting conventions") {
    CHECK(format_score(score_disentangle(0.731, 0.513)) == "0.622");
    CHECK(format_percent(score_disentangle(0.730, 0.513)) == "62.1");
    CHECK(format_score(1.0) == "1.000");
    CHECK(format_percent(0.0) == "0.0");
}

// ---- planted model ----------------------------------------------------------

TEST_CASE("planted readout matches the attribute table on every prompt") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    std::vector<Prompt> ps;
    std::vector<int> gold;
    for (int e = 0; e < int(w.entities.size()); ++e)
        for (int t = 0; t < int(w.templates.size()); ++t) {
            if (w.templates[std::size_t(t)].attribute < 0) continue;
            ps.push_back(m.make_prompt(w, e, t));
            gold.push_back(m.label_token(ps.back(), w.value(w.templates[std::size_t(t)].attribute, e)));
        }
    NoGradGuard g;
    CHECK(argmax_rows(m.next_logits(ps)) == gold);
}

TEST_CASE("planted subspaces are orthonormal and mutually orthogonal at 90 degrees") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    for (int a = 0; a < 3; ++a) {
        CHECK(orthonormality_error(m.subspace(a)) < 1e-6);
        for (int b = a + 1; b < 3; ++b) {
            const Tensor x = matmul_nt(m.subspace(a), m.subspace(b));
            for (float v : x.data()) CHECK(std::abs(v) < 1e-6);
        }
    }
}

TEST_CASE("planted model configuration errors") {
    const auto w = three_attribute_world();
    CHECK_THROWS_AS(PlantedModel(w, PlantedConfig{.site_dim = 5}), DimensionError);
    CHECK_THROWS_AS(PlantedModel(w, PlantedConfig{.dims = {4, 4, 4, 4}}), SpecError);
    CHECK_THROWS_AS(PlantedModel(w, PlantedConfig{.overlap_deg = 0.0}), SpecError);
    const PlantedModel m(w, PlantedConfig{});
    CHECK_THROWS_AS(m.site_values(std::vector<Prompt>{m.make_prompt(w, 0, 0)}, 1), IndexError);
    CHECK_THROWS_AS(m.label_token(m.make_prompt(w, 0, 0), "nope"), IndexError);
}

TEST_CASE("scores on the planted-orthogonal model") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    const auto split = make_splits(w, SplitMode::entity);
    const auto tuples = pair_interventions(w, split, Part::test, 0, 300, 5);
    const auto cause = only(tuples, TupleKind::cause), iso = only(tuples, TupleKind::iso);

    const auto full = full_rep_handle(m.site_dim(), 0);
    CHECK(score_cause(m, w, full, cause) == 1.0);
    CHECK(score_iso(m, w, full, iso) == 0.0);

    const FeatureHandle none{std::make_shared<IdentityFeaturizer>(m.site_dim()), {}, 0};
    CHECK(score_cause(m, w, none, cause) == 0.0);
    CHECK(score_iso(m, w, none, iso) == 1.0);

    const auto oracle = subspace_handle(m.subspace(0));
    const auto r = score_tuples(m, w, oracle, tuples);
    CHECK(r.cause == 1.0);
    CHECK(r.iso == 1.0);
    CHECK(r.disentangle == 1.0);
    CHECK(r.n_cause == cause.size());
    CHECK(r.n_iso == iso.size());

    // Full replacement dominates cause for every handle at the site.
    const double full_cause = score_cause(m, w, full, cause);
    for (const auto& h : {oracle, none, subspace_handle(m.subspace(1))})
        CHECK(full_cause >= score_cause(m, w, h, cause) - 0.02);

    CHECK_THROWS_AS(score_cause(m, w, oracle, {}), ContractError);
    CHECK_THROWS_AS(score_iso(m, w, oracle, {}), ContractError);
    CHECK_THROWS_AS(score_cause(m, w, oracle, iso), ContractError);
    CHECK_THROWS_AS(score_iso(m, w, oracle, cause), ContractError);
}

TEST_CASE("scores are invariant to tuple order and duplication") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    const auto split = make_splits(w, SplitMode::entity);
    const auto tuples = pair_interventions(w, split, Part::dev, 0, 200, 6);
    // A handle on a tilted plane gives scores strictly between 0 and 1.
    Rng rng(3);
    std::vector<float> raw(2 * m.site_dim());
    for (auto& v : raw) v = float(rng.normal());
    const auto h = subspace_handle(qr_orthonormalize(Tensor({2, m.site_dim()}, raw)));
    auto cause = only(tuples, TupleKind::cause), iso = only(tuples, TupleKind::iso);
    const double c0 = score_cause(m, w, h, cause), i0 = score_iso(m, w, h, iso);
    std::reverse(cause.begin(), cause.end());
    std::rotate(iso.begin(), iso.begin() + 7, iso.end());
    CHECK(score_cause(m, w, h, cause) == c0);
    CHECK(score_iso(m, w, h, iso) == i0);
    auto cause2 = cause, iso2 = iso;
    cause2.insert(cause2.end(), cause.begin(), cause.end());
    iso2.insert(iso2.end(), iso.begin(), iso.end());
    CHECK(score_cause(m, w, h, cause2) == c0);
    CHECK(score_iso(m, w, h, iso2) == i0);
}

TEST_CASE("iso averages uniformly over distractor attributes") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    const auto split = make_splits(w, SplitMode::entity);
    auto iso = only(pair_interventions(w, split, Part::dev, 0, 200, 7), TupleKind::iso);
    // Intervening on beta's subspace breaks beta queries only.
    const auto h = subspace_handle(m.subspace(1));
    std::vector<InterventionTuple> lopsided;
    for (const auto& t : iso)
        if (t.target_attribute == 2 || lopsided.size() % 5 == 0) lopsided.push_back(t);
    std::size_t n_beta = 0;
    for (const auto& t : lopsided) n_beta += t.target_attribute == 1;
    REQUIRE(n_beta > 0);
    REQUIRE(n_beta < lopsided.size() / 2);
    CHECK(score_iso(m, w, h, lopsided) == doctest::Approx(0.5));
}

TEST_CASE("cross-attribute matrix on the planted-orthogonal model") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    const auto split = make_splits(w, SplitMode::entity);
    std::vector<FeatureHandle> handles;
    std::vector<std::vector<InterventionTuple>> cause;
    for (int a = 0; a < 3; ++a) {
        handles.push_back(subspace_handle(m.subspace(a)));
        cause.push_back(only(pair_interventions(w, split, Part::test, a, 120, 10 + std::uint64_t(a)), TupleKind::cause));
    }
    const auto c = cross_attribute_matrix(m, w, handles, cause);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
            CHECK(c[a][b] >= 0.0);
            CHECK(c[a][b] <= 1.0);
            if (a == b) {
                CHECK(c[a][b] >= 0.95);
                CHECK(c[a][b] == score_cause(m, w, handles[a], cause[a]));
            } else {
                CHECK(c[a][b] <= 0.05);
            }
        }
    auto missing = handles;
    missing[1].featurizer.reset();
    CHECK_THROWS_AS(cross_attribute_matrix(m, w, missing, cause), ContractError);
    CHECK_THROWS_AS(cross_attribute_matrix(m, w, std::span(handles).first(2), cause), ContractError);
}

TEST_CASE("overlapping subspaces force a cause/iso tradeoff") {
    WorldSpec s;
    s.n_entities = 120;
    s.seed = 4;
    s.attributes = {{"alpha", 6, Dependency::independent, "", 0}, {"beta", 6, Dependency::independent, "", 0}};
    s.n_attribute_templates = 3;
    s.n_entity_templates = 2;
    const auto w = generate_world(s);
    const PlantedModel m(w, PlantedConfig{.site_dim = 8, .overlap_deg = 10.0, .seed = 1});
    const auto split = make_splits(w, SplitMode::entity);
    const auto train = pair_interventions(w, split, Part::train, 0, 600, 1);
    const auto test = pair_interventions(w, split, Part::test, 0, 200, 2);

    // Sanity: the model still reads both attributes correctly.
    {
        const auto none = FeatureHandle{std::make_shared<IdentityFeaturizer>(m.site_dim()), {}, 0};
        CHECK(score_iso(m, w, none, only(test, TupleKind::iso)) == 1.0);
    }

    // Handle grid: each stored subspace, their joint span, random planes
    // inside the joint span, and trained DAS/MDAS handles of every rank.
    std::vector<FeatureHandle> grid;
    grid.push_back(subspace_handle(m.subspace(0)));
    grid.push_back(subspace_handle(m.subspace(1)));
    std::vector<float> joint(m.subspace(0).data().begin(), m.subspace(0).data().end());
    joint.insert(joint.end(), m.subspace(1).data().begin(), m.subspace(1).data().end());
    const Tensor span4 = qr_orthonormalize(Tensor({4, m.site_dim()}, joint));
    grid.push_back(subspace_handle(span4));
    Rng rng(9);
    for (std::size_t k = 1; k <= 3; ++k)
        for (int rep = 0; rep < 5; ++rep) {
            std::vector<float> mix(k * 4);
            for (auto& v : mix) v = float(rng.normal());
            grid.push_back(subspace_handle(qr_orthonormalize(matmul(Tensor({k, 4}, mix), span4))));
        }
    for (std::size_t k = 1; k <= 4; ++k)
        for (bool multi : {false, true})
            grid.push_back(fit_das(m, w, train, 0, DasConfig{.k = k, .multi_task = multi, .steps = 600, .lr = 1e-2f, .seed = 3}));

    double best_cause = 0, best_iso = 0;
    for (const auto& h : grid) {
        const auto r = score_tuples(m, w, h, test);
        CHECK_FALSE((r.cause >= 0.9 && r.iso >= 0.9));
        best_cause = std::max(best_cause, r.cause);
        best_iso = std::max(best_iso, r.iso);
    }
    // Each score alone is reachable.
    CHECK(best_cause >= 0.9);
    CHECK(best_iso >= 0.9);
}

// ---- sweeps -----------------------------------------------------------------

TEST_CASE("best cell selection") {
    std::vector<SweepCell> cells(3);
    const double dev[] = {0.4, 0.7, 0.6};
    for (std::size_t i = 0; i < 3; ++i) {
        cells[i].layer = 0;
        cells[i].k = 2 * (i + 1);
        cells[i].dev.disentangle = dev[i];
        cells[i].test.disentangle = 0.1 * double(i);
    }
    CHECK(select_best(cells) == 1);
    CHECK(cells[select_best(cells)].test.disentangle == doctest::Approx(0.1));
    // Ties go to the smaller k, then to the earlier layer.
    cells[2].dev.disentangle = 0.7;
    cells[2].k = 1;
    CHECK(select_best(cells) == 2);
    cells[0] = cells[2];
    cells[2].layer = 0;
    cells[0].layer = 1;
    CHECK(select_best(cells) == 2);
    CHECK_THROWS_AS(select_best({}), ContractError);
}

TEST_CASE("sweep scores every cell and is thread-count independent") {
    const std::vector<std::size_t> layers{0, 1}, ks{1, 2, 4};
    auto fit = [](std::size_t layer, std::size_t k) {
        return FeatureHandle{std::make_shared<IdentityFeaturizer>(8), {k}, layer};
    };
    auto score = [](const FeatureHandle& h, Part p) {
        ScoreRow r;
        r.layer = h.layer;
        r.cause = 0.1 * double(h.features[0]) + (p == Part::test ? 0.01 : 0.0);
        r.iso = 1.0 - 0.05 * double(h.layer) - 0.1 * double(h.features[0]);
        r.disentangle = score_disentangle(r.cause, r.iso);
        return r;
    };
    const auto a = sweep(layers, ks, fit, score, 1);
    const auto b = sweep(layers, ks, fit, score, 4);
    REQUIRE(a.cells.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a.cells[i].layer == layers[i / 3]);
        CHECK(a.cells[i].k == ks[i % 3]);
        CHECK(a.cells[i].dev == b.cells[i].dev);
        CHECK(a.cells[i].test == b.cells[i].test);
    }
    CHECK(a.best == b.best);
    CHECK(a.best == 0);  // every k ties in layer 0, so the smallest wins
    const std::vector<std::size_t> one{3};
    CHECK(sweep(one, one, fit, score).cells.size() == 1);
    CHECK_THROWS_AS(sweep({}, ks, fit, score), ContractError);
    auto failing = [](std::size_t, std::size_t) -> FeatureHandle { throw DegeneracyError("boom"); };
    CHECK_THROWS_AS(sweep(layers, ks, failing, score, 3), DegeneracyError);
}

TEST_CASE("k trend check counts monotone steps") {
    std::vector<ScoreRow> rows;
    const double c[] = {0.2, 0.4, 0.35, 0.8, 0.9}, i[] = {0.9, 0.8, 0.8, 0.85, 0.3};
    for (int j = 0; j < 5; ++j) rows.push_back(row("das", "entity", c[j], i[j]));
    const std::vector<std::size_t> ks{2, 4, 8, 16, 32};
    const auto t = k_trend(rows, ks);
    CHECK(t.steps == 4);
    CHECK(t.cause_ok == 3);
    CHECK(t.iso_ok == 3);
    CHECK(t.violations.size() == 2);
    CHECK_THROWS_AS(k_trend(std::span(rows).first(3), ks), ContractError);
}

// ---- filtering --------------------------------------------------------------

TEST_CASE("filtering a perfect model keeps everything") {
    const auto w = three_attribute_world();
    const PlantedModel m(w, PlantedConfig{.seed = 2});
    FilterReport rep;
    const auto f = filter_instance(w, m, 1.0, &rep);
    CHECK(f == w);
    CHECK(rep.accuracy_before == 1.0);
    CHECK(rep.accuracy_after == 1.0);
    CHECK(rep.entities_kept == w.entities.size());
    CHECK(rep.prompts_dropped == 0);
    CHECK_THROWS_AS(filter_instance(w, m, 1.01), EmptyInstanceError);
}

// ---- output -----------------------------------------------------------------

TEST_CASE("scores.csv round trip and determinism") {
    std::vector<ScoreRow> rows{row("das", "entity", 0.731, 0.513), row("mdas", "context", 1.0, 0.25)};
    rows[1].recon_error = 0.0421;
    const auto text = scores_csv(rows);
    CHECK(text == scores_csv(rows));
    CHECK(text.substr(0, text.find('\n')) ==
          "method,split_mode,attribute,layer,k_or_eps,cause,iso,disentangle,n_cause,n_iso,recon_error");
    CHECK(text.find("das,entity,alpha,1,4,0.731,0.513,0.622,10,12,\n") != std::string::npos);
    const auto back = parse_scores_csv(text);
    REQUIRE(back.size() == 2);
    CHECK(back[0].method == "das");
    CHECK(back[0].cause == 0.731);
    CHECK(!back[0].recon_error);
    CHECK(back[1].recon_error == doctest::Approx(0.042));
    CHECK(scores_csv(back) == text);
    CHECK_THROWS_AS(parse_scores_csv("bad,header\n"), SpecError);
    CHECK_THROWS_AS(parse_scores_csv(text + "x,y\n"), SpecError);
}

TEST_CASE("matrix csv, heat colors and heatmap") {
    const std::vector<std::string> names{"alpha", "beta"};
    const Matrix m{{1.0, 0.0}, {0.25, 0.9}};
    CHECK(matrix_csv(names, m) == "intervened,alpha,beta\nalpha,1.000,0.000\nbeta,0.250,0.900\n");
    CHECK(heat_color(0.0) == "#ffffff");
    CHECK(heat_color(1.0) == "#08306b");
    CHECK(heat_color(-3) == "#ffffff");
    CHECK(heat_color(0.5) == "#8498b5");
    const auto svg = heatmap_svg(names, m, "a < b");
    CHECK(svg == heatmap_svg(names, m, "a < b"));
    CHECK(svg.find("a &lt; b") != std::string::npos);
    CHECK(svg.find("100.0") != std::string::npos);
    CHECK(std::count(svg.begin(), svg.end(), '\n') > 4);
}

TEST_CASE("summary report") {
    std::vector<ScoreRow> rows{row("das", "entity", 0.6, 0.4), row("das", "entity", 0.8, 0.6),
                               row("mdas", "context", 0.5, 0.9)};
    const auto r = summarize(rows);
    CHECK(r.csv ==
          "method,entity_cause,entity_iso,entity_disentangle,context_cause,context_iso,context_disentangle\n"
          "das,70.0,50.0,60.0,,,\n"
          "mdas,,,,50.0,90.0,70.0\n");
    CHECK(r.text.find("das") != std::string::npos);
    CHECK(summarize(rows).text == r.text);
}
