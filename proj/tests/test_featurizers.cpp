#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "dbench/errors.h"
#include "dbench/evaluation.h"
#include "dbench/featurizers.h"
#include "dbench/planted.h"
#include "dbench/rng.h"
#include "doctest.h"
#include "oracles.h"

using namespace dbench;
using dbench::testing::jacobi_eigen;
using dbench::testing::Mat;

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, Rng& rng, std::span<const double> sd = {}) {
    std::vector<float> v(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = float(rng.normal() * (sd.empty() ? 1.0 : sd[c]));
    return Tensor({rows, cols}, v);
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
    return m;
}

World planted_world(int n_entities = 200) {
    WorldSpec s;
    s.n_entities = n_entities;
    s.seed = 11;
    s.attributes = {{"alpha", 8, Dependency::independent, "", 0},
                    {"beta", 6, Dependency::independent, "", 0},
                    {"gamma", 5, Dependency::independent, "", 0}};
    s.n_attribute_templates = 4;
    s.n_entity_templates = 4;
    return generate_world(s);
}

std::filesystem::path scratch(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / "dbench_test_featurizers";
    std::filesystem::create_directories(d);
    return d / name;
}

}  // namespace

// ---- PCA --------------------------------------------------------------------

TEST_CASE("PCA projectors match a Jacobi eigendecomposition") {
    Rng rng(21);
    const std::size_t N = 2000, n = 8;
    // Correlated data: independent scales mixed by a fixed random matrix.
    const std::array<double, 8> sd{3.0, 2.2, 1.7, 1.3, 1.0, 0.7, 0.45, 0.2};
    const Tensor z = gaussian(N, n, rng, sd);
    std::vector<float> mix(n * n);
    for (auto& v : mix) v = float(rng.normal() * 0.4);
    for (std::size_t i = 0; i < n; ++i) mix[i * n + i] += 1.0f;
    const Tensor x = matmul(z, Tensor({n, n}, mix));

    const auto pca = fit_pca(x);

    // Oracle: standardized sample covariance in double precision.
    std::vector<double> mu(n, 0), s(n, 0);
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < n; ++c) mu[c] += x.at(r, c) / double(N);
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < n; ++c) s[c] += std::pow(x.at(r, c) - mu[c], 2) / double(N - 1);
    for (auto& v : s) v = std::sqrt(v);
    Mat cov(n, std::vector<double>(n, 0));
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                cov[i][j] += (x.at(r, i) - mu[i]) / s[i] * (x.at(r, j) - mu[j]) / s[j] / double(N - 1);
    std::vector<double> evals;
    Mat evecs;
    jacobi_eigen(cov, evals, evecs);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return evals[a] > evals[b]; });

    const Tensor& P = pca->components();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t o = order[i];
        double frob = 0;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) {
                const double got = double(P.at(i, a)) * P.at(i, b);
                const double want = evecs[a][o] * evecs[b][o];
                frob += (got - want) * (got - want);
            }
        CHECK(std::sqrt(frob) < 1e-3);
        CHECK(pca->variances()[i] == doctest::Approx(evals[o]).epsilon(1e-4));
    }
    CHECK(orthonormality_error(P) < 1e-4);
    CHECK(max_abs_diff(pca->decode(pca->encode(x)), x) < 1e-4 * 20);
}

TEST_CASE("PCA on points along one axis") {
    // A fifth point at the origin; four points in two dims would be rejected.
    const Tensor x5({5, 2}, {1, 0, -1, 0, 2, 0, -2, 0, 0, 0});
    CHECK_THROWS_AS(fit_pca(Tensor({2, 2}, {1, 0, -1, 0})), ContractError);
    const auto pca = fit_pca(x5);
    CHECK(std::abs(pca->components().at(0, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(pca->components().at(0, 1)) == doctest::Approx(0.0));
}

TEST_CASE("PCA on isotropic noise gives near-equal variances") {
    Rng rng(3);
    const auto pca = fit_pca(gaussian(10000, 4, rng));
    const auto& v = pca->variances();
    CHECK(*std::min_element(v.begin(), v.end()) > 0.9 * *std::max_element(v.begin(), v.end()));
}

// ---- L1 selection -----------------------------------------------------------

TEST_CASE("L1 selection isolates the informative dimension") {
    Rng rng(4);
    const std::size_t N = 400, m = 6;
    Tensor x = gaussian(N, m, rng);
    std::vector<int> y(N);
    for (std::size_t r = 0; r < N; ++r) y[r] = x.at(r, 0) > 0 ? 1 : 0;
    CHECK(select_features_l1(x, y, 0.1, 0.05) == std::vector<std::size_t>{0});
    CHECK(select_features_l1(x, y, 1.0, std::numeric_limits<double>::infinity()).empty());
    for (double C : {0.1, 1.0, 10.0, 1000.0}) CHECK_NOTHROW(select_features_l1(x, y, C, 1e-3));
    const std::vector<int> one(N, 3);
    CHECK_THROWS_AS(select_features_l1(x, one, 1.0, 0.1), ContractError);
}

TEST_CASE("L1 selection never grows as C shrinks") {
    Rng rng(5);
    const std::size_t N = 300, m = 8;
    Tensor x = gaussian(N, m, rng);
    std::vector<int> y(N);
    for (std::size_t r = 0; r < N; ++r)
        y[r] = (x.at(r, 0) + 0.6 * x.at(r, 1) + 0.3 * x.at(r, 2) + 0.3 * rng.normal()) > 0 ? 1 : 0;
    std::size_t prev = m + 1;
    for (double C : {1000.0, 10.0, 1.0, 0.1, 0.01}) {
        const auto f = select_features_l1(x, y, C, 1e-3);
        CHECK(f.size() <= prev);
        prev = f.size();
    }
}

// ---- SAE --------------------------------------------------------------------

namespace {

Tensor sparse_mixture(std::size_t N, Rng& rng) {
    const std::size_t n = 8, k = 4;
    std::vector<std::vector<double>> dirs(k, std::vector<double>(n));
    for (auto& d : dirs) {
        double norm = 0;
        for (auto& v : d) norm += (v = rng.normal()) * v;
        for (auto& v : d) v /= std::sqrt(norm);
    }
    std::vector<float> x(N * n, 0.0f);
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t j = 0; j < k; ++j)
            if (rng.uniform() < 0.3) {
                const double a = rng.uniform(0.5, 2.0);
                for (std::size_t c = 0; c < n; ++c) x[r * n + c] += float(a * dirs[j][c]);
            }
    return Tensor({N, n}, x);
}

}  // namespace

TEST_CASE("SAE reconstructs sparse mixtures with few active latents") {
    Rng rng(6);
    const Tensor x = sparse_mixture(4000, rng);
    SaeConfig cfg;
    cfg.latent = 32;
    cfg.l1 = 1e-2;
    cfg.lr = 3e-3f;
    cfg.seed = 1;
    const auto sae = fit_sae(x, cfg);
    CHECK(sae->feature_dim() == 32);
    CHECK(sae->recon_error < 0.05);
    CHECK(sae->active_fraction < 0.25);
    CHECK(fit_sae(x, SaeConfig{.steps = 5, .seed = 1})->feature_dim() == 32);  // default 4n
}

TEST_CASE("SAE without sparsity reconstructs better") {
    Rng rng(7);
    const Tensor x = sparse_mixture(2000, rng);
    SaeConfig a{.latent = 32, .l1 = 0.0, .steps = 800, .seed = 2};
    SaeConfig b = a;
    b.l1 = 0.1;
    CHECK(fit_sae(x, a)->recon_error < fit_sae(x, b)->recon_error);
}

// ---- RLAP -------------------------------------------------------------------

TEST_CASE("RLAP recovers a planted linear label subspace") {
    Rng rng(8);
    const std::size_t N = 10000, n = 8;
    const Tensor x = gaussian(N, n, rng);
    const Tensor xt = gaussian(1000, n, rng);
    auto sector = [](double a, double b) { return (a > 0 ? 1 : 0) + (b > 0 ? 2 : 0); };
    std::vector<int> y, yt;
    for (std::size_t r = 0; r < N; ++r) y.push_back(sector(x.at(r, 0), x.at(r, 1)));
    for (std::size_t r = 0; r < 1000; ++r) yt.push_back(sector(xt.at(r, 0), xt.at(r, 1)));

    const auto h = fit_rlap(x, y, RlapConfig{.k = 2, .seed = 3});
    REQUIRE(h.features == std::vector<std::size_t>{0, 1});
    const auto* of = dynamic_cast<const OrthogonalFeaturizer*>(h.featurizer.get());
    REQUIRE(of);
    CHECK(orthonormality_error(of->basis()) < 1e-4);
    const std::vector<std::size_t> rows{0, 1};
    const Tensor w = gather_rows(of->basis(), rows);
    double dist = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double p = double(w.at(0, i)) * w.at(0, j) + double(w.at(1, i)) * w.at(1, j);
            const double t = (i == j && i < 2) ? 1.0 : 0.0;
            dist += (p - t) * (p - t);
        }
    CHECK(std::sqrt(dist) < 0.1);
    const double after = probe_accuracy(erase_rowspace(x, w), y, erase_rowspace(xt, w), yt);
    CHECK(after <= majority_rate(yt) + 0.10);
    CHECK(probe_accuracy(x, y, xt, yt) > 0.9);
    CHECK_THROWS_AS(fit_rlap(x, y, RlapConfig{.k = n}), ContractError);
}

// ---- multi-task loss --------------------------------------------------------

TEST_CASE("multi-task loss arithmetic") {
    const std::vector<double> iso{0.5, 1.5};
    CHECK(multitask_loss(1.0, iso) == 2.0);
    CHECK(multitask_loss(0.7, {}) == 0.7);
    const Tensor c = Tensor::scalar(1.0f);
    const std::vector<Tensor> t{Tensor::scalar(0.5f), Tensor::scalar(1.5f)};
    CHECK(multitask_loss(c, t).item() == 2.0f);
    CHECK(multitask_loss(c, {}).item() == 1.0f);
}

// ---- trained featurizers on the planted model -------------------------------

namespace {

struct PlantedSetup {
    World world = planted_world();
    PlantedModel model{world, PlantedConfig{.seed = 3}};
    Split split = make_splits(world, SplitMode::entity);
    std::vector<InterventionTuple> train = pair_interventions(world, split, Part::train, 0, 1200, 1);
    std::vector<InterventionTuple> test = pair_interventions(world, split, Part::test, 0, 400, 2);
};

const PlantedSetup& planted() {
    static const PlantedSetup s;
    return s;
}

}  // namespace

TEST_CASE("MDAS recovers the planted subspace") {
    const auto& s = planted();
    const auto h = fit_das(s.model, s.world, s.train, 0, DasConfig{.k = 2, .multi_task = true, .steps = 1500, .lr = 1e-2f, .seed = 4});
    const auto* of = dynamic_cast<const OrthogonalFeaturizer*>(h.featurizer.get());
    REQUIRE(of);
    CHECK(orthonormality_error(of->basis()) < 1e-4);
    const auto r = score_tuples(s.model, s.world, h, s.test);
    CHECK(r.cause >= 0.95);
    CHECK(r.iso >= 0.95);
}

TEST_CASE("DAS with k equal to the site dimension is a full swap") {
    const auto& s = planted();
    const std::size_t n = s.model.site_dim();
    const auto h = fit_das(s.model, s.world, s.train, 0, DasConfig{.k = n, .steps = 10});
    std::vector<Prompt> base, source;
    tuple_prompts(s.model, s.world, std::span(s.test).first(50), base, source);
    CHECK(same_bits(interchange_logits(s.model, h, base, source),
                    interchange_logits(s.model, full_rep_handle(n, 0), base, source)));
    CHECK_THROWS_AS(fit_das(s.model, s.world, s.train, 0, DasConfig{.k = n + 1}), ContractError);
}

TEST_CASE("DBM mask concentrates on the planted dimensions") {
    const auto& s = planted();
    const auto h = fit_dbm(s.model, s.world, s.train, 0, DbmConfig{.steps = 1500, .lr = 1e-2f, .seed = 5});
    const auto* mf = dynamic_cast<const MaskFeaturizer*>(h.featurizer.get());
    REQUIRE(mf);
    const auto m = mf->mask();
    double planted_mass = 0, total = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        total += m[i];
        if (i < 2) planted_mass += m[i];
    }
    CHECK(planted_mass / total >= 0.9);
    CHECK(score_tuples(s.model, s.world, h, s.test).cause >= 0.95);
}

TEST_CASE("DBM sparsity is monotone in lambda and empties at large lambda") {
    const auto& s = planted();
    std::size_t prev = s.model.site_dim() + 1;
    for (double lambda : {0.0, 1e-3, 1e-1, 1e3}) {
        const auto h = fit_dbm(s.model, s.world, s.train, 0, DbmConfig{.lambda = lambda, .steps = 400, .lr = 1e-2f, .seed = 5});
        CHECK(h.features.size() <= prev);
        prev = h.features.size();
    }
    CHECK(prev == 0);
    CHECK(DbmConfig{}.resolved_lambda() == 1e-3);
    CHECK(DbmConfig{.multi_task = true}.resolved_lambda() == 0.0);
}

TEST_CASE("intervention training needs cause tuples") {
    const auto& s = planted();
    std::vector<InterventionTuple> iso_only;
    for (const auto& t : s.train)
        if (t.kind == TupleKind::iso) iso_only.push_back(t);
    CHECK_THROWS_AS(fit_dbm(s.model, s.world, iso_only, 0, DbmConfig{.steps = 5}), ContractError);
    CHECK_THROWS_AS(fit_das(s.model, s.world, iso_only, 0, DasConfig{.steps = 5}), ContractError);
}

TEST_CASE("fits are seed-deterministic") {
    const auto& s = planted();
    const DasConfig cfg{.k = 2, .steps = 50, .seed = 9};
    const auto a = fit_das(s.model, s.world, s.train, 0, cfg);
    const auto b = fit_das(s.model, s.world, s.train, 0, cfg);
    CHECK(same_bits(dynamic_cast<const OrthogonalFeaturizer&>(*a.featurizer).basis(),
                    dynamic_cast<const OrthogonalFeaturizer&>(*b.featurizer).basis()));
}

// ---- persistence ------------------------------------------------------------

TEST_CASE("featurizer save and load round trip") {
    Rng rng(10);
    const Tensor x = gaussian(200, 6, rng);
    std::vector<FeatureHandle> handles;
    handles.push_back({fit_pca(x), {0, 2}, 1});
    handles.push_back({std::make_shared<OrthogonalFeaturizer>("das", qr_orthonormalize(gaussian(6, 6, rng)), 2), {0, 1}, 0});
    handles.push_back({std::make_shared<MaskFeaturizer>("mdbm", gaussian(1, 6, rng).reshape({6}), 0.01), {3}, 2});
    auto sae = fit_sae(x, SaeConfig{.latent = 12, .steps = 20, .seed = 1});
    sae->restore_residual = false;
    handles.push_back({sae, {1, 5, 7}, 1});
    for (std::size_t i = 0; i < handles.size(); ++i) {
        const auto cdl = scratch("f" + std::to_string(i) + ".cdl"), side = scratch("f" + std::to_string(i) + ".json");
        save_featurizer(handles[i], cdl, side, R"({"attribute": "alpha"})");
        const auto back = load_featurizer(cdl, side);
        CHECK(back.features == handles[i].features);
        CHECK(back.layer == handles[i].layer);
        CHECK(back.featurizer->method() == handles[i].featurizer->method());
        CHECK(same_bits(back.featurizer->encode(x), handles[i].featurizer->encode(x)));
        const Tensor src = gaussian(200, 6, rng);
        CHECK(same_bits(back.featurizer->splice(x, src, back.features),
                        handles[i].featurizer->splice(x, src, handles[i].features)));
    }
    CHECK_THROWS(load_featurizer(scratch("missing.cdl"), scratch("missing.json")));
}
