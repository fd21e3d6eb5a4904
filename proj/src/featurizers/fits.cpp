#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "dbench/adam.h"
#include "dbench/errors.h"
#include "dbench/featurizers.h"
#include "dbench/rng.h"

namespace dbench {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD to_eigen(const Tensor& t) {
    if (t.rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(t.shape()));
    MatD m(t.rows(), t.cols());
    auto v = t.data();
    for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = v[i];
    return m;
}

Tensor to_tensor(const MatD& m) {
    std::vector<float> v(std::size_t(m.size()));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(m.data()[i]);
    return Tensor({std::size_t(m.rows()), std::size_t(m.cols())}, std::move(v));
}

Tensor uniform_init(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
    std::vector<float> v(rows * cols);
    for (auto& x : v) x = float(rng.uniform(-bound, bound));
    return Tensor({rows, cols}, std::move(v), true);
}

// Labels remapped to 0..K-1 in ascending order of the original values.
std::vector<int> dense_labels(std::span<const int> labels, std::size_t& n_classes) {
    std::map<int, int> ids;
    for (int y : labels) ids.emplace(y, 0);
    int next = 0;
    for (auto& [y, id] : ids) id = next++;
    n_classes = ids.size();
    std::vector<int> out;
    out.reserve(labels.size());
    for (int y : labels) out.push_back(ids[y]);
    return out;
}

void check_finite(const Tensor& loss, const std::string& what, std::size_t step) {
    if (!std::isfinite(loss.item())) throw DivergenceError(what + ": non-finite loss", step);
}

// Multinomial linear probe: logits = x theta + bias.
struct Probe {
    Tensor theta, bias;
    Probe(std::size_t n, std::size_t k)
        : theta(Tensor::zeros({n, k}, true)), bias(Tensor::zeros({k}, true)) {}
    Tensor logits(const Tensor& x) const { return add_row(matmul(x, theta), bias); }
};

}  // namespace

// ---- PCA --------------------------------------------------------------------

std::shared_ptr<PcaFeaturizer> fit_pca(const Tensor& activations) {
    const MatD X = to_eigen(activations);
    const auto N = X.rows(), n = X.cols();
    if (N <= n)
        throw ContractError("fit_pca needs more samples than dimensions (" + std::to_string(N) + " samples, " +
                            std::to_string(n) + " dims)");
    const Eigen::RowVectorXd mu = X.colwise().mean();
    MatD Z = X.rowwise() - mu;
    Eigen::RowVectorXd sd = (Z.array().square().colwise().sum() / double(N - 1)).sqrt();
    for (Eigen::Index j = 0; j < n; ++j)
        if (!(sd(j) > 1e-12)) sd(j) = 1.0;
    Z = Z.array().rowwise() / sd.array();
    const MatD cov = (Z.transpose() * Z) / double(N - 1);
    Eigen::SelfAdjointEigenSolver<MatD> es(cov);
    if (es.info() != Eigen::Success) throw DegeneracyError("fit_pca: eigendecomposition failed");

    MatD P(n, n);
    std::vector<double> var(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        // Descending order; sign fixed so the largest-magnitude entry is positive.
        Eigen::VectorXd v = es.eigenvectors().col(n - 1 - i);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        P.row(i) = v.transpose();
        var[std::size_t(i)] = es.eigenvalues()(n - 1 - i);
    }
    MatD mean_m = mu, sd_m = sd;
    return std::make_shared<PcaFeaturizer>(to_tensor(mean_m).reshape({std::size_t(n)}),
                                           to_tensor(sd_m).reshape({std::size_t(n)}), to_tensor(P), std::move(var));
}

// ---- L1 feature selection ---------------------------------------------------

std::vector<std::size_t> select_features_l1(const Tensor& features, std::span<const int> labels, double C,
                                            double eps, const L1Options& opts) {
    const MatD X = to_eigen(features);
    const auto N = X.rows(), m = X.cols();
    if (std::size_t(N) != labels.size()) throw DimensionError("select_features_l1: labels and samples differ in count");
    std::size_t K = 0;
    const auto y = dense_labels(labels, K);
    if (K < 2) throw ContractError("select_features_l1 needs at least two classes");
    if (!(C > 0)) throw SpecError("select_features_l1: C must be positive");

    // Step 1/L with L bounding the Lipschitz constant of the mean CE gradient.
    MatD Xa(N, m + 1);
    Xa << X, MatD::Ones(N, 1);
    const double lmax = Eigen::SelfAdjointEigenSolver<MatD>(Xa.transpose() * Xa, Eigen::EigenvaluesOnly)
                            .eigenvalues()
                            .maxCoeff();
    const double step = 1.0 / std::max(0.5 * lmax / double(N), 1e-12);
    const double alpha = 1.0 / (C * double(N));

    MatD Y = MatD::Zero(N, Eigen::Index(K));
    for (Eigen::Index i = 0; i < N; ++i) Y(i, y[std::size_t(i)]) = 1.0;

    // Rows 0..m-1 are weights, row m the unpenalized bias.
    MatD W = MatD::Zero(m + 1, Eigen::Index(K)), V = W;
    double t = 1.0;
    for (int it = 0; it < opts.max_iter; ++it) {
        MatD Z = Xa * V;
        Z = Z.colwise() - Z.rowwise().maxCoeff();
        MatD P = Z.array().exp();
        P = P.array().colwise() / P.rowwise().sum().array();
        const MatD G = Xa.transpose() * (P - Y) / double(N);
        MatD Wn = V - step * G;
        const double thr = step * alpha;
        Wn.topRows(m) = Wn.topRows(m).unaryExpr([thr](double w) {
            return w > thr ? w - thr : (w < -thr ? w + thr : 0.0);
        });
        const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        const double change = (Wn - W).cwiseAbs().maxCoeff();
        V = Wn + ((t - 1.0) / tn) * (Wn - W);
        W = std::move(Wn);
        t = tn;
        if (change < opts.tol) break;
    }

    std::vector<std::size_t> out;
    for (Eigen::Index j = 0; j < m; ++j)
        if (W.row(j).cwiseAbs().maxCoeff() > eps) out.push_back(std::size_t(j));
    return out;
}

// ---- SAE --------------------------------------------------------------------

std::shared_ptr<SaeFeaturizer> fit_sae(const Tensor& activations, const SaeConfig& cfg) {
    if (activations.rank() != 2 || activations.rows() == 0) throw ContractError("fit_sae needs a non-empty sample");
    const std::size_t N = activations.rows(), n = activations.cols();
    const std::size_t m = cfg.latent == 0 ? 4 * n : cfg.latent;
    if (m < n) throw SpecError("fit_sae: latent dimension must be at least the input dimension");

    Rng rng(cfg.seed);
    const double bound = 1.0 / std::sqrt(double(n));
    Tensor w1 = uniform_init(m, n, bound, rng);
    Tensor w2 = uniform_init(n, m, bound, rng);
    Tensor b1 = Tensor::zeros({m}, true);
    std::vector<float> mean(n, 0.0f);
    {
        std::vector<double> acc(n, 0.0);
        auto v = activations.data();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < n; ++j) acc[j] += v[i * n + j];
        for (std::size_t j = 0; j < n; ++j) mean[j] = float(acc[j] / double(N));
    }
    Tensor b2({n}, mean, true);
    SaeFeaturizer sae(w1, b1, w2, b2);
    Adam opt({w1, b1, w2, b2}, AdamConfig{.lr = cfg.lr});

    const std::size_t B = std::min<std::size_t>(std::size_t(cfg.batch_size), N);
    std::vector<std::size_t> idx(B);
    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& i : idx) i = rng.index(N);
        const Tensor x = gather_rows(activations, idx);
        const Tensor f = sae.encode(x);
        const Tensor d = sub(x, sae.decode(f));
        const Tensor loss = add(scale(sum(mul(d, d)), 1.0f / float(B)), scale(sum(f), float(cfg.l1 / double(B))));
        check_finite(loss, "fit_sae", std::size_t(step));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }

    auto out = std::make_shared<SaeFeaturizer>(w1.detach(), b1.detach(), w2.detach(), b2.detach());
    NoGradGuard no_grad;
    const Tensor f = out->encode(activations);
    const Tensor r = out->decode(f);
    double err = 0, norm = 0, active = 0;
    auto xv = activations.data(), rv = r.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        err += (double(xv[i]) - rv[i]) * (double(xv[i]) - rv[i]);
        norm += double(xv[i]) * xv[i];
    }
    for (float v : f.data()) active += v > 0 ? 1.0 : 0.0;
    out->recon_error = std::sqrt(err / std::max(norm, 1e-30));
    out->active_fraction = active / double(f.numel());
    return out;
}

// ---- RLAP -------------------------------------------------------------------

Tensor erase_rowspace(const Tensor& x, const Tensor& w) { return sub(x, matmul(matmul_nt(x, w), w)); }

FeatureHandle fit_rlap(const Tensor& activations, std::span<const int> labels, const RlapConfig& cfg,
                       std::size_t layer) {
    if (activations.rank() != 2) throw DimensionError("fit_rlap: expected [samples, dims] activations");
    const std::size_t n = activations.cols();
    if (cfg.k >= n) throw ContractError("fit_rlap: rank " + std::to_string(cfg.k) + " must be below " + std::to_string(n));
    if (labels.size() != activations.rows()) throw DimensionError("fit_rlap: labels and samples differ in count");
    std::size_t K = 0;
    const auto y = dense_labels(labels, K);
    if (K < 2) throw ContractError("fit_rlap needs at least two classes");

    Rng rng(cfg.seed);
    Tensor w = qr_orthonormalize(uniform_init(cfg.k, n, 1.0 / std::sqrt(double(n)), rng));
    w = Tensor(w.shape(), std::vector<float>(w.data().begin(), w.data().end()), true);
    Probe probe(n, K);
    Adam probe_opt({probe.theta, probe.bias}, AdamConfig{.lr = cfg.lr});

    for (int it = 0; it < cfg.iterations; ++it) {
        for (int s = 0; s < cfg.probe_steps; ++s) {
            const Tensor loss = softmax_cross_entropy(probe.logits(erase_rowspace(activations, w.detach())), y);
            check_finite(loss, "fit_rlap", std::size_t(it));
            probe_opt.zero_grad();
            backward(loss);
            probe_opt.step();
        }
        // Plain gradient ascent on W; per-coordinate step normalization
        // would inflate the near-zero gradients of irrelevant directions.
        const Tensor loss = softmax_cross_entropy(probe.logits(erase_rowspace(activations, w)), y);
        check_finite(loss, "fit_rlap", std::size_t(it));
        w.zero_grad();
        backward(loss);
        auto wv = w.data_mut();
        auto g = w.grad();
        for (std::size_t i = 0; i < wv.size(); ++i) wv[i] += cfg.w_lr * g[i];
        const Tensor q = qr_orthonormalize(w.detach());
        std::copy(q.data().begin(), q.data().end(), wv.begin());
    }

    FeatureHandle h;
    h.featurizer = std::make_shared<OrthogonalFeaturizer>("rlap", complete_orthonormal_basis(w.detach()), cfg.k);
    for (std::size_t i = 0; i < cfg.k; ++i) h.features.push_back(i);
    h.layer = layer;
    return h;
}

double majority_rate(std::span<const int> labels) {
    if (labels.empty()) return 0.0;
    std::map<int, std::size_t> counts;
    std::size_t best = 0;
    for (int y : labels) best = std::max(best, ++counts[y]);
    return double(best) / double(labels.size());
}

double probe_accuracy(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                      std::span<const int> test_labels, int steps) {
    if (train.rows() != train_labels.size() || test.rows() != test_labels.size())
        throw DimensionError("probe_accuracy: labels and samples differ in count");
    if (test_labels.empty()) throw ContractError("probe_accuracy: empty evaluation set");
    int max_label = 0;
    for (int v : train_labels) max_label = std::max(max_label, v);
    for (int v : test_labels) max_label = std::max(max_label, v);
    Probe probe(train.cols(), std::size_t(max_label) + 1);
    Adam opt({probe.theta, probe.bias}, AdamConfig{.lr = 0.05f});
    for (int s = 0; s < steps; ++s) {
        const Tensor loss = softmax_cross_entropy(probe.logits(train), train_labels);
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    NoGradGuard no_grad;
    const auto pred = argmax_rows(probe.logits(test));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test_labels[i];
    return double(hit) / double(pred.size());
}

}  // namespace dbench
