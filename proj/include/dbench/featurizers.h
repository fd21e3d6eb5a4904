#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dbench/intervention.h"
#include "dbench/site_model.h"
#include "dbench/world.h"

namespace dbench {

// ---- featurizer families ----------------------------------------------------

// f = ((x - mean) / scale) P^T with orthogonal P [n, n]; rows of P are the
// principal components in descending variance order.
class PcaFeaturizer final : public Featurizer {
   public:
    PcaFeaturizer(Tensor mean, Tensor scale, Tensor components, std::vector<double> variances);

    std::string method() const override { return "pca"; }
    std::size_t input_dim() const override { return mean_.numel(); }
    std::size_t feature_dim() const override { return mean_.numel(); }
    Tensor encode(const Tensor& x) const override;
    Tensor decode(const Tensor& f) const override;
    bool exact_inverse() const override { return true; }

    const Tensor& mean() const { return mean_; }
    const Tensor& scale() const { return scale_; }
    const Tensor& components() const { return components_; }
    const std::vector<double>& variances() const { return variances_; }

   private:
    Tensor mean_, scale_, components_;
    std::vector<double> variances_;
};

// f = x Q^T for an orthogonal basis Q [n, n]. Used by RLAP (rows of W followed
// by a completion of its nullspace) and DAS/MDAS (first k rows learned).
class OrthogonalFeaturizer final : public Featurizer {
   public:
    OrthogonalFeaturizer(std::string method, Tensor basis, std::size_t k);

    std::string method() const override { return method_; }
    std::size_t input_dim() const override { return basis_.cols(); }
    std::size_t feature_dim() const override { return basis_.rows(); }
    Tensor encode(const Tensor& x) const override { return matmul_nt(x, basis_); }
    Tensor decode(const Tensor& f) const override { return matmul(f, basis_); }
    bool exact_inverse() const override { return true; }
    // base + (source - base) Q_F^T Q_F over the selected rows Q_F.
    Tensor splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const override;

    const Tensor& basis() const { return basis_; }
    std::size_t k() const { return k_; }

   private:
    std::string method_;
    Tensor basis_;
    std::size_t k_;
};

// Identity map whose feature set comes from a learned binary mask.
class MaskFeaturizer final : public Featurizer {
   public:
    MaskFeaturizer(std::string method, Tensor mask_logits, double temperature);

    std::string method() const override { return method_; }
    std::size_t input_dim() const override { return logits_.numel(); }
    std::size_t feature_dim() const override { return logits_.numel(); }
    Tensor encode(const Tensor& x) const override { return x; }
    Tensor decode(const Tensor& f) const override { return f; }
    bool exact_inverse() const override { return true; }
    // Coordinates in F_A copied from source, the rest kept from base.
    Tensor splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const override;

    const Tensor& mask_logits() const { return logits_; }
    double temperature() const { return temperature_; }
    // sigma(m / T) per coordinate.
    std::vector<double> mask() const;
    // {i : 1 - sigma(m_i / T) < eps}
    std::vector<std::size_t> selected(double eps) const;

   private:
    std::string method_;
    Tensor logits_;
    double temperature_;
};

// f = relu((x - b2) W1^T + b1), x_hat = f W2^T + b2.
class SaeFeaturizer final : public Featurizer {
   public:
    SaeFeaturizer(Tensor w1, Tensor b1, Tensor w2, Tensor b2);

    std::string method() const override { return "sae"; }
    std::size_t input_dim() const override { return w1_.cols(); }
    std::size_t feature_dim() const override { return w1_.rows(); }
    Tensor encode(const Tensor& x) const override;
    Tensor decode(const Tensor& f) const override;
    bool exact_inverse() const override { return false; }
    Tensor splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const override;

    // When false, splice returns decode(edited features) without adding back
    // the base reconstruction residual.
    bool restore_residual = true;
    double recon_error = 0.0;     // relative L2 on the fitting data
    double active_fraction = 0.0;  // mean fraction of nonzero latents

    const Tensor& w1() const { return w1_; }
    const Tensor& b1() const { return b1_; }
    const Tensor& w2() const { return w2_; }
    const Tensor& b2() const { return b2_; }

   private:
    Tensor w1_, b1_, w2_, b2_;
};

// ---- unsupervised and probe-based fits -----------------------------------

// Components of the standardized sample covariance. Needs more samples than
// dimensions. Dimensions with zero variance keep unit scale.
std::shared_ptr<PcaFeaturizer> fit_pca(const Tensor& activations);

struct L1Options {
    int max_iter = 1000;
    double tol = 1e-6;
};
// Multinomial logistic regression with an L1 penalty of 1/C (per-sample
// objective mean CE + |W|_1 / (C N)), fitted by accelerated proximal
// gradient. Returns the dims whose largest absolute class weight exceeds eps.
std::vector<std::size_t> select_features_l1(const Tensor& features, std::span<const int> labels, double C,
                                            double eps, const L1Options& opts = {});

struct SaeConfig {
    std::size_t latent = 0;  // 0: four times the input dimension
    double l1 = 1e-3;
    int steps = 3000;
    int batch_size = 128;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};
std::shared_ptr<SaeFeaturizer> fit_sae(const Tensor& activations, const SaeConfig& cfg);

struct RlapConfig {
    std::size_t k = 2;
    int iterations = 100;
    int probe_steps = 10;  // theta steps per W step
    float lr = 0.05f;     // probe (Adam)
    float w_lr = 1.0f;    // W (gradient ascent)
    std::uint64_t seed = 0;
};
// Adversarial rank-k erasure. Features 0..k-1 of the result span the rows of
// W, which are also its designated feature set.
FeatureHandle fit_rlap(const Tensor& activations, std::span<const int> labels, const RlapConfig& cfg,
                       std::size_t layer = 0);

// Fits a fresh multinomial linear probe on the training representations and
// returns its accuracy on the held-out ones.
double probe_accuracy(const Tensor& train, std::span<const int> train_labels, const Tensor& test,
                      std::span<const int> test_labels, int steps = 500);
// Frequency of the most common label.
double majority_rate(std::span<const int> labels);

// Representations with the rows of W projected out: x (I - W^T W).
Tensor erase_rowspace(const Tensor& x, const Tensor& w);

// ---- intervention-trained featurizers ---------------------------------------

// Precomputed supervision for training on interchange interventions.
struct InterventionBatch {
    std::vector<Prompt> base;
    Tensor source_rows;            // clean source activations at the site
    std::vector<int> gold;         // label token per tuple
    std::vector<int> group;        // 0 for cause, 1 + distractor index for iso
    std::size_t n_groups = 1;
};
InterventionBatch make_intervention_batch(const SiteModel& model, const World& world,
                                          std::span<const InterventionTuple> tuples, std::size_t layer);

// Cause mean plus the uniform average of the per-distractor iso means.
double multitask_loss(double cause, std::span<const double> iso);
Tensor multitask_loss(const Tensor& cause, std::span<const Tensor> iso);

using TrainLog = std::function<void(const std::string&)>;

struct DasConfig {
    std::size_t k = 2;
    bool multi_task = false;
    int steps = 1000;
    int batch_size = 64;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};
FeatureHandle fit_das(const SiteModel& model, const World& world, std::span<const InterventionTuple> tuples,
                      std::size_t layer, const DasConfig& cfg, const TrainLog& log = {});

struct DbmConfig {
    bool multi_task = false;
    // Sparsity weight; negative selects the default (0 multi-task, 1e-3 single-task).
    double lambda = -1.0;
    double t_start = 1e-2;
    double t_end = 1e-7;
    double eps = 0.5;
    bool l1_on_logits = false;
    int steps = 1000;
    int batch_size = 64;
    float lr = 1e-3f;
    std::uint64_t seed = 0;

    double resolved_lambda() const { return lambda >= 0 ? lambda : (multi_task ? 0.0 : 1e-3); }
};
FeatureHandle fit_dbm(const SiteModel& model, const World& world, std::span<const InterventionTuple> tuples,
                      std::size_t layer, const DbmConfig& cfg, const TrainLog& log = {});

// ---- persistence ------------------------------------------------------------

// CDL1 tensors plus a JSON sidecar; `meta` is merged into the sidecar
// (attribute, hyperparameters, ...). Feature indices and the site layer are
// stored alongside.
void save_featurizer(const FeatureHandle& handle, const std::filesystem::path& cdl,
                     const std::filesystem::path& sidecar, const std::string& meta_json = "{}");
FeatureHandle load_featurizer(const std::filesystem::path& cdl, const std::filesystem::path& sidecar);

}  // namespace dbench
