#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dbench/site_model.h"
#include "dbench/tensor.h"
#include "dbench/world.h"

namespace dbench {

// Map from residual vectors [batch, n] into a feature space [batch, m] and back.
class Featurizer {
   public:
    virtual ~Featurizer() = default;

    virtual std::string method() const = 0;
    virtual std::size_t input_dim() const = 0;
    virtual std::size_t feature_dim() const = 0;

    virtual Tensor encode(const Tensor& x) const = 0;
    virtual Tensor decode(const Tensor& f) const = 0;
    // True when decode(encode(x)) == x up to rounding.
    virtual bool exact_inverse() const = 0;

    // Base rows with the features listed in `features` taken from the source
    // rows. The default computes base + decode(f_edit) - decode(f_base), which
    // for lossy featurizers keeps the reconstruction residual of the base.
    // An empty feature set returns base unchanged, and the full set on an
    // exact featurizer returns source unchanged.
    virtual Tensor splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const;

   protected:
    // Throws DimensionError unless base and source are [batch, input_dim].
    void check_splice(const Tensor& base, const Tensor& source) const;
};

class IdentityFeaturizer final : public Featurizer {
   public:
    explicit IdentityFeaturizer(std::size_t n) : n_(n) {}
    std::string method() const override { return "identity"; }
    std::size_t input_dim() const override { return n_; }
    std::size_t feature_dim() const override { return n_; }
    Tensor encode(const Tensor& x) const override { return x; }
    Tensor decode(const Tensor& f) const override { return f; }
    bool exact_inverse() const override { return true; }

   private:
    std::size_t n_;
};

// Featurizer, designated feature set F_A and the site (layer, t_E) it acts on.
struct FeatureHandle {
    std::shared_ptr<const Featurizer> featurizer;
    std::vector<std::size_t> features;
    std::size_t layer = 0;

    // Throws ContractError on duplicate or out-of-range feature indices.
    void validate() const;
};

// Identity featurizer with every dimension selected.
FeatureHandle full_rep_handle(std::size_t site_dim, std::size_t layer);

// Residual-stream vector at (layer, t_E) of a clean pass: [site_dim].
Tensor get_vals(const SiteModel& model, const Prompt& x, std::size_t layer);
// Encoded source features restricted to F_A: [|F_A|].
Tensor get_feature(const SiteModel& model, const Prompt& x, const FeatureHandle& handle);

// Next-token logits of each base prompt with F_A at (layer, t_E) set to its
// value under a clean pass of the matching source prompt.
Tensor interchange_logits(const SiteModel& model, const FeatureHandle& handle, std::span<const Prompt> base,
                          std::span<const Prompt> source);
// Greedy first token of each intervened run.
std::vector<int> interchange_intervene(const SiteModel& model, const FeatureHandle& handle,
                                       std::span<const Prompt> base, std::span<const Prompt> source);
// Wholesale replacement of the residual vector.
std::vector<int> full_rep_intervene(const SiteModel& model, std::size_t layer, std::span<const Prompt> base,
                                    std::span<const Prompt> source);

// Differentiable variant used while fitting: the featurizer's parameters may
// require grad, source rows are precomputed clean activations.
Tensor spliced_logits(const SiteModel& model, std::size_t layer, std::span<const Prompt> base,
                      const std::function<Tensor(const Tensor& base_rows)>& edit);

// Per-tuple prompts for a model.
void tuple_prompts(const SiteModel& model, const World& world, std::span<const InterventionTuple> tuples,
                   std::vector<Prompt>& base, std::vector<Prompt>& source);

struct TupleTrace {
    const InterventionTuple* tuple = nullptr;
    int predicted = -1;
    int gold = -1;
};

// One JSON object per line: x, x', A*, y, prediction, kind.
void write_traces(std::span<const TupleTrace> traces, const World& world,
                  const std::function<std::string(int)>& token_text, const std::filesystem::path& file);

}  // namespace dbench
