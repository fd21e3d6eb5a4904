#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dbench/checkpoint.h"
#include "dbench/site_model.h"
#include "dbench/tokenizer.h"
#include "dbench/world.h"

namespace dbench {

struct LmConfig {
    int n_layers = 6;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;  // filled from the tokenizer
    int max_seq_len = 64;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const LmConfig&) const = default;
};

struct LmTrainConfig {
    int max_steps = 20000;
    int batch_size = 64;
    float lr = 2e-3f;
    float weight_decay = 0.1f;  // decoupled
    int warmup_steps = 100;
    int eval_every = 250;
    // Stop once held-out prompt accuracy reaches this value.
    double target_accuracy = 0.97;
    // Fraction of (entity, attribute template) pairs held out from training.
    double holdout_fraction = 0.2;
    // Weight of the next-token loss on entity-template prompts.
    double entity_prompt_weight = 0.25;
    // Share of each batch trained with the last-entity-token residual at a
    // random site in [swap_min_layer, swap_max_layer] replaced by that of
    // another entity, with the other entity's value as the target. Site 0
    // holds only the last subword, so it cannot carry a multi-token name.
    // swap_max_layer -1 picks n_layers / 2.
    double swap_rate = 0.5;
    int swap_min_layer = 1;
    int swap_max_layer = -1;
    double swap_weight = 1.0;
};

// Read or write access to a single residual-stream vector during forward().
// A hook with a write callback replaces the row with its return value.
struct Hook {
    std::size_t layer = 0;
    std::size_t position = 0;
    std::function<void(const Tensor& row)> read;
    std::function<Tensor(const Tensor& row)> write;
};

// Pre-norm decoder-only transformer. Site L is the residual stream entering
// block L, so site 0 is token embedding plus positional embedding.
class LanguageModel final : public SiteModel {
   public:
    LanguageModel(LmConfig cfg, Tokenizer tokenizer, bool trainable = false);

    const LmConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tok_; }

    std::size_t num_layers() const override { return std::size_t(cfg_.n_layers); }
    std::size_t site_dim() const override { return std::size_t(cfg_.d_model); }
    std::size_t vocab_size() const override { return tok_.size(); }

    Prompt make_prompt(const World& world, int entity, int tmpl) const override;
    int label_token(const Prompt& base, const std::string& value) const override;
    std::vector<int> label_tokens(const Prompt& base, const std::string& value) const override;
    Tensor site_values(std::span<const Prompt> prompts, std::size_t layer) const override;
    Tensor next_logits(std::span<const Prompt> prompts, const Splice* splice = nullptr) const override;

    // Logits for every position of one sequence: [T, V].
    Tensor forward(std::span<const int> tokens, std::span<const Hook> hooks = {}) const;

    // Logits at selected rows of a packed batch; used by training.
    Tensor logits_at(std::span<const std::vector<int>> seqs, std::span<const std::size_t> rows) const;

    std::vector<NamedTensor> named_parameters() const;
    std::vector<Tensor> parameters() const;
    // Drops gradient tracking from all parameters.
    void freeze();

    void save(const std::filesystem::path& checkpoint, const std::filesystem::path& sidecar,
              const std::string& extra_json = "{}") const;
    static LanguageModel load(const std::filesystem::path& checkpoint, const std::filesystem::path& sidecar);

   private:
    struct Layer {
        Tensor ln1, wq, wk, wv, wo, ln2, w1, b1, w2, b2;
    };
    struct Packed {
        std::vector<std::size_t> tokens, positions, offsets;
    };

    Packed pack(std::span<const std::vector<int>> seqs) const;
    Tensor embed(const Packed& p) const;
    Tensor block(const Tensor& x, const Layer& layer, std::span<const std::size_t> offsets) const;
    Tensor head(const Tensor& rows) const;
    void load_parameters(const std::vector<NamedTensor>& tensors);

    LmConfig cfg_;
    Tokenizer tok_;
    Tensor tok_emb_, pos_emb_, final_gain_;
    std::vector<Layer> layers_;
};

// Greedy decoding; ties go to the lowest token id.
std::vector<int> decode_greedy(const LanguageModel& model, std::span<const int> prompt, std::size_t max_new);

struct LmTrainReport {
    int steps = 0;
    double final_loss = 0.0;
    double train_accuracy = 0.0;
    double heldout_accuracy = 0.0;
    bool reached_target = false;
    double swap_accuracy = 0.0;  // source value predicted under a site swap
    double seconds = 0.0;
    std::vector<std::pair<int, double>> accuracy_curve;  // (step, held-out accuracy)
};

struct TrainedLm {
    LanguageModel model;
    LmTrainReport report;
};

// Trains on attribute prompts (loss on the answer token) and entity prompts
// (loss on the tokens after the entity). Throws DivergenceError on a
// non-finite loss and ContractError when there is nothing to train on.
TrainedLm train_lm(const World& world, LmConfig cfg, const LmTrainConfig& tcfg,
                   const std::function<void(const std::string&)>& log = {});

// Fraction of the given attribute prompts whose first predicted token matches
// the first token of the gold value.
double prompt_accuracy(const SiteModel& model, const World& world, std::span<const std::pair<int, int>> pairs);

// All usable (entity, attribute template) pairs of a world.
std::vector<std::pair<int, int>> attribute_pairs(const World& world);

// Deterministic train/held-out partition of attribute pairs used by train_lm.
void holdout_split(const World& world, std::uint64_t seed, double fraction, std::vector<std::pair<int, int>>& train,
                   std::vector<std::pair<int, int>>& heldout);

}  // namespace dbench
