#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dbench/tensor.h"
#include "dbench/world.h"

namespace dbench {

// A tokenized prompt with its entity span [entity_begin, entity_end).
struct Prompt {
    std::vector<int> tokens;
    std::size_t entity_begin = 0;
    std::size_t entity_end = 0;
    int entity = -1;
    int tmpl = -1;
    int attribute = -1;  // queried attribute, -1 for entity templates
    std::string answer_prefix;  // text between the prompt and its answer
};

// Final index of an entity span; throws IndexError if the span is empty or
// extends past the token sequence.
std::size_t last_entity_token(std::span<const int> tokens, std::size_t entity_begin, std::size_t entity_end);
inline std::size_t last_entity_token(const Prompt& p) {
    return last_entity_token(p.tokens, p.entity_begin, p.entity_end);
}

// Replacement of the residual-stream vector at (layer, t_E) for every prompt
// of a batch. edit receives the clean rows [batch, site_dim] and returns the
// rows to write back.
struct Splice {
    std::size_t layer = 0;
    std::function<Tensor(const Tensor& base_rows)> edit;
};

// Anything that exposes residual-stream sites at the last entity token and
// predicts a next token: the micro-LM and the planted oracle models.
class SiteModel {
   public:
    virtual ~SiteModel() = default;

    virtual std::size_t num_layers() const = 0;
    virtual std::size_t site_dim() const = 0;
    virtual std::size_t vocab_size() const = 0;

    virtual Prompt make_prompt(const World& world, int entity, int tmpl) const = 0;
    // Token that a correct answer to `base` starts with.
    virtual int label_token(const Prompt& base, const std::string& value) const = 0;
    // Full tokenization of a correct answer.
    virtual std::vector<int> label_tokens(const Prompt& base, const std::string& value) const {
        return {label_token(base, value)};
    }

    // Clean residual rows at t_E of each prompt: [batch, site_dim].
    virtual Tensor site_values(std::span<const Prompt> prompts, std::size_t layer) const = 0;
    // Next-token logits after each prompt's last token: [batch, vocab].
    virtual Tensor next_logits(std::span<const Prompt> prompts, const Splice* splice = nullptr) const = 0;
};

// Row-wise argmax; ties go to the lowest token id.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace dbench
