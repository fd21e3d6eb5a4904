#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dbench/world.h"

namespace dbench {

// Closed-vocabulary greedy longest-match tokenizer. The vocabulary holds the
// two specials, every printable ASCII character, template words, entity
// syllables and whole attribute values (each with and without a leading
// space), so any ASCII string round-trips.
class Tokenizer {
   public:
    static constexpr int kBos = 0;
    static constexpr int kSep = 1;

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> vocab);

    // Builds the vocabulary for a world and checks that every entity name
    // encodes to 1-3 tokens and every value to a single token.
    static Tokenizer build(const World& world);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    std::size_t size() const { return vocab_.size(); }
    const std::vector<std::string>& vocab() const { return vocab_; }
    int id(std::string_view piece) const;  // -1 when absent

   private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> index_;
    std::size_t max_len_ = 1;
};

}  // namespace dbench
