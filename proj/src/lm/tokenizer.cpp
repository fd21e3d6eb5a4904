#include "dbench/tokenizer.h"

#include <algorithm>
#include <cctype>
#include <set>

#include "dbench/errors.h"

namespace dbench {

namespace {

const char* const kSpecials[] = {"<bos>", "<sep>"};

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

// Letter runs, each optionally carrying one leading space.
void collect_words(std::string_view text, std::set<std::string>& out) {
    std::size_t i = 0;
    while (i < text.size()) {
        const bool space = text[i] == ' ';
        const std::size_t start = i + (space ? 1 : 0);
        std::size_t j = start;
        while (j < text.size() && is_letter(text[j])) ++j;
        if (j > start) {
            out.insert(std::string(text.substr(start, j - start)));
            out.insert(" " + std::string(text.substr(start, j - start)));
            i = j;
        } else {
            i = start + 1;
        }
    }
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    if (vocab_.size() < 2 || vocab_[kBos] != kSpecials[0] || vocab_[kSep] != kSpecials[1])
        throw SpecError("tokenizer vocabulary must start with the special tokens");
    for (std::size_t i = 2; i < vocab_.size(); ++i) {
        if (vocab_[i].empty()) throw SpecError("empty token in vocabulary");
        if (!index_.emplace(vocab_[i], int(i)).second) throw SpecError("duplicate token '" + vocab_[i] + "'");
        max_len_ = std::max(max_len_, vocab_[i].size());
    }
}

Tokenizer Tokenizer::build(const World& world) {
    std::vector<std::string> vocab{kSpecials[0], kSpecials[1]};
    for (char c = 32; c < 127; ++c) vocab.emplace_back(1, c);

    std::set<std::string> pieces;
    for (const auto& t : world.templates) {
        std::string text = t.text;
        text.replace(text.find(kEntitySlot), std::string(kEntitySlot).size(), " ");
        collect_words(text, pieces);
    }
    for (const auto& e : world.entities) {
        for (std::size_t s = 0; s < e.syllables.size(); ++s) {
            pieces.insert(e.syllables[s]);
            if (s == 0) pieces.insert(" " + e.syllables[s]);
        }
    }
    for (const auto& a : world.attributes) {
        for (const auto& v : a.values) {
            pieces.insert(v);
            pieces.insert(" " + v);
        }
    }
    for (const auto& p : pieces)
        if (p.size() > 1) vocab.push_back(p);

    Tokenizer tok(std::move(vocab));
    for (const auto& e : world.entities) {
        for (const std::string& form : {e.name, " " + e.name}) {
            const auto n = tok.encode(form).size();
            if (n < 1 || n > 3) throw SpecError("entity '" + e.name + "' encodes to " + std::to_string(n) + " tokens");
        }
    }
    for (const auto& a : world.attributes) {
        for (const auto& v : a.values) {
            if (tok.encode(v).size() != 1 || tok.encode(" " + v).size() != 1)
                throw SpecError("value '" + v + "' is not a single token");
        }
    }
    return tok;
}

int Tokenizer::id(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    return it == index_.end() ? -1 : it->second;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> out;
    std::size_t i = 0;
    std::string buf;
    while (i < text.size()) {
        int found = -1;
        std::size_t len = std::min(max_len_, text.size() - i);
        for (; len > 0; --len) {
            buf.assign(text.substr(i, len));
            auto it = index_.find(buf);
            if (it != index_.end()) {
                found = it->second;
                break;
            }
        }
        if (found < 0)
            throw SpecError("character " + std::to_string(static_cast<unsigned char>(text[i])) +
                            " is outside the tokenizer vocabulary");
        out.push_back(found);
        i += len;
    }
    return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string s;
    for (int id : ids) {
        if (id < 0 || id >= int(vocab_.size())) throw IndexError("token id " + std::to_string(id) + " out of range");
        if (id == kBos || id == kSep) continue;
        s += vocab_[id];
    }
    return s;
}

}  // namespace dbench
