#include <algorithm>
#include <cmath>

#include "dbench/errors.h"
#include "dbench/lm.h"
#include "dbench/rng.h"
#include "json.hpp"

namespace dbench {

using nlohmann::json;

std::size_t last_entity_token(std::span<const int> tokens, std::size_t entity_begin, std::size_t entity_end) {
    if (entity_begin >= entity_end || entity_end > tokens.size())
        throw IndexError("entity span [" + std::to_string(entity_begin) + "," + std::to_string(entity_end) +
                         ") invalid for " + std::to_string(tokens.size()) + " tokens");
    return entity_end - 1;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const auto r = logits.rows(), c = logits.cols();
    auto d = logits.data();
    std::vector<int> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (d[i * c + j] > d[i * c + best]) best = j;
        out[i] = int(best);
    }
    return out;
}

void LmConfig::validate() const {
    if (n_layers < 2) throw SpecError("n_layers must be at least 2");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        throw SpecError("d_model must be a positive multiple of n_heads");
    if (d_ff < 1) throw SpecError("d_ff must be positive");
    if (max_seq_len < 2) throw SpecError("max_seq_len must be at least 2");
    if (vocab_size < 3) throw SpecError("vocab_size must be set from the tokenizer");
}

namespace {

Tensor normal_init(Rng& rng, Shape shape, double std, bool trainable) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal() * std);
    return Tensor(std::move(shape), std::move(v), trainable);
}

Tensor constant(Shape shape, float value, bool trainable) {
    std::vector<float> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), trainable);
}

std::string answer_prefix_for(const std::string& tmpl) { return !tmpl.empty() && tmpl.back() == '"' ? "" : " "; }

void append(std::vector<int>& out, const std::vector<int>& more) { out.insert(out.end(), more.begin(), more.end()); }

}  // namespace

LanguageModel::LanguageModel(LmConfig cfg, Tokenizer tokenizer, bool trainable)
    : cfg_(cfg), tok_(std::move(tokenizer)) {
    cfg_.vocab_size = int(tok_.size());
    cfg_.validate();
    const std::size_t d = cfg_.d_model, f = cfg_.d_ff, V = cfg_.vocab_size, T = cfg_.max_seq_len;
    Rng rng(derive_seed(cfg_.seed, "lm/init"));
    const double s_in = 1.0 / std::sqrt(double(d));
    const double s_out = s_in / std::sqrt(2.0 * cfg_.n_layers);
    tok_emb_ = normal_init(rng, {V, d}, 0.1, trainable);
    pos_emb_ = normal_init(rng, {T, d}, 0.1, trainable);
    final_gain_ = constant({d}, 1.0f, trainable);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        Layer L;
        L.ln1 = constant({d}, 1.0f, trainable);
        L.wq = normal_init(rng, {d, d}, s_in, trainable);
        L.wk = normal_init(rng, {d, d}, s_in, trainable);
        L.wv = normal_init(rng, {d, d}, s_in, trainable);
        L.wo = normal_init(rng, {d, d}, s_out, trainable);
        L.ln2 = constant({d}, 1.0f, trainable);
        L.w1 = normal_init(rng, {d, f}, s_in, trainable);
        L.b1 = constant({f}, 0.0f, trainable);
        L.w2 = normal_init(rng, {f, d}, s_out * std::sqrt(double(d) / f), trainable);
        L.b2 = constant({d}, 0.0f, trainable);
        layers_.push_back(std::move(L));
    }
}

std::vector<NamedTensor> LanguageModel::named_parameters() const {
    std::vector<NamedTensor> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}, {"final_gain", final_gain_}};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& L = layers_[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        for (auto [n, t] : {std::pair{"ln1", &L.ln1}, {"wq", &L.wq}, {"wk", &L.wk}, {"wv", &L.wv}, {"wo", &L.wo},
                            {"ln2", &L.ln2}, {"w1", &L.w1}, {"b1", &L.b1}, {"w2", &L.w2}, {"b2", &L.b2}})
            out.push_back({p + n, *t});
    }
    return out;
}

std::vector<Tensor> LanguageModel::parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_parameters()) out.push_back(nt.tensor);
    return out;
}

void LanguageModel::load_parameters(const std::vector<NamedTensor>& tensors) {
    auto take = [&](const std::string& name, Tensor& dst) {
        const Tensor& src = find_tensor(tensors, name);
        if (src.shape() != dst.shape())
            throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                                 ", expected " + shape_str(dst.shape()));
        dst = src.detach();
    };
    take("tok_emb", tok_emb_);
    take("pos_emb", pos_emb_);
    take("final_gain", final_gain_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& L = layers_[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        for (auto [n, t] : {std::pair{"ln1", &L.ln1}, {"wq", &L.wq}, {"wk", &L.wk}, {"wv", &L.wv}, {"wo", &L.wo},
                            {"ln2", &L.ln2}, {"w1", &L.w1}, {"b1", &L.b1}, {"w2", &L.w2}, {"b2", &L.b2}})
            take(p + n, *t);
    }
}

void LanguageModel::freeze() {
    tok_emb_ = tok_emb_.detach();
    pos_emb_ = pos_emb_.detach();
    final_gain_ = final_gain_.detach();
    for (auto& L : layers_)
        for (Tensor* t : {&L.ln1, &L.wq, &L.wk, &L.wv, &L.wo, &L.ln2, &L.w1, &L.b1, &L.w2, &L.b2}) *t = t->detach();
}

// ---- prompts ----------------------------------------------------------------

Prompt LanguageModel::make_prompt(const World& world, int entity, int tmpl) const {
    const auto& t = world.templates.at(tmpl);
    Prompt p;
    p.entity = entity;
    p.tmpl = tmpl;
    p.attribute = t.attribute;
    p.answer_prefix = answer_prefix_for(t.text);
    p.tokens.push_back(Tokenizer::kBos);

    if (world.spec.few_shot > 0 && t.attribute >= 0) {
        // Demonstrations come from training-split entities only.
        const auto split = make_splits(world, SplitMode::entity);
        std::vector<int> pool;
        for (int e : split.train)
            if (e != entity && world.entity_kept[e]) pool.push_back(e);
        Rng rng(derive_seed(world.spec.seed, "few-shot") ^ (std::uint64_t(entity) * 7919u + std::uint64_t(tmpl)));
        rng.shuffle(pool);
        const std::size_t k = std::min<std::size_t>(pool.size(), world.spec.few_shot);
        for (std::size_t i = 0; i < k; ++i) {
            append(p.tokens, tok_.encode(world.render(pool[i], tmpl) + p.answer_prefix + world.value(t.attribute, pool[i])));
            p.tokens.push_back(Tokenizer::kSep);
        }
    }

    const auto slot = t.text.find(kEntitySlot);
    std::string prefix = t.text.substr(0, slot);
    const std::string suffix = t.text.substr(slot + std::string(kEntitySlot).size());
    std::string name = world.entities.at(entity).name;
    // The separating space belongs to the name so the entity span is exact.
    if (!prefix.empty() && prefix.back() == ' ') {
        prefix.pop_back();
        name = " " + name;
    }
    append(p.tokens, tok_.encode(prefix));
    p.entity_begin = p.tokens.size();
    append(p.tokens, tok_.encode(name));
    p.entity_end = p.tokens.size();
    append(p.tokens, tok_.encode(suffix));
    if (p.tokens.size() > std::size_t(cfg_.max_seq_len))
        throw ContractError("prompt of " + std::to_string(p.tokens.size()) + " tokens exceeds max_seq_len");
    return p;
}

int LanguageModel::label_token(const Prompt& base, const std::string& value) const {
    return tok_.encode(base.answer_prefix + value).at(0);
}

std::vector<int> LanguageModel::label_tokens(const Prompt& base, const std::string& value) const {
    return tok_.encode(base.answer_prefix + value);
}

// ---- forward ----------------------------------------------------------------

LanguageModel::Packed LanguageModel::pack(std::span<const std::vector<int>> seqs) const {
    Packed p;
    p.offsets.push_back(0);
    for (const auto& s : seqs) {
        if (s.empty()) throw ContractError("empty token sequence");
        if (s.size() > std::size_t(cfg_.max_seq_len))
            throw ContractError("sequence of " + std::to_string(s.size()) + " tokens exceeds max_seq_len");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] < 0 || s[i] >= cfg_.vocab_size) throw IndexError("token id " + std::to_string(s[i]) + " out of range");
            p.tokens.push_back(std::size_t(s[i]));
            p.positions.push_back(i);
        }
        p.offsets.push_back(p.tokens.size());
    }
    return p;
}

Tensor LanguageModel::embed(const Packed& p) const {
    return add(gather_rows(tok_emb_, p.tokens), gather_rows(pos_emb_, p.positions));
}

Tensor LanguageModel::block(const Tensor& x, const Layer& L, std::span<const std::size_t> offsets) const {
    const Tensor h = rms_norm(x, L.ln1);
    const Tensor att = causal_attention(matmul(h, L.wq), matmul(h, L.wk), matmul(h, L.wv), offsets,
                                        std::size_t(cfg_.n_heads));
    const Tensor x1 = add(x, matmul(att, L.wo));
    const Tensor h2 = rms_norm(x1, L.ln2);
    const Tensor mlp = add_row(matmul(relu(add_row(matmul(h2, L.w1), L.b1)), L.w2), L.b2);
    return add(x1, mlp);
}

Tensor LanguageModel::head(const Tensor& rows) const { return matmul_nt(rms_norm(rows, final_gain_), tok_emb_); }

Tensor LanguageModel::forward(std::span<const int> tokens, std::span<const Hook> hooks) const {
    const std::vector<std::vector<int>> seqs{{tokens.begin(), tokens.end()}};
    const Packed p = pack(seqs);
    for (const auto& h : hooks) {
        if (h.layer >= num_layers() || h.position >= tokens.size())
            throw IndexError("hook site (" + std::to_string(h.layer) + "," + std::to_string(h.position) +
                             ") out of range");
    }
    Tensor x = embed(p);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (const auto& h : hooks) {
            if (h.layer != l) continue;
            const std::size_t row[1] = {h.position};
            const Tensor cur = gather_rows(x, row);
            if (h.write) {
                const Tensor next = h.write(cur);
                if (next.shape() != cur.shape()) throw DimensionError("hook returned shape " + shape_str(next.shape()));
                x = scatter_rows(x, row, next);
            } else if (h.read) {
                h.read(cur);
            }
        }
        x = block(x, layers_[l], p.offsets);
    }
    return head(x);
}

Tensor LanguageModel::site_values(std::span<const Prompt> prompts, std::size_t layer) const {
    if (layer >= num_layers()) throw IndexError("site layer " + std::to_string(layer) + " out of range");
    std::vector<std::vector<int>> seqs;
    std::vector<std::size_t> rows;
    std::size_t off = 0;
    for (const auto& pr : prompts) {
        rows.push_back(off + last_entity_token(pr));
        off += pr.tokens.size();
        seqs.push_back(pr.tokens);
    }
    const Packed p = pack(seqs);
    Tensor x = embed(p);
    for (std::size_t l = 0; l < layer; ++l) x = block(x, layers_[l], p.offsets);
    return gather_rows(x, rows);
}

Tensor LanguageModel::next_logits(std::span<const Prompt> prompts, const Splice* splice) const {
    if (splice && splice->layer >= num_layers())
        throw IndexError("splice layer " + std::to_string(splice->layer) + " out of range");
    std::vector<std::vector<int>> seqs;
    std::vector<std::size_t> sites, last;
    std::size_t off = 0;
    for (const auto& pr : prompts) {
        sites.push_back(off + last_entity_token(pr));
        off += pr.tokens.size();
        last.push_back(off - 1);
        seqs.push_back(pr.tokens);
    }
    const Packed p = pack(seqs);
    Tensor x = embed(p);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        if (splice && splice->layer == l) {
            const Tensor base = gather_rows(x, sites);
            const Tensor edited = splice->edit(base);
            if (edited.shape() != base.shape())
                throw DimensionError("splice returned shape " + shape_str(edited.shape()) + ", expected " +
                                     shape_str(base.shape()));
            x = scatter_rows(x, sites, edited);
        }
        x = block(x, layers_[l], p.offsets);
    }
    return head(gather_rows(x, last));
}

Tensor LanguageModel::logits_at(std::span<const std::vector<int>> seqs, std::span<const std::size_t> rows) const {
    const Packed p = pack(seqs);
    Tensor x = embed(p);
    for (std::size_t l = 0; l < layers_.size(); ++l) x = block(x, layers_[l], p.offsets);
    return head(gather_rows(x, rows));
}

std::vector<int> decode_greedy(const LanguageModel& model, std::span<const int> prompt, std::size_t max_new) {
    if (prompt.empty()) throw ContractError("decode_greedy needs a non-empty prompt");
    NoGradGuard no_grad;
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (std::size_t i = 0; i < max_new && seq.size() < std::size_t(model.config().max_seq_len); ++i) {
        const Tensor logits = model.forward(seq);
        const std::size_t rows[1] = {seq.size() - 1};
        const int next = argmax_rows(gather_rows(logits, rows))[0];
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

// ---- persistence ------------------------------------------------------------

void LanguageModel::save(const std::filesystem::path& checkpoint, const std::filesystem::path& sidecar,
                         const std::string& extra_json) const {
    save_checkpoint(checkpoint, named_parameters());
    json j{{"config",
            {{"n_layers", cfg_.n_layers},
             {"d_model", cfg_.d_model},
             {"n_heads", cfg_.n_heads},
             {"d_ff", cfg_.d_ff},
             {"vocab_size", cfg_.vocab_size},
             {"max_seq_len", cfg_.max_seq_len},
             {"seed", cfg_.seed}}},
           {"vocab", tok_.vocab()},
           {"training", json::parse(extra_json)}};
    write_file_atomic(sidecar, j.dump(2) + "\n");
}

LanguageModel LanguageModel::load(const std::filesystem::path& checkpoint, const std::filesystem::path& sidecar) {
    json j;
    LmConfig cfg;
    std::vector<std::string> vocab;
    try {
        j = json::parse(read_file(sidecar));
        const auto& c = j.at("config");
        cfg.n_layers = c.at("n_layers");
        cfg.d_model = c.at("d_model");
        cfg.n_heads = c.at("n_heads");
        cfg.d_ff = c.at("d_ff");
        cfg.vocab_size = c.at("vocab_size");
        cfg.max_seq_len = c.at("max_seq_len");
        cfg.seed = c.at("seed");
        vocab = j.at("vocab").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw SpecError("malformed model sidecar " + sidecar.string() + ": " + e.what());
    }
    if (int(vocab.size()) != cfg.vocab_size) throw SpecError("sidecar vocab size does not match config");
    LanguageModel m(cfg, Tokenizer(std::move(vocab)), false);
    m.load_parameters(load_checkpoint(checkpoint));
    return m;
}

}  // namespace dbench
