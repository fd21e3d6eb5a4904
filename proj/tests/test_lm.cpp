#include <cmath>
#include <cstring>
#include <filesystem>

#include "dbench/errors.h"
#include "dbench/lm.h"
#include "doctest.h"

using namespace dbench;

namespace {

WorldSpec small_spec() {
    WorldSpec s;
    s.n_entities = 24;
    s.seed = 5;
    s.attributes = {{"country", 4, Dependency::independent, "", 0},
                    {"continent", 2, Dependency::function_of, "country", 0}};
    s.n_attribute_templates = 4;
    s.n_entity_templates = 4;
    return s;
}

LanguageModel untrained(const World& w, int layers = 2) {
    LmConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.seed = 3;
    return LanguageModel(cfg, Tokenizer::build(w));
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

// Small model trained until it fits its training prompts; shared across cases.
const TrainedLm& trained_small() {
    static const TrainedLm lm = [] {
        auto w = generate_world(small_spec());
        LmConfig cfg;
        cfg.n_layers = 2;
        cfg.d_model = 32;
        cfg.n_heads = 2;
        cfg.d_ff = 64;
        cfg.seed = 1;
        LmTrainConfig t;
        t.max_steps = 3000;
        t.batch_size = 32;
        t.eval_every = 100;
        t.target_accuracy = 1.0;
        return train_lm(w, cfg, t);
    }();
    return lm;
}

}  // namespace

TEST_CASE("tokenizer round trip and entity spans") {
    auto w = generate_world(WorldSpec::defaults());
    auto tok = Tokenizer::build(w);
    for (int e = 0; e < int(w.entities.size()); ++e) {
        for (int t = 0; t < int(w.templates.size()); ++t) {
            const auto s = w.render(e, t);
            CHECK(tok.decode(tok.encode(s)) == s);
        }
        const auto n = tok.encode(" " + w.entities[e].name).size();
        CHECK(n >= 1);
        CHECK(n <= 3);
    }
    for (const auto& a : w.attributes)
        for (const auto& v : a.values) CHECK(tok.encode(" " + v).size() == 1);
    CHECK_THROWS_AS(tok.encode("caf\xc3\xa9"), SpecError);
    CHECK(Tokenizer(tok.vocab()).encode("The continent of") == tok.encode("The continent of"));
}

TEST_CASE("last entity token") {
    std::vector<int> toks(8, 0);
    CHECK(last_entity_token(toks, 3, 6) == 5);
    CHECK(last_entity_token(toks, 2, 3) == 2);
    CHECK_THROWS_AS(last_entity_token(toks, 6, 9), IndexError);
    CHECK_THROWS_AS(last_entity_token(toks, 4, 4), IndexError);

    auto w = generate_world(WorldSpec::defaults());
    auto lm = untrained(w);
    for (int e = 0; e < 30; ++e) {
        for (int t = 0; t < int(w.templates.size()); ++t) {
            const Prompt p = lm.make_prompt(w, e, t);
            const std::size_t te = last_entity_token(p);
            const std::string piece = lm.tokenizer().decode(std::span(p.tokens).subspan(te, 1));
            const std::string& name = w.entities[e].name;
            REQUIRE(piece.size() <= name.size());
            CHECK(name.compare(name.size() - piece.size(), piece.size(), piece) == 0);
            std::vector<int> span(p.tokens.begin() + p.entity_begin, p.tokens.begin() + p.entity_end);
            auto text = lm.tokenizer().decode(span);
            CHECK(text.substr(text.front() == ' ' ? 1 : 0) == name);
        }
    }
}

TEST_CASE("hooks: identity write, read at layer 0, transparency, range") {
    auto w = generate_world(small_spec());
    auto lm = untrained(w, 3);
    const Prompt p = lm.make_prompt(w, 2, 0);
    const Tensor clean = lm.forward(p.tokens);

    Hook identity{1, last_entity_token(p), {}, [](const Tensor& r) { return r; }};
    CHECK(same_bits(lm.forward(p.tokens, std::span(&identity, 1)), clean));

    Tensor seen;
    Hook reader{0, 0, [&](const Tensor& r) { seen = r; }, {}};
    CHECK(same_bits(lm.forward(p.tokens, std::span(&reader, 1)), clean));
    auto params = lm.named_parameters();
    const Tensor& emb = find_tensor(params, "tok_emb");
    const Tensor& pos = find_tensor(params, "pos_emb");
    REQUIRE(seen.numel() == 32);
    for (std::size_t c = 0; c < 32; ++c)
        CHECK(seen.data()[c] == emb.at(std::size_t(p.tokens[0]), c) + pos.at(0, c));

    std::vector<Hook> many;
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t t = 0; t < p.tokens.size(); ++t) many.push_back({l, t, [](const Tensor&) {}, {}});
    CHECK(same_bits(lm.forward(p.tokens, many), clean));

    Hook bad{3, 0, [](const Tensor&) {}, {}};
    CHECK_THROWS_AS(lm.forward(p.tokens, std::span(&bad, 1)), IndexError);
    Hook bad_pos{0, 99, [](const Tensor&) {}, {}};
    CHECK_THROWS_AS(lm.forward(p.tokens, std::span(&bad_pos, 1)), IndexError);
}

TEST_CASE("causality") {
    auto w = generate_world(small_spec());
    auto lm = untrained(w);
    const Prompt p = lm.make_prompt(w, 1, 1);
    auto toks = p.tokens;
    const Tensor a = lm.forward(toks);
    const std::size_t t = toks.size() / 2;
    for (std::size_t i = t + 1; i < toks.size(); ++i) toks[i] = (toks[i] + 7) % int(lm.vocab_size());
    const Tensor b = lm.forward(toks);
    const std::size_t V = lm.vocab_size();
    for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < V; ++c) CHECK(a.at(r, c) == b.at(r, c));
}

TEST_CASE("batched next_logits agree with single forward") {
    auto w = generate_world(small_spec());
    auto lm = untrained(w);
    std::vector<Prompt> ps{lm.make_prompt(w, 0, 0), lm.make_prompt(w, 3, 5), lm.make_prompt(w, 7, 8)};
    const Tensor batch = lm.next_logits(ps);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const Tensor single = lm.forward(ps[i].tokens);
        for (std::size_t c = 0; c < lm.vocab_size(); ++c)
            CHECK(batch.at(i, c) == doctest::Approx(single.at(ps[i].tokens.size() - 1, c)).epsilon(1e-5));
    }
    // site_values at layer 0 are embedding plus position.
    const Tensor s0 = lm.site_values(ps, 0);
    auto params = lm.named_parameters();
    const Tensor& emb = find_tensor(params, "tok_emb");
    const Tensor& pos = find_tensor(params, "pos_emb");
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::size_t te = last_entity_token(ps[i]);
        for (std::size_t c = 0; c < 32; ++c)
            CHECK(s0.at(i, c) == emb.at(std::size_t(ps[i].tokens[te]), c) + pos.at(te, c));
    }
    CHECK_THROWS_AS(lm.site_values(ps, 2), IndexError);
}

TEST_CASE("decode_greedy basics") {
    auto w = generate_world(small_spec());
    auto lm = untrained(w);
    const Prompt p = lm.make_prompt(w, 0, 0);
    CHECK(decode_greedy(lm, p.tokens, 0).empty());
    CHECK(decode_greedy(lm, p.tokens, 4) == decode_greedy(lm, p.tokens, 4));
    CHECK(decode_greedy(lm, p.tokens, 4).size() == 4);
    CHECK_THROWS_AS(decode_greedy(lm, std::vector<int>{}, 1), ContractError);
    Tensor tie({2, 3}, {1, 1, 0, 0, 2, 2});
    CHECK(argmax_rows(tie) == std::vector<int>{0, 1});
}

TEST_CASE("trained micro-LM predicts gold values and reacts to ablation") {
    const auto& lm = trained_small();
    auto w = generate_world(small_spec());
    CHECK(lm.report.train_accuracy >= 0.95);
    const int continent = w.attribute_index("continent");
    int checked = 0;
    for (int e = 0; e < 6; ++e) {
        for (int t : w.templates_for(continent)) {
            const Prompt p = lm.model.make_prompt(w, e, t);
            const auto out = decode_greedy(lm.model, p.tokens, 1);
            if (out[0] == lm.model.label_token(p, w.value(continent, e))) ++checked;
        }
    }
    CHECK(checked >= 20);  // of 24

    const Prompt p = lm.model.make_prompt(w, 0, 0);
    const std::size_t last = p.tokens.size() - 1;
    const Tensor clean = lm.model.forward(p.tokens);
    Hook zero{1, last, {}, [](const Tensor& r) { return Tensor::zeros(r.shape()); }};
    const Tensor ablated = lm.model.forward(p.tokens, std::span(&zero, 1));
    // KL(clean || ablated) at the final position.
    const std::size_t V = lm.model.vocab_size();
    auto logsoft = [&](const Tensor& l) {
        std::vector<double> out(V);
        double mx = -1e30, z = 0;
        for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, double(l.at(last, c)));
        for (std::size_t c = 0; c < V; ++c) z += std::exp(l.at(last, c) - mx);
        for (std::size_t c = 0; c < V; ++c) out[c] = l.at(last, c) - mx - std::log(z);
        return out;
    };
    auto lp = logsoft(clean), lq = logsoft(ablated);
    double kl = 0;
    for (std::size_t c = 0; c < V; ++c) kl += std::exp(lp[c]) * (lp[c] - lq[c]);
    CHECK(kl > 1e-3);
}

TEST_CASE("checkpoint round trip is bit-identical") {
    const auto& lm = trained_small();
    auto w = generate_world(small_spec());
    auto dir = std::filesystem::temp_directory_path() / "dbench_test_lm";
    std::filesystem::create_directories(dir);
    lm.model.save(dir / "model.cdl", dir / "model.json");
    auto loaded = LanguageModel::load(dir / "model.cdl", dir / "model.json");
    CHECK(loaded.config() == lm.model.config());
    const Prompt p = lm.model.make_prompt(w, 4, 2);
    CHECK(same_bits(loaded.forward(p.tokens), lm.model.forward(p.tokens)));
    CHECK_THROWS_AS(LanguageModel::load(dir / "nope.cdl", dir / "model.json"), MissingArtifactError);
}

TEST_CASE("training is deterministic and validates its inputs") {
    auto w = generate_world(small_spec());
    LmConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    LmTrainConfig t;
    t.max_steps = 20;
    t.batch_size = 8;
    t.eval_every = 10;
    auto a = train_lm(w, cfg, t);
    auto b = train_lm(w, cfg, t);
    CHECK(encode_cdl1(a.model.named_parameters()) == encode_cdl1(b.model.named_parameters()));

    auto empty = w;
    empty.entity_kept.assign(w.entities.size(), 0);
    CHECK_THROWS_AS(train_lm(empty, cfg, t), ContractError);

    auto bad = cfg;
    bad.n_heads = 3;
    CHECK_THROWS_AS(train_lm(w, bad, t), SpecError);
    bad = cfg;
    bad.n_layers = 1;
    CHECK_THROWS_AS(train_lm(w, bad, t), SpecError);

    auto wild = t;
    wild.lr = 1e30f;
    wild.warmup_steps = 0;
    CHECK_THROWS_AS(train_lm(w, cfg, wild), DivergenceError);
}
