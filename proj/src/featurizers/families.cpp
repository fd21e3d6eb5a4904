#include <cmath>

#include "dbench/checkpoint.h"
#include "dbench/errors.h"
#include "dbench/featurizers.h"
#include "json.hpp"

namespace dbench {

namespace {

Tensor negated(const Tensor& v) {
    std::vector<float> out(v.data().begin(), v.data().end());
    for (auto& x : out) x = -x;
    return Tensor(v.shape(), std::move(out));
}

Tensor reciprocal(const Tensor& v) {
    std::vector<float> out(v.data().begin(), v.data().end());
    for (auto& x : out) x = 1.0f / x;
    return Tensor(v.shape(), std::move(out));
}

}  // namespace

// ---- PCA --------------------------------------------------------------------

PcaFeaturizer::PcaFeaturizer(Tensor mean, Tensor scale, Tensor components, std::vector<double> variances)
    : mean_(std::move(mean)), scale_(std::move(scale)), components_(std::move(components)),
      variances_(std::move(variances)) {
    const std::size_t n = mean_.numel();
    if (scale_.numel() != n || components_.rank() != 2 || components_.rows() != n || components_.cols() != n)
        throw DimensionError("pca featurizer: inconsistent parameter shapes");
}

Tensor PcaFeaturizer::encode(const Tensor& x) const {
    const Tensor z = mul_row(add_row(x, negated(mean_)), reciprocal(scale_));
    return matmul_nt(z, components_);
}

Tensor PcaFeaturizer::decode(const Tensor& f) const {
    return add_row(mul_row(matmul(f, components_), scale_), mean_);
}

// ---- orthogonal -------------------------------------------------------------

OrthogonalFeaturizer::OrthogonalFeaturizer(std::string method, Tensor basis, std::size_t k)
    : method_(std::move(method)), basis_(std::move(basis)), k_(k) {
    if (basis_.rank() != 2 || basis_.rows() != basis_.cols())
        throw DimensionError("orthogonal featurizer needs a square basis, got " + shape_str(basis_.shape()));
    if (k_ > basis_.rows()) throw ContractError("orthogonal featurizer: k exceeds the dimension");
}

Tensor OrthogonalFeaturizer::splice(const Tensor& base, const Tensor& source,
                                    std::span<const std::size_t> features) const {
    check_splice(base, source);
    if (features.empty()) return base;
    if (features.size() == feature_dim()) return source;
    const Tensor q = gather_rows(basis_, features);
    return add(base, matmul(matmul_nt(sub(source, base), q), q));
}

// ---- mask -------------------------------------------------------------------

MaskFeaturizer::MaskFeaturizer(std::string method, Tensor mask_logits, double temperature)
    : method_(std::move(method)), logits_(mask_logits.detach().reshape({mask_logits.numel()})),
      temperature_(temperature) {
    if (!(temperature_ > 0)) throw SpecError("mask featurizer: temperature must be positive");
}

Tensor MaskFeaturizer::splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const {
    check_splice(base, source);
    if (features.empty()) return base;
    const std::size_t n = input_dim(), B = base.rows();
    std::vector<char> take(n, 0);
    for (auto i : features) take[i] = 1;
    std::vector<float> out(base.data().begin(), base.data().end());
    auto sv = source.data();
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < n; ++c)
            if (take[c]) out[r * n + c] = sv[r * n + c];
    return make_op<float>(base.shape(), std::move(out), {base, source},
                          [take, n](std::span<const float> g, std::span<std::span<float>> in) {
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  auto& dst = in[take[i % n] ? 1 : 0];
                                  if (!dst.empty()) dst[i] += g[i];
                              }
                          });
}

std::vector<double> MaskFeaturizer::mask() const {
    std::vector<double> out;
    for (float m : logits_.data()) out.push_back(1.0 / (1.0 + std::exp(-double(m) / temperature_)));
    return out;
}

std::vector<std::size_t> MaskFeaturizer::selected(double eps) const {
    std::vector<std::size_t> out;
    const auto s = mask();
    for (std::size_t i = 0; i < s.size(); ++i)
        if (1.0 - s[i] < eps) out.push_back(i);
    return out;
}

// ---- SAE --------------------------------------------------------------------

SaeFeaturizer::SaeFeaturizer(Tensor w1, Tensor b1, Tensor w2, Tensor b2)
    : w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)) {
    const std::size_t m = w1_.rows(), n = w1_.cols();
    if (b1_.numel() != m || w2_.rows() != n || w2_.cols() != m || b2_.numel() != n)
        throw DimensionError("sae featurizer: inconsistent parameter shapes");
}

Tensor SaeFeaturizer::encode(const Tensor& x) const {
    return relu(add_row(matmul_nt(add_row(x, scale(b2_, -1.0f)), w1_), b1_));
}

Tensor SaeFeaturizer::decode(const Tensor& f) const { return add_row(matmul_nt(f, w2_), b2_); }

Tensor SaeFeaturizer::splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const {
    if (restore_residual) return Featurizer::splice(base, source, features);
    check_splice(base, source);
    std::vector<float> mask(feature_dim(), 0.0f);
    for (auto i : features) mask[i] = 1.0f;
    const Tensor fb = encode(base);
    const Tensor fs = encode(source);
    return decode(add(fb, mul_row(sub(fs, fb), Tensor({feature_dim()}, std::move(mask)))));
}

// ---- persistence ------------------------------------------------------------

void save_featurizer(const FeatureHandle& handle, const std::filesystem::path& cdl,
                     const std::filesystem::path& sidecar, const std::string& meta_json) {
    handle.validate();
    nlohmann::json meta = nlohmann::json::parse(meta_json);
    if (!meta.is_object()) throw SpecError("featurizer metadata must be a JSON object");
    const Featurizer& f = *handle.featurizer;
    std::vector<NamedTensor> tensors;
    meta["method"] = f.method();
    meta["layer"] = handle.layer;
    meta["features"] = handle.features;
    meta["input_dim"] = f.input_dim();
    if (auto* p = dynamic_cast<const PcaFeaturizer*>(&f)) {
        tensors = {{"mean", p->mean()}, {"scale", p->scale()}, {"components", p->components()}};
        meta["variances"] = p->variances();
    } else if (auto* o = dynamic_cast<const OrthogonalFeaturizer*>(&f)) {
        tensors = {{"basis", o->basis()}};
        meta["k"] = o->k();
    } else if (auto* m = dynamic_cast<const MaskFeaturizer*>(&f)) {
        tensors = {{"mask_logits", m->mask_logits()}};
        meta["temperature"] = m->temperature();
    } else if (auto* s = dynamic_cast<const SaeFeaturizer*>(&f)) {
        tensors = {{"w1", s->w1()}, {"b1", s->b1()}, {"w2", s->w2()}, {"b2", s->b2()}};
        meta["recon_error"] = s->recon_error;
        meta["active_fraction"] = s->active_fraction;
        meta["restore_residual"] = s->restore_residual;
    } else if (f.method() != "identity") {
        throw ContractError("cannot save featurizer of kind '" + f.method() + "'");
    }
    save_checkpoint(cdl, tensors);
    write_file_atomic(sidecar, meta.dump(2) + "\n");
}

FeatureHandle load_featurizer(const std::filesystem::path& cdl, const std::filesystem::path& sidecar) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(sidecar));
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(sidecar.string() + ": " + e.what());
    }
    const auto tensors = load_checkpoint(cdl);
    FeatureHandle h;
    try {
        const std::string method = meta.at("method");
        h.layer = meta.at("layer");
        h.features = meta.at("features").get<std::vector<std::size_t>>();
        if (method == "pca") {
            h.featurizer = std::make_shared<PcaFeaturizer>(find_tensor(tensors, "mean"), find_tensor(tensors, "scale"),
                                                           find_tensor(tensors, "components"),
                                                           meta.at("variances").get<std::vector<double>>());
        } else if (method == "rlap" || method == "das" || method == "mdas") {
            h.featurizer =
                std::make_shared<OrthogonalFeaturizer>(method, find_tensor(tensors, "basis"), meta.at("k").get<std::size_t>());
        } else if (method == "dbm" || method == "mdbm") {
            h.featurizer = std::make_shared<MaskFeaturizer>(method, find_tensor(tensors, "mask_logits"),
                                                            meta.at("temperature").get<double>());
        } else if (method == "sae") {
            auto s = std::make_shared<SaeFeaturizer>(find_tensor(tensors, "w1"), find_tensor(tensors, "b1"),
                                                     find_tensor(tensors, "w2"), find_tensor(tensors, "b2"));
            s->recon_error = meta.at("recon_error");
            s->active_fraction = meta.at("active_fraction");
            s->restore_residual = meta.at("restore_residual");
            h.featurizer = s;
        } else if (method == "identity") {
            h.featurizer = std::make_shared<IdentityFeaturizer>(meta.at("input_dim").get<std::size_t>());
        } else {
            throw SpecError(sidecar.string() + ": unknown featurizer method '" + method + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(sidecar.string() + ": " + e.what());
    }
    h.validate();
    return h;
}

}  // namespace dbench
