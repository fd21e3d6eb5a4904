#include "dbench/planted.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "dbench/errors.h"
#include "dbench/rng.h"

namespace dbench {

namespace {

constexpr float kOffVocab = -30.0f;

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor to_tensor(const MatD& m) {
    std::vector<float> v(m.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) v[std::size_t(i * m.cols() + j)] = float(m(i, j));
    return Tensor({std::size_t(m.rows()), std::size_t(m.cols())}, std::move(v));
}

// Random codes in [-s, s]^k, pairwise separated. The separation target
// shrinks until sampling succeeds.
MatD sample_codes(std::size_t n, std::size_t k, double s, Rng& rng) {
    MatD c(n, k);
    double min_dist = 2.0 * s / std::pow(double(n), 1.0 / double(k));
    for (;;) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            bool ok = true;
            for (std::size_t i = 0; i < n && ok; ++i) {
                int tries = 0;
                for (;;) {
                    for (std::size_t j = 0; j < k; ++j) c(i, j) = rng.uniform(-s, s);
                    bool far = true;
                    for (std::size_t p = 0; p < i && far; ++p) far = (c.row(i) - c.row(p)).norm() >= min_dist;
                    if (far) break;
                    if (++tries > 200) {
                        ok = false;
                        break;
                    }
                }
            }
            if (ok) return c;
        }
        min_dist *= 0.9;
    }
}

// out[i, v] = max over u with map[u] == v of parent[i, u]; kOffVocab when v
// has no preimage.
Tensor max_over_preimages(const Tensor& parent, const std::vector<int>& map, std::size_t n_child) {
    const std::size_t B = parent.rows(), np = parent.cols();
    std::vector<float> out(B * n_child, kOffVocab);
    std::vector<std::size_t> arg(B * n_child, np);
    auto pv = parent.data();
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t u = 0; u < np; ++u) {
            const std::size_t o = i * n_child + std::size_t(map[u]);
            if (arg[o] == np || pv[i * np + u] > out[o]) {
                out[o] = pv[i * np + u];
                arg[o] = u;
            }
        }
    return make_op<float>({B, n_child}, std::move(out), {parent},
                          [arg = std::move(arg), np, n_child](std::span<const float> g, std::span<std::span<float>> in) {
                              if (in[0].empty()) return;
                              for (std::size_t o = 0; o < arg.size(); ++o)
                                  if (arg[o] < np) in[0][(o / n_child) * np + arg[o]] += g[o];
                          });
}

}  // namespace

PlantedModel::PlantedModel(const World& world, const PlantedConfig& cfg) : cfg_(cfg) {
    const std::size_t n_attr = world.attributes.size();
    const std::size_t d = cfg.site_dim;
    if (n_attr == 0) throw SpecError("planted model needs at least one attribute");
    std::vector<std::size_t> dims = cfg.dims.empty() ? std::vector<std::size_t>(n_attr, 2) : cfg.dims;
    if (dims.size() != n_attr)
        throw SpecError("planted model: " + std::to_string(dims.size()) + " subspace dims for " +
                        std::to_string(n_attr) + " attributes");
    if (!(cfg.overlap_deg > 0.0 && cfg.overlap_deg <= 90.0))
        throw SpecError("planted model: overlap angle must lie in (0, 90] degrees");

    parent_.assign(n_attr, -1);
    map_.resize(n_attr);
    for (std::size_t a = 0; a < n_attr; ++a) {
        const auto& attr = world.attributes[a];
        offset_.push_back(vocab_.size());
        for (const auto& v : attr.values) {
            token_id_.emplace(v, int(vocab_.size()));
            vocab_.push_back(v);
        }
        if (cfg.derived_readouts && attr.dependency == Dependency::function_of) {
            parent_[a] = attr.parent;
            map_[a] = attr.map;
            dims[a] = 0;
        } else if (dims[a] == 0) {
            throw SpecError("planted model: stored attribute '" + attr.name + "' needs a nonzero subspace");
        }
    }

    std::size_t used = 0;
    for (auto k : dims) used += k;
    if (used > d)
        throw DimensionError("planted subspaces need " + std::to_string(used) + " dims but the site has " +
                             std::to_string(d));

    // Stacked basis S [K, d]: one axis block per stored attribute, the second
    // stored block tilted toward the first by the overlap angle.
    MatD S = MatD::Zero(Eigen::Index(used), Eigen::Index(d));
    std::vector<std::size_t> row0(n_attr, 0);
    const double theta = cfg.overlap_deg * std::numbers::pi / 180.0;
    std::size_t r = 0;
    int first = -1, stored = 0;
    for (std::size_t a = 0; a < n_attr; ++a) {
        row0[a] = r;
        if (dims[a] == 0) continue;
        for (std::size_t i = 0; i < dims[a]; ++i) {
            const auto row = Eigen::Index(r + i);
            if (stored == 1 && i < dims[std::size_t(first)]) {
                S(row, Eigen::Index(row0[std::size_t(first)] + i)) = std::cos(theta);
                S(row, Eigen::Index(r + i)) = std::sin(theta);
            } else {
                S(row, Eigen::Index(r + i)) = 1.0;
            }
        }
        if (stored == 0) first = int(a);
        ++stored;
        r += dims[a];
    }
    // Dual basis R = S^T (S S^T)^-1, so that x R recovers the stacked codes.
    const MatD R = S.transpose() * (S * S.transpose()).inverse();

    Rng code_rng(derive_seed(cfg.seed, "planted/codes"));
    basis_.resize(n_attr);
    dual_.resize(n_attr);
    codes_.resize(n_attr);
    code_sq_.resize(n_attr);
    std::vector<MatD> codes(n_attr);
    for (std::size_t a = 0; a < n_attr; ++a) {
        const auto k = Eigen::Index(dims[a]), r0 = Eigen::Index(row0[a]);
        basis_[a] = to_tensor(S.middleRows(r0, k));
        dual_[a] = to_tensor(R.middleCols(r0, k));
        if (k == 0) continue;
        codes[a] = sample_codes(world.attributes[a].values.size(), dims[a], cfg.code_scale, code_rng);
        codes_[a] = to_tensor(codes[a]);
        MatD sq = codes[a].rowwise().squaredNorm().transpose();
        code_sq_[a] = to_tensor(sq).reshape({std::size_t(sq.cols())});
    }

    Rng noise_rng(derive_seed(cfg.seed, "planted/noise"));
    MatD X = MatD::Zero(Eigen::Index(world.entities.size()), Eigen::Index(d));
    for (std::size_t e = 0; e < world.entities.size(); ++e) {
        for (std::size_t a = 0; a < n_attr; ++a) {
            if (dims[a] == 0) continue;
            const auto k = Eigen::Index(dims[a]);
            X.row(Eigen::Index(e)) +=
                codes[a].row(world.entities[e].values[a]) * S.middleRows(Eigen::Index(row0[a]), k);
        }
        for (std::size_t j = used; j < d; ++j) X(Eigen::Index(e), Eigen::Index(j)) = cfg.noise * noise_rng.normal();
    }
    table_ = to_tensor(X);

    n_templates_ = world.templates.size();
    context_.assign(world.entities.size() * n_templates_ * d, 0.0f);
    Rng ctx_rng(derive_seed(cfg.seed, "planted/context"));
    for (std::size_t i = 0; i < world.entities.size() * n_templates_; ++i)
        for (std::size_t j = used; j < d; ++j) context_[i * d + j] = float(cfg.context_noise * ctx_rng.normal());
}

Prompt PlantedModel::make_prompt(const World& world, int entity, int tmpl) const {
    if (entity < 0 || std::size_t(entity) >= world.entities.size() || std::size_t(entity) >= table_.rows())
        throw IndexError("planted model: entity " + std::to_string(entity) + " out of range");
    if (tmpl < 0 || std::size_t(tmpl) >= world.templates.size() || std::size_t(tmpl) >= n_templates_)
        throw IndexError("planted model: template " + std::to_string(tmpl) + " out of range");
    Prompt p;
    p.tokens = {0};
    p.entity_begin = 0;
    p.entity_end = 1;
    p.entity = entity;
    p.tmpl = tmpl;
    p.attribute = world.templates[std::size_t(tmpl)].attribute;
    return p;
}

int PlantedModel::label_token(const Prompt&, const std::string& value) const {
    auto it = token_id_.find(value);
    if (it == token_id_.end()) throw IndexError("planted model: '" + value + "' is not a value token");
    return it->second;
}

Tensor PlantedModel::site_values(std::span<const Prompt> prompts, std::size_t layer) const {
    if (layer != 0) throw IndexError("planted model has a single site (layer 0), got layer " + std::to_string(layer));
    const std::size_t d = cfg_.site_dim;
    std::vector<float> out(prompts.size() * d);
    auto tv = table_.data();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto e = std::size_t(prompts[i].entity), t = std::size_t(prompts[i].tmpl);
        const float* ctx = &context_[(e * n_templates_ + t) * d];
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = tv[e * d + j] + ctx[j];
    }
    return Tensor({prompts.size(), d}, std::move(out));
}

Tensor PlantedModel::readout(const Tensor& x, int a) const {
    if (parent_[std::size_t(a)] >= 0)
        return max_over_preimages(readout(x, parent_[std::size_t(a)]), map_[std::size_t(a)],
                                  vocab_size_of(std::size_t(a)));
    // beta * (2 c_hat . c - |c|^2): argmax is the nearest code.
    const Tensor c_hat = matmul(x, dual_[std::size_t(a)]);
    const Tensor cross = scale(matmul_nt(c_hat, codes_[std::size_t(a)]), 2.0f);
    return scale(add_row(cross, scale(code_sq_[std::size_t(a)], -1.0f)), float(cfg_.readout_beta));
}

std::size_t PlantedModel::vocab_size_of(std::size_t a) const {
    return (a + 1 < offset_.size() ? offset_[a + 1] : vocab_.size()) - offset_[a];
}

Tensor PlantedModel::next_logits(std::span<const Prompt> prompts, const Splice* splice) const {
    Tensor x = site_values(prompts, 0);
    if (splice) {
        if (splice->layer != 0)
            throw IndexError("planted model has a single site (layer 0), got layer " + std::to_string(splice->layer));
        x = splice->edit(x);
        if (x.rank() != 2 || x.rows() != prompts.size() || x.cols() != site_dim())
            throw DimensionError("splice returned " + shape_str(x.shape()));
    }
    const std::size_t B = prompts.size(), V = vocab_.size(), n_attr = offset_.size();
    std::vector<int> queried(n_attr, 0);
    for (const auto& p : prompts)
        if (p.attribute >= 0) queried[std::size_t(p.attribute)] = 1;

    std::vector<Tensor> parts;
    std::vector<int> part_of(n_attr, -1);
    for (std::size_t a = 0; a < n_attr; ++a) {
        if (!queried[a]) continue;
        part_of[a] = int(parts.size());
        parts.push_back(readout(x, int(a)));
    }

    std::vector<float> out(B * V, kOffVocab);
    for (std::size_t i = 0; i < B; ++i) {
        const int a = prompts[i].attribute;
        if (a < 0) continue;
        const Tensor& part = parts[std::size_t(part_of[std::size_t(a)])];
        const std::size_t n = part.cols();
        std::copy_n(part.data().begin() + i * n, n, out.begin() + i * V + offset_[std::size_t(a)]);
    }
    std::vector<int> attr(B);
    for (std::size_t i = 0; i < B; ++i) attr[i] = prompts[i].attribute;
    std::vector<std::size_t> offs = offset_;
    return make_op<float>({B, V}, std::move(out), parts,
                          [attr = std::move(attr), part_of, offs = std::move(offs), parts_n = [&] {
                              std::vector<std::size_t> n;
                              for (const auto& p : parts) n.push_back(p.cols());
                              return n;
                          }(),
                           V](std::span<const float> g, std::span<std::span<float>> in) {
                              for (std::size_t i = 0; i < attr.size(); ++i) {
                                  if (attr[i] < 0) continue;
                                  const auto pi = std::size_t(part_of[std::size_t(attr[i])]);
                                  if (in[pi].empty()) continue;
                                  const std::size_t n = parts_n[pi];
                                  for (std::size_t v = 0; v < n; ++v)
                                      in[pi][i * n + v] += g[i * V + offs[std::size_t(attr[i])] + v];
                              }
                          });
}

}  // namespace dbench
