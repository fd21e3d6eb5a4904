#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dbench/tensor.h"

namespace dbench {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename T>
bool is_scalar_like(const BasicTensor<T>& t) { return t.numel() == 1; }

enum class Bcast { equal, left_scalar, right_scalar };

template <typename T>
Bcast broadcast_kind(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::equal;
    if (is_scalar_like(b)) return Bcast::right_scalar;
    if (is_scalar_like(a)) return Bcast::left_scalar;
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

template <typename T, typename Fwd>
BasicTensor<T> unary(const BasicTensor<T>& a, Fwd fwd, std::type_identity_t<std::function<T(T x, T y)>> dydx) {
    auto x = a.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
    if (!a.requires_grad()) return BasicTensor<T>(a.shape(), std::move(out));
    auto y_copy = out;
    std::vector<T> x_copy(x.begin(), x.end());
    return make_op<T>(a.shape(), std::move(out), {a},
                   [x_copy = std::move(x_copy), y_copy = std::move(y_copy), dydx](
                       std::span<const T> g, std::span<std::span<T>> in) {
                       if (in[0].empty()) return;
                       for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * dydx(x_copy[i], y_copy[i]);
                   });
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const auto m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n);
    MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), k, n);
    return make_op<T>({m, n}, std::move(out), {a, b},
                   [a, b, m, k, n](std::span<const T> g, std::span<std::span<T>> in) {
                       CMap<T> G(g.data(), m, n);
                       if (!in[0].empty())
                           MMap<T>(in[0].data(), m, k).noalias() += G * CMap<T>(b.data().data(), k, n).transpose();
                       if (!in[1].empty())
                           MMap<T>(in[1].data(), k, n).noalias() += CMap<T>(a.data().data(), m, k).transpose() * G;
                   });
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    const auto m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    std::vector<T> out(m * n);
    MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), n, k).transpose();
    return make_op<T>({m, n}, std::move(out), {a, b},
                   [a, b, m, k, n](std::span<const T> g, std::span<std::span<T>> in) {
                       CMap<T> G(g.data(), m, n);
                       if (!in[0].empty())
                           MMap<T>(in[0].data(), m, k).noalias() += G * CMap<T>(b.data().data(), n, k);
                       if (!in[1].empty())
                           MMap<T>(in[1].data(), n, k).noalias() += G.transpose() * CMap<T>(a.data().data(), m, k);
                   });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    require_matrix(a, "transpose");
    const auto m = a.rows(), n = a.cols();
    std::vector<T> out(m * n);
    MMap<T>(out.data(), n, m) = CMap<T>(a.data().data(), m, n).transpose();
    return make_op<T>({n, m}, std::move(out), {a}, [m, n](std::span<const T> g, std::span<std::span<T>> in) {
        if (!in[0].empty()) MMap<T>(in[0].data(), m, n) += CMap<T>(g.data(), n, m).transpose();
    });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const auto kind = broadcast_kind(a, b, "add");
    const BasicTensor<T>& big = kind == Bcast::left_scalar ? b : a;
    const BasicTensor<T>& small = kind == Bcast::left_scalar ? a : b;
    auto x = big.data();
    auto y = small.data();
    std::vector<T> out(x.size());
    if (kind == Bcast::equal) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[0];
    }
    const bool swapped = kind == Bcast::left_scalar;
    return make_op<T>(big.shape(), std::move(out), {a, b},
                   [kind, swapped](std::span<const T> g, std::span<std::span<T>> in) {
                       auto gbig = in[swapped ? 1 : 0];
                       auto gsmall = in[swapped ? 0 : 1];
                       if (!gbig.empty())
                           for (std::size_t i = 0; i < g.size(); ++i) gbig[i] += g[i];
                       if (gsmall.empty()) return;
                       if (kind == Bcast::equal) {
                           for (std::size_t i = 0; i < g.size(); ++i) gsmall[i] += g[i];
                       } else {
                           double s = 0;
                           for (T v : g) s += v;
                           gsmall[0] += static_cast<T>(s);
                       }
                   });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) return add(a, scale(b, -T(1)));
    auto x = a.data();
    auto y = b.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return make_op<T>(a.shape(), std::move(out), {a, b}, [](std::span<const T> g, std::span<std::span<T>> in) {
        if (!in[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
        if (!in[1].empty())
            for (std::size_t i = 0; i < g.size(); ++i) in[1][i] -= g[i];
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const auto kind = broadcast_kind(a, b, "mul");
    const bool swapped = kind == Bcast::left_scalar;
    const BasicTensor<T>& big = swapped ? b : a;
    const BasicTensor<T>& small = swapped ? a : b;
    auto x = big.data();
    auto y = small.data();
    std::vector<T> out(x.size());
    if (kind == Bcast::equal) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[0];
    }
    return make_op<T>(big.shape(), std::move(out), {a, b},
                   [big, small, kind, swapped](std::span<const T> g, std::span<std::span<T>> in) {
                       auto gbig = in[swapped ? 1 : 0];
                       auto gsmall = in[swapped ? 0 : 1];
                       auto x = big.data();
                       auto y = small.data();
                       if (kind == Bcast::equal) {
                           if (!gbig.empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gbig[i] += g[i] * y[i];
                           if (!gsmall.empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gsmall[i] += g[i] * x[i];
                       } else {
                           if (!gbig.empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gbig[i] += g[i] * y[0];
                           if (!gsmall.empty()) {
                               double s = 0;
                               for (std::size_t i = 0; i < g.size(); ++i) s += double(g[i]) * x[i];
                               gsmall[0] += static_cast<T>(s);
                           }
                       }
                   });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, std::type_identity_t<T> s) {
    auto x = a.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
    return make_op<T>(a.shape(), std::move(out), {a}, [s](std::span<const T> g, std::span<std::span<T>> in) {
        if (in[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * s;
    });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
    return unary(a, [](T v) { return v > T(0) ? v : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> logistic(const BasicTensor<T>& a) {
    return unary(
        a,
        [](T v) {
            // Split by sign so exp never overflows.
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a) {
    return unary(a, [](T v) { return std::fabs(v); },
                 [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? -T(1) : T(0)); });
}

template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, std::span<const BasicTensor<T>> inputs, std::type_identity_t<T> factor) {
    const std::size_t arity = (op == ElementwiseOp::add || op == ElementwiseOp::mul) ? 2 : 1;
    if (inputs.size() != arity) {
        throw ContractError("elementwise: expected " + std::to_string(arity) + " inputs, got " +
                            std::to_string(inputs.size()));
    }
    switch (op) {
        case ElementwiseOp::add: return add(inputs[0], inputs[1]);
        case ElementwiseOp::mul: return mul(inputs[0], inputs[1]);
        case ElementwiseOp::relu: return relu(inputs[0]);
        case ElementwiseOp::logistic: return logistic(inputs[0]);
        case ElementwiseOp::scale: return scale(inputs[0], factor);
    }
    throw ContractError("elementwise: unknown op");
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    double s = 0;
    for (T v : a.data()) s += v;
    return make_op<T>({}, {static_cast<T>(s)}, {a}, [](std::span<const T> g, std::span<std::span<T>> in) {
        if (in[0].empty()) return;
        for (auto& v : in[0]) v += g[0];
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    if (a.numel() == 0) throw ContractError("mean of empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& row) {
    require_matrix(x, "add_row");
    const auto m = x.rows(), n = x.cols();
    if (row.numel() != n) throw DimensionError("add_row: row length " + std::to_string(row.numel()) + " vs " + std::to_string(n));
    auto xv = x.data();
    auto rv = row.data();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + rv[j];
    return make_op<T>(x.shape(), std::move(out), {x, row}, [m, n](std::span<const T> g, std::span<std::span<T>> in) {
        if (!in[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
        if (!in[1].empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) in[1][j] += g[i * n + j];
    });
}

template <typename T>
BasicTensor<T> mul_row(const BasicTensor<T>& x, const BasicTensor<T>& row) {
    require_matrix(x, "mul_row");
    const auto m = x.rows(), n = x.cols();
    if (row.numel() != n) throw DimensionError("mul_row: row length " + std::to_string(row.numel()) + " vs " + std::to_string(n));
    auto xv = x.data();
    auto rv = row.data();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * rv[j];
    return make_op<T>(x.shape(), std::move(out), {x, row},
                   [x, row, m, n](std::span<const T> g, std::span<std::span<T>> in) {
                       auto xv = x.data();
                       auto rv = row.data();
                       if (!in[0].empty())
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) in[0][i * n + j] += g[i * n + j] * rv[j];
                       if (!in[1].empty())
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) in[1][j] += g[i * n + j] * xv[i * n + j];
                   });
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
    require_matrix(x, "gather_rows");
    const auto m = x.rows(), n = x.cols();
    std::vector<T> out(rows.size() * n);
    auto xv = x.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m) throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " >= " + std::to_string(m));
        std::copy_n(xv.begin() + rows[i] * n, n, out.begin() + i * n);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_op<T>({rows.size(), n}, std::move(out), {x},
                   [idx = std::move(idx), n](std::span<const T> g, std::span<std::span<T>> in) {
                       if (in[0].empty()) return;
                       for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t j = 0; j < n; ++j) in[0][idx[i] * n + j] += g[i * n + j];
                   });
}

template <typename T>
BasicTensor<T> scatter_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows, const BasicTensor<T>& replacement) {
    require_matrix(x, "scatter_rows");
    require_matrix(replacement, "scatter_rows");
    const auto m = x.rows(), n = x.cols();
    if (replacement.cols() != n || replacement.rows() != rows.size()) {
        throw DimensionError("scatter_rows: replacement " + shape_str(replacement.shape()) + " for " +
                             std::to_string(rows.size()) + " rows of width " + std::to_string(n));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    std::vector<char> replaced(m, 0);
    auto rv = replacement.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m) throw IndexError("scatter_rows: row " + std::to_string(rows[i]) + " >= " + std::to_string(m));
        if (replaced[rows[i]]) throw ContractError("scatter_rows: row " + std::to_string(rows[i]) + " replaced twice");
        replaced[rows[i]] = 1;
        std::copy_n(rv.begin() + i * n, n, out.begin() + rows[i] * n);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_op<T>(x.shape(), std::move(out), {x, replacement},
                   [idx = std::move(idx), replaced = std::move(replaced), n](std::span<const T> g,
                                                                            std::span<std::span<T>> in) {
                       if (!in[0].empty())
                           for (std::size_t r = 0; r < replaced.size(); ++r)
                               if (!replaced[r])
                                   for (std::size_t j = 0; j < n; ++j) in[0][r * n + j] += g[r * n + j];
                       if (!in[1].empty())
                           for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j) in[1][i * n + j] += g[idx[i] * n + j];
                   });
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, std::type_identity_t<T> eps) {
    require_matrix(x, "rms_norm");
    const auto m = x.rows(), n = x.cols();
    if (gain.numel() != n) throw DimensionError("rms_norm: gain length mismatch");
    auto xv = x.data();
    auto gv = gain.data();
    std::vector<T> out(m * n), xhat(m * n), inv_rms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += double(xv[i * n + j]) * xv[i * n + j];
        const T r = T(1) / std::sqrt(static_cast<T>(ss / n) + eps);
        inv_rms[i] = r;
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = xv[i * n + j] * r;
            out[i * n + j] = xhat[i * n + j] * gv[j];
        }
    }
    return make_op<T>(x.shape(), std::move(out), {x, gain},
                   [gain, xhat = std::move(xhat), inv_rms = std::move(inv_rms), m, n](
                       std::span<const T> g, std::span<std::span<T>> in) {
                       auto gv = gain.data();
                       if (!in[1].empty())
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) in[1][j] += g[i * n + j] * xhat[i * n + j];
                       if (in[0].empty()) return;
                       for (std::size_t i = 0; i < m; ++i) {
                           double dot = 0;
                           for (std::size_t j = 0; j < n; ++j) dot += double(g[i * n + j]) * gv[j] * xhat[i * n + j];
                           const T c = static_cast<T>(dot / n);
                           for (std::size_t j = 0; j < n; ++j)
                               in[0][i * n + j] += (g[i * n + j] * gv[j] - xhat[i * n + j] * c) * inv_rms[i];
                       }
                   });
}

template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v, std::span<const std::size_t> seq_offsets,
                        std::size_t n_heads) {
    require_matrix(q, "causal_attention");
    if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("causal_attention: q/k/v shapes differ");
    const auto total = q.rows(), d = q.cols();
    if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_attention: d not divisible by heads");
    if (seq_offsets.size() < 2 || seq_offsets.front() != 0 || seq_offsets.back() != total)
        throw DimensionError("causal_attention: offsets do not cover the packed rows");
    const auto dh = d / n_heads;
    const T scale_f = T(1) / std::sqrt(static_cast<T>(dh));
    auto qv = q.data(), kv = k.data(), vv = v.data();
    std::vector<T> out(total * d, T(0));

    // probs[h][i] holds the softmax row for query i restricted to its sequence prefix.
    std::vector<std::size_t> row_start(total);
    std::size_t prob_size = 0;
    for (std::size_t s = 0; s + 1 < seq_offsets.size(); ++s) {
        for (std::size_t i = seq_offsets[s]; i < seq_offsets[s + 1]; ++i) {
            row_start[i] = prob_size;
            prob_size += i - seq_offsets[s] + 1;
        }
    }
    std::vector<T> probs(prob_size * n_heads);
    std::vector<std::size_t> seq_begin(total);
    for (std::size_t s = 0; s + 1 < seq_offsets.size(); ++s)
        for (std::size_t i = seq_offsets[s]; i < seq_offsets[s + 1]; ++i) seq_begin[i] = seq_offsets[s];

    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        T* P = probs.data() + h * prob_size;
        for (std::size_t i = 0; i < total; ++i) {
            const std::size_t b = seq_begin[i];
            T* p = P + row_start[i];
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = b; j <= i; ++j) {
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += qv[i * d + off + c] * kv[j * d + off + c];
                s *= scale_f;
                p[j - b] = s;
                mx = std::max(mx, s);
            }
            T z = 0;
            for (std::size_t j = b; j <= i; ++j) {
                p[j - b] = std::exp(p[j - b] - mx);
                z += p[j - b];
            }
            const T iz = T(1) / z;
            for (std::size_t j = b; j <= i; ++j) {
                p[j - b] *= iz;
                const T w = p[j - b];
                for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += w * vv[j * d + off + c];
            }
        }
    }
    return make_op<T>(q.shape(), std::move(out), {q, k, v},
                   [q, k, v, probs = std::move(probs), row_start = std::move(row_start),
                    seq_begin = std::move(seq_begin), prob_size, total, d, dh, n_heads,
                    scale_f](std::span<const T> g, std::span<std::span<T>> in) {
                       auto qv = q.data(), kv = k.data(), vv = v.data();
                       auto gq = in[0], gk = in[1], gv = in[2];
                       std::vector<T> dp;
                       for (std::size_t h = 0; h < n_heads; ++h) {
                           const std::size_t off = h * dh;
                           const T* P = probs.data() + h * prob_size;
                           for (std::size_t i = 0; i < total; ++i) {
                               const std::size_t b = seq_begin[i];
                               const std::size_t len = i - b + 1;
                               const T* p = P + row_start[i];
                               dp.assign(len, T(0));
                               T dot = 0;
                               for (std::size_t j = b; j <= i; ++j) {
                                   T s = 0;
                                   for (std::size_t c = 0; c < dh; ++c) s += g[i * d + off + c] * vv[j * d + off + c];
                                   dp[j - b] = s;
                                   dot += s * p[j - b];
                                   if (!gv.empty())
                                       for (std::size_t c = 0; c < dh; ++c)
                                           gv[j * d + off + c] += p[j - b] * g[i * d + off + c];
                               }
                               for (std::size_t j = b; j <= i; ++j) {
                                   const T ds = p[j - b] * (dp[j - b] - dot) * scale_f;
                                   if (ds == T(0)) continue;
                                   if (!gq.empty())
                                       for (std::size_t c = 0; c < dh; ++c) gq[i * d + off + c] += ds * kv[j * d + off + c];
                                   if (!gk.empty())
                                       for (std::size_t c = 0; c < dh; ++c) gk[j * d + off + c] += ds * qv[i * d + off + c];
                               }
                           }
                       }
                   });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
    require_matrix(logits, "softmax_cross_entropy");
    const auto b = logits.rows(), V = logits.cols();
    if (targets.size() != b) throw DimensionError("softmax_cross_entropy: target count mismatch");
    if (b == 0) throw ContractError("softmax_cross_entropy: empty batch");
    auto lv = logits.data();
    std::vector<T> probs(b * V);
    double total = 0;
    for (std::size_t i = 0; i < b; ++i) {
        const int t = targets[i];
        if (t < 0 || static_cast<std::size_t>(t) >= V)
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(V) + ")");
        const T* row = lv.data() + i * V;
        const T mx = *std::max_element(row, row + V);
        double z = 0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(double(row[j]) - mx);
        const double lz = std::log(z) + mx;
        total += lz - row[t];
        for (std::size_t j = 0; j < V; ++j) probs[i * V + j] = static_cast<T>(std::exp(double(row[j]) - lz));
    }
    std::vector<int> tg(targets.begin(), targets.end());
    return make_op<T>({}, {static_cast<T>(total / b)}, {logits},
                   [probs = std::move(probs), tg = std::move(tg), b, V](std::span<const T> g,
                                                                        std::span<std::span<T>> in) {
                       if (in[0].empty()) return;
                       const T s = g[0] / static_cast<T>(b);
                       for (std::size_t i = 0; i < b; ++i) {
                           for (std::size_t j = 0; j < V; ++j) in[0][i * V + j] += s * probs[i * V + j];
                           in[0][i * V + tg[i]] -= s;
                       }
                   });
}

#define DBENCH_INSTANTIATE(T)                                                                              \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                       \
    template BasicTensor<T> transpose(const BasicTensor<T>&);                                              \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> scale(const BasicTensor<T>&, std::type_identity_t<T>);                         \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> logistic(const BasicTensor<T>&);                                               \
    template BasicTensor<T> abs(const BasicTensor<T>&);                                                    \
    template BasicTensor<T> elementwise(ElementwiseOp, std::span<const BasicTensor<T>>, std::type_identity_t<T>); \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                    \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> add_row(const BasicTensor<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> mul_row(const BasicTensor<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);              \
    template BasicTensor<T> scatter_rows(const BasicTensor<T>&, std::span<const std::size_t>, const BasicTensor<T>&); \
    template BasicTensor<T> rms_norm(const BasicTensor<T>&, const BasicTensor<T>&, std::type_identity_t<T>); \
    template BasicTensor<T> causal_attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                             std::span<const std::size_t>, std::size_t);                   \
    template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);

DBENCH_INSTANTIATE(float)
DBENCH_INSTANTIATE(double)

}  // namespace dbench
