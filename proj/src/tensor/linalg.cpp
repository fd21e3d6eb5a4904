#include <cmath>

#include "dbench/tensor.h"

namespace dbench {

Tensor qr_orthonormalize(const Tensor& w, double tol) {
    if (w.rank() != 2) throw DimensionError("qr_orthonormalize: expected a matrix, got " + shape_str(w.shape()));
    const auto k = w.rows(), n = w.cols();
    if (k > n) throw DimensionError("qr_orthonormalize: more rows than columns " + shape_str(w.shape()));
    std::vector<double> q(w.data().begin(), w.data().end());
    for (std::size_t i = 0; i < k; ++i) {
        double* vi = q.data() + i * n;
        double norm0 = 0;
        for (std::size_t c = 0; c < n; ++c) norm0 += vi[c] * vi[c];
        norm0 = std::sqrt(norm0);
        for (std::size_t j = 0; j < i; ++j) {
            const double* qj = q.data() + j * n;
            double dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += vi[c] * qj[c];
            for (std::size_t c = 0; c < n; ++c) vi[c] -= dot * qj[c];
        }
        double norm = 0;
        for (std::size_t c = 0; c < n; ++c) norm += vi[c] * vi[c];
        norm = std::sqrt(norm);
        if (norm0 == 0.0 || norm <= tol * norm0) {
            throw DegeneracyError("qr_orthonormalize: row " + std::to_string(i) + " is linearly dependent");
        }
        for (std::size_t c = 0; c < n; ++c) vi[c] /= norm;
    }
    std::vector<float> out(q.begin(), q.end());
    return Tensor(w.shape(), std::move(out));
}

Tensor complete_orthonormal_basis(const Tensor& rows) {
    const auto k = rows.rows(), n = rows.cols();
    if (k > n) throw DimensionError("complete_orthonormal_basis: more rows than columns");
    std::vector<double> basis(rows.data().begin(), rows.data().end());
    basis.reserve(n * n);
    std::vector<double> v(n);
    // Candidates are the standard basis vectors; keep the residual only when it
    // retains enough mass to be numerically independent.
    for (std::size_t e = 0; e < n && basis.size() < n * n; ++e) {
        std::fill(v.begin(), v.end(), 0.0);
        v[e] = 1.0;
        const std::size_t have = basis.size() / n;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < have; ++j) {
                const double* b = basis.data() + j * n;
                double dot = 0;
                for (std::size_t c = 0; c < n; ++c) dot += v[c] * b[c];
                for (std::size_t c = 0; c < n; ++c) v[c] -= dot * b[c];
            }
        }
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-3) continue;
        for (double x : v) basis.push_back(x / norm);
    }
    if (basis.size() != n * n) throw DegeneracyError("complete_orthonormal_basis: could not complete basis");
    return Tensor({n, n}, std::vector<float>(basis.begin(), basis.end()));
}

double orthonormality_error(const Tensor& w) {
    const auto k = w.rows(), n = w.cols();
    auto d = w.data();
    double worst = 0;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += double(d[i * n + c]) * d[j * n + c];
            worst = std::max(worst, std::fabs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

}  // namespace dbench
