#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dbench/errors.h"

namespace dbench {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
template <typename T>
struct Node;
}

// Dense row-major tensor handle. Copies share the underlying node; values are
// immutable after creation except through data_mut() on leaves, which the
// optimizer uses for parameter updates. Production code uses the f32 alias
// Tensor; the f64 instantiation exists for finite-difference checking.
template <typename T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() = default;
    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor scalar(T value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const;
    std::size_t rows() const;  // rank-2 helpers
    std::size_t cols() const;

    std::span<const T> data() const;
    std::span<T> data_mut();
    T item() const;
    T at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const T> grad() const;
    void zero_grad();

    // Value copy with no graph attached.
    BasicTensor detach() const;
    BasicTensor reshape(Shape shape) const;

    bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

   private:
    template <typename U>
    friend struct TensorAccess;
    explicit BasicTensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Element-type conversion; the result is a fresh leaf.
template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t, bool requires_grad = false) {
    return BasicTensor<To>(t.shape(), std::vector<To>(t.data().begin(), t.data().end()), requires_grad);
}

// Backward rule for a custom op: receives the output gradient and one mutable
// gradient span per input (empty when that input does not require grad).
template <typename T>
using BackwardFn = std::function<void(std::span<const T> out_grad, std::span<std::span<T>> in_grads)>;

// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};
bool grad_enabled();

// Builds a graph node from already-computed values. The op is recorded only if
// some input requires grad.
template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> value, std::vector<BasicTensor<T>> inputs,
                       BackwardFn<T> backward);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
template <typename T>
void backward(const BasicTensor<T>& loss);

// ---- ops -------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);     // [m,k] x [k,n]
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);  // [m,k] x [n,k]^T
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, std::type_identity_t<T> s);
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> logistic(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a);

enum class ElementwiseOp { add, mul, relu, logistic, scale };
template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, std::span<const BasicTensor<T>> inputs, std::type_identity_t<T> factor = T(1));
template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const std::vector<BasicTensor<T>>& inputs,
                           std::type_identity_t<T> factor = T(1)) {
    return elementwise<T>(op, std::span<const BasicTensor<T>>(inputs), factor);
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a);

// Row-wise broadcast of a length-n vector over an [m,n] matrix.
template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& row);
template <typename T>
BasicTensor<T> mul_row(const BasicTensor<T>& x, const BasicTensor<T>& row);

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows);
// Copy of x with rows[i] replaced by replacement row i.
template <typename T>
BasicTensor<T> scatter_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows, const BasicTensor<T>& replacement);

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, std::type_identity_t<T> eps = T(1e-5));

// Multi-head causal self-attention over packed sequences. q, k, v are
// [total_tokens, d]; seq_offsets holds n_seq + 1 ascending row offsets.
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                        std::span<const std::size_t> seq_offsets, std::size_t n_heads);

// Mean negative log-likelihood of targets under row-wise softmax of logits.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);

// Row-orthonormalizes w [k,n] by modified Gram-Schmidt. Not differentiable.
Tensor qr_orthonormalize(const Tensor& w, double tol = 1e-6);

// Extends orthonormal rows [k,n] to an orthonormal basis [n,n] whose first k
// rows are the input rows.
Tensor complete_orthonormal_basis(const Tensor& rows);

// Max-abs deviation of w w^T from the identity.
double orthonormality_error(const Tensor& w);

}  // namespace dbench
