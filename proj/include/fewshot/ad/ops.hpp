#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "fewshot/ad/var.hpp"

// Differentiable primitives. Every backward rule is written in terms of these same
// primitives, so gradients recorded with create_graph can be differentiated again.
namespace fewshot::ad {

// Elementwise arithmetic. Operands of equal rank broadcast over size-1 axes; a
// single-element operand broadcasts against anything.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double value);
Var square(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& x) { return neg(x); }

Var exp(const Var& x);
Var log(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var pow(const Var& x, double exponent);

enum class Activation { relu, selu, elu, mish, identity };

Var relu(const Var& x);
Var elu(const Var& x, double alpha = 1.0);
Var selu(const Var& x);
Var mish(const Var& x);
Var activate(const Var& x, Activation act);

// Shape manipulation and reductions.
Var reshape(const Var& x, Shape shape);
Var flatten(const Var& x); // (B, ...) -> (B, rest)
Var broadcast_to(const Var& x, const Shape& shape);
Var sum_to(const Var& x, const Shape& shape);
Var sum(const Var& x);
Var mean(const Var& x);
Var transpose(const Var& x);
Var matmul(const Var& a, const Var& b);
Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& x, std::size_t begin, std::size_t end);
Var embed_channels(const Var& x, std::size_t begin, std::size_t total);

// 1-D convolution (cross-correlation, stride 1) of x (B, Cin, L) with w (Cout, Cin, K).
// Output length is L + pad_left + pad_right - K + 1.
Var conv1d(const Var& x, const Var& w, std::size_t pad_left, std::size_t pad_right);
Var conv1d_same(const Var& x, const Var& w);
Var conv1d_valid(const Var& x, const Var& w);
// Gradient of conv1d with respect to its kernel, as a differentiable operation.
Var conv1d_weight_grad(const Var& x, const Var& grad_out, std::size_t kernel, std::size_t pad_left);
// (Cout, Cin, K) -> (Cin, Cout, K) with the kernel axis reversed.
Var flip_transpose(const Var& w);

using TimeIndex = std::shared_ptr<const std::vector<std::uint32_t>>;
// y[b, c, t] = x[b, c, index[b, c, t]]
Var gather_time(const Var& x, const TimeIndex& index, std::size_t out_length);
// Adjoint of gather_time: accumulates g[b, c, t] into out[b, c, index[b, c, t]].
Var scatter_time(const Var& g, const TimeIndex& index, std::size_t in_length);

// Max pooling over time; padded positions never win.
Var max_pool1d(const Var& x, std::size_t kernel, std::size_t stride, std::size_t pad);
// Non-overlapping average pooling (stride == kernel), trailing remainder dropped.
Var avg_pool1d(const Var& x, std::size_t kernel);
// Adjoint of avg_pool1d.
Var avg_unpool1d(const Var& g, std::size_t kernel, std::size_t in_length);
// (B, C, L) -> (B, C)
Var global_avg_pool(const Var& x);

// Normalization over every axis except axis 1, using the statistics of this batch.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var dropout(const Var& x, double rate, std::mt19937_64& rng);
// x (B, in) @ w (in, out) + b (out)
Var affine(const Var& x, const Var& w, const Var& b);

// Row-wise operations on (rows, cols) matrices.
Var softmax(const Var& x);
Var log_softmax(const Var& x);
// Rows that are exactly zero are shifted by 1e-12 before normalizing.
Var l2_normalize(const Var& x);
// (Q, D) x (C, D) -> (Q, C)
Var sq_euclidean(const Var& a, const Var& b);
Var cosine_similarity(const Var& a, const Var& b);

// Mean categorical cross-entropy of (rows, classes) logits against class indices.
Var cross_entropy_with_logits(const Var& logits, std::span<const int> targets);
// Mean binary cross-entropy of logits against {0, 1} targets of the same shape.
Var bce_with_logits(const Var& logits, const Tensor& targets);

} // namespace fewshot::ad
