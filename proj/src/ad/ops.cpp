#include "fewshot/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <string>

#include "fewshot/error.hpp"
#include "fewshot/random.hpp"

namespace fewshot::ad {

namespace {

using Grads = std::vector<Var>;

[[noreturn]] void shape_error(const char* op, const std::string& what)
{
    throw ShapeError(std::string(op) + ": " + what);
}

void require_rank(const char* op, const Var& x, std::size_t rank)
{
    if (x.shape().size() != rank) {
        shape_error(op, "expected rank " + std::to_string(rank) + ", got shape " + to_string(x.shape()));
    }
}

template <typename F>
Tensor map_values(const Tensor& x, F f)
{
    Tensor out(x.shape());
    const double* in = x.ptr();
    double* o = out.ptr();
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(in[i]);
    return out;
}

template <typename F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f)
{
    Tensor out(a.shape());
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* o = out.ptr();
    for (std::size_t i = 0; i < a.size(); ++i) o[i] = f(pa[i], pb[i]);
    return out;
}

// Strides of `in` expressed over the axes of a broadcast target (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& target)
{
    std::vector<std::size_t> strides(in.size(), 0);
    std::size_t stride = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
        strides[d] = (in[d] == 1 && target[d] != 1) ? 0 : stride;
        stride *= in[d];
    }
    return strides;
}

double* broadcast_rec(const double* in, double* out, const Shape& shape,
                      const std::vector<std::size_t>& strides, std::size_t d)
{
    const std::size_t n = shape[d];
    const std::size_t s = strides[d];
    if (d + 1 == shape.size()) {
        if (s == 0) {
            std::fill(out, out + n, *in);
        } else {
            std::copy(in, in + n, out);
        }
        return out + n;
    }
    for (std::size_t i = 0; i < n; ++i) out = broadcast_rec(in + i * s, out, shape, strides, d + 1);
    return out;
}

const double* reduce_rec(const double* in, double* out, const Shape& shape,
                         const std::vector<std::size_t>& strides, std::size_t d)
{
    const std::size_t n = shape[d];
    const std::size_t s = strides[d];
    if (d + 1 == shape.size()) {
        if (s == 0) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += in[i];
            *out += acc;
        } else {
            for (std::size_t i = 0; i < n; ++i) out[i] += in[i];
        }
        return in + n;
    }
    for (std::size_t i = 0; i < n; ++i) in = reduce_rec(in, out + i * s, shape, strides, d + 1);
    return in;
}

bool broadcastable(const Shape& small, const Shape& big)
{
    if (small.size() != big.size()) return false;
    for (std::size_t d = 0; d < small.size(); ++d) {
        if (small[d] != big[d] && small[d] != 1) return false;
    }
    return true;
}

Tensor broadcast_tensor(const Tensor& in, const Shape& target)
{
    if (in.shape() == target) return in;
    Tensor out(target);
    if (target.empty() || out.size() == 0) return out;
    broadcast_rec(in.ptr(), out.ptr(), target, broadcast_strides(in.shape(), target), 0);
    return out;
}

Tensor sum_to_tensor(const Tensor& in, const Shape& target)
{
    if (in.shape() == target) return in;
    Tensor out(target, 0.0);
    if (in.size() == 0) return out;
    reduce_rec(in.ptr(), out.ptr(), in.shape(), broadcast_strides(target, in.shape()), 0);
    return out;
}

Shape ones_like_rank(std::size_t rank) { return Shape(rank, 1); }

struct Aligned {
    Var a, b;
    Shape target;
};

// Matches operand ranks (scalars only) and computes the common broadcast shape.
Aligned align(const Var& a, const Var& b, const char* op)
{
    if (a.shape() == b.shape()) return {a, b, a.shape()};
    Var x = a;
    Var y = b;
    if (x.shape().size() != y.shape().size()) {
        if (x.size() == 1) {
            x = reshape(x, ones_like_rank(y.shape().size()));
        } else if (y.size() == 1) {
            y = reshape(y, ones_like_rank(x.shape().size()));
        } else {
            shape_error(op, "cannot broadcast " + to_string(a.shape()) + " with " + to_string(b.shape()));
        }
    }
    Shape target(x.shape().size());
    for (std::size_t d = 0; d < target.size(); ++d) {
        const std::size_t da = x.shape()[d];
        const std::size_t db = y.shape()[d];
        if (da != db && da != 1 && db != 1) {
            shape_error(op, "cannot broadcast " + to_string(a.shape()) + " with " + to_string(b.shape()));
        }
        target[d] = std::max(da, db);
    }
    return {x, y, target};
}

template <typename F>
void broadcast_zip_rec(const double* a, const double* b, double* out, const Shape& shape,
                       const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                       const std::vector<std::size_t>& so, std::size_t d, F f)
{
    const std::size_t n = shape[d];
    if (d + 1 == shape.size()) {
        if (sa[d] == 1 && sb[d] == 1) {
            for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
        } else if (sb[d] == 0) {
            const double bv = *b;
            for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i * sa[d]], bv);
        } else {
            const double av = *a;
            for (std::size_t i = 0; i < n; ++i) out[i] = f(av, b[i * sb[d]]);
        }
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        broadcast_zip_rec(a + i * sa[d], b + i * sb[d], out + i * so[d], shape, sa, sb, so, d + 1, f);
    }
}

// Elementwise f over two operands broadcast to `target` without materializing either.
template <typename F>
Tensor broadcast_zip(const Tensor& a, const Tensor& b, const Shape& target, F f)
{
    if (a.shape() == target && b.shape() == target) return zip_values(a, b, f);
    Tensor out(target);
    if (out.size() == 0) return out;
    if (target.empty()) {
        out[0] = f(a[0], b[0]);
        return out;
    }
    std::vector<std::size_t> so(target.size(), 1);
    for (std::size_t d = target.size() - 1; d-- > 0;) so[d] = so[d + 1] * target[d + 1];
    broadcast_zip_rec(a.ptr(), b.ptr(), out.ptr(), target, broadcast_strides(a.shape(), target),
                      broadcast_strides(b.shape(), target), so, 0, f);
    return out;
}

// Rows of x (batch * cin, len) copied with `left` zeros in front and zeros behind up to `width`.
std::vector<double> padded_rows(const Tensor& x, std::size_t left, std::size_t width)
{
    const std::size_t rows = x.dim(0) * x.dim(1), len = x.dim(2);
    std::vector<double> out(rows * width, 0.0);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * len, len, out.data() + r * width + left);
    return out;
}

// Eight doubles handled as one SIMD value.
typedef double Lanes __attribute__((vector_size(8 * sizeof(double))));

Lanes load_lanes(const double* p)
{
    Lanes v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

// Unpadded kernel-1 convolution: a channel mix per time step.
Tensor pointwise_conv_raw(const Tensor& x, const Tensor& w)
{
    const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2), cout = w.dim(0);
    Tensor y({batch, cout, len}, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xr = x.ptr() + (b * cin + ci) * len;
            for (std::size_t co = 0; co < cout; ++co) {
                const double wv = w[co * cin + ci];
                double* yr = y.ptr() + (b * cout + co) * len;
                for (std::size_t t = 0; t < len; ++t) yr[t] += wv * xr[t];
            }
        }
    }
    return y;
}

Tensor conv1d_raw(const Tensor& x, const Tensor& w, std::size_t pad_left, std::size_t pad_right)
{
    if (w.dim(2) == 1 && pad_left == 0 && pad_right == 0) return pointwise_conv_raw(x, w);
    constexpr std::size_t block = 32;
    const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
    const std::size_t cout = w.dim(0), kernel = w.dim(2);
    const std::size_t out_len = len + pad_left + pad_right - kernel + 1;
    // Room for a full block past the last output so the inner loop needs no bounds checks.
    const std::size_t width = out_len + kernel - 1 + block;
    const std::vector<double> xp = padded_rows(x, pad_left, width);
    Tensor y({batch, cout, out_len}, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t co = 0; co < cout; ++co) {
            double* yr = y.ptr() + (b * cout + co) * out_len;
            for (std::size_t t0 = 0; t0 < out_len; t0 += block) {
                Lanes acc[block / 8] = {};
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* xr = xp.data() + (b * cin + ci) * width + t0;
                    const double* wr = w.ptr() + (co * cin + ci) * kernel;
                    for (std::size_t k = 0; k < kernel; ++k) {
                        const double wv = wr[k];
                        for (std::size_t j = 0; j < block / 8; ++j) acc[j] += wv * load_lanes(xr + k + 8 * j);
                    }
                }
                double out[block];
                std::memcpy(out, acc, sizeof out);
                std::copy_n(out, std::min(block, out_len - t0), yr + t0);
            }
        }
    }
    return y;
}

Tensor conv1d_weight_grad_raw(const Tensor& x, const Tensor& gy, std::size_t kernel, std::size_t pad_left)
{
    if (kernel == 1 && pad_left == 0 && x.dim(2) == gy.dim(2)) {
        const std::size_t batch = x.dim(0), cin = x.dim(1), cout = gy.dim(1), len = x.dim(2);
        Tensor gw({cout, cin, 1}, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t co = 0; co < cout; ++co) {
                const double* g = gy.ptr() + (b * cout + co) * len;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* xr = x.ptr() + (b * cin + ci) * len;
                    double acc = 0.0;
                    for (std::size_t t = 0; t < len; ++t) acc += g[t] * xr[t];
                    gw[co * cin + ci] += acc;
                }
            }
        }
        return gw;
    }
    constexpr std::size_t block = 8;
    const std::size_t batch = x.dim(0), cin = x.dim(1);
    const std::size_t cout = gy.dim(1), out_len = gy.dim(2);
    const std::size_t width = out_len + kernel - 1 + block;
    const std::vector<double> xp = padded_rows(x, pad_left, width);
    Tensor gw({cout, cin, kernel}, 0.0);
    // Batch outermost so each pair of rows stays cached while every tap is accumulated.
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t co = 0; co < cout; ++co) {
            const double* g = gy.ptr() + (b * cout + co) * out_len;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                double* gwr = gw.ptr() + (co * cin + ci) * kernel;
                for (std::size_t k0 = 0; k0 < kernel; k0 += block) {
                    // Four interleaved partial sums keep independent multiply-add chains in flight.
                    Lanes acc[4] = {};
                    const double* xs = xp.data() + (b * cin + ci) * width + k0;
                    std::size_t t = 0;
                    for (; t + 4 <= out_len; t += 4) {
                        for (std::size_t u = 0; u < 4; ++u) acc[u] += g[t + u] * load_lanes(xs + t + u);
                    }
                    for (; t < out_len; ++t) acc[0] += g[t] * load_lanes(xs + t);
                    const Lanes total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                    const std::size_t n = std::min(block, kernel - k0);
                    for (std::size_t j = 0; j < n; ++j) gwr[k0 + j] += total[j];
                }
            }
        }
    }
    return gw;
}

Tensor flip_transpose_raw(const Tensor& w)
{
    const std::size_t cout = w.dim(0), cin = w.dim(1), kernel = w.dim(2);
    Tensor out({cin, cout, kernel});
    for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t k = 0; k < kernel; ++k) {
                out[(ci * cout + co) * kernel + (kernel - 1 - k)] = w[(co * cin + ci) * kernel + k];
            }
        }
    }
    return out;
}

Tensor matmul_raw(const Tensor& a, const Tensor& b)
{
    const std::size_t m = a.dim(0), inner = a.dim(1), n = b.dim(1);
    Tensor out({m, n}, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.ptr() + i * n;
        for (std::size_t k = 0; k < inner; ++k) {
            const double av = a[i * inner + k];
            const double* brow = b.ptr() + k * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Var add(const Var& a0, const Var& b0)
{
    auto [a, b, target] = align(a0, b0, "add");
    return Var::record(broadcast_zip(a.value(), b.value(), target, std::plus<>()), "add", {a, b},
                       [a = a, b = b](const Var& g, const Var&) {
                           Grads r(2);
                           if (a.requires_grad()) r[0] = sum_to(g, a.shape());
                           if (b.requires_grad()) r[1] = sum_to(g, b.shape());
                           return r;
                       });
}

Var sub(const Var& a0, const Var& b0)
{
    auto [a, b, target] = align(a0, b0, "sub");
    return Var::record(broadcast_zip(a.value(), b.value(), target, std::minus<>()), "sub", {a, b},
                       [a = a, b = b](const Var& g, const Var&) {
                           Grads r(2);
                           if (a.requires_grad()) r[0] = sum_to(g, a.shape());
                           if (b.requires_grad()) r[1] = neg(sum_to(g, b.shape()));
                           return r;
                       });
}

Var mul(const Var& a0, const Var& b0)
{
    auto [a, b, target] = align(a0, b0, "mul");
    return Var::record(broadcast_zip(a.value(), b.value(), target, std::multiplies<>()), "mul", {a, b},
                       [a = a, b = b](const Var& g, const Var&) {
                           Grads r(2);
                           if (a.requires_grad()) r[0] = sum_to(mul(g, b), a.shape());
                           if (b.requires_grad()) r[1] = sum_to(mul(g, a), b.shape());
                           return r;
                       });
}

Var div(const Var& a0, const Var& b0)
{
    auto [a, b, target] = align(a0, b0, "div");
    return Var::record(broadcast_zip(a.value(), b.value(), target, std::divides<>()), "div", {a, b},
                       [a = a, b = b](const Var& g, const Var& self) {
                           Grads r(2);
                           if (a.requires_grad()) r[0] = sum_to(div(g, b), a.shape());
                           if (b.requires_grad()) r[1] = sum_to(neg(div(mul(g, self), b)), b.shape());
                           return r;
                       });
}

Var neg(const Var& x)
{
    return Var::record(map_values(x.value(), [](double v) { return -v; }), "neg", {x},
                       [](const Var& g, const Var&) { return Grads{neg(g)}; });
}

Var scale(const Var& x, double factor)
{
    return Var::record(map_values(x.value(), [factor](double v) { return v * factor; }), "scale", {x},
                       [factor](const Var& g, const Var&) { return Grads{scale(g, factor)}; });
}

Var add_scalar(const Var& x, double value)
{
    return Var::record(map_values(x.value(), [value](double v) { return v + value; }), "add_scalar",
                       {x}, [](const Var& g, const Var&) { return Grads{g}; });
}

Var square(const Var& x) { return mul(x, x); }

Var exp(const Var& x)
{
    return Var::record(map_values(x.value(), [](double v) { return std::exp(v); }), "exp", {x},
                       [](const Var& g, const Var& self) { return Grads{mul(g, self)}; });
}

Var log(const Var& x)
{
    return Var::record(map_values(x.value(), [](double v) { return std::log(v); }), "log", {x},
                       [x](const Var& g, const Var&) { return Grads{div(g, x)}; });
}

Var tanh(const Var& x)
{
    return Var::record(map_values(x.value(), [](double v) { return std::tanh(v); }), "tanh", {x},
                       [](const Var& g, const Var& self) {
                           return Grads{sub(g, mul(g, mul(self, self)))};
                       });
}

Var sigmoid(const Var& x)
{
    auto f = [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    };
    return Var::record(map_values(x.value(), f), "sigmoid", {x}, [](const Var& g, const Var& self) {
        return Grads{mul(mul(g, self), add_scalar(neg(self), 1.0))};
    });
}

Var softplus(const Var& x)
{
    auto f = [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); };
    return Var::record(map_values(x.value(), f), "softplus", {x},
                       [x](const Var& g, const Var&) { return Grads{mul(g, sigmoid(x))}; });
}

Var pow(const Var& x, double exponent)
{
    return Var::record(map_values(x.value(), [exponent](double v) { return std::pow(v, exponent); }),
                       "pow", {x}, [x, exponent](const Var& g, const Var&) {
                           if (exponent == 1.0) return Grads{g};
                           return Grads{mul(g, scale(pow(x, exponent - 1.0), exponent))};
                       });
}

Var relu(const Var& x)
{
    return Var::record(map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), "relu", {x},
                       [x](const Var& g, const Var&) {
                           return Grads{mul(g, constant(map_values(x.value(), [](double v) {
                                                return v > 0.0 ? 1.0 : 0.0;
                                            })))};
                       });
}

namespace {

// d elu / dx: 1 above zero, alpha * exp(x) elsewhere. Its own derivative is the value
// itself on the negative side and zero on the positive side.
Var elu_slope(const Var& x, double alpha)
{
    return Var::record(map_values(x.value(), [alpha](double v) { return v > 0.0 ? 1.0 : alpha * std::exp(v); }),
                       "elu_slope", {x}, [x](const Var& g, const Var& self) {
                           Var positive = constant(map_values(x.value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                           return Grads{mul(g, sub(self, positive))};
                       });
}

// Second derivative of mish from primitives: u s (2 + x (1 - s - 2 t s)) with
// t = tanh(softplus(x)), s = sigmoid(x), u = 1 - t^2.
Var mish_curvature(const Var& x)
{
    Var t = tanh(softplus(x));
    Var s = sigmoid(x);
    Var u = add_scalar(neg(mul(t, t)), 1.0);
    Var inner = add_scalar(mul(x, sub(add_scalar(neg(s), 1.0), scale(mul(t, s), 2.0))), 2.0);
    return mul(mul(u, s), inner);
}

Var mish_slope(const Var& x)
{
    auto f = [](double v) {
        const double sp = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
        const double t = std::tanh(sp);
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return t + v * (1.0 - t * t) * s;
    };
    return Var::record(map_values(x.value(), f), "mish_slope", {x},
                       [x](const Var& g, const Var&) { return Grads{mul(g, mish_curvature(x))}; });
}

} // namespace

Var elu(const Var& x, double alpha)
{
    return Var::record(map_values(x.value(), [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); }),
                       "elu", {x}, [x, alpha](const Var& g, const Var&) { return Grads{mul(g, elu_slope(x, alpha))}; });
}

Var selu(const Var& x)
{
    constexpr double alpha = 1.6732632423543772848170429916717;
    constexpr double lambda = 1.0507009873554804934193349852946;
    return scale(elu(x, alpha), lambda);
}

Var mish(const Var& x)
{
    auto f = [](double v) { return v * std::tanh(std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)))); };
    return Var::record(map_values(x.value(), f), "mish", {x},
                       [x](const Var& g, const Var&) { return Grads{mul(g, mish_slope(x))}; });
}

Var activate(const Var& x, Activation act)
{
    switch (act) {
    case Activation::relu: return relu(x);
    case Activation::selu: return selu(x);
    case Activation::elu: return elu(x);
    case Activation::mish: return mish(x);
    case Activation::identity: return x;
    }
    return x;
}

// ---------------------------------------------------------------------------
// Shapes and reductions

Var reshape(const Var& x, Shape shape)
{
    if (x.shape() == shape) return x;
    Shape original = x.shape();
    Tensor value = x.value().reshaped(std::move(shape));
    return Var::record(std::move(value), "reshape", {x},
                       [original](const Var& g, const Var&) { return Grads{reshape(g, original)}; });
}

Var flatten(const Var& x)
{
    if (x.shape().empty()) shape_error("flatten", "scalar input");
    const std::size_t batch = x.shape()[0];
    return reshape(x, {batch, x.size() / std::max<std::size_t>(batch, 1)});
}

Var broadcast_to(const Var& x, const Shape& shape)
{
    if (x.shape() == shape) return x;
    if (!broadcastable(x.shape(), shape)) {
        shape_error("broadcast_to", "cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
    }
    Shape original = x.shape();
    return Var::record(broadcast_tensor(x.value(), shape), "broadcast_to", {x},
                       [original](const Var& g, const Var&) { return Grads{sum_to(g, original)}; });
}

Var sum_to(const Var& x, const Shape& shape)
{
    if (x.shape() == shape) return x;
    if (!broadcastable(shape, x.shape())) {
        shape_error("sum_to", "cannot reduce " + to_string(x.shape()) + " to " + to_string(shape));
    }
    Shape original = x.shape();
    return Var::record(sum_to_tensor(x.value(), shape), "sum_to", {x},
                       [original](const Var& g, const Var&) { return Grads{broadcast_to(g, original)}; });
}

Var sum(const Var& x)
{
    double acc = 0.0;
    for (double v : x.value().data()) acc += v;
    Shape original = x.shape();
    return Var::record(Tensor::scalar(acc), "sum", {x}, [original](const Var& g, const Var&) {
        return Grads{broadcast_to(reshape(g, ones_like_rank(original.size())), original)};
    });
}

Var mean(const Var& x)
{
    if (x.size() == 0) shape_error("mean", "empty input");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var transpose(const Var& x)
{
    require_rank("transpose", x, 2);
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    Tensor out({cols, rows});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x.value()[i * cols + j];
    }
    return Var::record(std::move(out), "transpose", {x},
                       [](const Var& g, const Var&) { return Grads{transpose(g)}; });
}

Var matmul(const Var& a, const Var& b)
{
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.shape()[1] != b.shape()[0]) {
        shape_error("matmul", "inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    return Var::record(matmul_raw(a.value(), b.value()), "matmul", {a, b},
                       [a, b](const Var& g, const Var&) {
                           Grads r(2);
                           if (a.requires_grad()) r[0] = matmul(g, transpose(b));
                           if (b.requires_grad()) r[1] = matmul(transpose(a), g);
                           return r;
                       });
}

Var concat_channels(const std::vector<Var>& parts)
{
    if (parts.empty()) shape_error("concat_channels", "no inputs");
    for (const auto& p : parts) require_rank("concat_channels", p, 3);
    const std::size_t batch = parts[0].shape()[0], len = parts[0].shape()[2];
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape()[0] != batch || p.shape()[2] != len) {
            shape_error("concat_channels", "mismatched part " + to_string(p.shape()));
        }
        total += p.shape()[1];
    }
    Tensor out({batch, total, len});
    std::size_t offset = 0;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (const auto& p : parts) {
        const std::size_t c = p.shape()[1];
        for (std::size_t b = 0; b < batch; ++b) {
            std::copy_n(p.value().ptr() + b * c * len, c * len, out.ptr() + (b * total + offset) * len);
        }
        ranges.emplace_back(offset, offset + c);
        offset += c;
    }
    return Var::record(std::move(out), "concat_channels", parts, [ranges](const Var& g, const Var&) {
        Grads r;
        for (auto [begin, end] : ranges) r.push_back(slice_channels(g, begin, end));
        return r;
    });
}

Var slice_channels(const Var& x, std::size_t begin, std::size_t end)
{
    require_rank("slice_channels", x, 3);
    const std::size_t batch = x.shape()[0], channels = x.shape()[1], len = x.shape()[2];
    if (begin >= end || end > channels) shape_error("slice_channels", "invalid channel range");
    const std::size_t c = end - begin;
    Tensor out({batch, c, len});
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(x.value().ptr() + (b * channels + begin) * len, c * len, out.ptr() + b * c * len);
    }
    return Var::record(std::move(out), "slice_channels", {x}, [begin, channels](const Var& g, const Var&) {
        return Grads{embed_channels(g, begin, channels)};
    });
}

Var embed_channels(const Var& x, std::size_t begin, std::size_t total)
{
    require_rank("embed_channels", x, 3);
    const std::size_t batch = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
    if (begin + c > total) shape_error("embed_channels", "channel range exceeds target");
    Tensor out({batch, total, len}, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(x.value().ptr() + b * c * len, c * len, out.ptr() + (b * total + begin) * len);
    }
    return Var::record(std::move(out), "embed_channels", {x}, [begin, c](const Var& g, const Var&) {
        return Grads{slice_channels(g, begin, begin + c)};
    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

Var conv1d(const Var& x, const Var& w, std::size_t pad_left, std::size_t pad_right)
{
    require_rank("conv1d", x, 3);
    require_rank("conv1d", w, 3);
    if (x.shape()[1] != w.shape()[1]) {
        shape_error("conv1d", "input channels " + to_string(x.shape()) + " do not match kernel " +
                                  to_string(w.shape()));
    }
    const std::size_t kernel = w.shape()[2];
    if (kernel == 0 || pad_left >= kernel || pad_right >= kernel ||
        x.shape()[2] + pad_left + pad_right < kernel) {
        shape_error("conv1d", "kernel " + std::to_string(kernel) + " does not fit input " + to_string(x.shape()));
    }
    return Var::record(conv1d_raw(x.value(), w.value(), pad_left, pad_right), "conv1d", {x, w},
                       [x, w, pad_left, pad_right, kernel](const Var& g, const Var&) {
                           Grads r(2);
                           if (x.requires_grad()) {
                               r[0] = conv1d(g, flip_transpose(w), kernel - 1 - pad_left, kernel - 1 - pad_right);
                           }
                           if (w.requires_grad()) r[1] = conv1d_weight_grad(x, g, kernel, pad_left);
                           return r;
                       });
}

Var conv1d_same(const Var& x, const Var& w)
{
    require_rank("conv1d", w, 3);
    const std::size_t kernel = w.shape()[2];
    const std::size_t left = (kernel - 1) / 2;
    return conv1d(x, w, left, kernel - 1 - left);
}

Var conv1d_valid(const Var& x, const Var& w) { return conv1d(x, w, 0, 0); }

Var conv1d_weight_grad(const Var& x, const Var& grad_out, std::size_t kernel, std::size_t pad_left)
{
    require_rank("conv1d_weight_grad", x, 3);
    require_rank("conv1d_weight_grad", grad_out, 3);
    const std::size_t len = x.shape()[2], out_len = grad_out.shape()[2];
    if (out_len + kernel < len + pad_left + 1) shape_error("conv1d_weight_grad", "inconsistent lengths");
    const std::size_t pad_right = out_len + kernel - 1 - len - pad_left;
    return Var::record(conv1d_weight_grad_raw(x.value(), grad_out.value(), kernel, pad_left),
                       "conv1d_weight_grad", {x, grad_out},
                       [x, grad_out, kernel, pad_left, pad_right](const Var& g, const Var&) {
                           Grads r(2);
                           if (x.requires_grad()) {
                               r[0] = conv1d(grad_out, flip_transpose(g), kernel - 1 - pad_left,
                                             kernel - 1 - pad_right);
                           }
                           if (grad_out.requires_grad()) r[1] = conv1d(x, g, pad_left, pad_right);
                           return r;
                       });
}

Var flip_transpose(const Var& w)
{
    require_rank("flip_transpose", w, 3);
    return Var::record(flip_transpose_raw(w.value()), "flip_transpose", {w},
                       [](const Var& g, const Var&) { return Grads{flip_transpose(g)}; });
}

Var gather_time(const Var& x, const TimeIndex& index, std::size_t out_length)
{
    require_rank("gather_time", x, 3);
    const std::size_t batch = x.shape()[0], channels = x.shape()[1], len = x.shape()[2];
    if (index->size() != batch * channels * out_length) shape_error("gather_time", "index size mismatch");
    Tensor out({batch, channels, out_length});
    for (std::size_t row = 0; row < batch * channels; ++row) {
        const double* in = x.value().ptr() + row * len;
        const std::uint32_t* idx = index->data() + row * out_length;
        double* o = out.ptr() + row * out_length;
        for (std::size_t t = 0; t < out_length; ++t) o[t] = in[idx[t]];
    }
    return Var::record(std::move(out), "gather_time", {x}, [index, len](const Var& g, const Var&) {
        return Grads{scatter_time(g, index, len)};
    });
}

Var scatter_time(const Var& g, const TimeIndex& index, std::size_t in_length)
{
    require_rank("scatter_time", g, 3);
    const std::size_t batch = g.shape()[0], channels = g.shape()[1], out_length = g.shape()[2];
    if (index->size() != batch * channels * out_length) shape_error("scatter_time", "index size mismatch");
    Tensor out({batch, channels, in_length}, 0.0);
    for (std::size_t row = 0; row < batch * channels; ++row) {
        const double* in = g.value().ptr() + row * out_length;
        const std::uint32_t* idx = index->data() + row * out_length;
        double* o = out.ptr() + row * in_length;
        for (std::size_t t = 0; t < out_length; ++t) o[idx[t]] += in[t];
    }
    return Var::record(std::move(out), "scatter_time", {g}, [index, out_length](const Var& gg, const Var&) {
        return Grads{gather_time(gg, index, out_length)};
    });
}

Var max_pool1d(const Var& x, std::size_t kernel, std::size_t stride, std::size_t pad)
{
    require_rank("max_pool1d", x, 3);
    const std::size_t batch = x.shape()[0], channels = x.shape()[1], len = x.shape()[2];
    if (kernel == 0 || stride == 0 || pad >= kernel || len + 2 * pad < kernel) {
        shape_error("max_pool1d", "kernel " + std::to_string(kernel) + " does not fit input " + to_string(x.shape()));
    }
    const std::size_t out_len = (len + 2 * pad - kernel) / stride + 1;
    auto index = std::make_shared<std::vector<std::uint32_t>>(batch * channels * out_len);
    for (std::size_t row = 0; row < batch * channels; ++row) {
        const double* in = x.value().ptr() + row * len;
        for (std::size_t t = 0; t < out_len; ++t) {
            const auto start = static_cast<std::ptrdiff_t>(t * stride) - static_cast<std::ptrdiff_t>(pad);
            double best = -std::numeric_limits<double>::infinity();
            std::uint32_t arg = 0;
            bool found = false;
            for (std::size_t j = 0; j < kernel; ++j) {
                const std::ptrdiff_t s = start + static_cast<std::ptrdiff_t>(j);
                if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
                if (!found || in[s] > best) {
                    best = in[s];
                    arg = static_cast<std::uint32_t>(s);
                    found = true;
                }
            }
            (*index)[row * out_len + t] = arg;
        }
    }
    return gather_time(x, index, out_len);
}

Var avg_pool1d(const Var& x, std::size_t kernel)
{
    require_rank("avg_pool1d", x, 3);
    const std::size_t batch = x.shape()[0], channels = x.shape()[1], len = x.shape()[2];
    if (kernel == 0 || kernel > len) {
        shape_error("avg_pool1d", "kernel " + std::to_string(kernel) + " does not fit input " + to_string(x.shape()));
    }
    const std::size_t out_len = len / kernel;
    const double inv = 1.0 / static_cast<double>(kernel);
    Tensor out({batch, channels, out_len});
    for (std::size_t row = 0; row < batch * channels; ++row) {
        const double* in = x.value().ptr() + row * len;
        double* o = out.ptr() + row * out_len;
        for (std::size_t t = 0; t < out_len; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < kernel; ++j) acc += in[t * kernel + j];
            o[t] = acc * inv;
        }
    }
    return Var::record(std::move(out), "avg_pool1d", {x}, [kernel, len](const Var& g, const Var&) {
        return Grads{avg_unpool1d(g, kernel, len)};
    });
}

Var avg_unpool1d(const Var& g, std::size_t kernel, std::size_t in_length)
{
    require_rank("avg_unpool1d", g, 3);
    const std::size_t batch = g.shape()[0], channels = g.shape()[1], out_len = g.shape()[2];
    if (kernel == 0 || out_len * kernel > in_length) shape_error("avg_unpool1d", "inconsistent lengths");
    const double inv = 1.0 / static_cast<double>(kernel);
    Tensor out({batch, channels, in_length}, 0.0);
    for (std::size_t row = 0; row < batch * channels; ++row) {
        const double* in = g.value().ptr() + row * out_len;
        double* o = out.ptr() + row * in_length;
        for (std::size_t t = 0; t < out_len; ++t) {
            for (std::size_t j = 0; j < kernel; ++j) o[t * kernel + j] = in[t] * inv;
        }
    }
    return Var::record(std::move(out), "avg_unpool1d", {g},
                       [kernel](const Var& gg, const Var&) { return Grads{avg_pool1d(gg, kernel)}; });
}

Var global_avg_pool(const Var& x)
{
    require_rank("global_avg_pool", x, 3);
    const std::size_t batch = x.shape()[0], channels = x.shape()[1], len = x.shape()[2];
    return reshape(scale(sum_to(x, {batch, channels, 1}), 1.0 / static_cast<double>(len)), {batch, channels});
}

// ---------------------------------------------------------------------------
// Layers

namespace {

// Batch, channel and trailing extents of a (B, C, ...) shape.
struct ChannelLayout {
    std::size_t outer = 1, channels = 1, inner = 1;
};

ChannelLayout channel_layout(const Shape& shape)
{
    ChannelLayout l{shape[0], shape[1], 1};
    for (std::size_t d = 2; d < shape.size(); ++d) l.inner *= shape[d];
    return l;
}

// 1 / sqrt(var + eps) per channel, shaped `stat`. Differentiates through x via
// d s / d x = -s^3 (x - mean) / n.
Var channel_inv_std(const Var& x, const Shape& stat, double eps)
{
    const ChannelLayout l = channel_layout(x.shape());
    const double n = static_cast<double>(l.outer * l.inner);
    Tensor s(stat, 0.0);
    const double* xv = x.value().ptr();
    for (std::size_t c = 0; c < l.channels; ++c) {
        double mean = 0.0;
        for (std::size_t o = 0; o < l.outer; ++o) {
            const double* row = xv + (o * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) mean += row[i];
        }
        mean /= n;
        double var = 0.0;
        for (std::size_t o = 0; o < l.outer; ++o) {
            const double* row = xv + (o * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) var += (row[i] - mean) * (row[i] - mean);
        }
        s[c] = 1.0 / std::sqrt(var / n + eps);
    }
    return Var::record(std::move(s), "channel_inv_std", {x}, [x, stat, n](const Var& g, const Var& self) {
        Var centered = sub(x, scale(sum_to(x, stat), 1.0 / n));
        return Grads{mul(centered, scale(mul(g, pow(self, 3.0)), -1.0 / n))};
    });
}

// (x - mu) * s * gamma + beta with per-channel mu, s, gamma and beta.
Var channel_affine(const Var& x, const Var& mu, const Var& s, const Var& gamma, const Var& beta)
{
    const ChannelLayout l = channel_layout(x.shape());
    Tensor y(x.shape());
    const double* xv = x.value().ptr();
    double* yv = y.ptr();
    for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t c = 0; c < l.channels; ++c) {
            const double m = mu.value()[c], k = s.value()[c] * gamma.value()[c], b = beta.value()[c];
            const std::size_t base = (o * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) yv[base + i] = (xv[base + i] - m) * k + b;
        }
    }
    const Shape stat = mu.shape();
    return Var::record(std::move(y), "channel_affine", {x, mu, s, gamma, beta},
                       [x, mu, s, gamma, beta, stat](const Var& g, const Var&) {
                           Grads r(5);
                           if (x.requires_grad() || mu.requires_grad()) {
                               Var gx = mul(g, mul(s, gamma));
                               if (x.requires_grad()) r[0] = gx;
                               if (mu.requires_grad()) r[1] = neg(sum_to(gx, stat));
                           }
                           if (s.requires_grad() || gamma.requires_grad()) {
                               Var projected = sum_to(mul(g, sub(x, mu)), stat);
                               if (s.requires_grad()) r[2] = mul(projected, gamma);
                               if (gamma.requires_grad()) r[3] = mul(projected, s);
                           }
                           if (beta.requires_grad()) r[4] = sum_to(g, stat);
                           return r;
                       });
}

} // namespace

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps)
{
    if (x.shape().size() < 2) shape_error("batch_norm", "input needs a channel axis, got " + to_string(x.shape()));
    const std::size_t channels = x.shape()[1];
    if (gamma.size() != channels || beta.size() != channels) {
        shape_error("batch_norm", "scale/shift size does not match " + std::to_string(channels) + " channels");
    }
    Shape stat(x.shape().size(), 1);
    stat[1] = channels;
    const double inv_count = static_cast<double>(channels) / static_cast<double>(x.size());
    Var mu = scale(sum_to(x, stat), inv_count);
    Var s = channel_inv_std(x, stat, eps);
    return channel_affine(x, mu, s, reshape(gamma, stat), reshape(beta, stat));
}

Var dropout(const Var& x, double rate, std::mt19937_64& rng)
{
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout: rate must be below 1");
    const double factor = 1.0 / (1.0 - rate);
    Tensor mask(x.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = uniform_unit(rng) >= rate ? factor : 0.0;
    return mul(x, constant(std::move(mask)));
}

Var affine(const Var& x, const Var& w, const Var& b)
{
    require_rank("affine", x, 2);
    require_rank("affine", w, 2);
    if (b.size() != w.shape()[1]) shape_error("affine", "bias size does not match output features");
    return add(matmul(x, w), reshape(b, {1, w.shape()[1]}));
}

Var log_softmax(const Var& x)
{
    require_rank("log_softmax", x, 2);
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    Tensor row_max({rows, 1});
    for (std::size_t i = 0; i < rows; ++i) {
        const double* r = x.value().ptr() + i * cols;
        row_max[i] = *std::max_element(r, r + cols);
    }
    Var shifted = sub(x, constant(std::move(row_max)));
    Var lse = log(sum_to(exp(shifted), {rows, 1}));
    return sub(shifted, lse);
}

Var softmax(const Var& x) { return exp(log_softmax(x)); }

Var l2_normalize(const Var& x)
{
    require_rank("l2_normalize", x, 2);
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    Tensor nudge({rows, cols}, 0.0);
    bool any_zero = false;
    for (std::size_t i = 0; i < rows; ++i) {
        const double* r = x.value().ptr() + i * cols;
        if (std::all_of(r, r + cols, [](double v) { return v == 0.0; })) {
            std::fill_n(nudge.ptr() + i * cols, cols, 1e-12);
            any_zero = true;
        }
    }
    Var safe = any_zero ? add(x, constant(std::move(nudge))) : x;
    Var norm = pow(sum_to(mul(safe, safe), {rows, 1}), 0.5);
    return div(safe, norm);
}

Var sq_euclidean(const Var& a, const Var& b)
{
    require_rank("sq_euclidean", a, 2);
    require_rank("sq_euclidean", b, 2);
    if (a.shape()[1] != b.shape()[1]) shape_error("sq_euclidean", "embedding widths differ");
    const std::size_t q = a.shape()[0], c = b.shape()[0], d = a.shape()[1];
    Var diff = sub(reshape(a, {q, 1, d}), reshape(b, {1, c, d}));
    return reshape(sum_to(mul(diff, diff), {q, c, 1}), {q, c});
}

Var cosine_similarity(const Var& a, const Var& b)
{
    require_rank("cosine_similarity", a, 2);
    require_rank("cosine_similarity", b, 2);
    if (a.shape()[1] != b.shape()[1]) shape_error("cosine_similarity", "embedding widths differ");
    return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

Var cross_entropy_with_logits(const Var& logits, std::span<const int> targets)
{
    require_rank("cross_entropy_with_logits", logits, 2);
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    if (targets.size() != rows) shape_error("cross_entropy_with_logits", "one target per row required");
    if (rows == 0) shape_error("cross_entropy_with_logits", "empty batch");
    Tensor onehot({rows, cols}, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= cols) {
            shape_error("cross_entropy_with_logits", "target " + std::to_string(targets[i]) + " out of range");
        }
        onehot[i * cols + static_cast<std::size_t>(targets[i])] = 1.0;
    }
    Var picked = sum(mul(log_softmax(logits), constant(std::move(onehot))));
    return scale(picked, -1.0 / static_cast<double>(rows));
}

Var bce_with_logits(const Var& logits, const Tensor& targets)
{
    if (logits.shape() != targets.shape()) shape_error("bce_with_logits", "targets must match logits shape");
    if (logits.size() == 0) shape_error("bce_with_logits", "empty batch");
    return mean(sub(softplus(logits), mul(logits, constant(targets))));
}

} // namespace fewshot::ad
