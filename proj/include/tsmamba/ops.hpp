#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "tsmamba/autograd.hpp"
#include "tsmamba/tensor.hpp"

namespace tsmamba {

inline constexpr Real kSoftplusThreshold = 20.0;

inline Real softplus(Real x) {
    return x > kSoftplusThreshold ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline Real sigmoid(Real x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const Real e = std::exp(x);
    return e / (1.0 + e);
}
inline Real silu(Real x) { return x * sigmoid(x); }
inline Real gelu(Real x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Plain tensor kernels. Shapes follow the row-major conventions noted per op.

/// input [C_in, L], weight [C_out, C_in, K], bias [C_out] -> [C_out, L_out].
Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor softplus(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
/// Normalises over the last axis: x / sqrt(mean(x^2) + eps) * gain.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps);

/// Differentiable operations on tape values.
namespace op {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real s);
Var sum(Var a);
Var mean(Var a);

Var silu(Var x);
Var gelu(Var x);
Var softplus(Var x);
/// -exp(x); used for the negated-exponential state matrix.
Var neg_exp(Var x);

/// x [R, In], weight [Out, In], optional bias [Out] -> [R, Out].
Var linear(Var x, Var weight, Var bias = {});
/// weight [Out, In] x [In, M] + bias[Out] broadcast along M -> [Out, M].
Var mix_rows(Var weight, Var x, Var bias);
Var conv1d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding);
/// Per-column FIR over the row (time) axis. x [L, C], weight [C, K], bias [C].
/// Output row t reads input rows t - pad_left .. t - pad_left + K - 1 (zero outside).
Var depthwise_conv_time(Var x, Var weight, Var bias, std::size_t pad_left);
/// x viewed as [G, L, E]; group g is filtered over L with taps weight[g, :]
/// shared across E, plus bias[g]. Symmetric-by-pad_left as above.
Var group_time_conv(Var x, Var weight, Var bias, std::size_t groups, std::size_t length,
                    std::size_t pad_left);
Var rmsnorm(Var x, Var gain, Real eps);

Var reshape(Var x, Shape shape);
Var transpose(Var x);
/// [a, b, c] -> [b, a, c]; input given as any tensor with a*b*c elements.
Var swap_axes01(Var x, std::size_t a, std::size_t b, std::size_t c);
Var flip_rows(Var x);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
/// [R, 1] -> [R, n] by repeating the single column.
Var broadcast_cols(Var x, std::size_t n);
/// [R, n] + bias[n] on every row.
Var add_rowvec(Var x, Var bias);
/// x * s + b with s, b single-element tensors.
Var scale_shift(Var x, Var s, Var b);
/// (x - b) / s, the inverse of scale_shift.
Var unscale_shift(Var x, Var s, Var b);

/// Scaled dot-product attention within groups. q, k, v are [G*S, E]; rows
/// g*S .. g*S+S-1 form group g and attend only to each other.
Var grouped_attention(Var q, Var k, Var v, std::size_t groups);
/// Softmax weights [G*S, S] of grouped_attention, for inspection.
Tensor grouped_attention_weights(const Tensor& q, const Tensor& k, std::size_t groups);

/// Mean over elements of 0.5 e^2 (|e| <= delta) or delta (|e| - delta/2).
Var huber_loss(Var pred, Var target, Real delta);

}  // namespace op
}  // namespace tsmamba
