#include "tsmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tsmamba/error.hpp"

namespace tsmamba {

namespace {

template <typename F>
Tensor map(const Tensor& x, F f) {
    Tensor out = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return out;
}

std::size_t conv_out_len(std::size_t len, std::size_t k, std::size_t stride, std::size_t padding) {
    require(stride >= 1, ErrorKind::InvalidConfig, "conv1d stride must be >= 1");
    require(k <= len + 2 * padding, ErrorKind::InvalidConfig,
            "conv1d kernel " + std::to_string(k) + " exceeds padded length " + std::to_string(len + 2 * padding));
    return (len + 2 * padding - k) / stride + 1;
}

void check_conv_shapes(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_rank(input, 2, "conv1d input");
    require_rank(weight, 3, "conv1d weight");
    require(weight.dim(1) == input.dim(0), ErrorKind::ShapeMismatch,
            "conv1d weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                std::to_string(input.dim(0)));
    require_shape(bias, {weight.dim(0)}, "conv1d bias");
}

}  // namespace

Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
    check_conv_shapes(input, weight, bias);
    const std::size_t cin = input.dim(0), len = input.dim(1);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    const std::size_t lout = conv_out_len(len, k, stride, padding);
    Tensor out({cout, lout});
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t t = 0; t < lout; ++t) {
            Real acc = bias[o];
            for (std::size_t c = 0; c < cin; ++c) {
                for (std::size_t j = 0; j < k; ++j) {
                    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + j) -
                                             static_cast<std::ptrdiff_t>(padding);
                    if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
                    acc += weight.at(o, c, j) * input.at(c, static_cast<std::size_t>(s));
                }
            }
            out.at(o, t) = acc;
        }
    }
    return out;
}

Tensor softplus(const Tensor& x) { return map(x, [](Real v) { return softplus(v); }); }
Tensor silu(const Tensor& x) { return map(x, [](Real v) { return silu(v); }); }
Tensor gelu(const Tensor& x) { return map(x, [](Real v) { return gelu(v); }); }

Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps) {
    require(!x.empty(), ErrorKind::ShapeMismatch, "rmsnorm on empty tensor");
    const std::size_t d = x.shape().back();
    require_shape(gain, {d}, "rmsnorm gain");
    require(eps >= 0.0, ErrorKind::InvalidConfig, "rmsnorm eps must be non-negative");
    Tensor out = Tensor::zeros_like(x);
    for (std::size_t r = 0; r < x.size() / d; ++r) {
        const Real* xr = x.ptr() + r * d;
        Real ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        const Real inv = 1.0 / std::sqrt(ms / static_cast<Real>(d) + eps);
        Real* yr = out.ptr() + r * d;
        // Zero rows with eps = 0 would divide by zero; they map to zero.
        if (!std::isfinite(inv)) continue;
        for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain[j];
    }
    return out;
}

namespace op {

namespace {

Tape& tape_of(Var v) {
    require(v.valid(), ErrorKind::GraphError, "operation on unbound Var");
    return *v.tape();
}

void same_shape(Var a, Var b, const char* what) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::ShapeMismatch,
             std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
    Tape& t = tape_of(x);
    Tensor out = map(x.value(), f);
    return t.record(std::move(out), {x}, [x, df](Tape& tp, const Tensor& g, const Tensor& y) {
        const Tensor& xv = tp.value(x);
        Tensor& gx = tp.grad_slot(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], y[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Tensor out = a.value();
    out += b.value();
    return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
        if (tp.requires_grad(a)) tp.grad_slot(a) += g;
        if (tp.requires_grad(b)) tp.grad_slot(b) += g;
    });
}

Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
        if (tp.requires_grad(a)) tp.grad_slot(a) += g;
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad_slot(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
        const Tensor& av = tp.value(a);
        const Tensor& bv2 = tp.value(b);
        if (tp.requires_grad(a)) {
            Tensor& ga = tp.grad_slot(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad_slot(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, Real s) {
    return unary(a, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Var sum(Var a) {
    Real acc = 0.0;
    for (Real v : a.value().data()) acc += v;
    return tape_of(a).record(Tensor::scalar(acc), {a}, [a](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& ga = tp.grad_slot(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
    });
}

Var mean(Var a) {
    const Real n = static_cast<Real>(a.value().size());
    Real acc = 0.0;
    for (Real v : a.value().data()) acc += v;
    return tape_of(a).record(Tensor::scalar(acc / n), {a}, [a, n](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& ga = tp.grad_slot(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] / n;
    });
}

Var silu(Var x) {
    return unary(x, [](Real v) { return tsmamba::silu(v); },
                 [](Real v, Real) {
                     const Real s = sigmoid(v);
                     return s * (1.0 + v * (1.0 - s));
                 });
}

Var gelu(Var x) {
    return unary(x, [](Real v) { return tsmamba::gelu(v); },
                 [](Real v, Real) {
                     constexpr Real inv_sqrt_2pi = 0.39894228040143267794;
                     const Real cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
                     return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
                 });
}

Var softplus(Var x) {
    return unary(x, [](Real v) { return tsmamba::softplus(v); }, [](Real v, Real) { return sigmoid(v); });
}

Var neg_exp(Var x) {
    return unary(x, [](Real v) { return -std::exp(v); }, [](Real, Real y) { return y; });
}

Var linear(Var x, Var weight, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    require_rank(xv, 2, "linear input");
    require_rank(wv, 2, "linear weight");
    const std::size_t rows = xv.dim(0), in = xv.dim(1), outd = wv.dim(0);
    require(wv.dim(1) == in, ErrorKind::ShapeMismatch,
            "linear weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
    if (bias.valid()) require_shape(bias.value(), {outd}, "linear bias");
    Tensor out({rows, outd});
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = xv.ptr() + r * in;
        Real* yr = out.ptr() + r * outd;
        for (std::size_t o = 0; o < outd; ++o) {
            const Real* wr = wv.ptr() + o * in;
            Real acc = bias.valid() ? bias.value()[o] : 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    std::vector<Var> inputs{x, weight};
    if (bias.valid()) inputs.push_back(bias);
    return tape_of(x).record(std::move(out), inputs, [x, weight, bias, rows, in, outd](Tape& tp, const Tensor& g,
                                                                                        const Tensor&) {
        const Tensor& xv2 = tp.value(x);
        const Tensor& wv2 = tp.value(weight);
        if (tp.requires_grad(x)) {
            Tensor& gx = tp.grad_slot(x);
            for (std::size_t r = 0; r < rows; ++r) {
                Real* gxr = gx.ptr() + r * in;
                for (std::size_t o = 0; o < outd; ++o) {
                    const Real go = g[r * outd + o];
                    if (go == 0.0) continue;
                    const Real* wr = wv2.ptr() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                }
            }
        }
        if (tp.requires_grad(weight)) {
            Tensor& gw = tp.grad_slot(weight);
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* xr = xv2.ptr() + r * in;
                for (std::size_t o = 0; o < outd; ++o) {
                    const Real go = g[r * outd + o];
                    if (go == 0.0) continue;
                    Real* gwr = gw.ptr() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                }
            }
        }
        if (bias.valid() && tp.requires_grad(bias)) {
            Tensor& gb = tp.grad_slot(bias);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
        }
    });
}

Var mix_rows(Var weight, Var x, Var bias) {
    const Tensor& wv = weight.value();
    const Tensor& xv = x.value();
    require_rank(wv, 2, "mix_rows weight");
    require_rank(xv, 2, "mix_rows input");
    const std::size_t outd = wv.dim(0), in = wv.dim(1), m = xv.dim(1);
    require(xv.dim(0) == in, ErrorKind::ShapeMismatch,
            "mix_rows weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
    require_shape(bias.value(), {outd}, "mix_rows bias");
    Tensor out({outd, m});
    for (std::size_t o = 0; o < outd; ++o) {
        Real* yr = out.ptr() + o * m;
        for (std::size_t j = 0; j < m; ++j) yr[j] = bias.value()[o];
        for (std::size_t i = 0; i < in; ++i) {
            const Real w = wv.at(o, i);
            const Real* xr = xv.ptr() + i * m;
            for (std::size_t j = 0; j < m; ++j) yr[j] += w * xr[j];
        }
    }
    return tape_of(x).record(std::move(out), {weight, x, bias},
                             [weight, x, bias, outd, in, m](Tape& tp, const Tensor& g, const Tensor&) {
                                 const Tensor& wv2 = tp.value(weight);
                                 const Tensor& xv2 = tp.value(x);
                                 if (tp.requires_grad(weight)) {
                                     Tensor& gw = tp.grad_slot(weight);
                                     for (std::size_t o = 0; o < outd; ++o)
                                         for (std::size_t i = 0; i < in; ++i) {
                                             Real acc = 0.0;
                                             for (std::size_t j = 0; j < m; ++j)
                                                 acc += g[o * m + j] * xv2[i * m + j];
                                             gw.at(o, i) += acc;
                                         }
                                 }
                                 if (tp.requires_grad(x)) {
                                     Tensor& gx = tp.grad_slot(x);
                                     for (std::size_t o = 0; o < outd; ++o)
                                         for (std::size_t i = 0; i < in; ++i) {
                                             const Real w = wv2.at(o, i);
                                             for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += w * g[o * m + j];
                                         }
                                 }
                                 if (tp.requires_grad(bias)) {
                                     Tensor& gb = tp.grad_slot(bias);
                                     for (std::size_t o = 0; o < outd; ++o)
                                         for (std::size_t j = 0; j < m; ++j) gb[o] += g[o * m + j];
                                 }
                             });
}

Var conv1d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding) {
    Tensor out = tsmamba::conv1d(input.value(), weight.value(), bias.value(), stride, padding);
    return tape_of(input).record(
        std::move(out), {input, weight, bias},
        [input, weight, bias, stride, padding](Tape& tp, const Tensor& g, const Tensor& y) {
            const Tensor& xv = tp.value(input);
            const Tensor& wv = tp.value(weight);
            const std::size_t cin = xv.dim(0), len = xv.dim(1);
            const std::size_t cout = wv.dim(0), k = wv.dim(2), lout = y.dim(1);
            const bool gx_on = tp.requires_grad(input), gw_on = tp.requires_grad(weight);
            Tensor* gx = gx_on ? &tp.grad_slot(input) : nullptr;
            Tensor* gw = gw_on ? &tp.grad_slot(weight) : nullptr;
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t t = 0; t < lout; ++t) {
                    const Real go = g.at(o, t);
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t j = 0; j < k; ++j) {
                            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + j) -
                                                     static_cast<std::ptrdiff_t>(padding);
                            if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
                            const auto su = static_cast<std::size_t>(s);
                            if (gx) gx->at(c, su) += go * wv.at(o, c, j);
                            if (gw) gw->at(o, c, j) += go * xv.at(c, su);
                        }
                }
            if (tp.requires_grad(bias)) {
                Tensor& gb = tp.grad_slot(bias);
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t t = 0; t < lout; ++t) gb[o] += g.at(o, t);
            }
        });
}

Var depthwise_conv_time(Var x, Var weight, Var bias, std::size_t pad_left) {
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    require_rank(xv, 2, "depthwise_conv_time input");
    const std::size_t len = xv.dim(0), ch = xv.dim(1);
    require_rank(wv, 2, "depthwise_conv_time weight");
    require(wv.dim(0) == ch, ErrorKind::ShapeMismatch,
            "depthwise weight " + shape_str(wv.shape()) + " does not match " + std::to_string(ch) + " channels");
    require_shape(bias.value(), {ch}, "depthwise_conv_time bias");
    const std::size_t k = wv.dim(1);
    require(pad_left < k, ErrorKind::InvalidConfig, "depthwise pad_left must be smaller than the kernel");
    Tensor out({len, ch});
    for (std::size_t t = 0; t < len; ++t) {
        Real* yr = out.ptr() + t * ch;
        for (std::size_t c = 0; c < ch; ++c) yr[c] = bias.value()[c];
        for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
            if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
            const Real* xr = xv.ptr() + static_cast<std::size_t>(s) * ch;
            for (std::size_t c = 0; c < ch; ++c) yr[c] += wv[c * k + j] * xr[c];
        }
    }
    return tape_of(x).record(std::move(out), {x, weight, bias},
                             [x, weight, bias, pad_left, len, ch, k](Tape& tp, const Tensor& g, const Tensor&) {
                                 const Tensor& xv2 = tp.value(x);
                                 const Tensor& wv2 = tp.value(weight);
                                 Tensor* gx = tp.requires_grad(x) ? &tp.grad_slot(x) : nullptr;
                                 Tensor* gw = tp.requires_grad(weight) ? &tp.grad_slot(weight) : nullptr;
                                 for (std::size_t t = 0; t < len; ++t) {
                                     const Real* gr = g.ptr() + t * ch;
                                     for (std::size_t j = 0; j < k; ++j) {
                                         const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) -
                                                                  static_cast<std::ptrdiff_t>(pad_left);
                                         if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
                                         const std::size_t off = static_cast<std::size_t>(s) * ch;
                                         for (std::size_t c = 0; c < ch; ++c) {
                                             if (gx) (*gx)[off + c] += gr[c] * wv2[c * k + j];
                                             if (gw) (*gw)[c * k + j] += gr[c] * xv2[off + c];
                                         }
                                     }
                                 }
                                 if (tp.requires_grad(bias)) {
                                     Tensor& gb = tp.grad_slot(bias);
                                     for (std::size_t t = 0; t < len; ++t)
                                         for (std::size_t c = 0; c < ch; ++c) gb[c] += g[t * ch + c];
                                 }
                             });
}

Var group_time_conv(Var x, Var weight, Var bias, std::size_t groups, std::size_t length, std::size_t pad_left) {
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    require(xv.size() % (groups * length) == 0, ErrorKind::ShapeMismatch,
            "group_time_conv input " + shape_str(xv.shape()) + " not divisible into groups");
    const std::size_t e = xv.size() / (groups * length);
    require_rank(wv, 2, "group_time_conv weight");
    require(wv.dim(0) == groups, ErrorKind::ShapeMismatch, "group_time_conv weight rows must equal groups");
    require_shape(bias.value(), {groups}, "group_time_conv bias");
    const std::size_t k = wv.dim(1);
    require(pad_left < k, ErrorKind::InvalidConfig, "group_time_conv pad_left must be smaller than the kernel");
    Tensor out = Tensor::zeros_like(xv);
    auto idx = [length, e](std::size_t gi, std::size_t t, std::size_t c) { return (gi * length + t) * e + c; };
    for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t t = 0; t < length; ++t) {
            Real* yr = out.ptr() + idx(gi, t, 0);
            for (std::size_t c = 0; c < e; ++c) yr[c] = bias.value()[gi];
            for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
                if (s < 0 || s >= static_cast<std::ptrdiff_t>(length)) continue;
                const Real w = wv.at(gi, j);
                const Real* xr = xv.ptr() + idx(gi, static_cast<std::size_t>(s), 0);
                for (std::size_t c = 0; c < e; ++c) yr[c] += w * xr[c];
            }
        }
    return tape_of(x).record(
        std::move(out), {x, weight, bias},
        [x, weight, bias, groups, length, pad_left, e, k, idx](Tape& tp, const Tensor& g, const Tensor&) {
            const Tensor& xv2 = tp.value(x);
            const Tensor& wv2 = tp.value(weight);
            Tensor* gx = tp.requires_grad(x) ? &tp.grad_slot(x) : nullptr;
            Tensor* gw = tp.requires_grad(weight) ? &tp.grad_slot(weight) : nullptr;
            Tensor* gb = tp.requires_grad(bias) ? &tp.grad_slot(bias) : nullptr;
            for (std::size_t gi = 0; gi < groups; ++gi)
                for (std::size_t t = 0; t < length; ++t) {
                    const Real* gr = g.ptr() + idx(gi, t, 0);
                    if (gb)
                        for (std::size_t c = 0; c < e; ++c) (*gb)[gi] += gr[c];
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::ptrdiff_t s =
                            static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
                        if (s < 0 || s >= static_cast<std::ptrdiff_t>(length)) continue;
                        const std::size_t off = idx(gi, static_cast<std::size_t>(s), 0);
                        const Real w = wv2.at(gi, j);
                        Real acc = 0.0;
                        for (std::size_t c = 0; c < e; ++c) {
                            if (gx) (*gx)[off + c] += gr[c] * w;
                            acc += gr[c] * xv2[off + c];
                        }
                        if (gw) gw->at(gi, j) += acc;
                    }
                }
        });
}

Var rmsnorm(Var x, Var gain, Real eps) {
    require(eps > 0.0, ErrorKind::InvalidConfig, "differentiable rmsnorm requires eps > 0");
    Tensor out = tsmamba::rmsnorm(x.value(), gain.value(), eps);
    return tape_of(x).record(std::move(out), {x, gain}, [x, gain, eps](Tape& tp, const Tensor& g, const Tensor&) {
        const Tensor& xv = tp.value(x);
        const Tensor& gv = tp.value(gain);
        const std::size_t d = gv.size();
        Tensor* gx = tp.requires_grad(x) ? &tp.grad_slot(x) : nullptr;
        Tensor* gg = tp.requires_grad(gain) ? &tp.grad_slot(gain) : nullptr;
        for (std::size_t r = 0; r < xv.size() / d; ++r) {
            const Real* xr = xv.ptr() + r * d;
            const Real* gr = g.ptr() + r * d;
            Real ms = 0.0;
            for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
            const Real inv = 1.0 / std::sqrt(ms / static_cast<Real>(d) + eps);
            if (gg)
                for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xr[j] * inv;
            if (gx) {
                Real dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
                const Real c = inv * inv * inv * dot / static_cast<Real>(d);
                Real* gxr = gx->ptr() + r * d;
                for (std::size_t j = 0; j < d; ++j) gxr[j] += inv * gr[j] * gv[j] - c * xr[j];
            }
        }
    });
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return tape_of(x).record(std::move(out), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_slot(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var transpose(Var x) {
    Tensor out = x.value().transposed();
    return tape_of(x).record(std::move(out), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
        tp.grad_slot(x) += g.transposed();
    });
}

Var swap_axes01(Var x, std::size_t a, std::size_t b, std::size_t c) {
    const Tensor& xv = x.value();
    require(xv.size() == a * b * c, ErrorKind::ShapeMismatch, "swap_axes01 size mismatch");
    Tensor out({b, a, c});
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            std::copy_n(xv.ptr() + (i * b + j) * c, c, out.ptr() + (j * a + i) * c);
    return tape_of(x).record(std::move(out), {x}, [x, a, b, c](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_slot(x);
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < b; ++j) {
                const Real* src = g.ptr() + (j * a + i) * c;
                Real* dst = gx.ptr() + (i * b + j) * c;
                for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
            }
    });
}

Var flip_rows(Var x) {
    const Tensor& xv = x.value();
    require_rank(xv, 2, "flip_rows");
    const std::size_t rows = xv.dim(0), w = xv.dim(1);
    Tensor out = Tensor::zeros_like(xv);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.ptr() + r * w, w, out.ptr() + (rows - 1 - r) * w);
    return tape_of(x).record(std::move(out), {x}, [x, rows, w](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_slot(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* src = g.ptr() + (rows - 1 - r) * w;
            Real* dst = gx.ptr() + r * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
    Tensor out = x.value().rows(start, count);
    const std::size_t w = x.value().dim(1);
    return tape_of(x).record(std::move(out), {x}, [x, start, w](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_slot(x);
        Real* dst = gx.ptr() + start * w;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
    const Tensor& xv = x.value();
    require_rank(xv, 2, "slice_cols");
    const std::size_t rows = xv.dim(0), w = xv.dim(1);
    require(count > 0 && start + count <= w, ErrorKind::ShapeMismatch, "column slice out of range");
    Tensor out({rows, count});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.ptr() + r * w + start, count, out.ptr() + r * count);
    return tape_of(x).record(std::move(out), {x}, [x, start, count, rows, w](Tape& tp, const Tensor& g,
                                                                             const Tensor&) {
        Tensor& gx = tp.grad_slot(x);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < count; ++j) gx[r * w + start + j] += g[r * count + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), ErrorKind::ShapeMismatch, "concat_rows of nothing");
    const std::size_t w = parts.front().value().dim(1);
    std::size_t rows = 0;
    for (const Var& p : parts) {
        require_rank(p.value(), 2, "concat_rows part");
        require(p.value().dim(1) == w, ErrorKind::ShapeMismatch, "concat_rows width mismatch");
        rows += p.value().dim(0);
    }
    Tensor out({rows, w});
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy_n(p.value().ptr(), p.value().size(), out.ptr() + off);
        off += p.value().size();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return tape_of(parts.front())
        .record(std::move(out), parts, [inputs](Tape& tp, const Tensor& g, const Tensor&) {
            std::size_t o = 0;
            for (const Var& p : inputs) {
                const std::size_t n = tp.value(p).size();
                if (tp.requires_grad(p)) {
                    Tensor& gp = tp.grad_slot(p);
                    for (std::size_t i = 0; i < n; ++i) gp[i] += g[o + i];
                }
                o += n;
            }
        });
}

Var concat_cols(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank(av, 2, "concat_cols");
    require_rank(bv, 2, "concat_cols");
    require(av.dim(0) == bv.dim(0), ErrorKind::ShapeMismatch, "concat_cols row mismatch");
    const std::size_t rows = av.dim(0), wa = av.dim(1), wb = bv.dim(1);
    Tensor out({rows, wa + wb});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.ptr() + r * wa, wa, out.ptr() + r * (wa + wb));
        std::copy_n(bv.ptr() + r * wb, wb, out.ptr() + r * (wa + wb) + wa);
    }
    return tape_of(a).record(std::move(out), {a, b}, [a, b, rows, wa, wb](Tape& tp, const Tensor& g, const Tensor&) {
        if (tp.requires_grad(a)) {
            Tensor& ga = tp.grad_slot(a);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < wa; ++j) ga[r * wa + j] += g[r * (wa + wb) + j];
        }
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad_slot(b);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < wb; ++j) gb[r * wb + j] += g[r * (wa + wb) + wa + j];
        }
    });
}

Var broadcast_cols(Var x, std::size_t n) {
    const Tensor& xv = x.value();
    require(xv.rank() == 2 && xv.dim(1) == 1, ErrorKind::ShapeMismatch,
            "broadcast_cols expects [R, 1], got " + shape_str(xv.shape()));
    const std::size_t rows = xv.dim(0);
    Tensor out({rows, n});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r];
    return tape_of(x).record(std::move(out), {x}, [x, rows, n](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_slot(x);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gx[r] += g[r * n + j];
    });
}

Var add_rowvec(Var x, Var bias) {
    const Tensor& xv = x.value();
    require_rank(xv, 2, "add_rowvec");
    const std::size_t rows = xv.dim(0), n = xv.dim(1);
    require_shape(bias.value(), {n}, "add_rowvec bias");
    Tensor out = xv;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.value()[j];
    return tape_of(x).record(std::move(out), {x, bias}, [x, bias, rows, n](Tape& tp, const Tensor& g, const Tensor&) {
        if (tp.requires_grad(x)) tp.grad_slot(x) += g;
        if (tp.requires_grad(bias)) {
            Tensor& gb = tp.grad_slot(bias);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
    });
}

Var scale_shift(Var x, Var s, Var b) {
    require(s.value().size() == 1 && b.value().size() == 1, ErrorKind::ShapeMismatch,
            "scale_shift expects single-element scale and shift");
    const Real sv = s.value()[0], bv = b.value()[0];
    Tensor out = x.value();
    for (auto& v : out.data()) v = v * sv + bv;
    return tape_of(x).record(std::move(out), {x, s, b}, [x, s, b](Tape& tp, const Tensor& g, const Tensor&) {
        const Tensor& xv = tp.value(x);
        const Real sv2 = tp.value(s)[0];
        if (tp.requires_grad(x)) {
            Tensor& gx = tp.grad_slot(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv2;
        }
        if (tp.requires_grad(s)) {
            Real acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
            tp.grad_slot(s)[0] += acc;
        }
        if (tp.requires_grad(b)) {
            Real acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
            tp.grad_slot(b)[0] += acc;
        }
    });
}

Var unscale_shift(Var x, Var s, Var b) {
    require(s.value().size() == 1 && b.value().size() == 1, ErrorKind::ShapeMismatch,
            "unscale_shift expects single-element scale and shift");
    const Real sv = s.value()[0], bv = b.value()[0];
    Tensor out = x.value();
    for (auto& v : out.data()) v = (v - bv) / sv;
    return tape_of(x).record(std::move(out), {x, s, b}, [x, s, b](Tape& tp, const Tensor& g, const Tensor& y) {
        const Real sv2 = tp.value(s)[0];
        if (tp.requires_grad(x)) {
            Tensor& gx = tp.grad_slot(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / sv2;
        }
        if (tp.requires_grad(s)) {
            Real acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc -= g[i] * y[i] / sv2;
            tp.grad_slot(s)[0] += acc;
        }
        if (tp.requires_grad(b)) {
            Real acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc -= g[i] / sv2;
            tp.grad_slot(b)[0] += acc;
        }
    });
}

Tensor grouped_attention_weights(const Tensor& q, const Tensor& k, std::size_t groups) {
    require_rank(q, 2, "attention queries");
    require(q.shape() == k.shape(), ErrorKind::ShapeMismatch, "attention q/k shape mismatch");
    require(groups > 0 && q.dim(0) % groups == 0, ErrorKind::ShapeMismatch, "attention rows not divisible by groups");
    const std::size_t s = q.dim(0) / groups, e = q.dim(1);
    const Real scale = 1.0 / std::sqrt(static_cast<Real>(e));
    Tensor p({groups * s, s});
    for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t i = 0; i < s; ++i) {
            const Real* qi = q.ptr() + (gi * s + i) * e;
            Real* pr = p.ptr() + (gi * s + i) * s;
            Real mx = -INFINITY;
            for (std::size_t j = 0; j < s; ++j) {
                const Real* kj = k.ptr() + (gi * s + j) * e;
                Real dot = 0.0;
                for (std::size_t c = 0; c < e; ++c) dot += qi[c] * kj[c];
                pr[j] = dot * scale;
                mx = std::max(mx, pr[j]);
            }
            Real z = 0.0;
            for (std::size_t j = 0; j < s; ++j) {
                pr[j] = std::exp(pr[j] - mx);
                z += pr[j];
            }
            for (std::size_t j = 0; j < s; ++j) pr[j] /= z;
        }
    return p;
}

Var grouped_attention(Var q, Var k, Var v, std::size_t groups) {
    same_shape(q, k, "attention q/k");
    same_shape(q, v, "attention q/v");
    Tensor p = grouped_attention_weights(q.value(), k.value(), groups);
    const std::size_t s = q.value().dim(0) / groups, e = q.value().dim(1);
    const Tensor& vv = v.value();
    Tensor out({groups * s, e});
    for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t i = 0; i < s; ++i) {
            Real* yr = out.ptr() + (gi * s + i) * e;
            for (std::size_t j = 0; j < s; ++j) {
                const Real w = p[(gi * s + i) * s + j];
                const Real* vj = vv.ptr() + (gi * s + j) * e;
                for (std::size_t c = 0; c < e; ++c) yr[c] += w * vj[c];
            }
        }
    return tape_of(q).record(std::move(out), {q, k, v}, [q, k, v, p, groups, s, e](Tape& tp, const Tensor& g,
                                                                                   const Tensor&) {
        const Tensor& qv = tp.value(q);
        const Tensor& kv = tp.value(k);
        const Tensor& vv2 = tp.value(v);
        const Real scale = 1.0 / std::sqrt(static_cast<Real>(e));
        Tensor* gq = tp.requires_grad(q) ? &tp.grad_slot(q) : nullptr;
        Tensor* gk = tp.requires_grad(k) ? &tp.grad_slot(k) : nullptr;
        Tensor* gv = tp.requires_grad(v) ? &tp.grad_slot(v) : nullptr;
        std::vector<Real> gp(s), gs(s);
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t i = 0; i < s; ++i) {
                const std::size_t qi = gi * s + i;
                const Real* go = g.ptr() + qi * e;
                const Real* pr = p.ptr() + qi * s;
                Real dotp = 0.0;
                for (std::size_t j = 0; j < s; ++j) {
                    const Real* vj = vv2.ptr() + (gi * s + j) * e;
                    Real acc = 0.0;
                    for (std::size_t c = 0; c < e; ++c) acc += go[c] * vj[c];
                    gp[j] = acc;
                    dotp += acc * pr[j];
                    if (gv) {
                        Real* gvj = gv->ptr() + (gi * s + j) * e;
                        for (std::size_t c = 0; c < e; ++c) gvj[c] += pr[j] * go[c];
                    }
                }
                for (std::size_t j = 0; j < s; ++j) gs[j] = pr[j] * (gp[j] - dotp) * scale;
                for (std::size_t j = 0; j < s; ++j) {
                    const std::size_t kj = gi * s + j;
                    if (gq) {
                        Real* gqi = gq->ptr() + qi * e;
                        const Real* kr = kv.ptr() + kj * e;
                        for (std::size_t c = 0; c < e; ++c) gqi[c] += gs[j] * kr[c];
                    }
                    if (gk) {
                        Real* gkj = gk->ptr() + kj * e;
                        const Real* qr = qv.ptr() + qi * e;
                        for (std::size_t c = 0; c < e; ++c) gkj[c] += gs[j] * qr[c];
                    }
                }
            }
    });
}

Var huber_loss(Var pred, Var target, Real delta) {
    same_shape(pred, target, "huber_loss");
    require(delta > 0.0, ErrorKind::InvalidConfig, "huber delta must be positive");
    const Tensor& pv = pred.value();
    const Tensor& tv = target.value();
    Real acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const Real err = pv[i] - tv[i];
        const Real a = std::abs(err);
        acc += a <= delta ? 0.5 * err * err : delta * (a - 0.5 * delta);
    }
    const Real n = static_cast<Real>(pv.size());
    return tape_of(pred).record(Tensor::scalar(acc / n), {pred, target},
                                [pred, target, delta, n](Tape& tp, const Tensor& g, const Tensor&) {
                                    const Tensor& pv2 = tp.value(pred);
                                    const Tensor& tv2 = tp.value(target);
                                    Tensor* gp = tp.requires_grad(pred) ? &tp.grad_slot(pred) : nullptr;
                                    Tensor* gt = tp.requires_grad(target) ? &tp.grad_slot(target) : nullptr;
                                    for (std::size_t i = 0; i < pv2.size(); ++i) {
                                        const Real err = pv2[i] - tv2[i];
                                        const Real d = std::abs(err) <= delta ? err : (err > 0 ? delta : -delta);
                                        const Real gi = g[0] * d / n;
                                        if (gp) (*gp)[i] += gi;
                                        if (gt) (*gt)[i] -= gi;
                                    }
                                });
}

}  // namespace op
}  // namespace tsmamba
