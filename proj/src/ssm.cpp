#include "tsmamba/ssm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "tsmamba/error.hpp"
#include "tsmamba/ops.hpp"
#include "tsmamba/parallel.hpp"

namespace tsmamba {

namespace {

/// ZOH input factor (exp(z) - 1) / A with z = dt * A, so B_bar = factor * B.
inline Real zoh_factor(Real dt, Real a) {
    const Real z = dt * a;
    return std::abs(z) < kZohSmallThreshold ? dt : std::expm1(z) / a;
}

}  // namespace

Tensor SSMParams::A() const {
    Tensor a = Tensor::zeros_like(A_log);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(A_log[i]);
    return a;
}

void SSMParams::validate() const {
    require_rank(A_log, 2, "A_log");
    const std::size_t d = A_log.dim(0), n = A_log.dim(1);
    require_shape(x_to_B, {n, d}, "x_to_B");
    require_shape(x_to_C, {n, d}, "x_to_C");
    require_shape(x_to_dt, {1, d}, "x_to_dt");
    require_shape(dt_bias, {d}, "dt_bias");
    require_shape(D_skip, {d}, "D_skip");
}

ZohCoefficients discretize_zoh(const Tensor& A, const Tensor& B_t, const Tensor& dt_t) {
    require_rank(A, 2, "discretize_zoh A");
    const std::size_t d = A.dim(0), n = A.dim(1);
    require_shape(B_t, {n}, "discretize_zoh B_t");
    require_shape(dt_t, {d}, "discretize_zoh dt_t");
    ZohCoefficients out{Tensor({d, n}), Tensor({d, n})};
    for (std::size_t i = 0; i < d; ++i) {
        const Real dt = dt_t[i];
        if (!(dt > 0.0)) fail(ErrorKind::NonPositiveDt, "dt[" + std::to_string(i) + "] = " + std::to_string(dt));
        for (std::size_t j = 0; j < n; ++j) {
            const Real a = A.at(i, j);
            out.A_bar.at(i, j) = std::exp(dt * a);
            out.B_bar.at(i, j) = zoh_factor(dt, a) * B_t[j];
        }
    }
    return out;
}

SelectiveStep selective_params(const Tensor& x_t, const SSMParams& ssm) {
    ssm.validate();
    const std::size_t d = ssm.d_inner(), n = ssm.d_state();
    require_shape(x_t, {d}, "selective_params x_t");
    SelectiveStep s{Tensor({n}), Tensor({n}), Tensor({d})};
    for (std::size_t j = 0; j < n; ++j) {
        Real b = 0.0, c = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            b += ssm.x_to_B.at(j, i) * x_t[i];
            c += ssm.x_to_C.at(j, i) * x_t[i];
        }
        s.B[j] = b;
        s.C[j] = c;
    }
    Real r = 0.0;
    for (std::size_t i = 0; i < d; ++i) r += ssm.x_to_dt[i] * x_t[i];
    for (std::size_t i = 0; i < d; ++i) s.dt[i] = softplus(ssm.dt_bias[i] + r);
    return s;
}

FrozenScan freeze_scan(const Tensor& x, const SSMParams& ssm) {
    ssm.validate();
    require_rank(x, 2, "scan input");
    const std::size_t d = ssm.d_inner(), n = ssm.d_state(), len = x.dim(1);
    require(x.dim(0) == d, ErrorKind::ShapeMismatch,
            "scan input has " + std::to_string(x.dim(0)) + " channels, SSM expects " + std::to_string(d));
    FrozenScan fs{Tensor({len, d, n}), Tensor({len, d, n}), Tensor({len, n}), ssm.D_skip};
    const Tensor a = ssm.A();
    Tensor xt({d});
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < d; ++i) xt[i] = x.at(i, t);
        const SelectiveStep s = selective_params(xt, ssm);
        for (std::size_t i = 0; i < d; ++i) {
            const Real dt = s.dt[i];
            for (std::size_t j = 0; j < n; ++j) {
                fs.a_bar.at(t, i, j) = std::exp(dt * a.at(i, j));
                fs.b_bar.at(t, i, j) = zoh_factor(dt, a.at(i, j)) * s.B[j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) fs.C.at(t, j) = s.C[j];
    }
    return fs;
}

namespace {

void check_frozen(const FrozenScan& c, const Tensor& x) {
    require_rank(x, 2, "scan input");
    require(x.dim(0) == c.d_inner() && x.dim(1) == c.length(), ErrorKind::ShapeMismatch,
            "scan input " + shape_str(x.shape()) + " does not match coefficients");
    require(c.b_bar.shape() == c.a_bar.shape(), ErrorKind::ShapeMismatch, "a_bar/b_bar shape mismatch");
    require_shape(c.C, {c.length(), c.d_state()}, "scan C");
    require_shape(c.D_skip, {c.d_inner()}, "scan D_skip");
}

}  // namespace

Tensor scan_states(const FrozenScan& c, const Tensor& x) {
    check_frozen(c, x);
    const std::size_t len = c.length(), d = c.d_inner(), n = c.d_state();
    Tensor h({len, d, n});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Real state = 0.0;
            for (std::size_t t = 0; t < len; ++t) {
                state = c.a_bar.at(t, i, j) * state + c.b_bar.at(t, i, j) * x.at(i, t);
                h.at(t, i, j) = state;
            }
        }
    return h;
}

Tensor scan_sequential(const FrozenScan& c, const Tensor& x) {
    check_frozen(c, x);
    const std::size_t len = c.length(), d = c.d_inner(), n = c.d_state();
    Tensor y({d, len});
    // Time-major so the [L, D_mb, N_st] coefficients stream contiguously.
    std::vector<Real> state(d * n, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < d; ++i) {
            const Real xv = x.at(i, t);
            Real* h = state.data() + i * n;
            Real acc = c.D_skip[i] * xv;
            for (std::size_t j = 0; j < n; ++j) {
                h[j] = c.a_bar.at(t, i, j) * h[j] + c.b_bar.at(t, i, j) * xv;
                acc += c.C.at(t, j) * h[j];
            }
            y.at(i, t) = acc;
        }
    }
    return y;
}

namespace {

// Exclusive Blelloch scan over (a, b) pairs where (a2, b2) o (a1, b1) =
// (a2 a1, a2 b1 + b2) applies the earlier element first. Arrays have
// power-of-two length; padding holds the identity (1, 0).
void blelloch_exclusive(std::vector<Real>& a, std::vector<Real>& b) {
    const std::size_t p = a.size();
    for (std::size_t step = 1; step < p; step <<= 1) {
        for (std::size_t i = 2 * step - 1; i < p; i += 2 * step) {
            b[i] = a[i] * b[i - step] + b[i];
            a[i] = a[i] * a[i - step];
        }
    }
    a[p - 1] = 1.0;
    b[p - 1] = 0.0;
    for (std::size_t step = p >> 1; step >= 1; step >>= 1) {
        for (std::size_t i = 2 * step - 1; i < p; i += 2 * step) {
            const Real la = a[i - step], lb = b[i - step];
            a[i - step] = a[i];
            b[i - step] = b[i];
            // right = left_sum o prefix
            b[i] = la * b[i] + lb;
            a[i] = la * a[i];
        }
    }
}

}  // namespace

Tensor scan_parallel(const FrozenScan& c, const Tensor& x, std::size_t workers) {
    check_frozen(c, x);
    const std::size_t len = c.length(), d = c.d_inner(), n = c.d_state();
    const std::size_t padded = std::bit_ceil(len);
    // states[t, i, j]; lanes write disjoint entries.
    Tensor h({len, d, n});
    if (workers == 0) workers = configured_threads();
    parallel_for(d * n, workers, [&](std::size_t begin, std::size_t end) {
        std::vector<Real> a(padded), b(padded);
        for (std::size_t lane = begin; lane < end; ++lane) {
            const std::size_t i = lane / n, j = lane % n;
            std::fill(a.begin(), a.end(), 1.0);
            std::fill(b.begin(), b.end(), 0.0);
            for (std::size_t t = 0; t < len; ++t) {
                a[t] = c.a_bar.at(t, i, j);
                b[t] = c.b_bar.at(t, i, j) * x.at(i, t);
            }
            blelloch_exclusive(a, b);
            for (std::size_t t = 0; t < len; ++t) {
                // inclusive state = element_t o exclusive_prefix_t, with h_0 = 0
                h.at(t, i, j) = c.a_bar.at(t, i, j) * b[t] + c.b_bar.at(t, i, j) * x.at(i, t);
            }
        }
    });
    Tensor y({d, len});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t t = 0; t < len; ++t) {
            Real acc = c.D_skip[i] * x.at(i, t);
            for (std::size_t j = 0; j < n; ++j) acc += c.C.at(t, j) * h.at(t, i, j);
            y.at(i, t) = acc;
        }
    return y;
}

Tensor selective_scan_sequential(const Tensor& x, const SSMParams& ssm) {
    ssm.validate();
    require_rank(x, 2, "scan input");
    const std::size_t d = ssm.d_inner(), n = ssm.d_state(), len = x.dim(1);
    require(x.dim(0) == d, ErrorKind::ShapeMismatch,
            "scan input has " + std::to_string(x.dim(0)) + " channels, SSM expects " + std::to_string(d));
    // Discretises step by step; memory stays O(D_mb * N_st) beyond input and output.
    const Tensor a = ssm.A();
    Tensor y({d, len}), xt({d});
    std::vector<Real> state(d * n, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < d; ++i) xt[i] = x.at(i, t);
        const SelectiveStep s = selective_params(xt, ssm);
        for (std::size_t i = 0; i < d; ++i) {
            const Real xv = xt[i], dt = s.dt[i];
            Real* h = state.data() + i * n;
            Real acc = ssm.D_skip[i] * xv;
            for (std::size_t j = 0; j < n; ++j) {
                const Real a_bar = std::exp(dt * a.at(i, j)), b_bar = zoh_factor(dt, a.at(i, j)) * s.B[j];
                h[j] = a_bar * h[j] + b_bar * xv;
                acc += s.C[j] * h[j];
            }
            y.at(i, t) = acc;
        }
    }
    return y;
}

Tensor selective_scan_parallel(const Tensor& x, const SSMParams& ssm, std::size_t workers) {
    return scan_parallel(freeze_scan(x, ssm), x, workers);
}

MambaBlockVars bind_constants(Tape& tape, const MambaBlockParams& p) {
    return MambaBlockVars{tape.constant(p.in_proj),     tape.constant(p.conv_weight), tape.constant(p.conv_bias),
                          tape.constant(p.ssm.A_log),   tape.constant(p.ssm.x_to_B),  tape.constant(p.ssm.x_to_C),
                          tape.constant(p.ssm.x_to_dt), tape.constant(p.ssm.dt_bias), tape.constant(p.ssm.D_skip),
                          tape.constant(p.out_proj)};
}

EncoderVars bind_constants(Tape& tape, const EncoderParams& p) {
    EncoderVars ev;
    for (const auto& layer : p.layers) {
        ev.layers.push_back({bind_constants(tape, layer.block), tape.constant(layer.norm_gain)});
    }
    ev.final_norm = tape.constant(p.final_norm);
    return ev;
}

namespace op {

Var selective_scan(Var x, Var dt, Var A, Var B, Var C, Var D_skip, ScanMode mode) {
    const Tensor& xv = x.value();
    const Tensor& av = A.value();
    require_rank(xv, 2, "selective_scan x");
    require_rank(av, 2, "selective_scan A");
    const std::size_t len = xv.dim(0), d = xv.dim(1), n = av.dim(1);
    require(av.dim(0) == d, ErrorKind::ShapeMismatch, "selective_scan A rows must equal inner width");
    require_shape(dt.value(), {len, d}, "selective_scan dt");
    require_shape(B.value(), {len, n}, "selective_scan B");
    require_shape(C.value(), {len, n}, "selective_scan C");
    require_shape(D_skip.value(), {d}, "selective_scan D_skip");
    Tape& tape = *x.tape();
    const Tensor& dtv = dt.value();
    const Tensor& bv = B.value();
    const Tensor& cv = C.value();
    const Tensor& dv = D_skip.value();

    const bool want_grad = tape.grad_enabled() &&
                           (tape.requires_grad(x) || tape.requires_grad(dt) || tape.requires_grad(A) ||
                            tape.requires_grad(B) || tape.requires_grad(C) || tape.requires_grad(D_skip));

    if (mode == ScanMode::Parallel && !want_grad) {
        FrozenScan fs{Tensor({len, d, n}), Tensor({len, d, n}), cv, dv};
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const Real step = dtv.at(t, i);
                    fs.a_bar.at(t, i, j) = std::exp(step * av.at(i, j));
                    fs.b_bar.at(t, i, j) = zoh_factor(step, av.at(i, j)) * bv.at(t, j);
                }
        Tensor y = scan_parallel(fs, xv.transposed()).transposed();
        return tape.record(std::move(y), {x, dt, A, B, C, D_skip}, nullptr);
    }

    Tensor y({len, d});
    Tensor states = want_grad ? Tensor({len, d, n}) : Tensor();
    std::vector<Real> h(d * n, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
        const Real* bt = bv.ptr() + t * n;
        const Real* ct = cv.ptr() + t * n;
        for (std::size_t i = 0; i < d; ++i) {
            const Real step = dtv.at(t, i);
            if (!(step > 0.0)) fail(ErrorKind::NonPositiveDt, "selective_scan dt must be positive");
            const Real xin = xv.at(t, i);
            const Real* ai = av.ptr() + i * n;
            Real* hi = h.data() + i * n;
            Real acc = dv[i] * xin;
            for (std::size_t j = 0; j < n; ++j) {
                hi[j] = std::exp(step * ai[j]) * hi[j] + zoh_factor(step, ai[j]) * bt[j] * xin;
                acc += ct[j] * hi[j];
            }
            y.at(t, i) = acc;
        }
        if (want_grad) std::copy(h.begin(), h.end(), states.ptr() + t * d * n);
    }

    return tape.record(
        std::move(y), {x, dt, A, B, C, D_skip},
        [x, dt, A, B, C, D_skip, states, len, d, n](Tape& tp, const Tensor& g, const Tensor&) {
            const Tensor& xv2 = tp.value(x);
            const Tensor& dtv2 = tp.value(dt);
            const Tensor& av2 = tp.value(A);
            const Tensor& bv2 = tp.value(B);
            const Tensor& cv2 = tp.value(C);
            const Tensor& dv2 = tp.value(D_skip);
            Tensor* gx = tp.requires_grad(x) ? &tp.grad_slot(x) : nullptr;
            Tensor* gdt = tp.requires_grad(dt) ? &tp.grad_slot(dt) : nullptr;
            Tensor* ga = tp.requires_grad(A) ? &tp.grad_slot(A) : nullptr;
            Tensor* gb = tp.requires_grad(B) ? &tp.grad_slot(B) : nullptr;
            Tensor* gc = tp.requires_grad(C) ? &tp.grad_slot(C) : nullptr;
            Tensor* gd = tp.requires_grad(D_skip) ? &tp.grad_slot(D_skip) : nullptr;

            // carry[i, j] = a_bar_{t+1} * dL/dh_{t+1}
            std::vector<Real> carry(d * n, 0.0);
            for (std::size_t t = len; t-- > 0;) {
                const Real* ht = states.ptr() + t * d * n;
                const Real* hprev = t > 0 ? states.ptr() + (t - 1) * d * n : nullptr;
                const Real* bt = bv2.ptr() + t * n;
                const Real* ct = cv2.ptr() + t * n;
                for (std::size_t i = 0; i < d; ++i) {
                    const Real gy = g.at(t, i);
                    const Real step = dtv2.at(t, i);
                    const Real xin = xv2.at(t, i);
                    const Real* ai = av2.ptr() + i * n;
                    Real gx_acc = gy * dv2[i];
                    Real gdt_acc = 0.0;
                    if (gd) (*gd)[i] += gy * xin;
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t lane = i * n + j;
                        const Real a = ai[j];
                        const Real z = step * a;
                        const Real abar = std::exp(z);
                        const bool small = std::abs(z) < kZohSmallThreshold;
                        const Real f = small ? step : std::expm1(z) / a;
                        const Real gh = gy * ct[j] + carry[lane];
                        if (gc) gc->at(t, j) += gy * ht[lane];
                        const Real hp = hprev ? hprev[lane] : 0.0;
                        const Real g_abar = gh * hp;
                        const Real g_f = gh * bt[j] * xin;
                        if (gb) gb->at(t, j) += gh * f * xin;
                        gx_acc += gh * f * bt[j];
                        gdt_acc += g_abar * a * abar + g_f * (small ? 1.0 : abar);
                        if (ga) {
                            const Real df_da = small ? 0.0 : (z * abar - std::expm1(z)) / (a * a);
                            (*ga)[lane] += g_abar * step * abar + g_f * df_da;
                        }
                        carry[lane] = abar * gh;
                    }
                    if (gx) gx->at(t, i) += gx_acc;
                    if (gdt) gdt->at(t, i) += gdt_acc;
                }
            }
        });
}

}  // namespace op

Var mamba_block(Var u, const MambaBlockVars& p, ScanMode mode) {
    const Tensor& w = p.in_proj.value();
    require_rank(w, 2, "in_proj");
    require(u.value().rank() == 2 && u.value().dim(1) == w.dim(1), ErrorKind::ShapeMismatch,
            "mamba_block input " + shape_str(u.shape()) + " does not match in_proj " + shape_str(w.shape()));
    require(w.dim(0) % 2 == 0, ErrorKind::ShapeMismatch, "in_proj must have 2 * D_mb rows");
    const std::size_t d_inner = w.dim(0) / 2;
    const std::size_t k = p.conv_weight.value().dim(1);

    Var xz = op::linear(u, p.in_proj);
    Var main = op::slice_cols(xz, 0, d_inner);
    Var gate = op::slice_cols(xz, d_inner, d_inner);
    Var xc = op::silu(op::depthwise_conv_time(main, p.conv_weight, p.conv_bias, k - 1));

    Var b = op::linear(xc, p.x_to_B);
    Var c = op::linear(xc, p.x_to_C);
    Var dt_raw = op::broadcast_cols(op::linear(xc, p.x_to_dt), d_inner);
    Var dt = op::softplus(op::add_rowvec(dt_raw, p.dt_bias));
    Var a = op::neg_exp(p.A_log);
    Var y = op::selective_scan(xc, dt, a, b, c, p.D_skip, mode);

    return op::linear(op::mul(y, op::silu(gate)), p.out_proj);
}

Var encoder_forward(Var tokens, const EncoderVars& enc, Real eps, ScanMode mode) {
    Var u = tokens;
    for (const auto& layer : enc.layers) {
        u = op::add(u, mamba_block(op::rmsnorm(u, layer.norm_gain, eps), layer.block, mode));
    }
    return op::rmsnorm(u, enc.final_norm, eps);
}

Tensor mamba_block(const Tensor& u, const MambaBlockParams& p, ScanMode mode) {
    Tape tape(false);
    return mamba_block(tape.constant(u), bind_constants(tape, p), mode).value();
}

Tensor encoder_forward(const Tensor& tokens, const EncoderParams& enc, Real eps, ScanMode mode) {
    Tape tape(false);
    return encoder_forward(tape.constant(tokens), bind_constants(tape, enc), eps, mode).value();
}

MambaBlockParams init_mamba_block(const MambaInitOptions& opts, std::mt19937_64& rng) {
    require(opts.d_model > 0 && opts.d_state > 0 && opts.expand > 0 && opts.conv_kernel > 0,
            ErrorKind::InvalidConfig, "mamba block dimensions must be positive");
    const std::size_t dm = opts.d_model, di = opts.expand * dm, n = opts.d_state, k = opts.conv_kernel;
    auto uniform = [&rng](Shape shape, Real bound) {
        std::uniform_real_distribution<Real> dist(-bound, bound);
        Tensor t(std::move(shape));
        for (auto& v : t.data()) v = dist(rng);
        return t;
    };
    MambaBlockParams p;
    p.in_proj = uniform({2 * di, dm}, 1.0 / std::sqrt(static_cast<Real>(dm)));
    p.conv_weight = uniform({di, k}, 1.0 / std::sqrt(static_cast<Real>(k)));
    p.conv_bias = Tensor({di});
    const Real inner_bound = 1.0 / std::sqrt(static_cast<Real>(di));
    p.ssm.x_to_B = uniform({n, di}, inner_bound);
    p.ssm.x_to_C = uniform({n, di}, inner_bound);
    p.ssm.x_to_dt = uniform({1, di}, inner_bound);
    p.ssm.A_log = Tensor({di, n});
    for (std::size_t i = 0; i < di; ++i)
        for (std::size_t j = 0; j < n; ++j) p.ssm.A_log.at(i, j) = std::log(static_cast<Real>(j + 1));
    // softplus(dt_bias) log-uniform in [dt_min, dt_max]
    p.ssm.dt_bias = Tensor({di});
    std::uniform_real_distribution<Real> unit(0.0, 1.0);
    const Real lo = std::log(opts.dt_min), hi = std::log(opts.dt_max);
    for (auto& v : p.ssm.dt_bias.data()) {
        const Real step = std::exp(lo + unit(rng) * (hi - lo));
        v = step + std::log(-std::expm1(-step));
    }
    p.ssm.D_skip = Tensor({di}, 1.0);
    p.out_proj = uniform({dm, di}, inner_bound);
    return p;
}

}  // namespace tsmamba
