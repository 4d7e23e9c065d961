#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "tsmamba/autograd.hpp"
#include "tsmamba/tensor.hpp"

namespace tsmamba {

enum class ScanMode { Sequential, Parallel };

/// Below this |dt * A| the ZOH input coefficient uses its first-order limit dt * B.
inline constexpr Real kZohSmallThreshold = 1e-6;

/// Selective SSM weights for one Mamba block. A = -exp(A_log) is diagonal
/// per inner channel, so every state decays.
struct SSMParams {
    Tensor A_log;    // [D_mb, N_st]
    Tensor x_to_B;   // [N_st, D_mb]
    Tensor x_to_C;   // [N_st, D_mb]
    Tensor x_to_dt;  // [1, D_mb]
    Tensor dt_bias;  // [D_mb]
    Tensor D_skip;   // [D_mb]

    std::size_t d_inner() const { return A_log.dim(0); }
    std::size_t d_state() const { return A_log.dim(1); }
    Tensor A() const;
    void validate() const;
};

struct MambaBlockParams {
    Tensor in_proj;      // [2 D_mb, D_m]; rows [0, D_mb) main branch, [D_mb, 2 D_mb) gate
    Tensor conv_weight;  // [D_mb, K_c], causal depthwise
    Tensor conv_bias;    // [D_mb]
    SSMParams ssm;
    Tensor out_proj;     // [D_m, D_mb]

    std::size_t d_model() const { return in_proj.dim(1); }
};

struct EncoderLayerParams {
    MambaBlockParams block;
    Tensor norm_gain;  // [D_m]
};

struct EncoderParams {
    std::vector<EncoderLayerParams> layers;
    Tensor final_norm;  // [D_m]
};

struct ZohCoefficients {
    Tensor A_bar;  // [D_mb, N_st]
    Tensor B_bar;  // [D_mb, N_st]
};

struct SelectiveStep {
    Tensor B;   // [N_st]
    Tensor C;   // [N_st]
    Tensor dt;  // [D_mb]
};

/// Elementwise zero-order hold: A_bar = exp(dt A), B_bar = (dt A)^-1 (exp(dt A) - 1) dt B.
ZohCoefficients discretize_zoh(const Tensor& A, const Tensor& B_t, const Tensor& dt_t);

/// Input-dependent B, C and step size for one inner-channel vector x_t [D_mb].
SelectiveStep selective_params(const Tensor& x_t, const SSMParams& ssm);

/// Per-step coefficients of the linear recurrence h_t = a_t * h_{t-1} + b_t * x_t,
/// y_t = <C_t, h_t> + D_skip * x_t. Held fixed, the scan is linear in x.
struct FrozenScan {
    Tensor a_bar;   // [L, D_mb, N_st]
    Tensor b_bar;   // [L, D_mb, N_st]
    Tensor C;       // [L, N_st]
    Tensor D_skip;  // [D_mb]

    std::size_t length() const { return a_bar.dim(0); }
    std::size_t d_inner() const { return a_bar.dim(1); }
    std::size_t d_state() const { return a_bar.dim(2); }
};

/// Discretises every step of x [D_mb, L] with its selective parameters.
FrozenScan freeze_scan(const Tensor& x, const SSMParams& ssm);

/// x [D_mb, L] -> y [D_mb, L]; initial state zero.
Tensor scan_sequential(const FrozenScan& coeffs, const Tensor& x);
/// Blelloch up/down sweep over (a, b) pairs per (channel, state) lane.
/// Lanes are distributed over `workers` threads (0 = configured default);
/// the result does not depend on the worker count.
Tensor scan_parallel(const FrozenScan& coeffs, const Tensor& x, std::size_t workers = 0);
/// Per-lane states h [L, D_mb, N_st] of the sequential recurrence.
Tensor scan_states(const FrozenScan& coeffs, const Tensor& x);

Tensor selective_scan_sequential(const Tensor& x, const SSMParams& ssm);
Tensor selective_scan_parallel(const Tensor& x, const SSMParams& ssm, std::size_t workers = 0);

/// Tape-bound views of the block weights.
struct MambaBlockVars {
    Var in_proj, conv_weight, conv_bias;
    Var A_log, x_to_B, x_to_C, x_to_dt, dt_bias, D_skip;
    Var out_proj;
};

struct EncoderLayerVars {
    MambaBlockVars block;
    Var norm_gain;
};

struct EncoderVars {
    std::vector<EncoderLayerVars> layers;
    Var final_norm;
};

MambaBlockVars bind_constants(Tape& tape, const MambaBlockParams& p);
EncoderVars bind_constants(Tape& tape, const EncoderParams& p);

namespace op {

/// Fused selective scan in token-major layout.
/// x, dt [L, D_mb]; A [D_mb, N]; B, C [L, N]; D_skip [D_mb] -> y [L, D_mb].
/// Gradients flow through the sequential recurrence in reverse time.
Var selective_scan(Var x, Var dt, Var A, Var B, Var C, Var D_skip, ScanMode mode = ScanMode::Sequential);

}  // namespace op

/// u [L_tok, D_m] -> [L_tok, D_m]; see the block layout in MambaBlockParams.
Var mamba_block(Var u, const MambaBlockVars& p, ScanMode mode = ScanMode::Sequential);
/// Pre-norm residual stack followed by a final RMSNorm.
Var encoder_forward(Var tokens, const EncoderVars& enc, Real eps, ScanMode mode = ScanMode::Sequential);

Tensor mamba_block(const Tensor& u, const MambaBlockParams& p, ScanMode mode = ScanMode::Sequential);
Tensor encoder_forward(const Tensor& tokens, const EncoderParams& enc, Real eps,
                       ScanMode mode = ScanMode::Sequential);

struct MambaInitOptions {
    std::size_t d_model = 0;
    std::size_t d_state = 16;
    std::size_t expand = 2;
    std::size_t conv_kernel = 4;
    Real dt_min = 1e-3;
    Real dt_max = 1e-1;
};

MambaBlockParams init_mamba_block(const MambaInitOptions& opts, std::mt19937_64& rng);

}  // namespace tsmamba
