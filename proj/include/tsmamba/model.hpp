#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tsmamba/autograd.hpp"
#include "tsmamba/ssm.hpp"
#include "tsmamba/tensor.hpp"

namespace tsmamba {

enum class CombineMode { Add, Concat };

struct ModelConfig {
    std::size_t lookback = 512;
    std::size_t horizon = 96;
    std::size_t patch_len = 16;
    std::size_t d_model = 768;
    std::size_t n_layers = 3;
    std::size_t d_state = 16;
    std::size_t expand = 2;
    std::size_t conv_kernel = 4;
    std::size_t head_dim = 64;
    std::size_t n_channels = 1;
    Real huber_delta = 1.0;
    Real norm_eps = 1e-5;
    Real revin_eps = 1e-8;
    bool xchannel_enabled = false;
    bool revin_affine = false;
    CombineMode combine = CombineMode::Add;

    std::size_t n_tokens() const { return lookback / patch_len; }
    std::size_t d_inner() const { return expand * d_model; }
    /// Width of the combined forward/backward representation.
    std::size_t rep_width() const { return combine == CombineMode::Add ? d_model : 2 * d_model; }
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Compressed channel count ceil(log2 D), clamped to at least 1.
std::size_t xchannel_dim(std::size_t n_channels);

struct NormStats {
    Tensor mean;  // [D]
    Tensor std;   // [D]
    Real eps = 1e-8;
};

struct Normalized {
    Tensor x_hat;  // [D, L]
    NormStats stats;
};

/// Per-channel (x - mean) / (std + eps) over the window; std is the population std.
Normalized revin_normalize(const Tensor& x, Real eps);
/// y_hat * (std + eps) + mean per channel.
Tensor revin_denormalize(const Tensor& y_hat, const NormStats& stats);

/// Strided convolution of one normalised channel [1, L] into tokens [L / p_l, D_m].
Tensor patch_embed(const Tensor& x_hat_channel, const Tensor& weight, const Tensor& bias);

/// Named parameters with stable addresses, iterated in insertion order.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor value, LrGroup group);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t size() const { return params_.size(); }
    std::deque<Parameter>& all() { return params_; }
    const std::deque<Parameter>& all() const { return params_; }
    std::vector<Parameter*> pointers();
    std::size_t numel() const;

private:
    std::deque<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

struct MambaBlockWeights {
    Parameter *in_proj, *conv_weight, *conv_bias;
    Parameter *A_log, *x_to_B, *x_to_C, *x_to_dt, *dt_bias, *D_skip;
    Parameter* out_proj;
};

struct EncoderWeights {
    std::vector<MambaBlockWeights> blocks;
    std::vector<Parameter*> norms;
    Parameter* final_norm = nullptr;
};

/// True for tensors inside a Mamba block (frozen during fine-tuning).
bool is_mamba_block_tensor(const std::string& name);

/// Forward/backward Mamba encoders over patch tokens, alignment convolution,
/// compress-then-project head, and the optional cross-channel attention used
/// when fine-tuning multivariate data.
class TSMambaModel {
public:
    TSMambaModel(const ModelConfig& config, std::uint64_t seed);
    /// Wraps existing parameters (e.g. from a checkpoint); names and shapes are validated.
    TSMambaModel(const ModelConfig& config, ParameterStore params);
    TSMambaModel(const TSMambaModel& other);
    TSMambaModel& operator=(const TSMambaModel& other);

    const ModelConfig& config() const { return config_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    /// Adds zero-initialised-expansion cross-channel attention for D channels.
    void enable_xchannel(std::size_t n_channels, std::mt19937_64& rng);
    /// Re-draws the prediction head weights.
    void reset_head(std::mt19937_64& rng);
    /// Copies `weights.layers.{i}.*` Mamba tensors into both encoders.
    void import_mamba_layers(const std::map<std::string, Tensor>& weights);

    Parameter& embed_weight() { return *embed_w_; }
    Parameter& embed_bias() { return *embed_b_; }
    const EncoderWeights& fwd_encoder() const { return fwd_; }
    const EncoderWeights& bwd_encoder() const { return bwd_; }

    /// Expected shape of every parameter for this config, keyed by name.
    static std::map<std::string, Shape> expected_shapes(const ModelConfig& config);

private:
    friend struct ModelVars;
    void create(std::mt19937_64& rng);
    void add_xchannel_params(std::mt19937_64& rng);
    void bind_parts();

    ModelConfig config_;
    ParameterStore params_;
    Parameter *embed_w_ = nullptr, *embed_b_ = nullptr;
    EncoderWeights fwd_, bwd_;
};

/// Every model parameter bound to one tape.
struct ModelVars {
    ModelVars(Tape& tape, TSMambaModel& model);
    ModelVars(Tape& tape, const TSMambaModel& model);

    Var embed_w, embed_b;
    EncoderVars fwd, bwd;
    Var align_w, align_b;
    Var head_compress_w, head_compress_b, head_out_w, head_out_b;
    bool has_xchannel = false;
    Var xc_time_w, xc_time_b, xc_compress_w, xc_compress_b, xc_query, xc_key, xc_value, xc_expand_w,
        xc_expand_b;
    bool has_affine = false;
    Var revin_gamma, revin_beta;

private:
    template <typename Model, typename Bind>
    void init(const Model& model, Bind bind);
};

struct ChannelRepVars {
    Var fwd;
    Var bwd_aligned;
    Var combined;
};

struct ForwardOptions {
    ScanMode scan = ScanMode::Sequential;
};

Var embed_tokens(Tape& tape, const ModelVars& v, const ModelConfig& cfg, Var x_hat_channel);
ChannelRepVars backbone_channel(Var tokens, const ModelVars& v, const ModelConfig& cfg,
                                const ForwardOptions& opts = {});
/// Stacked representations [D, L_tok * W] -> same shape with the attention correction added.
Var xchannel_forward(Var stacked, const ModelVars& v, const ModelConfig& cfg, std::size_t n_channels);
/// combined [L_tok, W] -> normalised forecast [1, T].
Var head_forward(Var combined, const ModelVars& v);

/// Normalised-space forecast [D, T] for normalised input x_hat [D, L].
Var forecast_normalized(Tape& tape, const ModelVars& v, const ModelConfig& cfg, const Tensor& x_hat,
                        const ForwardOptions& opts = {});

struct BackboneOutput {
    Tensor fwd_rep;          // [D, L_tok, D_m]
    Tensor bwd_rep_aligned;  // [D, L_tok, D_m]
    Tensor combined;         // [D, L_tok, W]
};

BackboneOutput backbone_forward(const TSMambaModel& model, const Tensor& x_hat, const ForwardOptions& opts = {});
Tensor xchannel_attention(const TSMambaModel& model, const Tensor& combined);
/// Attention weights [L_tok * D_c, D_c] of the cross-channel module for `combined`.
Tensor xchannel_attention_weights(const TSMambaModel& model, const Tensor& combined);
Tensor prediction_head(const TSMambaModel& model, const Tensor& combined, const NormStats& stats);
/// Raw-space forecast [D, T] for raw input x [D, L].
Tensor forecast(const TSMambaModel& model, const Tensor& x, const ForwardOptions& opts = {});

std::size_t head_parameter_count(const ModelConfig& cfg);

}  // namespace tsmamba
