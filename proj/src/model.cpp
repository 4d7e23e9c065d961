#include "tsmamba/model.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "tsmamba/error.hpp"
#include "tsmamba/ops.hpp"

namespace tsmamba {

namespace {

constexpr std::size_t kAlignKernel = 3;
constexpr std::size_t kXChannelKernel = 3;
constexpr Real kIdentityNoise = 0.02;

const char* const kBlockTensors[] = {"in_proj", "local_conv.weight", "local_conv.bias", "A_log", "x_to_B",
                                     "x_to_C",  "x_to_dt",           "dt_bias",         "D_skip", "out_proj"};

std::string layer_prefix(const std::string& encoder, std::size_t i) {
    return encoder + ".layer" + std::to_string(i);
}

Tensor uniform(Shape shape, Real bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<Real> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

/// Centre tap one, everything else small noise.
Tensor identity_taps(std::size_t rows, std::size_t k, std::mt19937_64& rng) {
    std::normal_distribution<Real> noise(0.0, kIdentityNoise);
    Tensor t({rows, k});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) t.at(r, j) = (j == k / 2 ? 1.0 : 0.0) + noise(rng);
    return t;
}

std::vector<Tensor> block_tensors(const MambaBlockParams& p) {
    return {p.in_proj,      p.conv_weight,    p.conv_bias,      p.ssm.A_log,  p.ssm.x_to_B,
            p.ssm.x_to_C,   p.ssm.x_to_dt,    p.ssm.dt_bias,    p.ssm.D_skip, p.out_proj};
}

}  // namespace

void ModelConfig::validate() const {
    require(lookback > 0 && horizon > 0 && patch_len > 0 && d_model > 0 && d_state > 0 && conv_kernel > 0 &&
                head_dim > 0 && n_channels > 0,
            ErrorKind::InvalidConfig, "model dimensions must be positive");
    require(lookback % patch_len == 0, ErrorKind::PatchLengthMismatch,
            "patch_len " + std::to_string(patch_len) + " does not divide lookback " + std::to_string(lookback));
    require(expand == 2, ErrorKind::InvalidConfig, "expand factor must be 2");
    require(head_dim < d_model, ErrorKind::InvalidConfig, "head_dim must be smaller than d_model");
    require(huber_delta > 0.0, ErrorKind::InvalidConfig, "huber_delta must be positive");
    require(norm_eps > 0.0 && revin_eps >= 0.0, ErrorKind::InvalidConfig, "eps values out of range");
    require(!xchannel_enabled || n_channels >= 2, ErrorKind::InvalidConfig,
            "cross-channel attention needs at least 2 channels");
}

std::size_t xchannel_dim(std::size_t n_channels) {
    require(n_channels >= 1, ErrorKind::InvalidConfig, "channel count must be positive");
    // ceil(log2 D) = bit width of D - 1
    const auto c = static_cast<std::size_t>(std::bit_width(n_channels - 1));
    return std::max<std::size_t>(1, c);
}

Normalized revin_normalize(const Tensor& x, Real eps) {
    require_rank(x, 2, "revin_normalize input");
    const std::size_t d = x.dim(0), len = x.dim(1);
    require(len >= 2, ErrorKind::DegenerateWindow, "normalisation window needs at least 2 points");
    Normalized out{Tensor::zeros_like(x), NormStats{Tensor({d}), Tensor({d}), eps}};
    for (std::size_t c = 0; c < d; ++c) {
        const Real* row = x.ptr() + c * len;
        Real mean = 0.0;
        for (std::size_t t = 0; t < len; ++t) mean += row[t];
        mean /= static_cast<Real>(len);
        Real var = 0.0;
        for (std::size_t t = 0; t < len; ++t) var += (row[t] - mean) * (row[t] - mean);
        const Real sd = std::sqrt(var / static_cast<Real>(len));
        out.stats.mean[c] = mean;
        out.stats.std[c] = sd;
        const Real denom = sd + eps;
        Real* dst = out.x_hat.ptr() + c * len;
        for (std::size_t t = 0; t < len; ++t) dst[t] = denom > 0.0 ? (row[t] - mean) / denom : 0.0;
    }
    return out;
}

Tensor revin_denormalize(const Tensor& y_hat, const NormStats& stats) {
    require_rank(y_hat, 2, "revin_denormalize input");
    const std::size_t d = y_hat.dim(0), len = y_hat.dim(1);
    require(stats.mean.size() == d && stats.std.size() == d, ErrorKind::ShapeMismatch,
            "normalisation stats cover " + std::to_string(stats.mean.size()) + " channels, forecast has " +
                std::to_string(d));
    Tensor y = y_hat;
    for (std::size_t c = 0; c < d; ++c) {
        const Real s = stats.std[c] + stats.eps, m = stats.mean[c];
        for (std::size_t t = 0; t < len; ++t) y.at(c, t) = y.at(c, t) * s + m;
    }
    return y;
}

Tensor patch_embed(const Tensor& x_hat_channel, const Tensor& weight, const Tensor& bias) {
    require(x_hat_channel.rank() == 2 && x_hat_channel.dim(0) == 1, ErrorKind::ShapeMismatch,
            "patch_embed expects one channel [1, L], got " + shape_str(x_hat_channel.shape()));
    require_rank(weight, 3, "patch_embed weight");
    const std::size_t p = weight.dim(2);
    require(x_hat_channel.dim(1) % p == 0, ErrorKind::PatchLengthMismatch,
            "patch length " + std::to_string(p) + " does not divide " + std::to_string(x_hat_channel.dim(1)));
    return conv1d(x_hat_channel, weight, bias, p, 0).transposed();
}

// ---------------------------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Tensor value, LrGroup group) {
    require(!index_.count(name), ErrorKind::InvalidConfig, "duplicate parameter name " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(value), {}, true, group});
    return params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParameterStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParameterStore::at(const std::string& name) {
    Parameter* p = find(name);
    require(p != nullptr, ErrorKind::CheckpointMismatch, "missing parameter " + name);
    return *p;
}

const Parameter& ParameterStore::at(const std::string& name) const {
    const Parameter* p = find(name);
    require(p != nullptr, ErrorKind::CheckpointMismatch, "missing parameter " + name);
    return *p;
}

std::vector<Parameter*> ParameterStore::pointers() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::size_t ParameterStore::numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

bool is_mamba_block_tensor(const std::string& name) { return name.find(".mamba.") != std::string::npos; }

// ---------------------------------------------------------------------------

std::map<std::string, Shape> TSMambaModel::expected_shapes(const ModelConfig& c) {
    std::map<std::string, Shape> s;
    const std::size_t dm = c.d_model, di = c.d_inner(), n = c.d_state, w = c.rep_width();
    s["embed.weight"] = {dm, 1, c.patch_len};
    s["embed.bias"] = {dm};
    for (const char* enc : {"fwd_encoder", "bwd_encoder"}) {
        for (std::size_t i = 0; i < c.n_layers; ++i) {
            const std::string pre = layer_prefix(enc, i);
            s[pre + ".norm.gain"] = {dm};
            s[pre + ".mamba.in_proj"] = {2 * di, dm};
            s[pre + ".mamba.local_conv.weight"] = {di, c.conv_kernel};
            s[pre + ".mamba.local_conv.bias"] = {di};
            s[pre + ".mamba.A_log"] = {di, n};
            s[pre + ".mamba.x_to_B"] = {n, di};
            s[pre + ".mamba.x_to_C"] = {n, di};
            s[pre + ".mamba.x_to_dt"] = {1, di};
            s[pre + ".mamba.dt_bias"] = {di};
            s[pre + ".mamba.D_skip"] = {di};
            s[pre + ".mamba.out_proj"] = {dm, di};
        }
        s[std::string(enc) + ".final_norm.gain"] = {dm};
    }
    s["align.weight"] = {dm, kAlignKernel};
    s["align.bias"] = {dm};
    s["head.compress.weight"] = {c.head_dim, w};
    s["head.compress.bias"] = {c.head_dim};
    s["head.out.weight"] = {c.horizon, c.n_tokens() * c.head_dim};
    s["head.out.bias"] = {c.horizon};
    if (c.xchannel_enabled) {
        const std::size_t d = c.n_channels, dc = xchannel_dim(d);
        s["xchannel.time.weight"] = {d, kXChannelKernel};
        s["xchannel.time.bias"] = {d};
        s["xchannel.compress.weight"] = {dc, d};
        s["xchannel.compress.bias"] = {dc};
        s["xchannel.query"] = {w, w};
        s["xchannel.key"] = {w, w};
        s["xchannel.value"] = {w, w};
        s["xchannel.expand.weight"] = {d, dc};
        s["xchannel.expand.bias"] = {d};
    }
    if (c.revin_affine) {
        s["revin.gamma"] = {c.n_channels};
        s["revin.beta"] = {c.n_channels};
    }
    return s;
}

TSMambaModel::TSMambaModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    create(rng);
    bind_parts();
}

TSMambaModel::TSMambaModel(const ModelConfig& config, ParameterStore params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    const auto shapes = expected_shapes(config_);
    for (const auto& [name, shape] : shapes) {
        const Parameter* p = params_.find(name);
        require(p != nullptr, ErrorKind::CheckpointMismatch, "missing tensor " + name);
        require(p->value.shape() == shape, ErrorKind::CheckpointMismatch,
                "tensor " + name + " has shape " + shape_str(p->value.shape()) + ", config expects " +
                    shape_str(shape));
    }
    for (const auto& p : params_.all()) {
        require(shapes.count(p.name) > 0, ErrorKind::CheckpointMismatch, "unexpected tensor " + p.name);
    }
    bind_parts();
}

TSMambaModel::TSMambaModel(const TSMambaModel& other) : config_(other.config_), params_(other.params_) {
    bind_parts();
}

TSMambaModel& TSMambaModel::operator=(const TSMambaModel& other) {
    if (this != &other) {
        config_ = other.config_;
        params_ = other.params_;
        bind_parts();
    }
    return *this;
}

void TSMambaModel::create(std::mt19937_64& rng) {
    const auto& c = config_;
    const std::size_t dm = c.d_model;
    params_.add("embed.weight", uniform({dm, 1, c.patch_len}, 1.0 / std::sqrt(static_cast<Real>(c.patch_len)), rng),
                LrGroup::Backbone);
    params_.add("embed.bias", Tensor({dm}), LrGroup::Backbone);
    MambaInitOptions mopts{dm, c.d_state, c.expand, c.conv_kernel};
    for (const char* enc : {"fwd_encoder", "bwd_encoder"}) {
        for (std::size_t i = 0; i < c.n_layers; ++i) {
            const std::string pre = layer_prefix(enc, i);
            params_.add(pre + ".norm.gain", Tensor({dm}, 1.0), LrGroup::Backbone);
            const auto tensors = block_tensors(init_mamba_block(mopts, rng));
            for (std::size_t k = 0; k < tensors.size(); ++k) {
                params_.add(pre + ".mamba." + kBlockTensors[k], tensors[k], LrGroup::Backbone);
            }
        }
        params_.add(std::string(enc) + ".final_norm.gain", Tensor({dm}, 1.0), LrGroup::Backbone);
    }
    params_.add("align.weight", identity_taps(dm, kAlignKernel, rng), LrGroup::New);
    params_.add("align.bias", Tensor({dm}), LrGroup::New);
    params_.add("head.compress.weight", Tensor({c.head_dim, c.rep_width()}), LrGroup::New);
    params_.add("head.compress.bias", Tensor({c.head_dim}), LrGroup::New);
    params_.add("head.out.weight", Tensor({c.horizon, c.n_tokens() * c.head_dim}), LrGroup::New);
    params_.add("head.out.bias", Tensor({c.horizon}), LrGroup::New);
    reset_head(rng);
    if (c.revin_affine) {
        params_.add("revin.gamma", Tensor({c.n_channels}, 1.0), LrGroup::New);
        params_.add("revin.beta", Tensor({c.n_channels}), LrGroup::New);
    }
    if (c.xchannel_enabled) add_xchannel_params(rng);
}

void TSMambaModel::reset_head(std::mt19937_64& rng) {
    const auto& c = config_;
    params_.at("head.compress.weight").value = uniform({c.head_dim, c.rep_width()},
                                                       1.0 / std::sqrt(static_cast<Real>(c.rep_width())), rng);
    params_.at("head.compress.bias").value = Tensor({c.head_dim});
    const std::size_t fan_in = c.n_tokens() * c.head_dim;
    params_.at("head.out.weight").value =
        uniform({c.horizon, fan_in}, 1.0 / std::sqrt(static_cast<Real>(fan_in)), rng);
    params_.at("head.out.bias").value = Tensor({c.horizon});
}

void TSMambaModel::add_xchannel_params(std::mt19937_64& rng) {
    const std::size_t d = config_.n_channels, dc = xchannel_dim(d), w = config_.rep_width();
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(w));
    params_.add("xchannel.time.weight", identity_taps(d, kXChannelKernel, rng), LrGroup::New);
    params_.add("xchannel.time.bias", Tensor({d}), LrGroup::New);
    params_.add("xchannel.compress.weight", uniform({dc, d}, 1.0 / std::sqrt(static_cast<Real>(d)), rng),
                LrGroup::New);
    params_.add("xchannel.compress.bias", Tensor({dc}), LrGroup::New);
    params_.add("xchannel.query", uniform({w, w}, bound, rng), LrGroup::New);
    params_.add("xchannel.key", uniform({w, w}, bound, rng), LrGroup::New);
    params_.add("xchannel.value", uniform({w, w}, bound, rng), LrGroup::New);
    // Zero expansion: the module starts as an exact identity.
    params_.add("xchannel.expand.weight", Tensor({d, dc}), LrGroup::New);
    params_.add("xchannel.expand.bias", Tensor({d}), LrGroup::New);
}

void TSMambaModel::enable_xchannel(std::size_t n_channels, std::mt19937_64& rng) {
    require(!config_.xchannel_enabled, ErrorKind::InvalidConfig, "cross-channel attention already enabled");
    require(n_channels >= 2, ErrorKind::InvalidConfig, "cross-channel attention needs at least 2 channels");
    require(!config_.revin_affine || n_channels == config_.n_channels, ErrorKind::InvalidConfig,
            "affine normalisation is sized for " + std::to_string(config_.n_channels) + " channels");
    config_.n_channels = n_channels;
    config_.xchannel_enabled = true;
    add_xchannel_params(rng);
    bind_parts();
}

void TSMambaModel::import_mamba_layers(const std::map<std::string, Tensor>& weights) {
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
        for (const char* t : kBlockTensors) {
            const std::string src = "layers." + std::to_string(i) + "." + t;
            auto it = weights.find(src);
            require(it != weights.end(), ErrorKind::CheckpointMismatch, "import is missing " + src);
            for (const char* enc : {"fwd_encoder", "bwd_encoder"}) {
                Parameter& p = params_.at(layer_prefix(enc, i) + ".mamba." + t);
                require(p.value.shape() == it->second.shape(), ErrorKind::CheckpointMismatch,
                        src + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                            shape_str(p.value.shape()));
                p.value = it->second;
            }
        }
        const std::string norm = "layers." + std::to_string(i) + ".norm.gain";
        if (auto it = weights.find(norm); it != weights.end()) {
            for (const char* enc : {"fwd_encoder", "bwd_encoder"}) {
                Parameter& p = params_.at(layer_prefix(enc, i) + ".norm.gain");
                require(p.value.shape() == it->second.shape(), ErrorKind::CheckpointMismatch,
                        norm + " shape mismatch");
                p.value = it->second;
            }
        }
    }
}

void TSMambaModel::bind_parts() {
    embed_w_ = &params_.at("embed.weight");
    embed_b_ = &params_.at("embed.bias");
    for (auto [enc, target] : {std::pair{"fwd_encoder", &fwd_}, std::pair{"bwd_encoder", &bwd_}}) {
        target->blocks.clear();
        target->norms.clear();
        for (std::size_t i = 0; i < config_.n_layers; ++i) {
            const std::string pre = layer_prefix(enc, i) + ".mamba.";
            target->norms.push_back(&params_.at(layer_prefix(enc, i) + ".norm.gain"));
            target->blocks.push_back(MambaBlockWeights{
                &params_.at(pre + "in_proj"), &params_.at(pre + "local_conv.weight"),
                &params_.at(pre + "local_conv.bias"), &params_.at(pre + "A_log"), &params_.at(pre + "x_to_B"),
                &params_.at(pre + "x_to_C"), &params_.at(pre + "x_to_dt"), &params_.at(pre + "dt_bias"),
                &params_.at(pre + "D_skip"), &params_.at(pre + "out_proj")});
        }
        target->final_norm = &params_.at(std::string(enc) + ".final_norm.gain");
    }
}

// ---------------------------------------------------------------------------

template <typename Model, typename Bind>
void ModelVars::init(const Model& model, Bind bind) {
    const auto& c = model.config();
    const auto& ps = model.params();
    auto get = [&](const std::string& name) { return bind(ps.at(name)); };
    embed_w = get("embed.weight");
    embed_b = get("embed.bias");
    for (auto [enc, target] : {std::pair{"fwd_encoder", &fwd}, std::pair{"bwd_encoder", &bwd}}) {
        for (std::size_t i = 0; i < c.n_layers; ++i) {
            const std::string pre = layer_prefix(enc, i);
            const std::string m = pre + ".mamba.";
            target->layers.push_back(EncoderLayerVars{
                MambaBlockVars{get(m + "in_proj"), get(m + "local_conv.weight"), get(m + "local_conv.bias"),
                               get(m + "A_log"), get(m + "x_to_B"), get(m + "x_to_C"), get(m + "x_to_dt"),
                               get(m + "dt_bias"), get(m + "D_skip"), get(m + "out_proj")},
                get(pre + ".norm.gain")});
        }
        target->final_norm = get(std::string(enc) + ".final_norm.gain");
    }
    align_w = get("align.weight");
    align_b = get("align.bias");
    head_compress_w = get("head.compress.weight");
    head_compress_b = get("head.compress.bias");
    head_out_w = get("head.out.weight");
    head_out_b = get("head.out.bias");
    has_xchannel = c.xchannel_enabled;
    if (has_xchannel) {
        xc_time_w = get("xchannel.time.weight");
        xc_time_b = get("xchannel.time.bias");
        xc_compress_w = get("xchannel.compress.weight");
        xc_compress_b = get("xchannel.compress.bias");
        xc_query = get("xchannel.query");
        xc_key = get("xchannel.key");
        xc_value = get("xchannel.value");
        xc_expand_w = get("xchannel.expand.weight");
        xc_expand_b = get("xchannel.expand.bias");
    }
    has_affine = c.revin_affine;
    if (has_affine) {
        revin_gamma = get("revin.gamma");
        revin_beta = get("revin.beta");
    }
}

ModelVars::ModelVars(Tape& tape, TSMambaModel& model) {
    init(model, [&tape](const Parameter& p) { return tape.param(const_cast<Parameter&>(p)); });
}

ModelVars::ModelVars(Tape& tape, const TSMambaModel& model) {
    init(model, [&tape](const Parameter& p) { return tape.constant(p.value); });
}

Var embed_tokens(Tape&, const ModelVars& v, const ModelConfig& cfg, Var x_hat_channel) {
    require(x_hat_channel.value().rank() == 2 && x_hat_channel.value().dim(0) == 1, ErrorKind::ShapeMismatch,
            "embedding expects one channel [1, L]");
    require(x_hat_channel.value().dim(1) % cfg.patch_len == 0, ErrorKind::PatchLengthMismatch,
            "patch length does not divide the input length");
    return op::transpose(op::conv1d(x_hat_channel, v.embed_w, v.embed_b, cfg.patch_len, 0));
}

ChannelRepVars backbone_channel(Var tokens, const ModelVars& v, const ModelConfig& cfg, const ForwardOptions& opts) {
    ChannelRepVars r;
    r.fwd = encoder_forward(tokens, v.fwd, cfg.norm_eps, opts.scan);
    Var bwd = encoder_forward(op::flip_rows(tokens), v.bwd, cfg.norm_eps, opts.scan);
    r.bwd_aligned = op::depthwise_conv_time(op::flip_rows(bwd), v.align_w, v.align_b, kAlignKernel / 2);
    r.combined = cfg.combine == CombineMode::Add ? op::add(r.fwd, r.bwd_aligned) : op::concat_cols(r.fwd, r.bwd_aligned);
    return r;
}

namespace {

struct XChannelInternals {
    Var query, key, value;
    std::size_t tokens, compressed, width;
};

XChannelInternals xchannel_qkv(Var stacked, const ModelVars& v, const ModelConfig& cfg, std::size_t n_channels) {
    require(v.has_xchannel, ErrorKind::InvalidConfig, "cross-channel attention is not enabled");
    require(n_channels >= 2, ErrorKind::InvalidConfig, "cross-channel attention needs at least 2 channels");
    require(n_channels == cfg.n_channels, ErrorKind::ShapeMismatch,
            "cross-channel attention was built for " + std::to_string(cfg.n_channels) + " channels, got " +
                std::to_string(n_channels));
    const std::size_t tokens = cfg.n_tokens(), w = cfg.rep_width(), dc = xchannel_dim(n_channels);
    Var shifted = op::group_time_conv(stacked, v.xc_time_w, v.xc_time_b, n_channels, tokens, kXChannelKernel / 2);
    Var compressed = op::mix_rows(v.xc_compress_w, shifted, v.xc_compress_b);
    Var per_token = op::reshape(op::swap_axes01(compressed, dc, tokens, w), {tokens * dc, w});
    return {op::linear(per_token, v.xc_query), op::linear(per_token, v.xc_key), op::linear(per_token, v.xc_value),
            tokens, dc, w};
}

}  // namespace

Var xchannel_forward(Var stacked, const ModelVars& v, const ModelConfig& cfg, std::size_t n_channels) {
    const XChannelInternals x = xchannel_qkv(stacked, v, cfg, n_channels);
    Var attended = op::grouped_attention(x.query, x.key, x.value, x.tokens);
    Var channel_major = op::reshape(op::swap_axes01(attended, x.tokens, x.compressed, x.width),
                                    {x.compressed, x.tokens * x.width});
    Var correction = op::mix_rows(v.xc_expand_w, channel_major, v.xc_expand_b);
    return op::add(stacked, correction);
}

Var head_forward(Var combined, const ModelVars& v) {
    Var h = op::gelu(op::linear(combined, v.head_compress_w, v.head_compress_b));
    Var flat = op::reshape(h, {1, h.value().size()});
    return op::linear(flat, v.head_out_w, v.head_out_b);
}

namespace {

Var channel_scalar(Var vec, std::size_t c) {
    return op::reshape(op::slice_rows(op::reshape(vec, {vec.value().size(), 1}), c, 1), {1});
}

}  // namespace

Var forecast_normalized(Tape& tape, const ModelVars& v, const ModelConfig& cfg, const Tensor& x_hat,
                        const ForwardOptions& opts) {
    require_rank(x_hat, 2, "forecast input");
    const std::size_t d = x_hat.dim(0);
    require(x_hat.dim(1) == cfg.lookback, ErrorKind::ShapeMismatch,
            "input length " + std::to_string(x_hat.dim(1)) + " does not match lookback " +
                std::to_string(cfg.lookback));
    require(!v.has_affine || d == cfg.n_channels, ErrorKind::ShapeMismatch,
            "affine normalisation was built for " + std::to_string(cfg.n_channels) + " channels");
    std::vector<Var> combined(d);
    for (std::size_t c = 0; c < d; ++c) {
        Var xc = tape.constant(x_hat.rows(c, 1));
        if (v.has_affine) xc = op::scale_shift(xc, channel_scalar(v.revin_gamma, c), channel_scalar(v.revin_beta, c));
        combined[c] = backbone_channel(embed_tokens(tape, v, cfg, xc), v, cfg, opts).combined;
    }
    if (v.has_xchannel) {
        const std::size_t tokens = cfg.n_tokens(), w = cfg.rep_width();
        std::vector<Var> rows(d);
        for (std::size_t c = 0; c < d; ++c) rows[c] = op::reshape(combined[c], {1, tokens * w});
        Var mixed = xchannel_forward(op::concat_rows(rows), v, cfg, d);
        for (std::size_t c = 0; c < d; ++c) combined[c] = op::reshape(op::slice_rows(mixed, c, 1), {tokens, w});
    }
    std::vector<Var> outs(d);
    for (std::size_t c = 0; c < d; ++c) {
        outs[c] = head_forward(combined[c], v);
        if (v.has_affine)
            outs[c] = op::unscale_shift(outs[c], channel_scalar(v.revin_gamma, c), channel_scalar(v.revin_beta, c));
    }
    return op::concat_rows(outs);
}

BackboneOutput backbone_forward(const TSMambaModel& model, const Tensor& x_hat, const ForwardOptions& opts) {
    const auto& cfg = model.config();
    require_rank(x_hat, 2, "backbone input");
    const std::size_t d = x_hat.dim(0), tokens = x_hat.dim(1) / cfg.patch_len;
    Tape tape(false);
    ModelVars v(tape, model);
    BackboneOutput out{Tensor({d, tokens, cfg.d_model}), Tensor({d, tokens, cfg.d_model}),
                       Tensor({d, tokens, cfg.rep_width()})};
    for (std::size_t c = 0; c < d; ++c) {
        Var xc = tape.constant(x_hat.rows(c, 1));
        const auto r = backbone_channel(embed_tokens(tape, v, cfg, xc), v, cfg, opts);
        std::copy_n(r.fwd.value().ptr(), r.fwd.value().size(), out.fwd_rep.ptr() + c * r.fwd.value().size());
        std::copy_n(r.bwd_aligned.value().ptr(), r.bwd_aligned.value().size(),
                    out.bwd_rep_aligned.ptr() + c * r.bwd_aligned.value().size());
        std::copy_n(r.combined.value().ptr(), r.combined.value().size(),
                    out.combined.ptr() + c * r.combined.value().size());
    }
    return out;
}

Tensor xchannel_attention(const TSMambaModel& model, const Tensor& combined) {
    require_rank(combined, 3, "xchannel input");
    const std::size_t d = combined.dim(0);
    Tape tape(false);
    ModelVars v(tape, model);
    Var stacked = tape.constant(combined.reshaped({d, combined.dim(1) * combined.dim(2)}));
    return xchannel_forward(stacked, v, model.config(), d).value().reshaped(combined.shape());
}

Tensor xchannel_attention_weights(const TSMambaModel& model, const Tensor& combined) {
    require_rank(combined, 3, "xchannel input");
    const std::size_t d = combined.dim(0);
    Tape tape(false);
    ModelVars v(tape, model);
    Var stacked = tape.constant(combined.reshaped({d, combined.dim(1) * combined.dim(2)}));
    const auto x = xchannel_qkv(stacked, v, model.config(), d);
    return op::grouped_attention_weights(x.query.value(), x.key.value(), x.tokens);
}

Tensor prediction_head(const TSMambaModel& model, const Tensor& combined, const NormStats& stats) {
    require_rank(combined, 3, "prediction_head input");
    const std::size_t d = combined.dim(0), tokens = combined.dim(1), w = combined.dim(2);
    Tape tape(false);
    ModelVars v(tape, model);
    std::vector<Var> outs;
    for (std::size_t c = 0; c < d; ++c) {
        Tensor slice({tokens, w}, std::vector<Real>(combined.ptr() + c * tokens * w,
                                                     combined.ptr() + (c + 1) * tokens * w));
        outs.push_back(head_forward(tape.constant(std::move(slice)), v));
    }
    return revin_denormalize(op::concat_rows(outs).value(), stats);
}

Tensor forecast(const TSMambaModel& model, const Tensor& x, const ForwardOptions& opts) {
    const auto& cfg = model.config();
    require_rank(x, 2, "forecast input");
    const Normalized n = revin_normalize(x, cfg.revin_eps);
    Tape tape(false);
    ModelVars v(tape, model);
    return revin_denormalize(forecast_normalized(tape, v, cfg, n.x_hat, opts).value(), n.stats);
}

std::size_t head_parameter_count(const ModelConfig& cfg) {
    return cfg.rep_width() * cfg.head_dim + cfg.head_dim + cfg.n_tokens() * cfg.head_dim * cfg.horizon + cfg.horizon;
}

}  // namespace tsmamba
