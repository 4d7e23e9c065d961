#include "tsmamba/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <numeric>
#include <random>
#include <unordered_map>

#include "tsmamba/error.hpp"
#include "tsmamba/ops.hpp"
#include "tsmamba/parallel.hpp"

namespace tsmamba {

std::string_view to_string(Stage stage) {
    switch (stage) {
        case Stage::Stage1: return "stage1";
        case Stage::Stage2: return "stage2";
        case Stage::Finetune: return "finetune";
    }
    return "unknown";
}

StageConfig StageConfig::defaults(Stage stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
        case Stage::Stage1:
            c.lr_new = c.lr_backbone = 1e-3;
            break;
        case Stage::Stage2:
            c.lr_new = 1e-3;
            c.lr_backbone = 1e-5;
            break;
        case Stage::Finetune:
            c.lr_new = c.lr_backbone = 5e-4;
            c.freeze_mamba_blocks = true;
            break;
    }
    return c;
}

void StageConfig::validate() const {
    require(lr_new >= 0.0 && lr_backbone >= 0.0, ErrorKind::InvalidConfig, "learning rates must be non-negative");
    require(batch_size >= 1, ErrorKind::InvalidConfig, "batch_size must be >= 1");
    require(window_stride >= 1, ErrorKind::InvalidConfig, "window_stride must be >= 1");
    require(grad_clip_norm > 0.0, ErrorKind::InvalidConfig, "grad_clip_norm must be positive");
    require(weight_decay >= 0.0, ErrorKind::InvalidConfig, "weight_decay must be non-negative");
    if (stage == Stage::Stage2) {
        require(lr_backbone <= lr_new, ErrorKind::InvalidConfig, "stage 2 requires lr_backbone <= lr_new");
    }
    if (stage == Stage::Finetune) {
        require(freeze_mamba_blocks, ErrorKind::InvalidConfig, "fine-tuning requires frozen Mamba blocks");
    }
}

// ---------------------------------------------------------------------------

void AdamW::step(std::span<Parameter* const> params, Real lr_new, Real lr_backbone) {
    ++t_;
    const Real bc1 = 1.0 - std::pow(config_.beta1, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(config_.beta2, static_cast<Real>(t_));
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        require(!p->grad.empty(), ErrorKind::MissingGrad, "trainable parameter " + p->name + " has no gradient");
        require(p->grad.shape() == p->value.shape(), ErrorKind::ShapeMismatch, "gradient shape of " + p->name);
        auto& st = state_[p->name];
        if (st.m.empty()) {
            st.m = Tensor::zeros_like(p->value);
            st.v = Tensor::zeros_like(p->value);
        }
        const Real lr = p->lr_group == LrGroup::New ? lr_new : lr_backbone;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const Real g = p->grad[i];
            st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * g;
            st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * g * g;
            const Real m_hat = st.m[i] / bc1;
            const Real v_hat = st.v[i] / bc2;
            p->value[i] -= lr * (m_hat / (std::sqrt(v_hat) + config_.eps) + config_.weight_decay * p->value[i]);
        }
    }
}

Real clip_grad_norm(std::span<Parameter* const> params, Real max_norm) {
    Real sq = 0.0;
    for (const Parameter* p : params) {
        if (!p->trainable || p->grad.empty()) continue;
        for (Real g : p->grad.data()) sq += g * g;
    }
    const Real norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const Real s = max_norm / norm;
        for (Parameter* p : params) {
            if (!p->trainable || p->grad.empty()) continue;
            for (Real& g : p->grad.data()) g *= s;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------

Stage1Heads::Stage1Heads(const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(config.d_model));
    std::uniform_real_distribution<Real> dist(-bound, bound);
    auto draw = [&](Shape s) {
        Tensor t(std::move(s));
        for (auto& v : t.data()) v = dist(rng);
        return t;
    };
    params_.add("stage1.next_patch.weight", draw({config.patch_len, config.d_model}), LrGroup::New);
    params_.add("stage1.next_patch.bias", Tensor({config.patch_len}), LrGroup::New);
    params_.add("stage1.prev_patch.weight", draw({config.patch_len, config.d_model}), LrGroup::New);
    params_.add("stage1.prev_patch.bias", Tensor({config.patch_len}), LrGroup::New);
}

Stage1HeadVars::Stage1HeadVars(Tape& tape, Stage1Heads& heads)
    : next_w(tape.param(heads.params().at("stage1.next_patch.weight"))),
      next_b(tape.param(heads.params().at("stage1.next_patch.bias"))),
      prev_w(tape.param(heads.params().at("stage1.prev_patch.weight"))),
      prev_b(tape.param(heads.params().at("stage1.prev_patch.bias"))) {}

Stage1HeadVars::Stage1HeadVars(Tape& tape, const Stage1Heads& heads)
    : next_w(tape.constant(heads.params().at("stage1.next_patch.weight").value)),
      next_b(tape.constant(heads.params().at("stage1.next_patch.bias").value)),
      prev_w(tape.constant(heads.params().at("stage1.prev_patch.weight").value)),
      prev_b(tape.constant(heads.params().at("stage1.prev_patch.bias").value)) {}

Tensor normalize_target(const Tensor& target, const NormStats& stats) {
    require_rank(target, 2, "target");
    require(target.dim(0) == stats.mean.size(), ErrorKind::ShapeMismatch, "target channel count mismatch");
    Tensor out = target;
    for (std::size_t c = 0; c < target.dim(0); ++c) {
        const Real s = stats.std[c] + stats.eps;
        for (std::size_t t = 0; t < target.dim(1); ++t)
            out.at(c, t) = s > 0.0 ? (target.at(c, t) - stats.mean[c]) / s : 0.0;
    }
    return out;
}

Var stage1_loss(Tape& tape, const ModelVars& mv, const Stage1HeadVars& heads, const ModelConfig& cfg,
                const Tensor& window) {
    require_rank(window, 2, "stage-1 window");
    require(window.dim(1) == cfg.lookback, ErrorKind::ShapeMismatch, "stage-1 window length must equal lookback");
    const std::size_t tokens = cfg.n_tokens();
    require(tokens >= 2, ErrorKind::InsufficientPatches,
            "stage 1 needs at least 2 patches, window has " + std::to_string(tokens));
    const Normalized n = revin_normalize(window, cfg.revin_eps);
    std::vector<Var> preds, targets;
    for (std::size_t c = 0; c < window.dim(0); ++c) {
        Var xc = tape.constant(n.x_hat.rows(c, 1));
        Var patches = tape.constant(n.x_hat.rows(c, 1).reshaped({tokens, cfg.patch_len}));
        const ChannelRepVars rep = backbone_channel(embed_tokens(tape, mv, cfg, xc), mv, cfg);
        preds.push_back(op::linear(op::slice_rows(rep.fwd, 0, tokens - 1), heads.next_w, heads.next_b));
        targets.push_back(op::slice_rows(patches, 1, tokens - 1));
        preds.push_back(op::linear(op::slice_rows(rep.bwd_aligned, 1, tokens - 1), heads.prev_w, heads.prev_b));
        targets.push_back(op::slice_rows(patches, 0, tokens - 1));
    }
    return op::huber_loss(op::concat_rows(preds), op::concat_rows(targets), cfg.huber_delta);
}

Var stage2_loss(Tape& tape, const ModelVars& mv, const ModelConfig& cfg, const WindowSample& sample) {
    require(sample.target.rank() == 2 && sample.target.dim(1) == cfg.horizon, ErrorKind::ShapeMismatch,
            "target length must equal the model horizon " + std::to_string(cfg.horizon));
    require(sample.target.dim(0) == sample.input.dim(0), ErrorKind::ShapeMismatch,
            "input and target channel counts differ");
    const Normalized n = revin_normalize(sample.input, cfg.revin_eps);
    Var pred = forecast_normalized(tape, mv, cfg, n.x_hat);
    Var target = tape.constant(normalize_target(sample.target, n.stats));
    return op::huber_loss(pred, target, cfg.huber_delta);
}

Real stage1_loss(const TSMambaModel& model, const Stage1Heads& heads, std::span<const Tensor> windows) {
    require(!windows.empty(), ErrorKind::DataError, "no windows");
    Real acc = 0.0;
    for (const Tensor& w : windows) {
        Tape tape(false);
        ModelVars mv(tape, model);
        Stage1HeadVars hv(tape, heads);
        acc += stage1_loss(tape, mv, hv, model.config(), w).value()[0];
    }
    return acc / static_cast<Real>(windows.size());
}

Real stage2_loss(const TSMambaModel& model, std::span<const WindowSample> samples) {
    require(!samples.empty(), ErrorKind::DataError, "no samples");
    Real acc = 0.0;
    for (const WindowSample& s : samples) {
        Tape tape(false);
        ModelVars mv(tape, model);
        acc += stage2_loss(tape, mv, model.config(), s).value()[0];
    }
    return acc / static_cast<Real>(samples.size());
}

// ---------------------------------------------------------------------------

std::string step_log_header() { return "stage,epoch,step,loss,lr_new,lr_backbone,wall_ms"; }

std::string format_step_log(const StepLog& l) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.10g,%.6g,%.6g,%.3f", std::string(to_string(l.stage)).c_str(), l.epoch,
                  l.step, l.loss, l.lr_new, l.lr_backbone, l.wall_ms);
    return buf;
}

namespace {

Var sum_vars(std::vector<Var>& losses) {
    Var total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = op::add(total, losses[i]);
    return total;
}

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(n, std::max<std::size_t>(1, count)));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

TrainReport train_loop(std::span<Parameter* const> params, std::size_t n_samples, const StageConfig& cfg,
                       const ShardLoss& loss, const ProbeLoss& probe, const TrainOptions& opts) {
    cfg.validate();
    require(n_samples > 0, ErrorKind::DataError, "training set is empty");
    TrainReport report;
    const auto probe_idx = probe_indices(n_samples, cfg.probe_samples, opts.seed);
    report.initial_loss = probe(probe_idx);

    std::unordered_map<const Parameter*, std::size_t> slot;
    for (std::size_t i = 0; i < params.size(); ++i) slot.emplace(params[i], i);

    AdamW optimizer(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
    std::mt19937_64 rng(opts.seed);
    std::vector<std::size_t> order(n_samples);
    std::iota(order.begin(), order.end(), 0);

    std::size_t steps_per_epoch = (n_samples + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.steps_per_epoch > 0) steps_per_epoch = std::min(steps_per_epoch, cfg.steps_per_epoch);
    std::size_t total_steps = steps_per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);
    const std::size_t workers = opts.workers ? opts.workers : configured_threads();

    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t epoch = 0; epoch < cfg.epochs && report.steps < total_steps; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        Real epoch_loss = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t s = 0; s < steps_per_epoch && report.steps < total_steps; ++s) {
            const std::size_t b = s * cfg.batch_size, e = std::min(n_samples, b + cfg.batch_size);
            const std::span<const std::size_t> batch(order.data() + b, e - b);
            const std::size_t n_shards = std::min(workers, batch.size());
            std::vector<Real> shard_loss(n_shards, 0.0);
            std::vector<std::vector<Tensor>> shard_grads(n_shards, std::vector<Tensor>(params.size()));
            const std::size_t chunk = (batch.size() + n_shards - 1) / n_shards;
            parallel_for(n_shards, n_shards, [&](std::size_t sb, std::size_t se) {
                for (std::size_t sh = sb; sh < se; ++sh) {
                    const std::size_t lo = sh * chunk, hi = std::min(batch.size(), lo + chunk);
                    if (lo >= hi) continue;
                    Tape tape(true);
                    Var l = loss(tape, batch.subspan(lo, hi - lo));
                    shard_loss[sh] = l.value()[0];
                    tape.backward(l);
                    tape.for_each_param_grad([&](Parameter& p, const Tensor& g) {
                        auto it = slot.find(&p);
                        if (it != slot.end()) shard_grads[sh][it->second] = g;
                    });
                }
            });
            const Real inv = 1.0 / static_cast<Real>(batch.size());
            Real batch_loss = 0.0;
            for (std::size_t i = 0; i < params.size(); ++i) {
                Parameter* p = params[i];
                if (!p->trainable) continue;
                p->zero_grad();
                for (std::size_t sh = 0; sh < n_shards; ++sh)
                    if (!shard_grads[sh][i].empty()) p->grad += shard_grads[sh][i];
                for (Real& g : p->grad.data()) g *= inv;
            }
            for (Real l : shard_loss) batch_loss += l;
            batch_loss *= inv;
            clip_grad_norm(params, cfg.grad_clip_norm);

            Real scale = 1.0;
            if (cfg.cosine_schedule && total_steps > 1) {
                scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<Real>(report.steps) /
                                              static_cast<Real>(total_steps)));
            }
            optimizer.step(params, cfg.lr_new * scale, cfg.lr_backbone * scale);
            ++report.steps;
            ++epoch_steps;
            epoch_loss += batch_loss;
            if (opts.logger) {
                const auto now = std::chrono::steady_clock::now();
                opts.logger(StepLog{cfg.stage, epoch, report.steps, batch_loss, cfg.lr_new * scale,
                                    cfg.lr_backbone * scale,
                                    std::chrono::duration<Real, std::milli>(now - t0).count()});
            }
        }
        if (epoch_steps > 0) report.epoch_losses.push_back(epoch_loss / static_cast<Real>(epoch_steps));
    }
    report.final_loss = report.steps > 0 ? probe(probe_idx) : report.initial_loss;
    return report;
}

std::vector<WindowSample> to_univariate(std::span<const WindowSample> windows) {
    std::vector<WindowSample> out;
    for (const auto& w : windows)
        for (std::size_t c = 0; c < w.input.dim(0); ++c)
            out.push_back(WindowSample{w.input.rows(c, 1), w.target.rows(c, 1), w.origin});
    return out;
}

StageResult run_stage1(std::span<const Tensor> windows, const StageConfig& cfg, const TSMambaModel& init,
                       const TrainOptions& opts) {
    require(!windows.empty(), ErrorKind::DataError, "stage 1 received no windows");
    TSMambaModel model = init;
    Stage1Heads heads(model.config(), opts.seed + 1);
    std::vector<Parameter*> params = model.params().pointers();
    for (Parameter* p : heads.params().pointers()) params.push_back(p);
    for (Parameter* p : params) p->trainable = true;
    const ModelConfig& mc = model.config();

    ShardLoss loss = [&](Tape& tape, std::span<const std::size_t> idx) {
        ModelVars mv(tape, model);
        Stage1HeadVars hv(tape, heads);
        std::vector<Var> terms;
        for (std::size_t i : idx) terms.push_back(stage1_loss(tape, mv, hv, mc, windows[i]));
        return sum_vars(terms);
    };
    ProbeLoss probe = [&](std::span<const std::size_t> idx) {
        std::vector<Tensor> sel;
        for (std::size_t i : idx) sel.push_back(windows[i]);
        return stage1_loss(model, heads, sel);
    };
    TrainReport report = train_loop(params, windows.size(), cfg, loss, probe, opts);
    return {std::move(model), std::move(report)};
}

namespace {

void check_backbone_compatible(const ModelConfig& a, const ModelConfig& b) {
    const bool same = a.d_model == b.d_model && a.n_layers == b.n_layers && a.d_state == b.d_state &&
                      a.expand == b.expand && a.conv_kernel == b.conv_kernel && a.patch_len == b.patch_len;
    require(same, ErrorKind::CheckpointMismatch, "stage-1 backbone is incompatible with the requested model config");
}

TrainReport train_forecaster(TSMambaModel& model, std::span<const WindowSample> samples, const StageConfig& cfg,
                             const TrainOptions& opts) {
    std::vector<Parameter*> params = model.params().pointers();
    const ModelConfig mc = model.config();
    ShardLoss loss = [&](Tape& tape, std::span<const std::size_t> idx) {
        ModelVars mv(tape, model);
        std::vector<Var> terms;
        for (std::size_t i : idx) terms.push_back(stage2_loss(tape, mv, mc, samples[i]));
        return sum_vars(terms);
    };
    ProbeLoss probe = [&](std::span<const std::size_t> idx) {
        std::vector<WindowSample> sel;
        for (std::size_t i : idx) sel.push_back(samples[i]);
        return stage2_loss(model, sel);
    };
    return train_loop(params, samples.size(), cfg, loss, probe, opts);
}

}  // namespace

StageResult run_stage2(std::span<const WindowSample> samples, const StageConfig& cfg, const ModelConfig& target,
                       const TSMambaModel& stage1, const TrainOptions& opts) {
    require(!samples.empty(), ErrorKind::DataError, "stage 2 received no samples");
    check_backbone_compatible(target, stage1.config());
    TSMambaModel model(target, opts.seed + 2);
    for (Parameter& p : model.params().all()) {
        if (p.name.rfind("head.", 0) == 0) continue;
        const Parameter* src = stage1.params().find(p.name);
        if (!src) continue;
        require(src->value.shape() == p.value.shape(), ErrorKind::CheckpointMismatch,
                "tensor " + p.name + " has shape " + shape_str(src->value.shape()) + " in the stage-1 checkpoint");
        p.value = src->value;
    }
    for (Parameter& p : model.params().all()) {
        p.trainable = true;
        const bool fresh = p.name.rfind("head.", 0) == 0 || p.name.rfind("align.", 0) == 0 ||
                           p.name.rfind("xchannel.", 0) == 0 || p.name.rfind("revin.", 0) == 0;
        p.lr_group = fresh ? LrGroup::New : LrGroup::Backbone;
    }
    TrainReport report = train_forecaster(model, samples, cfg, opts);
    return {std::move(model), std::move(report)};
}

XChannelDecision decide_xchannel(std::size_t n_windows, std::size_t n_channels, std::size_t min_samples) {
    if (n_channels < 2) return {false, "single channel"};
    const std::size_t pairs = n_windows * n_channels;
    if (pairs < min_samples) {
        return {false, "insufficient samples (" + std::to_string(pairs) + " channel-window pairs < " +
                           std::to_string(min_samples) + ")"};
    }
    return {true, "sufficient samples (" + std::to_string(pairs) + " channel-window pairs)"};
}

StageResult run_finetune(std::span<const WindowSample> samples, const StageConfig& cfg,
                         const TSMambaModel& foundation, const TrainOptions& opts) {
    require(!samples.empty(), ErrorKind::DataError, "fine-tuning received no samples");
    cfg.validate();
    TSMambaModel model = foundation;
    const std::size_t d = samples.front().input.dim(0);
    if (cfg.enable_xchannel && !model.config().xchannel_enabled) {
        const XChannelDecision dec = decide_xchannel(samples.size(), d, cfg.min_samples_for_xchannel);
        require(dec.enabled, ErrorKind::InvalidConfig, "cannot enable cross-channel attention: " + dec.reason);
        std::mt19937_64 rng(opts.seed + 3);
        model.enable_xchannel(d, rng);
    }
    for (Parameter& p : model.params().all()) {
        p.trainable = !is_mamba_block_tensor(p.name);
        p.lr_group = LrGroup::New;
    }
    TrainReport report = train_forecaster(model, samples, cfg, opts);
    return {std::move(model), std::move(report)};
}

std::uint64_t tensor_hash(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (std::size_t d : t.shape()) {
        const auto v = static_cast<std::uint64_t>(d);
        mix(reinterpret_cast<const unsigned char*>(&v), sizeof v);
    }
    mix(reinterpret_cast<const unsigned char*>(t.ptr()), t.size() * sizeof(Real));
    return h;
}

}  // namespace tsmamba
