#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tsmamba/autograd.hpp"
#include "tsmamba/data.hpp"
#include "tsmamba/model.hpp"

namespace tsmamba {

enum class Stage { Stage1, Stage2, Finetune };

std::string_view to_string(Stage stage);

struct StageConfig {
    Stage stage = Stage::Stage1;
    Real lr_new = 1e-3;
    Real lr_backbone = 1e-3;
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    Real weight_decay = 0.0;
    Real grad_clip_norm = 1.0;
    bool freeze_mamba_blocks = false;
    bool enable_xchannel = false;
    std::size_t min_samples_for_xchannel = 10000;
    /// Caps optimizer steps per epoch (0 = full pass over the samples).
    std::size_t steps_per_epoch = 0;
    /// Caps total optimizer steps (0 = no cap).
    std::size_t max_steps = 0;
    /// Stride between training windows drawn from each series.
    std::size_t window_stride = 1;
    /// Size of the fixed subset used for the before/after loss probes.
    std::size_t probe_samples = 256;
    bool cosine_schedule = false;

    /// Defaults for the given stage (learning rates, freezing).
    static StageConfig defaults(Stage stage);
    void validate() const;
};

struct AdamWConfig {
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0.0;
};

/// Adaptive-moment update with decoupled weight decay:
/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// One update of every trainable parameter. The learning rate comes from
    /// the parameter's group. Frozen parameters are never touched.
    void step(std::span<Parameter* const> params, Real lr_new, Real lr_backbone);
    std::size_t steps() const { return t_; }

private:
    struct Moments {
        Tensor m, v;
    };
    AdamWConfig config_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

/// Scales every trainable gradient so the global L2 norm is at most max_norm.
/// Returns the norm before clipping.
Real clip_grad_norm(std::span<Parameter* const> params, Real max_norm);

/// Next-patch (forward) and previous-patch (backward) heads used only in stage 1.
class Stage1Heads {
public:
    Stage1Heads(const ModelConfig& config, std::uint64_t seed);
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

private:
    ParameterStore params_;
};

struct Stage1HeadVars {
    Stage1HeadVars(Tape& tape, Stage1Heads& heads);
    Stage1HeadVars(Tape& tape, const Stage1Heads& heads);
    Var next_w, next_b, prev_w, prev_b;
};

/// Normalised-space stage-1 objective for one window [D, L].
Var stage1_loss(Tape& tape, const ModelVars& model, const Stage1HeadVars& heads, const ModelConfig& cfg,
                const Tensor& window);
/// Normalised-space forecasting objective for one window.
Var stage2_loss(Tape& tape, const ModelVars& model, const ModelConfig& cfg, const WindowSample& sample);

Real stage1_loss(const TSMambaModel& model, const Stage1Heads& heads, std::span<const Tensor> windows);
Real stage2_loss(const TSMambaModel& model, std::span<const WindowSample> samples);

/// Target expressed in the normalisation of its input window.
Tensor normalize_target(const Tensor& target, const NormStats& stats);

struct StepLog {
    Stage stage = Stage::Stage1;
    std::size_t epoch = 0;
    std::size_t step = 0;
    Real loss = 0.0;
    Real lr_new = 0.0;
    Real lr_backbone = 0.0;
    Real wall_ms = 0.0;
};

using StepLogger = std::function<void(const StepLog&)>;

/// CSV header and row for the training log.
std::string step_log_header();
std::string format_step_log(const StepLog& log);

struct TrainReport {
    Real initial_loss = 0.0;  // probe loss before the first update
    Real final_loss = 0.0;    // probe loss after the last update
    std::vector<Real> epoch_losses;  // mean minibatch loss per epoch
    std::size_t steps = 0;
};

struct TrainOptions {
    std::uint64_t seed = 0;
    /// Worker threads for the per-batch shards (0 = configured default).
    std::size_t workers = 0;
    StepLogger logger;
};

/// Sum of per-sample losses for the listed samples, recorded on `tape`.
using ShardLoss = std::function<Var(Tape& tape, std::span<const std::size_t> samples)>;
using ProbeLoss = std::function<Real(std::span<const std::size_t> samples)>;

/// Generic minibatch loop: shuffles, shards each batch over workers, sums
/// shard gradients in shard order, averages, clips and applies AdamW.
TrainReport train_loop(std::span<Parameter* const> params, std::size_t n_samples, const StageConfig& cfg,
                       const ShardLoss& loss, const ProbeLoss& probe, const TrainOptions& opts);

struct StageResult {
    TSMambaModel model;
    TrainReport report;
};

/// Splits every multichannel window into single-channel windows.
std::vector<WindowSample> to_univariate(std::span<const WindowSample> windows);

StageResult run_stage1(std::span<const Tensor> windows, const StageConfig& cfg, const TSMambaModel& init,
                       const TrainOptions& opts);
/// Restores the forecasting architecture `target` on top of a stage-1 backbone; head is re-drawn.
StageResult run_stage2(std::span<const WindowSample> samples, const StageConfig& cfg, const ModelConfig& target,
                       const TSMambaModel& stage1, const TrainOptions& opts);
/// Freezes every Mamba block tensor, optionally adds cross-channel attention.
StageResult run_finetune(std::span<const WindowSample> samples, const StageConfig& cfg,
                         const TSMambaModel& foundation, const TrainOptions& opts);

/// Whether the cross-channel module may be enabled for this dataset, with the reason when not.
struct XChannelDecision {
    bool enabled = false;
    std::string reason;
};
XChannelDecision decide_xchannel(std::size_t n_windows, std::size_t n_channels, std::size_t min_samples);

/// Stable FNV-1a hash of a tensor's bytes.
std::uint64_t tensor_hash(const Tensor& t);

}  // namespace tsmamba
