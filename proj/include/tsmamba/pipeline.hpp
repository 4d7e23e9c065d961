#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsmamba/config.hpp"
#include "tsmamba/data.hpp"
#include "tsmamba/model.hpp"
#include "tsmamba/training.hpp"

namespace tsmamba {

/// A dataset ready for windowing: optionally standardized with train-split statistics.
struct PreparedSeries {
    TimeSeriesDataset data;
    std::optional<ChannelStats> stats;
    SplitRanges ranges;
};

TimeSeriesDataset load_dataset(const std::string& path, const DataOptions& opts);
PreparedSeries prepare_series(const TimeSeriesDataset& raw, const DataOptions& opts, const SplitSpec& split,
                              std::size_t lookback);

/// Single-channel lookback windows [1, L] from the train range of each series.
std::vector<Tensor> stage1_windows(std::span<const PreparedSeries> series, std::size_t lookback,
                                   std::size_t stride);
/// Train-range samples of every series; `univariate` splits each into per-channel samples.
std::vector<WindowSample> train_samples(std::span<const PreparedSeries> series, std::size_t lookback,
                                        std::size_t horizon, std::size_t stride, bool univariate);

/// Stage 1 or 2 over every series. Stage 2 keeps `init`'s backbone and builds `cfg.model` on top.
StageResult pretrain(const RunConfig& cfg, Stage stage, std::span<const PreparedSeries> series,
                     const TSMambaModel& init, const TrainOptions& opts);

enum class XChannelRequest { Auto, On, Off };

struct FinetuneOutcome {
    StageResult result;
    XChannelDecision decision;
};

/// Fine-tunes on one multivariate series with frozen Mamba blocks.
FinetuneOutcome finetune(const RunConfig& cfg, const PreparedSeries& series, const TSMambaModel& foundation,
                         XChannelRequest request, const TrainOptions& opts);

enum class SplitPart { Train, Val, Test };
const RowRange& split_part(const SplitRanges& ranges, SplitPart part);

/// Windows of one split with stride 1, forecast with `forecaster` and scored in the prepared space.
EvalResult evaluate_split(const PreparedSeries& series, SplitPart part, std::size_t lookback, std::size_t horizon,
                          const Forecaster& forecaster, std::size_t workers = 1);

struct ReportRow {
    std::string dataset;
    std::size_t horizon = 0;
    EvalResult result;
};

/// `dataset,horizon,mse,mae,n_windows` rows plus one average row per dataset.
std::string format_report(std::span<const ReportRow> rows);
/// `dataset,horizon,origin,mse,mae` rows.
std::string format_window_errors(std::span<const ReportRow> rows);

struct ScanBenchRow {
    std::string mode;  // "seq" or "par"
    std::size_t len = 0;
    Real wall_ms = 0.0;     // median over repetitions
    Real throughput = 0.0;  // time steps per second
    Real max_abs_diff = -1.0;  // parallel vs sequential on identical inputs; negative when not measured
};

/// Times the selective scan kernels, discretisation included, on random inputs; `reps` >= 5.
std::vector<ScanBenchRow> bench_scan(std::span<const std::size_t> lens, std::size_t d_inner, std::size_t n_state,
                                     bool run_seq, bool run_par, std::size_t reps, std::uint64_t seed,
                                     std::size_t workers = 0);

/// Named synthetic datasets: "sines" (sinusoid + trend + noise per channel) and
/// "cross_lag" (independent sinusoid mixtures with channel k+1 = channel k lagged).
SynthSpec synth_preset(const std::string& name, std::uint64_t seed, std::size_t n_channels, std::size_t n_rows,
                       std::size_t lag = 4, Real gain = 1.0);

}  // namespace tsmamba
