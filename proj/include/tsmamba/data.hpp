#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsmamba/tensor.hpp"

namespace tsmamba {

struct TimeSeriesDataset {
    std::string name;
    Tensor values;  // [N_total, D]
    std::vector<std::string> channel_names;
    std::vector<std::string> timestamps;
    std::string freq_hint;

    std::size_t length() const { return values.empty() ? 0 : values.dim(0); }
    std::size_t channels() const { return values.empty() ? 0 : values.dim(1); }
};

struct CsvOptions {
    bool has_date_column = false;
    /// Replace missing cells with the previous row's value instead of rejecting them.
    bool forward_fill = false;
};

/// Comma-separated numeric table. The first row is a header when every
/// non-date cell in it is non-numeric.
TimeSeriesDataset load_csv(const std::string& path, const CsvOptions& opts = {});
/// True when the first cell of the first data row is non-numeric (e.g. a timestamp).
bool detect_date_column(const std::string& path);
/// Header row of channel names (and "date" when timestamps exist), values printed round-trip exact.
void write_csv(const std::string& path, const TimeSeriesDataset& ds);

struct ChannelStats {
    Tensor mean;  // [D]
    Tensor std;   // [D]; zero-variance channels hold the clamp value
    std::vector<bool> zero_variance;
};

inline constexpr Real kStandardizeEps = 1e-8;

/// Per-channel mean/std of rows [row_begin, row_end).
ChannelStats fit_standardizer(const TimeSeriesDataset& ds, std::size_t row_begin, std::size_t row_end);
TimeSeriesDataset standardize(const TimeSeriesDataset& ds, const ChannelStats& stats);
/// Inverse of standardize for a [D, T] block.
Tensor unstandardize_block(const Tensor& block, const ChannelStats& stats);

struct WindowSample {
    Tensor input;   // [D, L]
    Tensor target;  // [D, T]
    std::size_t origin = 0;  // index of the first target row
};

/// Windows with input rows [t - L, t) and target rows [t, t + T) for
/// origins t = row_begin + L, stepping by `stride`, all rows inside [row_begin, row_end).
std::vector<WindowSample> make_windows(const TimeSeriesDataset& ds, std::size_t lookback, std::size_t horizon,
                                       std::size_t stride, std::size_t row_begin = 0,
                                       std::size_t row_end = static_cast<std::size_t>(-1));
std::size_t window_count(std::size_t n_rows, std::size_t lookback, std::size_t horizon, std::size_t stride);

enum class SplitMode { Fraction, EttHour, EttMinute };

struct SplitSpec {
    Real train_frac = 0.7;
    Real val_frac = 0.1;
    Real test_frac = 0.2;
    SplitMode mode = SplitMode::Fraction;

    void validate() const;
};

struct RowRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end > begin ? end - begin : 0; }
};

/// Chronological row ranges. Validation and test ranges start `lookback`
/// rows early so their first windows forecast the first row of the split.
struct SplitRanges {
    RowRange train, val, test;
};

SplitRanges split_ranges(std::size_t n_rows, std::size_t lookback, const SplitSpec& spec);
std::vector<WindowSample> split_windows(const TimeSeriesDataset& ds, const RowRange& range, std::size_t lookback,
                                        std::size_t horizon, std::size_t stride);

Real metric_mse(const Tensor& pred, const Tensor& target);
Real metric_mae(const Tensor& pred, const Tensor& target);

struct WindowError {
    std::size_t origin = 0;
    Real mse = 0.0;
    Real mae = 0.0;
};

struct EvalResult {
    Real mse = 0.0;
    Real mae = 0.0;
    std::size_t n_windows = 0;
    std::vector<WindowError> per_window;
};

using Forecaster = std::function<Tensor(const Tensor& input)>;

/// Averages MSE/MAE over every element of every window; windows are
/// forecast independently and may be spread over `workers` threads.
EvalResult evaluate_windows(std::span<const WindowSample> windows, const Forecaster& forecaster,
                            std::size_t workers = 1);
/// Repeats the last input value of each channel across the horizon.
Tensor repeat_last_forecast(const Tensor& input, std::size_t horizon);

struct SynthComponent {
    enum class Kind { Sinusoid, Trend, Noise, CrossLag };
    Kind kind = Kind::Sinusoid;
    /// Target channel; -1 applies the component to every channel.
    int channel = -1;
    Real freq = 0.0;  // cycles per step
    Real amp = 1.0;
    Real phase = 0.0;
    Real slope = 0.0;
    Real sigma = 0.0;
    int src_channel = 0;
    std::size_t lag = 0;
    Real gain = 1.0;

    static SynthComponent sinusoid(int channel, Real freq, Real amp, Real phase = 0.0);
    static SynthComponent trend(int channel, Real slope);
    static SynthComponent noise(int channel, Real sigma);
    static SynthComponent cross_lag(int src, int dst, std::size_t lag, Real gain);
};

struct SynthSpec {
    std::uint64_t seed = 0;
    std::size_t n_channels = 1;
    std::size_t n_rows = 0;
    std::vector<SynthComponent> components;
};

/// Components apply in order; cross_lag overwrites its destination with
/// gain * source shifted by lag, so dst[t] == gain * src[t - lag] for t >= lag
/// as long as no later component touches either channel.
TimeSeriesDataset synth_generate(const SynthSpec& spec);

}  // namespace tsmamba
