#include "tsmamba/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "tsmamba/error.hpp"
#include "tsmamba/parallel.hpp"

namespace tsmamba {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\"");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\"");
    return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& s) { return s.empty() || s == "NaN" || s == "nan" || s == "NA" || s == "null"; }

std::optional<Real> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    const char* begin = s.data();
    if (*begin == '+') ++begin;
    Real v = 0.0;
    auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

}  // namespace

bool detect_date_column(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path);
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells = split_line(line);
        for (auto& c : cells) c = trim(c);
        const bool any_numeric =
            std::any_of(cells.begin(), cells.end(), [](const std::string& c) { return parse_number(c).has_value(); });
        if (!any_numeric && !header_seen) {
            header_seen = true;
            continue;
        }
        return !parse_number(cells.front()) && !is_missing(cells.front());
    }
    return false;
}

TimeSeriesDataset load_csv(const std::string& path, const CsvOptions& opts) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path);

    TimeSeriesDataset ds;
    ds.name = path.substr(path.find_last_of('/') == std::string::npos ? 0 : path.find_last_of('/') + 1);
    if (auto dot = ds.name.rfind('.'); dot != std::string::npos) ds.name = ds.name.substr(0, dot);

    const std::size_t first_value_col = opts.has_date_column ? 1 : 0;
    std::vector<Real> values;
    std::vector<bool> missing;
    std::size_t width = 0, rows = 0, line_no = 0;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells = split_line(line);
        for (auto& c : cells) c = trim(c);
        if (first) {
            first = false;
            require(cells.size() > first_value_col, ErrorKind::ParseError, path + ": no value columns");
            width = cells.size() - first_value_col;
            std::size_t numeric = 0;
            for (std::size_t i = first_value_col; i < cells.size(); ++i)
                if (parse_number(cells[i]) || is_missing(cells[i])) ++numeric;
            if (numeric == 0) {
                ds.channel_names.assign(cells.begin() + static_cast<std::ptrdiff_t>(first_value_col), cells.end());
                continue;
            }
        }
        if (cells.size() != width + first_value_col) {
            fail(ErrorKind::RaggedRows, path + ": line " + std::to_string(line_no) + " has " +
                                            std::to_string(cells.size()) + " cells, expected " +
                                            std::to_string(width + first_value_col));
        }
        if (opts.has_date_column) ds.timestamps.push_back(cells[0]);
        for (std::size_t i = first_value_col; i < cells.size(); ++i) {
            if (is_missing(cells[i])) {
                if (!opts.forward_fill) {
                    fail(ErrorKind::DataError, path + ": missing value at line " + std::to_string(line_no) +
                                                   ", column " + std::to_string(i + 1));
                }
                values.push_back(0.0);
                missing.push_back(true);
                continue;
            }
            auto v = parse_number(cells[i]);
            if (!v) {
                fail(ErrorKind::ParseError, path + ": non-numeric cell '" + cells[i] + "' at line " +
                                                std::to_string(line_no) + ", column " + std::to_string(i + 1));
            }
            values.push_back(*v);
            missing.push_back(false);
        }
        ++rows;
    }
    require(rows > 0, ErrorKind::DataError, path + ": no data rows");
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) {
            const std::size_t i = r * width + c;
            if (!missing[i]) continue;
            require(r > 0 && !missing[i - width], ErrorKind::DataError,
                    path + ": cannot forward-fill leading missing value in column " + std::to_string(c + 1));
            values[i] = values[i - width];
            missing[i] = false;
        }
    if (ds.channel_names.empty())
        for (std::size_t c = 0; c < width; ++c) ds.channel_names.push_back("ch" + std::to_string(c));
    ds.values = Tensor({rows, width}, std::move(values));
    return ds;
}

void write_csv(const std::string& path, const TimeSeriesDataset& ds) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path);
    const bool dates = !ds.timestamps.empty();
    if (dates) out << "date";
    for (std::size_t c = 0; c < ds.channels(); ++c) {
        if (dates || c) out << ',';
        out << (c < ds.channel_names.size() ? ds.channel_names[c] : "ch" + std::to_string(c));
    }
    out << '\n';
    char buf[40];
    for (std::size_t r = 0; r < ds.length(); ++r) {
        if (dates) out << ds.timestamps[r];
        for (std::size_t c = 0; c < ds.channels(); ++c) {
            if (dates || c) out << ',';
            std::snprintf(buf, sizeof buf, "%.17g", ds.values.at(r, c));
            out << buf;
        }
        out << '\n';
    }
    if (!out) fail(ErrorKind::IoError, "failed writing " + path);
}

ChannelStats fit_standardizer(const TimeSeriesDataset& ds, std::size_t row_begin, std::size_t row_end) {
    row_end = std::min(row_end, ds.length());
    require(row_end > row_begin, ErrorKind::DataError, "standardisation range is empty");
    const std::size_t d = ds.channels(), n = row_end - row_begin;
    ChannelStats s{Tensor({d}), Tensor({d}), std::vector<bool>(d, false)};
    for (std::size_t c = 0; c < d; ++c) {
        Real mean = 0.0;
        for (std::size_t r = row_begin; r < row_end; ++r) mean += ds.values.at(r, c);
        mean /= static_cast<Real>(n);
        Real var = 0.0;
        for (std::size_t r = row_begin; r < row_end; ++r) var += std::pow(ds.values.at(r, c) - mean, 2);
        Real sd = std::sqrt(var / static_cast<Real>(n));
        if (sd < kStandardizeEps) {
            s.zero_variance[c] = true;
            sd = kStandardizeEps;
        }
        s.mean[c] = mean;
        s.std[c] = sd;
    }
    return s;
}

TimeSeriesDataset standardize(const TimeSeriesDataset& ds, const ChannelStats& stats) {
    require(stats.mean.size() == ds.channels(), ErrorKind::ShapeMismatch, "standardiser channel count mismatch");
    TimeSeriesDataset out = ds;
    for (std::size_t r = 0; r < ds.length(); ++r)
        for (std::size_t c = 0; c < ds.channels(); ++c)
            out.values.at(r, c) = (ds.values.at(r, c) - stats.mean[c]) / stats.std[c];
    return out;
}

Tensor unstandardize_block(const Tensor& block, const ChannelStats& stats) {
    require_rank(block, 2, "unstandardize_block");
    require(block.dim(0) == stats.mean.size(), ErrorKind::ShapeMismatch, "standardiser channel count mismatch");
    Tensor out = block;
    for (std::size_t c = 0; c < block.dim(0); ++c)
        for (std::size_t t = 0; t < block.dim(1); ++t) out.at(c, t) = block.at(c, t) * stats.std[c] + stats.mean[c];
    return out;
}

std::size_t window_count(std::size_t n_rows, std::size_t lookback, std::size_t horizon, std::size_t stride) {
    require(stride >= 1, ErrorKind::InvalidConfig, "window stride must be >= 1");
    if (n_rows < lookback + horizon) return 0;
    return (n_rows - lookback - horizon) / stride + 1;
}

std::vector<WindowSample> make_windows(const TimeSeriesDataset& ds, std::size_t lookback, std::size_t horizon,
                                       std::size_t stride, std::size_t row_begin, std::size_t row_end) {
    row_end = std::min(row_end, ds.length());
    require(lookback > 0 && horizon > 0, ErrorKind::InvalidConfig, "lookback and horizon must be positive");
    const std::size_t n = row_end > row_begin ? row_end - row_begin : 0;
    const std::size_t count = window_count(n, lookback, horizon, stride);
    const std::size_t d = ds.channels();
    std::vector<WindowSample> out;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t origin = row_begin + lookback + w * stride;
        WindowSample s{Tensor({d, lookback}), Tensor({d, horizon}), origin};
        for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t t = 0; t < lookback; ++t) s.input.at(c, t) = ds.values.at(origin - lookback + t, c);
            for (std::size_t t = 0; t < horizon; ++t) s.target.at(c, t) = ds.values.at(origin + t, c);
        }
        out.push_back(std::move(s));
    }
    return out;
}

void SplitSpec::validate() const {
    require(train_frac > 0 && val_frac >= 0 && test_frac > 0, ErrorKind::InvalidConfig,
            "split fractions must be positive (validation may be zero)");
    require(std::abs(train_frac + val_frac + test_frac - 1.0) < 1e-9, ErrorKind::InvalidConfig,
            "split fractions must sum to 1");
}

SplitRanges split_ranges(std::size_t n_rows, std::size_t lookback, const SplitSpec& spec) {
    spec.validate();
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    if (spec.mode == SplitMode::Fraction) {
        n_train = static_cast<std::size_t>(std::floor(static_cast<Real>(n_rows) * spec.train_frac));
        n_test = static_cast<std::size_t>(std::floor(static_cast<Real>(n_rows) * spec.test_frac));
        n_val = n_rows - n_train - n_test;
    } else {
        // 12 / 4 / 4 months of 30 days
        const std::size_t per_day = spec.mode == SplitMode::EttHour ? 24 : 96;
        n_train = 12 * 30 * per_day;
        n_val = 4 * 30 * per_day;
        n_test = 4 * 30 * per_day;
        require(n_train + n_val + n_test <= n_rows, ErrorKind::DataError,
                "dataset too short for the 12/4/4-month split");
    }
    SplitRanges r;
    r.train = {0, n_train};
    r.val = {n_train >= lookback ? n_train - lookback : 0, n_train + n_val};
    r.test = {n_train + n_val >= lookback ? n_train + n_val - lookback : 0, n_train + n_val + n_test};
    return r;
}

std::vector<WindowSample> split_windows(const TimeSeriesDataset& ds, const RowRange& range, std::size_t lookback,
                                        std::size_t horizon, std::size_t stride) {
    return make_windows(ds, lookback, horizon, stride, range.begin, range.end);
}

Real metric_mse(const Tensor& pred, const Tensor& target) {
    require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch,
            "metric shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    Real acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
    return acc / static_cast<Real>(pred.size());
}

Real metric_mae(const Tensor& pred, const Tensor& target) {
    require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch,
            "metric shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    Real acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
    return acc / static_cast<Real>(pred.size());
}

EvalResult evaluate_windows(std::span<const WindowSample> windows, const Forecaster& forecaster, std::size_t workers) {
    EvalResult r;
    r.n_windows = windows.size();
    r.per_window.resize(windows.size());
    parallel_for(windows.size(), workers, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const Tensor pred = forecaster(windows[i].input);
            r.per_window[i] = {windows[i].origin, metric_mse(pred, windows[i].target),
                               metric_mae(pred, windows[i].target)};
        }
    });
    // Equal-sized windows: the element mean is the mean of window means.
    for (const auto& w : r.per_window) {
        r.mse += w.mse;
        r.mae += w.mae;
    }
    if (!windows.empty()) {
        r.mse /= static_cast<Real>(windows.size());
        r.mae /= static_cast<Real>(windows.size());
    }
    return r;
}

Tensor repeat_last_forecast(const Tensor& input, std::size_t horizon) {
    require_rank(input, 2, "repeat_last_forecast input");
    Tensor out({input.dim(0), horizon});
    for (std::size_t c = 0; c < input.dim(0); ++c)
        for (std::size_t t = 0; t < horizon; ++t) out.at(c, t) = input.at(c, input.dim(1) - 1);
    return out;
}

SynthComponent SynthComponent::sinusoid(int channel, Real freq, Real amp, Real phase) {
    SynthComponent c;
    c.kind = Kind::Sinusoid;
    c.channel = channel;
    c.freq = freq;
    c.amp = amp;
    c.phase = phase;
    return c;
}

SynthComponent SynthComponent::trend(int channel, Real slope) {
    SynthComponent c;
    c.kind = Kind::Trend;
    c.channel = channel;
    c.slope = slope;
    return c;
}

SynthComponent SynthComponent::noise(int channel, Real sigma) {
    SynthComponent c;
    c.kind = Kind::Noise;
    c.channel = channel;
    c.sigma = sigma;
    return c;
}

SynthComponent SynthComponent::cross_lag(int src, int dst, std::size_t lag, Real gain) {
    SynthComponent c;
    c.kind = Kind::CrossLag;
    c.src_channel = src;
    c.channel = dst;
    c.lag = lag;
    c.gain = gain;
    return c;
}

TimeSeriesDataset synth_generate(const SynthSpec& spec) {
    require(spec.n_channels >= 1 && spec.n_rows >= 1, ErrorKind::InvalidConfig, "synthetic dataset must be non-empty");
    const auto d = static_cast<int>(spec.n_channels);
    std::size_t prefix = 0;
    for (const auto& c : spec.components) {
        if (c.kind == SynthComponent::Kind::CrossLag) {
            require(c.lag < spec.n_rows, ErrorKind::InvalidConfig, "cross_lag lag must be smaller than the series");
            require(c.src_channel >= 0 && c.src_channel < d && c.channel >= 0 && c.channel < d &&
                        c.src_channel != c.channel,
                    ErrorKind::InvalidConfig, "cross_lag channels out of range");
            prefix = std::max(prefix, c.lag);
        } else {
            require(c.channel >= -1 && c.channel < d, ErrorKind::InvalidConfig, "component channel out of range");
        }
    }
    const std::size_t n = spec.n_rows + prefix;
    std::vector<std::vector<Real>> ch(spec.n_channels, std::vector<Real>(n, 0.0));
    std::mt19937_64 rng(spec.seed);
    auto targets = [&](int channel) {
        std::vector<std::size_t> out;
        if (channel < 0)
            for (std::size_t c = 0; c < spec.n_channels; ++c) out.push_back(c);
        else
            out.push_back(static_cast<std::size_t>(channel));
        return out;
    };
    for (const auto& comp : spec.components) {
        switch (comp.kind) {
            case SynthComponent::Kind::Sinusoid:
                for (auto c : targets(comp.channel))
                    for (std::size_t i = 0; i < n; ++i) {
                        const Real t = static_cast<Real>(i) - static_cast<Real>(prefix);
                        ch[c][i] += comp.amp * std::sin(2.0 * std::numbers::pi * comp.freq * t + comp.phase);
                    }
                break;
            case SynthComponent::Kind::Trend:
                for (auto c : targets(comp.channel))
                    for (std::size_t i = 0; i < n; ++i)
                        ch[c][i] += comp.slope * (static_cast<Real>(i) - static_cast<Real>(prefix));
                break;
            case SynthComponent::Kind::Noise: {
                std::normal_distribution<Real> dist(0.0, comp.sigma);
                for (auto c : targets(comp.channel))
                    for (std::size_t i = 0; i < n; ++i) ch[c][i] += comp.sigma > 0 ? dist(rng) : 0.0;
                break;
            }
            case SynthComponent::Kind::CrossLag: {
                const auto& src = ch[static_cast<std::size_t>(comp.src_channel)];
                auto& dst = ch[static_cast<std::size_t>(comp.channel)];
                for (std::size_t i = n; i-- > comp.lag;) dst[i] = comp.gain * src[i - comp.lag];
                for (std::size_t i = 0; i < comp.lag; ++i) dst[i] = 0.0;
                break;
            }
        }
    }
    TimeSeriesDataset ds;
    ds.name = "synthetic";
    ds.values = Tensor({spec.n_rows, spec.n_channels});
    for (std::size_t r = 0; r < spec.n_rows; ++r)
        for (std::size_t c = 0; c < spec.n_channels; ++c) ds.values.at(r, c) = ch[c][r + prefix];
    for (std::size_t c = 0; c < spec.n_channels; ++c) ds.channel_names.push_back("ch" + std::to_string(c));
    return ds;
}

}  // namespace tsmamba
