#include "tsmamba/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <map>

#include "tsmamba/error.hpp"

namespace tsmamba {

TimeSeriesDataset load_dataset(const std::string& path, const DataOptions& opts) {
    CsvOptions csv;
    csv.has_date_column = opts.date_column ? *opts.date_column : detect_date_column(path);
    csv.forward_fill = opts.forward_fill;
    return load_csv(path, csv);
}

PreparedSeries prepare_series(const TimeSeriesDataset& raw, const DataOptions& opts, const SplitSpec& split,
                              std::size_t lookback) {
    PreparedSeries out;
    out.ranges = split_ranges(raw.length(), lookback, split);
    if (opts.standardize) {
        require(out.ranges.train.size() > 0, ErrorKind::DataError, raw.name + ": train split is empty");
        out.stats = fit_standardizer(raw, out.ranges.train.begin, out.ranges.train.end);
        out.data = standardize(raw, *out.stats);
    } else {
        out.data = raw;
    }
    return out;
}

std::vector<Tensor> stage1_windows(std::span<const PreparedSeries> series, std::size_t lookback,
                                   std::size_t stride) {
    require(stride >= 1, ErrorKind::InvalidConfig, "window stride must be >= 1");
    std::vector<Tensor> out;
    for (const PreparedSeries& s : series) {
        const RowRange& r = s.ranges.train;
        const std::size_t d = s.data.channels();
        for (std::size_t t = r.begin; t + lookback <= r.end; t += stride) {
            for (std::size_t c = 0; c < d; ++c) {
                Tensor w({1, lookback});
                for (std::size_t i = 0; i < lookback; ++i) w[i] = s.data.values.at(t + i, c);
                out.push_back(std::move(w));
            }
        }
    }
    return out;
}

std::vector<WindowSample> train_samples(std::span<const PreparedSeries> series, std::size_t lookback,
                                        std::size_t horizon, std::size_t stride, bool univariate) {
    std::vector<WindowSample> out;
    for (const PreparedSeries& s : series) {
        auto w = split_windows(s.data, s.ranges.train, lookback, horizon, stride);
        if (univariate) w = to_univariate(w);
        out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return out;
}

StageResult pretrain(const RunConfig& cfg, Stage stage, std::span<const PreparedSeries> series,
                     const TSMambaModel& init, const TrainOptions& opts) {
    require(stage != Stage::Finetune, ErrorKind::InvalidConfig, "pretrain runs stage 1 or stage 2");
    const StageConfig& sc = cfg.stage(stage);
    if (stage == Stage::Stage1) {
        const auto windows = stage1_windows(series, init.config().lookback, sc.window_stride);
        require(!windows.empty(), ErrorKind::DataError, "no stage-1 windows: series shorter than the lookback");
        return run_stage1(windows, sc, init, opts);
    }
    const auto samples =
        train_samples(series, cfg.model.lookback, cfg.model.horizon, sc.window_stride, /*univariate=*/true);
    require(!samples.empty(), ErrorKind::DataError, "no stage-2 windows: series shorter than lookback + horizon");
    return run_stage2(samples, sc, cfg.model, init, opts);
}

FinetuneOutcome finetune(const RunConfig& cfg, const PreparedSeries& series, const TSMambaModel& foundation,
                         XChannelRequest request, const TrainOptions& opts) {
    const ModelConfig& mc = foundation.config();
    StageConfig sc = cfg.finetune;
    const auto samples = train_samples(std::span(&series, 1), mc.lookback, mc.horizon, sc.window_stride, false);
    require(!samples.empty(), ErrorKind::DataError, "no fine-tuning windows: series shorter than lookback + horizon");
    const std::size_t d = series.data.channels();

    XChannelDecision decision;
    if (mc.xchannel_enabled) {
        decision = {true, "already enabled in the checkpoint"};
    } else if (request == XChannelRequest::Off) {
        decision = {false, "disabled by request"};
    } else {
        decision = decide_xchannel(samples.size(), d, sc.min_samples_for_xchannel);
        if (request == XChannelRequest::On) {
            require(d >= 2, ErrorKind::InvalidConfig, "cross-channel attention requires at least 2 channels");
            require(decision.enabled, ErrorKind::InvalidConfig, "cannot enable cross-channel attention: " + decision.reason);
        }
    }
    sc.enable_xchannel = decision.enabled && !mc.xchannel_enabled;
    StageResult result = run_finetune(samples, sc, foundation, opts);
    return {std::move(result), std::move(decision)};
}

const RowRange& split_part(const SplitRanges& ranges, SplitPart part) {
    switch (part) {
        case SplitPart::Train: return ranges.train;
        case SplitPart::Val: return ranges.val;
        case SplitPart::Test: return ranges.test;
    }
    return ranges.test;
}

EvalResult evaluate_split(const PreparedSeries& series, SplitPart part, std::size_t lookback, std::size_t horizon,
                          const Forecaster& forecaster, std::size_t workers) {
    const auto windows = split_windows(series.data, split_part(series.ranges, part), lookback, horizon, 1);
    require(!windows.empty(), ErrorKind::DataError, series.data.name + ": evaluation split has no windows");
    return evaluate_windows(windows, forecaster, workers);
}

std::string format_report(std::span<const ReportRow> rows) {
    std::string out = "dataset,horizon,mse,mae,n_windows\n";
    char buf[512];
    std::map<std::string, std::pair<std::size_t, std::pair<Real, Real>>> avg;
    std::vector<std::string> order;
    for (const ReportRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.10g,%.10g,%zu\n", r.dataset.c_str(), r.horizon, r.result.mse,
                      r.result.mae, r.result.n_windows);
        out += buf;
        auto [it, inserted] = avg.try_emplace(r.dataset);
        if (inserted) order.push_back(r.dataset);
        it->second.first += 1;
        it->second.second.first += r.result.mse;
        it->second.second.second += r.result.mae;
    }
    for (const std::string& name : order) {
        const auto& [n, sums] = avg[name];
        const Real k = static_cast<Real>(n);
        std::size_t windows = 0;
        for (const ReportRow& r : rows)
            if (r.dataset == name) windows += r.result.n_windows;
        std::snprintf(buf, sizeof buf, "%s,avg,%.10g,%.10g,%zu\n", name.c_str(), sums.first / k, sums.second / k,
                      windows);
        out += buf;
    }
    return out;
}

std::string format_window_errors(std::span<const ReportRow> rows) {
    std::string out = "dataset,horizon,origin,mse,mae\n";
    char buf[512];
    for (const ReportRow& r : rows) {
        for (const WindowError& w : r.result.per_window) {
            std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.10g,%.10g\n", r.dataset.c_str(), r.horizon, w.origin, w.mse,
                          w.mae);
            out += buf;
        }
    }
    return out;
}

}  // namespace tsmamba

namespace tsmamba {

std::vector<ScanBenchRow> bench_scan(std::span<const std::size_t> lens, std::size_t d_inner, std::size_t n_state,
                                     bool run_seq, bool run_par, std::size_t reps, std::uint64_t seed,
                                     std::size_t workers) {
    require(reps >= 5, ErrorKind::InvalidConfig, "bench_scan needs at least 5 repetitions");
    require(d_inner >= 1 && n_state >= 1, ErrorKind::InvalidConfig, "d_inner and n_state must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<Real> normal(0.0, 1.0);
    std::uniform_real_distribution<Real> uni(-0.5, 0.5);
    auto draw = [&](Shape s, auto& dist) {
        Tensor t(std::move(s));
        for (Real& v : t.data()) v = dist(rng);
        return t;
    };
    SSMParams ssm;
    ssm.A_log = Tensor({d_inner, n_state});
    for (std::size_t c = 0; c < d_inner; ++c)
        for (std::size_t j = 0; j < n_state; ++j) ssm.A_log.at(c, j) = std::log(static_cast<Real>(j + 1));
    ssm.x_to_B = draw({n_state, d_inner}, uni);
    ssm.x_to_C = draw({n_state, d_inner}, uni);
    ssm.x_to_dt = draw({1, d_inner}, uni);
    ssm.dt_bias = Tensor({d_inner}, -3.0);
    ssm.D_skip = Tensor({d_inner}, 1.0);

    struct Job {
        std::string mode;
        std::size_t len;
        std::function<Tensor()> run;
        Tensor out;
        std::vector<Real> times;
    };
    std::vector<Tensor> inputs;
    inputs.reserve(lens.size());
    for (std::size_t len : lens) {
        require(len >= 1, ErrorKind::InvalidConfig, "scan length must be positive");
        inputs.push_back(draw({d_inner, len}, normal));
    }
    std::vector<Job> jobs;
    for (const Tensor& x : inputs) {
        if (run_seq) jobs.push_back({"seq", x.dim(1), [&x, &ssm] { return selective_scan_sequential(x, ssm); }, {}, {}});
        if (run_par)
            jobs.push_back({"par", x.dim(1), [&x, &ssm, workers] { return selective_scan_parallel(x, ssm, workers); }, {}, {}});
    }
    // Round-robin over jobs so drift in machine state hits every length alike.
    for (Job& j : jobs) j.out = j.run();
    for (std::size_t r = 0; r < reps; ++r) {
        for (Job& j : jobs) {
            const auto t0 = std::chrono::steady_clock::now();
            j.out = j.run();
            j.times.push_back(std::chrono::duration<Real, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
    }

    std::vector<ScanBenchRow> rows;
    for (std::size_t k = 0; k < jobs.size(); ++k) {
        Job& j = jobs[k];
        std::sort(j.times.begin(), j.times.end());
        const Real ms = reps % 2 ? j.times[reps / 2] : 0.5 * (j.times[reps / 2 - 1] + j.times[reps / 2]);
        Real diff = -1.0;
        if (run_seq && run_par) diff = max_abs_diff(jobs[k - k % 2].out, jobs[k - k % 2 + 1].out);
        rows.push_back({j.mode, j.len, ms, ms > 0.0 ? j.len / (ms * 1e-3) : 0.0, diff});
    }
    return rows;
}

SynthSpec synth_preset(const std::string& name, std::uint64_t seed, std::size_t n_channels, std::size_t n_rows,
                       std::size_t lag, Real gain) {
    require(n_channels >= 1 && n_rows >= 1, ErrorKind::InvalidConfig, "synthetic dataset needs rows and channels");
    SynthSpec spec;
    spec.seed = seed;
    spec.n_channels = n_channels;
    spec.n_rows = n_rows;
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::uniform_real_distribution<Real> period(12.0, 96.0), amp(0.5, 2.0), phase(0.0, 6.283185307179586);
    const int d = static_cast<int>(n_channels);
    if (name == "sines") {
        for (int c = 0; c < d; ++c) {
            spec.components.push_back(SynthComponent::sinusoid(c, 1.0 / period(rng), amp(rng), phase(rng)));
            spec.components.push_back(SynthComponent::sinusoid(c, 1.0 / period(rng), 0.5 * amp(rng), phase(rng)));
            spec.components.push_back(SynthComponent::trend(c, 2e-5 * (c + 1)));
            spec.components.push_back(SynthComponent::noise(c, 0.1));
        }
    } else if (name == "cross_lag") {
        // Channel 0 is a noisy sinusoid mixture; each later channel copies its predecessor `lag` steps behind.
        spec.components.push_back(SynthComponent::sinusoid(0, 1.0 / period(rng), amp(rng), phase(rng)));
        spec.components.push_back(SynthComponent::sinusoid(0, 1.0 / period(rng), amp(rng), phase(rng)));
        spec.components.push_back(SynthComponent::noise(0, 0.3));
        for (int c = 1; c < d; ++c) spec.components.push_back(SynthComponent::cross_lag(c - 1, c, lag, gain));
    } else {
        fail(ErrorKind::InvalidConfig, "unknown synthetic preset '" + name + "' (expected sines or cross_lag)");
    }
    return spec;
}

}  // namespace tsmamba
