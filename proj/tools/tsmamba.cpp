// Command-line front end. Exit codes: 0 ok, 1 internal error, 2 config error,
// 3 data error, 4 checkpoint or horizon mismatch. Diagnostics go to stderr.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tsmamba/checkpoint.hpp"
#include "tsmamba/config.hpp"
#include "tsmamba/error.hpp"
#include "tsmamba/parallel.hpp"
#include "tsmamba/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tsmamba;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kCheckpoint = 4 };

struct CliError {
    int code;
    std::string message;
};

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidConfig:
        case ErrorKind::PatchLengthMismatch: return kConfig;
        case ErrorKind::DataError:
        case ErrorKind::ParseError:
        case ErrorKind::RaggedRows:
        case ErrorKind::DegenerateWindow:
        case ErrorKind::IoError: return kData;
        case ErrorKind::CheckpointMismatch:
        case ErrorKind::CorruptCheckpoint:
        case ErrorKind::VersionMismatch: return kCheckpoint;
        default: return kInternal;
    }
}

Checkpoint open_checkpoint(const std::string& path) {
    try {
        return load_checkpoint(path);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::IoError) throw CliError{kCheckpoint, e.what()};
        throw;
    }
}

std::size_t worker_count(std::size_t requested) {
    const std::size_t cap = configured_threads();
    return requested == 0 ? cap : std::min(requested, cap);
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw CliError{kData, "cannot write " + path};
    out << text;
}

DataOptions data_options(const std::string& date_column, bool ffill, bool standardize) {
    DataOptions o;
    if (date_column == "yes") o.date_column = true;
    else if (date_column == "no") o.date_column = false;
    o.forward_fill = ffill;
    o.standardize = standardize;
    return o;
}

struct LogSink {
    std::ofstream file;
    explicit LogSink(const std::string& path) {
        if (path.empty()) return;
        file.open(path, std::ios::trunc);
        if (!file) throw CliError{kData, "cannot write training log " + path};
        file << step_log_header() << '\n';
    }
    StepLogger logger() {
        if (!file.is_open()) return {};
        return [this](const StepLog& l) { file << format_step_log(l) << '\n'; };
    }
};

std::vector<PreparedSeries> load_series(const std::vector<std::string>& paths, const RunConfig& cfg,
                                        std::size_t lookback) {
    std::vector<PreparedSeries> out;
    for (const auto& p : paths) out.push_back(prepare_series(load_dataset(p, cfg.data), cfg.data, cfg.split, lookback));
    return out;
}

// --- pretrain ---------------------------------------------------------------

struct PretrainArgs {
    int stage = 0;
    std::string config, init, out, log, import_mamba;
    std::vector<std::string> data;
};

int cmd_pretrain(const PretrainArgs& a) {
    if (a.stage != 1 && a.stage != 2) throw CliError{kConfig, "--stage must be 1 or 2"};
    RunConfig cfg = load_run_config(a.config);
    const std::vector<std::string> data = a.data.empty() ? cfg.paths.data : a.data;
    const std::string init = a.init.empty() ? cfg.paths.init : a.init;
    const std::string out = a.out.empty() ? cfg.paths.out : a.out;
    const std::string log = a.log.empty() ? (cfg.paths.log.empty() ? out + ".log.csv" : cfg.paths.log) : a.log;
    if (a.stage == 2 && init.empty()) throw CliError{kConfig, "stage 2 requires --init (a stage-1 checkpoint)"};
    if (data.empty()) throw CliError{kConfig, "missing --data"};
    if (out.empty()) throw CliError{kConfig, "missing --out"};

    std::optional<TSMambaModel> start;
    if (!init.empty()) {
        start = open_checkpoint(init).model;
    } else {
        start.emplace(cfg.model, cfg.seed);
    }
    if (!a.import_mamba.empty()) start->import_mamba_layers(load_tensors(a.import_mamba));

    const Stage stage = a.stage == 1 ? Stage::Stage1 : Stage::Stage2;
    const std::size_t lookback = stage == Stage::Stage1 ? start->config().lookback : cfg.model.lookback;
    const auto series = load_series(data, cfg, lookback);

    LogSink sink(log);
    TrainOptions opts{cfg.seed, worker_count(cfg.threads), sink.logger()};
    StageResult result = pretrain(cfg, stage, series, *start, opts);
    save_checkpoint(out, result.model, std::string(to_string(stage)));
    std::fprintf(stderr, "%s: steps=%zu initial_loss=%.6g final_loss=%.6g -> %s\n",
                 std::string(to_string(stage)).c_str(), result.report.steps, result.report.initial_loss,
                 result.report.final_loss, out.c_str());
    return kOk;
}

// --- finetune ---------------------------------------------------------------

struct FinetuneArgs {
    std::string config, data, init, out, log, xchannel = "auto";
};

int cmd_finetune(const FinetuneArgs& a) {
    RunConfig cfg = load_run_config(a.config);
    XChannelRequest req = XChannelRequest::Auto;
    if (a.xchannel == "on") req = XChannelRequest::On;
    else if (a.xchannel == "off") req = XChannelRequest::Off;
    const std::string data = !a.data.empty() ? a.data : (cfg.paths.data.empty() ? "" : cfg.paths.data.front());
    const std::string init = a.init.empty() ? cfg.paths.init : a.init;
    const std::string out = a.out.empty() ? cfg.paths.out : a.out;
    if (data.empty()) throw CliError{kConfig, "missing --data"};
    if (init.empty()) throw CliError{kConfig, "missing --init (a stage-2 checkpoint)"};
    if (out.empty()) throw CliError{kConfig, "missing --out"};

    Checkpoint ckpt = open_checkpoint(init);
    if (ckpt.stage != "stage2" && ckpt.stage != "finetune") {
        throw CliError{kCheckpoint, init + " is a " + ckpt.stage + " checkpoint; fine-tuning needs a stage2 checkpoint"};
    }
    const auto series = prepare_series(load_dataset(data, cfg.data), cfg.data, cfg.split, ckpt.config.lookback);
    if (req == XChannelRequest::On && series.data.channels() < 2) {
        throw CliError{kConfig, "--xchannel on requires at least 2 channels, " + data + " has 1"};
    }
    const std::string log = a.log.empty() ? (cfg.paths.log.empty() ? out + ".log.csv" : cfg.paths.log) : a.log;
    LogSink sink(log);
    TrainOptions opts{cfg.seed, worker_count(cfg.threads), sink.logger()};
    FinetuneOutcome r = finetune(cfg, series, ckpt.model, req, opts);
    std::fprintf(stderr, "xchannel: %s (%s)\n", r.decision.enabled ? "enabled" : "disabled", r.decision.reason.c_str());
    save_checkpoint(out, r.result.model, "finetune");
    std::fprintf(stderr, "finetune: steps=%zu initial_loss=%.6g final_loss=%.6g -> %s\n", r.result.report.steps,
                 r.result.report.initial_loss, r.result.report.final_loss, out.c_str());
    return kOk;
}

// --- forecast ---------------------------------------------------------------

struct ForecastArgs {
    std::string model, input, out, date_column = "auto";
    std::size_t horizon = 0;
    bool ffill = false;
};

int cmd_forecast(const ForecastArgs& a) {
    Checkpoint ckpt = open_checkpoint(a.model);
    const ModelConfig& mc = ckpt.config;
    if (a.horizon != 0 && a.horizon != mc.horizon) {
        throw CliError{kCheckpoint, "--horizon " + std::to_string(a.horizon) + " does not match the checkpoint horizon " +
                                        std::to_string(mc.horizon)};
    }
    const TimeSeriesDataset ds = load_dataset(a.input, data_options(a.date_column, a.ffill, false));
    if (ds.length() < mc.lookback) {
        throw CliError{kData, a.input + " has " + std::to_string(ds.length()) + " rows, the model needs " +
                                  std::to_string(mc.lookback)};
    }
    if (mc.xchannel_enabled && ds.channels() != mc.n_channels) {
        throw CliError{kCheckpoint, "checkpoint was fine-tuned on " + std::to_string(mc.n_channels) +
                                        " channels, input has " + std::to_string(ds.channels())};
    }
    const std::size_t d = ds.channels(), start = ds.length() - mc.lookback;
    Tensor x({d, mc.lookback});
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t t = 0; t < mc.lookback; ++t) x.at(c, t) = ds.values.at(start + t, c);
    const Tensor y = forecast(ckpt.model, x);

    TimeSeriesDataset out;
    out.values = y.transposed();
    out.channel_names = ds.channel_names;
    if (out.channel_names.empty())
        for (std::size_t c = 0; c < d; ++c) out.channel_names.push_back("ch" + std::to_string(c));
    if (a.out.empty() || a.out == "-") {
        std::string text;
        for (std::size_t c = 0; c < d; ++c) text += (c ? "," : "") + out.channel_names[c];
        text += '\n';
        char buf[64];
        for (std::size_t t = 0; t < mc.horizon; ++t) {
            for (std::size_t c = 0; c < d; ++c) {
                std::snprintf(buf, sizeof buf, "%s%.17g", c ? "," : "", y.at(c, t));
                text += buf;
            }
            text += '\n';
        }
        std::cout << text;
    } else {
        write_csv(a.out, out);
    }
    return kOk;
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
    std::string model, split = "test", baseline, report, windows, date_column = "auto", split_mode = "fraction";
    std::vector<std::string> data;
    std::vector<std::size_t> horizons;
    std::size_t lookback = 512;
    bool raw = false, ffill = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
    if (!a.baseline.empty() && a.baseline != "repeat-last") throw CliError{kConfig, "--baseline must be repeat-last"};
    if (a.baseline.empty() && a.model.empty()) throw CliError{kConfig, "missing --model (or --baseline repeat-last)"};
    SplitPart part = SplitPart::Test;
    if (a.split == "train") part = SplitPart::Train;
    else if (a.split == "val") part = SplitPart::Val;
    SplitSpec split;
    if (a.split_mode == "ett_hour") split.mode = SplitMode::EttHour;
    else if (a.split_mode == "ett_minute") split.mode = SplitMode::EttMinute;

    std::map<std::size_t, TSMambaModel> models;
    if (a.baseline.empty()) {
        std::vector<std::string> paths;
        if (fs::is_directory(a.model)) {
            for (const auto& e : fs::directory_iterator(a.model))
                if (e.is_regular_file() && e.path().extension() == ".ckpt") paths.push_back(e.path().string());
            std::sort(paths.begin(), paths.end());
            if (paths.empty()) throw CliError{kCheckpoint, "no .ckpt files in " + a.model};
        } else {
            paths.push_back(a.model);
        }
        for (const auto& p : paths) {
            Checkpoint c = open_checkpoint(p);
            if (models.count(c.config.horizon)) throw CliError{kCheckpoint, "two checkpoints for horizon " +
                                                                                std::to_string(c.config.horizon)};
            models.emplace(c.config.horizon, std::move(c.model));
        }
    }
    std::vector<std::size_t> horizons = a.horizons;
    if (horizons.empty()) {
        if (models.empty()) throw CliError{kConfig, "--horizons is required with --baseline"};
        for (const auto& [h, _] : models) horizons.push_back(h);
    }
    for (std::size_t h : horizons) {
        if (a.baseline.empty() && !models.count(h)) {
            throw CliError{kCheckpoint, "no checkpoint for horizon " + std::to_string(h)};
        }
    }

    const DataOptions opts = data_options(a.date_column, a.ffill, !a.raw);
    const std::size_t workers = configured_threads();
    std::vector<ReportRow> rows;
    for (const auto& path : a.data) {
        const TimeSeriesDataset raw = load_dataset(path, opts);
        for (std::size_t h : horizons) {
            const TSMambaModel* m = a.baseline.empty() ? &models.at(h) : nullptr;
            const std::size_t lookback = m ? m->config().lookback : a.lookback;
            const PreparedSeries s = prepare_series(raw, opts, split, lookback);
            Forecaster f = m ? Forecaster([m](const Tensor& x) { return forecast(*m, x); })
                             : Forecaster([h](const Tensor& x) { return repeat_last_forecast(x, h); });
            EvalResult r = evaluate_split(s, part, lookback, h, f, workers);
            if (!(r.mae <= std::sqrt(r.mse) * (1.0 + 1e-12) + 1e-15)) {
                throw CliError{kInternal, "metric invariant MAE <= sqrt(MSE) violated"};
            }
            rows.push_back({raw.name, h, std::move(r)});
        }
    }
    write_text(a.report, format_report(rows));
    if (!a.windows.empty()) write_text(a.windows, format_window_errors(rows));
    return kOk;
}

// --- bench-scan -------------------------------------------------------------

struct BenchArgs {
    std::vector<std::size_t> lens{1024, 2048, 4096};
    std::size_t d_inner = 64, n_state = 16, reps = 5, workers = 0;
    std::uint64_t seed = 0;
    std::string mode = "both", out;
};

int cmd_bench_scan(const BenchArgs& a) {
    if (a.reps < 5) throw CliError{kConfig, "--reps must be at least 5"};
    const bool seq = a.mode != "par", par = a.mode != "seq";
    const auto rows = bench_scan(a.lens, a.d_inner, a.n_state, seq, par, a.reps, a.seed, a.workers);
    std::string text = seq && par ? "mode,len,wall_ms,throughput,max_abs_diff\n" : "mode,len,wall_ms,throughput\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6g", r.mode.c_str(), r.len, r.wall_ms, r.throughput);
        text += buf;
        if (seq && par) {
            std::snprintf(buf, sizeof buf, ",%.3g", r.max_abs_diff);
            text += buf;
        }
        text += '\n';
    }
    write_text(a.out, text);
    return kOk;
}

// --- synth / checkpoint-info ------------------------------------------------

struct SynthArgs {
    std::string preset = "sines", out;
    std::size_t channels = 4, rows = 20000, lag = 4;
    double gain = 1.0;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    TimeSeriesDataset ds = synth_generate(synth_preset(a.preset, a.seed, a.channels, a.rows, a.lag, a.gain));
    ds.channel_names.clear();
    for (std::size_t c = 0; c < a.channels; ++c) ds.channel_names.push_back("ch" + std::to_string(c));
    write_csv(a.out, ds);
    return kOk;
}

int cmd_checkpoint_info(const std::string& path) {
    nlohmann::json m;
    try {
        m = read_checkpoint_manifest(path);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::IoError) throw CliError{kCheckpoint, e.what()};
        throw;
    }
    std::cout << m.dump(2) << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TSMamba time series forecaster"};
    app.require_subcommand(1);

    PretrainArgs pre;
    auto* p = app.add_subcommand("pretrain", "Stage 1 (next/previous patch) or stage 2 (forecast head) training");
    p->add_option("--stage", pre.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    p->add_option("--config", pre.config, "Run configuration JSON")->required();
    p->add_option("--data", pre.data, "Training CSV files");
    p->add_option("--init", pre.init, "Starting checkpoint (required for stage 2)");
    p->add_option("--out", pre.out, "Output checkpoint");
    p->add_option("--log", pre.log, "Training log CSV (default: <out>.log.csv)");
    p->add_option("--import-mamba", pre.import_mamba, "Named-tensor file with layers.{i}.* Mamba weights");

    FinetuneArgs ft;
    auto* f = app.add_subcommand("finetune", "Fine-tune a foundation checkpoint with frozen Mamba blocks");
    f->add_option("--config", ft.config, "Run configuration JSON")->required();
    f->add_option("--data", ft.data, "Training CSV");
    f->add_option("--init", ft.init, "Stage-2 checkpoint");
    f->add_option("--out", ft.out, "Output checkpoint");
    f->add_option("--log", ft.log, "Training log CSV (default: <out>.log.csv)");
    f->add_option("--xchannel", ft.xchannel, "Cross-channel attention")->check(CLI::IsMember({"auto", "on", "off"}));

    ForecastArgs fc;
    auto* c = app.add_subcommand("forecast", "Forecast the rows after the last lookback window of a CSV");
    c->add_option("--model", fc.model, "Checkpoint")->required();
    c->add_option("--input", fc.input, "Input CSV")->required();
    c->add_option("--horizon", fc.horizon, "Must equal the checkpoint horizon");
    c->add_option("--out", fc.out, "Output CSV (default: stdout)");
    c->add_option("--date-column", fc.date_column)->check(CLI::IsMember({"auto", "yes", "no"}));
    c->add_flag("--ffill", fc.ffill, "Forward-fill missing values");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "MSE/MAE per horizon on a chronological split");
    e->add_option("--model", ev.model, "Checkpoint or directory of .ckpt files");
    e->add_option("--data", ev.data, "Evaluation CSV files")->required();
    e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));
    e->add_option("--split-mode", ev.split_mode)->check(CLI::IsMember({"fraction", "ett_hour", "ett_minute"}));
    e->add_option("--horizons", ev.horizons, "Comma-separated horizons")->delimiter(',');
    e->add_option("--baseline", ev.baseline, "Evaluate a reference forecaster instead of a model")
        ->check(CLI::IsMember({"repeat-last"}));
    e->add_option("--lookback", ev.lookback, "Lookback for --baseline");
    e->add_flag("--raw", ev.raw, "Score in raw units instead of train-standardized units");
    e->add_option("--report", ev.report, "Report CSV (default: stdout)");
    e->add_option("--windows", ev.windows, "Per-window error CSV");
    e->add_option("--date-column", ev.date_column)->check(CLI::IsMember({"auto", "yes", "no"}));
    e->add_flag("--ffill", ev.ffill, "Forward-fill missing values");

    BenchArgs bs;
    auto* b = app.add_subcommand("bench-scan", "Time the sequential and parallel scan kernels");
    b->add_option("--len-list", bs.lens)->delimiter(',');
    b->add_option("--d-inner", bs.d_inner);
    b->add_option("--n-state", bs.n_state);
    b->add_option("--mode", bs.mode)->check(CLI::IsMember({"seq", "par", "both"}));
    b->add_option("--reps", bs.reps, "Repetitions per length (>= 5)");
    b->add_option("--workers", bs.workers, "Parallel scan threads (0 = default)");
    b->add_option("--seed", bs.seed);
    b->add_option("--out", bs.out, "Output CSV (default: stdout)");

    SynthArgs sy;
    auto* s = app.add_subcommand("synth", "Write a synthetic dataset CSV");
    s->add_option("--preset", sy.preset)->check(CLI::IsMember({"sines", "cross_lag"}));
    s->add_option("--channels", sy.channels);
    s->add_option("--rows", sy.rows);
    s->add_option("--lag", sy.lag);
    s->add_option("--gain", sy.gain);
    s->add_option("--seed", sy.seed);
    s->add_option("--out", sy.out)->required();

    std::string info_path;
    auto* ci = app.add_subcommand("checkpoint-info", "Print a checkpoint manifest");
    ci->add_option("path", info_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return kConfig;
    }

    try {
        if (*p) return cmd_pretrain(pre);
        if (*f) return cmd_finetune(ft);
        if (*c) return cmd_forecast(fc);
        if (*e) return cmd_evaluate(ev);
        if (*b) return cmd_bench_scan(bs);
        if (*s) return cmd_synth(sy);
        if (*ci) return cmd_checkpoint_info(info_path);
    } catch (const CliError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.message.c_str());
        return ex.code;
    } catch (const Error& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return exit_code(ex.kind());
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return kInternal;
    }
    return kInternal;
}
