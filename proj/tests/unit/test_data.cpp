#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tsmamba/data.hpp"
#include "tsmamba/pipeline.hpp"

using namespace tsmamba;
using tsmamba::testing::error_kind_of;

namespace {

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("tsmamba_data_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    std::string file(const std::string& name, const std::string& contents) const {
        const auto p = path_ / name;
        std::ofstream(p) << contents;
        return p.string();
    }
    std::string path(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

TimeSeriesDataset ramp(std::size_t rows, std::size_t d) {
    TimeSeriesDataset ds;
    ds.values = Tensor({rows, d});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) ds.values.at(r, c) = static_cast<Real>(100 * c + r);
    return ds;
}

}  // namespace

TEST(Csv, HeaderAndShape) {
    TempDir dir;
    const auto p = dir.file("small.csv", "a,b\n1,2\n3,4\n5,6\n");
    const TimeSeriesDataset ds = load_csv(p);
    EXPECT_EQ(ds.length(), 3u);
    EXPECT_EQ(ds.channels(), 2u);
    EXPECT_EQ(ds.name, "small");
    EXPECT_EQ(ds.channel_names, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(ds.values.at(2, 1), 6.0);
    EXPECT_EQ(load_csv(dir.file("nohdr.csv", "1,2\n3,4\n")).length(), 2u);
}

TEST(Csv, DateColumn) {
    TempDir dir;
    const auto p = dir.file("dated.csv", "date,x,y,z\n2016-07-01 00:00:00,1,2,3\n2016-07-01 01:00:00,4,5,6\n");
    EXPECT_TRUE(detect_date_column(p));
    const TimeSeriesDataset ds = load_csv(p, {true});
    EXPECT_EQ(ds.channels(), 3u);
    EXPECT_EQ(ds.timestamps.size(), 2u);
    EXPECT_EQ(ds.timestamps[1], "2016-07-01 01:00:00");
    EXPECT_EQ(ds.values.at(1, 0), 4.0);
    EXPECT_FALSE(detect_date_column(dir.file("plain.csv", "x,y\n1,2\n")));
}

TEST(Csv, Errors) {
    TempDir dir;
    const auto bad = dir.file("bad.csv", "a,b\n1,2\n3,oops\n");
    try {
        load_csv(bad);
        FAIL() << "expected ParseError";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ParseError);
        EXPECT_NE(std::string(e.what()).find("'oops' at line 3, column 2"), std::string::npos) << e.what();
    }
    EXPECT_EQ(error_kind_of([&] { load_csv(dir.file("rag.csv", "a,b\n1,2\n3\n")); }), ErrorKind::RaggedRows);
    EXPECT_EQ(error_kind_of([&] { load_csv(dir.path("absent.csv")); }), ErrorKind::IoError);
    EXPECT_EQ(error_kind_of([&] { load_csv(dir.file("nan.csv", "a\n1\nNaN\n")); }), ErrorKind::DataError);
}

TEST(Csv, ForwardFill) {
    TempDir dir;
    const auto p = dir.file("gap.csv", "a,b\n1,2\n,5\n7,\n");
    const TimeSeriesDataset ds = load_csv(p, {false, true});
    EXPECT_EQ(ds.values.at(1, 0), 1.0);
    EXPECT_EQ(ds.values.at(2, 1), 5.0);
    EXPECT_EQ(error_kind_of([&] { load_csv(dir.file("lead.csv", "a,b\n,1\n2,3\n"), {false, true}); }),
              ErrorKind::DataError);
}

TEST(Csv, WriteReadRoundtrip) {
    TempDir dir;
    TimeSeriesDataset ds = synth_generate(synth_preset("sines", 3, 3, 50));
    ds.timestamps.assign(50, "t");
    for (std::size_t i = 0; i < 50; ++i) ds.timestamps[i] = "2020-01-01 " + std::to_string(i);
    write_csv(dir.path("rt.csv"), ds);
    const TimeSeriesDataset back = load_csv(dir.path("rt.csv"), {true});
    EXPECT_EQ(back.channel_names, ds.channel_names);
    EXPECT_EQ(back.timestamps, ds.timestamps);
    EXPECT_LT(max_abs_diff(back.values, ds.values), 1e-9);
}

TEST(Standardize, Examples) {
    TimeSeriesDataset ds;
    ds.values = Tensor({4, 2}, {8.0, 3.0, 12.0, 3.0, 14.0, 3.0, 0.0, 3.0});
    // Train rows 0..1 of channel 0: mean 10, std 2.
    const ChannelStats s = fit_standardizer(ds, 0, 2);
    EXPECT_EQ(s.mean[0], 10.0);
    EXPECT_EQ(s.std[0], 2.0);
    EXPECT_FALSE(s.zero_variance[0]);
    EXPECT_TRUE(s.zero_variance[1]);
    const TimeSeriesDataset z = standardize(ds, s);
    EXPECT_EQ(z.values.at(2, 0), 2.0);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(z.values.at(r, 1), 0.0);
    const TimeSeriesDataset twice = standardize(z, s);
    EXPECT_FALSE(bit_identical(twice.values, z.values));
    Tensor block({2, 1}, {2.0, 0.0});
    const Tensor raw = unstandardize_block(block, s);
    EXPECT_EQ(raw[0], 14.0);
    EXPECT_EQ(raw[1], 3.0);
}

TEST(Windows, CountsAndContiguity) {
    const TimeSeriesDataset ds = ramp(12 + 5, 2);
    EXPECT_EQ(make_windows(ramp(12, 1), 8, 4, 1).size(), 1u);
    const auto w = make_windows(ds, 8, 4, 1);
    EXPECT_EQ(w.size(), 6u);
    EXPECT_EQ(window_count(17, 8, 4, 1), 6u);
    EXPECT_EQ(window_count(17, 8, 4, 2), 3u);
    EXPECT_EQ(make_windows(ds, 8, 4, 2).size(), 3u);
    EXPECT_TRUE(make_windows(ramp(11, 1), 8, 4, 1).empty());
    for (std::size_t i = 0; i < w.size(); ++i) {
        EXPECT_EQ(w[i].origin, 8 + i);
        for (std::size_t c = 0; c < 2; ++c) {
            EXPECT_EQ(w[i].input.at(c, 7) + 1.0, w[i].target.at(c, 0));
            EXPECT_EQ(w[i].input.at(c, 0), ds.values.at(i, c));
        }
    }
}

TEST(Splits, FractionsAndNoLeakage) {
    const SplitSpec spec;
    const SplitRanges r = split_ranges(1000, 96, spec);
    EXPECT_EQ(r.train.begin, 0u);
    EXPECT_EQ(r.train.end, 700u);
    EXPECT_EQ(r.val.begin, 700u - 96u);
    EXPECT_EQ(r.val.end, 800u);
    EXPECT_EQ(r.test.begin, 800u - 96u);
    EXPECT_EQ(r.test.end, 1000u);
    const TimeSeriesDataset ds = ramp(1000, 1);
    const auto train = split_windows(ds, r.train, 96, 24, 1);
    const auto test = split_windows(ds, r.test, 96, 24, 1);
    const auto val = split_windows(ds, r.val, 96, 24, 1);
    ASSERT_FALSE(train.empty());
    EXPECT_EQ(test.front().origin, 800u);
    EXPECT_EQ(val.front().origin, 700u);
    for (const auto& t : test) EXPECT_GT(t.origin, train.back().origin + 24);
    EXPECT_LE(train.back().origin + 24, 700u);

    SplitSpec bad;
    bad.test_frac = 0.3;
    EXPECT_EQ(error_kind_of([&] { split_ranges(1000, 96, bad); }), ErrorKind::InvalidConfig);
}

TEST(Splits, EttMonths) {
    SplitSpec spec;
    spec.mode = SplitMode::EttHour;
    const SplitRanges h = split_ranges(17420, 96, spec);
    EXPECT_EQ(h.train.end, 8640u);
    EXPECT_EQ(h.val.end, 8640u + 2880u);
    EXPECT_EQ(h.test.end, 8640u + 2 * 2880u);
    spec.mode = SplitMode::EttMinute;
    EXPECT_EQ(split_ranges(69680, 96, spec).train.end, 34560u);
    EXPECT_EQ(error_kind_of([&] { split_ranges(1000, 96, spec); }), ErrorKind::DataError);
}

TEST(Metrics, Examples) {
    const Tensor t = Tensor::from({1.0, 2.0});
    EXPECT_EQ(metric_mse(t, t), 0.0);
    EXPECT_EQ(metric_mae(t, t), 0.0);
    const Tensor p = Tensor::from({2.0, 1.0});
    EXPECT_EQ(metric_mse(p, t), 1.0);
    EXPECT_EQ(metric_mae(p, t), 1.0);
    const Tensor off = Tensor::from({1.0 - 0.75, 2.0 - 0.75});
    EXPECT_DOUBLE_EQ(metric_mse(off, t), 0.5625);
    EXPECT_DOUBLE_EQ(metric_mae(off, t), 0.75);
    EXPECT_EQ(error_kind_of([&] { metric_mse(Tensor({3}), t); }), ErrorKind::ShapeMismatch);

    std::mt19937_64 rng(5);
    const Tensor a = tsmamba::testing::random_tensor({4, 9}, rng), b = tsmamba::testing::random_tensor({4, 9}, rng);
    EXPECT_LE(metric_mae(a, b), std::sqrt(metric_mse(a, b)));
    Tensor ar({36}), br({36});
    for (std::size_t i = 0; i < 36; ++i) {
        ar[i] = a[(i * 7) % 36];
        br[i] = b[(i * 7) % 36];
    }
    EXPECT_NEAR(metric_mse(ar, br), metric_mse(a, b), 1e-15);
}

TEST(Evaluate, RepeatLastBaseline) {
    const TimeSeriesDataset ds = ramp(20, 2);
    const auto w = make_windows(ds, 8, 4, 1);
    const EvalResult r =
        evaluate_windows(w, [](const Tensor& x) { return repeat_last_forecast(x, 4); }, 3);
    // Ramp target minus last input is 1..4: MSE (1+4+9+16)/4, MAE 2.5.
    EXPECT_EQ(r.n_windows, w.size());
    EXPECT_DOUBLE_EQ(r.mse, 7.5);
    EXPECT_DOUBLE_EQ(r.mae, 2.5);
    EXPECT_EQ(r.per_window.back().origin, w.back().origin);
}

TEST(Synth, Presets) {
    SynthSpec pure{1, 1, 200, {SynthComponent::sinusoid(-1, 0.05, 2.0)}};
    const TimeSeriesDataset s = synth_generate(pure);
    for (std::size_t t = 0; t + 20 < 200; ++t) EXPECT_NEAR(s.values.at(t, 0), s.values.at(t + 20, 0), 1e-12);

    SynthSpec lag{2, 2, 100,
                  {SynthComponent::sinusoid(0, 0.03, 1.0), SynthComponent::noise(0, 0.5),
                   SynthComponent::cross_lag(0, 1, 4, 1.0)}};
    const TimeSeriesDataset l = synth_generate(lag);
    for (std::size_t t = 4; t < 100; ++t) EXPECT_EQ(l.values.at(t, 1), l.values.at(t - 4, 0));
    EXPECT_TRUE(bit_identical(synth_generate(lag).values, l.values));
    lag.seed = 3;
    EXPECT_FALSE(bit_identical(synth_generate(lag).values, l.values));

    SynthSpec too_long{1, 2, 10, {SynthComponent::cross_lag(0, 1, 10, 1.0)}};
    EXPECT_EQ(error_kind_of([&] { synth_generate(too_long); }), ErrorKind::InvalidConfig);

    const TimeSeriesDataset cl = synth_generate(synth_preset("cross_lag", 7, 4, 300, 4, 1.0));
    for (std::size_t c = 1; c < 4; ++c)
        for (std::size_t t = 4; t < 300; ++t) EXPECT_EQ(cl.values.at(t, c), cl.values.at(t - 4, c - 1));
    EXPECT_EQ(synth_generate(synth_preset("sines", 1, 4, 100)).channels(), 4u);
    EXPECT_EQ(error_kind_of([] { synth_preset("unknown", 1, 1, 10); }), ErrorKind::InvalidConfig);
}

TEST(Pipeline, PreparedSeriesAndSamples) {
    const TimeSeriesDataset raw = synth_generate(synth_preset("sines", 4, 2, 400));
    DataOptions opts;
    const PreparedSeries p = prepare_series(raw, opts, SplitSpec{}, 32);
    ASSERT_TRUE(p.stats.has_value());
    // Train rows have zero mean and unit std after standardisation.
    const ChannelStats check = fit_standardizer(p.data, p.ranges.train.begin, p.ranges.train.end);
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR(check.mean[c], 0.0, 1e-12);
        EXPECT_NEAR(check.std[c], 1.0, 1e-12);
    }
    opts.standardize = false;
    EXPECT_FALSE(prepare_series(raw, opts, SplitSpec{}, 32).stats.has_value());

    const std::vector<PreparedSeries> series{p};
    const auto s1 = stage1_windows(series, 32, 8);
    EXPECT_EQ(s1.size(), 2 * window_count(280, 32, 0, 8));
    EXPECT_EQ(s1.front().shape(), (Shape{1, 32}));
    const auto uni = train_samples(series, 32, 8, 4, true);
    const auto multi = train_samples(series, 32, 8, 4, false);
    EXPECT_EQ(uni.size(), 2 * multi.size());
    EXPECT_EQ(multi.size(), window_count(280, 32, 8, 4));

    const EvalResult e = evaluate_split(p, SplitPart::Test, 32, 8,
                                        [](const Tensor& x) { return repeat_last_forecast(x, 8); });
    EXPECT_EQ(e.n_windows, window_count(80 + 32, 32, 8, 1));
    EXPECT_LE(e.mae, std::sqrt(e.mse));
}

TEST(Pipeline, ReportFormats) {
    EvalResult a{0.5, 0.25, 10, {{100, 0.5, 0.25}}}, b{1.5, 0.75, 8, {}};
    const std::vector<ReportRow> rows{{"ettm2", 96, a}, {"ettm2", 192, b}};
    EXPECT_EQ(format_report(rows),
              "dataset,horizon,mse,mae,n_windows\nettm2,96,0.5,0.25,10\nettm2,192,1.5,0.75,8\nettm2,avg,1,0.5,18\n");
    EXPECT_EQ(format_window_errors(rows), "dataset,horizon,origin,mse,mae\nettm2,96,100,0.5,0.25\n");
}
