#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tsmamba/ops.hpp"
#include "tsmamba/training.hpp"

using namespace tsmamba;
using tsmamba::testing::error_kind_of;
using tsmamba::testing::random_tensor;

namespace {

ModelConfig tiny(std::size_t lookback = 32) {
    ModelConfig c;
    c.lookback = lookback;
    c.horizon = 4;
    c.patch_len = 8;
    c.d_model = 8;
    c.n_layers = 1;
    c.d_state = 4;
    c.head_dim = 3;
    return c;
}

Tensor wave(std::size_t d, std::size_t len, Real phase) {
    Tensor x({d, len});
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t t = 0; t < len; ++t) x.at(c, t) = std::sin(0.4 * t + phase + c) + 0.05 * t;
    return x;
}

std::vector<WindowSample> samples(std::size_t n, std::size_t d, const ModelConfig& cfg) {
    std::vector<WindowSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor x = wave(d, cfg.lookback + cfg.horizon, 0.37 * i);
        WindowSample s{Tensor({d, cfg.lookback}), Tensor({d, cfg.horizon}), i};
        for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t t = 0; t < cfg.lookback; ++t) s.input.at(c, t) = x.at(c, t);
            for (std::size_t t = 0; t < cfg.horizon; ++t) s.target.at(c, t) = x.at(c, cfg.lookback + t);
        }
        out.push_back(std::move(s));
    }
    return out;
}

Real huber_ref(Real e, Real delta) {
    const Real a = std::abs(e);
    return a <= delta ? 0.5 * e * e : delta * (a - 0.5 * delta);
}

StageConfig quick(Stage stage, std::size_t epochs) {
    StageConfig c = StageConfig::defaults(stage);
    c.epochs = epochs;
    c.batch_size = 4;
    c.probe_samples = 8;
    return c;
}

}  // namespace

TEST(StageConfig, DefaultsAndInvariants) {
    const StageConfig s1 = StageConfig::defaults(Stage::Stage1);
    EXPECT_EQ(s1.lr_new, 1e-3);
    EXPECT_EQ(s1.lr_backbone, 1e-3);
    const StageConfig s2 = StageConfig::defaults(Stage::Stage2);
    EXPECT_EQ(s2.lr_new, 1e-3);
    EXPECT_EQ(s2.lr_backbone, 1e-5);
    const StageConfig ft = StageConfig::defaults(Stage::Finetune);
    EXPECT_EQ(ft.lr_new, 5e-4);
    EXPECT_TRUE(ft.freeze_mamba_blocks);
    EXPECT_EQ(ft.min_samples_for_xchannel, 10000u);

    StageConfig bad = s2;
    bad.lr_backbone = 1e-2;
    EXPECT_EQ(error_kind_of([&] { bad.validate(); }), ErrorKind::InvalidConfig);
    bad = ft;
    bad.freeze_mamba_blocks = false;
    EXPECT_EQ(error_kind_of([&] { bad.validate(); }), ErrorKind::InvalidConfig);
    bad = s1;
    bad.batch_size = 0;
    EXPECT_EQ(error_kind_of([&] { bad.validate(); }), ErrorKind::InvalidConfig);
}

TEST(AdamW, ZeroLearningRateLeavesParameters) {
    std::mt19937_64 rng(1);
    Parameter p{"w", random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)};
    const Tensor before = p.value;
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.1});
    Parameter* ptr = &p;
    opt.step(std::span(&ptr, 1), 0.0, 0.0);
    EXPECT_TRUE(bit_identical(p.value, before));
}

TEST(AdamW, ScalarHandCalculation) {
    Parameter p{"w", Tensor::from({1.0}), Tensor::from({0.5}), true, LrGroup::New};
    Parameter* ptr = &p;
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.01});
    opt.step(std::span(&ptr, 1), 0.1, 0.0);
    // m = 0.05, v = 0.00025; bias-corrected m = 0.5, v = 0.25.
    EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0));
    // Second step with gradient -0.5: m = 0.045 - 0.05 = -0.005, v = 0.00024975 + 0.00025.
    const Real w1 = p.value[0];
    p.grad = Tensor::from({-0.5});
    opt.step(std::span(&ptr, 1), 0.1, 0.0);
    const Real m_hat = (0.9 * 0.05 + 0.1 * -0.5) / (1.0 - 0.81);
    const Real v_hat = (0.999 * 0.00025 + 0.001 * 0.25) / (1.0 - 0.999 * 0.999);
    EXPECT_NEAR(p.value[0], w1 - 0.1 * (m_hat / (std::sqrt(v_hat) + 1e-8) + 0.01 * w1), 1e-15);
}

TEST(AdamW, GroupsFreezeAndMissingGrad) {
    Parameter bb{"bb", Tensor::from({1.0}), Tensor::from({1.0}), true, LrGroup::Backbone};
    Parameter nw{"nw", Tensor::from({1.0}), Tensor::from({1.0}), true, LrGroup::New};
    Parameter fz{"fz", Tensor::from({1.0}), Tensor::from({1.0}), false, LrGroup::New};
    std::vector<Parameter*> ps{&bb, &nw, &fz};
    AdamW opt;
    opt.step(ps, 0.1, 0.001);
    EXPECT_NEAR(bb.value[0], 1.0 - 0.001, 1e-9);
    EXPECT_NEAR(nw.value[0], 1.0 - 0.1, 1e-9);
    EXPECT_EQ(fz.value[0], 1.0);
    Parameter empty{"e", Tensor::from({1.0}), {}};
    Parameter* e = &empty;
    EXPECT_EQ(error_kind_of([&] { opt.step(std::span(&e, 1), 0.1, 0.1); }), ErrorKind::MissingGrad);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
    Parameter a{"a", Tensor({1}), Tensor::from({3.0})};
    Parameter b{"b", Tensor({1}), Tensor::from({4.0})};
    Parameter f{"f", Tensor({1}), Tensor::from({100.0}), false};
    std::vector<Parameter*> ps{&a, &b, &f};
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
    EXPECT_DOUBLE_EQ(b.grad[0], 0.8);
    EXPECT_EQ(f.grad[0], 100.0);
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 10.0), 1.0);
    EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
}

TEST(Stage1Loss, NeedsTwoPatches) {
    ModelConfig c = tiny(8);
    TSMambaModel m(c, 1);
    Stage1Heads h(c, 2);
    const Tensor w = wave(1, 8, 0.0);
    EXPECT_EQ(error_kind_of([&] { stage1_loss(m, h, std::span(&w, 1)); }), ErrorKind::InsufficientPatches);
}

TEST(Stage1Loss, ZeroHeadsOnConstantInput) {
    const ModelConfig c = tiny();
    TSMambaModel m(c, 3);
    Stage1Heads h(c, 4);
    for (auto& p : h.params().all()) p.value.fill(0.0);
    const Tensor w({1, 32}, 2.5);
    EXPECT_EQ(stage1_loss(m, h, std::span(&w, 1)), 0.0);
}

TEST(Stage1Loss, MatchesStraightLineReference) {
    for (std::size_t lookback : {16u, 32u}) {
        const ModelConfig c = tiny(lookback);
        TSMambaModel m(c, 5);
        Stage1Heads h(c, 6);
        const Tensor window = wave(2, lookback, 0.3);
        const std::size_t tokens = lookback / 8;

        const Normalized n = revin_normalize(window, c.revin_eps);
        const BackboneOutput rep = backbone_forward(m, n.x_hat);
        auto head = [&](const std::string& which, const Tensor& reps, std::size_t ch, std::size_t t, std::size_t k) {
            const Tensor& w = h.params().at("stage1." + which + ".weight").value;
            Real a = h.params().at("stage1." + which + ".bias").value[k];
            for (std::size_t j = 0; j < c.d_model; ++j) a += w.at(k, j) * reps.at(ch, t, j);
            return a;
        };
        Real total = 0.0;
        std::size_t terms = 0;
        for (std::size_t ch = 0; ch < 2; ++ch) {
            for (std::size_t t = 0; t + 1 < tokens; ++t)
                for (std::size_t k = 0; k < 8; ++k, ++terms)
                    total += huber_ref(head("next_patch", rep.fwd_rep, ch, t, k) - n.x_hat.at(ch, (t + 1) * 8 + k), 1.0);
            for (std::size_t t = 1; t < tokens; ++t)
                for (std::size_t k = 0; k < 8; ++k, ++terms)
                    total += huber_ref(head("prev_patch", rep.bwd_rep_aligned, ch, t, k) - n.x_hat.at(ch, (t - 1) * 8 + k),
                                       1.0);
        }
        // Two channels, two streams, tokens-1 patches each.
        EXPECT_EQ(terms, 2u * 2u * (tokens - 1) * 8u);
        EXPECT_NEAR(stage1_loss(m, h, std::span(&window, 1)), total / terms, 1e-13);
    }
}

TEST(Stage2Loss, Examples) {
    const ModelConfig c = tiny();
    TSMambaModel m(c, 7);
    WindowSample s = samples(1, 2, c)[0];

    WindowSample exact = s;
    exact.target = forecast(m, s.input);
    EXPECT_LT(stage2_loss(m, std::span(&exact, 1)), 1e-24);

    const Normalized n = revin_normalize(s.input, c.revin_eps);
    const Tensor pred = prediction_head(m, backbone_forward(m, n.x_hat).combined, NormStats{
        Tensor::zeros_like(n.stats.mean), Tensor(n.stats.std.shape(), 1.0), 0.0});
    Real ref = 0.0;
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t t = 0; t < 4; ++t) {
            const Real th = (s.target.at(ch, t) - n.stats.mean[ch]) / (n.stats.std[ch] + n.stats.eps);
            ref += huber_ref(pred.at(ch, t) - th, 1.0);
        }
    EXPECT_NEAR(stage2_loss(m, std::span(&s, 1)), ref / 8.0, 1e-13);

    TSMambaModel zero = m;
    for (const char* name : {"head.out.weight", "head.out.bias"}) zero.params().at(name).value.fill(0.0);
    Real zref = 0.0;
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t t = 0; t < 4; ++t)
            zref += huber_ref((s.target.at(ch, t) - n.stats.mean[ch]) / (n.stats.std[ch] + n.stats.eps), 1.0);
    EXPECT_NEAR(stage2_loss(zero, std::span(&s, 1)), zref / 8.0, 1e-13);

    WindowSample wrong = s;
    wrong.target = Tensor({2, 5});
    EXPECT_EQ(error_kind_of([&] { stage2_loss(m, std::span(&wrong, 1)); }), ErrorKind::ShapeMismatch);
}

TEST(Stage2Loss, BackboneReceivesGradient) {
    const ModelConfig c = tiny();
    TSMambaModel m(c, 8);
    const WindowSample s = samples(1, 1, c)[0];
    Tape tape;
    ModelVars v(tape, m);
    auto ptrs = m.params().pointers();
    for (Parameter* p : ptrs) p->zero_grad();
    backward(stage2_loss(tape, v, c, s), ptrs);
    for (const Parameter* p : ptrs) {
        if (p->name.find("_encoder.") == std::string::npos && p->name.rfind("embed.", 0) != 0) continue;
        Real norm = 0.0;
        for (Real g : p->grad.data()) norm += g * g;
        EXPECT_GT(norm, 0.0) << p->name;
    }
}

TEST(TrainLog, Format) {
    EXPECT_EQ(step_log_header(), "stage,epoch,step,loss,lr_new,lr_backbone,wall_ms");
    EXPECT_EQ(format_step_log(StepLog{Stage::Stage2, 1, 17, 0.25, 1e-3, 1e-5, 12.5}),
              "stage2,1,17,0.25,0.001,1e-05,12.500");
}

TEST(Stage1, ZeroEpochsKeepInitialisation) {
    const ModelConfig c = tiny();
    const TSMambaModel init(c, 9);
    std::vector<Tensor> windows{wave(1, 32, 0.0), wave(1, 32, 1.0)};
    TrainOptions opts;
    opts.seed = 9;
    const StageResult r = run_stage1(windows, quick(Stage::Stage1, 0), init, opts);
    EXPECT_EQ(r.report.steps, 0u);
    EXPECT_EQ(r.report.final_loss, r.report.initial_loss);
    for (const auto& p : init.params().all()) EXPECT_TRUE(bit_identical(r.model.params().at(p.name).value, p.value));
    const std::vector<Tensor> none;
    EXPECT_EQ(error_kind_of([&] { run_stage1(none, quick(Stage::Stage1, 1), init, {}); }), ErrorKind::DataError);
}

TEST(Stage1, DeterministicAndLearning) {
    const ModelConfig c = tiny();
    const TSMambaModel init(c, 10);
    std::vector<Tensor> windows;
    for (std::size_t i = 0; i < 16; ++i) windows.push_back(wave(1, 32, 0.4 * i));
    std::size_t logged = 0;
    TrainOptions opts{10, 1, [&](const StepLog& l) {
                          EXPECT_EQ(l.stage, Stage::Stage1);
                          EXPECT_EQ(l.step, ++logged);
                      }};
    StageConfig cfg = quick(Stage::Stage1, 8);
    cfg.lr_new = cfg.lr_backbone = 3e-3;
    const StageResult a = run_stage1(windows, cfg, init, opts);
    const StageResult b = run_stage1(windows, cfg, init, {10, 1, {}});
    EXPECT_EQ(a.report.steps, 32u);
    EXPECT_EQ(logged, 32u);
    EXPECT_LT(a.report.final_loss, a.report.initial_loss);
    EXPECT_EQ(a.report.epoch_losses.size(), 8u);
    EXPECT_LT(a.report.epoch_losses.back(), a.report.epoch_losses.front());
    for (const auto& p : a.model.params().all())
        EXPECT_TRUE(bit_identical(p.value, b.model.params().at(p.name).value)) << p.name;
}

TEST(Stage1, ShardedBatchesMatchSingleWorker) {
    const ModelConfig c = tiny();
    const TSMambaModel init(c, 11);
    std::vector<Tensor> windows;
    for (std::size_t i = 0; i < 8; ++i) windows.push_back(wave(1, 32, 0.7 * i));
    const StageResult one = run_stage1(windows, quick(Stage::Stage1, 2), init, {11, 1, {}});
    const StageResult four = run_stage1(windows, quick(Stage::Stage1, 2), init, {11, 4, {}});
    for (const auto& p : one.model.params().all())
        EXPECT_LT(max_abs_diff(p.value, four.model.params().at(p.name).value), 1e-12) << p.name;
}

TEST(Stage2, ZeroBackboneRateFreezesBackbone) {
    const ModelConfig c = tiny();
    const TSMambaModel s1(c, 12);
    const auto data = samples(8, 1, c);
    StageConfig cfg = quick(Stage::Stage2, 2);
    cfg.lr_backbone = 0.0;
    const StageResult r = run_stage2(data, cfg, c, s1, {12, 1, {}});
    EXPECT_GT(r.report.steps, 0u);
    for (const auto& p : r.model.params().all()) {
        if (p.lr_group == LrGroup::Backbone) {
            EXPECT_TRUE(bit_identical(p.value, s1.params().at(p.name).value)) << p.name;
        } else if (p.name.rfind("head.", 0) == 0) {
            EXPECT_FALSE(bit_identical(p.value, s1.params().at(p.name).value)) << p.name;
        }
    }
    EXPECT_EQ(r.model.params().at("align.weight").lr_group, LrGroup::New);
    EXPECT_EQ(r.model.params().at("fwd_encoder.layer0.mamba.A_log").lr_group, LrGroup::Backbone);
}

TEST(Stage2, ZeroEpochsKeepRandomHead) {
    const ModelConfig c = tiny();
    const TSMambaModel s1(c, 13);
    const StageResult r = run_stage2(samples(4, 1, c), quick(Stage::Stage2, 0), c, s1, {13, 1, {}});
    const TSMambaModel fresh(c, 13 + 2);
    for (const char* n : {"head.compress.weight", "head.out.weight"}) {
        EXPECT_TRUE(bit_identical(r.model.params().at(n).value, fresh.params().at(n).value));
        EXPECT_FALSE(bit_identical(r.model.params().at(n).value, s1.params().at(n).value));
    }
    EXPECT_TRUE(bit_identical(r.model.params().at("embed.weight").value, s1.params().at("embed.weight").value));
}

TEST(Stage2, IncompatibleBackbone) {
    ModelConfig other = tiny();
    other.d_model = 12;
    other.head_dim = 4;
    const TSMambaModel s1(tiny(), 14);
    EXPECT_EQ(error_kind_of([&] { run_stage2(samples(2, 1, other), quick(Stage::Stage2, 1), other, s1, {}); }),
              ErrorKind::CheckpointMismatch);
}

TEST(Finetune, ZeroStepsEqualZeroShot) {
    const ModelConfig c = tiny();
    const TSMambaModel foundation(c, 15);
    const auto data = samples(4, 3, c);
    StageConfig cfg = quick(Stage::Finetune, 0);
    cfg.enable_xchannel = true;
    cfg.min_samples_for_xchannel = 1;
    const StageResult r = run_finetune(data, cfg, foundation, {15, 1, {}});
    EXPECT_TRUE(r.model.config().xchannel_enabled);
    for (const auto& s : data) EXPECT_TRUE(bit_identical(forecast(r.model, s.input), forecast(foundation, s.input)));
}

TEST(Finetune, FrozenTensorsKeepTheirHashes) {
    const ModelConfig c = tiny();
    const TSMambaModel foundation(c, 16);
    const auto data = samples(12, 3, c);
    StageConfig cfg = quick(Stage::Finetune, 4);
    cfg.enable_xchannel = true;
    cfg.min_samples_for_xchannel = 1;
    const StageResult r = run_finetune(data, cfg, foundation, {16, 2, {}});
    EXPECT_EQ(r.report.steps, 12u);
    std::size_t frozen = 0, moved = 0;
    for (const auto& p : foundation.params().all()) {
        const Parameter& q = r.model.params().at(p.name);
        if (is_mamba_block_tensor(p.name)) {
            ++frozen;
            EXPECT_FALSE(q.trainable);
            EXPECT_EQ(tensor_hash(q.value), tensor_hash(p.value)) << p.name;
        } else if (tensor_hash(q.value) != tensor_hash(p.value)) {
            ++moved;
        }
    }
    EXPECT_EQ(frozen, 20u);
    EXPECT_GT(moved, 5u);
    EXPECT_FALSE(bit_identical(r.model.params().at("xchannel.expand.weight").value,
                               Tensor({3, xchannel_dim(3)})));
}

TEST(Finetune, CrossChannelRequirements) {
    const ModelConfig c = tiny();
    const TSMambaModel foundation(c, 17);
    StageConfig cfg = quick(Stage::Finetune, 1);
    cfg.enable_xchannel = true;
    cfg.min_samples_for_xchannel = 1;
    EXPECT_EQ(error_kind_of([&] { run_finetune(samples(4, 1, c), cfg, foundation, {}); }), ErrorKind::InvalidConfig);
    cfg.min_samples_for_xchannel = 100;
    EXPECT_EQ(error_kind_of([&] { run_finetune(samples(4, 3, c), cfg, foundation, {}); }), ErrorKind::InvalidConfig);

    EXPECT_EQ(decide_xchannel(100, 1, 10).reason, "single channel");
    const XChannelDecision few = decide_xchannel(10, 7, 100);
    EXPECT_FALSE(few.enabled);
    EXPECT_EQ(few.reason, "insufficient samples (70 channel-window pairs < 100)");
    EXPECT_TRUE(decide_xchannel(2000, 7, 10000).enabled);
}

TEST(TensorHash, SensitiveToValuesAndShape) {
    const Tensor a({2, 3}, 1.0);
    Tensor b = a;
    EXPECT_EQ(tensor_hash(a), tensor_hash(b));
    b[4] = std::nextafter(1.0, 2.0);
    EXPECT_NE(tensor_hash(a), tensor_hash(b));
    EXPECT_NE(tensor_hash(a), tensor_hash(a.reshaped({3, 2})));
}

TEST(Univariate, SplitsChannels) {
    const auto data = samples(2, 3, tiny());
    const auto uni = to_univariate(data);
    ASSERT_EQ(uni.size(), 6u);
    EXPECT_TRUE(bit_identical(uni[4].input, data[1].input.rows(1, 1)));
    EXPECT_EQ(uni[4].origin, data[1].origin);
}
