#include "gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace tsmamba::testing {
namespace {

Real evaluate(const Objective& objective) {
    Tape tape(false);
    return objective(tape).value()[0];
}

Tensor smooth_series(std::size_t d, std::size_t len, std::mt19937_64& rng) {
    std::normal_distribution<Real> noise(0.0, 0.2);
    Tensor x({d, len});
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t t = 0; t < len; ++t) x.at(c, t) = std::sin(0.25 * t + 1.3 * c) + 0.02 * t + noise(rng);
    return x;
}

WindowSample make_sample(std::size_t d, const ModelConfig& cfg, std::mt19937_64& rng) {
    Tensor x = smooth_series(d, cfg.lookback + cfg.horizon, rng);
    WindowSample s{Tensor({d, cfg.lookback}), Tensor({d, cfg.horizon}), cfg.lookback};
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t t = 0; t < cfg.lookback; ++t) s.input.at(c, t) = x.at(c, t);
        for (std::size_t t = 0; t < cfg.horizon; ++t) s.target.at(c, t) = x.at(c, cfg.lookback + t);
    }
    return s;
}

void append(std::vector<ParamGradCheck>& out, std::vector<ParamGradCheck> more, const std::string& prefix) {
    for (auto& r : more) {
        r.name = prefix + r.name;
        out.push_back(std::move(r));
    }
}

}  // namespace

std::vector<ParamGradCheck> check_parameter_gradients(const Objective& objective, std::vector<Parameter*> params,
                                                      const GradTolerance& tol) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = objective(tape);
        backward(loss, params);
    }
    std::vector<ParamGradCheck> out;
    for (Parameter* p : params) {
        ParamGradCheck r{p->name, p->value.size()};
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const Real orig = p->value[i];
            p->value[i] = orig + tol.h;
            const Real up = evaluate(objective);
            p->value[i] = orig - tol.h;
            const Real down = evaluate(objective);
            p->value[i] = orig;
            const Real numeric = (up - down) / (2.0 * tol.h);
            const Real analytic = p->grad[i];
            const Real err = std::abs(analytic - numeric);
            const Real scale = std::max(std::abs(analytic), std::abs(numeric));
            r.max_abs_err = std::max(r.max_abs_err, err);
            if (scale > tol.abs_floor) r.max_rel_err = std::max(r.max_rel_err, err / scale);
            if (err > tol.abs_floor && err > tol.rel * scale) ++r.failures;
        }
        out.push_back(std::move(r));
    }
    return out;
}

ModelConfig gradient_suite_config() {
    ModelConfig c;
    c.lookback = 32;
    c.patch_len = 8;
    c.horizon = 4;
    c.d_model = 8;
    c.n_layers = 1;
    c.d_state = 4;
    c.head_dim = 4;
    c.n_channels = 2;
    return c;
}

std::vector<ParamGradCheck> end_to_end_gradient_suite(std::uint64_t seed, const GradTolerance& tol) {
    std::vector<ParamGradCheck> out;
    std::mt19937_64 rng(seed);
    const ModelConfig cfg = gradient_suite_config();
    const WindowSample sample = make_sample(2, cfg, rng);

    TSMambaModel model(cfg, seed);
    append(out,
           check_parameter_gradients(
               [&](Tape& tape) {
                   ModelVars v(tape, model);
                   return stage2_loss(tape, v, cfg, sample);
               },
               model.params().pointers(), tol),
           "stage2/");

    Stage1Heads heads(cfg, seed + 1);
    std::vector<Parameter*> s1 = model.params().pointers();
    std::erase_if(s1, [](const Parameter* p) { return p->name.rfind("head.", 0) == 0; });
    for (Parameter* p : heads.params().pointers()) s1.push_back(p);
    const Tensor window = sample.input.rows(0, 1);
    append(out,
           check_parameter_gradients(
               [&](Tape& tape) {
                   ModelVars v(tape, model);
                   Stage1HeadVars hv(tape, heads);
                   return stage1_loss(tape, v, hv, cfg, window);
               },
               s1, tol),
           "stage1/");

    // Four channels so the compressed width is 2 and the attention is not a single key.
    const WindowSample wide = make_sample(4, cfg, rng);
    TSMambaModel xmodel = model;
    xmodel.enable_xchannel(4, rng);
    std::uniform_real_distribution<Real> u(-0.5, 0.5);
    for (Real& w : xmodel.params().at("xchannel.expand.weight").value.data()) w = u(rng);
    for (Real& w : xmodel.params().at("xchannel.expand.bias").value.data()) w = u(rng);
    std::vector<Parameter*> xc;
    for (Parameter* p : xmodel.params().pointers())
        if (p->name.rfind("xchannel.", 0) == 0) xc.push_back(p);
    append(out,
           check_parameter_gradients(
               [&](Tape& tape) {
                   ModelVars v(tape, xmodel);
                   return stage2_loss(tape, v, xmodel.config(), wide);
               },
               xc, tol),
           "finetune/");

    ModelConfig acfg = cfg;
    acfg.revin_affine = true;
    TSMambaModel amodel(acfg, seed + 2);
    for (Real& g : amodel.params().at("revin.gamma").value.data()) g = 1.0 + u(rng);
    for (Real& b : amodel.params().at("revin.beta").value.data()) b = u(rng);
    std::vector<Parameter*> rv{&amodel.params().at("revin.gamma"), &amodel.params().at("revin.beta")};
    append(out,
           check_parameter_gradients(
               [&](Tape& tape) {
                   ModelVars v(tape, amodel);
                   return stage2_loss(tape, v, acfg, sample);
               },
               rv, tol),
           "affine/");
    return out;
}

}  // namespace tsmamba::testing
