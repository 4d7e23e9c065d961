#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "tsmamba/autograd.hpp"
#include "tsmamba/error.hpp"
#include "tsmamba/ops.hpp"
#include "tsmamba/tensor.hpp"

namespace tsmamba::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, Real lo = -1.0, Real hi = 1.0) {
    std::uniform_real_distribution<Real> d(lo, hi);
    Tensor t(std::move(shape));
    for (Real& v : t.data()) v = d(rng);
    return t;
}

/// |a - n| <= rel * max(|a|, |n|), or below an absolute floor for entries that are zero up to rounding.
inline ::testing::AssertionResult grads_close(const Tensor& analytic, const Tensor& numeric, Real rel = 1e-4,
                                              Real abs_floor = 1e-8) {
    if (analytic.shape() != numeric.shape()) return ::testing::AssertionFailure() << "shape mismatch";
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const Real a = analytic[i], n = numeric[i];
        const Real err = std::abs(a - n);
        if (err <= abs_floor) continue;
        if (err > rel * std::max(std::abs(a), std::abs(n))) {
            return ::testing::AssertionFailure() << "entry " << i << ": analytic " << a << " vs numeric " << n;
        }
    }
    return ::testing::AssertionSuccess();
}

/// Kind of the tsmamba::Error thrown by fn; records a failure when nothing is thrown.
inline ErrorKind error_kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorKind::IoError;
}

using VarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients of sum(f(inputs) * probe) with central differences for every input.
inline void check_op_gradients(const VarFn& f, const std::vector<Tensor>& inputs, std::uint64_t seed = 7,
                               Real h = 1e-5, Real rel = 1e-4) {
    std::mt19937_64 rng(seed);
    std::vector<Parameter> params(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        params[i].name = "in" + std::to_string(i);
        params[i].value = inputs[i];
    }
    Tensor probe;
    {
        Tape tape(false);
        std::vector<Var> vs;
        for (const auto& t : inputs) vs.push_back(tape.constant(t));
        probe = random_tensor(f(tape, vs).shape(), rng);
    }
    auto scalar = [&](Tape& tape, const std::vector<Var>& vs) {
        return op::sum(op::mul(f(tape, vs), tape.constant(probe)));
    };
    Tape tape;
    std::vector<Var> vs;
    for (auto& p : params) vs.push_back(tape.param(p));
    Var loss = scalar(tape, vs);
    std::vector<Parameter*> ptrs;
    for (auto& p : params) ptrs.push_back(&p);
    backward(loss, ptrs);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto fi = [&](const Tensor& x) {
            Tape t2(false);
            std::vector<Var> v2;
            for (std::size_t j = 0; j < inputs.size(); ++j) v2.push_back(t2.constant(j == i ? x : inputs[j]));
            return scalar(t2, v2).value()[0];
        };
        const Tensor numeric = finite_diff_grad(fi, inputs[i], h);
        EXPECT_TRUE(grads_close(params[i].grad, numeric, rel)) << "input " << i;
    }
}

}  // namespace tsmamba::testing
