#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsmamba/tensor.hpp"

namespace tsmamba {

/// Learning-rate group. Backbone tensors are refined with the smaller rate
/// in the second pretraining stage; New covers freshly initialised modules.
enum class LrGroup { Backbone, New };

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
    LrGroup lr_group = LrGroup::Backbone;

    void zero_grad() { grad = Tensor::zeros_like(value); }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recording of one forward pass.
///
/// Each recorded node owns its value and, when it depends on a trainable
/// parameter, a backward closure that scatters the node's gradient into its
/// inputs. With grad disabled the tape stores values only, which is the
/// inference path.
class Tape {
public:
    /// Receives (tape, gradient of this node, value of this node).
    using BackwardFn = std::function<void(Tape&, const Tensor&, const Tensor&)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf bound to a parameter. Repeated calls return the same node.
    Var param(Parameter& p);
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

    const Tensor& value(Var v) const { return nodes_[v.id()].value; }
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient accumulator of v, allocated as zeros on first use.
    Tensor& grad_slot(Var v);
    /// Gradient of v after backward(); empty when v received none.
    const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }

    /// Seeds d(loss)/d(loss) = 1 and runs the recorded closures in reverse.
    void backward(Var loss);

    /// Adds leaf gradients into Parameter::grad of every bound trainable parameter.
    void add_param_grads() const;
    /// Visits (parameter, gradient) for every bound parameter that received a gradient.
    void for_each_param_grad(const std::function<void(Parameter&, const Tensor&)>& fn) const;

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
    bool grad_enabled_;
    bool ran_backward_ = false;
};

/// Fills the grad slot of every trainable parameter in `params` with
/// d(loss)/d(value). Parameters the loss does not depend on get zeros;
/// non-trainable parameters are left untouched.
void backward(Var loss, std::span<Parameter* const> params);

/// Central finite differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f, const Tensor& x, Real h);

}  // namespace tsmamba
