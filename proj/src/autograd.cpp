#include "tsmamba/autograd.hpp"

#include "tsmamba/error.hpp"

namespace tsmamba {

const Tensor& Var::value() const {
    require(tape_ != nullptr, ErrorKind::GraphError, "value() on unbound Var");
    return tape_->value(*this);
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
        return Var(this, it->second);
    }
    // Copy: the tape must not observe later in-place parameter updates.
    nodes_.push_back(Node{p.value, {}, {}, &p, grad_enabled_ && p.trainable});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
        for (const Var& in : inputs) {
            require(in.tape() == this, ErrorKind::GraphError, "input recorded on a different tape");
            needs = needs || nodes_[in.id()].requires_grad;
        }
    }
    Node node{std::move(value), {}, {}, nullptr, needs};
    if (needs) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(Var v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
    return n.grad;
}

void Tape::backward(Var loss) {
    require(loss.tape() == this, ErrorKind::GraphError, "loss was not recorded on this tape");
    require(grad_enabled_, ErrorKind::GraphError, "backward on a tape recorded without gradients");
    require(!ran_backward_, ErrorKind::GraphError, "backward already ran on this tape");
    const Tensor& lv = value(loss);
    require(lv.size() == 1, ErrorKind::GraphError, "loss must be a scalar, got " + shape_str(lv.shape()));
    ran_backward_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_slot(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        // Node storage is stable during backward: closures only touch grads.
        n.backward(*this, n.grad, n.value);
    }
}

void Tape::add_param_grads() const {
    for_each_param_grad([](Parameter& p, const Tensor& g) {
        if (p.grad.empty()) p.zero_grad();
        p.grad += g;
    });
}

void Tape::for_each_param_grad(const std::function<void(Parameter&, const Tensor&)>& fn) const {
    for (const auto& [param, id] : param_nodes_) {
        const Node& n = nodes_[id];
        if (n.requires_grad && !n.grad.empty()) fn(*n.param, n.grad);
    }
}

void backward(Var loss, std::span<Parameter* const> params) {
    require(loss.valid(), ErrorKind::GraphError, "loss is not bound to a tape");
    for (Parameter* p : params) {
        if (p->trainable) p->zero_grad();
    }
    loss.tape()->backward(loss);
    loss.tape()->add_param_grads();
}

Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f, const Tensor& x, Real h) {
    require(h > 0.0, ErrorKind::InvalidConfig, "finite difference step must be positive");
    Tensor g = Tensor::zeros_like(x);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Real orig = probe[i];
        probe[i] = orig + h;
        const Real up = f(probe);
        probe[i] = orig - h;
        const Real down = f(probe);
        probe[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

}  // namespace tsmamba
