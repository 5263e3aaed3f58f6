#include "strm/tape.hpp"

#include <optional>

namespace strm {

Param::Param(std::string name, Tensor value)
    : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()) {}

void Param::accumulate(const Tensor& g) {
  if (g.shape() != grad_.shape())
    throw ShapeError("gradient for '" + name_ + "' has shape " + shape_string(g.shape()) + ", expected " +
                     shape_string(grad_.shape()));
  auto dst = grad_.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

const Tensor& Var::value() const { return tape_->value(id_); }

void ParamGrads::accumulate_into_params() const {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->accumulate(grads[i]);
}

const Tensor* ParamGrads::find(const Param& p) const {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i] == &p) return &grads[i];
  return nullptr;
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant of shape " + shape_string(value.shape()));
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Param& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value(), {}, {}, &p, true});
  param_ids_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("operation produced a non-finite value");
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw std::logic_error("operand recorded on a different tape");
    node.inputs.push_back(in.id());
    node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

ParamGrads Tape::gradients(const Var& loss) const {
  if (loss.value().size() != 1)
    throw ShapeError("gradients() needs a one-element loss, got " + shape_string(loss.shape()));
  const std::size_t n = loss.id() + 1;
  std::vector<std::optional<Tensor>> adj(n);
  adj[loss.id()] = Tensor::filled(loss.shape(), 1.0);

  std::vector<Tensor*> gin;
  for (std::size_t i = n; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!adj[i] || !node.backward) continue;
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].needs_grad) continue;
      if (!adj[in]) adj[in] = Tensor(nodes_[in].value.shape());
      gin[k] = &*adj[in];
    }
    node.backward(node.value, *adj[i], gin);
    if (!node.param) adj[i].reset();
  }

  ParamGrads out;
  for (std::size_t i = 0; i < n; ++i) {
    const Node& node = nodes_[i];
    if (!node.param) continue;
    Tensor g = adj[i] ? std::move(*adj[i]) : Tensor(node.value.shape());
    if (auto it = faults_.find(node.param->name()); it != faults_.end())
      for (auto& v : g.data()) v *= it->second;
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + node.param->name() + "'");
    out.params.push_back(node.param);
    out.grads.push_back(std::move(g));
  }
  return out;
}

void Tape::backward(const Var& loss) { gradients(loss).accumulate_into_params(); }

void Tape::set_adjoint_fault(std::string param_name, double factor) {
  faults_[std::move(param_name)] = factor;
}

}  // namespace strm
