#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "strm/tensor.hpp"

namespace strm {

/// A named learnable tensor together with its accumulated gradient.
class Param {
 public:
  Param(std::string name, Tensor value);

  const std::string& name() const noexcept { return name_; }
  const Tensor& value() const noexcept { return value_; }
  Tensor& value() noexcept { return value_; }
  const Tensor& grad() const noexcept { return grad_; }
  Tensor& grad() noexcept { return grad_; }

  void zero_grad() { grad_.fill(0.0); }
  /// grad += g; shapes must match.
  void accumulate(const Tensor& g);

 private:
  std::string name_;
  Tensor value_;
  Tensor grad_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of one loss with respect to the params reachable from it,
/// in first-use order. Kept separate from Param::grad so that independent
/// tapes can be evaluated concurrently and merged afterwards.
struct ParamGrads {
  std::vector<Param*> params;
  std::vector<Tensor> grads;

  void accumulate_into_params() const;
  const Tensor* find(const Param& p) const;
};

/// Adjoint callback. `out` is the recorded result and `gout` is dL/d(out); for
/// each input that needs a gradient `gin[i]` is non-null and must be
/// incremented, never overwritten.
using BackwardFn = std::function<void(const Tensor& out, const Tensor& gout, std::span<Tensor* const> gin)>;

/// Linear record of executed operations. One writer; values are immutable
/// once recorded, and node storage never moves, so adjoint closures may hold
/// references to recorded values.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter. Registering the same Param twice yields the same Var.
  Var param(Param& p);

  /// Records an operation result. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Replays adjoints from a one-element `loss` down to every reachable param.
  ParamGrads gradients(const Var& loss) const;
  /// gradients(loss).accumulate_into_params()
  void backward(const Var& loss);

  /// Test hook: scales the adjoint delivered to the named param by `factor`.
  void set_adjoint_fault(std::string param_name, double factor);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Param* param = nullptr;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;
  std::map<const Param*, std::size_t> param_ids_;
  std::map<std::string, double> faults_;
};

}  // namespace strm
