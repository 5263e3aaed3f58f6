#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "strm/gradcheck.hpp"
#include "strm/ops.hpp"
#include "strm/random.hpp"
#include "strm/tape.hpp"
#include "strm/tensor.hpp"

namespace strm::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

/// sum(x * w) for a fixed weight tensor, so that every output element carries a distinct adjoint.
inline Var weighted_sum(const Var& x, const Tensor& w) {
  const std::size_t n = x.value().size();
  const Var flat = reshape(x, {1, n});
  return matmul(flat, x.tape().constant(w.reshaped({n, 1})));
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Largest per-element relative error between tape and central-difference
/// gradients of a scalar built from `params`. Elements whose two gradients
/// are both below `abs_floor` are skipped.
inline double gradcheck_error(const std::vector<Param*>& params, const Builder& build, double step = 1e-5,
                              double abs_floor = 1e-8) {
  auto loss_on = [&](Tape& tape) {
    std::vector<Var> leaves;
    for (auto* p : params) leaves.push_back(tape.param(*p));
    return build(tape, leaves);
  };
  Tape tape;
  const Var loss = loss_on(tape);
  const ParamGrads grads = tape.gradients(loss);
  const auto numeric = finite_diff_gradients(
      [&] {
        Tape t;
        return loss_on(t).value().item();
      },
      params, step);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor* g = grads.find(*params[k]);
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      const double a = g ? (*g)[i] : 0.0;
      const double n = numeric[k][i];
      if (std::abs(a) < abs_floor && std::abs(n) < abs_floor) continue;
      worst = std::max(worst, relative_error(a, n));
    }
  }
  return worst;
}

}  // namespace strm::testing
