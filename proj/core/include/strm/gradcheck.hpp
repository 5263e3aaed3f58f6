#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "strm/tape.hpp"

namespace strm {

/// Central differences (f(θ+h) - f(θ-h)) / 2h for every scalar of every param.
/// `loss_fn` reads the params' current values; they are restored afterwards.
/// Throws NumericError naming the param if the loss is non-finite.
std::vector<Tensor> finite_diff_gradients(const std::function<double()>& loss_fn, std::span<Param* const> params,
                                          double step);

/// |a - n| / max(|a|, |n|), 0 when both vanish.
double relative_error(double analytic, double numeric);

struct GradCheckRow {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

/// Compares analytic gradients against finite differences element by element.
/// An element passes when its relative error is within `tolerance`, or when
/// both gradients are below `abs_floor` in magnitude (relative error is
/// meaningless for values at the finite-difference noise level).
std::vector<GradCheckRow> compare_gradients(std::span<Param* const> params, std::span<const Tensor> analytic,
                                            std::span<const Tensor> numeric, double tolerance, double abs_floor);

}  // namespace strm
