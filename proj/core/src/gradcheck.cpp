#include "strm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace strm {

std::vector<Tensor> finite_diff_gradients(const std::function<double()>& loss_fn, std::span<Param* const> params,
                                          double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (Param* p : params) {
    Tensor g(p->value().shape());
    auto values = p->value().data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = loss_fn();
      values[i] = saved - step;
      const double minus = loss_fn();
      values[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus))
        throw NumericError("non-finite loss while perturbing '" + p->name() + "' element " + std::to_string(i));
      g[i] = (plus - minus) / (2.0 * step);
    }
    out.push_back(std::move(g));
  }
  return out;
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

std::vector<GradCheckRow> compare_gradients(std::span<Param* const> params, std::span<const Tensor> analytic,
                                            std::span<const Tensor> numeric, double tolerance, double abs_floor) {
  std::vector<GradCheckRow> rows;
  for (std::size_t k = 0; k < params.size(); ++k) {
    GradCheckRow row;
    row.name = params[k]->name();
    row.count = analytic[k].size();
    row.passed = true;
    for (std::size_t i = 0; i < analytic[k].size(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      const double abs_err = std::abs(a - n);
      row.max_abs_error = std::max(row.max_abs_error, abs_err);
      if (std::max(std::abs(a), std::abs(n)) < abs_floor) continue;
      const double rel = relative_error(a, n);
      row.max_rel_error = std::max(row.max_rel_error, rel);
      if (rel > tolerance) row.passed = false;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace strm
