#include "strm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace strm {

namespace {

// C[m x n] += A[m x k] * B[k x n], all row-major. Four rows of C are updated
// per pass over B so each loaded row of B feeds four accumulating axpys.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
             double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a[i * lda + p], a1 = a[(i + 1) * lda + p];
      const double a2 = a[(i + 2) * lda + p], a3 = a[(i + 3) * lda + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * lda + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// Row-major transpose of a [rows x cols] block into dst [cols x rows].
void transpose_into(const double* src, std::size_t rows, std::size_t cols, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[m x n] += op(A) * op(B), row-major, where op(A) is m x k and op(B) is k x n.
// ta: A is stored k x m; tb: B is stored n x k. Transposed operands are
// copied to scratch so the kernel always streams contiguous rows.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
  thread_local std::vector<double> scratch_a, scratch_b;
  if (ta) {
    scratch_a.resize(m * k);
    transpose_into(a, k, m, scratch_a.data());
    a = scratch_a.data();
  }
  if (tb) {
    scratch_b.resize(k * n);
    transpose_into(b, n, k, scratch_b.data());
    b = scratch_b.data();
  }
  gemm_nn(m, n, k, a, k, b, c);
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
  if (x.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(x.shape()));
}

void add_into(Tensor& dst, const Tensor& src, double factor = 1.0) {
  double* d = dst.raw();
  const double* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += factor * s[i];
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_last(const Shape& shape) {
  if (shape.size() == 1) return {1};
  return Shape(shape.begin(), shape.end() - 1);
}

// Shared body of the four matrix products; batch == 0 means plain rank-2 operands.
Var product(const char* op, const Var& a, const Var& b, bool batched, bool tb) {
  const std::size_t r = batched ? 3 : 2;
  require_rank(op, a, r);
  require_rank(op, b, r);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t batch = batched ? as[0] : 1;
  if (batched && bs[0] != batch) mismatch(op, as, bs);
  const std::size_t m = as[r - 2], k = as[r - 1];
  const std::size_t kb = tb ? bs[r - 1] : bs[r - 2];
  const std::size_t n = tb ? bs[r - 2] : bs[r - 1];
  if (k != kb) mismatch(op, as, bs);

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor out(out_shape);
  const double* av = a.value().raw();
  const double* bv = b.value().raw();
  for (std::size_t z = 0; z < batch; ++z)
    gemm(false, tb, m, n, k, av + z * m * k, bv + z * k * n, out.raw() + z * m * n);

  const Tensor& at = a.value();
  const Tensor& bt = b.value();
  return a.tape().record(std::move(out), {a, b},
                         [&at, &bt, batch, m, n, k, tb](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t z = 0; z < batch; ++z) {
                             const double* gz = g.raw() + z * m * n;
                             const double* az = at.raw() + z * m * k;
                             const double* bz = bt.raw() + z * k * n;
                             if (gin[0]) {
                               // dA = G * op(B)^T
                               gemm(false, !tb, m, k, n, gz, bz, gin[0]->raw() + z * m * k);
                             }
                             if (gin[1]) {
                               if (!tb)  // dB = A^T * G   [k x n]
                                 gemm(true, false, k, n, m, az, gz, gin[1]->raw() + z * k * n);
                               else  // dB = G^T * A   [n x k]
                                 gemm(true, false, n, k, m, gz, az, gin[1]->raw() + z * k * n);
                             }
                           }
                         });
}

}  // namespace

Var matmul(const Var& a, const Var& b) { return product("matmul", a, b, false, false); }
Var matmul_transposed(const Var& a, const Var& b) { return product("matmul_transposed", a, b, false, true); }
Var batch_matmul(const Var& a, const Var& b) { return product("batch_matmul", a, b, true, false); }
Var batch_matmul_transposed(const Var& a, const Var& b) {
  return product("batch_matmul_transposed", a, b, true, true);
}

Var transpose(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_string(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  const double* src = x.value().raw();
  for (std::size_t z = 0; z < batch; ++z)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[z * m * n + j * m + i] = src[z * m * n + i * n + j];
  return x.tape().record(std::move(out), {x},
                         [batch, m, n](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           // g has the transposed layout [n x m]; map it back.
                           double* d = gin[0]->raw();
                           const double* src = g.raw();
                           for (std::size_t z = 0; z < batch; ++z)
                             for (std::size_t j = 0; j < n; ++j)
                               for (std::size_t i = 0; i < m; ++i) d[z * m * n + i * n + j] += src[z * m * n + j * m + i];
                         });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.value().size())
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  return x.tape().record(x.value().reshaped(std::move(shape)), {x},
                         [](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           double* d = gin[0]->raw();
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         });
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor out = a.value();
  add_into(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) add_into(*gin[0], g);
    if (gin[1]) add_into(*gin[1], g);
  });
}

Var sub(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) mismatch("sub", a.shape(), b.shape());
  Tensor out = a.value();
  add_into(out, b.value(), -1.0);
  return a.tape().record(std::move(out), {a, b}, [](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) add_into(*gin[0], g);
    if (gin[1]) add_into(*gin[1], g, -1.0);
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return x.tape().record(std::move(out), {x},
                         [factor](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           add_into(*gin[0], g, factor);
                         });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape().record(std::move(out), {x},
                         [](const Tensor& out, const Tensor& g, std::span<Tensor* const> gin) {
                           double* d = gin[0]->raw();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (out[i] > 0.0) d[i] += g[i];
                         });
}

Var softmax_rows(const Var& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  Tensor out(x.shape());
  const double* xv = x.value().raw();
  double* o = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * n;
    double* orow = o + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (orow[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) orow[j] /= total;
  }
  return x.tape().record(std::move(out), {x},
                         [rows, n](const Tensor& y, const Tensor& g, std::span<Tensor* const> gin) {
                           // dx = y * (g - <g, y>)
                           double* d = gin[0]->raw();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* yr = y.raw() + r * n;
                             const double* gr = g.raw() + r * n;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                             for (std::size_t j = 0; j < n; ++j) d[r * n + j] += yr[j] * (gr[j] - dot);
                           }
                         });
}

Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_string(s0));
  Shape os = s0;
  os[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) mismatch("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) mismatch("concat", s0, s);
    extents.push_back(s[axis]);
    os[axis] += s[axis];
  }
  const AxisSplit split = split_at(os, axis);
  Tensor out(os);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double* src = xs[k].value().raw();
    const std::size_t chunk = extents[k] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.raw() + o * split.extent * split.inner + offset);
    offset += chunk;
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return xs[0].tape().record(std::move(out), std::move(inputs),
                             [extents, split](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < gin.size(); ++k) {
                                 const std::size_t chunk = extents[k] * split.inner;
                                 if (gin[k]) {
                                   double* d = gin[k]->raw();
                                   for (std::size_t o = 0; o < split.outer; ++o) {
                                     const double* src = g.raw() + o * split.extent * split.inner + offset;
                                     for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += src[i];
                                   }
                                 }
                                 offset += chunk;
                               }
                             });
}

Var mean(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean: axis out of range for " + shape_string(s));
  const AxisSplit sp = split_at(s, axis);
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os = {1};
  Tensor out(os);
  const double* xv = x.value().raw();
  const double inv = 1.0 / static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.extent + e) * sp.inner + i];
  for (auto& v : out.data()) v *= inv;
  return x.tape().record(std::move(out), {x},
                         [sp, inv](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           double* d = gin[0]->raw();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t e = 0; e < sp.extent; ++e)
                               for (std::size_t i = 0; i < sp.inner; ++i)
                                 d[(o * sp.extent + e) * sp.inner + i] += inv * g[o * sp.inner + i];
                         });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.tape().record(Tensor::scalar(total), {x},
                         [](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           const double gv = g[0];
                           for (auto& v : gin[0]->data()) v += gv;
                         });
}

Var l2_norm(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t n = x.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(drop_last(x.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv[r * n + j] * xv[r * n + j];
    out[r] = std::sqrt(s);
  }
  return x.tape().record(std::move(out), {x},
                         [&xv, rows, n](const Tensor& y, const Tensor& g, std::span<Tensor* const> gin) {
                           double* d = gin[0]->raw();
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (y[r] == 0.0) continue;
                             const double f = g[r] / y[r];
                             for (std::size_t j = 0; j < n; ++j) d[r * n + j] += f * xv[r * n + j];
                           }
                         });
}

Var normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t n = x.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(x.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv[r * n + j] * xv[r * n + j];
    norms[r] = std::sqrt(s);
    if (norms[r] == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] / norms[r];
  }
  return x.tape().record(std::move(out), {x},
                         [norms = std::move(norms), rows, n](const Tensor& y, const Tensor& g,
                                                              std::span<Tensor* const> gin) {
                           // dx = (g - <g, y> y) / |x|
                           double* d = gin[0]->raw();
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (norms[r] == 0.0) continue;
                             const double* yr = y.raw() + r * n;
                             const double* gr = g.raw() + r * n;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                             for (std::size_t j = 0; j < n; ++j) d[r * n + j] += (gr[j] - dot * yr[j]) / norms[r];
                           }
                         });
}

Var cosine_matrix(const Var& a, const Var& b) {
  require_rank("cosine_matrix", a, 2);
  require_rank("cosine_matrix", b, 2);
  if (a.shape()[1] != b.shape()[1]) mismatch("cosine_matrix", a.shape(), b.shape());
  return matmul_transposed(normalize_rows(a), normalize_rows(b));
}

Var cosine(const Var& a, const Var& b) {
  require_rank("cosine", a, 1);
  require_rank("cosine", b, 1);
  if (a.shape() != b.shape()) mismatch("cosine", a.shape(), b.shape());
  const std::size_t n = a.shape()[0];
  return reshape(cosine_matrix(reshape(a, {1, n}), reshape(b, {1, n})), {1});
}

Var max_reduce(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t n = x.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(drop_last(x.shape()));
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.raw() + r * n;
    arg[r] = static_cast<std::size_t>(std::max_element(xr, xr + n) - xr);  // first maximum
    out[r] = xr[arg[r]];
  }
  return x.tape().record(std::move(out), {x},
                         [arg = std::move(arg), n](const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
                           double* d = gin[0]->raw();
                           for (std::size_t r = 0; r < arg.size(); ++r) d[r * n + arg[r]] += g[r];
                         });
}

Var index_rows(const Var& x, std::vector<std::size_t> indices) {
  require_rank("index_rows", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (indices.empty()) throw ShapeError("index_rows: empty index list");
  Tensor out({indices.size(), cols});
  const double* xv = x.value().raw();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows)
      throw std::out_of_range("index_rows: row " + std::to_string(indices[i]) + " out of range for " +
                              shape_string(x.shape()));
    std::copy(xv + indices[i] * cols, xv + (indices[i] + 1) * cols, out.raw() + i * cols);
  }
  return x.tape().record(std::move(out), {x},
                         [indices = std::move(indices), cols](const Tensor&, const Tensor& g,
                                                              std::span<Tensor* const> gin) {
                           double* d = gin[0]->raw();
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             for (std::size_t j = 0; j < cols; ++j) d[indices[i] * cols + j] += g[i * cols + j];
                         });
}

Var cross_entropy(const Var& probs, std::span<const std::size_t> targets) {
  constexpr double kFloor = 1e-12;
  const Tensor& p = probs.value();
  const std::size_t c = probs.shape().back();
  const std::size_t rows = p.size() / c;
  if (targets.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (p[r * c + j] < 0.0) throw std::invalid_argument("cross_entropy: negative probability");
      total += p[r * c + j];
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::invalid_argument("cross_entropy: row " + std::to_string(r) + " sums to " + std::to_string(total));
    if (targets[r] >= c)
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " >= " + std::to_string(c));
    loss -= std::log(std::max(p[r * c + targets[r]], kFloor));
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return probs.tape().record(Tensor::scalar(loss), {probs},
                             [&p, tgt = std::move(tgt), c](const Tensor&, const Tensor& g,
                                                           std::span<Tensor* const> gin) {
                               const double inv = 1.0 / static_cast<double>(tgt.size());
                               double* d = gin[0]->raw();
                               for (std::size_t r = 0; r < tgt.size(); ++r) {
                                 const double pv = p[r * c + tgt[r]];
                                 if (pv > kFloor) d[r * c + tgt[r]] -= g[0] * inv / pv;
                               }
                             });
}

Var cross_entropy(const Var& probs, std::size_t target) {
  const std::size_t t[1] = {target};
  return cross_entropy(probs, std::span<const std::size_t>(t));
}

}  // namespace strm
