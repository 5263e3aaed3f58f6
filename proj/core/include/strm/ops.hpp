#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "strm/tape.hpp"

// Differentiable operations. Each records its adjoint on the operands' tape.
// Reductions named "rows" act on the last axis.

namespace strm {

/// [m x k] * [k x n] -> [m x n]
Var matmul(const Var& a, const Var& b);
/// [m x k] * [n x k]^T -> [m x n]
Var matmul_transposed(const Var& a, const Var& b);
/// [B x m x k] * [B x k x n] -> [B x m x n]
Var batch_matmul(const Var& a, const Var& b);
/// [B x m x k] * [B x n x k]^T -> [B x m x n]
Var batch_matmul_transposed(const Var& a, const Var& b);

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// max(0, x); the subgradient at 0 is 0.
Var relu(const Var& x);

/// Softmax over the last axis, stabilized by subtracting the row max.
Var softmax_rows(const Var& x);

Var concat(std::span<const Var> xs, std::size_t axis);
/// Mean over `axis`; the axis is removed (a rank-1 input gives shape [1]).
Var mean(const Var& x, std::size_t axis);
/// Sum of every element, shape [1].
Var sum(const Var& x);

/// Euclidean norm over the last axis.
Var l2_norm(const Var& x);
/// Rows scaled to unit norm; all-zero rows map to zero with zero gradient.
Var normalize_rows(const Var& x);
/// Pairwise cosine similarity of rows: [m x d], [n x d] -> [m x n]. Zero rows score 0.
Var cosine_matrix(const Var& a, const Var& b);
/// Cosine similarity of two vectors, shape [1].
Var cosine(const Var& a, const Var& b);

/// Max over the last axis. The adjoint goes to the first arg-max only.
Var max_reduce(const Var& x);

/// Row gather: out[i] = x[indices[i]] for a rank-2 x. Adjoint scatter-adds.
Var index_rows(const Var& x, std::vector<std::size_t> indices);

/// Mean over rows of -log(max(probs[r, targets[r]], 1e-12)).
/// Every row of `probs` must sum to 1 within 1e-9.
Var cross_entropy(const Var& probs, std::span<const std::size_t> targets);
Var cross_entropy(const Var& probs, std::size_t target);

}  // namespace strm
