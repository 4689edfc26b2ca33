#pragma once

#include <functional>
#include <span>
#include <vector>

#include "steerscope/tape.hpp"

namespace steerscope::ops {

// Elementwise, same shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_n(std::span<const Var> terms);
Var identity(Var a);

/// a[m,n] + b[n] broadcast over rows.
Var add_row(Var a, Var b);
/// a[m,n] * b[n] broadcast over rows.
Var mul_row(Var a, Var b);
/// a[m,n] - diag(c) * (1 x v), i.e. row i loses c_i * v. `c` and `v` are constants.
Var sub_scaled_rows(Var a, const Tensor& c, const Tensor& v);

Var matmul(Var a, Var b);
/// a[m,k] * b[n,k]^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

/// Row-wise x / sqrt(mean(x^2) + eps) * gamma.
Var rmsnorm(Var x, Var gamma, double eps);
/// Per-row factor 1/sqrt(mean(x^2) + eps) of a plain tensor.
Tensor rms_inverse(const Tensor& x, double eps);

Var softmax_rows(Var x);
/// Row i is a softmax over columns 0..i; entries above the diagonal are 0.
Var causal_softmax(Var x);
Var log_softmax_rows(Var x);
Var gelu(Var x);
/// log(sigmoid(x)) elementwise, computed stably.
Var log_sigmoid(Var x);

/// Rows of `table` picked by `ids`.
Var gather_rows(Var table, std::span<const int> ids);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);

Var sum(Var a);
/// Σ a ⊙ w for a constant weight tensor `w`.
Var weighted_sum(Var a, const Tensor& w);
Var dot(Var a, Var b);

/// Summed cross-entropy of row-wise logits against targets; rows with target < 0 are skipped.
/// out[r] = a[r, cols[r]]; rows with a negative column give 0.
Var pick(Var a, std::span<const int> cols);
Var cross_entropy_rows(Var logits, std::span<const int> targets);

/// Max over coordinates of |analytic - central difference| / (|analytic| + |difference| + 1e-12).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step);

}  // namespace steerscope::ops
