#include "steerscope/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "steerscope/errors.hpp"

namespace steerscope::ops {

namespace {

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2)
    throw DimensionError(std::string(op) + ": rank-2 tensor required, got " +
                         shape_string(a.shape()));
}

void require_finite(const Tensor& a, const char* op) {
  for (double v : a.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

void axpy(Tensor& dst, const Tensor& src, double factor = 1.0) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += factor * s[i];
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) axpy(t.grad_buffer(ib), g);
  }, "add");
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out -= b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) axpy(t.grad_buffer(ib), g, -1.0);
  }, "sub");
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      const Tensor& vb = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      const Tensor& va = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  }, "mul");
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  out *= factor;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, factor](Tape& t, std::size_t self) {
    axpy(t.grad_buffer(ia), t.grad(self), factor);
  }, "scale");
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ContractError("add_n: no terms");
  Tensor out = terms[0].value();
  std::vector<std::size_t> ids{terms[0].id()};
  for (std::size_t i = 1; i < terms.size(); ++i) {
    require_same_tape(terms[0], terms[i]);
    require_same_shape(out, terms[i].value(), "add_n");
    out += terms[i].value();
    ids.push_back(terms[i].id());
  }
  std::vector<std::size_t> captured = ids;
  return terms[0].tape().push(std::move(out), std::move(ids),
                              [captured](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (auto id : captured)
      if (t.requires_grad(id)) axpy(t.grad_buffer(id), g);
  }, "add_n");
}

Var identity(Var a) {
  const std::size_t ia = a.id();
  return a.tape().push(a.value(), {ia}, [ia](Tape& t, std::size_t self) {
    axpy(t.grad_buffer(ia), t.grad(self));
  }, "identity");
}

Var add_row(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_matrix(va, "add_row");
  if (vb.size() != va.cols()) throw DimensionError("add_row: row vector length mismatch");
  Tensor out = va;
  const std::size_t n = va.cols();
  for (std::size_t r = 0; r < va.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += vb[c];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < g.size() / n; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
    }
  }, "add_row");
}

Var mul_row(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_matrix(va, "mul_row");
  if (vb.size() != va.cols()) throw DimensionError("mul_row: row vector length mismatch");
  Tensor out = va;
  const std::size_t n = va.cols();
  for (std::size_t r = 0; r < va.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) *= vb[c];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const std::size_t rows = g.size() / n;
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      const Tensor& vb = t.value(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * vb[c];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      const Tensor& va = t.value(ia);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c] * va[r * n + c];
    }
  }, "mul_row");
}

Var sub_scaled_rows(Var a, const Tensor& c, const Tensor& v) {
  const Tensor& va = a.value();
  require_matrix(va, "sub_scaled_rows");
  if (c.size() != va.rows() || v.size() != va.cols())
    throw DimensionError("sub_scaled_rows: factor shapes do not match " + shape_string(va.shape()));
  Tensor out = va;
  for (std::size_t r = 0; r < va.rows(); ++r)
    for (std::size_t j = 0; j < va.cols(); ++j) out.at(r, j) -= c[r] * v[j];
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    axpy(t.grad_buffer(ia), t.grad(self));
  }, "sub_scaled_rows");
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
    throw DimensionError("matmul: " + shape_string(va.shape()) + " x " + shape_string(vb.shape()));
  const std::size_t m = va.rows(), k = va.cols(), n = vb.cols();
  Tensor out(Shape{m, n});
  gemm_nn(va.data(), vb.data(), out.data(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    // dA = G B^T, dB = A^T G
    if (t.requires_grad(ia)) gemm_nt(g.data(), t.value(ib).data(), t.grad_buffer(ia).data(), m, n, k, true);
    if (t.requires_grad(ib)) gemm_tn(t.value(ia).data(), g.data(), t.grad_buffer(ib).data(), m, k, n, true);
  }, "matmul");
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.cols())
    throw DimensionError("matmul_nt: " + shape_string(va.shape()) + " x " +
                         shape_string(vb.shape()) + "^T");
  const std::size_t m = va.rows(), k = va.cols(), n = vb.rows();
  Tensor out(Shape{m, n});
  gemm_nt(va.data(), vb.data(), out.data(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    // C = A B^T: dA = G B, dB = G^T A
    if (t.requires_grad(ia)) gemm_nn(g.data(), t.value(ib).data(), t.grad_buffer(ia).data(), m, n, k, true);
    if (t.requires_grad(ib)) gemm_tn(g.data(), t.value(ia).data(), t.grad_buffer(ib).data(), m, n, k, true);
  }, "matmul_nt");
}

Var transpose(Var a) {
  const Tensor& va = a.value();
  require_matrix(va, "transpose");
  Tensor out = steerscope::transpose(va);
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    axpy(t.grad_buffer(ia), steerscope::transpose(t.grad(self)));
  }, "transpose");
}

Tensor rms_inverse(const Tensor& x, double eps) {
  const std::size_t rows = x.rows(), d = x.cols();
  Tensor inv(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
    const double ms = ss / static_cast<double>(d) + eps;
    if (!(ms > 0.0)) throw NumericError("rmsnorm: zero row with eps = 0");
    inv[r] = 1.0 / std::sqrt(ms);
  }
  return inv;
}

Var rmsnorm(Var x, Var gamma, double eps) {
  require_same_tape(x, gamma);
  const Tensor& vx = x.value();
  const Tensor& vg = gamma.value();
  if (eps < 0.0) throw ContractError("rmsnorm: eps must be nonnegative");
  if (vx.rank() != 2 && vx.rank() != 1) throw DimensionError("rmsnorm: rank-1 or rank-2 input required");
  const std::size_t d = vx.cols();
  if (vg.size() != d)
    throw DimensionError("rmsnorm: gamma length " + std::to_string(vg.size()) +
                         " vs model dim " + std::to_string(d));
  const std::size_t rows = vx.size() / d;
  Tensor inv = rms_inverse(vx, eps);
  Tensor out = vx;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] *= inv[r] * vg[j];
  const std::size_t ix = x.id(), ig = gamma.id();
  return x.tape().push(std::move(out), {ix, ig},
                       [ix, ig, d, rows, inv = std::move(inv)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& vx = t.value(ix);
    const Tensor& vg = t.value(ig);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_buffer(ix);
      for (std::size_t r = 0; r < rows; ++r) {
        const double ir = inv[r];
        double proj = 0.0;
        for (std::size_t j = 0; j < d; ++j) proj += g[r * d + j] * vg[j] * vx[r * d + j];
        const double k = ir * ir * ir * proj / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j)
          gx[r * d + j] += ir * g[r * d + j] * vg[j] - k * vx[r * d + j];
      }
    }
    if (t.requires_grad(ig)) {
      Tensor& gg = t.grad_buffer(ig);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * vx[r * d + j] * inv[r];
    }
  }, "rmsnorm");
}

namespace {

// Softmax over the first `len` entries of a row, zeroing the rest.
void softmax_prefix(const double* in, double* out, std::size_t len, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < len; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < len; ++j) out[j] /= s;
  for (std::size_t j = len; j < n; ++j) out[j] = 0.0;
}

Var softmax_impl(Var x, bool causal) {
  const Tensor& vx = x.value();
  require_finite(vx, "softmax_rows");
  const std::size_t n = vx.cols();
  const std::size_t rows = vx.size() / n;
  if (causal && (vx.rank() != 2 || rows != n)) throw DimensionError("causal_softmax: square input required");
  Tensor out(vx.shape());
  for (std::size_t r = 0; r < rows; ++r)
    softmax_prefix(vx.data() + r * n, out.data() + r * n, causal ? r + 1 : n, n);
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix, n, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - s);
    }
  }, causal ? "causal_softmax" : "softmax_rows");
}

}  // namespace

Var softmax_rows(Var x) { return softmax_impl(x, false); }
Var causal_softmax(Var x) { return softmax_impl(x, true); }

Var log_softmax_rows(Var x) {
  const Tensor& vx = x.value();
  require_finite(vx, "log_softmax_rows");
  const std::size_t n = vx.cols();
  const std::size_t rows = vx.size() / n;
  Tensor out(vx.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = vx.data() + r * n;
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix, n, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * s;
    }
  }, "log_softmax_rows");
}

Var gelu(Var x) {
  const Tensor& vx = x.value();
  Tensor out(vx.shape());
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (std::size_t i = 0; i < vx.size(); ++i)
    out[i] = 0.5 * vx[i] * (1.0 + std::erf(vx[i] * inv_sqrt2));
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const Tensor& g = t.grad(self);
    const Tensor& vx = t.value(ix);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = vx[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  }, "gelu");
}

Var log_sigmoid(Var x) {
  const Tensor& vx = x.value();
  Tensor out(vx.shape());
  for (std::size_t i = 0; i < vx.size(); ++i) {
    const double v = vx[i];
    out[i] = v < 0.0 ? v - std::log1p(std::exp(v)) : -std::log1p(std::exp(-v));
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& vx = t.value(ix);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      // d/dx log σ(x) = σ(-x)
      const double v = vx[i];
      const double s = v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
      gx[i] += g[i] * s;
    }
  }, "log_sigmoid");
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& vt = table.value();
  require_matrix(vt, "gather_rows");
  const std::size_t d = vt.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vt.rows())
      throw InputError("gather_rows: index " + std::to_string(ids[r]) + " out of range");
    std::copy_n(vt.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  const std::size_t it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().push(std::move(out), {it}, [it, d, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad_buffer(it);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = gt.data() + static_cast<std::size_t>(idx[r]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
    }
  }, "gather_rows");
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& va = a.value();
  require_matrix(va, "slice_rows");
  if (count == 0 || start + count > va.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t d = va.cols();
  Tensor out(Shape{count, d});
  std::copy_n(va.data() + start * d, count * d, out.data());
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, start, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_buffer(ia);
    double* dst = ga.data() + start * d;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }, "slice_rows");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  if (parts.size() == 1) return parts[0];
  const std::size_t d = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != d) throw DimensionError("concat_rows: column mismatch");
    rows += p.value().rows();
    ids.push_back(p.id());
  }
  Tensor out(Shape{rows, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  std::vector<std::size_t> captured = ids;
  return parts[0].tape().push(std::move(out), std::move(ids), [captured](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (auto id : captured) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        Tensor& gp = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  }, "concat_rows");
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& va = a.value();
  require_matrix(va, "slice_cols");
  if (count == 0 || start + count > va.cols()) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t rows = va.rows(), d = va.cols();
  Tensor out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(va.data() + r * d + start, count, out.data() + r * count);
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, start, count, rows, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < count; ++j) ga[r * d + start + j] += g[r * count + j];
  }, "slice_cols");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  if (parts.size() == 1) return parts[0];
  const std::size_t rows = parts[0].value().rows();
  std::size_t d = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row mismatch");
    d += p.value().cols();
    ids.push_back(p.id());
  }
  Tensor out(Shape{rows, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.value().data() + r * c, c, out.data() + r * d + off);
    off += c;
  }
  std::vector<std::size_t> captured = ids;
  return parts[0].tape().push(std::move(out), std::move(ids), [captured, rows, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (auto id : captured) {
      const std::size_t c = t.value(id).cols();
      if (t.requires_grad(id)) {
        Tensor& gp = t.grad_buffer(id);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * d + off + j];
      }
      off += c;
    }
  }, "concat_cols");
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().push(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  }, "sum");
}

Var weighted_sum(Var a, const Tensor& w) {
  require_same_shape(a.value(), w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  const std::size_t ia = a.id();
  return a.tape().push(Tensor::scalar(s), {ia}, [ia, w](Tape& t, std::size_t self) {
    axpy(t.grad_buffer(ia), w, t.grad(self)[0]);
  }, "weighted_sum");
}

Var dot(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(Tensor::scalar(s), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    if (t.requires_grad(ia)) axpy(t.grad_buffer(ia), t.value(ib), g);
    if (t.requires_grad(ib)) axpy(t.grad_buffer(ib), t.value(ia), g);
  }, "dot");
}

Var pick(Var a, std::span<const int> cols) {
  const Tensor& va = a.value();
  require_matrix(va, "pick");
  if (cols.size() != va.rows()) throw DimensionError("pick: column list length mismatch");
  std::vector<int> c(cols.begin(), cols.end());
  Tensor out(Shape{va.rows()});
  for (std::size_t r = 0; r < c.size(); ++r) {
    if (c[r] >= static_cast<int>(va.cols())) throw InputError("pick: column out of range");
    if (c[r] >= 0) out[r] = va.at(r, static_cast<std::size_t>(c[r]));
  }
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [ia, c = std::move(c)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < c.size(); ++r)
      if (c[r] >= 0) ga.at(r, static_cast<std::size_t>(c[r])) += g[r];
  }, "pick");
}

Var cross_entropy_rows(Var logits, std::span<const int> targets) {
  const Tensor& vl = logits.value();
  require_matrix(vl, "cross_entropy_rows");
  const std::size_t rows = vl.rows(), n = vl.cols();
  if (targets.size() != rows) throw DimensionError("cross_entropy_rows: one target per row required");
  Tensor probs(vl.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= n) throw InputError("cross_entropy_rows: target out of range");
    const double* in = vl.data() + r * n;
    softmax_prefix(in, probs.data() + r * n, n, n);
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - mx);
    loss += mx + std::log(s) - in[targets[r]];
  }
  if (!std::isfinite(loss)) throw NumericError("cross_entropy_rows: non-finite loss");
  const std::size_t il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape().push(Tensor::scalar(loss), {il},
                            [il, n, tg = std::move(tg), probs = std::move(probs)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& gl = t.grad_buffer(il);
    for (std::size_t r = 0; r < tg.size(); ++r) {
      if (tg[r] < 0) continue;
      for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += g * probs[r * n + j];
      gl[r * n + static_cast<std::size_t>(tg[r])] -= g;
    }
  }, "cross_entropy_rows");
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var loss = f(tape, xv);
    tape.backward(loss);
    analytic = xv.grad();
  }
  auto eval = [&](const Tensor& at) {
    Tape tape(false);
    return f(tape, tape.leaf(at)).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + std::abs(fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace steerscope::ops
