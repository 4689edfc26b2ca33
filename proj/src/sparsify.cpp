#include "steerscope/sparsify.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "steerscope/parallel.hpp"
#include "steerscope/rng.hpp"

namespace steerscope {

const char* to_string(SparsifyMethod m) noexcept {
  switch (m) {
    case SparsifyMethod::gradient: return "gradient";
    case SparsifyMethod::ie: return "ie";
    case SparsifyMethod::bottom_k: return "bottom-k";
    case SparsifyMethod::dropout: return "dropout";
  }
  return "?";
}

SparsifyMethod parse_sparsify_method(const std::string& s) {
  for (auto m : {SparsifyMethod::gradient, SparsifyMethod::ie, SparsifyMethod::bottom_k, SparsifyMethod::dropout})
    if (s == to_string(m)) return m;
  throw InputError("unknown sparsification method '" + s + "'");
}

std::size_t SparsifiedVector::support() const {
  return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
}

namespace {

SparsifiedVector apply(const Tensor& s, std::vector<bool> kept, SparsifyMethod m, double param) {
  SparsifiedVector out;
  out.values = s;
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (!kept[i]) out.values[i] = 0.0;
  out.kept = std::move(kept);
  out.method = m;
  out.parameter = param;
  return out;
}

std::vector<bool> drop_smallest(std::span<const double> key, std::size_t k) {
  if (k > key.size()) throw ContractError("k exceeds vector length");
  std::vector<std::size_t> idx(key.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(key[a]) < std::abs(key[b]);
  });
  std::vector<bool> kept(key.size(), true);
  for (std::size_t i = 0; i < k; ++i) kept[idx[i]] = false;
  return kept;
}

}  // namespace

SparsifiedVector gradient_sparsify(const Tensor& s, const Tensor& ie, double tau) {
  if (s.size() != ie.size()) throw DimensionError("gradient_sparsify: s and IE lengths differ");
  std::vector<bool> kept(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) kept[i] = s[i] != 0.0 && ie[i] / s[i] >= tau;
  return apply(s, std::move(kept), SparsifyMethod::gradient, tau);
}

SparsifiedVector ie_sparsify(const Tensor& s, const Tensor& ie, std::size_t k) {
  if (s.size() != ie.size()) throw DimensionError("ie_sparsify: s and IE lengths differ");
  return apply(s, drop_smallest(ie.values(), k), SparsifyMethod::ie, static_cast<double>(k));
}

SparsifiedVector bottomk_sparsify(const Tensor& s, std::size_t k) {
  return apply(s, drop_smallest(s.values(), k), SparsifyMethod::bottom_k, static_cast<double>(k));
}

SparsifiedVector dropout_sparsify(const Tensor& s, std::size_t k, std::uint64_t seed) {
  if (k > s.size()) throw ContractError("k exceeds vector length");
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = substream(seed, "dropout");
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> kept(s.size(), true);
  for (std::size_t i = 0; i < k; ++i) kept[idx[i]] = false;
  auto out = apply(s, std::move(kept), SparsifyMethod::dropout, static_cast<double>(k));
  out.seed = seed;
  return out;
}

std::vector<std::size_t> matched_k(const Tensor& s, const Tensor& ie, std::span<const double> taus) {
  if (taus.empty()) throw ContractError("matched_k needs a nonempty grid");
  std::vector<std::size_t> out;
  for (double t : taus) out.push_back(gradient_sparsify(s, ie, t).zeroed());
  return out;
}

double iou(const SparsifiedVector& a, const SparsifiedVector& b) {
  if (a.kept.size() != b.kept.size()) throw DimensionError("iou: vectors differ in length");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.kept.size(); ++i) {
    inter += a.kept[i] && b.kept[i];
    uni += a.kept[i] || b.kept[i];
  }
  if (uni == 0) throw ContractError("iou of two empty supports is undefined");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

void check_hypergeom(long d, long a, long b, long k) {
  if (d < 0 || a < 0 || b < 0 || k < 0 || a > d || b > d || k > std::min(a, b))
    throw ContractError("hypergeometric parameters out of range");
}

double log_choose(long n, long k) {
  return std::lgamma(static_cast<double>(n + 1)) - std::lgamma(static_cast<double>(k + 1)) -
         std::lgamma(static_cast<double>(n - k + 1));
}

unsigned long long choose(long n, long k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  unsigned long long r = 1;
  for (long i = 1; i <= k; ++i) r = r * static_cast<unsigned long long>(n - k + i) / static_cast<unsigned long long>(i);
  return r;
}

}  // namespace

double hypergeom_pvalue(long d, long a, long b, long overlap) {
  check_hypergeom(d, a, b, overlap);
  const long lo = std::max(0L, a + b - d);
  if (overlap <= lo) return 1.0;
  const long hi = std::min(a, b);
  const double log_den = log_choose(d, b);
  double sum = 0.0, comp = 0.0;
  for (long x = overlap; x <= hi; ++x) {
    const double term = std::exp(log_choose(a, x) + log_choose(d - a, b - x) - log_den);
    const double y = term - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return std::min(1.0, sum);
}

Rational hypergeom_pvalue_exact(long d, long a, long b, long overlap) {
  check_hypergeom(d, a, b, overlap);
  if (d > 60) throw ContractError("exact hypergeometric enumeration is limited to d <= 60");
  Rational r;
  r.den = choose(d, b);
  for (long x = overlap; x <= std::min(a, b); ++x) r.num += choose(a, x) * choose(d - a, b - x);
  const auto g = std::gcd(r.num, r.den);
  if (g > 1) {
    r.num /= g;
    r.den /= g;
  }
  return r;
}

std::vector<double> default_tau_grid() { return {kNegInf, 0.0, 0.1, 0.3, 0.5, 1.0, 1.5, 2.0, 2.5}; }

namespace {

double class_rate(const Model& model, std::span<const PromptRecord* const> records, const SteeringVector& v,
                  const Tensor& values, double alpha, bool harmful) {
  auto r = evaluate_behavior(model, records, InterventionSet::steer(v.layer, values, alpha));
  return harmful ? r.harmful : 1.0 - r.harmless;
}

}  // namespace

SweepResult sparsity_sweep(const Model& model, std::span<const SweepVector> vectors,
                           std::span<const PromptRecord* const> harmful, std::span<const PromptRecord* const> harmless,
                           const SweepConfig& cfg) {
  if (vectors.empty()) throw ContractError("sparsity sweep needs at least one vector");
  for (const auto& v : vectors)
    if (v.vector.layer != vectors.front().vector.layer) throw ContractError("sweep vectors must share a layer");
  const double a = std::abs(cfg.alpha);
  struct Cell {
    std::size_t vi;
    SparsifiedVector sv;
    double tau;
  };
  std::vector<Cell> cells;
  for (std::size_t vi = 0; vi < vectors.size(); ++vi) {
    const auto& v = vectors[vi];
    const Tensor& s = v.vector.values;
    for (double tau : cfg.taus) {
      auto g = gradient_sparsify(s, v.ie, tau);
      const std::size_t k = g.zeroed();
      cells.push_back({vi, g, tau});
      cells.push_back({vi, ie_sparsify(s, v.ie, k), tau});
      cells.push_back({vi, bottomk_sparsify(s, k), tau});
      for (auto seed : cfg.dropout_seeds) cells.push_back({vi, dropout_sparsify(s, k, seed), tau});
    }
  }
  std::vector<std::array<double, 2>> asr(cells.size());
  parallel_for(cells.size(), [&](std::size_t i) {
    const auto& c = cells[i];
    const auto& v = vectors[c.vi].vector;
    asr[i][0] = class_rate(model, harmful, v, c.sv.values, -a, true);
    asr[i][1] = class_rate(model, harmless, v, c.sv.values, a, false);
  });
  SweepResult out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    for (int cls = 0; cls < 2; ++cls) {
      SweepRow r;
      r.vector = vectors[c.vi].name;
      r.method = c.sv.method;
      r.tau = c.tau;
      r.k = c.sv.zeroed();
      r.sparsity_pct = 100.0 * static_cast<double>(r.k) / static_cast<double>(c.sv.kept.size());
      r.cls = cls == 0 ? "harmful" : "harmless";
      r.seed = c.sv.seed;
      r.asr = asr[i][static_cast<std::size_t>(cls)];
      out.rows.push_back(r);
    }
  }
  const long d = static_cast<long>(vectors.front().vector.values.size());
  for (double tau : cfg.taus)
    for (std::size_t i = 0; i < vectors.size(); ++i)
      for (std::size_t j = i + 1; j < vectors.size(); ++j) {
        auto gi = gradient_sparsify(vectors[i].vector.values, vectors[i].ie, tau);
        auto gj = gradient_sparsify(vectors[j].vector.values, vectors[j].ie, tau);
        IouRow r;
        r.tau = tau;
        r.pair = vectors[i].name + "-" + vectors[j].name;
        r.support_a = gi.support();
        r.support_b = gj.support();
        for (std::size_t x = 0; x < gi.kept.size(); ++x) r.overlap += gi.kept[x] && gj.kept[x];
        if (r.support_a == 0 || r.support_b == 0) {
          r.defined = false;
          r.iou = 0.0;
          r.pvalue = 1.0;
        } else {
          r.iou = iou(gi, gj);
          r.pvalue = hypergeom_pvalue(d, static_cast<long>(r.support_a), static_cast<long>(r.support_b),
                                      static_cast<long>(r.overlap));
        }
        out.iou.push_back(r);
      }
  return out;
}

double mean_asr(const SweepResult& r, SparsifyMethod m, double tau, const std::string& cls) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : r.rows)
    if (row.method == m && row.tau == tau && row.cls == cls) {
      sum += row.asr;
      ++n;
    }
  if (n == 0) throw ContractError("no sweep rows for the requested cell");
  return sum / static_cast<double>(n);
}

double mean_sparsity(const SweepResult& r, double tau) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : r.rows)
    if (row.method == SparsifyMethod::gradient && row.tau == tau && row.cls == "harmful") {
      sum += row.sparsity_pct;
      ++n;
    }
  if (n == 0) throw ContractError("no sweep rows for the requested tau");
  return sum / static_cast<double>(n);
}

}  // namespace steerscope
