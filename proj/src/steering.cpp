#include "steerscope/steering.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "steerscope/adam.hpp"
#include "steerscope/ops.hpp"
#include "steerscope/rng.hpp"

namespace steerscope {

const char* to_string(Method m) noexcept {
  switch (m) {
    case Method::DIM: return "dim";
    case Method::NTP: return "ntp";
    case Method::PO: return "po";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "dim") return Method::DIM;
  if (s == "ntp") return Method::NTP;
  if (s == "po") return Method::PO;
  throw InputError("unknown steering method '" + s + "'");
}

Tensor mean_difference(std::span<const Tensor> harm, std::span<const Tensor> safe) {
  if (harm.empty() || safe.empty()) throw ContractError("mean_difference: empty dataset");
  auto mean = [](std::span<const Tensor> rows) {
    Tensor acc(rows.front().shape(), 0.0);
    for (const auto& r : rows) acc += r;
    acc *= 1.0 / static_cast<double>(rows.size());
    return acc;
  };
  Tensor a = mean(harm);
  Tensor b = mean(safe);
  if (!a.same_shape(b)) throw DimensionError("mean_difference: width mismatch");
  return a - b;
}

std::vector<Tensor> residuals_at(const Model& model, std::span<const std::vector<int>> prompts, int layer,
                                 int position) {
  if (prompts.empty()) throw ContractError("residuals_at: empty dataset");
  if (layer < 0 || layer >= model.config.n_layers) throw ContractError("residuals_at: layer out of range");
  if (position >= 0) throw ContractError("residuals_at: position must be negative (relative to prompt end)");
  for (const auto& p : prompts)
    if (static_cast<long>(p.size()) + position < 0)
      throw ContractError("residuals_at: position " + std::to_string(position) + " outside a prompt of length " +
                          std::to_string(p.size()));
  std::vector<Tensor> out;
  for (std::size_t off = 0; off < prompts.size(); off += 64) {
    auto chunk = prompts.subspan(off, std::min<std::size_t>(64, prompts.size() - off));
    Tape tape(false);
    auto b = bind(tape, model, false);
    const Tensor& resid = forward(tape, b, chunk, {}).resid_in[static_cast<std::size_t>(layer)].value();
    std::size_t row = 0;
    for (const auto& p : chunk) {
      row += p.size();
      auto r = resid.row(static_cast<std::size_t>(static_cast<long>(row) + position));
      out.push_back(Tensor(Shape{r.size()}, std::vector<double>(r.begin(), r.end())));
    }
  }
  return out;
}

SteeringVector dim_vector(const Model& model, std::span<const std::vector<int>> harm,
                          std::span<const std::vector<int>> safe, int layer, int position) {
  if (harm.empty() || safe.empty()) throw ContractError("dim_vector: empty dataset");
  auto a = residuals_at(model, harm, layer, position);
  auto b = residuals_at(model, safe, layer, position);
  SteeringVector v;
  v.values = mean_difference(a, b);
  v.layer = layer;
  v.position = position;
  v.method = Method::DIM;
  return v;
}

double refusal_metric(std::span<const double> probs, std::span<const int> refusal_set) {
  double p = 0.0;
  for (int t : refusal_set) {
    if (t < 0 || static_cast<std::size_t>(t) >= probs.size()) throw InputError("refusal token out of vocab");
    p += probs[static_cast<std::size_t>(t)];
  }
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return std::log(p / (1.0 - p));
}

Tensor directional_ablation(const Tensor& h, const Tensor& s) {
  if (!h.same_shape(s)) throw DimensionError("directional_ablation: shape mismatch");
  const double n2 = dot(s.values(), s.values());
  if (!(n2 > 0.0)) throw ContractError("directional_ablation: zero direction");
  return h - s * (dot(h.values(), s.values()) / n2);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = std::max(p[i], 1e-12);
    const double b = std::max(q[i], 1e-12);
    kl += p[i] * (std::log(a) - std::log(b));
  }
  return std::max(kl, 0.0);
}

Tensor last_position_probs(const Model& model, std::span<const std::vector<int>> prompts,
                           const InterventionSet& iv) {
  if (prompts.empty()) throw ContractError("last_position_probs: no prompts");
  const auto V = static_cast<std::size_t>(model.config.vocab);
  Tensor out(Shape{prompts.size(), V});
  std::size_t k = 0;
  for (std::size_t off = 0; off < prompts.size(); off += 64) {
    auto chunk = prompts.subspan(off, std::min<std::size_t>(64, prompts.size() - off));
    Tape tape(false);
    auto b = bind(tape, model, false);
    Tensor probs = ops::softmax_rows(forward(tape, b, chunk, iv).logits).value();
    std::size_t row = 0;
    for (const auto& p : chunk) {
      row += p.size();
      auto src = probs.row(row - 1);
      std::copy(src.begin(), src.end(), out.row(k++).begin());
    }
  }
  return out;
}

std::size_t choose_candidate(std::vector<SelectionScores>& table, int n_layers, const SelectionConfig& cfg) {
  std::size_t best = table.size();
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto& c = table[i];
    c.objective = 1.0 / (1.0 + std::exp(-c.bypass)) - 1.0 / (1.0 + std::exp(-c.induce));
    c.feasible = c.induce > 0.0 && c.kl < cfg.kl_max &&
                 static_cast<double>(c.layer) < cfg.max_layer_fraction * static_cast<double>(n_layers);
    if (c.feasible && (best == table.size() || c.objective < table[best].objective)) best = i;
  }
  if (best == table.size()) throw SelectionError("no steering candidate satisfies the selection constraints", table);
  return best;
}

SelectionResult select_candidate(const Model& model, std::span<const std::vector<int>> harm_train,
                                 std::span<const std::vector<int>> safe_train,
                                 std::span<const std::vector<int>> harm_val,
                                 std::span<const std::vector<int>> safe_val, const SelectionConfig& cfg) {
  const int L = model.config.n_layers;
  std::vector<SelectionScores> table;
  std::vector<SteeringVector> vectors;
  Tensor base_safe = last_position_probs(model, safe_val);
  for (int l = 0; l < L; ++l) {
    if (!(static_cast<double>(l) < cfg.max_layer_fraction * L)) continue;
    for (int pos : cfg.positions) {
      SteeringVector v = dim_vector(model, harm_train, safe_train, l, pos);
      v.coefficient = cfg.alpha;
      SelectionScores s;
      s.layer = l;
      s.position = pos;
      auto mean_metric = [&](std::span<const std::vector<int>> prompts, const InterventionSet& iv) {
        Tensor probs = last_position_probs(model, prompts, iv);
        double acc = 0.0;
        for (std::size_t i = 0; i < probs.rows(); ++i) acc += refusal_metric(probs.row(i), cfg.refusal_set);
        return acc / static_cast<double>(probs.rows());
      };
      s.bypass = mean_metric(harm_val, v.intervention(-cfg.alpha));
      s.induce = mean_metric(safe_val, v.intervention(cfg.alpha));
      double n2 = dot(v.values.values(), v.values.values());
      if (n2 > 0.0) {
        InterventionSet ablate;
        ablate.ablate_direction = v.values;
        Tensor abl = last_position_probs(model, safe_val, ablate);
        double kl = 0.0;
        for (std::size_t i = 0; i < abl.rows(); ++i) kl += kl_divergence(base_safe.row(i), abl.row(i));
        s.kl = kl / static_cast<double>(abl.rows());
      }
      table.push_back(s);
      vectors.push_back(std::move(v));
    }
  }
  if (table.empty()) throw SelectionError("empty candidate grid", table);
  const std::size_t best = choose_candidate(table, L, cfg);
  return {vectors[best], table};
}

std::vector<NtpExample> ntp_dataset(const Corpus& corpus, Split split) {
  std::vector<NtpExample> out;
  for (const auto* r : corpus.select(split, Label::harmless)) out.push_back({r->prompt, refusal_response()});
  return out;
}

std::vector<PoExample> po_dataset(const Corpus& corpus, Split split) {
  std::vector<PoExample> out;
  for (const auto* r : corpus.select(split, Label::harmless))
    out.push_back({r->prompt, refusal_response(), compliant_response(r->prompt)});
  return out;
}

namespace {

/// Per-example Σ log p(response | prompt) as scalar tape variables.
std::vector<Var> logprob_vars(Tape& tape, const Model& model, std::span<const std::vector<int>> prompts,
                              std::span<const std::vector<int>> responses, const InterventionSet& iv,
                              const ForwardOptions& opt) {
  if (prompts.size() != responses.size()) throw ContractError("prompt/response count mismatch");
  std::vector<std::vector<int>> seqs;
  std::vector<int> targets;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (responses[i].empty()) throw ContractError("empty response");
    auto tf = teacher_forced(prompts[i], responses[i]);
    spans.emplace_back(targets.size(), tf.tokens.size());
    targets.insert(targets.end(), tf.targets.begin(), tf.targets.end());
    seqs.push_back(std::move(tf.tokens));
  }
  auto b = bind(tape, model, false);
  Var lp = ops::pick(ops::log_softmax_rows(forward(tape, b, seqs, iv, opt).logits), targets);
  std::vector<Var> out;
  for (const auto& [off, len] : spans) {
    Tensor mask(Shape{targets.size()}, 0.0);
    for (std::size_t r = off; r < off + len; ++r) mask[r] = targets[r] >= 0 ? 1.0 : 0.0;
    out.push_back(ops::weighted_sum(lp, mask));
  }
  return out;
}

InterventionSet steer_slot(const Model& model, int layer, double alpha) {
  return InterventionSet::steer(layer, Tensor(Shape{static_cast<std::size_t>(model.config.d_model)}, 0.0), alpha);
}

using BatchLoss = std::function<Var(Tape&, Var v, std::span<const std::size_t> idx)>;

FitResult fit_vector(const Model& model, std::size_t n_train, const BatchLoss& loss,
                     const std::function<double(const Tensor&)>& val_loss, int layer, double alpha, Method method,
                     const FitHyper& hyper) {
  if (n_train == 0) throw ContractError("steering fit: empty training set");
  if (hyper.epochs < 0 || hyper.batch <= 0 || !(hyper.lr > 0.0)) throw ContractError("steering fit: bad hyperparameters");
  if (layer < 0 || layer >= model.config.n_layers) throw ContractError("steering fit: layer out of range");
  FitResult res;
  Tensor v(Shape{static_cast<std::size_t>(model.config.d_model)}, 0.0);
  Tensor best = v;
  double best_val = val_loss(v);
  res.val_loss.push_back(best_val);
  Adam adam({&v}, AdamConfig{hyper.lr, 0.9, 0.999, 1e-8, 0.0});
  auto rng = substream(hyper.seed, "fit");
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t off = 0; off < n_train; off += static_cast<std::size_t>(hyper.batch)) {
      std::span<const std::size_t> idx(order.data() + off, std::min<std::size_t>(hyper.batch, n_train - off));
      Tape tape;
      Var vv = tape.leaf(v, true);
      Var l = loss(tape, vv, idx);
      const double lv = l.value().item();
      if (!std::isfinite(lv)) throw NumericError("steering fit diverged at epoch " + std::to_string(epoch));
      tape.backward(l);
      adam.step({&vv.grad()});
      total += lv;
      ++batches;
    }
    res.train_loss.push_back(total / batches);
    const double vl = val_loss(v);
    res.val_loss.push_back(vl);
    if (vl < best_val) {
      best_val = vl;
      best = v;
      res.best_epoch = epoch + 1;
    }
  }
  res.vector.values = best;
  res.vector.layer = layer;
  res.vector.position = 0;
  res.vector.coefficient = alpha;
  res.vector.method = method;
  return res;
}

template <class T, class F>
std::vector<std::vector<int>> gather_field(std::span<const T> data, std::span<const std::size_t> idx, F field) {
  std::vector<std::vector<int>> out;
  for (std::size_t i : idx) out.push_back(data[i].*field);
  return out;
}

Var ntp_batch_loss(Tape& tape, const Model& model, std::span<const NtpExample> data,
                   std::span<const std::size_t> idx, int layer, double alpha, Var v) {
  auto prompts = gather_field(data, idx, &NtpExample::prompt);
  auto responses = gather_field(data, idx, &NtpExample::response);
  ForwardOptions opt;
  opt.steer_direction = v;
  auto lps = logprob_vars(tape, model, prompts, responses, steer_slot(model, layer, alpha), opt);
  return ops::scale(ops::add_n(lps), -1.0 / static_cast<double>(lps.size()));
}

std::vector<double> reference_betas(const Model& model, std::span<const PoExample> data, double phi) {
  std::vector<std::vector<int>> prompts, chosen, rejected;
  for (const auto& e : data) {
    prompts.push_back(e.prompt);
    chosen.push_back(e.chosen);
    rejected.push_back(e.rejected);
  }
  auto lw = response_logprobs(model, prompts, chosen);
  auto ll = response_logprobs(model, prompts, rejected);
  std::vector<double> beta;
  for (std::size_t i = 0; i < data.size(); ++i) beta.push_back(po_beta(lw[i], ll[i], phi));
  return beta;
}

Var po_batch_loss(Tape& tape, const Model& model, std::span<const PoExample> data, std::span<const double> beta,
                  std::span<const std::size_t> idx, int layer, double alpha, Var v) {
  std::vector<std::vector<int>> prompts, responses;
  for (std::size_t i : idx) {
    prompts.push_back(data[i].prompt);
    responses.push_back(data[i].chosen);
  }
  for (std::size_t i : idx) {
    prompts.push_back(data[i].prompt);
    responses.push_back(data[i].rejected);
  }
  ForwardOptions opt;
  if (v.valid()) opt.steer_direction = v;
  auto lps = logprob_vars(tape, model, prompts, responses, steer_slot(model, layer, alpha), opt);
  std::vector<Var> terms;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& e = data[idx[k]];
    Var delta = ops::add(ops::scale(lps[k], beta[idx[k]] / static_cast<double>(e.chosen.size())),
                         ops::scale(lps[idx.size() + k], -1.0 / static_cast<double>(e.rejected.size())));
    terms.push_back(ops::log_sigmoid(delta));
  }
  return ops::scale(ops::add_n(terms), -1.0 / static_cast<double>(terms.size()));
}

}  // namespace

std::vector<double> response_logprobs(const Model& model, std::span<const std::vector<int>> prompts,
                                      std::span<const std::vector<int>> responses, const InterventionSet& iv) {
  std::vector<double> out;
  for (std::size_t off = 0; off < prompts.size(); off += 64) {
    const auto n = std::min<std::size_t>(64, prompts.size() - off);
    Tape tape(false);
    for (Var v : logprob_vars(tape, model, prompts.subspan(off, n), responses.subspan(off, n), iv, {}))
      out.push_back(v.value().item());
  }
  return out;
}

double ntp_loss(const Model& model, std::span<const NtpExample> data, int layer, double alpha, const Tensor& v) {
  if (data.empty()) throw ContractError("ntp_loss: empty dataset");
  std::vector<std::vector<int>> prompts, responses;
  for (const auto& e : data) {
    prompts.push_back(e.prompt);
    responses.push_back(e.response);
  }
  auto lp = response_logprobs(model, prompts, responses, InterventionSet::steer(layer, v, alpha));
  return -std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(lp.size());
}

double po_beta(double ref_logp_chosen, double ref_logp_rejected, double phi) {
  if (!(phi > 0.0)) throw ContractError("po_beta: phi must be positive");
  return std::max((ref_logp_rejected - ref_logp_chosen) * phi, 1.0);
}

double po_pair_loss(double logp_chosen, double logp_rejected, std::size_t len_chosen, std::size_t len_rejected,
                    double beta) {
  if (len_chosen == 0 || len_rejected == 0) throw ContractError("po_pair_loss: empty response");
  const double delta = beta / static_cast<double>(len_chosen) * logp_chosen -
                       logp_rejected / static_cast<double>(len_rejected);
  return delta < 0.0 ? -delta + std::log1p(std::exp(delta)) : std::log1p(std::exp(-delta));
}

double po_loss(const Model& model, std::span<const PoExample> data, int layer, double alpha, const Tensor& v,
               double phi) {
  if (data.empty()) throw ContractError("po_loss: empty dataset");
  auto beta = reference_betas(model, data, phi);
  std::vector<std::vector<int>> prompts, chosen, rejected;
  for (const auto& e : data) {
    prompts.push_back(e.prompt);
    chosen.push_back(e.chosen);
    rejected.push_back(e.rejected);
  }
  auto iv = InterventionSet::steer(layer, v, alpha);
  auto lw = response_logprobs(model, prompts, chosen, iv);
  auto ll = response_logprobs(model, prompts, rejected, iv);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    total += po_pair_loss(lw[i], ll[i], data[i].chosen.size(), data[i].rejected.size(), beta[i]);
  return total / static_cast<double>(data.size());
}

FitResult train_ntp(const Model& model, std::span<const NtpExample> train, std::span<const NtpExample> val,
                    int layer, double alpha, const FitHyper& hyper) {
  auto loss = [&](Tape& tape, Var v, std::span<const std::size_t> idx) {
    return ntp_batch_loss(tape, model, train, idx, layer, alpha, v);
  };
  auto vl = [&](const Tensor& v) { return ntp_loss(model, val.empty() ? train : val, layer, alpha, v); };
  return fit_vector(model, train.size(), loss, vl, layer, alpha, Method::NTP, hyper);
}

FitResult train_po(const Model& model, std::span<const PoExample> train, std::span<const PoExample> val,
                   int layer, double alpha, const FitHyper& hyper) {
  for (const auto& e : train)
    if (e.chosen.empty() || e.rejected.empty()) throw ContractError("train_po: empty response");
  const auto beta = reference_betas(model, train, hyper.phi);
  auto loss = [&](Tape& tape, Var v, std::span<const std::size_t> idx) {
    return po_batch_loss(tape, model, train, beta, idx, layer, alpha, v);
  };
  auto vl = [&](const Tensor& v) { return po_loss(model, val.empty() ? train : val, layer, alpha, v, hyper.phi); };
  return fit_vector(model, train.size(), loss, vl, layer, alpha, Method::PO, hyper);
}

}  // namespace steerscope
