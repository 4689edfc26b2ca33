#include "steerscope/pipeline.hpp"

#include <cmath>
#include <limits>

#include "steerscope/checkpoint.hpp"
#include "steerscope/rng.hpp"

namespace steerscope {

namespace {

std::vector<std::vector<int>> prompts(const Corpus& c, Split s, Label l) {
  std::vector<std::vector<int>> out;
  for (const auto* r : c.select(s, l)) out.push_back(r->prompt);
  return out;
}

std::string fmt(double x) { return format_double(x); }
std::string fmt(long x) { return std::to_string(x); }
std::string fmt(std::size_t x) { return std::to_string(x); }
std::string fmt(int x) { return std::to_string(x); }

}  // namespace

std::string vector_name(Method m) {
  switch (m) {
    case Method::DIM: return "dim";
    case Method::NTP: return "ntp";
    case Method::PO: return "po";
  }
  return "?";
}

Corpus make_corpus(const RunConfig& cfg) { return generate_corpus(cfg.seed, cfg.corpus, cfg.model.vocab); }

TrainResult train(const RunConfig& cfg, const Corpus& corpus) {
  TrainHyper h = cfg.train;
  h.seed = cfg.seed;
  return train_model(cfg.model, corpus, h);
}

SelectionConfig selection_config(const RunConfig& cfg) {
  SelectionConfig s;
  s.alpha = cfg.alpha;
  s.max_layer_fraction = cfg.max_layer_fraction;
  s.kl_max = cfg.kl_max;
  s.positions = cfg.dim_positions;
  return s;
}

SelectionResult select_dim(const RunConfig& cfg, const Model& model, const Corpus& corpus) {
  SelectionResult r;
  try {
    r = select_candidate(model, prompts(corpus, Split::train, Label::harmful),
                         prompts(corpus, Split::train, Label::harmless), prompts(corpus, Split::val, Label::harmful),
                         prompts(corpus, Split::val, Label::harmless), selection_config(cfg));
  } catch (const SelectionError& e) {
    if (cfg.steer_layer < 0) throw;
    r.table = e.table();
    r.best.layer = -1;
  }
  if (cfg.steer_layer >= 0 && r.best.layer != cfg.steer_layer) {
    const SelectionScores* best = nullptr;
    for (const auto& row : r.table)
      if (row.layer == cfg.steer_layer && (!best || row.objective < best->objective)) best = &row;
    const int pos = best ? best->position : cfg.dim_positions.front();
    r.best = dim_vector(model, prompts(corpus, Split::train, Label::harmful),
                        prompts(corpus, Split::train, Label::harmless), cfg.steer_layer, pos);
    r.best.coefficient = cfg.alpha;
  }
  return r;
}

FitHyper fit_hyper(const RunConfig& cfg) {
  FitHyper h;
  h.lr = cfg.fit_lr;
  h.epochs = cfg.fit_epochs;
  h.batch = cfg.fit_batch;
  h.seed = cfg.seed;
  h.phi = cfg.po_phi;
  return h;
}

FitResult fit_vector(const RunConfig& cfg, const Model& model, const Corpus& corpus, Method method, int layer) {
  switch (method) {
    case Method::NTP:
      return train_ntp(model, ntp_dataset(corpus, Split::train), ntp_dataset(corpus, Split::val), layer, cfg.alpha,
                       fit_hyper(cfg));
    case Method::PO:
      return train_po(model, po_dataset(corpus, Split::train), po_dataset(corpus, Split::val), layer, cfg.alpha,
                      fit_hyper(cfg));
    case Method::DIM: break;
  }
  throw ContractError("DIM vectors are selected, not fitted");
}

std::vector<PatchSample> PatchGroups::steered_as_clean() const {
  std::vector<PatchSample> out;
  for (const auto& g : groups)
    for (const auto& s : g)
      if (s.orientation == Orientation::steered_as_clean) out.push_back(s);
  return out;
}

std::size_t PatchGroups::size() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.size();
  return n;
}

PatchGroups patch_groups(const RunConfig& cfg, const Model& model, const Corpus& corpus, const SteeringVector& v) {
  const auto harm = corpus.select(Split::test, Label::harmful);
  const auto safe = corpus.select(Split::test, Label::harmless);
  const double a = std::abs(cfg.alpha);
  const auto n = static_cast<std::size_t>(cfg.patch_samples);
  PatchGroups g;
  g.groups[0] = make_patch_samples(model, harm, v, -a, Orientation::steered_as_clean, n);
  g.groups[1] = make_patch_samples(model, harm, v, -a, Orientation::base_as_clean, n);
  g.groups[2] = make_patch_samples(model, safe, v, a, Orientation::steered_as_clean, n);
  g.groups[3] = make_patch_samples(model, safe, v, a, Orientation::base_as_clean, n);
  return g;
}

EapOptions eap_options(const RunConfig& cfg) {
  EapOptions o;
  o.steps = cfg.ig_steps;
  o.metric = {cfg.metric, cfg.kl_threshold};
  return o;
}

IEStore patch_scores(const RunConfig& cfg, const Model& model, const PatchGroups& groups, const SteeringVector& v,
                     bool oracle) {
  std::vector<IEStore> stores;
  IEStore zero;
  for (const auto& g : groups.groups) {
    auto s = oracle ? direct_patch_scores(model, g, v, {cfg.metric, cfg.kl_threshold})
                    : eap_ig_scores(model, g, v, eap_options(cfg));
    if (s.samples > 0) stores.push_back(std::move(s));
    else zero = std::move(s);
  }
  return stores.empty() ? zero : average(stores);
}

std::vector<std::uint64_t> random_circuit_seeds(const RunConfig& cfg) {
  auto rng = substream(cfg.seed, "random-circuit-seeds");
  std::vector<std::uint64_t> out;
  for (int i = 0; i < cfg.random_circuits; ++i) out.push_back(rng());
  return out;
}

PipelineResult run_pipeline(const RunConfig& cfg, const Model* model) {
  PipelineResult r;
  r.config = cfg;
  r.corpus = make_corpus(cfg);
  if (model) {
    r.model = *model;
  } else {
    auto t = train(cfg, r.corpus);
    r.model = std::move(t.model);
    r.train_loss = std::move(t.loss);
    r.smoothed_loss = std::move(t.smoothed_loss);
  }
  const Model& m = r.model;
  r.selection = select_dim(cfg, m, r.corpus);
  const int layer = r.selection.best.layer;

  VectorRun dim;
  dim.name = "dim";
  dim.vector = r.selection.best;
  r.vectors.push_back(std::move(dim));
  for (auto method : {Method::NTP, Method::PO}) {
    VectorRun v;
    v.name = vector_name(method);
    v.fit = fit_vector(cfg, m, r.corpus, method, layer);
    v.vector = v.fit->vector;
    r.vectors.push_back(std::move(v));
  }

  const auto test = [&] {
    std::vector<const PromptRecord*> out;
    for (const auto& rec : r.corpus.records)
      if (rec.split == Split::test) out.push_back(&rec);
    return out;
  }();
  const auto graph = enumerate_graph(m.config, layer);
  const auto harm = prompts(r.corpus, Split::test, Label::harmful);
  const auto safe = prompts(r.corpus, Split::test, Label::harmless);
  const double a = std::abs(cfg.alpha);
  for (auto& v : r.vectors) {
    v.base = evaluate_behavior(m, test);
    v.induce = evaluate_behavior(m, test, v.vector.intervention(a));
    v.bypass = evaluate_behavior(m, test, v.vector.intervention(-a));
    v.samples = patch_groups(cfg, m, r.corpus, v.vector);
    v.ie = patch_scores(cfg, m, v.samples, v.vector);
    if (v.ie.samples == 0) r.warnings.push_back(v.name + ": steering flips no test prompt; IE scores are zero");
    v.faith = faith_samples(m, v.samples.steered_as_clean(), v.vector);
    v.min_faithful = min_faithful_size(m, v.ie, v.faith, v.vector, cfg.size_grid, cfg.faith_threshold);
    if (v.min_faithful.circuit)
      v.complement_faith = faithfulness(m, complement(*v.min_faithful.circuit, graph), v.faith, v.vector);
    else
      r.warnings.push_back(v.name + ": no circuit on the size grid reaches the faithfulness threshold");
    v.ablation = ablation_report(m, harm, safe, v.vector, cfg.alpha, cfg.ablations);
    v.svv = svv_report(m, v.vector.values, layer, top_heads(v.ie, static_cast<std::size_t>(cfg.svv_heads)),
                       cfg.lens_top_k);
  }

  const std::size_t n = r.vectors.size();
  r.overlap.assign(n, std::vector<double>(n, std::numeric_limits<double>::quiet_NaN()));
  const auto seeds = random_circuit_seeds(cfg);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ca = r.vectors[i].min_faithful.circuit;
    if (!ca) continue;
    for (std::size_t j = 0; j < n; ++j) {
      const auto& cb = r.vectors[j].min_faithful.circuit;
      if (cb) r.overlap[i][j] = overlap(*ca, *cb);
      const auto& b = r.vectors[j];
      InterchangeRow row{r.vectors[i].name, b.name, "circuit", 0, ca->size(),
                         interchange_faithfulness(m, *ca, b.vector, b.faith)};
      r.interchange.push_back(row);
      for (auto seed : seeds) {
        auto rc = random_circuit(graph, ca->size(), seed);
        r.interchange.push_back({r.vectors[i].name, b.name, "random", seed, rc.size(),
                                 interchange_faithfulness(m, rc, b.vector, b.faith)});
      }
    }
  }

  std::vector<SweepVector> sv;
  for (const auto& v : r.vectors) sv.push_back({v.name, v.vector, v.ie.dims});
  SweepConfig sc;
  sc.taus = cfg.taus;
  sc.dropout_seeds = cfg.dropout_seeds;
  sc.alpha = cfg.alpha;
  const auto hr = r.corpus.select(Split::test, Label::harmful);
  const auto sr = r.corpus.select(Split::test, Label::harmless);
  r.sweep = sparsity_sweep(m, sv, hr, sr, sc);
  return r;
}

// Tables

CsvTable train_loss_table(const std::vector<double>& loss, const std::vector<double>& smoothed) {
  CsvTable t{schema::train_loss, {}};
  for (std::size_t i = 0; i < loss.size(); ++i)
    t.add({fmt(i), fmt(loss[i]), i < smoothed.size() ? fmt(smoothed[i]) : ""});
  return t;
}

CsvTable selection_table(const SelectionResult& sel) {
  CsvTable t{schema::dim_selection, {}};
  for (const auto& s : sel.table) {
    const bool chosen = s.layer == sel.best.layer && s.position == sel.best.position;
    t.add({fmt(s.layer), fmt(s.position), fmt(s.bypass), fmt(s.induce), fmt(s.kl), s.feasible ? "1" : "0",
           fmt(s.objective), chosen ? "1" : "0"});
  }
  return t;
}

CsvTable fit_table(const std::string& name, const FitResult& fit) {
  CsvTable t{schema::fit_loss, {}};
  for (std::size_t e = 0; e < fit.val_loss.size(); ++e)
    t.add({name, fmt(e), e == 0 ? "" : e - 1 < fit.train_loss.size() ? fmt(fit.train_loss[e - 1]) : "",
           fmt(fit.val_loss[e]), static_cast<int>(e) == fit.best_epoch ? "1" : "0"});
  return t;
}

CsvTable behavior_table(const std::vector<VectorRun>& runs, double alpha) {
  CsvTable t{schema::behavior, {}};
  const double a = std::abs(alpha);
  for (const auto& v : runs) {
    t.add({v.name, fmt(0.0), fmt(v.base.harmful), fmt(v.base.harmless)});
    t.add({v.name, fmt(a), fmt(v.induce.harmful), fmt(v.induce.harmless)});
    t.add({v.name, fmt(-a), fmt(v.bypass.harmful), fmt(v.bypass.harmless)});
  }
  return t;
}

CsvTable ie_edge_table(const std::string& name, const IEStore& s) {
  CsvTable t{schema::ie_edges, {}};
  for (std::size_t i = 0; i < s.edges.size(); ++i)
    t.add({name, s.edges[i].upstream.str(), s.edges[i].downstream.str(), to_string(s.edges[i].channel),
           fmt(s.edge_scores[i])});
  return t;
}

CsvTable ie_node_table(const std::string& name, const IEStore& s) {
  CsvTable t{schema::ie_nodes, {}};
  for (const auto& [n, v] : s.node_scores) t.add({name, n.str(), fmt(v)});
  return t;
}

CsvTable ie_dim_table(const std::string& name, const IEStore& s, const Tensor& vector) {
  CsvTable t{schema::ie_dims, {}};
  for (std::size_t i = 0; i < s.dims.size(); ++i)
    t.add({name, fmt(i), i < vector.size() ? fmt(vector[i]) : "", fmt(s.dims[i])});
  return t;
}

CsvTable faith_curve_table(const std::string& name, const MinFaithful& mf) {
  CsvTable t{schema::faith_curve, {}};
  for (const auto& p : mf.curve)
    t.add({name, fmt(p.fraction), fmt(p.requested), fmt(p.size), p.faith.missing ? "" : fmt(p.faith.value),
           fmt(p.faith.positions)});
  return t;
}

CsvTable circuits_table(const std::vector<VectorRun>& runs, std::size_t total) {
  CsvTable t{schema::circuits, {}};
  for (const auto& v : runs) {
    if (!v.min_faithful.circuit || !v.min_faithful.index) {
      t.add({v.name, "", fmt(total), "", "", ""});
      continue;
    }
    const auto& p = v.min_faithful.curve[*v.min_faithful.index];
    const std::size_t size = v.min_faithful.circuit->size();
    t.add({v.name, fmt(size), fmt(total), fmt(static_cast<double>(size) / static_cast<double>(total)),
           fmt(p.faith.value), v.complement_faith && !v.complement_faith->missing ? fmt(v.complement_faith->value) : ""});
  }
  return t;
}

CsvTable overlap_table(const std::vector<std::string>& names, const std::vector<std::vector<double>>& m) {
  CsvTable t{schema::overlap, {}};
  for (std::size_t i = 0; i < names.size(); ++i)
    for (std::size_t j = 0; j < names.size(); ++j)
      t.add({names[i], names[j], std::isnan(m[i][j]) ? "" : fmt(m[i][j])});
  return t;
}

CsvTable interchange_table(const std::vector<InterchangeRow>& rows) {
  CsvTable t{schema::interchange, {}};
  for (const auto& r : rows)
    t.add({r.circuit, r.vector, r.kind, std::to_string(r.seed), fmt(r.size), r.faith.missing ? "" : fmt(r.faith.value)});
  return t;
}

CsvTable distribution_table(const std::string& name, const EdgeDistribution& d) {
  CsvTable t{schema::edge_distribution, {}};
  for (std::size_t i = 0; i < d.upstream.size(); ++i)
    t.add({name, "upstream", EdgeDistribution::upstream_names[i], fmt(d.upstream[i]), fmt(d.upstream_pct(i))});
  for (std::size_t i = 0; i < d.downstream.size(); ++i)
    t.add({name, "downstream", EdgeDistribution::downstream_names[i], fmt(d.downstream[i]), fmt(d.downstream_pct(i))});
  return t;
}

CsvTable ablation_table(const std::string& name, const std::vector<AblationRow>& rows) {
  CsvTable t{schema::ablation, {}};
  for (const auto& r : rows)
    t.add({name, to_string(r.kind), fmt(r.induce), fmt(r.bypass), fmt(r.induce_change), fmt(r.bypass_change),
           fmt(r.avg_drop)});
  return t;
}

namespace {

std::string token_text(int tok, const std::vector<std::string>& vocab) {
  return tok >= 0 && static_cast<std::size_t>(tok) < vocab.size() ? vocab[static_cast<std::size_t>(tok)]
                                                                    : std::to_string(tok);
}

}  // namespace

CsvTable svv_table(const std::string& name, const std::vector<LogitLensReport>& rows,
                   const std::vector<std::string>& vocab) {
  CsvTable t{schema::svv_lens, {}};
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.top.size(); ++k)
      t.add({name, r.source, fmt(k + 1), fmt(r.top[k].token), token_text(r.top[k].token, vocab), fmt(r.top[k].logit)});
  return t;
}

CsvTable sparsity_table(const SweepResult& r) {
  CsvTable t{schema::sparsity, {}};
  for (const auto& row : r.rows)
    t.add({row.vector, to_string(row.method), fmt(row.tau), fmt(row.k), fmt(row.sparsity_pct), row.cls,
           std::to_string(row.seed), fmt(row.asr)});
  return t;
}

CsvTable iou_table(const SweepResult& r) {
  CsvTable t{schema::iou, {}};
  for (const auto& row : r.iou)
    t.add({fmt(row.tau), row.pair, fmt(row.support_a), fmt(row.support_b), fmt(row.overlap),
           row.defined ? fmt(row.iou) : "", row.defined ? fmt(row.pvalue) : "", row.defined ? "1" : "0"});
  return t;
}

// Figures

std::string faithfulness_svg(const std::vector<VectorRun>& runs, double threshold) {
  std::vector<Series> series;
  for (const auto& v : runs) {
    Series s{v.name, {}, {}};
    for (const auto& p : v.min_faithful.curve) {
      if (p.faith.missing) continue;
      s.x.push_back(100.0 * p.fraction);
      s.y.push_back(p.faith.value);
    }
    series.push_back(std::move(s));
  }
  if (!series.empty() && !series.front().x.empty())
    series.push_back({"threshold", {series.front().x.front(), series.front().x.back()}, {threshold, threshold}});
  ChartOptions opt{"Faithfulness by circuit size", "edges (% of steered graph)", "faithfulness", 0.0, 1.0, true};
  return svg_line_chart(series, opt);
}

std::string overlap_svg(const std::vector<std::string>& names, const std::vector<std::vector<double>>& m) {
  return svg_heatmap(names, names, m, {}, "Circuit overlap");
}

std::string svv_svg(const std::string& name, const std::vector<LogitLensReport>& rows,
                    const std::vector<std::string>& vocab) {
  std::vector<std::string> labels, cols;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<std::string>> text;
  std::size_t k = 0;
  for (const auto& r : rows) k = std::max(k, r.top.size());
  for (std::size_t i = 0; i < k; ++i) cols.push_back("#" + std::to_string(i + 1));
  for (const auto& r : rows) {
    labels.push_back(r.source);
    std::vector<double> v(k, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::string> t(k);
    for (std::size_t i = 0; i < r.top.size(); ++i) {
      v[i] = r.top[i].logit;
      t[i] = token_text(r.top[i].token, vocab);
    }
    values.push_back(std::move(v));
    text.push_back(std::move(t));
  }
  return svg_heatmap(labels, cols, values, text, "Logit lens: " + name);
}

std::string sparsity_svg(const SweepResult& r, const std::vector<double>& taus) {
  std::vector<Series> series;
  for (auto m : {SparsifyMethod::gradient, SparsifyMethod::ie, SparsifyMethod::bottom_k, SparsifyMethod::dropout}) {
    Series s{to_string(m), {}, {}};
    for (double tau : taus) {
      bool present = false;
      for (const auto& row : r.rows) present = present || (row.method == m && row.tau == tau && row.cls == "harmful");
      if (!present) continue;
      s.x.push_back(mean_sparsity(r, tau));
      s.y.push_back(mean_asr(r, m, tau, "harmful"));
    }
    series.push_back(std::move(s));
  }
  ChartOptions opt{"Bypass ASR by sparsity", "sparsity (%)", "ASR (harmful, -alpha)", 0.0, 1.0, false};
  return svg_line_chart(series, opt);
}

std::string iou_svg(const SweepResult& r, const std::vector<double>& taus) {
  std::vector<std::string> pairs, cats;
  for (const auto& row : r.iou)
    if (std::find(pairs.begin(), pairs.end(), row.pair) == pairs.end()) pairs.push_back(row.pair);
  std::vector<double> used;
  for (double tau : taus)
    if (std::isfinite(tau)) {
      used.push_back(tau);
      cats.push_back("tau=" + format_double(tau));
    }
  std::vector<Series> series;
  for (const auto& p : pairs) {
    Series s{p, {}, std::vector<double>(used.size(), std::numeric_limits<double>::quiet_NaN())};
    for (const auto& row : r.iou)
      for (std::size_t i = 0; i < used.size(); ++i)
        if (row.pair == p && row.tau == used[i] && row.defined) s.y[i] = row.iou;
    series.push_back(std::move(s));
  }
  ChartOptions opt{"Support IoU of gradient-sparsified vectors", "threshold", "IoU", 0.0, 1.0, false};
  return svg_bar_chart(cats, series, opt);
}

std::vector<std::string> write_pipeline(const PipelineResult& r, const std::filesystem::path& dir) {
  std::vector<std::string> csvs;
  auto csv = [&](const std::string& name, const CsvTable& t) {
    write_csv(dir / name, t);
    csvs.push_back(name);
  };
  std::filesystem::create_directories(dir);
  write_text(dir / "run.cfg", serialize(r.config));
  write_jsonl(r.corpus, dir / "corpus.jsonl", dir / "vocab.json");
  save_model(r.model, dir / "model.stsc");
  csv("train_loss.csv", train_loss_table(r.train_loss, r.smoothed_loss));
  csv("dim_selection.csv", selection_table(r.selection));
  std::vector<std::string> names;
  CsvTable fits{schema::fit_loss, {}}, edges{schema::ie_edges, {}}, nodes{schema::ie_nodes, {}},
      dims{schema::ie_dims, {}}, curves{schema::faith_curve, {}}, dist{schema::edge_distribution, {}},
      abl{schema::ablation, {}}, lens{schema::svv_lens, {}};
  auto append = [](CsvTable& into, const CsvTable& from) {
    for (const auto& row : from.rows) into.add(row);
  };
  std::size_t total = 0;
  for (const auto& v : r.vectors) {
    names.push_back(v.name);
    total = v.ie.edges.size();
    save_vector(v.vector, dir / ("vector_" + v.name + ".stsc"));
    save_iestore(v.ie, dir / ("ie_" + v.name + ".stsc"));
    if (v.fit) append(fits, fit_table(v.name, *v.fit));
    append(edges, ie_edge_table(v.name, v.ie));
    append(nodes, ie_node_table(v.name, v.ie));
    append(dims, ie_dim_table(v.name, v.ie, v.vector.values));
    append(curves, faith_curve_table(v.name, v.min_faithful));
    append(abl, ablation_table(v.name, v.ablation));
    append(lens, svv_table(v.name, v.svv, r.corpus.vocab));
    if (v.min_faithful.circuit) {
      const auto& c = *v.min_faithful.circuit;
      write_circuit_csv((dir / ("circuit_" + v.name + ".csv")).string(), c, r.config.faith_threshold);
      csvs.push_back("circuit_" + v.name + ".csv");
      write_text(dir / ("circuit_" + v.name + ".dot"), circuit_dot(c));
      append(dist, distribution_table(v.name, edge_distribution(c)));
    }
    write_text(dir / ("svv_" + v.name + ".svg"), svv_svg(v.name, v.svv, r.corpus.vocab));
  }
  csv("fit_loss.csv", fits);
  csv("behavior.csv", behavior_table(r.vectors, r.config.alpha));
  csv("ie_edges.csv", edges);
  csv("ie_nodes.csv", nodes);
  csv("ie_dims.csv", dims);
  csv("faith_curve.csv", curves);
  csv("circuits.csv", circuits_table(r.vectors, total));
  csv("overlap.csv", overlap_table(names, r.overlap));
  csv("interchange.csv", interchange_table(r.interchange));
  csv("edge_distribution.csv", dist);
  csv("ablation.csv", abl);
  csv("svv_lens.csv", lens);
  csv("sparsity_sweep.csv", sparsity_table(r.sweep));
  csv("iou.csv", iou_table(r.sweep));
  write_text(dir / "faithfulness.svg", faithfulness_svg(r.vectors, r.config.faith_threshold));
  write_text(dir / "overlap.svg", overlap_svg(names, r.overlap));
  write_text(dir / "sparsity.svg", sparsity_svg(r.sweep, r.config.taus));
  write_text(dir / "iou.svg", iou_svg(r.sweep, r.config.taus));
  std::string warn;
  for (const auto& w : r.warnings) warn += w + "\n";
  write_text(dir / "warnings.txt", warn);
  return csvs;
}

}  // namespace steerscope
