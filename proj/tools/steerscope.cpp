#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "steerscope/checkpoint.hpp"
#include "steerscope/parallel.hpp"
#include "steerscope/pipeline.hpp"

namespace fs = std::filesystem;
using namespace steerscope;

namespace {

struct Global {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  unsigned threads = 0;
};

RunConfig load_config(const Global& g) {
  RunConfig c = g.config.empty() ? parse_run_config("") : load_run_config(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!g.out.empty()) c.out_dir = g.out;
  return parse_run_config(serialize(c));
}

fs::path dir(const RunConfig& c) {
  fs::create_directories(c.out_dir);
  return c.out_dir;
}

Corpus corpus_for(const RunConfig& c) {
  const auto d = fs::path(c.out_dir);
  if (fs::exists(d / "corpus.jsonl") && fs::exists(d / "vocab.json"))
    return read_jsonl(d / "corpus.jsonl", d / "vocab.json");
  return make_corpus(c);
}

Model model_for(const RunConfig& c) {
  const auto p = fs::path(c.out_dir) / "model.stsc";
  if (!fs::exists(p)) throw InputError(p.string() + " not found; run `train` first");
  return load_model(p);
}

SteeringVector vector_for(const RunConfig& c, const std::string& name) {
  const auto p = fs::path(c.out_dir) / ("vector_" + name + ".stsc");
  if (!fs::exists(p)) throw InputError(p.string() + " not found; run `fit-steer " + name + "` first");
  return load_vector(p);
}

IEStore ie_for(const RunConfig& c, const std::string& name) {
  const auto p = fs::path(c.out_dir) / ("ie_" + name + ".stsc");
  if (!fs::exists(p)) throw InputError(p.string() + " not found; run `patch --vector " + name + "` first");
  return load_iestore(p);
}

Method method_of(const std::string& name) {
  if (name == "dim") return Method::DIM;
  if (name == "ntp") return Method::NTP;
  if (name == "po") return Method::PO;
  throw InputError("unknown vector '" + name + "' (expected dim, ntp or po)");
}

const std::vector<std::string> kVectors{"dim", "ntp", "po"};

std::vector<std::string> available(const RunConfig& c, const std::string& prefix, const std::string& ext) {
  std::vector<std::string> out;
  for (const auto& n : kVectors)
    if (fs::exists(fs::path(c.out_dir) / (prefix + n + ext))) out.push_back(n);
  return out;
}

void say(const std::string& s) { std::cout << s << "\n"; }

void cmd_gen_data(const RunConfig& c) {
  auto corpus = make_corpus(c);
  const auto d = dir(c);
  write_jsonl(corpus, d / "corpus.jsonl", d / "vocab.json");
  say("wrote " + std::to_string(corpus.records.size()) + " records to " + (d / "corpus.jsonl").string());
}

void cmd_train(const RunConfig& c) {
  auto corpus = corpus_for(c);
  auto t = train(c, corpus);
  const auto d = dir(c);
  save_model(t.model, d / "model.stsc");
  write_csv(d / "train_loss.csv", train_loss_table(t.loss, t.smoothed_loss));
  say("final loss " + format_double(t.loss.empty() ? 0.0 : t.loss.back()));
}

int steer_layer(const RunConfig& c, const Model& m, const Corpus& corpus) {
  if (c.steer_layer >= 0) return c.steer_layer;
  const auto p = fs::path(c.out_dir) / "vector_dim.stsc";
  if (fs::exists(p)) return load_vector(p).layer;
  return select_dim(c, m, corpus).best.layer;
}

void cmd_fit(const RunConfig& c, const std::string& name) {
  const auto method = method_of(name);
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto d = dir(c);
  if (method == Method::DIM) {
    auto sel = select_dim(c, m, corpus);
    save_vector(sel.best, d / "vector_dim.stsc");
    write_csv(d / "dim_selection.csv", selection_table(sel));
    say("dim: layer " + std::to_string(sel.best.layer) + " position " + std::to_string(sel.best.position));
    return;
  }
  auto fit = fit_vector(c, m, corpus, method, steer_layer(c, m, corpus));
  save_vector(fit.vector, d / ("vector_" + name + ".stsc"));
  write_csv(d / ("fit_" + name + ".csv"), fit_table(name, fit));
  say(name + ": layer " + std::to_string(fit.vector.layer) + " best epoch " + std::to_string(fit.best_epoch));
}

std::string join_tokens(std::span<const int> t, const std::vector<std::string>& vocab) {
  std::string s;
  for (int x : t) {
    if (!s.empty()) s += ' ';
    s += x >= 0 && static_cast<std::size_t>(x) < vocab.size() ? vocab[static_cast<std::size_t>(x)] : std::to_string(x);
  }
  return s;
}

struct GenerateArgs {
  std::string vector = "dim";
  std::optional<double> alpha;
  std::string ablate = "none";
  std::string split = "test";
  int max_new = kResponseLength;
};

void cmd_generate(const RunConfig& c, const GenerateArgs& a) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto v = vector_for(c, a.vector);
  const double alpha = a.alpha.value_or(c.alpha);
  const AblationSpec spec{parse_ablation(a.ablate), -1};
  const Split split = parse_split(a.split);
  std::vector<const PromptRecord*> recs;
  for (const auto& r : corpus.records)
    if (r.split == split) recs.push_back(&r);
  std::vector<std::vector<int>> out(recs.size());
  parallel_for(recs.size(), [&](std::size_t i) {
    out[i] = generate_ablated(m, recs[i]->prompt, v, alpha, spec, a.max_new).tokens;
  });
  CsvTable t{schema::generations, {}};
  int refusals = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const bool refused = is_refusal(out[i]);
    refusals += refused;
    t.add({a.vector, a.ablate, format_double(alpha), to_string(recs[i]->label), join_tokens(recs[i]->prompt, corpus.vocab),
           join_tokens(out[i], corpus.vocab), refused ? "1" : "0"});
  }
  write_csv(dir(c) / "generations.csv", t);
  say(std::to_string(refusals) + " of " + std::to_string(recs.size()) + " generations refuse");
}

void cmd_patch(const RunConfig& c, const std::string& name, bool oracle) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto v = vector_for(c, name);
  const auto groups = patch_groups(c, m, corpus, v);
  const auto store = patch_scores(c, m, groups, v, oracle);
  const auto d = dir(c);
  const std::string stem = (oracle ? "oracle_" : "ie_") + name;
  save_iestore(store, d / (stem + ".stsc"));
  write_csv(d / (stem + "_edges.csv"), ie_edge_table(name, store));
  write_csv(d / (stem + "_nodes.csv"), ie_node_table(name, store));
  write_csv(d / (stem + "_dims.csv"), ie_dim_table(name, store, v.values));
  say(name + ": " + std::to_string(store.samples) + " samples, " + std::to_string(store.edges.size()) + " edges");
}

std::vector<FaithSample> faith_for(const RunConfig& c, const Model& m, const Corpus& corpus, const SteeringVector& v) {
  return faith_samples(m, patch_groups(c, m, corpus, v).steered_as_clean(), v);
}

void cmd_circuit_build(const RunConfig& c, const std::string& name, std::optional<std::size_t> size) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto v = vector_for(c, name);
  const auto store = ie_for(c, name);
  const auto d = dir(c);
  const auto path = (d / ("circuit_" + name + ".csv")).string();
  if (size) {
    auto circuit = build_circuit(store, *size);
    circuit.source = name;
    write_circuit_csv(path, circuit, c.faith_threshold);
    write_text(d / ("circuit_" + name + ".dot"), circuit_dot(circuit));
    say(name + ": circuit of " + std::to_string(circuit.size()) + " edges");
    return;
  }
  const auto faith = faith_for(c, m, corpus, v);
  VectorRun run;
  run.name = name;
  run.min_faithful = min_faithful_size(m, store, faith, v, c.size_grid, c.faith_threshold);
  write_csv(d / ("faith_curve_" + name + ".csv"), faith_curve_table(name, run.min_faithful));
  write_text(d / ("faith_" + name + ".svg"), faithfulness_svg({run}, c.faith_threshold));
  if (!run.min_faithful.circuit) {
    std::cerr << "warning: no circuit on the size grid reaches faithfulness " << c.faith_threshold << "\n";
    return;
  }
  auto circuit = *run.min_faithful.circuit;
  circuit.source = name;
  write_circuit_csv(path, circuit, c.faith_threshold);
  write_text(d / ("circuit_" + name + ".dot"), circuit_dot(circuit));
  say(name + ": minimum faithful circuit has " + std::to_string(circuit.size()) + " of " +
      std::to_string(store.edges.size()) + " edges");
}

Circuit load_circuit(const RunConfig& c, const std::string& name) {
  const auto p = fs::path(c.out_dir) / ("circuit_" + name + ".csv");
  if (!fs::exists(p)) throw InputError(p.string() + " not found; run `circuit build --vector " + name + "` first");
  return read_circuit_csv(p.string());
}

struct FaithArgs {
  std::string vector = "dim";
  std::string circuit;
  bool full = false, empty = false;
};

void cmd_circuit_faith(const RunConfig& c, const FaithArgs& a) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto v = vector_for(c, a.vector);
  Circuit circuit;
  std::string label;
  if (a.full || a.empty) {
    circuit.steer_layer = v.layer;
    if (a.full) circuit.edges = enumerate_graph(m.config, v.layer).steered_edges;
    label = a.full ? "full" : "empty";
  } else {
    circuit = a.circuit.empty() ? load_circuit(c, a.vector) : read_circuit_csv(a.circuit);
    label = a.circuit.empty() ? "circuit_" + a.vector : a.circuit;
  }
  const auto f = faithfulness(m, circuit, faith_for(c, m, corpus, v), v);
  CsvTable t{{"circuit", "vector", "size", "faithfulness", "positions"}, {}};
  t.add({label, a.vector, std::to_string(circuit.size()), f.missing ? "" : format_double(f.value),
         std::to_string(f.positions)});
  write_csv(dir(c) / "faith.csv", t);
  say(f.missing ? std::string("faithfulness undefined: no kept positions") : "faithfulness " + format_double(f.value));
}

void cmd_circuit_overlap(const RunConfig& c) {
  const auto names = available(c, "circuit_", ".csv");
  std::vector<Circuit> cs;
  for (const auto& n : names) cs.push_back(load_circuit(c, n));
  std::vector<std::vector<double>> m(names.size(), std::vector<double>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i)
    for (std::size_t j = 0; j < names.size(); ++j) m[i][j] = overlap(cs[i], cs[j]);
  write_csv(dir(c) / "overlap.csv", overlap_table(names, m));
  write_text(dir(c) / "overlap.svg", overlap_svg(names, m));
  say("overlap over " + std::to_string(names.size()) + " circuits");
}

void cmd_circuit_interchange(const RunConfig& c) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto names = available(c, "circuit_", ".csv");
  std::map<std::string, SteeringVector> vs;
  std::map<std::string, std::vector<FaithSample>> fs_;
  for (const auto& n : kVectors)
    if (fs::exists(fs::path(c.out_dir) / ("vector_" + n + ".stsc"))) {
      vs[n] = vector_for(c, n);
      fs_[n] = faith_for(c, m, corpus, vs[n]);
    }
  const auto seeds = random_circuit_seeds(c);
  std::vector<InterchangeRow> rows;
  for (const auto& a : names) {
    const auto ca = load_circuit(c, a);
    const auto graph = enumerate_graph(m.config, ca.steer_layer);
    for (const auto& [b, vb] : vs) {
      if (vb.layer != ca.steer_layer) continue;
      rows.push_back({a, b, "circuit", 0, ca.size(), interchange_faithfulness(m, ca, vb, fs_[b])});
      for (auto seed : seeds) {
        auto rc = random_circuit(graph, ca.size(), seed);
        rows.push_back({a, b, "random", seed, rc.size(), interchange_faithfulness(m, rc, vb, fs_[b])});
      }
    }
  }
  write_csv(dir(c) / "interchange.csv", interchange_table(rows));
  say(std::to_string(rows.size()) + " interchange rows");
}

void cmd_circuit_dist(const RunConfig& c, const std::string& name, std::optional<std::size_t> top_k) {
  const auto circuit = load_circuit(c, name);
  write_csv(dir(c) / ("edge_distribution_" + name + ".csv"), distribution_table(name, edge_distribution(circuit, top_k)));
  say(name + ": " + std::to_string(circuit.size()) + " edges");
}

void cmd_svv(const RunConfig& c, const std::string& name, bool final_norm) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  const auto v = vector_for(c, name);
  const auto store = ie_for(c, name);
  const auto rows = svv_report(m, v.values, v.layer, top_heads(store, static_cast<std::size_t>(c.svv_heads)),
                               c.lens_top_k, final_norm);
  const auto d = dir(c);
  write_csv(d / ("svv_" + name + ".csv"), svv_table(name, rows, corpus.vocab));
  write_text(d / ("svv_" + name + ".svg"), svv_svg(name, rows, corpus.vocab));
  say(name + ": " + std::to_string(rows.size()) + " lens rows");
}

void cmd_sparsify(const RunConfig& c) {
  const Model m = model_for(c);
  const auto corpus = corpus_for(c);
  std::vector<SweepVector> vs;
  for (const auto& n : kVectors)
    if (fs::exists(fs::path(c.out_dir) / ("vector_" + n + ".stsc")) && fs::exists(fs::path(c.out_dir) / ("ie_" + n + ".stsc")))
      vs.push_back({n, vector_for(c, n), ie_for(c, n).dims});
  if (vs.empty()) throw InputError("no vector with IE scores found; run `fit-steer` and `patch` first");
  SweepConfig sc;
  sc.taus = c.taus;
  sc.dropout_seeds = c.dropout_seeds;
  sc.alpha = c.alpha;
  const auto r = sparsity_sweep(m, vs, corpus.select(Split::test, Label::harmful),
                                corpus.select(Split::test, Label::harmless), sc);
  const auto d = dir(c);
  write_csv(d / "sparsity_sweep.csv", sparsity_table(r));
  write_csv(d / "iou.csv", iou_table(r));
  write_text(d / "sparsity.svg", sparsity_svg(r, c.taus));
  write_text(d / "iou.svg", iou_svg(r, c.taus));
  say(std::to_string(r.rows.size()) + " sweep rows");
}

void cmd_report(const RunConfig& c, bool reuse_model) {
  std::optional<Model> m;
  if (reuse_model) m = model_for(c);
  const auto r = run_pipeline(c, m ? &*m : nullptr);
  const auto files = write_pipeline(r, dir(c));
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  say("wrote " + std::to_string(files.size()) + " CSV files to " + c.out_dir);
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return 3;
    case ErrorKind::numeric: return 4;
    default: return 1;
  }
}

void error_line(const std::string& kind, const std::string& message) {
  std::string m = message;
  for (char& ch : m)
    if (ch == '\n') ch = ' ';
  std::cerr << "error: kind=" << kind << " message=" << m << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Steering-vector circuit analysis on a toy refusal task"};
  app.require_subcommand(1);
  Global g;
  app.add_option("-c,--config", g.config, "RunConfig file (key = value lines)");
  app.add_option("-s,--set", g.overrides, "Override one config key (key=value)");
  app.add_option("-o,--out", g.out, "Output directory (overrides out_dir)");
  app.add_option("-j,--threads", g.threads, "Worker cap; 0 uses all cores");

  std::function<void(const RunConfig&)> action;

  auto* gen = app.add_subcommand("gen-data", "Generate the toy corpus");
  gen->callback([&] { action = cmd_gen_data; });

  auto* tr = app.add_subcommand("train", "Train the toy transformer");
  tr->callback([&] { action = cmd_train; });

  std::string fit_method;
  auto* fit = app.add_subcommand("fit-steer", "Select (dim) or fit (ntp, po) a steering vector");
  fit->add_option("method", fit_method, "dim, ntp or po")->required()->check(CLI::IsMember({"dim", "ntp", "po"}));
  fit->callback([&] { action = [&](const RunConfig& c) { cmd_fit(c, fit_method); }; });

  GenerateArgs ga;
  auto* gen_cmd = app.add_subcommand("generate", "Steered greedy generations on a split");
  gen_cmd->add_option("--vector", ga.vector, "dim, ntp or po");
  gen_cmd->add_option("--alpha", ga.alpha, "Steering coefficient (default: config)");
  gen_cmd->add_option("--ablate", ga.ablate, "none, qk-freeze, ov-freeze, svv-subtract or mlp-subtract");
  gen_cmd->add_option("--split", ga.split, "train, val or test");
  gen_cmd->add_option("--max-new", ga.max_new, "Tokens to generate");
  gen_cmd->callback([&] { action = [&](const RunConfig& c) { cmd_generate(c, ga); }; });

  std::string patch_vec = "dim";
  bool oracle = false;
  auto* patch = app.add_subcommand("patch", "Edge and dimension attribution scores");
  patch->add_option("--vector", patch_vec, "dim, ntp or po");
  patch->add_flag("--oracle", oracle, "Exhaustive direct patching instead of EAP-IG");
  patch->callback([&] { action = [&](const RunConfig& c) { cmd_patch(c, patch_vec, oracle); }; });

  auto* circ = app.add_subcommand("circuit", "Circuit construction and evaluation");
  circ->require_subcommand(1);
  std::string build_vec = "dim";
  std::optional<std::size_t> build_size;
  auto* build = circ->add_subcommand("build", "Minimum faithful circuit (or a fixed size)");
  build->add_option("--vector", build_vec, "dim, ntp or po");
  build->add_option("--size", build_size, "Build exactly this many edges instead of searching");
  build->callback([&] { action = [&](const RunConfig& c) { cmd_circuit_build(c, build_vec, build_size); }; });
  FaithArgs fa;
  auto* faith = circ->add_subcommand("faith", "Faithfulness of a circuit");
  faith->add_option("--vector", fa.vector, "dim, ntp or po");
  faith->add_option("--circuit", fa.circuit, "Circuit CSV (default: circuit_<vector>.csv)");
  faith->add_flag("--full", fa.full, "Use every steered edge");
  faith->add_flag("--empty", fa.empty, "Use no edges");
  faith->callback([&] { action = [&](const RunConfig& c) { cmd_circuit_faith(c, fa); }; });
  auto* ov = circ->add_subcommand("overlap", "Pairwise overlap of built circuits");
  ov->callback([&] { action = cmd_circuit_overlap; });
  auto* ic = circ->add_subcommand("interchange", "Cross-vector faithfulness with random baselines");
  ic->callback([&] { action = cmd_circuit_interchange; });
  std::string dist_vec = "dim";
  std::optional<std::size_t> dist_k;
  auto* dist = circ->add_subcommand("dist", "Edge type distribution");
  dist->add_option("--vector", dist_vec, "dim, ntp or po");
  dist->add_option("--top-k", dist_k, "Count only the first k ranked edges");
  dist->callback([&] { action = [&](const RunConfig& c) { cmd_circuit_dist(c, dist_vec, dist_k); }; });

  std::string svv_vec = "dim";
  bool final_norm = false;
  auto* svv = app.add_subcommand("svv", "Logit lens of steering value vectors");
  svv->add_option("--vector", svv_vec, "dim, ntp or po");
  svv->add_flag("--final-norm", final_norm, "Apply the final norm before unembedding");
  svv->callback([&] { action = [&](const RunConfig& c) { cmd_svv(c, svv_vec, final_norm); }; });

  auto* sp = app.add_subcommand("sparsify", "Sparsification sweep and support IoU");
  sp->callback([&] { action = cmd_sparsify; });

  bool reuse = false;
  auto* rep = app.add_subcommand("report", "Run every stage and write all artifacts");
  rep->add_flag("--reuse-model", reuse, "Use model.stsc from the output directory instead of training");
  rep->callback([&] { action = [&](const RunConfig& c) { cmd_report(c, reuse); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line("usage", e.what());
    return 2;
  }

  try {
    set_thread_count(g.threads);
    const RunConfig cfg = load_config(g);
    action(cfg);
  } catch (const Error& e) {
    error_line(to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    error_line("io", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("internal", e.what());
    return 1;
  }
  return 0;
}
