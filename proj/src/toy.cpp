#include "steerscope/toy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "steerscope/adam.hpp"
#include "steerscope/ops.hpp"
#include "steerscope/rng.hpp"

namespace steerscope {

const char* to_string(Label l) noexcept { return l == Label::harmful ? "harmful" : "harmless"; }

const char* to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Label parse_label(const std::string& s) {
  if (s == "harmful") return Label::harmful;
  if (s == "harmless") return Label::harmless;
  throw InputError("unknown label '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InputError("unknown split '" + s + "'");
}

std::vector<const PromptRecord*> Corpus::select(Split split, Label label) const {
  std::vector<const PromptRecord*> out;
  for (const auto& r : records)
    if (r.split == split && r.label == label) out.push_back(&r);
  return out;
}

std::vector<std::string> default_vocab(int vocab_size) {
  if (vocab_size < tok::CONTENT + 8) throw ContractError("vocab too small for the toy task");
  std::vector<std::string> v{"<bos>", "<sep>", "<end>", "<forbid>", "<refuse>", "<comply>"};
  for (int i = 0; i < 6; ++i) v.push_back("r" + std::to_string(i));
  for (int i = 0; i < 2; ++i) v.push_back("c" + std::to_string(i));
  for (int i = tok::CONTENT; i < vocab_size; ++i) v.push_back("w" + std::to_string(i - tok::CONTENT));
  return v;
}

std::vector<int> refusal_response() {
  std::vector<int> r{tok::REFUSE};
  for (int i = 0; i < 6; ++i) r.push_back(tok::REFUSE_TAIL + i);
  r.push_back(tok::END);
  return r;
}

std::vector<int> compliant_response(std::span<const int> prompt) {
  std::vector<int> content;
  for (int t : prompt)
    if (t >= tok::CONTENT) content.push_back(t);
  if (content.size() < 4) throw InputError("prompt has fewer than four content tokens");
  std::vector<int> r{tok::COMPLY};
  r.insert(r.end(), content.end() - 4, content.end());
  r.push_back(tok::COMPLY_TAIL);
  r.push_back(tok::COMPLY_TAIL + 1);
  r.push_back(tok::END);
  return r;
}

Corpus generate_corpus(std::uint64_t seed, const SplitCounts& counts, int vocab_size) {
  if (counts.train <= 0 || counts.val <= 0 || counts.test <= 0) throw ContractError("split counts must be positive");
  Corpus c;
  c.vocab = default_vocab(vocab_size);
  c.seed = seed;
  auto rng = substream(seed, "corpus");
  std::uniform_int_distribution<int> len_dist(8, 16);
  std::uniform_int_distribution<int> content_dist(tok::CONTENT, vocab_size - 1);
  auto make = [&](Label label, Split split) {
    std::vector<int> content(static_cast<std::size_t>(len_dist(rng)));
    for (int& t : content) t = content_dist(rng);
    if (label == Label::harmful) {
      std::uniform_int_distribution<std::size_t> at(1, content.size() - 1);
      content.insert(content.begin() + static_cast<long>(at(rng)), tok::FORBID);
    }
    PromptRecord r;
    r.prompt.push_back(tok::BOS);
    r.prompt.insert(r.prompt.end(), content.begin(), content.end());
    r.prompt.push_back(tok::SEP);
    r.label = label;
    r.split = split;
    r.response = label == Label::harmful ? refusal_response() : compliant_response(r.prompt);
    return r;
  };
  for (auto [split, n] : {std::pair{Split::train, counts.train}, {Split::val, counts.val}, {Split::test, counts.test}})
    for (int i = 0; i < n; ++i) {
      c.records.push_back(make(Label::harmful, split));
      c.records.push_back(make(Label::harmless, split));
    }
  return c;
}

void write_jsonl(const Corpus& corpus, const std::filesystem::path& records, const std::filesystem::path& vocab) {
  std::ofstream out(records);
  if (!out) throw IoError("cannot write " + records.string());
  for (const auto& r : corpus.records) {
    nlohmann::json j{{"prompt", r.prompt}, {"label", to_string(r.label)}, {"response", r.response},
                     {"split", to_string(r.split)}};
    out << j.dump() << '\n';
  }
  std::ofstream vout(vocab);
  if (!vout) throw IoError("cannot write " + vocab.string());
  nlohmann::json v = nlohmann::json::object();
  for (std::size_t i = 0; i < corpus.vocab.size(); ++i) v[corpus.vocab[i]] = i;
  nlohmann::json doc{{"seed", corpus.seed}, {"tokens", v}};
  vout << doc.dump(2) << '\n';
}

Corpus read_jsonl(const std::filesystem::path& records, const std::filesystem::path& vocab) {
  Corpus c;
  std::ifstream vin(vocab);
  if (!vin) throw IoError("cannot read " + vocab.string());
  try {
    nlohmann::json doc = nlohmann::json::parse(vin);
    c.seed = doc.at("seed").get<std::uint64_t>();
    const auto& toks = doc.at("tokens");
    c.vocab.assign(toks.size(), "");
    for (auto it = toks.begin(); it != toks.end(); ++it) {
      const auto id = it.value().get<std::size_t>();
      if (id >= c.vocab.size() || !c.vocab[id].empty()) throw InputError("vocab ids are not a permutation");
      c.vocab[id] = it.key();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed vocab: ") + e.what());
  }
  std::ifstream in(records);
  if (!in) throw IoError("cannot read " + records.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      PromptRecord r;
      r.prompt = j.at("prompt").get<std::vector<int>>();
      r.response = j.at("response").get<std::vector<int>>();
      r.label = parse_label(j.at("label").get<std::string>());
      r.split = parse_split(j.at("split").get<std::string>());
      for (int t : r.prompt)
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab.size()) throw InputError("token out of vocab");
      c.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

TeacherForced teacher_forced(std::span<const int> prompt, std::span<const int> response) {
  TeacherForced tf;
  tf.tokens.assign(prompt.begin(), prompt.end());
  tf.tokens.insert(tf.tokens.end(), response.begin(), response.end() - 1);
  tf.targets.assign(tf.tokens.size(), -1);
  for (std::size_t i = 0; i < response.size(); ++i) tf.targets[prompt.size() - 1 + i] = response[i];
  return tf;
}

namespace {

struct Batch {
  std::vector<std::vector<int>> seqs;
  std::vector<int> targets;
  int count = 0;
};

Batch make_batch(std::span<const PromptRecord* const> records) {
  Batch b;
  for (const auto* r : records) {
    auto tf = teacher_forced(r->prompt, r->response);
    b.seqs.push_back(std::move(tf.tokens));
    b.targets.insert(b.targets.end(), tf.targets.begin(), tf.targets.end());
    b.count += static_cast<int>(r->response.size());
  }
  return b;
}

}  // namespace

double response_loss(const Model& model, std::span<const PromptRecord* const> records) {
  if (records.empty()) throw ContractError("response_loss: no records");
  double total = 0.0;
  int count = 0;
  for (std::size_t off = 0; off < records.size(); off += 32) {
    auto chunk = records.subspan(off, std::min<std::size_t>(32, records.size() - off));
    Batch b = make_batch(chunk);
    Tape tape(false);
    auto bound = bind(tape, model, false);
    total += ops::cross_entropy_rows(forward(tape, bound, b.seqs, {}).logits, b.targets).value().item();
    count += b.count;
  }
  return total / count;
}

TrainResult train_model(const ModelConfig& config, const Corpus& corpus, const TrainHyper& hyper) {
  std::vector<const PromptRecord*> train;
  for (const auto& r : corpus.records)
    if (r.split == Split::train) train.push_back(&r);
  if (train.empty()) throw ContractError("train_model: corpus has no train records");
  if (hyper.batch <= 0 || hyper.steps < 0 || !(hyper.lr > 0.0)) throw ContractError("train_model: bad hyperparameters");

  TrainResult res{Model::init(config, substream(hyper.seed, "init")()), {}, {}};
  std::vector<Tensor*> params;
  for (auto& [name, t] : res.model.parameters()) params.push_back(t);
  Adam adam(params, AdamConfig{hyper.lr, 0.9, 0.999, 1e-8, 1.0});
  auto rng = substream(hyper.seed, "batch");
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);

  double ema = 0.0;
  for (int step = 0; step < hyper.steps; ++step) {
    std::vector<const PromptRecord*> chosen;
    for (int i = 0; i < hyper.batch; ++i) chosen.push_back(train[pick(rng)]);
    Batch b = make_batch(chosen);
    Tape tape;
    auto bound = bind(tape, res.model, true);
    Var loss = ops::scale(ops::cross_entropy_rows(forward(tape, bound, b.seqs, {}).logits, b.targets),
                          1.0 / b.count);
    const double lv = loss.value().item();
    res.loss.push_back(lv);
    if (!std::isfinite(lv)) throw TrainingError("training diverged at step " + std::to_string(step), res.loss);
    tape.backward(loss);
    std::vector<const Tensor*> grads;
    auto push = [&](Var v) { grads.push_back(&v.grad()); };
    push(bound.embed);
    push(bound.pos);
    for (const auto& bl : bound.layers) {
      push(bl.attn_gamma);
      for (const auto& h : bl.heads)
        for (const auto& w : h) push(w);
      push(bl.mlp_gamma);
      push(bl.w_in);
      push(bl.w_out);
    }
    push(bound.final_gamma);
    if (!config.tie_embeddings) push(bound.unembed);
    try {
      adam.step(grads);
    } catch (const NumericError& e) {
      throw TrainingError(e.what(), res.loss);
    }
    ema = step == 0 ? lv : 0.95 * ema + 0.05 * lv;
    res.smoothed_loss.push_back(step == 0 ? ema : std::min(res.smoothed_loss.back(), ema));
  }
  return res;
}

bool is_refusal(std::span<const int> generated) {
  const auto n = std::min<std::size_t>(generated.size(), kRefusalWindow);
  return std::find(generated.begin(), generated.begin() + static_cast<long>(n), tok::REFUSE) !=
         generated.begin() + static_cast<long>(n);
}

BehaviorRates evaluate_behavior(const Model& model, std::span<const PromptRecord* const> records,
                                const InterventionSet& interventions) {
  if (records.empty()) throw ContractError("evaluate_behavior: no prompts");
  BehaviorRates r;
  int ok_harm = 0, ok_safe = 0;
  for (std::size_t off = 0; off < records.size(); off += 64) {
    const auto n = std::min<std::size_t>(64, records.size() - off);
    std::vector<std::vector<int>> prompts;
    for (std::size_t i = 0; i < n; ++i) prompts.push_back(records[off + i]->prompt);
    auto gens = generate_greedy_batch(model, prompts, interventions, kRefusalWindow, tok::END);
    for (std::size_t i = 0; i < n; ++i) {
      const bool complied = !is_refusal(gens[i]);
      if (records[off + i]->label == Label::harmful) {
        ++r.n_harmful;
        ok_harm += complied;
      } else {
        ++r.n_harmless;
        ok_safe += complied;
      }
    }
  }
  r.harmful = r.n_harmful ? static_cast<double>(ok_harm) / r.n_harmful : 0.0;
  r.harmless = r.n_harmless ? static_cast<double>(ok_safe) / r.n_harmless : 0.0;
  return r;
}

}  // namespace steerscope
