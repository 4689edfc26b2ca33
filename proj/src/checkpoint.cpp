#include "steerscope/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace steerscope {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.insert(out.end(), b, b + sizeof(T));
  }
  void bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }
  std::vector<unsigned char> out;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::size_t end) : buf(b), limit(end) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (n > limit - pos) throw InputError("checkpoint truncated");
  }
  const std::vector<unsigned char>& buf;
  std::size_t limit;
  std::size_t pos = 0;
};

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw InputError("checkpoint has no tensor '" + name + "'");
}

std::vector<unsigned char> encode(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("STSC");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.kind));
  w.put<std::uint64_t>(ckpt.metadata.size());
  w.bytes(ckpt.metadata);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
  }
  for (const auto& [name, t] : ckpt.tensors)
    for (double v : t.values()) w.put<double>(v);
  w.put<std::uint32_t>(crc_of(w.out.data(), w.out.size()));
  return w.out;
}

Checkpoint decode(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 12) throw InputError("checkpoint truncated");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  Reader r(bytes, bytes.size() - 4);
  if (r.str(4) != "STSC") throw InputError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw InputError("checkpoint version " + std::to_string(version) + " unsupported");
  if (crc_of(bytes.data(), bytes.size() - 4) != stored) throw InputError("checkpoint CRC mismatch");
  Checkpoint c;
  const auto kind = r.get<std::uint32_t>();
  if (kind < 1 || kind > 3) throw InputError("unknown checkpoint kind");
  c.kind = static_cast<CheckpointKind>(kind);
  c.metadata = r.str(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint64_t>());
    table.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : table) {
    const auto n = shape_size(shape);
    r.need(n * sizeof(double));
    std::vector<double> values(n);
    std::memcpy(values.data(), bytes.data() + r.pos, n * sizeof(double));
    r.pos += n * sizeof(double);
    c.tensors.emplace_back(name, Tensor(shape, std::move(values)));
  }
  if (r.pos != r.limit) throw InputError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto bytes = encode(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

Checkpoint model_checkpoint(const Model& model) {
  const auto& c = model.config;
  nlohmann::json meta{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
                      {"d_head", c.d_head},     {"d_ff", c.d_ff},         {"vocab", c.vocab},
                      {"max_seq", c.max_seq},   {"tie_embeddings", c.tie_embeddings},
                      {"linear", c.linear},     {"norm_eps", c.norm_eps}};
  Checkpoint ck;
  ck.kind = CheckpointKind::model;
  ck.metadata = meta.dump();
  for (const auto& [name, t] : model.parameters()) ck.tensors.emplace_back(name, *t);
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::model) throw InputError("checkpoint is not a model");
  ModelConfig c;
  try {
    auto m = nlohmann::json::parse(ck.metadata);
    c.n_layers = m.at("n_layers");
    c.n_heads = m.at("n_heads");
    c.d_model = m.at("d_model");
    c.d_head = m.at("d_head");
    c.d_ff = m.at("d_ff");
    c.vocab = m.at("vocab");
    c.max_seq = m.at("max_seq");
    c.tie_embeddings = m.at("tie_embeddings");
    c.linear = m.at("linear");
    c.norm_eps = m.at("norm_eps");
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model metadata: ") + e.what());
  }
  Model model = Model::init(c, 0);
  for (auto& [name, t] : model.parameters()) {
    const Tensor& src = ck.tensor(name);
    if (!src.same_shape(*t)) throw DimensionError("checkpoint tensor '" + name + "' has the wrong shape");
    *t = src;
  }
  return model;
}

Checkpoint vector_checkpoint(const SteeringVector& v) {
  nlohmann::json meta{{"layer", v.layer},
                      {"position", v.position},
                      {"coefficient", v.coefficient},
                      {"method", to_string(v.method)}};
  Checkpoint ck;
  ck.kind = CheckpointKind::vector;
  ck.metadata = meta.dump();
  ck.tensors.emplace_back("values", v.values);
  return ck;
}

SteeringVector vector_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::vector) throw InputError("checkpoint is not a steering vector");
  SteeringVector v;
  try {
    auto m = nlohmann::json::parse(ck.metadata);
    v.layer = m.at("layer");
    v.position = m.at("position");
    v.coefficient = m.at("coefficient");
    v.method = parse_method(m.at("method").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("vector metadata: ") + e.what());
  }
  v.values = ck.tensor("values");
  return v;
}

Checkpoint iestore_checkpoint(const IEStore& store) {
  nlohmann::json edges = nlohmann::json::array(), nodes = nlohmann::json::array();
  for (const auto& e : store.edges) edges.push_back({e.upstream.str(), e.downstream.str(), to_string(e.channel)});
  Tensor node_scores(Shape{store.node_scores.size()});
  std::size_t i = 0;
  for (const auto& [n, s] : store.node_scores) {
    nodes.push_back(n.str());
    node_scores[i++] = s;
  }
  nlohmann::json meta{{"steer_layer", store.steer_layer},
                      {"edges", edges},
                      {"nodes", nodes},
                      {"positions_evaluated", store.positions_evaluated},
                      {"samples", store.samples},
                      {"skipped", store.skipped}};
  Checkpoint ck;
  ck.kind = CheckpointKind::iestore;
  ck.metadata = meta.dump();
  ck.tensors.emplace_back("edge_scores", Tensor(Shape{store.edge_scores.size()}, store.edge_scores));
  ck.tensors.emplace_back("node_scores", node_scores);
  ck.tensors.emplace_back("dims", store.dims);
  return ck;
}

IEStore iestore_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::iestore) throw InputError("checkpoint is not an IE store");
  IEStore s;
  const Tensor& edge_scores = ck.tensor("edge_scores");
  const Tensor& node_scores = ck.tensor("node_scores");
  try {
    auto m = nlohmann::json::parse(ck.metadata);
    s.steer_layer = m.at("steer_layer");
    s.positions_evaluated = m.at("positions_evaluated");
    s.samples = m.at("samples");
    s.skipped = m.at("skipped");
    for (const auto& e : m.at("edges"))
      s.edges.push_back({NodeId::parse(e.at(0)), NodeId::parse(e.at(1)), parse_channel(e.at(2))});
    const auto& nodes = m.at("nodes");
    if (nodes.size() != node_scores.size()) throw InputError("IE store node table does not match its scores");
    for (std::size_t i = 0; i < nodes.size(); ++i) s.node_scores[NodeId::parse(nodes[i])] = node_scores[i];
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("IE store metadata: ") + e.what());
  }
  if (edge_scores.size() != s.edges.size()) throw InputError("IE store edge table does not match its scores");
  s.edge_scores.assign(edge_scores.values().begin(), edge_scores.values().end());
  s.dims = ck.tensor("dims");
  return s;
}

void save_model(const Model& model, const std::filesystem::path& path) { save_checkpoint(model_checkpoint(model), path); }
Model load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }
void save_vector(const SteeringVector& v, const std::filesystem::path& path) { save_checkpoint(vector_checkpoint(v), path); }
SteeringVector load_vector(const std::filesystem::path& path) { return vector_from_checkpoint(load_checkpoint(path)); }
void save_iestore(const IEStore& store, const std::filesystem::path& path) {
  save_checkpoint(iestore_checkpoint(store), path);
}
IEStore load_iestore(const std::filesystem::path& path) { return iestore_from_checkpoint(load_checkpoint(path)); }

}  // namespace steerscope
