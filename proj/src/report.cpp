#include "steerscope/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "steerscope/circuits.hpp"
#include "steerscope/sparsify.hpp"

namespace steerscope {

RunConfig::RunConfig() : size_grid(default_size_grid()), ablations(all_ablations()), taus(default_tau_grid()) {}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x < 0 ? "-inf" : "inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto t = trim(text);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ConfigError("key '" + key + "': cannot parse '" + t + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true") return true;
  if (t == "false") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + t + "'");
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number(std::string key, T RunConfig::*m) {
  return {key, [key, m](RunConfig& c, const std::string& v) { c.*m = parse_number<T>(key, v); },
          [m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*m);
            else return std::to_string(c.*m);
          }};
}

template <class S, class T>
Field nested(std::string key, S RunConfig::*s, T S::*m) {
  return {key, [key, s, m](RunConfig& c, const std::string& v) { (c.*s).*m = parse_number<T>(key, v); },
          [s, m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double((c.*s).*m);
            else return std::to_string((c.*s).*m);
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(number("seed", &RunConfig::seed));
    v.push_back(nested("model.n_layers", &RunConfig::model, &ModelConfig::n_layers));
    v.push_back(nested("model.n_heads", &RunConfig::model, &ModelConfig::n_heads));
    v.push_back(nested("model.d_model", &RunConfig::model, &ModelConfig::d_model));
    v.push_back(nested("model.d_head", &RunConfig::model, &ModelConfig::d_head));
    v.push_back(nested("model.d_ff", &RunConfig::model, &ModelConfig::d_ff));
    v.push_back(nested("model.vocab", &RunConfig::model, &ModelConfig::vocab));
    v.push_back(nested("model.max_seq", &RunConfig::model, &ModelConfig::max_seq));
    v.push_back({"model.tie_embeddings",
                 [](RunConfig& c, const std::string& s) { c.model.tie_embeddings = parse_bool("model.tie_embeddings", s); },
                 [](const RunConfig& c) { return std::string(c.model.tie_embeddings ? "true" : "false"); }});
    v.push_back(nested("model.norm_eps", &RunConfig::model, &ModelConfig::norm_eps));
    v.push_back(nested("corpus.train", &RunConfig::corpus, &SplitCounts::train));
    v.push_back(nested("corpus.val", &RunConfig::corpus, &SplitCounts::val));
    v.push_back(nested("corpus.test", &RunConfig::corpus, &SplitCounts::test));
    v.push_back(nested("train.lr", &RunConfig::train, &TrainHyper::lr));
    v.push_back(nested("train.steps", &RunConfig::train, &TrainHyper::steps));
    v.push_back(nested("train.batch", &RunConfig::train, &TrainHyper::batch));
    v.push_back(number("steer.layer", &RunConfig::steer_layer));
    v.push_back(number("steer.alpha", &RunConfig::alpha));
    v.push_back({"steer.dim_positions",
                 [](RunConfig& c, const std::string& s) {
                   c.dim_positions.clear();
                   for (const auto& x : split_list(s)) c.dim_positions.push_back(parse_number<int>("steer.dim_positions", x));
                 },
                 [](const RunConfig& c) {
                   return join<int>(c.dim_positions, [](const int& x) { return std::to_string(x); });
                 }});
    v.push_back(number("steer.max_layer_fraction", &RunConfig::max_layer_fraction));
    v.push_back(number("steer.kl_max", &RunConfig::kl_max));
    v.push_back(number("steer.fit_lr", &RunConfig::fit_lr));
    v.push_back(number("steer.fit_epochs", &RunConfig::fit_epochs));
    v.push_back(number("steer.fit_batch", &RunConfig::fit_batch));
    v.push_back(number("steer.po_phi", &RunConfig::po_phi));
    v.push_back({"patch.metric",
                 [](RunConfig& c, const std::string& s) {
                   try {
                     c.metric = parse_metric(trim(s));
                   } catch (const Error& e) {
                     throw ConfigError(std::string("key 'patch.metric': ") + e.what());
                   }
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.metric)); }});
    v.push_back(number("patch.kl_threshold", &RunConfig::kl_threshold));
    v.push_back(number("patch.ig_steps", &RunConfig::ig_steps));
    v.push_back(number("patch.samples", &RunConfig::patch_samples));
    v.push_back({"circuit.size_grid",
                 [](RunConfig& c, const std::string& s) {
                   c.size_grid.clear();
                   for (const auto& x : split_list(s)) c.size_grid.push_back(parse_number<double>("circuit.size_grid", x));
                 },
                 [](const RunConfig& c) { return join<double>(c.size_grid, format_double); }});
    v.push_back(number("circuit.threshold", &RunConfig::faith_threshold));
    v.push_back(number("circuit.random_circuits", &RunConfig::random_circuits));
    v.push_back({"ablation.kinds",
                 [](RunConfig& c, const std::string& s) {
                   c.ablations.clear();
                   for (const auto& x : split_list(s)) {
                     try {
                       c.ablations.push_back(parse_ablation(x));
                     } catch (const Error& e) {
                       throw ConfigError(std::string("key 'ablation.kinds': ") + e.what());
                     }
                   }
                 },
                 [](const RunConfig& c) {
                   return join<AblationKind>(c.ablations, [](const AblationKind& k) { return std::string(to_string(k)); });
                 }});
    v.push_back(number("svv.heads", &RunConfig::svv_heads));
    v.push_back(number("svv.top_k", &RunConfig::lens_top_k));
    v.push_back({"sparsify.taus",
                 [](RunConfig& c, const std::string& s) {
                   c.taus.clear();
                   for (const auto& x : split_list(s)) c.taus.push_back(parse_number<double>("sparsify.taus", x));
                 },
                 [](const RunConfig& c) { return join<double>(c.taus, format_double); }});
    v.push_back({"sparsify.dropout_seeds",
                 [](RunConfig& c, const std::string& s) {
                   c.dropout_seeds.clear();
                   for (const auto& x : split_list(s))
                     c.dropout_seeds.push_back(parse_number<std::uint64_t>("sparsify.dropout_seeds", x));
                 },
                 [](const RunConfig& c) {
                   return join<std::uint64_t>(c.dropout_seeds, [](const std::uint64_t& x) { return std::to_string(x); });
                 }});
    v.push_back({"out_dir", [](RunConfig& c, const std::string& s) { c.out_dir = trim(s); },
                 [](const RunConfig& c) { return c.out_dir; }});
    return v;
  }();
  return f;
}

void validate(const RunConfig& c) {
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.corpus.train > 0 && c.corpus.val > 0 && c.corpus.test > 0, "corpus sizes must be positive");
  require(c.train.steps >= 0 && c.train.batch > 0 && c.train.lr > 0.0, "bad training hyperparameters");
  require(c.steer_layer >= -1 && c.steer_layer < c.model.n_layers, "steer.layer out of range");
  require(!c.dim_positions.empty(), "steer.dim_positions is empty");
  require(c.fit_epochs >= 0 && c.fit_batch > 0, "bad fit hyperparameters");
  require(c.ig_steps >= 1, "patch.ig_steps must be at least 1");
  require(c.patch_samples >= 1, "patch.samples must be at least 1");
  require(!c.size_grid.empty(), "circuit.size_grid is empty");
  for (double f : c.size_grid) require(f > 0.0 && f <= 1.0, "circuit.size_grid entries must lie in (0, 1]");
  require(std::is_sorted(c.size_grid.begin(), c.size_grid.end()), "circuit.size_grid must be ascending");
  require(c.random_circuits >= 0, "circuit.random_circuits must be nonnegative");
  require(c.svv_heads >= 1 && c.lens_top_k >= 1, "svv settings must be positive");
  require(!c.taus.empty(), "sparsify.taus is empty");
  require(!c.out_dir.empty(), "out_dir is empty");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    set_config_value(c, key, line.substr(eq + 1));
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize(const RunConfig& c) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

void CsvTable::add(std::vector<std::string> row) {
  if (row.size() != header.size()) throw ContractError("CSV row width does not match the header");
  rows.push_back(std::move(row));
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string csv_line(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_field(cells[i]);
  return out + "\n";
}

}  // namespace

std::string CsvTable::str() const {
  std::string out = csv_line(header);
  for (const auto& r : rows) out += csv_line(r);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) { write_text(path, table.str()); }

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += ch;
    }
  }
  return out;
}

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
                                    "#7f7f7f"};

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

std::string tick(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

std::string header(double w, double h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", const std::string& extra = "") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\"" + extra + ">" +
         xml_escape(s) + "</text>\n";
}

struct Frame {
  double left = 60, top = 30, width = 420, height = 260;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  double px(double x) const { return left + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * width; }
  double py(double y) const { return top + height - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * height; }
};

std::string axes(const Frame& f, const ChartOptions& opt, bool x_ticks) {
  std::string out;
  out += text(f.left + f.width / 2, 18, opt.title, "middle", " font-size=\"13\"");
  out += "<rect x=\"" + num(f.left) + "\" y=\"" + num(f.top) + "\" width=\"" + num(f.width) + "\" height=\"" +
         num(f.height) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    out += "<line x1=\"" + num(f.left - 4) + "\" y1=\"" + num(f.py(y)) + "\" x2=\"" + num(f.left) + "\" y2=\"" +
           num(f.py(y)) + "\" stroke=\"black\"/>\n";
    out += text(f.left - 6, f.py(y) + 4, tick(y), "end");
    if (x_ticks) {
      const double x = f.x0 + (f.x1 - f.x0) * i / 4.0;
      out += text(f.px(x), f.top + f.height + 14, tick(x));
    }
  }
  out += text(f.left + f.width / 2, f.top + f.height + 30, opt.x_label);
  out += text(14, f.top + f.height / 2, opt.y_label, "middle",
              " transform=\"rotate(-90 14 " + num(f.top + f.height / 2) + ")\"");
  return out;
}

std::string legend(const std::vector<std::string>& names, const Frame& f) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = f.top + 12 + 16.0 * static_cast<double>(i);
    out += "<rect x=\"" + num(f.left + f.width + 12) + "\" y=\"" + num(y - 8) + "\" width=\"10\" height=\"10\" fill=\"" +
           kPalette[i % 8] + "\"/>\n";
    out += text(f.left + f.width + 26, y + 1, names[i], "start");
  }
  return out;
}

void y_range(const std::vector<Series>& series, const ChartOptions& opt, Frame& f) {
  f.y0 = opt.y_min;
  f.y1 = opt.y_max;
  if (!opt.auto_y) return;
  bool any = false;
  for (const auto& s : series)
    for (double y : s.y)
      if (std::isfinite(y)) {
        f.y0 = any ? std::min(f.y0, y) : y;
        f.y1 = any ? std::max(f.y1, y) : y;
        any = true;
      }
  if (!any) {
    f.y0 = 0.0;
    f.y1 = 1.0;
  }
  if (f.y0 > 0.0) f.y0 = 0.0;
  if (f.y1 <= f.y0) f.y1 = f.y0 + 1.0;
}

}  // namespace

std::string svg_line_chart(const std::vector<Series>& series, const ChartOptions& opt) {
  Frame f;
  bool any = false;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DimensionError("series x and y lengths differ");
    for (double x : s.x)
      if (std::isfinite(x)) {
        f.x0 = any ? std::min(f.x0, x) : x;
        f.x1 = any ? std::max(f.x1, x) : x;
        any = true;
      }
  }
  y_range(series, opt, f);
  std::string out = header(f.left + f.width + 110, f.top + f.height + 45);
  out += axes(f, opt, true);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    names.push_back(s.name);
    std::string pts;
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      if (!std::isfinite(s.x[j]) || !std::isfinite(s.y[j])) continue;
      pts += (pts.empty() ? "" : " ") + num(f.px(s.x[j])) + "," + num(f.py(s.y[j]));
      out += "<circle cx=\"" + num(f.px(s.x[j])) + "\" cy=\"" + num(f.py(s.y[j])) + "\" r=\"2.5\" fill=\"" +
             kPalette[i % 8] + "\"/>\n";
    }
    if (!pts.empty())
      out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + kPalette[i % 8] + "\" stroke-width=\"1.5\"/>\n";
  }
  out += legend(names, f);
  return out + "</svg>\n";
}

std::string svg_heatmap(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::vector<std::vector<double>>& values,
                        const std::vector<std::vector<std::string>>& cell_text, const std::string& title) {
  if (values.size() != rows.size()) throw DimensionError("heatmap row count mismatch");
  for (const auto& r : values)
    if (r.size() != cols.size()) throw DimensionError("heatmap column count mismatch");
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& r : values)
    for (double v : r)
      if (std::isfinite(v)) {
        lo = any ? std::min(lo, v) : v;
        hi = any ? std::max(hi, v) : v;
        any = true;
      }
  const double cw = 56, ch = 22, left = 90, top = 50;
  std::string out = header(left + cw * static_cast<double>(cols.size()) + 20, top + ch * static_cast<double>(rows.size()) + 20);
  out += text((left + cw * static_cast<double>(cols.size())) / 2, 18, title, "middle", " font-size=\"13\"");
  for (std::size_t j = 0; j < cols.size(); ++j) out += text(left + cw * (static_cast<double>(j) + 0.5), top - 8, cols[j]);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = top + ch * static_cast<double>(i);
    out += text(left - 6, y + ch / 2 + 4, rows[i], "end");
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const double v = values[i][j];
      const double t = !std::isfinite(v) || hi <= lo ? 0.5 : (v - lo) / (hi - lo);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      const double x = left + cw * static_cast<double>(j);
      out += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cw) + "\" height=\"" + num(ch) +
             "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      const std::string label = i < cell_text.size() && j < cell_text[i].size() ? cell_text[i][j] : tick(v);
      out += text(x + cw / 2, y + ch / 2 + 4, label, "middle", t > 0.6 ? " fill=\"white\"" : "");
    }
  }
  return out + "</svg>\n";
}

std::string svg_bar_chart(const std::vector<std::string>& categories, const std::vector<Series>& series,
                          const ChartOptions& opt) {
  for (const auto& s : series)
    if (s.y.size() != categories.size()) throw DimensionError("bar series length does not match categories");
  Frame f;
  y_range(series, opt, f);
  std::string out = header(f.left + f.width + 110, f.top + f.height + 45);
  out += axes(f, opt, false);
  const double group = f.width / static_cast<double>(std::max<std::size_t>(categories.size(), 1));
  const double bar = group * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  std::vector<std::string> names;
  for (std::size_t c = 0; c < categories.size(); ++c)
    out += text(f.left + group * (static_cast<double>(c) + 0.5), f.top + f.height + 14, categories[c]);
  for (std::size_t i = 0; i < series.size(); ++i) {
    names.push_back(series[i].name);
    for (std::size_t c = 0; c < categories.size(); ++c) {
      const double v = series[i].y[c];
      if (!std::isfinite(v)) continue;
      const double base = f.py(std::clamp(0.0, f.y0, f.y1)), top = f.py(std::clamp(v, f.y0, f.y1));
      const double x = f.left + group * static_cast<double>(c) + group * 0.1 + bar * static_cast<double>(i);
      out += "<rect x=\"" + num(x) + "\" y=\"" + num(std::min(base, top)) + "\" width=\"" + num(bar) + "\" height=\"" +
             num(std::abs(base - top)) + "\" fill=\"" + kPalette[i % 8] + "\"/>\n";
    }
  }
  out += legend(names, f);
  return out + "</svg>\n";
}

}  // namespace steerscope
