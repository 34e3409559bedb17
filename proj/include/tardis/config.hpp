#pragma once

// Run configuration: a line-oriented `key = value` file with `#` comments.
// Keys may be written with '-' or '_'.

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tardis/controller.hpp"
#include "tardis/errors.hpp"
#include "tardis/tasks.hpp"
#include "tardis/training.hpp"

namespace tardis {

struct RunConfig {
  std::string task = "copy";  // copy | recall | strokes
  TrainMode mode = TrainMode::gumbel_st;
  std::size_t d_h = 120;
  std::size_t k = 16;
  std::size_t a = 4;
  std::size_t d_m = 32;
  std::size_t att = 32;
  std::size_t batch = 16;
  double lr = 3e-3;
  double gamma = 0.99;
  double clip = 1.0;
  std::uint64_t seed = 1;
  std::size_t budget = 50000;
  std::size_t eval_interval = 500;
  std::optional<double> target;
  std::string output_dir = "run";
  // copy
  std::size_t max_len = 10;
  std::size_t min_len = 1;
  std::size_t n_bits = 8;
  // recall
  std::size_t n_items = 4;
  std::size_t item_len = 3;
  // strokes
  std::size_t n_digits = 3;
  std::string stroke_file;  // empty: built-in glyphs
  std::size_t valid_size = 64;

  void validate() const;
};

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "task",    "mode",    "d_h",       "k",          "a",       "d_m",      "att",
      "batch",   "lr",      "gamma",     "clip",       "seed",    "budget",   "eval_interval",
      "target",  "output_dir", "max_len", "min_len",   "n_bits",  "n_items",  "item_len",
      "n_digits", "stroke_file", "valid_size"};
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& v, const std::string& where) {
  std::size_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ParseError(where + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ParseError(where + ": expected a number, got '" + v + "'");
  }
}

}  // namespace detail

inline void RunConfig::validate() const {
  if (task != "copy" && task != "recall" && task != "strokes") {
    throw ValueError("config: task must be copy, recall or strokes (got '" + task + "')");
  }
  if (mode != TrainMode::lstm_baseline && d_h <= d_m) {
    throw ValueError("config: d_h must exceed d_m (" + std::to_string(d_h) +
                     " <= " + std::to_string(d_m) + ")");
  }
  if (batch == 0 || eval_interval == 0 || valid_size == 0) {
    throw ValueError("config: batch, eval_interval and valid_size must be positive");
  }
  if (!(lr >= 0.0) || !(gamma >= 0.0 && gamma <= 1.0) || !(clip > 0.0)) {
    throw ValueError("config: need lr >= 0, gamma in [0,1], clip > 0");
  }
}

/// Applies one `key = value` assignment.
inline void set_config_value(RunConfig& c, std::string key, const std::string& value,
                             const std::string& where) {
  for (char& ch : key) {
    if (ch == '-') ch = '_';
  }
  auto size = [&] { return detail::parse_size(value, where); };
  auto num = [&] { return detail::parse_double(value, where); };
  if (key == "task") c.task = value;
  else if (key == "mode") {
    try {
      c.mode = parse_train_mode(value);
    } catch (const ValueError& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  else if (key == "d_h") c.d_h = size();
  else if (key == "k") c.k = size();
  else if (key == "a") c.a = size();
  else if (key == "d_m") c.d_m = size();
  else if (key == "att") c.att = size();
  else if (key == "batch") c.batch = size();
  else if (key == "lr") c.lr = num();
  else if (key == "gamma") c.gamma = num();
  else if (key == "clip") c.clip = num();
  else if (key == "seed") c.seed = detail::parse_size(value, where);
  else if (key == "budget") c.budget = size();
  else if (key == "eval_interval") c.eval_interval = size();
  else if (key == "target") {
    if (value == "none" || value.empty()) c.target.reset();
    else c.target = num();
  }
  else if (key == "output_dir") c.output_dir = value;
  else if (key == "max_len") c.max_len = size();
  else if (key == "min_len") c.min_len = size();
  else if (key == "n_bits") c.n_bits = size();
  else if (key == "n_items") c.n_items = size();
  else if (key == "item_len") c.item_len = size();
  else if (key == "n_digits") c.n_digits = size();
  else if (key == "stroke_file") c.stroke_file = value;
  else if (key == "valid_size") c.valid_size = size();
  else {
    std::string valid;
    for (const auto& k : config_keys()) valid += (valid.empty() ? "" : ", ") + k;
    throw ParseError(where + ": unknown key '" + key + "' (valid keys: " + valid + ")");
  }
}

inline RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig c;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string where = source + ":" + std::to_string(n);
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(where + ": expected key = value");
    set_config_value(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)), where);
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file '" + path + "'");
  return parse_run_config(in, path);
}

inline nlohmann::json run_config_json(const RunConfig& c) {
  nlohmann::json j = {{"task", c.task},
                      {"mode", std::string(to_string(c.mode))},
                      {"d_h", c.d_h},
                      {"k", c.k},
                      {"a", c.a},
                      {"d_m", c.d_m},
                      {"att", c.att},
                      {"batch", c.batch},
                      {"lr", c.lr},
                      {"gamma", c.gamma},
                      {"clip", c.clip},
                      {"seed", c.seed},
                      {"budget", c.budget},
                      {"eval_interval", c.eval_interval},
                      {"output_dir", c.output_dir},
                      {"max_len", c.max_len},
                      {"min_len", c.min_len},
                      {"n_bits", c.n_bits},
                      {"n_items", c.n_items},
                      {"item_len", c.item_len},
                      {"n_digits", c.n_digits},
                      {"stroke_file", c.stroke_file},
                      {"valid_size", c.valid_size}};
  j["target"] = c.target ? nlohmann::json(*c.target) : nlohmann::json(nullptr);
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    std::string value;
    if (v.is_string()) value = v.get<std::string>();
    else if (v.is_null()) value = "none";
    else if (v.is_number_unsigned() || v.is_number_integer()) value = std::to_string(v.get<std::uint64_t>());
    else value = v.dump();
    set_config_value(c, key, value, "checkpoint config");
  }
  c.validate();
  return c;
}

/// Task generator bound to the configuration.
class TaskSource {
 public:
  explicit TaskSource(const RunConfig& c) : c_(c) {
    if (c.task == "strokes") {
      glyphs_ = c.stroke_file.empty() ? builtin_glyphs() : load_stroke_file(c.stroke_file);
    }
  }

  TaskBatch make(std::size_t n, Rng& rng) const {
    if (c_.task == "copy") return gen_copy(c_.max_len, c_.n_bits, n, rng, c_.min_len);
    if (c_.task == "recall") return gen_assoc_recall(c_.n_items, c_.item_len, c_.n_bits, n, rng);
    return gen_stroke_digits(c_.n_digits, glyphs_, n, rng);
  }

  /// Held-out batch drawn from its own substream of the run seed.
  TaskBatch validation() const {
    Rng rng = Rng(c_.seed).substream("valid");
    return make(c_.valid_size, rng);
  }

  std::size_t input_size() const { return shape().first; }
  std::size_t output_size() const { return shape().second; }
  OutputKind kind() const { return c_.task == "strokes" ? OutputKind::categorical : OutputKind::bernoulli; }

 private:
  std::pair<std::size_t, std::size_t> shape() const {
    if (c_.task == "copy") return {c_.n_bits + 1, c_.n_bits};
    if (c_.task == "recall") return {c_.n_bits + 2, c_.n_bits};
    return {kStrokeInputSize, kDigits};
  }

  RunConfig c_;
  GlyphSet glyphs_;
};

inline ModelConfig model_config(const RunConfig& c, const TaskSource& src) {
  ModelConfig m;
  m.input_size = src.input_size();
  m.output_size = src.output_size();
  m.output = src.kind();
  m.hidden_size = c.d_h;
  m.attention_size = c.att;
  m.memory = {c.k, c.a, c.d_m};
  m.use_memory = c.mode != TrainMode::lstm_baseline;
  return m;
}

inline TrainOptions train_options(const RunConfig& c) {
  TrainOptions o;
  o.mode = c.mode;
  o.batch = c.batch;
  o.lr = c.lr;
  o.gamma = c.gamma;
  o.clip = c.clip;
  o.budget = c.budget;
  o.eval_interval = c.eval_interval;
  o.target = c.target;
  o.seed = c.seed;
  o.task = c.task;
  return o;
}

}  // namespace tardis
