#pragma once

// Checkpoint file:
//   "TRDS0001"
//   repeated: [u32 name_len][name bytes][u32 rank][u32 dim x rank][f64 x size]
//   [u32 0]   end of records
//   UTF-8 JSON manifest up to end of file
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tardis/controller.hpp"
#include "tardis/errors.hpp"
#include "tardis/training.hpp"

namespace tardis {

inline constexpr char kCheckpointMagic[] = "TRDS0001";

struct Record {
  Shape shape;
  std::vector<double> values;
};

using RecordMap = std::map<std::string, Record>;

struct Checkpoint {
  std::vector<std::pair<std::string, Record>> records;  // file order
  nlohmann::json manifest;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string source;

  void need(std::size_t n) const {
    if (buf.size() - pos < n) {
      throw ParseError(source + ": truncated checkpoint at byte " + std::to_string(pos));
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 8);
  for (const auto& [name, rec] : ck.records) {
    if (name.empty()) throw ValueError("checkpoint: empty record name");
    if (shape_size(rec.shape) != rec.values.size()) {
      throw ShapeError("checkpoint: record '" + name + "' shape " + shape_str(rec.shape) +
                       " holds " + std::to_string(rec.values.size()) + " values");
    }
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(rec.shape.size()));
    for (auto d : rec.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : rec.values) detail::put_f64(out, v);
  }
  detail::put_u32(out, 0);
  out += ck.manifest.dump(2);
  out += '\n';
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& buf, const std::string& source = "<buffer>") {
  detail::Reader r{buf, 0, source};
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) {
    throw ParseError(source + ": not a checkpoint (bad magic)");
  }
  Checkpoint ck;
  while (true) {
    const std::uint32_t len = r.u32();
    if (len == 0) break;
    std::string name = r.bytes(len);
    Record rec;
    const std::uint32_t rank = r.u32();
    for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(r.u32());
    const std::size_t n = shape_size(rec.shape);
    r.need(n * 8);
    rec.values.resize(n);
    for (auto& v : rec.values) v = r.f64();
    ck.records.emplace_back(std::move(name), std::move(rec));
  }
  try {
    ck.manifest = nlohmann::json::parse(buf.begin() + static_cast<std::ptrdiff_t>(r.pos), buf.end());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": bad manifest: " + e.what());
  }
  return ck;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ------------------------------------------------------- model <-> records

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},
          {"hidden_size", c.hidden_size},
          {"output_size", c.output_size},
          {"attention_size", c.attention_size},
          {"cells", c.memory.cells},
          {"address_width", c.memory.address_width},
          {"content_width", c.memory.content_width},
          {"output", c.output == OutputKind::categorical ? "categorical" : "bernoulli"},
          {"use_memory", c.use_memory},
          {"reset_gates", c.reset_gates},
          {"mask_last_read", c.mask_last_read}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.input_size = j.at("input_size").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.output_size = j.at("output_size").get<std::size_t>();
    c.attention_size = j.at("attention_size").get<std::size_t>();
    c.memory.cells = j.at("cells").get<std::size_t>();
    c.memory.address_width = j.at("address_width").get<std::size_t>();
    c.memory.content_width = j.at("content_width").get<std::size_t>();
    c.output = j.at("output").get<std::string>() == "categorical" ? OutputKind::categorical
                                                                   : OutputKind::bernoulli;
    c.use_memory = j.at("use_memory").get<bool>();
    c.reset_gates = j.at("reset_gates").get<bool>();
    c.mask_last_read = j.at("mask_last_read").get<bool>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad model config: ") + e.what());
  }
}

inline Record to_record(const Tensor& t) {
  return {t.shape(), std::vector<double>(t.values().begin(), t.values().end())};
}

/// Model parameters, the address section, and optimizer/baseline state.
inline Checkpoint make_checkpoint(const Model& model, const TrainState& st, const Rng& rng,
                                  const nlohmann::json& run_config) {
  Checkpoint ck;
  const auto params = model.parameters();
  for (const auto& [name, t] : params) ck.records.emplace_back(name, to_record(t));
  if (model.config.use_memory) ck.records.emplace_back("memory.address", to_record(model.address));
  if (!st.adam.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Shape& s = params[i].second.shape();
      ck.records.emplace_back("adam.m." + params[i].first, Record{s, st.adam.m[i]});
      ck.records.emplace_back("adam.v." + params[i].first, Record{s, st.adam.v[i]});
    }
  }
  if (!st.baseline.value.empty()) {
    std::vector<double> seen(st.baseline.seen.begin(), st.baseline.seen.end());
    ck.records.emplace_back("baseline.value", Record{{st.baseline.value.size()}, st.baseline.value});
    ck.records.emplace_back("baseline.seen", Record{{seen.size()}, seen});
  }
  ck.manifest = {
      {"format", "TRDS0001"},
      {"model", model_config_json(model.config)},
      {"config", run_config},
      {"rng", {{"key", rng.key()}, {"counter", rng.counter()}}},
      {"step", st.step},
      {"adam_steps", st.adam.steps},
      {"normalizer", {{"mean", st.normalizer.mean}, {"var", st.normalizer.var}}},
  };
  return ck;
}

struct LoadedCheckpoint {
  Model model;
  TrainState state;
  Rng rng{0};
  nlohmann::json run_config;
};

inline LoadedCheckpoint restore_checkpoint(const Checkpoint& ck, const std::string& source = "checkpoint") {
  RecordMap recs;
  for (const auto& [n, r] : ck.records) recs[n] = r;
  LoadedCheckpoint out;
  const ModelConfig cfg = model_config_from_json(ck.manifest.at("model"));
  Rng scratch(0);
  out.model = Model::init(cfg, scratch);
  auto take = [&](const std::string& name, Tensor& t) {
    const auto it = recs.find(name);
    if (it == recs.end()) throw ParseError(source + ": missing record '" + name + "'");
    if (it->second.shape != t.shape()) {
      throw ParseError(source + ": record '" + name + "' has shape " + shape_str(it->second.shape) +
                       ", model expects " + shape_str(t.shape()));
    }
    auto v = t.mutable_values();
    std::copy(it->second.values.begin(), it->second.values.end(), v.begin());
  };
  for (auto& [name, t] : out.model.parameters()) take(name, t);
  if (cfg.use_memory) take("memory.address", out.model.address);

  const auto params = out.model.parameters();
  if (recs.count("adam.m." + params.front().first)) {
    for (const auto& [name, t] : params) {
      const auto& m = recs.at("adam.m." + name);
      const auto& v = recs.at("adam.v." + name);
      out.state.adam.m.push_back(m.values);
      out.state.adam.v.push_back(v.values);
    }
  }
  if (recs.count("baseline.value")) {
    out.state.baseline.value = recs.at("baseline.value").values;
    for (double s : recs.at("baseline.seen").values) out.state.baseline.seen.push_back(s != 0.0);
  }
  try {
    out.state.step = ck.manifest.at("step").get<std::size_t>();
    out.state.adam.steps = ck.manifest.at("adam_steps").get<std::size_t>();
    out.state.normalizer.mean = ck.manifest.at("normalizer").at("mean").get<double>();
    out.state.normalizer.var = ck.manifest.at("normalizer").at("var").get<double>();
    out.rng = Rng::from_state(ck.manifest.at("rng").at("key").get<std::uint64_t>(),
                              ck.manifest.at("rng").at("counter").get<std::uint64_t>());
    out.run_config = ck.manifest.value("config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": bad manifest: " + e.what());
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const Model& model, const TrainState& st,
                            const Rng& rng, const nlohmann::json& run_config) {
  write_file(path, encode_checkpoint(make_checkpoint(model, st, rng, run_config)));
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  return restore_checkpoint(decode_checkpoint(read_file(path), path), path);
}

// ------------------------------------------------------------------ metrics

inline std::string metric_json(const MetricRecord& m) {
  nlohmann::json j = {{"step", m.step},
                      {"mode", m.mode},
                      {"task", m.task},
                      {"train_loss", m.train_loss},
                      {"valid_metric", m.valid_metric},
                      {"wall_time_s", m.wall_time_s},
                      {"seed", m.seed}};
  return j.dump();
}

}  // namespace tardis
