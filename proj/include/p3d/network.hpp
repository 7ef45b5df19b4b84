#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "p3d/block.hpp"

// The two-stream network: per-modality data layer (7x7 spatial stride-2 conv
// plus 3x1x1 temporal conv), stream concat, four residual stages of blocks,
// global pool, fc1+ReLU, fc2. Single-modality configs double the data-layer
// width so the trunk sees the same channel count. Also: symbolic shape
// walkthrough and the checkpoint container.

namespace p3d {

enum class RestoreWidth { table, expand4x };

struct NetworkConfig {
  bool use_rgb = true;
  bool use_residual = true;
  std::int64_t step_size = 1;
  std::int64_t clip_len = 32;
  std::int64_t crop = 112;
  std::vector<std::int64_t> stage_blocks = {3, 4, 6, 3};
  std::vector<std::int64_t> stage_channels = {64, 128, 256, 512};
  std::int64_t classes = 101;
  std::int64_t fc1_width = 2048;
  bool enable_attention = true;
  bool enable_feature_residual = true;
  ConvBackend backend = ConvBackend::pseudo3d;
  RestoreWidth restore = RestoreWidth::table;

  // Data-layer width per stream; a lone modality doubles it so the trunk
  // input stays 2x the first stage width.
  std::int64_t conv1_channels() const {
    return (use_rgb && use_residual) ? stage_channels[0] : 2 * stage_channels[0];
  }
  std::int64_t trunk_in_channels() const { return 2 * stage_channels[0]; }
  std::int64_t stage_out_channels(std::size_t i) const {
    return restore == RestoreWidth::table ? stage_channels[i] : 4 * stage_channels[i];
  }

  void validate() const {
    if (!use_rgb && !use_residual) throw ConfigError("network: need at least one modality");
    if (stage_blocks.size() != stage_channels.size() || stage_blocks.empty())
      throw ConfigError("network: stage_blocks and stage_channels must have equal nonzero length");
    for (std::int64_t b : stage_blocks)
      if (b < 1) throw ConfigError("network: every stage needs at least one block");
    for (std::int64_t c : stage_channels)
      if (c < 1) throw ConfigError("network: stage channels must be positive");
    if (use_residual && (step_size < 1 || step_size >= clip_len))
      throw ConfigError("network: step size must be in [1, clip_len)");
    if (clip_len < 1 || crop < 4) throw ConfigError("network: clip_len/crop too small");
    if (classes < 2) throw ConfigError("network: need at least 2 classes");
    if (fc1_width < 1) throw ConfigError("network: fc1_width must be positive");
  }
};

inline const char* backend_name(ConvBackend b) {
  return b == ConvBackend::pseudo3d ? "pseudo3d" : "full3d";
}
inline const char* restore_name(RestoreWidth r) {
  return r == RestoreWidth::table ? "table" : "expand4x";
}

// Canonical key=value snapshot; the checkpoint stores this text and load
// compares it field by field.
inline std::string network_config_text(const NetworkConfig& c) {
  auto list = [](const std::vector<std::int64_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(v[i]);
    }
    return s;
  };
  std::ostringstream out;
  out << "use_rgb=" << (c.use_rgb ? 1 : 0) << "\n"
      << "use_residual=" << (c.use_residual ? 1 : 0) << "\n"
      << "step_size=" << c.step_size << "\n"
      << "clip_len=" << c.clip_len << "\n"
      << "crop=" << c.crop << "\n"
      << "stage_blocks=" << list(c.stage_blocks) << "\n"
      << "stage_channels=" << list(c.stage_channels) << "\n"
      << "classes=" << c.classes << "\n"
      << "fc1_width=" << c.fc1_width << "\n"
      << "enable_attention=" << (c.enable_attention ? 1 : 0) << "\n"
      << "enable_feature_residual=" << (c.enable_feature_residual ? 1 : 0) << "\n"
      << "conv_backend=" << backend_name(c.backend) << "\n"
      << "restore_width=" << restore_name(c.restore) << "\n";
  return out.str();
}

template <class T>
struct Conv1Params {
  ConvUnit<T> spatial;   // [C1,3,1,7,7], spatial stride 2, pad 3
  ConvUnit<T> temporal;  // [C1,C1,3,1,1], pad 1
};

template <class T>
struct Model {
  NetworkConfig config;
  Conv1Params<T> conv1_rgb, conv1_res;
  std::vector<std::vector<P3DBlockParams<T>>> stages;
  Var<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

namespace detail {

template <class T>
Conv1Params<T> make_conv1(std::int64_t c1, std::uint64_t seed, const std::string& name) {
  Conv1Params<T> p;
  p.spatial = make_conv_unit<T>(Shape{c1, 3, 1, 7, 7}, 3 * 49, true, c1, seed, name + ".spatial");
  p.temporal =
      make_conv_unit<T>(Shape{c1, c1, 3, 1, 1}, c1 * 3, true, c1, seed, name + ".temporal");
  return p;
}

template <class T>
Var<T> conv1_forward(const Var<T>& x, Conv1Params<T>& p, BatchNormMode mode) {
  Var<T> h = conv_spatial(x, p.spatial.kernel, p.spatial.bias, 2, 3);
  h = relu(batch_norm(h, p.spatial.gamma, p.spatial.beta, p.spatial.bn, mode));
  h = conv_temporal(h, p.temporal.kernel, p.temporal.bias, 1);
  return relu(batch_norm(h, p.temporal.gamma, p.temporal.beta, p.temporal.bn, mode));
}

template <class F>
auto stage_guard(const std::string& stage, F&& fn) {
  try {
    return fn();
  } catch (ShapeError& e) {
    throw ShapeError(stage + ": " + e.what());
  } catch (ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  }
}

}  // namespace detail

inline std::string stage_name(std::size_t i) { return "res" + std::to_string(i + 2); }

template <class T>
Model<T> build_model(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> m;
  m.config = config;
  const std::int64_t c1 = config.conv1_channels();
  if (config.use_rgb) m.conv1_rgb = detail::make_conv1<T>(c1, seed, "conv1_rgb");
  if (config.use_residual) m.conv1_res = detail::make_conv1<T>(c1, seed, "conv1_res");

  std::int64_t in_ch = config.trunk_in_channels();
  for (std::size_t i = 0; i < config.stage_blocks.size(); ++i) {
    std::vector<P3DBlockParams<T>> blocks;
    const std::int64_t out_ch = config.stage_out_channels(i);
    for (std::int64_t b = 0; b < config.stage_blocks[i]; ++b) {
      P3DBlockConfig bc;
      bc.in_channels = b == 0 ? in_ch : out_ch;
      bc.mid_channels = config.stage_channels[i];
      bc.out_channels = out_ch;
      bc.spatial_stride = (b == 0 && i > 0) ? 2 : 1;
      bc.enable_attention = config.enable_attention;
      bc.enable_feature_residual = config.enable_feature_residual;
      bc.backend = config.backend;
      blocks.push_back(
          make_block<T>(bc, seed, stage_name(i) + ".b" + std::to_string(b)));
    }
    m.stages.push_back(std::move(blocks));
    in_ch = out_ch;
  }

  m.fc1_w = detail::fan_in_uniform<T>(Shape{config.fc1_width, in_ch}, in_ch, seed, "fc1.weight");
  m.fc1_b = make_param(Tensor<T>(Shape{config.fc1_width}, T(0)), "fc1.bias");
  m.fc2_w = detail::fan_in_uniform<T>(Shape{config.classes, config.fc1_width}, config.fc1_width,
                                      seed, "fc2.weight");
  m.fc2_b = make_param(Tensor<T>(Shape{config.classes}, T(0)), "fc2.bias");
  return m;
}

// Inputs are standardized [N,3,T,H,W] batches, one per configured modality
// (pass nullptr for a modality the config excludes).
template <class T>
Var<T> forward(Model<T>& m, const Tensor<T>* rgb, const Tensor<T>* res, BatchNormMode mode) {
  const NetworkConfig& c = m.config;
  auto check_input = [&](const Tensor<T>* t, bool wanted, const char* stage) -> void {
    if (wanted && !t) throw ConfigError(std::string(stage) + ": modality input missing");
    if (!wanted && t) throw ConfigError(std::string(stage) + ": modality not in config");
    if (!t) return;
    const Shape& s = t->shape();
    if (s.size() != 5 || s[1] != 3 || s[2] != c.clip_len || s[3] != c.crop || s[4] != c.crop)
      throw ShapeError(std::string(stage) + ": input " + shape_str(s) + ", expected [N,3," +
                       std::to_string(c.clip_len) + "," + std::to_string(c.crop) + "," +
                       std::to_string(c.crop) + "]");
  };
  check_input(rgb, c.use_rgb, "conv1_rgb");
  check_input(res, c.use_residual, "conv1_res");
  if (rgb && res && rgb->dim(0) != res->dim(0))
    throw ShapeError("forward: modality batches disagree on N");

  std::vector<Var<T>> streams;
  if (rgb)
    streams.push_back(detail::stage_guard("conv1_rgb", [&] {
      auto x = make_constant(*rgb, "input_rgb");
      return detail::conv1_forward(x, m.conv1_rgb, mode);
    }));
  if (res)
    streams.push_back(detail::stage_guard("conv1_res", [&] {
      auto x = make_constant(*res, "input_res");
      return detail::conv1_forward(x, m.conv1_res, mode);
    }));
  Var<T> h = streams.size() == 1 ? streams[0] : concat_channels(streams);

  for (std::size_t i = 0; i < m.stages.size(); ++i)
    for (std::size_t b = 0; b < m.stages[i].size(); ++b)
      h = detail::stage_guard(stage_name(i) + ".b" + std::to_string(b),
                              [&] { return block_forward(h, m.stages[i][b], mode); });

  h = flatten2(global_avg_pool(h));
  h = relu(linear(h, m.fc1_w, m.fc1_b));
  return linear(h, m.fc2_w, m.fc2_b);
}

template <class T>
void collect_model_params(Model<T>& m, std::vector<std::pair<std::string, Var<T>>>& out) {
  auto conv1 = [&](Conv1Params<T>& p, const std::string& prefix) {
    if (!p.spatial.kernel) return;
    for (auto* u : {&p.spatial, &p.temporal}) {
      const std::string name = prefix + (u == &p.spatial ? ".spatial" : ".temporal");
      out.emplace_back(name + ".kernel", u->kernel);
      out.emplace_back(name + ".bias", u->bias);
      out.emplace_back(name + ".gamma", u->gamma);
      out.emplace_back(name + ".beta", u->beta);
    }
  };
  conv1(m.conv1_rgb, "conv1_rgb");
  conv1(m.conv1_res, "conv1_res");
  for (std::size_t i = 0; i < m.stages.size(); ++i)
    for (std::size_t b = 0; b < m.stages[i].size(); ++b)
      collect_params(m.stages[i][b], stage_name(i) + ".b" + std::to_string(b) + ".", out);
  out.emplace_back("fc1.weight", m.fc1_w);
  out.emplace_back("fc1.bias", m.fc1_b);
  out.emplace_back("fc2.weight", m.fc2_w);
  out.emplace_back("fc2.bias", m.fc2_b);
}

template <class T>
void collect_model_buffers(Model<T>& m, std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  auto conv1 = [&](Conv1Params<T>& p, const std::string& prefix) {
    if (!p.spatial.kernel) return;
    for (auto* u : {&p.spatial, &p.temporal}) {
      const std::string name = prefix + (u == &p.spatial ? ".spatial" : ".temporal");
      out.emplace_back(name + ".running_mean", &u->bn.running_mean);
      out.emplace_back(name + ".running_var", &u->bn.running_var);
    }
  };
  conv1(m.conv1_rgb, "conv1_rgb");
  conv1(m.conv1_res, "conv1_res");
  for (std::size_t i = 0; i < m.stages.size(); ++i)
    for (std::size_t b = 0; b < m.stages[i].size(); ++b)
      collect_buffers(m.stages[i][b], stage_name(i) + ".b" + std::to_string(b) + ".", out);
}

// Symbolic Table-style walkthrough, no parameter allocation.
struct ShapeRow {
  std::string stage;
  std::string filters;
  std::string output;  // "TxHxW" (or a width for the fc rows)
};

inline std::vector<ShapeRow> shape_walkthrough(const NetworkConfig& c) {
  c.validate();
  auto dims = [](std::int64_t t, std::int64_t h, std::int64_t w) {
    return std::to_string(t) + "x" + std::to_string(h) + "x" + std::to_string(w);
  };
  std::vector<ShapeRow> rows;
  const std::int64_t c1 = c.conv1_channels();
  std::int64_t H = (c.crop + 6 - 7) / 2 + 1;  // 7x7 stride-2 pad-3
  const std::int64_t T = c.clip_len;
  const std::string conv1_filters = "1x7x7," + std::to_string(c1) + ",stride 2 | 3x1x1," +
                                    std::to_string(c1);
  if (c.use_rgb) rows.push_back({"conv1_rgb", conv1_filters, dims(T, H, H)});
  if (c.use_residual) rows.push_back({"conv1_res", conv1_filters, dims(T, H, H)});

  std::int64_t in_ch = c.trunk_in_channels();
  for (std::size_t i = 0; i < c.stage_blocks.size(); ++i) {
    if (i > 0) H = (H - 1) / 2 + 1;
    const std::int64_t mid = c.stage_channels[i];
    const std::int64_t out_ch = c.stage_out_channels(i);
    std::string filters;
    if (c.backend == ConvBackend::pseudo3d) {
      filters = "1x1x1," + std::to_string(mid) + " | 1x3x3," + std::to_string(mid) + " + 3x1x1," +
                std::to_string(mid) + " | 1x1x1," + std::to_string(out_ch);
    } else {
      filters = "1x1x1," + std::to_string(mid) + " | 3x3x3," + std::to_string(mid) + " | 1x1x1," +
                std::to_string(out_ch);
    }
    filters += " x" + std::to_string(c.stage_blocks[i]);
    rows.push_back({stage_name(i), filters, dims(T, H, H)});
    in_ch = out_ch;
  }
  rows.push_back({"pool", "global average", dims(1, 1, 1)});
  rows.push_back({"fc1", std::to_string(in_ch) + "->" + std::to_string(c.fc1_width),
                  std::to_string(c.fc1_width)});
  rows.push_back({"fc2", std::to_string(c.fc1_width) + "->" + std::to_string(c.classes),
                  std::to_string(c.classes)});
  return rows;
}

// Checkpoint container: magic, version, config snapshot, epoch, seed, then
// named tensor records in a fixed order. Write(read(file)) is byte-identical.
template <class T>
struct Checkpoint {
  std::string config_text;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor<T>>> records;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : records)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw IoError(std::string("checkpoint: truncated reading ") + what);
  return v;
}
inline std::uint64_t read_u64(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw IoError(std::string("checkpoint: truncated reading ") + what);
  return v;
}

}  // namespace detail

template <class T>
void write_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open for write: " + path.string());
  out.write("P3DC", 4);
  detail::write_u32(out, 1);
  detail::write_u64(out, ck.config_text.size());
  out.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
  detail::write_u64(out, ck.epoch);
  detail::write_u64(out, ck.seed);
  detail::write_u64(out, ck.records.size());
  for (const auto& [name, tensor] : ck.records) {
    detail::write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, tensor);
  }
  if (!out) throw IoError("checkpoint: write failed: " + path.string());
}

template <class T>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open: " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string(magic, 4) != "P3DC")
    throw IoError("checkpoint: bad magic in " + path.string());
  const std::uint32_t version = detail::read_u32(in, "version");
  if (version != 1)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint<T> ck;
  const std::uint64_t cfg_len = detail::read_u64(in, "config length");
  ck.config_text.resize(cfg_len);
  if (!in.read(ck.config_text.data(), static_cast<std::streamsize>(cfg_len)))
    throw IoError("checkpoint: truncated reading config");
  ck.epoch = detail::read_u64(in, "epoch");
  ck.seed = detail::read_u64(in, "seed");
  const std::uint64_t n_records = detail::read_u64(in, "record count");
  for (std::uint64_t i = 0; i < n_records; ++i) {
    const std::uint64_t name_len = detail::read_u64(in, "record name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw IoError("checkpoint: truncated reading record name");
    Tensor<T> t = read_tensor<T>(in);
    ck.records.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

// Compare two config snapshots and name the first differing field.
inline void check_config_match(const std::string& have, const std::string& want) {
  if (have == want) return;
  std::map<std::string, std::string> a, b;
  auto parse = [](const std::string& text, std::map<std::string, std::string>& into) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) into[line.substr(0, eq)] = line.substr(eq + 1);
    }
  };
  parse(have, a);
  parse(want, b);
  for (const auto& [key, val] : b) {
    auto it = a.find(key);
    if (it == a.end())
      throw ConfigError("checkpoint config mismatch: missing field '" + key + "'");
    if (it->second != val)
      throw ConfigError("checkpoint config mismatch: field '" + key + "' is '" + it->second +
                        "', expected '" + val + "'");
  }
  throw ConfigError("checkpoint config mismatch: extra fields in stored config");
}

template <class T>
Checkpoint<T> checkpoint_from_model(Model<T>& m, std::uint64_t epoch, std::uint64_t seed) {
  Checkpoint<T> ck;
  ck.config_text = network_config_text(m.config);
  ck.epoch = epoch;
  ck.seed = seed;
  std::vector<std::pair<std::string, Var<T>>> params;
  collect_model_params(m, params);
  for (auto& [name, v] : params) ck.records.emplace_back(name, v->value);
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;
  collect_model_buffers(m, buffers);
  for (auto& [name, t] : buffers) ck.records.emplace_back(name, *t);
  return ck;
}

// All-or-nothing restore: verifies the config snapshot and every record's
// presence and shape before touching the model.
template <class T>
void load_model_from_checkpoint(Model<T>& m, const Checkpoint<T>& ck) {
  check_config_match(ck.config_text, network_config_text(m.config));
  std::vector<std::pair<std::string, Var<T>>> params;
  collect_model_params(m, params);
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;
  collect_model_buffers(m, buffers);

  std::vector<std::pair<Tensor<T>*, const Tensor<T>*>> plan;
  auto stage = [&](const std::string& name, Tensor<T>* dst) {
    const Tensor<T>* src = ck.find(name);
    if (!src) throw IoError("checkpoint: missing record '" + name + "'");
    if (src->shape() != dst->shape())
      throw ShapeError("checkpoint: record '" + name + "' has shape " + shape_str(src->shape()) +
                       ", model expects " + shape_str(dst->shape()));
    plan.emplace_back(dst, src);
  };
  for (auto& [name, v] : params) stage(name, &v->value);
  for (auto& [name, t] : buffers) stage(name, t);
  for (auto& [dst, src] : plan) *dst = *src;
}

}  // namespace p3d
