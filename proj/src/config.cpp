#include "p3d/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace p3d {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::string fmt_doubles(const std::vector<double>& vs) {
  std::string s;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (i) s += ',';
    s += fmt_double(vs[i]);
  }
  return s;
}

std::string fmt_i64s(const std::vector<std::int64_t>& vs) {
  std::string s;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(vs[i]);
  }
  return s;
}

std::string fmt_float3(const std::array<float, 3>& v) {
  return fmt_double(v[0]) + "," + fmt_double(v[1]) + "," + fmt_double(v[2]);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& val,
                            const std::string& want) {
  throw ConfigError("config: key '" + key + "' has value '" + val + "', expected " + want);
}

double parse_double(const std::string& key, const std::string& val) {
  double v = 0;
  auto [end, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
  if (ec != std::errc() || end != val.data() + val.size()) bad_value(key, val, "a number");
  return v;
}

std::int64_t parse_i64(const std::string& key, const std::string& val) {
  std::int64_t v = 0;
  auto [end, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
  if (ec != std::errc() || end != val.data() + val.size()) bad_value(key, val, "an integer");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& val) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
  if (ec != std::errc() || end != val.data() + val.size())
    bad_value(key, val, "a non-negative integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& val) {
  if (val == "0") return false;
  if (val == "1") return true;
  bad_value(key, val, "0 or 1");
}

std::vector<double> parse_doubles(const std::string& key, const std::string& val) {
  std::vector<double> out;
  for (const auto& p : split_commas(val)) out.push_back(parse_double(key, p));
  return out;
}

std::vector<std::int64_t> parse_i64s(const std::string& key, const std::string& val) {
  std::vector<std::int64_t> out;
  for (const auto& p : split_commas(val)) out.push_back(parse_i64(key, p));
  return out;
}

std::array<float, 3> parse_float3(const std::string& key, const std::string& val) {
  const auto parts = split_commas(val);
  if (parts.size() != 3) bad_value(key, val, "exactly three comma-separated numbers");
  return {static_cast<float>(parse_double(key, parts[0])),
          static_cast<float>(parse_double(key, parts[1])),
          static_cast<float>(parse_double(key, parts[2]))};
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string run_config_text(const RunConfig& rc) {
  const NetworkConfig& n = rc.net;
  const TrainConfig& t = rc.train;
  std::string modality;
  if (n.use_rgb) modality = "rgb";
  if (n.use_residual) modality += modality.empty() ? "residual" : ",residual";
  std::ostringstream out;
  out << "modality=" << modality << "\n"
      << "step_size=" << n.step_size << "\n"
      << "clip_len=" << n.clip_len << "\n"
      << "crop=" << n.crop << "\n"
      << "stage_blocks=" << fmt_i64s(n.stage_blocks) << "\n"
      << "stage_channels=" << fmt_i64s(n.stage_channels) << "\n"
      << "classes=" << n.classes << "\n"
      << "fc1_width=" << n.fc1_width << "\n"
      << "enable_attention=" << (n.enable_attention ? 1 : 0) << "\n"
      << "enable_feature_residual=" << (n.enable_feature_residual ? 1 : 0) << "\n"
      << "conv_backend=" << backend_name(n.backend) << "\n"
      << "restore_width=" << restore_name(n.restore) << "\n"
      << "lr=" << fmt_double(t.lr) << "\n"
      << "momentum=" << fmt_double(t.momentum) << "\n"
      << "weight_decay=" << fmt_double(t.weight_decay) << "\n"
      << "batch_size=" << t.batch_size << "\n"
      << "epochs=" << t.epochs << "\n"
      << "milestones=" << fmt_doubles(t.milestones) << "\n"
      << "seed=" << t.seed << "\n"
      << "workers=" << t.workers << "\n"
      << "checkpoint_every=" << t.checkpoint_every << "\n"
      << "target_fps=" << fmt_double(t.target_fps) << "\n"
      << "short_side=" << t.short_side << "\n"
      << "scale_choices=" << fmt_doubles(t.scale_choices) << "\n"
      << "residual_after_augment=" << (t.residual_after_augment ? 1 : 0) << "\n"
      << "pad=" << (t.pad == PadPolicy::repeat_last ? "repeat" : "none") << "\n"
      << "rgb_mean=" << fmt_float3(t.rgb_mean) << "\n"
      << "rgb_std=" << fmt_float3(t.rgb_std) << "\n"
      << "res_mean=" << fmt_float3(t.res_mean) << "\n"
      << "res_std=" << fmt_float3(t.res_std) << "\n"
      << "eval_clips=" << t.eval_clips << "\n"
      << "train_dir=" << rc.train_dir << "\n"
      << "val_dir=" << rc.val_dir << "\n"
      << "out_root=" << rc.out_root << "\n";
  return out.str();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  NetworkConfig& n = rc.net;
  TrainConfig& t = rc.train;

  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> registry = {
      {"modality",
       [&](const std::string& k, const std::string& v) {
         n.use_rgb = n.use_residual = false;
         for (const auto& part : split_commas(v)) {
           if (part == "rgb" && !n.use_rgb)
             n.use_rgb = true;
           else if (part == "residual" && !n.use_residual)
             n.use_residual = true;
           else
             bad_value(k, v, "'rgb', 'residual', or 'rgb,residual'");
         }
       }},
      {"step_size", [&](const std::string& k, const std::string& v) { n.step_size = parse_i64(k, v); }},
      {"clip_len", [&](const std::string& k, const std::string& v) { n.clip_len = parse_i64(k, v); }},
      {"crop", [&](const std::string& k, const std::string& v) { n.crop = parse_i64(k, v); }},
      {"stage_blocks",
       [&](const std::string& k, const std::string& v) { n.stage_blocks = parse_i64s(k, v); }},
      {"stage_channels",
       [&](const std::string& k, const std::string& v) { n.stage_channels = parse_i64s(k, v); }},
      {"classes", [&](const std::string& k, const std::string& v) { n.classes = parse_i64(k, v); }},
      {"fc1_width", [&](const std::string& k, const std::string& v) { n.fc1_width = parse_i64(k, v); }},
      {"enable_attention",
       [&](const std::string& k, const std::string& v) { n.enable_attention = parse_bool(k, v); }},
      {"enable_feature_residual",
       [&](const std::string& k, const std::string& v) {
         n.enable_feature_residual = parse_bool(k, v);
       }},
      {"conv_backend",
       [&](const std::string& k, const std::string& v) {
         if (v == "pseudo3d")
           n.backend = ConvBackend::pseudo3d;
         else if (v == "full3d")
           n.backend = ConvBackend::full3d;
         else
           bad_value(k, v, "'pseudo3d' or 'full3d'");
       }},
      {"restore_width",
       [&](const std::string& k, const std::string& v) {
         if (v == "table")
           n.restore = RestoreWidth::table;
         else if (v == "expand4x")
           n.restore = RestoreWidth::expand4x;
         else
           bad_value(k, v, "'table' or 'expand4x'");
       }},
      {"lr", [&](const std::string& k, const std::string& v) { t.lr = parse_double(k, v); }},
      {"momentum",
       [&](const std::string& k, const std::string& v) { t.momentum = parse_double(k, v); }},
      {"weight_decay",
       [&](const std::string& k, const std::string& v) { t.weight_decay = parse_double(k, v); }},
      {"batch_size",
       [&](const std::string& k, const std::string& v) { t.batch_size = parse_i64(k, v); }},
      {"epochs", [&](const std::string& k, const std::string& v) { t.epochs = parse_i64(k, v); }},
      {"milestones",
       [&](const std::string& k, const std::string& v) { t.milestones = parse_doubles(k, v); }},
      {"seed", [&](const std::string& k, const std::string& v) { t.seed = parse_u64(k, v); }},
      {"workers", [&](const std::string& k, const std::string& v) { t.workers = parse_i64(k, v); }},
      {"checkpoint_every",
       [&](const std::string& k, const std::string& v) { t.checkpoint_every = parse_i64(k, v); }},
      {"target_fps",
       [&](const std::string& k, const std::string& v) { t.target_fps = parse_double(k, v); }},
      {"short_side",
       [&](const std::string& k, const std::string& v) { t.short_side = parse_i64(k, v); }},
      {"scale_choices",
       [&](const std::string& k, const std::string& v) { t.scale_choices = parse_doubles(k, v); }},
      {"residual_after_augment",
       [&](const std::string& k, const std::string& v) {
         t.residual_after_augment = parse_bool(k, v);
       }},
      {"pad",
       [&](const std::string& k, const std::string& v) {
         if (v == "repeat")
           t.pad = PadPolicy::repeat_last;
         else if (v == "none")
           t.pad = PadPolicy::none;
         else
           bad_value(k, v, "'repeat' or 'none'");
       }},
      {"rgb_mean", [&](const std::string& k, const std::string& v) { t.rgb_mean = parse_float3(k, v); }},
      {"rgb_std", [&](const std::string& k, const std::string& v) { t.rgb_std = parse_float3(k, v); }},
      {"res_mean", [&](const std::string& k, const std::string& v) { t.res_mean = parse_float3(k, v); }},
      {"res_std", [&](const std::string& k, const std::string& v) { t.res_std = parse_float3(k, v); }},
      {"eval_clips",
       [&](const std::string& k, const std::string& v) { t.eval_clips = parse_i64(k, v); }},
      {"train_dir", [&](const std::string&, const std::string& v) { rc.train_dir = v; }},
      {"val_dir", [&](const std::string&, const std::string& v) { rc.val_dir = v; }},
      {"out_root", [&](const std::string&, const std::string& v) { rc.out_root = v; }},
  };

  std::map<std::string, int> seen;
  std::stringstream ss(text);
  std::string raw;
  std::int64_t line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " has no '=': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const auto it = registry.find(key);
    if (it == registry.end()) throw ConfigError("config: unknown key '" + key + "'");
    if (seen[key]++) throw ConfigError("config: duplicate key '" + key + "'");
    it->second(key, val);
  }

  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string config_hash12(const RunConfig& rc) {
  const std::string canon = run_config_text(rc);
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  std::stringstream ss(canon);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.rfind("seed=", 0) == 0) continue;
    for (char c : line) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    h ^= static_cast<unsigned char>('\n');
    h *= 1099511628211ull;
  }
  char buf[13];
  std::snprintf(buf, sizeof(buf), "%012llx", static_cast<unsigned long long>(h >> 16));
  return std::string(buf, 12);
}

std::string run_dir_name(const RunConfig& rc) {
  return config_hash12(rc) + "_s" + std::to_string(rc.train.seed);
}

}  // namespace p3d
