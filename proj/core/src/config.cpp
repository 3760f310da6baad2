#include "cmtboost/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <type_traits>

namespace cmtboost {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw ConfigError("config key " + key + ": cannot parse '" + value + "' as " + expected);
}

long long parse_int(const std::string& key, const std::string& value) {
  long long out = 0;
  const std::string v = trim(value);
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, value, "an integer");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  const long long v = parse_int(key, value);
  if (v < 0) bad_value(key, value, "a non-negative integer");
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) bad_value(key, value, "a number");
    return out;
  } catch (const std::exception&) {
    bad_value(key, value, "a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, value, "a boolean");
}

std::vector<std::string> parse_list(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
    bad_value(key, value, "a list [a,b,...]");
  }
  std::vector<std::string> items;
  std::string body = v.substr(1, v.size() - 2);
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) items.push_back(trim(item));
  if (!body.empty() && body.back() == ',') bad_value(key, value, "a list [a,b,...]");
  return items;
}

template <typename V, std::size_t N>
std::array<V, N> parse_array(const std::string& key, const std::string& value,
                             V (*elem)(const std::string&, const std::string&)) {
  auto items = parse_list(key, value);
  if (items.size() != N) {
    throw ConfigError("config key " + key + ": expected " + std::to_string(N) + " entries");
  }
  std::array<V, N> out;
  for (std::size_t i = 0; i < N; ++i) out[i] = elem(key, items[i]);
  return out;
}

void apply_key(ResolvedConfig& cfg, const std::string& key, const std::string& value) {
  auto size4 = [&](const std::string& k, const std::string& v) {
    return parse_array<std::size_t, 4>(k, v, parse_size);
  };

  if (key == "model.profile") {
    const std::string v = trim(value);
    const std::uint64_t keep_seed = cfg.model.seed;
    if (v == "desk64") {
      cfg.model = ModelConfig::desk64();
    } else if (v == "paper224") {
      cfg.model = ModelConfig::paper224();
    } else {
      bad_value(key, value, "desk64 or paper224");
    }
    if (cfg.model_seed_set) cfg.model.seed = keep_seed;
  } else if (key == "model.input_channels") {
    cfg.model.input_channels = parse_size(key, value);
  } else if (key == "model.input_height") {
    cfg.model.input_height = parse_size(key, value);
  } else if (key == "model.input_width") {
    cfg.model.input_width = parse_size(key, value);
  } else if (key == "model.base_width") {
    cfg.model.base_width = parse_size(key, value);
  } else if (key == "model.stage_depths") {
    cfg.model.stage_depths = size4(key, value);
  } else if (key == "model.heads") {
    cfg.model.heads = size4(key, value);
  } else if (key == "model.kv_reduction") {
    auto arr = parse_array<std::size_t, 4>(key, value, parse_size);
    for (std::size_t i = 0; i < 4; ++i) cfg.model.kv_reduction[i] = static_cast<int>(arr[i]);
  } else if (key == "model.irffn_ratio") {
    cfg.model.irffn_ratio = parse_size(key, value);
  } else if (key == "model.dropout") {
    cfg.model.dropout = parse_double(key, value);
  } else if (key == "model.residual_enabled") {
    cfg.model.residual_enabled = parse_bool(key, value);
  } else if (key == "model.residual_channels") {
    cfg.model.residual_channels = size4(key, value);
  } else if (key == "model.pa_ratio") {
    cfg.model.pa_ratio = parse_size(key, value);
  } else if (key == "model.pa_residual_add") {
    cfg.model.pa_residual_add = parse_bool(key, value);
  } else if (key == "model.head_hidden") {
    cfg.model.head_hidden = parse_size(key, value);
  } else if (key == "model.classes") {
    cfg.model.classes = parse_size(key, value);
  } else if (key == "model.seed") {
    cfg.model.seed = static_cast<std::uint64_t>(parse_int(key, value));
    cfg.model_seed_set = true;
  } else if (key == "train.epochs") {
    cfg.train.epochs = parse_size(key, value);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = parse_size(key, value);
  } else if (key == "train.lr") {
    cfg.train.lr.base = parse_double(key, value);
  } else if (key == "train.lr_decay") {
    cfg.train.lr.decay = parse_double(key, value);
  } else if (key == "train.lr_period") {
    cfg.train.lr.period = parse_size(key, value);
  } else if (key == "train.weight_decay") {
    cfg.train.weight_decay = parse_double(key, value);
  } else if (key == "train.augment") {
    cfg.train.augment = parse_bool(key, value);
  } else if (key == "train.hflip_prob") {
    cfg.train.augmentation.horizontal_flip_prob = parse_double(key, value);
  } else if (key == "train.vflip_prob") {
    cfg.train.augmentation.vertical_flip_prob = parse_double(key, value);
  } else if (key == "train.scale_range") {
    cfg.train.augmentation.scale_range = parse_array<double, 2>(key, value, parse_double);
  } else if (key == "train.shear_range") {
    cfg.train.augmentation.shear_range_deg = parse_array<double, 2>(key, value, parse_double);
  } else if (key == "train.seed") {
    cfg.train.seed = static_cast<std::uint64_t>(parse_int(key, value));
    cfg.train_seed_set = true;
  } else if (key == "train.checkpoint_every") {
    cfg.train.checkpoint_every = parse_size(key, value);
  } else if (key == "train.init_checkpoint") {
    cfg.train.init_checkpoint = trim(value);
  } else if (key == "train.init_prefix") {
    cfg.train.init_prefix = trim(value);
  } else if (key == "data.dir") {
    cfg.data.dir = trim(value);
  } else if (key == "data.synthetic") {
    cfg.data.synthetic = parse_bool(key, value);
  } else if (key == "data.synthetic_count") {
    cfg.data.synthetic_count = parse_size(key, value);
  } else if (key == "data.noise_level") {
    cfg.data.noise_level = parse_double(key, value);
  } else if (key == "data.split") {
    cfg.data.split = parse_array<double, 3>(key, value, parse_double);
  } else if (key == "data.permissive") {
    cfg.data.permissive = parse_bool(key, value);
  } else if (key == "data.seed") {
    cfg.data.seed = static_cast<std::uint64_t>(parse_int(key, value));
    cfg.data_seed_set = true;
  } else if (key == "eval.checkpoint") {
    cfg.eval_checkpoint = trim(value);
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

void apply_line(ResolvedConfig& cfg, const std::string& raw, const std::string& where) {
  std::string line = raw;
  const std::size_t hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = trim(line);
  if (line.empty()) return;
  const std::size_t eq = line.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("malformed config line (" + where + "): " + trim(raw));
  }
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  if (key.empty()) throw ConfigError("malformed config line (" + where + "): " + trim(raw));
  apply_key(cfg, key, value);
}

}  // namespace

ResolvedConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  ResolvedConfig cfg;
  cfg.model = ModelConfig::desk64();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      apply_line(cfg, line, path + ":" + std::to_string(lineno));
    }
  }
  for (const auto& o : overrides) apply_line(cfg, o, "--set");
  cfg.model.validate();
  if (cfg.train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (cfg.train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (cfg.data.synthetic_count < 1) throw ConfigError("data.synthetic_count must be >= 1");
  const double frac_sum = cfg.data.split[0] + cfg.data.split[1] + cfg.data.split[2];
  if (std::abs(frac_sum - 1.0) > 1e-9) throw ConfigError("data.split fractions must sum to 1");
  return cfg;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

template <typename A>
std::string fmt_list(const A& arr) {
  std::string s = "[";
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<typename A::value_type>) {
      s += fmt_double(arr[i]);
    } else {
      s += std::to_string(arr[i]);
    }
  }
  return s + "]";
}

}  // namespace

std::string render_config(const ResolvedConfig& cfg) {
  std::ostringstream out;
  out << "model.input_channels = " << cfg.model.input_channels << "\n";
  out << "model.input_height = " << cfg.model.input_height << "\n";
  out << "model.input_width = " << cfg.model.input_width << "\n";
  out << "model.base_width = " << cfg.model.base_width << "\n";
  out << "model.stage_depths = " << fmt_list(cfg.model.stage_depths) << "\n";
  out << "model.heads = " << fmt_list(cfg.model.heads) << "\n";
  out << "model.kv_reduction = " << fmt_list(cfg.model.kv_reduction) << "\n";
  out << "model.irffn_ratio = " << cfg.model.irffn_ratio << "\n";
  out << "model.dropout = " << fmt_double(cfg.model.dropout) << "\n";
  out << "model.residual_enabled = " << (cfg.model.residual_enabled ? "true" : "false") << "\n";
  out << "model.residual_channels = " << fmt_list(cfg.model.residual_channels) << "\n";
  out << "model.pa_ratio = " << cfg.model.pa_ratio << "\n";
  out << "model.pa_residual_add = " << (cfg.model.pa_residual_add ? "true" : "false") << "\n";
  out << "model.head_hidden = " << cfg.model.head_hidden << "\n";
  out << "model.classes = " << cfg.model.classes << "\n";
  out << "model.seed = " << cfg.model.seed << "\n";
  out << "train.epochs = " << cfg.train.epochs << "\n";
  out << "train.batch_size = " << cfg.train.batch_size << "\n";
  out << "train.lr = " << fmt_double(cfg.train.lr.base) << "\n";
  out << "train.lr_decay = " << fmt_double(cfg.train.lr.decay) << "\n";
  out << "train.lr_period = " << cfg.train.lr.period << "\n";
  out << "train.weight_decay = " << fmt_double(cfg.train.weight_decay) << "\n";
  out << "train.augment = " << (cfg.train.augment ? "true" : "false") << "\n";
  out << "train.hflip_prob = " << fmt_double(cfg.train.augmentation.horizontal_flip_prob) << "\n";
  out << "train.vflip_prob = " << fmt_double(cfg.train.augmentation.vertical_flip_prob) << "\n";
  out << "train.scale_range = " << fmt_list(cfg.train.augmentation.scale_range) << "\n";
  out << "train.shear_range = " << fmt_list(cfg.train.augmentation.shear_range_deg) << "\n";
  out << "train.seed = " << cfg.train.seed << "\n";
  out << "train.checkpoint_every = " << cfg.train.checkpoint_every << "\n";
  if (!cfg.train.init_checkpoint.empty()) {
    out << "train.init_checkpoint = " << cfg.train.init_checkpoint << "\n";
  }
  if (!cfg.train.init_prefix.empty()) {
    out << "train.init_prefix = " << cfg.train.init_prefix << "\n";
  }
  if (!cfg.data.dir.empty()) out << "data.dir = " << cfg.data.dir << "\n";
  out << "data.synthetic = " << (cfg.data.synthetic ? "true" : "false") << "\n";
  out << "data.synthetic_count = " << cfg.data.synthetic_count << "\n";
  out << "data.noise_level = " << fmt_double(cfg.data.noise_level) << "\n";
  out << "data.split = " << fmt_list(cfg.data.split) << "\n";
  out << "data.permissive = " << (cfg.data.permissive ? "true" : "false") << "\n";
  out << "data.seed = " << cfg.data.seed << "\n";
  if (!cfg.eval_checkpoint.empty()) out << "eval.checkpoint = " << cfg.eval_checkpoint << "\n";
  return out.str();
}

}  // namespace cmtboost
