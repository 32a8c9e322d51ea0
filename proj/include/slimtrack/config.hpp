#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "slimtrack/planner.hpp"
#include "slimtrack/tracking.hpp"
#include "slimtrack/train.hpp"
#include "slimtrack/zoo.hpp"

namespace slimtrack {

// Plain-text `key = value` config files. Blank lines and lines starting with
// '#' are ignored. Unknown keys are hard errors: a config that parses is a
// config that is fully understood.
struct PipelineConfig {
  std::string arch = "mini_alex";
  std::vector<int64_t> widths;  // optional arch dims; empty = zoo defaults
  uint64_t master_seed = 1;
  std::string out_dir = "out";

  TrainConfig stage1;
  int64_t stage1_pairs_per_epoch = 64;
  TrainConfig stage3;
  int64_t stage3_pairs_per_epoch = 64;

  BudgetSpec budget;             // mode/floor/decoupled fractions
  std::vector<double> budgets;   // sweep fractions, strictly decreasing

  BenchmarkConfig bench;

  void validate() const {
    if (budgets.empty()) throw ConfigError("config: budgets list is empty");
    for (size_t i = 1; i < budgets.size(); ++i)
      if (!(budgets[i] < budgets[i - 1]))
        throw ConfigError("config: budgets must be strictly decreasing");
    for (double b : budgets)
      if (!(b > 0.0 && b <= 1.0)) throw ConfigError("config: budgets must be in (0,1]");
    stage1.validate();
    TrainConfig s3 = stage3;
    s3.mode = TrainConfig::Mode::Finetune;
    s3.lambda = 0.0;
    s3.validate();
    if (stage1_pairs_per_epoch < 1 || stage3_pairs_per_epoch < 1)
      throw ConfigError("config: pairs_per_epoch must be >= 1");
    build_model(arch, 0);  // throws on unknown architecture
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline double parse_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

}  // namespace detail

inline PipelineConfig parse_config(std::istream& is) {
  PipelineConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = detail::trim(t.substr(0, eq));
    std::string val = detail::trim(t.substr(eq + 1));
    if (key == "arch") {
      cfg.arch = val;
    } else if (key == "widths") {
      cfg.widths.clear();
      for (auto& s : detail::split_commas(val)) cfg.widths.push_back(detail::parse_i64(key, s));
    } else if (key == "master_seed") {
      cfg.master_seed = uint64_t(detail::parse_i64(key, val));
    } else if (key == "out_dir") {
      cfg.out_dir = val;
    } else if (key == "train.lambda") {
      cfg.stage1.lambda = detail::parse_f64(key, val);
    } else if (key == "train.lr") {
      cfg.stage1.lr = detail::parse_f64(key, val);
    } else if (key == "train.momentum") {
      cfg.stage1.momentum = detail::parse_f64(key, val);
    } else if (key == "train.epochs") {
      cfg.stage1.epochs = detail::parse_i64(key, val);
    } else if (key == "train.batch_size") {
      cfg.stage1.batch_size = detail::parse_i64(key, val);
    } else if (key == "train.pairs_per_epoch") {
      cfg.stage1_pairs_per_epoch = detail::parse_i64(key, val);
    } else if (key == "finetune.lr") {
      cfg.stage3.lr = detail::parse_f64(key, val);
    } else if (key == "finetune.momentum") {
      cfg.stage3.momentum = detail::parse_f64(key, val);
    } else if (key == "finetune.epochs") {
      cfg.stage3.epochs = detail::parse_i64(key, val);
    } else if (key == "finetune.batch_size") {
      cfg.stage3.batch_size = detail::parse_i64(key, val);
    } else if (key == "finetune.pairs_per_epoch") {
      cfg.stage3_pairs_per_epoch = detail::parse_i64(key, val);
    } else if (key == "budget.mode") {
      cfg.budget.mode = budget_mode_from_name(val);
    } else if (key == "budget.floor") {
      cfg.budget.floor = detail::parse_i64(key, val);
    } else if (key == "budget.encoder_fraction") {
      cfg.budget.encoder_fraction = detail::parse_f64(key, val);
    } else if (key == "budget.decoder_fraction") {
      cfg.budget.decoder_fraction = detail::parse_f64(key, val);
    } else if (key == "budgets") {
      cfg.budgets.clear();
      for (auto& s : detail::split_commas(val)) cfg.budgets.push_back(detail::parse_f64(key, s));
    } else if (key == "bench.sequences") {
      cfg.bench.sequences = detail::parse_i64(key, val);
    } else if (key == "bench.frames") {
      cfg.bench.frames = detail::parse_i64(key, val);
    } else if (key == "bench.frame_size") {
      cfg.bench.frame_size = detail::parse_i64(key, val);
    } else if (key == "bench.motion") {
      cfg.bench.motion = detail::parse_i64(key, val);
    } else if (key == "bench.seed_base") {
      cfg.bench.seed_base = uint64_t(detail::parse_i64(key, val));
    } else {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path + "'");
  return parse_config(is);
}

// Canonical re-serialization: load_config(write_config(c)) == c, and the file
// bytes are a pure function of the parsed values.
inline void write_config(const PipelineConfig& c, std::ostream& os) {
  os << "arch = " << c.arch << "\n";
  if (!c.widths.empty()) {
    os << "widths = ";
    for (size_t i = 0; i < c.widths.size(); ++i) os << (i ? "," : "") << c.widths[i];
    os << "\n";
  }
  os << "master_seed = " << c.master_seed << "\n";
  os << "out_dir = " << c.out_dir << "\n";
  os << "train.lambda = " << c.stage1.lambda << "\n";
  os << "train.lr = " << c.stage1.lr << "\n";
  os << "train.momentum = " << c.stage1.momentum << "\n";
  os << "train.epochs = " << c.stage1.epochs << "\n";
  os << "train.batch_size = " << c.stage1.batch_size << "\n";
  os << "train.pairs_per_epoch = " << c.stage1_pairs_per_epoch << "\n";
  os << "finetune.lr = " << c.stage3.lr << "\n";
  os << "finetune.momentum = " << c.stage3.momentum << "\n";
  os << "finetune.epochs = " << c.stage3.epochs << "\n";
  os << "finetune.batch_size = " << c.stage3.batch_size << "\n";
  os << "finetune.pairs_per_epoch = " << c.stage3_pairs_per_epoch << "\n";
  os << "budget.mode = " << budget_mode_name(c.budget.mode) << "\n";
  os << "budget.floor = " << c.budget.floor << "\n";
  if (c.budget.encoder_fraction > 0)
    os << "budget.encoder_fraction = " << c.budget.encoder_fraction << "\n";
  if (c.budget.decoder_fraction > 0)
    os << "budget.decoder_fraction = " << c.budget.decoder_fraction << "\n";
  os << "budgets = ";
  for (size_t i = 0; i < c.budgets.size(); ++i) os << (i ? "," : "") << c.budgets[i];
  os << "\n";
  os << "bench.sequences = " << c.bench.sequences << "\n";
  os << "bench.frames = " << c.bench.frames << "\n";
  os << "bench.frame_size = " << c.bench.frame_size << "\n";
  os << "bench.motion = " << c.bench.motion << "\n";
  os << "bench.seed_base = " << c.bench.seed_base << "\n";
}

// Architecture construction honoring the optional dimension override.
inline ModelGraph build_configured_model(const PipelineConfig& cfg, uint64_t seed) {
  if (cfg.widths.empty()) return build_model(cfg.arch, seed);
  if (cfg.arch == "mini_alex") return build_mini_alex(cfg.widths, seed);
  if (cfg.arch == "mini_resnet") {
    if (cfg.widths.size() < 3)
      throw ConfigError("config: mini_resnet widths = stages,blocks_per_stage,trunk...");
    std::vector<int64_t> trunk(cfg.widths.begin() + 2, cfg.widths.end());
    return build_mini_resnet(cfg.widths[0], cfg.widths[1], trunk, seed);
  }
  if (cfg.arch == "mini_vit") {
    if (cfg.widths.size() != 5)
      throw ConfigError("config: mini_vit widths = layers,dim,heads,mlp_ratio,patch");
    return build_mini_vit(cfg.widths[0], cfg.widths[1], cfg.widths[2], cfg.widths[3],
                          cfg.widths[4], seed);
  }
  if (cfg.arch == "mini_encdec") {
    if (cfg.widths.size() != 4)
      throw ConfigError("config: mini_encdec widths = stacks,dim,heads,ffn");
    return build_mini_encdec(cfg.widths[0], cfg.widths[1], cfg.widths[2], cfg.widths[3], seed);
  }
  throw ConfigError("unknown architecture '" + cfg.arch + "'");
}

}  // namespace slimtrack
