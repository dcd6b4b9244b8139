#include "clove/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace clove {

RunConfig::RunConfig() { train.seed = default_seed_from_env(); }

void RunConfig::validate() const {
  train.validate();
  if (corpus_train == 0 || corpus_eval == 0) throw ConfigError("corpus_train and corpus_eval must be positive");
  if (corpus.min_shapes < 1 || corpus.max_shapes < corpus.min_shapes) {
    throw ConfigError("corpus_min_shapes must be >= 1 and <= corpus_max_shapes");
  }
  if (corpus.height < train.augment.out_h / 8 || corpus.height < kMinImageExtent) {
    throw ConfigError("image_size too small");
  }
  if (!(eval.t_pos > 0)) throw ConfigError("eval_t_pos must be positive");
  if (!(eval.views.crop_min > 0 && eval.views.crop_min <= eval.views.crop_max)) {
    throw ConfigError("eval_crop_min must lie in (0, crop_max]");
  }
  if (probe_train == 0) throw ConfigError("probe_train must be positive");
}

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError("invalid value '" + value + "' for key '" + key + "' (expected " + want + ")");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) bad(key, v, "a finite number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad(key, v, "true or false");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, item));
  if (out.empty()) bad(key, v, "a comma-separated list of integers");
  return out;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CLOVE_NUM(name, field, doc)                                                         \
  Entry {                                                                                   \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = to_double(name, v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                                     \
  }
#define CLOVE_SIZE(name, field, doc)                                                      \
  Entry {                                                                                 \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = to_size(name, v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                                   \
  }
#define CLOVE_BOOL(name, field, doc)                                                      \
  Entry {                                                                                 \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = to_bool(name, v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                                   \
  }
#define CLOVE_STR(name, field, doc)                                                                         \
  Entry {                                                                                                   \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = v; }, [](const RunConfig& c) { return c.field; } \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      CLOVE_SIZE("steps", train.steps, "total optimizer steps"),
      CLOVE_SIZE("batch", train.batch, "images per step"),
      CLOVE_NUM("lr", train.lr, "peak learning rate"),
      CLOVE_NUM("lr_min", train.lr_min, "learning rate at the end of the cosine decay"),
      CLOVE_NUM("warmup_frac", train.warmup_frac, "fraction of steps spent in linear warmup"),
      CLOVE_NUM("weight_decay", train.lars.weight_decay, "LARS weight decay (weights only)"),
      CLOVE_NUM("lars_momentum", train.lars.momentum, "LARS momentum"),
      CLOVE_NUM("trust_coeff", train.lars.trust_coeff, "LARS trust coefficient"),
      CLOVE_NUM("ema_start", train.ema_start, "teacher momentum at step 0"),
      CLOVE_NUM("ema_end", train.ema_end, "teacher momentum at the last step"),
      Entry{{"channels", "trunk channels per stage, comma-separated"},
            [](RunConfig& c, const std::string& v) { c.train.encoder.channels = to_list("channels", v); },
            [](const RunConfig& c) { return fmt_list(c.train.encoder.channels); }},
      Entry{{"strides", "trunk stride per stage, comma-separated"},
            [](RunConfig& c, const std::string& v) { c.train.encoder.strides = to_list("strides", v); },
            [](const RunConfig& c) { return fmt_list(c.train.encoder.strides); }},
      CLOVE_SIZE("head_hidden", train.encoder.head_hidden, "projection head hidden width"),
      CLOVE_SIZE("embed_dim", train.encoder.embed_dim, "local embedding dimension D"),
      CLOVE_NUM("bn_momentum", train.encoder.bn_momentum, "batchnorm running-stat momentum"),
      CLOVE_SIZE("heads", train.attention.n_heads, "attention heads"),
      CLOVE_SIZE("head_dim", train.attention.head_dim, "per-head width (heads * head_dim = embed_dim)"),
      CLOVE_NUM("temperature", train.attention.temperature, "attention softmax temperature"),
      CLOVE_BOOL("normalize_qk", train.attention.normalize_qk, "normalize queries and keys (false: plain MHSA)"),
      Entry{{"loss", "rank or l2"},
            [](RunConfig& c, const std::string& v) {
              if (v == "rank") c.train.loss.mode = LossMode::rank;
              else if (v == "l2") c.train.loss.mode = LossMode::l2;
              else bad("loss", v, "rank or l2");
            },
            [](const RunConfig& c) { return std::string(c.train.loss.mode == LossMode::rank ? "rank" : "l2"); }},
      CLOVE_NUM("margin", train.loss.margin, "ranking margin mu"),
      CLOVE_NUM("scale", train.loss.scale, "positive-similarity scale lambda"),
      CLOVE_SIZE("top_k", train.loss.top_k, "intra-negative pool size k"),
      Entry{{"negatives", "intra, inter or inter_avg"},
            [](RunConfig& c, const std::string& v) {
              if (v == "intra") c.train.loss.negatives = NegativeStrategy::intra;
              else if (v == "inter") c.train.loss.negatives = NegativeStrategy::inter;
              else if (v == "inter_avg") c.train.loss.negatives = NegativeStrategy::inter_avg;
              else bad("negatives", v, "intra, inter or inter_avg");
            },
            [](const RunConfig& c) {
              switch (c.train.loss.negatives) {
                case NegativeStrategy::intra: return std::string("intra");
                case NegativeStrategy::inter: return std::string("inter");
                default: return std::string("inter_avg");
              }
            }},
      CLOVE_SIZE("queue_capacity", train.queue_capacity, "negative queue length for inter strategies"),
      CLOVE_NUM("crop_min", train.augment.crop_min, "smallest crop area fraction"),
      CLOVE_NUM("crop_max", train.augment.crop_max, "largest crop area fraction"),
      CLOVE_NUM("flip_prob", train.augment.flip_prob, "horizontal flip probability"),
      CLOVE_NUM("jitter_prob", train.augment.jitter_prob, "color jitter probability"),
      CLOVE_NUM("brightness", train.augment.brightness, "brightness jitter strength"),
      CLOVE_NUM("contrast", train.augment.contrast, "contrast jitter strength"),
      CLOVE_NUM("saturation", train.augment.saturation, "saturation jitter strength"),
      CLOVE_NUM("grayscale_prob", train.augment.grayscale_prob, "grayscale probability"),
      Entry{{"view_size", "global view resolution (square)"},
            [](RunConfig& c, const std::string& v) {
              c.train.augment.out_h = c.train.augment.out_w = to_size("view_size", v);
              c.eval.views.out_h = c.eval.views.out_w = c.train.augment.out_h;
            },
            [](const RunConfig& c) { return fmt(c.train.augment.out_h); }},
      CLOVE_SIZE("local_crops", train.local_crops, "extra low-resolution views per image (0: off)"),
      CLOVE_NUM("t_pos", train.t_pos, "matching threshold"),
      Entry{{"distance_unit", "unit of t_pos: cell (cell diagonals) or canonical ([0,1] frame)"},
            [](RunConfig& c, const std::string& v) {
              if (v == "cell") c.train.distance = DistanceUnit::cell_diagonal;
              else if (v == "canonical") c.train.distance = DistanceUnit::canonical;
              else bad("distance_unit", v, "cell or canonical");
            },
            [](const RunConfig& c) {
              return std::string(c.train.distance == DistanceUnit::cell_diagonal ? "cell" : "canonical");
            }},
      CLOVE_BOOL("symmetric", train.symmetric, "use both matching directions of each view pair"),
      Entry{{"seed", "training seed (default: CLOVE_SEED or 0)"},
            [](RunConfig& c, const std::string& v) { c.train.seed = to_u64("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      CLOVE_STR("metrics", train.metrics_path, "metrics CSV path (empty: none)"),
      CLOVE_STR("checkpoint", train.checkpoint_path, "checkpoint path (empty: none)"),
      CLOVE_SIZE("checkpoint_every", train.checkpoint_every, "save every N steps (0: only at the end)"),
      CLOVE_SIZE("stop_at", train.stop_at, "stop after this many steps (0: run to completion)"),
      CLOVE_BOOL("wallclock", train.wallclock, "record elapsed time in the metrics CSV"),
      CLOVE_SIZE("corpus_train", corpus_train, "synthetic training images"),
      CLOVE_SIZE("corpus_eval", corpus_eval, "synthetic evaluation images"),
      Entry{{"corpus_seed", "seed of the synthetic corpus"},
            [](RunConfig& c, const std::string& v) { c.corpus_seed = to_u64("corpus_seed", v); },
            [](const RunConfig& c) { return std::to_string(c.corpus_seed); }},
      Entry{{"image_size", "synthetic image resolution (square)"},
            [](RunConfig& c, const std::string& v) { c.corpus.height = c.corpus.width = to_size("image_size", v); },
            [](const RunConfig& c) { return fmt(c.corpus.height); }},
      CLOVE_SIZE("corpus_min_shapes", corpus.min_shapes, "fewest shapes per image"),
      CLOVE_SIZE("corpus_max_shapes", corpus.max_shapes, "most shapes per image"),
      Entry{{"eval_seed", "seed of the evaluation views"},
            [](RunConfig& c, const std::string& v) { c.eval.seed = to_u64("eval_seed", v); },
            [](const RunConfig& c) { return std::to_string(c.eval.seed); }},
      CLOVE_NUM("eval_t_pos", eval.t_pos, "ground-truth radius for correspondence queries (cell diagonals)"),
      CLOVE_NUM("eval_crop_min", eval.views.crop_min, "smallest crop area fraction of evaluation views"),
      Entry{{"eval_features", "map used for dense retrieval: head or trunk"},
            [](RunConfig& c, const std::string& v) {
              if (v == "head") c.eval.features = FeatureLevel::head;
              else if (v == "trunk") c.eval.features = FeatureLevel::trunk;
              else bad("eval_features", v, "head or trunk");
            },
            [](const RunConfig& c) { return std::string(c.eval.features == FeatureLevel::head ? "head" : "trunk"); }},
      CLOVE_BOOL("eval_teacher", eval_teacher, "evaluate teacher (true) or student (false) features"),
      CLOVE_SIZE("probe_train", probe_train, "training images used by the linear probe"),
      CLOVE_SIZE("probe_iterations", probe.iterations, "linear probe gradient steps"),
  };
  return table;
}

const Entry& find(const std::string& key) {
  for (const auto& e : entries())
    if (e.key.name == key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) { find(key).set(cfg, value); }

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  apply_setting(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string get_setting(const RunConfig& cfg, const std::string& key) { return find(key).get(cfg); }

void apply_config_stream(RunConfig& cfg, std::istream& in, const std::string& source) {
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError(source + ":" + std::to_string(lineno) + ": repeated key '" + key + "'");
    try {
      apply_setting(cfg, key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  apply_config_stream(cfg, in, path);
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

std::uint64_t default_seed_from_env() {
  const char* s = std::getenv("CLOVE_SEED");
  if (!s || !*s) return 0;
  std::uint64_t out = 0;
  const std::string v(s);
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("CLOVE_SEED must be a non-negative integer");
  return out;
}

}  // namespace clove
