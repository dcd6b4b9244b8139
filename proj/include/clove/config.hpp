#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <utility>
#include <vector>

#include "clove/evalkit.hpp"
#include "clove/trainer.hpp"

namespace clove {

/// Everything a run needs: training, corpus and evaluation settings.
struct RunConfig {
  TrainConfig train;

  CorpusProfile corpus;
  std::size_t corpus_train = 2048;
  std::size_t corpus_eval = 256;
  std::uint64_t corpus_seed = 1;

  CorrespondenceConfig eval;
  /// Evaluate teacher features (true) or student features.
  bool eval_teacher = true;
  std::size_t probe_train = 512;
  ProbeConfig probe;

  RunConfig();
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// Every accepted key with a one-line description, in dump order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key; throws ConfigError naming the key on unknown keys or bad values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
/// "key=value" form of apply_setting.
void apply_override(RunConfig& cfg, const std::string& assignment);
std::string get_setting(const RunConfig& cfg, const std::string& key);

/// Lines of `key = value`; '#' starts a comment. Repeated keys are an error.
void apply_config_stream(RunConfig& cfg, std::istream& in, const std::string& source);
void apply_config_file(RunConfig& cfg, const std::string& path);

/// Effective configuration, one `key = value` line per key; feeding it back
/// through apply_config_stream reproduces `cfg` exactly.
std::string dump_config(const RunConfig& cfg);

/// Default seed from CLOVE_SEED, 0 when unset; a malformed value is a ConfigError.
std::uint64_t default_seed_from_env();

}  // namespace clove
