#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "clove/augment.hpp"
#include "clove/checkpoint.hpp"
#include "clove/encoder.hpp"
#include "clove/matching.hpp"
#include "clove/objective.hpp"
#include "clove/optim.hpp"
#include "clove/predictor.hpp"

namespace clove {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 4.0;
  double lr_min = 0.0;
  double warmup_frac = 0.05;
  LarsConfig lars;
  double ema_start = 0.99;
  double ema_end = 1.0;

  EncoderConfig encoder;
  AttentionConfig attention;
  LossConfig loss;
  AugmentProfile augment;
  /// Extra low-resolution views per image; 0 disables multi-crop.
  std::size_t local_crops = 0;
  double t_pos = 0.7;
  DistanceUnit distance = DistanceUnit::cell_diagonal;
  /// Both directions of every view pair contribute (u -> v and v -> u).
  bool symmetric = true;
  std::size_t queue_capacity = 4096;

  std::uint64_t seed = 0;
  std::string metrics_path;
  std::string checkpoint_path;
  /// Save every N steps (0: only at the end).
  std::size_t checkpoint_every = 0;
  /// Stop early after this many completed steps (0: run to `steps`).
  std::size_t stop_at = 0;
  /// Record real elapsed time in the metrics CSV; off keeps the file
  /// reproducible byte for byte.
  bool wallclock = false;

  std::size_t warmup_steps() const;
  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;  // completed updates after this step
  double loss = 0.0;
  double lr = 0.0;
  double alpha = 0.0;
  LossDiagnostics diag;
  bool skipped = false;
  double wallclock_ms = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,loss,lr,alpha,n_matches,sigma_pos,sigma_neg,hinge_active_frac,wallclock_ms";
std::string metrics_row(const StepMetrics& m);

struct TrainState {
  Encoder<float> student;
  Encoder<float> teacher;
  Predictor<float> predictor;
  LarsState<float> lars;
  std::optional<NegativeQueue<float>> queue;
  std::size_t step = 0;

  /// Student then predictor parameters, the order LARS slots follow.
  std::vector<NamedParam<float>*> trainable();
  CheckpointFile to_checkpoint() const;
  /// Replaces every tensor from `file`; validates everything first so a bad
  /// file leaves the state untouched.
  void restore(const CheckpointFile& file);
};

/// Fresh state: student and predictor drawn from (seed), teacher a copy.
TrainState init_state(const TrainConfig& cfg);

/// Views of one image for a training step: globals first, then locals.
std::vector<ViewRecord> sample_training_views(const Tensor<float>& image, const TrainConfig& cfg, Rng& rng);

/// One optimizer update and one EMA update on `images` (the batch).
StepMetrics train_step(TrainState& state, const TrainConfig& cfg, std::span<const Tensor<float>* const> images);

/// Corpus indices used for the batch of a given step.
std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t step, std::size_t corpus_size);

void save_checkpoint(const TrainState& state, const std::string& path);
/// Throws DataError (state untouched) on any mismatch.
void load_checkpoint(TrainState& state, const std::string& path);

/// Runs (or resumes) training to cfg.steps or cfg.stop_at, appending rows to
/// cfg.metrics_path and saving to cfg.checkpoint_path when set. Returns the
/// metrics of the steps run by this call.
std::vector<StepMetrics> train(TrainState& state, const TrainConfig& cfg, std::span<const Tensor<float>> corpus,
                               std::ostream* log = nullptr);

}  // namespace clove
