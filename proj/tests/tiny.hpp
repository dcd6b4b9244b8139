#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "clove/evalkit.hpp"
#include "clove/trainer.hpp"

namespace clove::testing {

inline TrainConfig tiny_train(std::size_t steps = 6) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.batch = 4;
  cfg.encoder.channels = {8, 8, 8};
  cfg.encoder.strides = {2, 2, 2};
  cfg.encoder.head_hidden = 16;
  cfg.encoder.embed_dim = 16;
  cfg.attention.n_heads = 2;
  cfg.attention.head_dim = 8;
  cfg.augment.crop_min = 0.3;
  cfg.queue_capacity = 32;
  cfg.seed = 11;
  return cfg;
}

inline std::vector<Tensor<float>> tiny_corpus(std::size_t n = 16) {
  return corpus_images(generate_corpus(n, 5));
}

/// Fresh scratch directory, removed on destruction.
struct ScratchDir {
  std::filesystem::path path;
  explicit ScratchDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("clove_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace clove::testing
