#pragma once

#include <string>
#include <vector>

#include "mtaf/generator.hpp"
#include "mtaf/model.hpp"
#include "mtaf/trainer.hpp"

namespace mtaf::cli {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct ExperimentConfig {
  std::string rdg_path;
  std::string ed_path;
  std::string ed_manifest_path;
  size_t max_vocab = 2000;
  model::ModelConfig model;
  trainer::TrainConfig train;
  gen::DecodeConfig decode;
  size_t scenarios_per_split = 3;  // seen and unseen counts for evaluation
  size_t samples_per_context = 5;
  uint64_t split_seed = 0;
  std::string model_label;  // provenance; defaults to the variant name
  std::string data_label;   // provenance; defaults to the joined phase plan

  static ExperimentConfig from_file(const std::string& path);
  std::string canonical_json() const;
  uint64_t hash() const;
  void validate_paths() const;
};

int run(int argc, const char* const* argv);

}  // namespace mtaf::cli
