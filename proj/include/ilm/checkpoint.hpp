#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/model.hpp"

namespace ilm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointFormatError : public IoError {
 public:
  using IoError::IoError;
};

class CheckpointVersionError : public CheckpointFormatError {
 public:
  using CheckpointFormatError::CheckpointFormatError;
};

class CheckpointTruncatedError : public CheckpointFormatError {
 public:
  using CheckpointFormatError::CheckpointFormatError;
};

/// Raised when a checkpoint's variant or tensor shapes do not match what
/// the caller expects.
class CheckpointShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// AdamW moments plus the number of completed updates.
struct OptimizerState {
  std::uint64_t step = 0;
  ModelWeights<float> m;
  ModelWeights<float> v;
};

struct Checkpoint {
  ModelWeights<float> weights;
  std::vector<std::string> vocab;
  std::optional<OptimizerState> optimizer;
  // Free-form run metadata (training config etc.).
  nlohmann::json meta = nlohmann::json::object();
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// `expect`, when given, must match the stored variant and every tensor
/// shape; mismatch raises CheckpointShapeError.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expect = std::nullopt);

}  // namespace ilm
