#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ttav/model.hpp"
#include "ttav/optim.hpp"

// Checkpoint files, all integers little-endian:
//   "TTAV" | version u16 | config length u32 | config text (UTF-8, key=value)
//   | tensor count u32 | per tensor: name length u16, name, rank u8,
//   rank × u32 extents, float32 payload.
// Besides the parameters, reserved names carry the normalization statistics
// (__stats.*), optimizer moments (__optim.m.*, __optim.v.*) and the step
// counters (__meta.step, __optim.step) as four 16-bit chunks.
namespace ttav::ckpt {

inline constexpr std::uint16_t kVersion = 1;

struct Checkpoint {
  Model model;
  OptimizerState<float> optimizer;
};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

std::vector<std::uint8_t> encode(const Model& model, const OptimizerState<float>* optimizer);
Checkpoint decode(const std::vector<std::uint8_t>& bytes);

void save(const std::filesystem::path& path, const Model& model,
          const OptimizerState<float>* optimizer = nullptr);
Checkpoint load(const std::filesystem::path& path);
// Also requires the stored model configuration to equal `expected`.
Checkpoint load(const std::filesystem::path& path, const ModelConfig& expected);

struct Header {
  std::uint16_t version = 0;
  std::string config_text;
  std::int64_t step = 0;
  std::int64_t parameter_count = 0;  // scalar values over model parameters
  std::int64_t parameter_tensors = 0;
  std::int64_t tensors = 0;          // every stored tensor
};

Header inspect(const std::filesystem::path& path);

bool same_model_config(const ModelConfig& a, const ModelConfig& b);

}  // namespace ttav::ckpt
