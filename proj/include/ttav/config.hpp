#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ttav/codec.hpp"
#include "ttav/nn.hpp"

namespace ttav {

enum class FusionKind : std::uint8_t { Add, InterleavedAV, InterleavedVA, Delay };

struct FusionMode {
  FusionKind kind = FusionKind::Add;
  int delay = 0;  // patches, Delay only

  static FusionMode add() { return {}; }
  static FusionMode interleaved_av() { return {FusionKind::InterleavedAV, 0}; }
  static FusionMode interleaved_va() { return {FusionKind::InterleavedVA, 0}; }
  static FusionMode delayed(int k);

  // "add", "interleaved_av", "interleaved_va", "delay:<k>"
  std::string name() const;
  static FusionMode parse(const std::string& text);

  friend bool operator==(const FusionMode&, const FusionMode&) = default;
};

enum class Task : std::uint8_t { TTS = 0, T2AV = 1 };

struct ModelConfig {
  std::int64_t patch = 4;
  std::int64_t width = 64;  // backbone width D; patch encoders match it
  int encoder_layers = 2;
  int encoder_heads = 4;
  int backbone_layers = 4;
  int backbone_heads = 4;
  int head_layers = 2;
  int head_heads = 4;
  std::int64_t head_width = 64;
  std::int64_t ff_mult = 2;
  FusionMode fusion;

  nn::TransformerConfig encoder_body() const {
    return {width, encoder_layers, encoder_heads, ff_mult * width};
  }
  nn::TransformerConfig backbone_body() const {
    return {width, backbone_layers, backbone_heads, ff_mult * width};
  }
  nn::TransformerConfig head_body() const {
    return {head_width, head_layers, head_heads, ff_mult * head_width};
  }
  void validate() const;
};

struct SamplerSettings {
  int steps = 10;
  double temperature = 0.7;
  double cfg_scale = 2.0;
  double stop_threshold = 0.5;
  int max_patches = 32;

  void validate() const;
};

struct CorpusConfig {
  std::uint64_t corpus_seed = 1;
  int t2av_scripts = 2000;
  int tts_scripts = 2000;
  int eval_scripts = 200;
  int min_patches = 3;
  int max_patches = 15;
};

struct TrainConfig {
  ModelConfig model;
  codec::CodecConfig codec;
  CorpusConfig corpus;
  SamplerSettings sampler;

  std::uint64_t seed = 1;
  double peak_lr = 1e-4;
  double warmup_fraction = 0.03;
  int batch_size = 32;
  std::int64_t total_steps = 5000;
  double lambda_video = 8.0;
  double alpha_stop = 1.0;
  double p_drop = 0.1;
  double history_noise = 0.5;  // σ of noise on teacher-forced inputs
  double context_noise = 1.0;  // extra σ on the heads' context window
  double tts_fraction = 0.5;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  int threads = 0;  // 0: hardware concurrency
  int log_every = 50;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;
  int resolved_threads() const;

  // key=value lines; round-trips through parse().
  std::string to_text() const;
  // Unknown keys, malformed values and duplicate keys raise ConfigError.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::string& path);
};

// Parses key=value lines with '#' comments into a map, rejecting duplicates.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace ttav
