#pragma once

#include <cstdint>
#include <string>

#include "ttav/backbone.hpp"
#include "ttav/codec.hpp"
#include "ttav/config.hpp"
#include "ttav/diffusion_head.hpp"
#include "ttav/patch_encoder.hpp"

namespace ttav {

inline const std::string kAudioEncoder = "audio_encoder";
inline const std::string kVideoEncoder = "video_encoder";
inline const std::string kAudioHead = "audio_head";
inline const std::string kVideoHead = "video_head";

struct ModelParts {
  patch::PatchEncoderConfig audio_encoder, video_encoder;
  backbone::BackboneConfig backbone;
  head::HeadConfig audio_head, video_head;
};

ModelParts model_parts(const ModelConfig& cfg);

struct Model {
  TrainConfig config;
  ParameterSet<float> params;
  codec::LatentStats stats;
  std::int64_t step = 0;

  ModelParts parts() const { return model_parts(config.model); }
};

// Fresh parameters from config.seed; each module draws from its own stream.
// Stats default to identity until fitted.
Model init_model(const TrainConfig& cfg);

codec::LatentStats identity_stats();

}  // namespace ttav
