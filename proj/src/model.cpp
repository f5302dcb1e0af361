#include "ttav/model.hpp"

namespace ttav {

ModelParts model_parts(const ModelConfig& cfg) {
  ModelParts p;
  p.audio_encoder = {codec::kAudioDim, cfg.patch, cfg.encoder_body()};
  p.video_encoder = {codec::kVideoDim, cfg.patch, cfg.encoder_body()};
  p.backbone = {codec::kVocab, cfg.backbone_body()};
  p.audio_head = {codec::kAudioDim, cfg.patch, cfg.width, codec::kAudioDim, cfg.head_body()};
  p.video_head = {codec::kVideoDim, cfg.patch, cfg.width, codec::kVideoDim, cfg.head_body()};
  return p;
}

codec::LatentStats identity_stats() {
  codec::LatentStats s;
  s.audio = {std::vector<float>(codec::kAudioDim, 0.0f), std::vector<float>(codec::kAudioDim, 1.0f)};
  s.video = {std::vector<float>(codec::kVideoDim, 0.0f), std::vector<float>(codec::kVideoDim, 1.0f)};
  return s;
}

Model init_model(const TrainConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.params.rng_seed = cfg.seed;
  m.stats = identity_stats();
  const auto parts = m.parts();
  const Rng root = Rng(cfg.seed).fork("init");
  auto stream = [&](const char* tag) { return root.fork(tag); };
  Rng r = stream(kAudioEncoder.c_str());
  patch::init(m.params, kAudioEncoder, parts.audio_encoder, r);
  r = stream(kVideoEncoder.c_str());
  patch::init(m.params, kVideoEncoder, parts.video_encoder, r);
  r = stream("backbone");
  backbone::init(m.params, parts.backbone, r);
  r = stream("stop");
  backbone::init_stop(m.params, cfg.model.width, r);
  r = stream(kAudioHead.c_str());
  head::init(m.params, kAudioHead, parts.audio_head, r);
  r = stream(kVideoHead.c_str());
  head::init(m.params, kVideoHead, parts.video_head, r);
  return m;
}

}  // namespace ttav
