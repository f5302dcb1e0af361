#pragma once

#include <cstdint>
#include <string>

#include "ttav/codec.hpp"
#include "ttav/nn.hpp"

// Compresses P frames of one modality into one backbone-width token: project,
// prepend a CLS row, add learned slot positions, run bidirectional layers and
// read the CLS output.
namespace ttav::patch {

struct PatchEncoderConfig {
  std::int64_t frame_dim = codec::kAudioDim;
  std::int64_t patch = 4;
  nn::TransformerConfig body;
};

// Parameters: in_proj, cls [1, D], pos [P+1, D], body.layers.*, final_ln.
void init(ParameterSet<float>& ps, const std::string& prefix, const PatchEncoderConfig& cfg,
          Rng& rng);

// frames [N·P, d] → embeddings [N, D]; patches never attend to each other.
template <typename T>
ag::Var<T> encode_patches(Binder<T>& b, const std::string& prefix, const PatchEncoderConfig& cfg,
                          ag::Var<T> frames);

// Inference helpers on plain tensors.
Tensor<float> encode_patch(const ParameterSet<float>& ps, const std::string& prefix,
                           const PatchEncoderConfig& cfg, const Tensor<float>& frames);
Tensor<float> encode_stream(const ParameterSet<float>& ps, const std::string& prefix,
                            const PatchEncoderConfig& cfg, const codec::LatentStream& stream);
Tensor<float> encode_frames(const ParameterSet<float>& ps, const std::string& prefix,
                            const PatchEncoderConfig& cfg, const Tensor<float>& frames);

}  // namespace ttav::patch
