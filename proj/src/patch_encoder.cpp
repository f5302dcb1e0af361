#include "ttav/patch_encoder.hpp"

namespace ttav::patch {

void init(ParameterSet<float>& ps, const std::string& prefix, const PatchEncoderConfig& cfg,
          Rng& rng) {
  const auto width = cfg.body.width;
  init::linear(ps, prefix + ".in_proj", cfg.frame_dim, width, rng);
  init::embedding(ps, prefix + ".cls", 1, width, rng);
  init::embedding(ps, prefix + ".pos", cfg.patch + 1, width, rng);
  nn::init_transformer(ps, prefix + ".body", cfg.body, rng);
  init::layer_norm(ps, prefix + ".final_ln", width);
}

template <typename T>
ag::Var<T> encode_patches(Binder<T>& b, const std::string& prefix, const PatchEncoderConfig& cfg,
                          ag::Var<T> frames) {
  const auto P = cfg.patch;
  if (frames.cols() != cfg.frame_dim) {
    throw ShapeError(prefix + ": frame width " + std::to_string(frames.cols()) + ", expected " +
                     std::to_string(cfg.frame_dim));
  }
  if (frames.rows() == 0 || frames.rows() % P != 0) {
    throw ShapeError(prefix + ": " + std::to_string(frames.rows()) +
                     " frames is not a positive multiple of the patch size");
  }
  const auto n = frames.rows() / P;
  const auto slot = P + 1;
  auto projected = nn::linear(b, prefix + ".in_proj", frames);

  // Row layout per patch: CLS then its P frames. Index n·P is the CLS row
  // appended after the projected frames.
  auto table = ag::concat_rows<T>({projected, b(prefix + ".cls")});
  std::vector<std::int64_t> order, pos_index;
  order.reserve(static_cast<std::size_t>(n * slot));
  pos_index.reserve(order.capacity());
  for (std::int64_t i = 0; i < n; ++i) {
    order.push_back(n * P);
    for (std::int64_t f = 0; f < P; ++f) order.push_back(i * P + f);
    for (std::int64_t s = 0; s < slot; ++s) pos_index.push_back(s);
  }
  auto x = ag::add(ag::gather_rows(table, std::move(order)),
                   ag::gather_rows(b(prefix + ".pos"), std::move(pos_index)));
  auto spec = ag::AttentionSpec::uniform(n, slot, cfg.body.heads, false);
  x = nn::transformer(b, prefix + ".body", cfg.body, x, spec);
  std::vector<std::int64_t> cls_rows;
  for (std::int64_t i = 0; i < n; ++i) cls_rows.push_back(i * slot);
  return nn::layer_norm(b, prefix + ".final_ln", ag::gather_rows(x, std::move(cls_rows)));
}

Tensor<float> encode_frames(const ParameterSet<float>& ps, const std::string& prefix,
                            const PatchEncoderConfig& cfg, const Tensor<float>& frames) {
  ag::Graph<float> g(false);
  Binder<float> b(g, ps, false);
  auto out = encode_patches(b, prefix, cfg, g.constant(frames));
  return out.tensor();
}

Tensor<float> encode_patch(const ParameterSet<float>& ps, const std::string& prefix,
                           const PatchEncoderConfig& cfg, const Tensor<float>& frames) {
  if (frames.rows() != cfg.patch) {
    throw ShapeError(prefix + ": a patch holds exactly " + std::to_string(cfg.patch) + " frames");
  }
  auto out = encode_frames(ps, prefix, cfg, frames);
  return out.reshaped({cfg.body.width});
}

Tensor<float> encode_stream(const ParameterSet<float>& ps, const std::string& prefix,
                            const PatchEncoderConfig& cfg, const codec::LatentStream& stream) {
  if (stream.frame_count() % cfg.patch != 0) {
    throw ShapeError("stream of " + std::to_string(stream.frame_count()) +
                     " frames is not a multiple of the patch size");
  }
  return encode_frames(ps, prefix, cfg, stream.frames);
}

template ag::Var<float> encode_patches(Binder<float>&, const std::string&,
                                       const PatchEncoderConfig&, ag::Var<float>);
template ag::Var<double> encode_patches(Binder<double>&, const std::string&,
                                        const PatchEncoderConfig&, ag::Var<double>);

}  // namespace ttav::patch
