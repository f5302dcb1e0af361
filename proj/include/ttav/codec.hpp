#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ttav/autograd.hpp"
#include "ttav/parameters.hpp"
#include "ttav/rng.hpp"
#include "ttav/tensor.hpp"

// Synthetic stand-ins for the frozen audio and motion encoders. Both streams
// are linear read-outs of one shared per-frame articulation signal, so the
// oracle can always recover and compare it.
namespace ttav::codec {

enum class Modality : std::uint8_t { Audio = 0, Video = 1 };

inline constexpr std::int64_t kAudioDim = 32;
inline constexpr std::int64_t kVideoDim = 40;
inline constexpr int kFrameRate = 25;
inline constexpr int kVocab = 64;
inline constexpr std::int64_t kArticulationDim = 16;

std::int64_t modality_dim(Modality m);
const char* modality_name(Modality m);

struct SymbolScript {
  std::vector<int> symbols;
  std::vector<int> durations;  // frames per symbol, ≥ 2
  std::uint64_t seed = 0;

  std::int64_t total_frames() const;
  // Frames after padding up to a multiple of the patch size.
  std::int64_t padded_frames(std::int64_t patch) const;
  std::int64_t patches(std::int64_t patch) const { return padded_frames(patch) / patch; }
};

struct LatentStream {
  Tensor<float> frames;  // [T, d]
  Modality modality = Modality::Audio;
  int frame_rate = kFrameRate;

  std::int64_t frame_count() const { return frames.rows(); }
  std::int64_t dim() const { return frames.cols(); }
  // Throws unless d matches the modality and all values are finite.
  void validate() const;
};

struct CodecConfig {
  std::uint64_t codec_seed = 7;
  int min_duration = 2;
  int max_duration = 8;
  double coarticulation = 0.5;   // pull toward the next symbol at the end of each symbol
  double noise_std = 0.05;       // seeded articulation jitter
  double timbre_std = 0.0;       // per-script constant audio offset, off by default
  double pose_amplitude = 0.6;   // slow video drift
};

class SyntheticCodec {
 public:
  explicit SyntheticCodec(CodecConfig cfg = {});

  const CodecConfig& config() const { return cfg_; }
  int duration_of(int symbol) const;

  // Script with table durations.
  SymbolScript make_script(std::vector<int> symbols, std::uint64_t seed) const;
  // Random script whose padded length is uniform in [min_patches, max_patches].
  SymbolScript random_script(Rng& rng, std::int64_t patch, std::int64_t min_patches,
                             std::int64_t max_patches, std::uint64_t seed) const;

  // Shared articulation signal, [padded_frames, kArticulationDim].
  Eigen::MatrixXd articulation(const SymbolScript& script, std::int64_t patch) const;

  std::pair<LatentStream, LatentStream> render(const SymbolScript& script,
                                               std::int64_t patch) const;

  // Least-squares articulation estimate per frame, [T, kArticulationDim].
  Eigen::MatrixXd recover_articulation(const LatentStream& stream) const;

  const Eigen::MatrixXd& content_map(Modality m) const;  // F_a or F_v, [d, 16]
  const Eigen::MatrixXd& pseudo_inverse(Modality m) const;
  const Eigen::VectorXd& bias(Modality m) const;
  // Video frames minus bias and pose drift: exactly F_v · articulation.
  Eigen::MatrixXd video_content(const LatentStream& video, const SymbolScript& script) const;

 private:
  void validate(const SymbolScript& script) const;
  Eigen::MatrixXd pose_drift(const SymbolScript& script, std::int64_t frames) const;
  Eigen::VectorXd timbre(const SymbolScript& script) const;

  CodecConfig cfg_;
  std::vector<int> durations_;
  Eigen::MatrixXd anchors_;  // [vocab, 16]
  Eigen::MatrixXd fa_, fv_, fa_pinv_, fv_pinv_;
  Eigen::MatrixXd timbre_dirs_, pose_dirs_;  // [32, 4], [40, 4]
  Eigen::VectorXd bias_a_, bias_v_;
};

// Mean cosine similarity between the articulation recovered from each stream,
// mapped from [-1, 1] to [0, 1]. Streams must have equal frame counts.
double sync_score(const SyntheticCodec& codec, const LatentStream& audio,
                  const LatentStream& video);

// ------------------------------------------------------------ statistics

struct ModalityStats {
  std::vector<float> mean;
  std::vector<float> std;
};

struct LatentStats {
  ModalityStats audio;
  ModalityStats video;

  const ModalityStats& of(Modality m) const { return m == Modality::Audio ? audio : video; }
};

inline constexpr double kStdFloor = 1e-6;

// Population mean / σ per dimension over every frame of the given streams.
ModalityStats fit_modality_stats(std::span<const LatentStream* const> streams);
LatentStats fit_stats(std::span<const LatentStream> audio, std::span<const LatentStream> video);

LatentStream normalize(const LatentStream& stream, const LatentStats& stats);
LatentStream denormalize(const LatentStream& stream, const LatentStats& stats);

// ------------------------------------------------------------ VAE bottleneck

std::int64_t compression_ratio(std::span<const int> strides);
double latent_rate(double sample_rate, std::int64_t ratio);

inline constexpr std::int64_t kBottleneckDim = 32;

// Projection to 2·32 channels split into mean and softplus scale, plus the
// back-projection to the feature width.
void init_vae_bottleneck(ParameterSet<float>& ps, const std::string& prefix,
                         std::int64_t feature_width, Rng& rng);

template <typename T>
struct Posterior {
  ag::Var<T> mean;
  ag::Var<T> scale;
};

template <typename T>
Posterior<T> vae_posterior(Binder<T>& b, const std::string& prefix, ag::Var<T> features);
template <typename T>
ag::Var<T> vae_back_project(Binder<T>& b, const std::string& prefix, ag::Var<T> z);

// z = μ + σ ⊙ ε; σ must be strictly positive.
template <typename T>
ag::Var<T> reparameterize(ag::Var<T> mean, ag::Var<T> scale, ag::Var<T> eps);
template <typename T>
Tensor<T> reparameterize(const Tensor<T>& mean, const Tensor<T>& scale, const Tensor<T>& eps);

// mean over elements of ½(μ² + σ² − 1 − 2 ln σ).
template <typename T>
ag::Var<T> kl_penalty(ag::Var<T> mean, ag::Var<T> scale);
template <typename T>
double kl_penalty(const Tensor<T>& mean, const Tensor<T>& scale);

}  // namespace ttav::codec
