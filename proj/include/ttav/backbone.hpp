#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ttav/config.hpp"
#include "ttav/nn.hpp"

// The shared causal backbone: token layout per fusion mode, the causal
// transformer over it, an incremental (cached) path for generation and the
// stop predictor.
namespace ttav::backbone {

inline const std::string kPrefix = "backbone";
inline const std::string kStopPrefix = "stop";

struct BackboneConfig {
  int vocab = codec::kVocab;
  nn::TransformerConfig body;
};

void init(ParameterSet<float>& ps, const BackboneConfig& cfg, Rng& rng);
// stop.fc1 [D, D] → GELU → stop.fc2 [D, 1]
void init_stop(ParameterSet<float>& ps, std::int64_t width, Rng& rng);

enum class Role : std::uint8_t { TaskTag, Text, Joint, Audio, Video, Pad };
const char* role_name(Role r);

enum class SourceKind : std::uint8_t { None, Tag, Text, Audio, Video, Pad };

// What one embedding term at a position is drawn from.
struct Source {
  SourceKind kind = SourceKind::None;
  std::int64_t index = 0;
};

// Pure position bookkeeping; independent of any parameter values. Every
// position's token is the sum of up to two sources.
struct LayoutPlan {
  std::int64_t text_len = 0;
  std::int64_t patches = 0;
  FusionMode mode;
  Task task = Task::T2AV;

  std::vector<Role> roles;
  std::vector<Source> first, second;
  std::vector<std::int64_t> patch_index;  // patch carried at each position, −1 for prefix
  // Hidden state at audio_from[i] conditions the audio head for patch i;
  // likewise video_from. video_from is empty for TTS.
  std::vector<std::int64_t> audio_from, video_from;
  std::vector<std::int64_t> stop_positions;
  std::vector<int> stop_labels;

  std::int64_t length() const { return static_cast<std::int64_t>(roles.size()); }
  std::int64_t prefix_length() const { return 1 + text_len; }
};

// Layout for M text symbols and N patches. Delay-k allows k ≥ N: the audio
// stream then finishes before any video enters the sequence.
LayoutPlan plan_layout(std::int64_t text_len, std::int64_t patches, FusionMode mode, Task task);

template <typename T>
struct SequenceLayout {
  LayoutPlan plan;
  ag::Var<T> tokens;  // [L, D]
};

// audio_embs / video_embs are [N, D]. For TTS the video list may be an
// invalid Var; when present it is ignored and every video term is e_pad.
template <typename T>
SequenceLayout<T> build_sequence(Binder<T>& b, const std::vector<int>& text,
                                 ag::Var<T> audio_embs, ag::Var<T> video_embs, FusionMode mode,
                                 Task task);

// Causal self-attention over the whole layout with rotary positions 0..L−1;
// returns the post-final-norm states [L, D].
template <typename T>
ag::Var<T> forward_hidden(Binder<T>& b, const BackboneConfig& cfg, ag::Var<T> tokens);

// ------------------------------------------------------------ cached path

struct KvCache {
  std::vector<nn::KvLayer<float>> layers;
  std::int64_t length = 0;
};

KvCache make_cache(const BackboneConfig& cfg);

// Feeds tokens [n, D] after the cached prefix and returns their states [n, D].
Tensor<float> incremental_forward(const ParameterSet<float>& ps, const BackboneConfig& cfg,
                                  KvCache& cache, const Tensor<float>& tokens);

// Single-position token helpers for the cached path; these reproduce the
// sums build_sequence forms.
Tensor<float> tag_token(const ParameterSet<float>& ps, Task task);
Tensor<float> text_tokens(const ParameterSet<float>& ps, const std::vector<int>& text);
std::span<const float> pad_embedding(const ParameterSet<float>& ps);

// ------------------------------------------------------------ stop predictor

template <typename T>
ag::Var<T> stop_logits(Binder<T>& b, ag::Var<T> hidden);  // [n, D] → [n, 1]

double stop_logit(const ParameterSet<float>& ps, std::span<const float> h);
double stop_probability(const ParameterSet<float>& ps, std::span<const float> h);

// (#continue)/(#stop); throws DomainError when there is no stop label.
double stop_weight(std::span<const int> labels);

// Weighted BCE on probabilities clamped to [1e-7, 1 − 1e-7], stop class
// weighted by the ratio of `labels` unless an explicit weight is given.
double stop_loss(std::span<const double> probs, std::span<const int> labels);
double stop_loss(std::span<const double> probs, std::span<const int> labels, double weight);

// Same objective from logits, differentiable: Σ_i [w·y·softplus(−x) +
// (1−y)·softplus(x)] / denom.
template <typename T>
ag::Var<T> stop_loss_from_logits(ag::Var<T> logits, std::span<const int> labels, double weight,
                                 double denom);

}  // namespace ttav::backbone
