#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ttav/model.hpp"
#include "ttav/optim.hpp"

namespace ttav {

// ------------------------------------------------------------ corpus

struct CorpusItem {
  codec::SymbolScript script;
  codec::LatentStream audio;
  codec::LatentStream video;  // empty frames for TTS-pool items
};

struct Corpus {
  std::vector<CorpusItem> t2av;
  std::vector<CorpusItem> tts;
  std::vector<CorpusItem> eval;
  codec::LatentStats stats;  // fitted on the two training pools
};

// Renders the paired pool, the audio-only pool and the held-out set. Script
// seeds come from disjoint per-pool streams of corpus.seed.
Corpus build_corpus(const TrainConfig& cfg);
std::vector<CorpusItem> render_scripts(const codec::SyntheticCodec& codec, const TrainConfig& cfg,
                                       const char* pool, int count, bool with_video);

// ------------------------------------------------------------ batches

struct Example {
  codec::SymbolScript script;
  Task task = Task::T2AV;
  Tensor<float> audio;  // normalized [N·P, 32]
  Tensor<float> video;  // normalized [N·P, 40], empty for TTS
  std::vector<int> stop_labels;

  std::int64_t patches(std::int64_t patch) const { return audio.rows() / patch; }
};

struct TrainingBatch {
  std::vector<Example> examples;

  std::int64_t count(Task t) const;
};

Example make_example(const CorpusItem& item, Task task, const codec::LatentStats& stats,
                     const ModelConfig& model);

// floor(B·f) TTS examples plus one more with probability frac(B·f); the rest
// T2AV. T2AV examples come first.
TrainingBatch assemble_batch(const Corpus& corpus, const TrainConfig& cfg, Rng& rng);

// ------------------------------------------------------------ losses

struct LossComponents {
  double audio = 0.0;
  double video = 0.0;
  double stop = 0.0;
  double total = 0.0;
};

double combine_losses(double audio, double video, double stop, double lambda, double alpha);

// What one head trains on for one example. Row block i of x0 is patch i, the
// context block i is patch i−1 (zeros for i = 0), and `from[i]` is the layout
// position whose hidden state conditions it. Context is taken from `history`
// when given (same shape as frames), else from frames.
template <typename T>
struct HeadInputs {
  Tensor<T> x0;
  Tensor<T> context;
  Tensor<T> global;  // one row per patch
  std::vector<std::int64_t> from;
  std::vector<bool> dropped;
};

template <typename T>
HeadInputs<T> head_inputs(const Tensor<float>& frames, std::int64_t patch, codec::Modality m,
                          const std::vector<std::int64_t>& from, double p_drop, Rng rng,
                          const Tensor<float>* history = nullptr);

// frames + N(0, σ²) per element; the teacher-forced inputs seen by the patch
// encoders and head contexts during training. σ = 0 returns frames.
Tensor<float> corrupt_history(const Tensor<float>& frames, double sigma, Rng rng);

template <typename T>
struct BatchLoss {
  LossComponents components;
  GradientMap<T> grads;  // empty unless requested
};

// Per-example teacher-forced graphs, run in parallel; gradients are summed in
// example order. Audio and video losses are per-element means over the
// batch's head positions, the stop loss a mean over its stop labels.
template <typename T>
BatchLoss<T> batch_loss(const ParameterSet<T>& params, const TrainConfig& cfg,
                        const TrainingBatch& batch, const Rng& rng, bool with_grads, int threads);

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0.0;
  LossComponents loss;
  double grad_norm = 0.0;
};

StepMetrics train_step(Model& model, OptimizerState<float>& opt, const TrainingBatch& batch,
                       std::int64_t step, const Rng& rng);

using MetricsSink = std::function<void(const StepMetrics&)>;
using StepHook = std::function<void(const Model&, const OptimizerState<float>&)>;

// Runs steps [model.step, config.total_steps). The hook fires every
// checkpoint_every steps when set.
void train(Model& model, OptimizerState<float>& opt, const Corpus& corpus,
           const MetricsSink& sink = {}, const StepHook& hook = {});

std::string metrics_json(const StepMetrics& m);

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure by index.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn);

}  // namespace ttav
