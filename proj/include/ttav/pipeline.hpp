#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ttav/trainer.hpp"

namespace ttav {

enum class GenMode : std::uint8_t { T2AV, A2V, V2A };
std::string gen_mode_name(GenMode m);
GenMode parse_gen_mode(const std::string& text);

// Identity references for the heads' global conditions, unnormalized: the
// mean of a reference audio patch and a reference video frame. Missing
// references fall back to the corpus mean.
struct References {
  std::optional<std::vector<float>> audio;  // [32]
  std::optional<std::vector<float>> video;  // [40]
};

std::vector<float> audio_reference(const codec::LatentStream& audio, std::int64_t patch);
std::vector<float> video_reference(const codec::LatentStream& video);
References references_from(const codec::LatentStream& audio, const codec::LatentStream& video,
                           std::int64_t patch);

struct GenerationRequest {
  GenMode mode = GenMode::T2AV;
  codec::SymbolScript script;
  std::optional<codec::LatentStream> cond;  // audio for A2V, video for V2A
  References refs;
  SamplerSettings sampler;
  std::uint64_t seed = 0;
};

struct GenerationResult {
  codec::LatentStream audio, video;       // denormalized
  Tensor<float> audio_norm, video_norm;   // normalized latents
  std::int64_t patches = 0;
  std::vector<double> stop_probs;
  double seconds = 0.0;
  std::int64_t head_evaluations = 0;
  // Hidden state that conditioned each generated or passed-through patch.
  std::vector<Tensor<float>> audio_states, video_states;
};

// Rejects InterleavedAV for V2A and InterleavedVA for A2V.
void check_mode_support(FusionMode fusion, GenMode mode);

GenerationResult generate(const Model& model, const GenerationRequest& request);

struct EvalRow {
  std::int64_t index = 0;
  std::uint64_t script_seed = 0;
  std::int64_t oracle_patches = 0;
  std::int64_t generated_patches = 0;
  std::int64_t length_error = 0;
  double audio_mse = 0.0;
  double video_mse = 0.0;
  double sync = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double median = 0.0;
};

struct MetricsReport {
  GenMode mode = GenMode::T2AV;
  std::vector<EvalRow> rows;

  Aggregate audio_mse() const;
  Aggregate video_mse() const;
  Aggregate sync() const;
  Aggregate length_error() const;
  double length_within(std::int64_t patches) const;  // fraction with error ≤ patches
  double length_spearman() const;
};

Aggregate aggregate(std::vector<double> values);
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Mean squared error over the overlapping frames.
double overlap_mse(const Tensor<float>& a, const Tensor<float>& b);

// Runs `mode` on every item with per-item seeds derived from `seed`.
MetricsReport evaluate(const Model& model, const std::vector<CorpusItem>& items, GenMode mode,
                       const SamplerSettings& sampler, std::uint64_t seed, int threads);

void write_report_csv(std::ostream& out, const MetricsReport& report);
void write_summary_csv(std::ostream& out, const std::vector<MetricsReport>& reports,
                       const std::vector<std::string>& labels);

// ------------------------------------------------------------ ablation

struct AblationRow {
  std::string mode;
  std::string task;
  int seeds = 0;
  double sync = 0.0;
  double audio_mse = 0.0;
  double video_mse = 0.0;
  double length_error = 0.0;
  bool complete = true;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::string> failures;
  std::vector<std::string> ordering_violations;
};

using TrainedHook = std::function<void(const std::string& mode, std::uint64_t seed, const Model&)>;

// One model per (mode, seed) on the same corpus; every mode is evaluated on
// T2AV and Delay modes additionally on A2V. The training seed replaces
// config.seed; generation seeds follow it.
AblationResult run_ablation(const std::vector<FusionMode>& modes, const TrainConfig& shared,
                            const std::vector<std::uint64_t>& seeds, const Corpus& corpus,
                            const TrainedHook& on_trained = {});

void write_ablation_csv(std::ostream& out, const AblationResult& result);

// Soft ordering checks: add ≥ interleaved_av > delay:1 > delay:3 on T2AV sync
// and delay:3 ≥ delay:1 on A2V sync, for whichever of those rows exist.
std::vector<std::string> ordering_violations(const std::vector<AblationRow>& rows);

}  // namespace ttav
