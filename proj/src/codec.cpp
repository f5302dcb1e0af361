#include "ttav/codec.hpp"

#include <Eigen/Dense>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace ttav::codec {
namespace {

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = std * rng.normal();
  }
  return m;
}

Eigen::MatrixXd random_orthogonal(Rng& rng, Eigen::Index n) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(rng, n, n));
  Eigen::MatrixXd q = qr.householderQ();
  // Fix column signs so the factorisation is unique.
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

}  // namespace

std::int64_t modality_dim(Modality m) { return m == Modality::Audio ? kAudioDim : kVideoDim; }

const char* modality_name(Modality m) { return m == Modality::Audio ? "audio" : "video"; }

std::int64_t SymbolScript::total_frames() const {
  std::int64_t n = 0;
  for (int d : durations) n += d;
  return n;
}

std::int64_t SymbolScript::padded_frames(std::int64_t patch) const {
  const auto t = total_frames();
  return (t + patch - 1) / patch * patch;
}

void LatentStream::validate() const {
  if (frames.rank() != 2) throw ShapeError("latent stream must be a [T, d] matrix");
  if (dim() != modality_dim(modality)) {
    throw ShapeError(std::string(modality_name(modality)) + " stream must have " +
                     std::to_string(modality_dim(modality)) + " dims, got " +
                     std::to_string(dim()));
  }
  frames.require_finite("latent stream");
}

SyntheticCodec::SyntheticCodec(CodecConfig cfg) : cfg_(cfg) {
  if (cfg_.min_duration < 2 || cfg_.max_duration < cfg_.min_duration) {
    throw ConfigError("codec durations must satisfy 2 ≤ min ≤ max");
  }
  Rng root(cfg_.codec_seed);
  Rng dur_rng = root.fork("durations");
  durations_.resize(kVocab);
  for (auto& d : durations_) {
    d = static_cast<int>(dur_rng.uniform_int(cfg_.min_duration, cfg_.max_duration));
  }
  Rng anchor_rng = root.fork("anchors");
  anchors_ = gaussian(anchor_rng, kVocab, kArticulationDim);

  auto build = [&](std::string_view tag, Eigen::Index d, Eigen::MatrixXd& f,
                   Eigen::MatrixXd& extra) {
    Rng r = root.fork(tag);
    Eigen::MatrixXd q = random_orthogonal(r, d);
    Eigen::MatrixXd mix = random_orthogonal(r, kArticulationDim);
    Eigen::VectorXd scales(kArticulationDim);
    for (Eigen::Index i = 0; i < kArticulationDim; ++i) scales(i) = 0.5 + r.uniform();
    f = q.leftCols(kArticulationDim) * mix * scales.asDiagonal();
    extra = q.middleCols(kArticulationDim, 4);
  };
  build("audio_map", kAudioDim, fa_, timbre_dirs_);
  build("video_map", kVideoDim, fv_, pose_dirs_);
  fa_pinv_ = fa_.completeOrthogonalDecomposition().pseudoInverse();
  fv_pinv_ = fv_.completeOrthogonalDecomposition().pseudoInverse();
  Rng bias_rng = root.fork("bias");
  bias_a_ = gaussian(bias_rng, kAudioDim, 1);
  bias_v_ = gaussian(bias_rng, kVideoDim, 1);
}

int SyntheticCodec::duration_of(int symbol) const {
  if (symbol < 0 || symbol >= kVocab) throw DomainError("unknown symbol " + std::to_string(symbol));
  return durations_[static_cast<std::size_t>(symbol)];
}

SymbolScript SyntheticCodec::make_script(std::vector<int> symbols, std::uint64_t seed) const {
  SymbolScript s;
  s.seed = seed;
  for (int sym : symbols) s.durations.push_back(duration_of(sym));
  s.symbols = std::move(symbols);
  return s;
}

SymbolScript SyntheticCodec::random_script(Rng& rng, std::int64_t patch, std::int64_t min_patches,
                                           std::int64_t max_patches, std::uint64_t seed) const {
  if (min_patches < 1 || max_patches < min_patches) throw ConfigError("bad clip length range");
  const std::int64_t target = patch * rng.uniform_int(min_patches, max_patches);
  std::vector<int> symbols;
  std::int64_t frames = 0;
  std::vector<int> fitting;
  while (true) {
    fitting.clear();
    for (int s = 0; s < kVocab; ++s) {
      if (frames + durations_[static_cast<std::size_t>(s)] <= target) fitting.push_back(s);
    }
    if (fitting.empty()) break;
    int s = fitting[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(fitting.size()) - 1))];
    symbols.push_back(s);
    frames += durations_[static_cast<std::size_t>(s)];
  }
  return make_script(std::move(symbols), seed);
}

void SyntheticCodec::validate(const SymbolScript& script) const {
  if (script.symbols.empty()) throw DomainError("empty script");
  if (script.symbols.size() != script.durations.size()) {
    throw ShapeError("script symbol/duration count mismatch");
  }
  for (std::size_t i = 0; i < script.symbols.size(); ++i) {
    if (script.symbols[i] < 0 || script.symbols[i] >= kVocab) {
      throw DomainError("unknown symbol " + std::to_string(script.symbols[i]));
    }
    if (script.durations[i] < 2) throw DomainError("symbol duration must be at least 2 frames");
  }
}

Eigen::MatrixXd SyntheticCodec::articulation(const SymbolScript& script,
                                             std::int64_t patch) const {
  validate(script);
  const auto total = script.total_frames();
  const auto padded = script.padded_frames(patch);
  Eigen::MatrixXd art(padded, kArticulationDim);
  Rng noise = Rng(script.seed).fork("noise");
  std::int64_t t = 0;
  for (std::size_t k = 0; k < script.symbols.size(); ++k) {
    const auto cur = anchors_.row(script.symbols[k]);
    const auto nxt = anchors_.row(script.symbols[std::min(k + 1, script.symbols.size() - 1)]);
    const int len = script.durations[k];
    for (int j = 0; j < len; ++j, ++t) {
      const double w = cfg_.coarticulation * smoothstep((j + 0.5) / len);
      art.row(t) = (1.0 - w) * cur + w * nxt;
      for (Eigen::Index c = 0; c < kArticulationDim; ++c) art(t, c) += cfg_.noise_std * noise.normal();
    }
  }
  for (; t < padded; ++t) art.row(t) = art.row(total - 1);
  return art;
}

Eigen::MatrixXd SyntheticCodec::pose_drift(const SymbolScript& script, std::int64_t frames) const {
  Rng r = Rng(script.seed).fork("pose");
  Eigen::MatrixXd pose(frames, 4);
  for (int c = 0; c < 4; ++c) {
    const double freq = 0.15 + 0.35 * r.uniform();
    const double phase = 2.0 * std::numbers::pi * r.uniform();
    const double amp = cfg_.pose_amplitude * (0.5 + 0.5 * r.uniform());
    for (std::int64_t t = 0; t < frames; ++t) {
      pose(t, c) = amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) /
                                      kFrameRate + phase);
    }
  }
  return pose;
}

Eigen::VectorXd SyntheticCodec::timbre(const SymbolScript& script) const {
  Rng r = Rng(script.seed).fork("timbre");
  Eigen::VectorXd c(4);
  for (int i = 0; i < 4; ++i) c(i) = cfg_.timbre_std * r.normal();
  return timbre_dirs_ * c;
}

std::pair<LatentStream, LatentStream> SyntheticCodec::render(const SymbolScript& script,
                                                             std::int64_t patch) const {
  const Eigen::MatrixXd art = articulation(script, patch);
  const auto frames = art.rows();
  const Eigen::MatrixXd pose = pose_drift(script, frames);
  const Eigen::VectorXd offset_a = timbre(script) + bias_a_;
  LatentStream audio{Tensor<float>({frames, kAudioDim}), Modality::Audio, kFrameRate};
  LatentStream video{Tensor<float>({frames, kVideoDim}), Modality::Video, kFrameRate};
  for (std::int64_t t = 0; t < frames; ++t) {
    Eigen::VectorXd a = fa_ * art.row(t).transpose() + offset_a;
    Eigen::VectorXd v = fv_ * art.row(t).transpose() + pose_dirs_ * pose.row(t).transpose() + bias_v_;
    for (std::int64_t c = 0; c < kAudioDim; ++c) audio.frames.at(t, c) = static_cast<float>(a(c));
    for (std::int64_t c = 0; c < kVideoDim; ++c) video.frames.at(t, c) = static_cast<float>(v(c));
  }
  return {std::move(audio), std::move(video)};
}

const Eigen::MatrixXd& SyntheticCodec::content_map(Modality m) const {
  return m == Modality::Audio ? fa_ : fv_;
}
const Eigen::MatrixXd& SyntheticCodec::pseudo_inverse(Modality m) const {
  return m == Modality::Audio ? fa_pinv_ : fv_pinv_;
}
const Eigen::VectorXd& SyntheticCodec::bias(Modality m) const {
  return m == Modality::Audio ? bias_a_ : bias_v_;
}

Eigen::MatrixXd SyntheticCodec::recover_articulation(const LatentStream& stream) const {
  stream.validate();
  const auto& pinv = pseudo_inverse(stream.modality);
  const auto& b = bias(stream.modality);
  Eigen::MatrixXd out(stream.frame_count(), kArticulationDim);
  Eigen::VectorXd x(stream.dim());
  for (std::int64_t t = 0; t < stream.frame_count(); ++t) {
    for (std::int64_t c = 0; c < stream.dim(); ++c) x(c) = stream.frames.at(t, c);
    out.row(t) = (pinv * (x - b)).transpose();
  }
  return out;
}

Eigen::MatrixXd SyntheticCodec::video_content(const LatentStream& video,
                                              const SymbolScript& script) const {
  video.validate();
  const auto frames = video.frame_count();
  const Eigen::MatrixXd pose = pose_drift(script, frames);
  Eigen::MatrixXd out(frames, kVideoDim);
  for (std::int64_t t = 0; t < frames; ++t) {
    for (std::int64_t c = 0; c < kVideoDim; ++c) out(t, c) = video.frames.at(t, c) - bias_v_(c);
    out.row(t) -= (pose_dirs_ * pose.row(t).transpose()).transpose();
  }
  return out;
}

double sync_score(const SyntheticCodec& codec, const LatentStream& audio,
                  const LatentStream& video) {
  if (audio.frame_count() != video.frame_count()) {
    throw ShapeError("sync_score: frame count mismatch (" + std::to_string(audio.frame_count()) +
                     " vs " + std::to_string(video.frame_count()) + ")");
  }
  if (audio.frame_count() == 0) throw ShapeError("sync_score: empty streams");
  const Eigen::MatrixXd ea = codec.recover_articulation(audio);
  const Eigen::MatrixXd ev = codec.recover_articulation(video);
  double total = 0.0;
  for (Eigen::Index t = 0; t < ea.rows(); ++t) {
    const double na = ea.row(t).norm(), nv = ev.row(t).norm();
    const double cos = (na > 0 && nv > 0) ? ea.row(t).dot(ev.row(t)) / (na * nv) : 0.0;
    total += std::clamp(cos, -1.0, 1.0);
  }
  return 0.5 * (total / static_cast<double>(ea.rows()) + 1.0);
}

// ------------------------------------------------------------ statistics

ModalityStats fit_modality_stats(std::span<const LatentStream* const> streams) {
  if (streams.empty()) throw ShapeError("fit_stats: empty corpus");
  const auto d = streams.front()->dim();
  std::int64_t frames = 0;
  std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
  for (const auto* s : streams) {
    if (s->dim() != d) throw ShapeError("fit_stats: dimension mismatch within corpus");
    for (std::int64_t t = 0; t < s->frame_count(); ++t) {
      for (std::int64_t c = 0; c < d; ++c) sum[c] += s->frames.at(t, c);
    }
    frames += s->frame_count();
  }
  if (frames < 2) throw ShapeError("fit_stats: need at least 2 frames");
  std::vector<double> mu(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) mu[c] = sum[c] / static_cast<double>(frames);
  std::vector<double> sq(sum.size(), 0.0);
  for (const auto* s : streams) {
    for (std::int64_t t = 0; t < s->frame_count(); ++t) {
      for (std::int64_t c = 0; c < d; ++c) {
        const double e = s->frames.at(t, c) - mu[c];
        sq[c] += e * e;
      }
    }
  }
  ModalityStats out;
  for (std::size_t c = 0; c < sum.size(); ++c) {
    out.mean.push_back(static_cast<float>(mu[c]));
    out.std.push_back(
        static_cast<float>(std::max(std::sqrt(sq[c] / static_cast<double>(frames)), kStdFloor)));
  }
  return out;
}

LatentStats fit_stats(std::span<const LatentStream> audio, std::span<const LatentStream> video) {
  std::vector<const LatentStream*> a, v;
  for (const auto& s : audio) a.push_back(&s);
  for (const auto& s : video) v.push_back(&s);
  return {fit_modality_stats(a), fit_modality_stats(v)};
}

namespace {

const ModalityStats& stats_for(const LatentStream& stream, const LatentStats& stats) {
  const auto& ms = stats.of(stream.modality);
  if (static_cast<std::int64_t>(ms.mean.size()) != stream.dim() ||
      ms.std.size() != ms.mean.size()) {
    throw ShapeError("normalization stats dimension does not match the stream");
  }
  return ms;
}

}  // namespace

LatentStream normalize(const LatentStream& stream, const LatentStats& stats) {
  const auto& ms = stats_for(stream, stats);
  LatentStream out = stream;
  for (std::int64_t t = 0; t < stream.frame_count(); ++t) {
    for (std::int64_t c = 0; c < stream.dim(); ++c) {
      out.frames.at(t, c) = static_cast<float>(
          (static_cast<double>(stream.frames.at(t, c)) - ms.mean[c]) / ms.std[c]);
    }
  }
  return out;
}

LatentStream denormalize(const LatentStream& stream, const LatentStats& stats) {
  const auto& ms = stats_for(stream, stats);
  LatentStream out = stream;
  for (std::int64_t t = 0; t < stream.frame_count(); ++t) {
    for (std::int64_t c = 0; c < stream.dim(); ++c) {
      out.frames.at(t, c) = static_cast<float>(
          static_cast<double>(stream.frames.at(t, c)) * ms.std[c] + ms.mean[c]);
    }
  }
  return out;
}

// ------------------------------------------------------------ VAE bottleneck

std::int64_t compression_ratio(std::span<const int> strides) {
  if (strides.empty()) throw DomainError("compression_ratio: empty stride list");
  std::int64_t r = 1;
  for (int s : strides) {
    if (s < 1) throw DomainError("compression_ratio: strides must be ≥ 1");
    r *= s;
  }
  return r;
}

double latent_rate(double sample_rate, std::int64_t ratio) {
  if (ratio < 1) throw DomainError("latent_rate: ratio must be ≥ 1");
  return sample_rate / static_cast<double>(ratio);
}

void init_vae_bottleneck(ParameterSet<float>& ps, const std::string& prefix,
                         std::int64_t feature_width, Rng& rng) {
  init::linear(ps, prefix + ".proj", feature_width, 2 * kBottleneckDim, rng);
  init::linear(ps, prefix + ".back", kBottleneckDim, feature_width, rng);
}

template <typename T>
Posterior<T> vae_posterior(Binder<T>& b, const std::string& prefix, ag::Var<T> features) {
  auto proj = ag::add_rowvec(ag::matmul(features, b(prefix + ".proj.w")), b(prefix + ".proj.b"));
  const auto rows = proj.rows();
  std::vector<std::int64_t> mean_idx, scale_idx;
  // Split columns by viewing [rows, 64] as [rows·2, 32]: even rows are means.
  for (std::int64_t r = 0; r < rows; ++r) {
    mean_idx.push_back(2 * r);
    scale_idx.push_back(2 * r + 1);
  }
  auto halves = ag::reshape(proj, rows * 2, kBottleneckDim);
  auto mean = ag::gather_rows(halves, mean_idx);
  auto scale = ag::softplus(ag::gather_rows(halves, scale_idx));
  return {mean, scale};
}

template <typename T>
ag::Var<T> vae_back_project(Binder<T>& b, const std::string& prefix, ag::Var<T> z) {
  return ag::add_rowvec(ag::matmul(z, b(prefix + ".back.w")), b(prefix + ".back.b"));
}

template <typename T>
ag::Var<T> reparameterize(ag::Var<T> mean, ag::Var<T> scale, ag::Var<T> eps) {
  for (T s : scale.value()) {
    if (!(s > 0)) throw DomainError("reparameterize: σ must be positive");
  }
  return ag::add(mean, ag::mul(scale, eps));
}

template <typename T>
Tensor<T> reparameterize(const Tensor<T>& mean, const Tensor<T>& scale, const Tensor<T>& eps) {
  if (mean.shape() != scale.shape() || mean.shape() != eps.shape()) {
    throw ShapeError("reparameterize: shape mismatch");
  }
  Tensor<T> z(mean.shape());
  for (std::int64_t i = 0; i < z.size(); ++i) {
    if (!(scale[i] > 0)) throw DomainError("reparameterize: σ must be positive");
    z[i] = mean[i] + scale[i] * eps[i];
  }
  return z;
}

template <typename T>
ag::Var<T> kl_penalty(ag::Var<T> mean, ag::Var<T> scale) {
  if (mean.rows() != scale.rows() || mean.cols() != scale.cols()) {
    throw ShapeError("kl_penalty: shape mismatch");
  }
  for (T s : scale.value()) {
    if (!(s > 0)) throw DomainError("kl_penalty: σ must be positive");
  }
  auto& g = *mean.graph;
  const auto n = mean.rows() * mean.cols();
  auto ones = g.constant(mean.rows(), mean.cols(), std::vector<T>(static_cast<std::size_t>(n), T(1)));
  auto terms = ag::sub(ag::sub(ag::add(ag::square(mean), ag::square(scale)), ones),
                       ag::scale(ag::log(scale), T(2)));
  return ag::scale(ag::mean(terms), T(0.5));
}

template <typename T>
double kl_penalty(const Tensor<T>& mean, const Tensor<T>& scale) {
  if (mean.shape() != scale.shape() || mean.size() == 0) {
    throw ShapeError("kl_penalty: shape mismatch");
  }
  double acc = 0.0;
  for (std::int64_t i = 0; i < mean.size(); ++i) {
    const double m = mean[i], s = scale[i];
    if (!(s > 0)) throw DomainError("kl_penalty: σ must be positive");
    acc += 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
  }
  return acc / static_cast<double>(mean.size());
}

#define TTAV_INSTANTIATE(T)                                                                 \
  template Posterior<T> vae_posterior(Binder<T>&, const std::string&, ag::Var<T>);          \
  template ag::Var<T> vae_back_project(Binder<T>&, const std::string&, ag::Var<T>);         \
  template ag::Var<T> reparameterize(ag::Var<T>, ag::Var<T>, ag::Var<T>);                   \
  template Tensor<T> reparameterize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template ag::Var<T> kl_penalty(ag::Var<T>, ag::Var<T>);                                   \
  template double kl_penalty(const Tensor<T>&, const Tensor<T>&);

TTAV_INSTANTIATE(float)
TTAV_INSTANTIATE(double)

#undef TTAV_INSTANTIATE

}  // namespace ttav::codec
