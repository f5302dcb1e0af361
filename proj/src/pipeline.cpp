#include "ttav/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>

namespace ttav {

std::string gen_mode_name(GenMode m) {
  switch (m) {
    case GenMode::T2AV: return "t2av";
    case GenMode::A2V: return "a2v";
    case GenMode::V2A: return "v2a";
  }
  return "?";
}

GenMode parse_gen_mode(const std::string& text) {
  if (text == "t2av") return GenMode::T2AV;
  if (text == "a2v") return GenMode::A2V;
  if (text == "v2a") return GenMode::V2A;
  throw ConfigError("unknown generation mode '" + text + "'");
}

std::vector<float> audio_reference(const codec::LatentStream& audio, std::int64_t patch) {
  if (audio.frame_count() < patch) throw ShapeError("audio reference needs a full patch");
  std::vector<float> mean(static_cast<std::size_t>(audio.dim()));
  for (std::int64_t c = 0; c < audio.dim(); ++c) {
    double s = 0.0;
    for (std::int64_t f = 0; f < patch; ++f) s += audio.frames.at(f, c);
    mean[static_cast<std::size_t>(c)] = static_cast<float>(s / static_cast<double>(patch));
  }
  return mean;
}

std::vector<float> video_reference(const codec::LatentStream& video) {
  if (video.frame_count() < 1) throw ShapeError("video reference needs a frame");
  auto row = video.frames.row(0);
  return {row.begin(), row.end()};
}

References references_from(const codec::LatentStream& audio, const codec::LatentStream& video,
                           std::int64_t patch) {
  return {audio_reference(audio, patch), video_reference(video)};
}

void check_mode_support(FusionMode fusion, GenMode mode) {
  if (fusion.kind == FusionKind::InterleavedAV && mode == GenMode::V2A) {
    throw ConfigError("an interleaved_av model cannot serve v2a");
  }
  if (fusion.kind == FusionKind::InterleavedVA && mode == GenMode::A2V) {
    throw ConfigError("an interleaved_va model cannot serve a2v");
  }
}

namespace {

using codec::Modality;

Tensor<float> normalized_vector(const std::vector<float>& raw, const codec::ModalityStats& st) {
  if (raw.size() != st.mean.size()) throw ShapeError("reference has the wrong width");
  Tensor<float> out({static_cast<std::int64_t>(raw.size())});
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[static_cast<std::int64_t>(i)] = static_cast<float>(
        (static_cast<double>(raw[i]) - st.mean[i]) / static_cast<double>(st.std[i]));
  }
  return out;
}

Tensor<float> stack(const std::vector<Tensor<float>>& patches, std::int64_t patch, std::int64_t d) {
  Tensor<float> out({static_cast<std::int64_t>(patches.size()) * patch, d});
  auto it = out.storage().begin();
  for (const auto& p : patches) it = std::copy(p.storage().begin(), p.storage().end(), it);
  return out;
}

Tensor<float> as_row(std::span<const float> v) {
  return Tensor<float>({1, static_cast<std::int64_t>(v.size())}, std::vector<float>(v.begin(), v.end()));
}

}  // namespace

GenerationResult generate(const Model& model, const GenerationRequest& req) {
  const auto start = std::chrono::steady_clock::now();
  const auto& cfg = model.config;
  const auto parts = model.parts();
  const auto P = cfg.model.patch;
  const auto fusion = cfg.model.fusion;
  const auto& ps = model.params;
  req.sampler.validate();
  check_mode_support(fusion, req.mode);
  if (req.script.symbols.empty()) throw DomainError("cannot generate from an empty script");

  const bool conditional = req.mode != GenMode::T2AV;
  const Modality cond_modality = req.mode == GenMode::A2V ? Modality::Audio : Modality::Video;
  Tensor<float> cond_norm;
  std::int64_t cond_n = 0;
  References refs = req.refs;
  if (conditional) {
    if (!req.cond) throw DomainError(gen_mode_name(req.mode) + " needs a conditioning stream");
    const auto& c = *req.cond;
    if (c.modality != cond_modality) {
      throw DomainError(gen_mode_name(req.mode) + " conditions on a " +
                        codec::modality_name(cond_modality) + " stream");
    }
    c.validate();
    if (c.frame_count() == 0 || c.frame_count() % P != 0) {
      throw ShapeError("conditioning stream of " + std::to_string(c.frame_count()) +
                       " frames is not a positive multiple of the patch size");
    }
    cond_n = c.frame_count() / P;
    if (cond_n > req.sampler.max_patches) {
      throw DomainError("conditioning stream has more patches than max_patches");
    }
    cond_norm = codec::normalize(c, model.stats).frames;
    if (cond_modality == Modality::Audio && !refs.audio) refs.audio = audio_reference(c, P);
    if (cond_modality == Modality::Video && !refs.video) refs.video = video_reference(c);
  }
  Tensor<float> global_a({codec::kAudioDim}), global_v({codec::kVideoDim});
  if (refs.audio) global_a = normalized_vector(*refs.audio, model.stats.audio);
  if (refs.video) global_v = normalized_vector(*refs.video, model.stats.video);

  GenerationResult res;
  const Rng root = Rng(req.seed).fork("generate");
  const head::EulerSettings es{req.sampler.steps, req.sampler.temperature, req.sampler.cfg_scale};
  std::vector<Tensor<float>> audio, video;

  auto cond_patch = [&](std::int64_t i) { return cond_norm.slice_rows(i * P, P); };
  auto sample = [&](Modality m, std::int64_t i, const Tensor<float>& h) {
    const bool is_audio = m == Modality::Audio;
    const auto& hc = is_audio ? parts.audio_head : parts.video_head;
    const auto& done = is_audio ? audio : video;
    head::ConditioningBundle b{h, is_audio ? global_a : global_v,
                               i == 0 ? Tensor<float>({P, hc.frame_dim}) : done.back(), false};
    Rng r = root.fork(is_audio ? "audio" : "video").fork(static_cast<std::uint64_t>(i));
    return head::euler_sample(ps, is_audio ? kAudioHead : kVideoHead, hc, b, es, r,
                              &res.head_evaluations);
  };
  auto next_audio = [&](std::int64_t i, const Tensor<float>& h) {
    res.audio_states.push_back(h);
    audio.push_back(req.mode == GenMode::A2V ? cond_patch(i) : sample(Modality::Audio, i, h));
    return patch::encode_patch(ps, kAudioEncoder, parts.audio_encoder, audio.back());
  };
  auto next_video = [&](std::int64_t i, const Tensor<float>& h) {
    res.video_states.push_back(h);
    video.push_back(req.mode == GenMode::V2A ? cond_patch(i) : sample(Modality::Video, i, h));
    return patch::encode_patch(ps, kVideoEncoder, parts.video_encoder, video.back());
  };

  auto cache = backbone::make_cache(parts.backbone);
  auto feed = [&](const Tensor<float>& token) {
    auto H = backbone::incremental_forward(ps, parts.backbone, cache, as_row(token.data()));
    return H.reshaped({H.cols()});
  };
  // Mirrors the layout's two-term sum so cached tokens match teacher forcing.
  auto sum = [](const Tensor<float>& a, const Tensor<float>& b) {
    Tensor<float> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
  };
  const auto D = cfg.model.width;
  const Tensor<float> zero({D});
  const auto pad_span = backbone::pad_embedding(ps);
  const Tensor<float> pad({D}, std::vector<float>(pad_span.begin(), pad_span.end()));
  auto finished = [&](std::int64_t n, const Tensor<float>& h) {
    const double p = backbone::stop_probability(ps, h.data());
    res.stop_probs.push_back(p);
    if (conditional) return n >= cond_n;
    return p > req.sampler.stop_threshold || n >= req.sampler.max_patches;
  };

  {
    auto prefix = backbone::tag_token(ps, Task::T2AV);
    auto text = backbone::text_tokens(ps, req.script.symbols);
    Tensor<float> tokens({1 + text.rows(), D});
    std::copy(prefix.storage().begin(), prefix.storage().end(), tokens.storage().begin());
    std::copy(text.storage().begin(), text.storage().end(), tokens.storage().begin() + D);
    // Single-source layout tokens get a zero row added; match its signed zeros.
    for (auto& v : tokens.storage()) v = v + 0.0f;
    auto H = backbone::incremental_forward(ps, parts.backbone, cache, tokens);
    res.patches = 0;
    Tensor<float> h = H.slice_rows(H.rows() - 1, 1).reshaped({D});

    switch (fusion.kind) {
      case FusionKind::Add:
        for (std::int64_t i = 0;; ++i) {
          auto ea = next_audio(i, h);
          auto ev = next_video(i, h);
          h = feed(sum(ea, ev));
          if (finished(i + 1, h)) break;
        }
        break;
      case FusionKind::InterleavedAV:
        for (std::int64_t i = 0;; ++i) {
          h = feed(sum(next_audio(i, h), zero));
          h = feed(sum(next_video(i, h), zero));
          if (finished(i + 1, h)) break;
        }
        break;
      case FusionKind::InterleavedVA:
        for (std::int64_t i = 0;; ++i) {
          h = feed(sum(next_video(i, h), zero));
          h = feed(sum(next_audio(i, h), zero));
          if (finished(i + 1, h)) break;
        }
        break;
      case FusionKind::Delay: {
        const std::int64_t k = fusion.delay;
        bool stopped = false;
        std::int64_t n = 0;
        for (std::int64_t s = 0;; ++s) {
          Tensor<float> ea = pad, ev = pad;
          if (!stopped) ea = next_audio(s, h);
          const std::int64_t j = s - k;
          if (j >= 0) {
            ev = next_video(j, h);
            if (stopped && j == n - 1) break;
          }
          h = feed(sum(ea, ev));
          if (!stopped && finished(s + 1, h)) {
            stopped = true;
            n = s + 1;
          }
        }
        break;
      }
    }
  }

  res.patches = static_cast<std::int64_t>(audio.size());
  if (static_cast<std::int64_t>(video.size()) != res.patches) {
    throw Error("generation produced unequal audio and video patch counts");
  }
  res.audio_norm = stack(audio, P, codec::kAudioDim);
  res.video_norm = stack(video, P, codec::kVideoDim);
  const codec::LatentStream an{res.audio_norm, Modality::Audio};
  const codec::LatentStream vn{res.video_norm, Modality::Video};
  res.audio = req.mode == GenMode::A2V ? *req.cond : codec::denormalize(an, model.stats);
  res.video = req.mode == GenMode::V2A ? *req.cond : codec::denormalize(vn, model.stats);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ------------------------------------------------------------ evaluation

Aggregate aggregate(std::vector<double> values) {
  Aggregate a;
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  a.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return a;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

template <typename F>
std::vector<double> column(const std::vector<EvalRow>& rows, F f) {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(f(r));
  return out;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
  if (a.size() < 2) return 0.0;
  auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

Aggregate MetricsReport::audio_mse() const {
  return aggregate(column(rows, [](const EvalRow& r) { return r.audio_mse; }));
}
Aggregate MetricsReport::video_mse() const {
  return aggregate(column(rows, [](const EvalRow& r) { return r.video_mse; }));
}
Aggregate MetricsReport::sync() const {
  return aggregate(column(rows, [](const EvalRow& r) { return r.sync; }));
}
Aggregate MetricsReport::length_error() const {
  return aggregate(column(rows, [](const EvalRow& r) { return static_cast<double>(r.length_error); }));
}

double MetricsReport::length_within(std::int64_t patches) const {
  if (rows.empty()) return 0.0;
  std::int64_t ok = 0;
  for (const auto& r : rows) ok += r.length_error <= patches;
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

double MetricsReport::length_spearman() const {
  return spearman(column(rows, [](const EvalRow& r) { return static_cast<double>(r.generated_patches); }),
                  column(rows, [](const EvalRow& r) { return static_cast<double>(r.oracle_patches); }));
}

double overlap_mse(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.cols() != b.cols()) throw ShapeError("overlap_mse: width mismatch");
  const auto n = std::min(a.rows(), b.rows());
  if (n == 0) throw ShapeError("overlap_mse: no overlapping frames");
  double s = 0.0;
  for (std::int64_t i = 0; i < n * a.cols(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(n * a.cols());
}

MetricsReport evaluate(const Model& model, const std::vector<CorpusItem>& items, GenMode mode,
                       const SamplerSettings& sampler, std::uint64_t seed, int threads) {
  if (items.empty()) throw Error("evaluate: empty corpus");
  check_mode_support(model.config.model.fusion, mode);
  const codec::SyntheticCodec codec(model.config.codec);
  const auto P = model.config.model.patch;
  const Rng root = Rng(seed).fork("evaluate");
  MetricsReport report;
  report.mode = mode;
  report.rows.resize(items.size());
  parallel_for(static_cast<std::int64_t>(items.size()), threads, [&](std::int64_t i) {
    const auto& item = items[static_cast<std::size_t>(i)];
    GenerationRequest req;
    req.mode = mode;
    req.script = item.script;
    if (mode == GenMode::A2V) req.cond = item.audio;
    if (mode == GenMode::V2A) req.cond = item.video;
    req.refs = references_from(item.audio, item.video, P);
    req.sampler = sampler;
    if (mode != GenMode::T2AV) {
      req.sampler.max_patches = std::max<int>(sampler.max_patches,
                                              static_cast<int>(item.audio.frame_count() / P));
    }
    Rng r = root.fork(static_cast<std::uint64_t>(i));
    req.seed = r.next_u64();
    auto out = generate(model, req);

    EvalRow row;
    row.index = i;
    row.script_seed = item.script.seed;
    row.oracle_patches = item.audio.frame_count() / P;
    row.generated_patches = out.patches;
    row.length_error = std::abs(row.generated_patches - row.oracle_patches);
    row.audio_mse = overlap_mse(out.audio_norm, codec::normalize(item.audio, model.stats).frames);
    row.video_mse = overlap_mse(out.video_norm, codec::normalize(item.video, model.stats).frames);
    row.sync = codec::sync_score(codec, out.audio, out.video);
    report.rows[static_cast<std::size_t>(i)] = row;
  });
  return report;
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

void write_report_csv(std::ostream& out, const MetricsReport& report) {
  out << "index,script_seed,oracle_patches,generated_patches,length_error,audio_mse,video_mse,"
         "sync_score\n";
  for (const auto& r : report.rows) {
    out << r.index << ',' << r.script_seed << ',' << r.oracle_patches << ',' << r.generated_patches
        << ',' << r.length_error << ',' << num(r.audio_mse) << ',' << num(r.video_mse) << ','
        << num(r.sync) << '\n';
  }
}

void write_summary_csv(std::ostream& out, const std::vector<MetricsReport>& reports,
                       const std::vector<std::string>& labels) {
  out << "label,mode,examples,audio_mse_mean,audio_mse_median,video_mse_mean,video_mse_median,"
         "sync_mean,sync_median,length_error_mean,length_within_1,length_spearman\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const auto a = r.audio_mse(), v = r.video_mse(), s = r.sync(), l = r.length_error();
    out << (i < labels.size() ? labels[i] : std::string()) << ',' << gen_mode_name(r.mode) << ','
        << r.rows.size() << ',' << num(a.mean) << ',' << num(a.median) << ',' << num(v.mean) << ','
        << num(v.median) << ',' << num(s.mean) << ',' << num(s.median) << ',' << num(l.mean) << ','
        << num(r.length_within(1)) << ',' << num(r.length_spearman()) << '\n';
  }
}

// ------------------------------------------------------------ ablation

AblationResult run_ablation(const std::vector<FusionMode>& modes, const TrainConfig& shared,
                            const std::vector<std::uint64_t>& seeds, const Corpus& corpus,
                            const TrainedHook& on_trained) {
  if (modes.size() < 2) throw ConfigError("ablation needs at least two fusion modes");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  AblationResult result;
  for (const auto& mode : modes) {
    std::vector<GenMode> tasks = {GenMode::T2AV};
    if (mode.kind == FusionKind::Delay) tasks.push_back(GenMode::A2V);
    std::map<GenMode, std::vector<MetricsReport>> reports;
    for (auto seed : seeds) {
      try {
        TrainConfig cfg = shared;
        cfg.model.fusion = mode;
        cfg.seed = seed;
        Model model = init_model(cfg);
        auto opt = OptimizerState<float>::zeros_like(model.params);
        train(model, opt, corpus);
        if (on_trained) on_trained(mode.name(), seed, model);
        for (auto task : tasks) {
          reports[task].push_back(
              evaluate(model, corpus.eval, task, cfg.sampler, seed, cfg.resolved_threads()));
        }
      } catch (const std::exception& e) {
        result.failures.push_back(mode.name() + " seed " + std::to_string(seed) + ": " + e.what());
      }
    }
    for (auto task : tasks) {
      AblationRow row;
      row.mode = mode.name();
      row.task = gen_mode_name(task);
      const auto& rs = reports[task];
      row.seeds = static_cast<int>(rs.size());
      row.complete = rs.size() == seeds.size();
      for (const auto& r : rs) {
        row.sync += r.sync().mean / static_cast<double>(rs.size());
        row.audio_mse += r.audio_mse().mean / static_cast<double>(rs.size());
        row.video_mse += r.video_mse().mean / static_cast<double>(rs.size());
        row.length_error += r.length_error().mean / static_cast<double>(rs.size());
      }
      result.rows.push_back(row);
    }
  }
  result.ordering_violations = ordering_violations(result.rows);
  return result;
}

std::vector<std::string> ordering_violations(const std::vector<AblationRow>& rows) {
  auto find = [&](const std::string& mode, const std::string& task) -> const AblationRow* {
    for (const auto& r : rows) {
      if (r.mode == mode && r.task == task && r.seeds > 0) return &r;
    }
    return nullptr;
  };
  std::vector<std::string> out;
  // "≳": Add may trail interleaved_av by a small margin.
  constexpr double kRoughly = 0.01;
  auto check = [&](const char* a, const char* b, const char* task, double slack) {
    const auto* ra = find(a, task);
    const auto* rb = find(b, task);
    if (!ra || !rb) return;
    const bool ok = slack > 0.0 ? ra->sync >= rb->sync - slack : ra->sync > rb->sync;
    if (!ok) {
      out.push_back(std::string(task) + ": expected " + a + " (" + num(ra->sync) + ") " +
                    (slack > 0.0 ? ">~ " : "> ") + b + " (" + num(rb->sync) + ")");
    }
  };
  check("add", "interleaved_av", "t2av", kRoughly);
  check("interleaved_av", "delay:1", "t2av", 0.0);
  check("delay:1", "delay:3", "t2av", 0.0);
  if (const auto* d3 = find("delay:3", "a2v"); d3) {
    if (const auto* d1 = find("delay:1", "a2v"); d1 && d3->sync < d1->sync) {
      out.push_back("a2v: expected delay:3 (" + num(d3->sync) + ") >= delay:1 (" + num(d1->sync) + ")");
    }
  }
  return out;
}

void write_ablation_csv(std::ostream& out, const AblationResult& result) {
  out << "mode,task,seeds,sync_score,audio_mse,video_mse,length_error,complete,ordering_ok\n";
  const bool ordered = result.ordering_violations.empty();
  for (const auto& r : result.rows) {
    out << r.mode << ',' << r.task << ',' << r.seeds << ',' << num(r.sync) << ','
        << num(r.audio_mse) << ',' << num(r.video_mse) << ',' << num(r.length_error) << ','
        << (r.complete ? 1 : 0) << ',' << (ordered ? 1 : 0) << '\n';
  }
}

}  // namespace ttav
