#include "ttav/trainer.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace ttav {

// ------------------------------------------------------------ corpus

std::vector<CorpusItem> render_scripts(const codec::SyntheticCodec& codec, const TrainConfig& cfg,
                                       const char* pool, int count, bool with_video) {
  const Rng stream = Rng(cfg.corpus.corpus_seed).fork("corpus").fork(pool);
  std::vector<CorpusItem> items(static_cast<std::size_t>(count));
  parallel_for(count, cfg.resolved_threads(), [&](std::int64_t i) {
    Rng r = stream.fork(static_cast<std::uint64_t>(i));
    const std::uint64_t seed = r.next_u64();
    auto script = codec.random_script(r, cfg.model.patch, cfg.corpus.min_patches,
                                      cfg.corpus.max_patches, seed);
    auto [audio, video] = codec.render(script, cfg.model.patch);
    auto& item = items[static_cast<std::size_t>(i)];
    item.script = std::move(script);
    item.audio = std::move(audio);
    item.video = with_video ? std::move(video)
                            : codec::LatentStream{Tensor<float>({0, codec::kVideoDim}),
                                                  codec::Modality::Video, codec::kFrameRate};
  });
  return items;
}

Corpus build_corpus(const TrainConfig& cfg) {
  cfg.validate();
  const codec::SyntheticCodec codec(cfg.codec);
  Corpus c;
  c.t2av = render_scripts(codec, cfg, "t2av", cfg.corpus.t2av_scripts, true);
  c.tts = render_scripts(codec, cfg, "tts", cfg.corpus.tts_scripts, false);
  c.eval = render_scripts(codec, cfg, "eval", cfg.corpus.eval_scripts, true);
  std::vector<codec::LatentStream> audio, video;
  for (const auto& it : c.t2av) {
    audio.push_back(it.audio);
    video.push_back(it.video);
  }
  for (const auto& it : c.tts) audio.push_back(it.audio);
  if (audio.empty() || video.empty()) throw Error("corpus: cannot fit statistics without both pools");
  c.stats = codec::fit_stats(audio, video);
  return c;
}

// ------------------------------------------------------------ batches

std::int64_t TrainingBatch::count(Task t) const {
  std::int64_t n = 0;
  for (const auto& e : examples) n += e.task == t;
  return n;
}

Example make_example(const CorpusItem& item, Task task, const codec::LatentStats& stats,
                     const ModelConfig& model) {
  Example e;
  e.script = item.script;
  e.task = task;
  e.audio = codec::normalize(item.audio, stats).frames;
  if (task == Task::T2AV) {
    if (item.video.frame_count() != item.audio.frame_count()) {
      throw ShapeError("paired example has unequal stream lengths");
    }
    e.video = codec::normalize(item.video, stats).frames;
  }
  if (e.audio.rows() == 0 || e.audio.rows() % model.patch != 0) {
    throw ShapeError("example length is not a positive multiple of the patch size");
  }
  const auto n = e.patches(model.patch);
  e.stop_labels.assign(static_cast<std::size_t>(n), 0);
  e.stop_labels.back() = 1;
  return e;
}

TrainingBatch assemble_batch(const Corpus& corpus, const TrainConfig& cfg, Rng& rng) {
  const double want = cfg.batch_size * cfg.tts_fraction;
  auto n_tts = static_cast<std::int64_t>(std::floor(want));
  const double frac = want - static_cast<double>(n_tts);
  if (frac > 0.0 && rng.bernoulli(frac)) ++n_tts;
  const std::int64_t n_t2av = cfg.batch_size - n_tts;
  if (n_t2av > 0 && corpus.t2av.empty()) throw Error("assemble_batch: empty T2AV pool");
  if (n_tts > 0 && corpus.tts.empty()) throw Error("assemble_batch: empty TTS pool");

  TrainingBatch b;
  auto draw = [&](const std::vector<CorpusItem>& pool, Task task) {
    const auto idx = rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1);
    b.examples.push_back(make_example(pool[static_cast<std::size_t>(idx)], task, corpus.stats, cfg.model));
  };
  for (std::int64_t i = 0; i < n_t2av; ++i) draw(corpus.t2av, Task::T2AV);
  for (std::int64_t i = 0; i < n_tts; ++i) draw(corpus.tts, Task::TTS);
  return b;
}

// ------------------------------------------------------------ losses

double combine_losses(double audio, double video, double stop, double lambda, double alpha) {
  return audio + lambda * video + alpha * stop;
}

Tensor<float> corrupt_history(const Tensor<float>& frames, double sigma, Rng rng) {
  Tensor<float> out = frames;
  if (sigma == 0.0) return out;
  for (auto& v : out.storage()) v = static_cast<float>(static_cast<double>(v) + sigma * rng.normal());
  return out;
}

template <typename T>
HeadInputs<T> head_inputs(const Tensor<float>& frames, std::int64_t patch, codec::Modality m,
                          const std::vector<std::int64_t>& from, double p_drop, Rng rng,
                          const Tensor<float>* history) {
  const auto d = frames.cols();
  const auto n = frames.rows() / patch;
  if (static_cast<std::int64_t>(from.size()) != n) throw ShapeError("head_inputs: position count");
  if (history && history->shape() != frames.shape()) throw ShapeError("head_inputs: history shape");
  const auto& past = history ? *history : frames;
  HeadInputs<T> h;
  h.x0 = frames.template cast<T>().reshaped({frames.rows(), d});
  h.context = Tensor<T>({frames.rows(), d});
  for (std::int64_t i = patch * d; i < frames.size(); ++i) {
    h.context[i] = static_cast<T>(past[i - patch * d]);
  }
  // Audio identity: mean of the first patch. Video identity: the first frame.
  std::vector<T> global(static_cast<std::size_t>(d), T(0));
  if (m == codec::Modality::Audio) {
    for (std::int64_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::int64_t f = 0; f < patch; ++f) s += frames.at(f, c);
      global[static_cast<std::size_t>(c)] = static_cast<T>(s / static_cast<double>(patch));
    }
  } else {
    for (std::int64_t c = 0; c < d; ++c) global[static_cast<std::size_t>(c)] = static_cast<T>(frames.at(0, c));
  }
  h.global = Tensor<T>({n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(global.begin(), global.end(), h.global.row(i).begin());
  }
  h.from = from;
  for (std::int64_t i = 0; i < n; ++i) {
    Rng r = rng.fork(static_cast<std::uint64_t>(i));
    h.dropped.push_back(head::draw_drop(p_drop, r));
  }
  return h;
}

namespace {

struct Denominators {
  double audio = 1.0;
  double video = 1.0;
  double stop = 1.0;
  double stop_weight = 1.0;
};

template <typename T>
struct ExampleResult {
  double audio = 0.0, video = 0.0, stop = 0.0;
  GradientMap<T> grads;
};

template <typename T>
ExampleResult<T> example_loss(const ParameterSet<T>& params, const TrainConfig& cfg,
                              const ModelParts& parts, const Example& ex, const Denominators& den,
                              const Rng& rng, bool with_grads) {
  const auto P = cfg.model.patch;
  ag::Graph<T> g(with_grads);
  Binder<T> b(g, params, with_grads);
  const bool t2av = ex.task == Task::T2AV;

  const auto audio_past = corrupt_history(ex.audio, cfg.history_noise, rng.fork("audio").fork("history"));
  auto audio_frames = g.constant(audio_past.template cast<T>().reshaped({ex.audio.rows(), ex.audio.cols()}));
  auto ea = patch::encode_patches(b, kAudioEncoder, parts.audio_encoder, audio_frames);
  ag::Var<T> ev;
  Tensor<float> video_past;
  if (t2av) {
    video_past = corrupt_history(ex.video, cfg.history_noise, rng.fork("video").fork("history"));
    auto video_frames = g.constant(video_past.template cast<T>().reshaped({ex.video.rows(), ex.video.cols()}));
    ev = patch::encode_patches(b, kVideoEncoder, parts.video_encoder, video_frames);
  }
  auto layout = backbone::build_sequence(b, ex.script.symbols, ea, ev, cfg.model.fusion, ex.task);
  auto H = backbone::forward_hidden(b, parts.backbone, layout.tokens);
  const auto& plan = layout.plan;

  auto run_head = [&](const std::string& prefix, const head::HeadConfig& hc,
                      const Tensor<float>& frames, const Tensor<float>& past, codec::Modality m,
                      const std::vector<std::int64_t>& from, const char* tag) {
    const auto ctx = corrupt_history(past, cfg.context_noise, rng.fork(tag).fork("context"));
    auto in = head_inputs<T>(frames, P, m, from, cfg.p_drop, rng.fork(tag).fork("drop"), &ctx);
    head::HeadBatch<T> hb{ag::gather_rows(H, in.from), in.dropped, g.constant(in.global),
                          g.constant(in.context)};
    return head::cfm_sse(b, prefix, hc, in.x0, hb, rng.fork(tag).fork("flow"));
  };

  auto sse_a = run_head(kAudioHead, parts.audio_head, ex.audio, audio_past, codec::Modality::Audio,
                        plan.audio_from, "audio");
  auto logits = backbone::stop_logits(b, ag::gather_rows(H, plan.stop_positions));
  auto stop = backbone::stop_loss_from_logits(logits, plan.stop_labels, den.stop_weight, den.stop);

  ExampleResult<T> r;
  auto la = ag::scale(sse_a, static_cast<T>(1.0 / den.audio));
  r.audio = static_cast<double>(la.item());
  r.stop = static_cast<double>(stop.item());
  auto total = ag::add(la, ag::scale(stop, static_cast<T>(cfg.alpha_stop)));
  if (t2av) {
    auto sse_v = run_head(kVideoHead, parts.video_head, ex.video, video_past, codec::Modality::Video,
                          plan.video_from, "video");
    auto lv = ag::scale(sse_v, static_cast<T>(1.0 / den.video));
    r.video = static_cast<double>(lv.item());
    total = ag::add(total, ag::scale(lv, static_cast<T>(cfg.lambda_video)));
  }
  if (!std::isfinite(static_cast<double>(total.item()))) {
    std::ostringstream os;
    os << "non-finite loss for script seed " << ex.script.seed << " (audio " << r.audio
       << ", video " << r.video << ", stop " << r.stop << ")";
    throw NumericError(os.str());
  }
  if (with_grads) r.grads = backward(total, b);
  return r;
}

}  // namespace

template <typename T>
BatchLoss<T> batch_loss(const ParameterSet<T>& params, const TrainConfig& cfg,
                        const TrainingBatch& batch, const Rng& rng, bool with_grads, int threads) {
  if (batch.examples.empty()) throw Error("batch_loss: empty batch");
  const auto P = cfg.model.patch;
  const auto parts = model_parts(cfg.model);

  std::int64_t audio_pos = 0, video_pos = 0;
  std::vector<int> labels;
  for (const auto& ex : batch.examples) {
    audio_pos += ex.patches(P);
    if (ex.task == Task::T2AV) video_pos += ex.patches(P);
    labels.insert(labels.end(), ex.stop_labels.begin(), ex.stop_labels.end());
  }
  Denominators den;
  den.audio = static_cast<double>(audio_pos * P * codec::kAudioDim);
  den.video = video_pos > 0 ? static_cast<double>(video_pos * P * codec::kVideoDim) : 1.0;
  den.stop = static_cast<double>(labels.size());
  den.stop_weight = backbone::stop_weight(labels);

  std::vector<ExampleResult<T>> results(batch.examples.size());
  parallel_for(static_cast<std::int64_t>(batch.examples.size()), threads, [&](std::int64_t i) {
    results[static_cast<std::size_t>(i)] =
        example_loss(params, cfg, parts, batch.examples[static_cast<std::size_t>(i)], den,
                     rng.fork(static_cast<std::uint64_t>(i)), with_grads);
  });

  BatchLoss<T> out;
  for (auto& r : results) {
    out.components.audio += r.audio;
    out.components.video += r.video;
    out.components.stop += r.stop;
    if (!with_grads) continue;
    if (out.grads.empty()) {
      out.grads = std::move(r.grads);
      continue;
    }
    for (auto& [name, g] : out.grads) {
      const auto& src = r.grads.at(name);
      for (std::int64_t k = 0; k < g.size(); ++k) g[k] += src[k];
    }
  }
  out.components.total = combine_losses(out.components.audio, out.components.video,
                                        out.components.stop, cfg.lambda_video, cfg.alpha_stop);
  return out;
}

StepMetrics train_step(Model& model, OptimizerState<float>& opt, const TrainingBatch& batch,
                       std::int64_t step, const Rng& rng) {
  const auto& cfg = model.config;
  auto loss = batch_loss(model.params, cfg, batch, rng, true, cfg.resolved_threads());
  StepMetrics m;
  m.step = step;
  m.loss = loss.components;
  m.grad_norm = clip_grad_norm(loss.grads, cfg.grad_clip);
  m.lr = lr_at({cfg.peak_lr, cfg.total_steps, cfg.warmup_fraction}, step);
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  adamw_step(model.params, loss.grads, opt, m.lr, ac);
  model.step = step + 1;
  return m;
}

void train(Model& model, OptimizerState<float>& opt, const Corpus& corpus, const MetricsSink& sink,
           const StepHook& hook) {
  const auto& cfg = model.config;
  model.stats = corpus.stats;
  const Rng root = Rng(cfg.seed).fork("train");
  for (std::int64_t step = model.step; step < cfg.total_steps; ++step) {
    const Rng sr = root.fork(static_cast<std::uint64_t>(step));
    Rng br = sr.fork("batch");
    auto batch = assemble_batch(corpus, cfg, br);
    auto m = train_step(model, opt, batch, step, sr.fork("loss"));
    if (sink && (step % cfg.log_every == 0 || step + 1 == cfg.total_steps)) sink(m);
    if (hook && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) hook(model, opt);
  }
}

std::string metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["loss_total"] = m.loss.total;
  j["loss_audio"] = m.loss.audio;
  j["loss_video"] = m.loss.video;
  j["loss_stop"] = m.loss.stop;
  j["grad_norm"] = m.grad_norm;
  return j.dump();
}

void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn) {
  if (n <= 0) return;
  const auto workers = static_cast<std::int64_t>(std::max(1, threads));
  if (workers == 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  auto work = [&] {
    for (std::int64_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::int64_t t = 0; t < std::min(workers, n); ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template HeadInputs<float> head_inputs(const Tensor<float>&, std::int64_t, codec::Modality,
                                       const std::vector<std::int64_t>&, double, Rng,
                                       const Tensor<float>*);
template HeadInputs<double> head_inputs(const Tensor<float>&, std::int64_t, codec::Modality,
                                        const std::vector<std::int64_t>&, double, Rng,
                                        const Tensor<float>*);
template BatchLoss<float> batch_loss(const ParameterSet<float>&, const TrainConfig&,
                                     const TrainingBatch&, const Rng&, bool, int);
template BatchLoss<double> batch_loss(const ParameterSet<double>&, const TrainConfig&,
                                      const TrainingBatch&, const Rng&, bool, int);

}  // namespace ttav
