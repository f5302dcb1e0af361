// Acceptance runner: prints one PASS/FAIL line per criterion and exits 0 only
// when every selected criterion passes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ttav/checkpoint.hpp"
#include "ttav/cli.hpp"
#include "ttav/gradcheck.hpp"
#include "ttav/pipeline.hpp"
#include "ttav/tlat.hpp"

using namespace ttav;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects sub-check outcomes for one criterion.
class Verdict {
 public:
  void check(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool passed() const { return failures_.empty(); }

  std::string summary() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < notes_.size(); ++i) os << (i ? "; " : "") << notes_[i];
    if (!failures_.empty()) {
      os << (notes_.empty() ? "" : "; ") << "failed: ";
      for (std::size_t i = 0; i < failures_.size(); ++i) os << (i ? ", " : "") << failures_[i];
    }
    return os.str();
  }

 private:
  std::vector<std::string> failures_, notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

Tensor<double> gaussian_d(Shape shape, Rng rng, double stddev = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = stddev * rng.normal();
  return t;
}

Tensor<float> gaussian_f(Shape shape, Rng rng, double stddev = 1.0) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(stddev * rng.normal());
  return t;
}

void perturb(ParameterSet<float>& ps, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  for (auto& [name, t] : ps.tensors) {
    Rng r = rng.fork(name);
    for (auto& v : t.storage()) v = static_cast<float>(stddev * r.normal());
  }
}

bool all_zero(const Tensor<double>& t, double tol = 0.0) {
  return std::all_of(t.storage().begin(), t.storage().end(), [&](double v) { return std::abs(v) <= tol; });
}

const char* kTinyTrain =
    "total_steps=4\nbatch_size=4\npeak_lr=1e-3\nthreads=1\np_drop=0.3\n"
    "model.width=8\nmodel.encoder_layers=1\nmodel.encoder_heads=2\n"
    "model.backbone_layers=1\nmodel.backbone_heads=2\n"
    "model.head_layers=1\nmodel.head_heads=2\nmodel.head_width=8\n"
    "corpus.t2av_scripts=8\ncorpus.tts_scripts=8\ncorpus.eval_scripts=2\n"
    "corpus.min_patches=2\ncorpus.max_patches=4\n";

const char* kSmoke =
    "# three-symbol smoke corpus\nseed=3\ntotal_steps=20\nbatch_size=4\npeak_lr=1e-3\nlog_every=5\nthreads=1\n"
    "model.width=16\nmodel.encoder_layers=1\nmodel.encoder_heads=2\n"
    "model.backbone_layers=2\nmodel.backbone_heads=2\n"
    "model.head_layers=1\nmodel.head_heads=2\nmodel.head_width=16\n"
    "corpus.t2av_scripts=12\ncorpus.tts_scripts=12\ncorpus.eval_scripts=4\n"
    "corpus.min_patches=2\ncorpus.max_patches=4\nsampler.steps=4\nsampler.max_patches=8\n";

// Reduced shared configuration for the fusion-mode ablation.
const char* kAblation =
    "seed=1\ntotal_steps=1500\nbatch_size=16\npeak_lr=1e-3\nthreads=0\nlog_every=500\n"
    "model.width=32\nmodel.encoder_layers=1\nmodel.encoder_heads=2\n"
    "model.backbone_layers=2\nmodel.backbone_heads=2\n"
    "model.head_layers=1\nmodel.head_heads=2\nmodel.head_width=32\n"
    "corpus.t2av_scripts=600\ncorpus.tts_scripts=600\ncorpus.eval_scripts=60\n"
    "corpus.min_patches=3\ncorpus.max_patches=10\nsampler.max_patches=16\n";

struct Context {
  fs::path work;
  std::optional<TrainConfig> e2e_config;  // criterion 6 override
  std::optional<fs::path> checkpoint;     // criterion 7 model
  std::optional<TrainConfig> ablation_config;
  // Filled by criterion 6 for reuse by 7.
  std::optional<Model> trained;
};

// ------------------------------------------------------------ 1

using Build = std::function<ag::Var<double>(Binder<double>&)>;

GradCheckReport grad_check(const ParameterSet<double>& ps, const Build& build, std::int64_t sample,
                           const std::vector<std::string>& zero_grad, Verdict& v, const std::string& tag) {
  ag::Graph<double> g;
  Binder<double> b(g, ps);
  auto ana = backward(build(b), b);
  ScalarFn f = [&](const ParameterSet<double>& p) {
    ag::Graph<double> g2(false);
    Binder<double> b2(g2, p, false);
    return build(b2).item();
  };
  auto num = sample > 0 ? finite_diff_gradient_sampled(f, ps, 1e-6, sample) : finite_diff_gradient(f, ps, 1e-6);
  // Parameters with an exactly zero true gradient carry no ratio information.
  for (const auto& name : zero_grad) {
    v.check(all_zero(ana.at(name), 1e-12), tag + " " + name + " analytic gradient not zero");
    num.erase(name);
  }
  return compare_gradients(ana, num);
}

head::HeadConfig grad_head(std::int64_t d) { return {d, 2, 6, d, {8, 1, 2, 16}}; }

Verdict criterion1(Context&) {
  Verdict v;
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  auto record = [&](const std::string& loss, const GradCheckReport& r, std::uint64_t seed) {
    worst[loss] = std::max(worst[loss], r.worst_relative_error);
    v.check(r.worst_relative_error < 1e-4,
            loss + " seed " + std::to_string(seed) + " (" + r.worst_parameter + " " + fmt(r.worst_relative_error) + ")");
    v.check(r.coordinates > 0, loss + " checked no coordinates");
  };

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    // CFM loss on each head's geometry.
    for (std::int64_t d : {codec::kAudioDim, codec::kVideoDim}) {
      const auto cfg = grad_head(d);
      ParameterSet<float> init;
      Rng rng(seed);
      head::init(init, "head", cfg, rng);
      const auto ps = init.cast<double>();
      Rng data(seed * 7 + static_cast<std::uint64_t>(d));
      const auto x0 = gaussian_d({4, d}, data.fork("x0"));
      const auto h = gaussian_d({2, 6}, data.fork("h"));
      const auto gl = gaussian_d({2, d}, data.fork("g"));
      const auto ctx = gaussian_d({4, d}, data.fork("c"));
      Build build = [&](Binder<double>& b) {
        auto& g = b.graph();
        head::HeadBatch<double> hb{g.constant(h), {false, true}, g.constant(gl), g.constant(ctx)};
        return ag::scale(head::cfm_sse(b, "head", cfg, x0, hb, data.fork("flow")), 1.0 / static_cast<double>(x0.size()));
      };
      const std::string name = d == codec::kAudioDim ? "cfm_audio" : "cfm_video";
      record(name, grad_check(ps, build, 24, {"head.body.layers.0.attn.k.b"}, v, name), seed);
    }

    // Stop loss through a Delay-2 layout, which reaches every backbone table.
    {
      const backbone::BackboneConfig cfg{codec::kVocab, {8, 2, 2, 16}};
      ParameterSet<float> init;
      Rng rng(seed);
      backbone::init(init, cfg, rng);
      backbone::init_stop(init, 8, rng);
      const auto ps = init.cast<double>();
      Rng data(seed * 31);
      const auto audio = gaussian_d({3, 8}, data.fork("a"));
      const auto video = gaussian_d({3, 8}, data.fork("v"));
      const std::vector<int> text{4, 7};
      Build build = [&](Binder<double>& b) {
        auto& g = b.graph();
        const auto seq = backbone::build_sequence(b, text, g.constant(audio), g.constant(video),
                                                  FusionMode::delayed(2), Task::T2AV);
        auto hs = backbone::forward_hidden(b, cfg, seq.tokens);
        auto logits = backbone::stop_logits(b, ag::gather_rows(hs, seq.plan.stop_positions));
        return backbone::stop_loss_from_logits(logits, seq.plan.stop_labels,
                                               backbone::stop_weight(seq.plan.stop_labels),
                                               static_cast<double>(seq.plan.stop_labels.size()));
      };
      // Only the T2AV tag and the two text rows are used; full tables are
      // compared coordinate-wise, unused rows included (their gradient is 0).
      record("stop", grad_check(ps, build, 0, {}, v, "stop"), seed);
    }

    // KL penalty through the VAE bottleneck.
    {
      ParameterSet<float> init;
      Rng rng(seed);
      auto fork = rng.fork("init");
      codec::init_vae_bottleneck(init, "vae", 6, fork);
      auto ps = init.cast<double>();
      ps.add("features", gaussian_d({3, 6}, rng.fork("features")));
      const auto eps = gaussian_d({3, codec::kBottleneckDim}, rng.fork("eps"));
      Build build = [&](Binder<double>& b) {
        auto post = codec::vae_posterior(b, "vae", b("features"));
        auto z = codec::reparameterize(post.mean, post.scale, b.graph().constant(eps));
        auto recon = codec::vae_back_project(b, "vae", z);
        return ag::add(codec::kl_penalty(post.mean, post.scale), ag::mean(ag::square(recon)));
      };
      record("kl", grad_check(ps, build, 0, {}, v, "kl"), seed);
    }

    // Total objective on a mixed T2AV/TTS batch.
    {
      auto cfg = TrainConfig::parse(kTinyTrain);
      cfg.seed = seed;
      const auto corpus = build_corpus(cfg);
      TrainingBatch batch;
      batch.examples.push_back(make_example(corpus.t2av[seed % 8], Task::T2AV, corpus.stats, cfg.model));
      batch.examples.push_back(make_example(corpus.tts[seed % 8], Task::TTS, corpus.stats, cfg.model));
      const auto ps = init_model(cfg).params.cast<double>();
      const Rng rng(seed * 17);
      const auto ana = batch_loss(ps, cfg, batch, rng, true, 1).grads;
      ScalarFn f = [&](const ParameterSet<double>& p) {
        return batch_loss(p, cfg, batch, rng, false, 1).components.total;
      };
      // The loss is O(10); a larger step keeps round-off below the small entries.
      auto num = finite_diff_gradient_sampled(f, ps, 1e-5, 3);
      for (const auto& name : {kAudioEncoder, kVideoEncoder, kAudioHead, kVideoHead}) {
        const auto kb = name + ".body.layers.0.attn.k.b";
        v.check(all_zero(ana.at(kb), 1e-12), "total " + kb + " analytic gradient not zero");
        num.erase(kb);
      }
      std::vector<std::string> unreached;
      for (const auto& [name, g] : ana) {
        if (all_zero(g) && num.count(name)) unreached.push_back(name);
      }
      for (const auto& name : unreached) {
        for (double x : num.at(name).storage()) {
          v.check(std::isnan(x) || std::abs(x) < 1e-7, "total " + name + " unreached but moves");
        }
        num.erase(name);
      }
      record("total", compare_gradients(ana, num), seed);
    }
  }
  const double secs = seconds_since(t0);
  for (const auto& [loss, w] : worst) v.note(loss + " worst " + fmt(w, 2));
  v.note("5 seeds, " + fmt(secs, 3) + " s");
  v.check(secs < 60.0, "runtime over one minute");
  return v;
}

// ------------------------------------------------------------ 2

Verdict criterion2(Context&) {
  Verdict v;
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x0 = gaussian_f({4, 32}, rng.fork(2 * trial));
    const auto z = gaussian_f({4, 32}, rng.fork(2 * trial + 1));
    const double tau = rng.uniform();
    const auto s = head::make_flow_pair(x0, z, tau);
    bool ok = true;
    for (std::int64_t i = 0; i < x0.size(); ++i) {
      const float a = static_cast<float>(1.0 - tau) * x0[i] + static_cast<float>(tau) * z[i];
      ok = ok && s.x_tau[i] == a && s.v[i] == z[i] - x0[i];
    }
    v.check(ok, "flow pair trial " + std::to_string(trial));
  }
  // draw_flow builds its pairs by the same construction.
  const auto x0 = gaussian_f({12, 40}, Rng(3));
  const auto d = head::draw_flow(x0, 4, Rng(4));
  v.check(d.taus.size() == 3, "draw_flow sample count");
  bool draw_ok = true;
  for (std::int64_t k = 0; k < 3; ++k) {
    for (std::int64_t r = 0; r < 4; ++r) {
      for (std::int64_t c = 0; c < 40; ++c) {
        const auto row = 4 * k + r;
        const float z = d.target.at(row, c) + x0.at(row, c);
        const float tau = static_cast<float>(d.taus[static_cast<std::size_t>(k)]);
        draw_ok = draw_ok && std::abs(d.x_tau.at(row, c) - ((1.0f - tau) * x0.at(row, c) + tau * z)) <= 1e-6f;
      }
    }
  }
  v.check(draw_ok, "draw_flow construction");

  double worst = 0.0;
  for (int steps : {1, 10}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto x = gaussian_d({4, 32}, Rng(seed).fork("x0"));
      const auto z = gaussian_d({4, 32}, Rng(seed).fork("z"));
      head::VelocityField<double> oracle = [&](const Tensor<double>&, double) {
        Tensor<double> vel(x.shape());
        for (std::int64_t i = 0; i < x.size(); ++i) vel[i] = z[i] - x[i];
        return vel;
      };
      const auto out = head::euler_integrate(z, steps, oracle);
      const double err = max_abs_diff(out, x);
      worst = std::max(worst, err);
      v.check(err <= 1e-6, "euler steps=" + std::to_string(steps) + " seed " + std::to_string(seed));
    }
  }
  v.note("x_tau and v exact on 200 pairs; Euler oracle worst error " + fmt(worst, 2) + " for steps {1, 10}");
  return v;
}

// ------------------------------------------------------------ 3

Verdict criterion3(Context&) {
  Verdict v;
  const backbone::BackboneConfig cfg{codec::kVocab, {16, 4, 2, 32}};
  ParameterSet<float> ps;
  Rng rng(3);
  backbone::init(ps, cfg, rng);
  backbone::init_stop(ps, 16, rng);
  perturb(ps, 33, 0.3);
  const std::int64_t L = 14;
  const auto x = gaussian_f({L, 16}, Rng(5));
  auto full = [&](const Tensor<float>& tokens) {
    ag::Graph<float> g(false);
    Binder<float> b(g, ps, false);
    return backbone::forward_hidden(b, cfg, g.constant(tokens)).tensor();
  };
  const auto H = full(x);
  int pairs = 0;
  for (std::int64_t j = 0; j < L; ++j) {
    auto moved = x;
    for (std::int64_t c = 0; c < 16; ++c) moved.at(j, c) += 0.7f;
    const auto Hj = full(moved);
    for (std::int64_t i = 0; i < j; ++i, ++pairs) {
      bool same = true;
      for (std::int64_t c = 0; c < 16; ++c) same = same && Hj.at(i, c) == H.at(i, c);
      v.check(same, "H[" + std::to_string(i) + "] moved by position " + std::to_string(j));
    }
    v.check(max_abs_diff(Hj.slice_rows(j, 1), H.slice_rows(j, 1)) > 0.0, "position " + std::to_string(j) + " ignored its own token");
  }
  double worst = 0.0;
  for (std::int64_t chunk : std::vector<std::int64_t>{1, 3, 5, L}) {
    auto cache = backbone::make_cache(cfg);
    for (std::int64_t at = 0; at < L; at += chunk) {
      const auto n = std::min(chunk, L - at);
      const auto part = backbone::incremental_forward(ps, cfg, cache, x.slice_rows(at, n));
      worst = std::max(worst, max_abs_diff(part, H.slice_rows(at, n)));
    }
  }
  v.check(worst <= 1e-5, "cached path differs by " + fmt(worst));
  v.note(std::to_string(pairs) + " (i<j) pairs bit-identical on a 4-layer backbone; cached vs full max diff " + fmt(worst, 2));
  return v;
}

// ------------------------------------------------------------ 4

bool has_prefix(const std::string& name, const std::string& prefix) {
  return name.rfind(prefix + ".", 0) == 0;
}

Verdict criterion4(Context&) {
  Verdict v;
  auto cfg = TrainConfig::parse(kTinyTrain);
  v.check(TrainConfig{}.lambda_video == 8.0 && TrainConfig{}.alpha_stop == 1.0, "default weights are not 8 and 1");
  const auto corpus = build_corpus(cfg);
  auto model = init_model(cfg);
  auto opt = OptimizerState<float>::zeros_like(model.params);
  int logged = 0;
  for (std::int64_t step = 0; step < 6; ++step) {
    Rng rng = Rng(cfg.seed).fork("batches").fork(static_cast<std::uint64_t>(step));
    const auto batch = assemble_batch(corpus, cfg, rng);
    const auto m = train_step(model, opt, batch, step, Rng(cfg.seed).fork("loss").fork(static_cast<std::uint64_t>(step)));
    const auto j = nlohmann::json::parse(metrics_json(m));
    const double a = j["loss_audio"], vid = j["loss_video"], s = j["loss_stop"], total = j["loss_total"];
    v.check(total == a + 8.0 * vid + 1.0 * s, "logged total at step " + std::to_string(step));
    v.check(m.loss.total == a + 8.0 * vid + 1.0 * s, "returned total at step " + std::to_string(step));
    v.check(vid > 0.0, "mixed batch has no video loss");
    ++logged;
  }

  auto tts = cfg;
  tts.tts_fraction = 1.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const auto batch = assemble_batch(corpus, tts, rng);
    v.check(batch.count(Task::TTS) == static_cast<std::int64_t>(batch.examples.size()), "batch not all TTS");
    const auto loss = batch_loss(model.params, tts, batch, Rng(seed + 10), true, 1);
    v.check(loss.components.video == 0.0, "all-TTS video loss " + fmt(loss.components.video));
    for (const auto& [name, g] : loss.grads) {
      if (has_prefix(name, kVideoHead)) {
        v.check(std::all_of(g.storage().begin(), g.storage().end(), [](float x) { return x == 0.0f; }),
                "video head gradient " + name);
      }
    }
  }
  v.note(std::to_string(logged) + " logged steps satisfy total = audio + 8*video + 1*stop exactly; all-TTS batches give zero video loss and gradients");
  return v;
}

// ------------------------------------------------------------ 5

Verdict criterion5(Context&) {
  Verdict v;
  const auto cfg = TrainConfig::parse(kTinyTrain);
  const auto corpus = build_corpus(cfg);
  auto model = init_model(cfg);
  perturb(model.params, 11, 0.3);
  const auto parts = model.parts();
  const std::vector<std::vector<std::pair<int, Task>>> batches{
      {{0, Task::T2AV}, {1, Task::TTS}},
      {{2, Task::T2AV}, {3, Task::T2AV}, {4, Task::TTS}},
      {{5, Task::TTS}},
      {{6, Task::T2AV}, {7, Task::TTS}, {1, Task::T2AV}, {2, Task::TTS}}};
  int checked = 0;
  for (const auto& picks : batches) {
    TrainingBatch batch;
    for (auto [i, task] : picks) {
      const auto& pool = task == Task::T2AV ? corpus.t2av : corpus.tts;
      batch.examples.push_back(make_example(pool[static_cast<std::size_t>(i)], task, corpus.stats, cfg.model));
    }
    std::vector<double> probs;
    std::vector<int> labels;
    for (std::size_t e = 0; e < batch.examples.size(); ++e) {
      const auto& ex = batch.examples[e];
      // The trainer's teacher-forced inputs, with its noise streams.
      const Rng r = Rng(12).fork(static_cast<std::uint64_t>(e));
      const auto audio_in = corrupt_history(ex.audio, cfg.history_noise, r.fork("audio").fork("history"));
      ag::Graph<float> g(false);
      Binder<float> b(g, model.params, false);
      auto ea = patch::encode_patches(b, kAudioEncoder, parts.audio_encoder, g.constant(audio_in));
      ag::Var<float> ev;
      if (ex.task == Task::T2AV) {
        const auto video_in = corrupt_history(ex.video, cfg.history_noise, r.fork("video").fork("history"));
        ev = patch::encode_patches(b, kVideoEncoder, parts.video_encoder, g.constant(video_in));
      }
      auto seq = backbone::build_sequence(b, ex.script.symbols, ea, ev, cfg.model.fusion, ex.task);
      const auto H = backbone::forward_hidden(b, parts.backbone, seq.tokens).tensor();
      for (auto pos : seq.plan.stop_positions) probs.push_back(backbone::stop_probability(model.params, H.row(pos)));
      labels.insert(labels.end(), seq.plan.stop_labels.begin(), seq.plan.stop_labels.end());
    }
    const auto stops = std::count(labels.begin(), labels.end(), 1);
    const auto continues = static_cast<std::int64_t>(labels.size()) - stops;
    const double ratio = static_cast<double>(continues) / static_cast<double>(stops);
    v.check(backbone::stop_weight(labels) == ratio, "stop_weight is not the continue/stop ratio");
    // Manual weighted BCE with the counted ratio.
    double manual = 0.0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const double p = std::clamp(probs[k], 1e-7, 1.0 - 1e-7);
      manual += labels[k] ? -ratio * std::log(p) : -std::log(1.0 - p);
    }
    manual /= static_cast<double>(labels.size());
    const auto loss = batch_loss(model.params, cfg, batch, Rng(12), false, 1).components.stop;
    v.check(std::abs(loss - manual) <= 1e-5 * std::abs(manual),
            "batch stop loss " + fmt(loss, 8) + " vs weighted BCE " + fmt(manual, 8));
    v.check(std::abs(loss - backbone::stop_loss(probs, labels, 1.0)) > 1e-3 * std::abs(manual) || ratio == 1.0,
            "loss does not depend on the weight");
    ++checked;
  }
  // Pure label-count cases.
  v.check(backbone::stop_weight(std::vector<int>{0, 0, 0, 0, 1}) == 4.0, "ratio 4:1");
  v.check(backbone::stop_weight(std::vector<int>{0, 1, 0, 0, 1, 0, 1}) == 4.0 / 3.0, "ratio 4:3");
  v.note(std::to_string(checked) + " constructed batches: positive weight equals continue/stop count ratio");
  return v;
}

// ------------------------------------------------------------ 6 and 7

Verdict criterion6(Context& ctx) {
  Verdict v;
  const bool is_default = !ctx.e2e_config;
  TrainConfig cfg = ctx.e2e_config.value_or(TrainConfig{});
  v.check(cfg.model.width == 64 && cfg.total_steps == 5000 && cfg.batch_size == 32 &&
              cfg.corpus.t2av_scripts == 2000 && cfg.corpus.eval_scripts == 200,
          "configuration is not the default scale");
  const int threads = cfg.resolved_threads();
  const auto corpus = build_corpus(cfg);
  Model model = init_model(cfg);
  auto opt = OptimizerState<float>::zeros_like(model.params);
  std::map<std::int64_t, double> curve;
  const auto t0 = Clock::now();
  train(model, opt, corpus, [&](const StepMetrics& m) { curve[m.step] = m.loss.total; });
  const double train_secs = seconds_since(t0);
  ckpt::save(ctx.work / "e2e.ttav", model, &opt);
  ctx.trained = model;

  const auto report = evaluate(model, corpus.eval, GenMode::T2AV, cfg.sampler, cfg.seed, threads);
  const double amse = report.audio_mse().mean, vmse = report.video_mse().mean;
  const double sync = report.sync().mean, within = report.length_within(1), rho = report.length_spearman();
  std::ofstream(ctx.work / "e2e_rows.csv") << [&] {
    std::ostringstream os;
    write_report_csv(os, report);
    return os.str();
  }();

  v.check(train_secs <= 1800.0, "training took " + fmt(train_secs) + " s");
  v.check(amse <= 0.15, "audio MSE " + fmt(amse));
  v.check(vmse <= 0.15, "video MSE " + fmt(vmse));
  v.check(sync >= 0.8, "sync " + fmt(sync));
  v.check(within >= 0.9, "length within 1 patch " + fmt(within));
  v.check(rho > 0.8, "length Spearman " + fmt(rho));
  if (curve.count(0) && curve.count(500)) {
    const double drop = 1.0 - curve[500] / curve[0];
    v.note("loss drop over 500 steps " + fmt(100 * drop, 3) + "%");
    v.check(drop >= 0.3, "loss drop over 500 steps below 30%");
  }
  if (is_default) {
    // Regression values from the first seeded default run, checked in
    // addition to the thresholds above.
    struct Pin {
      const char* name;
      double pinned, observed, slack;
      bool lower_is_better;
    };
    const double observed_drop = curve.count(500) ? 1.0 - curve[500] / curve[0] : 0.0;
    for (const auto& p : {Pin{"audio MSE", 1.373, amse, 0.05, true}, Pin{"video MSE", 1.647, vmse, 0.05, true},
                          Pin{"sync", 0.9092, sync, 0.03, false}, Pin{"within-1", 1.0, within, 0.03, false},
                          Pin{"rho", 0.9911, rho, 0.02, false}, Pin{"500-step drop", 0.429, observed_drop, 0.03, false}}) {
      const bool ok = p.lower_is_better ? p.observed <= p.pinned + p.slack : p.observed >= p.pinned - p.slack;
      v.check(ok, std::string(p.name) + " regressed from pinned " + fmt(p.pinned) + " to " + fmt(p.observed));
    }
  }
  v.note(std::string(is_default ? "default config" : "override config") + ", " + std::to_string(threads) +
         " thread(s), train " + fmt(train_secs) + " s; " + std::to_string(report.rows.size()) +
         " held-out: audio MSE " + fmt(amse) + ", video MSE " + fmt(vmse) + ", sync " + fmt(sync) +
         ", within-1 " + fmt(within) + ", rho " + fmt(rho));
  return v;
}

Verdict criterion7(Context& ctx) {
  Verdict v;
  Model model;
  if (ctx.trained) {
    model = *ctx.trained;
  } else if (ctx.checkpoint) {
    model = ckpt::load(*ctx.checkpoint).model;
  } else if (fs::exists(ctx.work / "e2e.ttav")) {
    model = ckpt::load(ctx.work / "e2e.ttav").model;
  } else {
    v.check(false, "no trained model (run criterion 6 or pass --checkpoint)");
    return v;
  }
  const auto& cfg = model.config;
  const auto corpus = build_corpus(cfg);
  const int threads = cfg.resolved_threads();
  std::map<GenMode, double> vmse, sync;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  for (auto seed : seeds) {
    for (auto mode : {GenMode::T2AV, GenMode::A2V, GenMode::V2A}) {
      const auto r = evaluate(model, corpus.eval, mode, cfg.sampler, seed, threads);
      vmse[mode] += r.video_mse().mean / static_cast<double>(seeds.size());
      sync[mode] += r.sync().mean / static_cast<double>(seeds.size());
    }
  }
  v.check(vmse[GenMode::A2V] < vmse[GenMode::T2AV], "A2V video MSE not below T2AV");
  v.check(sync[GenMode::V2A] >= sync[GenMode::T2AV], "V2A sync below T2AV");
  v.note("3 seeds: video MSE A2V " + fmt(vmse[GenMode::A2V]) + " vs T2AV " + fmt(vmse[GenMode::T2AV]) +
         "; sync V2A " + fmt(sync[GenMode::V2A]) + " vs T2AV " + fmt(sync[GenMode::T2AV]));
  return v;
}

// ------------------------------------------------------------ 8

Verdict criterion8(Context& ctx) {
  Verdict v;
  const TrainConfig cfg = ctx.ablation_config.value_or(TrainConfig::parse(kAblation));
  const auto corpus = build_corpus(cfg);
  const std::vector<FusionMode> modes{FusionMode::add(), FusionMode::interleaved_av(), FusionMode::delayed(1),
                                      FusionMode::delayed(3)};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto t0 = Clock::now();
  const auto result = run_ablation(modes, cfg, seeds, corpus);
  std::ostringstream csv;
  write_ablation_csv(csv, result);
  std::ofstream(ctx.work / "ablation.csv") << csv.str();
  v.check(result.failures.empty(), std::to_string(result.failures.size()) + " constituent runs failed");
  v.check(result.rows.size() == 6, "expected 6 (mode, task) rows");
  for (const auto& r : result.rows) v.check(r.complete && r.seeds == 3, r.mode + "/" + r.task + " incomplete");
  v.check(result.ordering_violations == ordering_violations(result.rows), "violations not flagged");
  std::ostringstream table;
  for (const auto& r : result.rows) table << r.mode << "/" << r.task << " sync " << fmt(r.sync) << ", ";
  v.note(table.str() + fmt(seconds_since(t0)) + " s");
  if (result.ordering_violations.empty()) {
    v.note("ordering holds");
  } else {
    std::string s = "ordering violated (flagged in report): ";
    for (std::size_t i = 0; i < result.ordering_violations.size(); ++i) s += (i ? " | " : "") + result.ordering_violations[i];
    v.note(s);
  }
  return v;
}

// ------------------------------------------------------------ 9

Verdict criterion9(Context& ctx) {
  Verdict v;
  auto cfg = TrainConfig::parse(kTinyTrain);
  const auto corpus = build_corpus(cfg);
  Model model = init_model(cfg);
  auto opt = OptimizerState<float>::zeros_like(model.params);
  train(model, opt, corpus);
  const auto bytes = ckpt::encode(model, &opt);
  const auto back = ckpt::decode(bytes);
  v.check(back.model.params.tensors == model.params.tensors, "parameters differ after decode");
  v.check(back.optimizer.m == opt.m && back.optimizer.v == opt.v && back.optimizer.step == opt.step, "optimizer differs");
  v.check(ckpt::encode(back.model, &back.optimizer) == bytes, "re-encoding changes bytes");
  const auto path = ctx.work / "roundtrip.ttav";
  ckpt::save(path, model, &opt);
  v.check(ckpt::load(path).model.params.tensors == model.params.tensors, "file round trip differs");

  int streams = 0;
  for (auto m : {codec::Modality::Audio, codec::Modality::Video}) {
    for (std::int64_t frames : {0, 1, 13, 64}) {
      codec::LatentStream s{gaussian_f({frames, codec::modality_dim(m)}, Rng(static_cast<std::uint64_t>(frames))), m};
      const auto enc = tlat::encode(s);
      const auto dec = tlat::decode(enc);
      v.check(dec.frames == s.frames && dec.modality == m && tlat::encode(dec) == enc, "TLAT round trip");
      const auto file = ctx.work / "roundtrip.tlat";
      tlat::write(file, s);
      v.check(tlat::read(file).frames == s.frames, "TLAT file round trip");
      ++streams;
    }
  }

  // Corruption: every outcome is a decoded object or a library error.
  const codec::LatentStream sample{gaussian_f({16, 32}, Rng(8)), codec::Modality::Audio};
  const auto tlat_bytes = tlat::encode(sample);
  int rejected = 0, trials = 0;
  auto attempt = [&](const std::function<void()>& fn, bool must_reject, const std::string& what) {
    ++trials;
    try {
      fn();
      v.check(!must_reject, what + " accepted");
    } catch (const Error&) {
      ++rejected;
    } catch (const std::exception& e) {
      v.check(false, what + " raised a non-library exception: " + e.what());
    }
  };
  for (std::size_t n = 0; n < tlat_bytes.size(); ++n) {
    attempt([&] { tlat::decode({tlat_bytes.begin(), tlat_bytes.begin() + static_cast<std::ptrdiff_t>(n)}); }, true,
            "truncated TLAT");
  }
  for (std::size_t n = 0; n < bytes.size(); n += (n < 512 ? 1 : 1013)) {
    attempt([&] { ckpt::decode({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n)}); }, true,
            "truncated checkpoint");
  }
  Rng rng(9);
  for (int t = 0; t < 300; ++t) {
    auto b = tlat_bytes;
    b[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(b.size()) - 1))] ^=
        static_cast<std::uint8_t>(1u << rng.uniform_int(0, 7));
    attempt([&] { tlat::decode(b); }, false, "flipped TLAT");
    auto c = bytes;
    const auto limit = t % 2 ? static_cast<std::int64_t>(c.size()) : std::min<std::int64_t>(2048, c.size());
    c[static_cast<std::size_t>(rng.uniform_int(0, limit - 1))] ^= static_cast<std::uint8_t>(1u << rng.uniform_int(0, 7));
    attempt([&] { ckpt::decode(c); }, false, "flipped checkpoint");
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'Z';
  attempt([&] { ckpt::decode(bad_magic); }, true, "bad checkpoint magic");
  auto bad_tlat = tlat_bytes;
  bad_tlat[4] = 9;
  attempt([&] { tlat::decode(bad_tlat); }, true, "bad TLAT version");
  v.note("checkpoint (" + std::to_string(bytes.size()) + " bytes) and " + std::to_string(streams) +
         " TLAT streams round-trip bit-exactly; " + std::to_string(rejected) + "/" + std::to_string(trials) +
         " corrupted inputs rejected with explicit errors, no crashes");
  return v;
}

// ------------------------------------------------------------ 10

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return files;
}

Verdict criterion10(Context& ctx) {
  Verdict v;
  const auto root = ctx.work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto config = root / "smoke.cfg";
  std::ofstream(config) << kSmoke;
  const auto ablate_cfg = root / "ablate.cfg";
  {
    // The ablation trains several small models; keep them short.
    std::string text = kSmoke;
    text.replace(text.find("total_steps=20"), 14, "total_steps=3");
    std::ofstream(ablate_cfg) << text;
  }
  const auto request = root / "request.txt";
  std::ofstream(request) << "script=5,9,12\nscript_seed=2\nseed=4\n";

  auto run = [&](const std::string& name, const std::function<std::vector<std::string>(const fs::path&)>& args) {
    std::string outputs[2];
    std::map<std::string, std::string> files[2];
    for (int rep = 0; rep < 2; ++rep) {
      const auto out = root / (name + "_" + std::to_string(rep));
      std::ostringstream o, e;
      const int code = cli::run(args(out), o, e);
      v.check(code == 0, name + " exited " + std::to_string(code) + ": " + e.str());
      outputs[rep] = o.str();
      if (fs::exists(out)) files[rep] = snapshot(out);
    }
    // Stdout echoes the output directory; compare it with that path removed.
    auto strip = [&](std::string s, int rep) {
      const auto p = (root / (name + "_" + std::to_string(rep))).string();
      for (auto at = s.find(p); at != std::string::npos; at = s.find(p)) s.erase(at, p.size());
      return s;
    };
    v.check(strip(outputs[0], 0) == strip(outputs[1], 1), name + " stdout differs");
    v.check(files[0] == files[1], name + " artifacts differ");
    return files[0].size();
  };

  std::size_t artifacts = 0;
  artifacts += run("gen-corpus", [&](const fs::path& out) {
    return std::vector<std::string>{"gen-corpus", "--config", config.string(), "--out", out.string()};
  });
  artifacts += run("train", [&](const fs::path& out) {
    return std::vector<std::string>{"train", "--config", config.string(), "--out", out.string()};
  });
  const auto ck = (root / "train_0" / "model.ttav").string();
  artifacts += run("generate", [&](const fs::path& out) {
    return std::vector<std::string>{"generate", "--checkpoint", ck, "--config", request.string(), "--out", out.string()};
  });
  const auto cond = (root / "gen-corpus_0" / "eval" / "00000.audio.tlat").string();
  artifacts += run("generate-a2v", [&](const fs::path& out) {
    return std::vector<std::string>{"generate", "--checkpoint", ck, "--config", request.string(), "--mode", "a2v",
                                    "--cond-stream", cond, "--out", out.string()};
  });
  artifacts += run("eval", [&](const fs::path& out) {
    return std::vector<std::string>{"eval", "--checkpoint", ck, "--mode", "t2av,a2v,v2a", "--seeds", "1,2", "--out", out.string()};
  });
  artifacts += run("ablate", [&](const fs::path& out) {
    return std::vector<std::string>{"ablate", "--config", ablate_cfg.string(), "--mode", "add,delay:1", "--seeds", "1,2",
                                    "--out", out.string()};
  });
  run("inspect", [&](const fs::path&) { return std::vector<std::string>{"inspect", "--checkpoint", ck}; });
  v.note("7 commands run twice; " + std::to_string(artifacts) + " artifacts and stdout byte-identical");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks", "ttav_acceptance"};
  std::string criteria = "1,2,3,4,5,6,7,8,9,10", work, e2e_config, checkpoint, ablation_config;
  app.add_option("--criteria", criteria, "comma-separated criterion numbers");
  app.add_option("--work", work, "scratch directory for artifacts");
  app.add_option("--e2e-config", e2e_config, "configuration for criterion 6 instead of the defaults");
  app.add_option("--checkpoint", checkpoint, "trained model for criterion 7 when 6 is not run");
  app.add_option("--ablation-config", ablation_config, "shared configuration for criterion 8");
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.work = work.empty() ? fs::temp_directory_path() / "ttav_acceptance" : fs::path(work);
  fs::create_directories(ctx.work);
  try {
    if (!e2e_config.empty()) ctx.e2e_config = cli::load_config(e2e_config);
    if (!checkpoint.empty()) ctx.checkpoint = checkpoint;
    if (!ablation_config.empty()) ctx.ablation_config = cli::load_config(ablation_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  const std::map<int, std::pair<const char*, std::function<Verdict(Context&)>>> all{
      {1, {"gradient oracle", criterion1}},       {2, {"flow identities", criterion2}},
      {3, {"causality", criterion3}},             {4, {"loss arithmetic", criterion4}},
      {5, {"stop-weight law", criterion5}},       {6, {"toy end-to-end T2AV", criterion6}},
      {7, {"conditional modes", criterion7}},     {8, {"ablation ordering (soft)", criterion8}},
      {9, {"serialization", criterion9}},         {10, {"determinism", criterion10}}};

  std::set<int> selected;
  std::stringstream list(criteria);
  for (std::string item; std::getline(list, item, ',');) {
    try {
      const int n = std::stoi(item);
      if (!all.count(n)) throw std::out_of_range(item);
      selected.insert(n);
    } catch (const std::exception&) {
      std::cerr << "error: unknown criterion '" << item << "'\n";
      return 1;
    }
  }

  bool ok = true;
  for (int n : selected) {
    const auto& [name, fn] = all.at(n);
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn(ctx);
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    ok = ok && v.passed();
    std::cout << "criterion " << n << " " << (v.passed() ? "PASS" : "FAIL") << " [" << name << "] "
              << v.summary() << " (" << fmt(seconds_since(t0), 3) << " s)" << std::endl;
  }
  return ok ? 0 : 2;
}
