#include "ttav/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace ttav::backbone {

void init(ParameterSet<float>& ps, const BackboneConfig& cfg, Rng& rng) {
  const auto width = cfg.body.width;
  init::embedding(ps, kPrefix + ".text_embedding", cfg.vocab, width, rng);
  init::embedding(ps, kPrefix + ".task_tag", 2, width, rng);
  init::embedding(ps, kPrefix + ".pad", 1, width, rng);
  nn::init_transformer(ps, kPrefix + ".body", cfg.body, rng);
  init::layer_norm(ps, kPrefix + ".final_ln", width);
}

void init_stop(ParameterSet<float>& ps, std::int64_t width, Rng& rng) {
  init::linear(ps, kStopPrefix + ".fc1", width, width, rng);
  init::linear(ps, kStopPrefix + ".fc2", width, 1, rng);
}

const char* role_name(Role r) {
  switch (r) {
    case Role::TaskTag: return "task_tag";
    case Role::Text: return "text";
    case Role::Joint: return "joint";
    case Role::Audio: return "audio";
    case Role::Video: return "video";
    case Role::Pad: return "pad";
  }
  return "?";
}

LayoutPlan plan_layout(std::int64_t text_len, std::int64_t patches, FusionMode mode, Task task) {
  if (text_len < 0) throw ShapeError("negative text length");
  if (patches < 1) throw ShapeError("layout needs at least one patch");
  if (mode.kind == FusionKind::Delay && mode.delay < 1) throw ConfigError("delay must be ≥ 1");

  LayoutPlan p;
  p.text_len = text_len;
  p.patches = patches;
  p.mode = mode;
  p.task = task;
  const bool tts = task == Task::TTS;
  auto push = [&](Role r, Source a, Source b, std::int64_t patch) {
    p.roles.push_back(r);
    p.first.push_back(a);
    p.second.push_back(b);
    p.patch_index.push_back(patch);
  };
  auto video = [&](std::int64_t i) {
    return tts ? Source{SourceKind::Pad, 0} : Source{SourceKind::Video, i};
  };
  auto stop = [&](std::int64_t position, std::int64_t i) {
    p.stop_positions.push_back(position);
    p.stop_labels.push_back(i == patches - 1 ? 1 : 0);
  };

  push(Role::TaskTag, {SourceKind::Tag, 0}, {}, -1);
  for (std::int64_t m = 0; m < text_len; ++m) push(Role::Text, {SourceKind::Text, m}, {}, -1);
  const std::int64_t base = 1 + text_len;
  const Role video_role = tts ? Role::Pad : Role::Video;

  switch (mode.kind) {
    case FusionKind::Add:
      for (std::int64_t i = 0; i < patches; ++i) {
        push(Role::Joint, {SourceKind::Audio, i}, video(i), i);
        p.audio_from.push_back(base + i - 1);
        if (!tts) p.video_from.push_back(base + i - 1);
        stop(base + i, i);
      }
      break;
    case FusionKind::InterleavedAV:
      for (std::int64_t i = 0; i < patches; ++i) {
        push(Role::Audio, {SourceKind::Audio, i}, {}, i);
        push(video_role, video(i), {}, i);
        p.audio_from.push_back(base + 2 * i - 1);
        if (!tts) p.video_from.push_back(base + 2 * i);
        stop(base + 2 * i + 1, i);
      }
      break;
    case FusionKind::InterleavedVA:
      for (std::int64_t i = 0; i < patches; ++i) {
        push(video_role, video(i), {}, i);
        push(Role::Audio, {SourceKind::Audio, i}, {}, i);
        if (!tts) p.video_from.push_back(base + 2 * i - 1);
        p.audio_from.push_back(base + 2 * i);
        stop(base + 2 * i + 1, i);
      }
      break;
    case FusionKind::Delay: {
      const std::int64_t k = mode.delay;
      for (std::int64_t s = 0; s < patches + k; ++s) {
        Source a = s < patches ? Source{SourceKind::Audio, s} : Source{SourceKind::Pad, 0};
        Source v = s >= k ? video(s - k) : Source{SourceKind::Pad, 0};
        push(Role::Joint, a, v, s);
      }
      for (std::int64_t i = 0; i < patches; ++i) {
        p.audio_from.push_back(base + i - 1);
        if (!tts) p.video_from.push_back(base + i + k - 1);
        stop(base + i, i);
      }
      break;
    }
  }
  return p;
}

template <typename T>
SequenceLayout<T> build_sequence(Binder<T>& b, const std::vector<int>& text,
                                 ag::Var<T> audio_embs, ag::Var<T> video_embs, FusionMode mode,
                                 Task task) {
  auto& g = b.graph();
  auto text_table = b(kPrefix + ".text_embedding");
  const auto width = text_table.cols();
  const auto vocab = text_table.rows();
  if (!audio_embs.valid() || audio_embs.cols() != width) {
    throw ShapeError("build_sequence: audio embeddings must be [N, " + std::to_string(width) + "]");
  }
  const auto n = audio_embs.rows();
  const bool tts = task == Task::TTS;
  if (!tts) {
    if (!video_embs.valid() || video_embs.cols() != width) {
      throw ShapeError("build_sequence: video embeddings must be [N, " + std::to_string(width) + "]");
    }
    if (video_embs.rows() != n) {
      throw ShapeError("build_sequence: " + std::to_string(n) + " audio vs " +
                       std::to_string(video_embs.rows()) + " video embeddings");
    }
  }
  for (int s : text) {
    if (s < 0 || s >= vocab) throw DomainError("unknown text symbol " + std::to_string(s));
  }

  SequenceLayout<T> out;
  out.plan = plan_layout(static_cast<std::int64_t>(text.size()), n, mode, task);

  // Source table rows: tag | text | audio | video | pad | zero.
  std::vector<ag::Var<T>> parts;
  parts.push_back(ag::gather_rows(b(kPrefix + ".task_tag"),
                                  std::vector<std::int64_t>{static_cast<std::int64_t>(task)}));
  const std::int64_t text_off = 1;
  if (!text.empty()) {
    parts.push_back(ag::gather_rows(text_table, std::vector<std::int64_t>(text.begin(), text.end())));
  }
  const std::int64_t audio_off = text_off + static_cast<std::int64_t>(text.size());
  parts.push_back(audio_embs);
  std::int64_t video_off = audio_off + n;
  if (!tts) parts.push_back(video_embs);
  const std::int64_t pad_off = video_off + (tts ? 0 : n);
  parts.push_back(b(kPrefix + ".pad"));
  const std::int64_t zero_off = pad_off + 1;
  parts.push_back(g.constant(1, width, std::vector<T>(static_cast<std::size_t>(width), T(0))));
  auto table = ag::concat_rows(parts);

  auto row_of = [&](const Source& s) -> std::int64_t {
    switch (s.kind) {
      case SourceKind::None: return zero_off;
      case SourceKind::Tag: return 0;
      case SourceKind::Text: return text_off + s.index;
      case SourceKind::Audio: return audio_off + s.index;
      case SourceKind::Video: return video_off + s.index;
      case SourceKind::Pad: return pad_off;
    }
    return zero_off;
  };
  std::vector<std::int64_t> ia, ib;
  for (std::int64_t i = 0; i < out.plan.length(); ++i) {
    ia.push_back(row_of(out.plan.first[i]));
    ib.push_back(row_of(out.plan.second[i]));
  }
  out.tokens = ag::add(ag::gather_rows(table, std::move(ia)), ag::gather_rows(table, std::move(ib)));
  return out;
}

template <typename T>
ag::Var<T> forward_hidden(Binder<T>& b, const BackboneConfig& cfg, ag::Var<T> tokens) {
  const auto len = tokens.rows();
  if (len == 0) throw ShapeError("forward_hidden: empty layout");
  if (tokens.cols() != cfg.body.width) throw ShapeError("forward_hidden: token width mismatch");
  std::vector<std::int64_t> positions(static_cast<std::size_t>(len));
  for (std::int64_t i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;
  auto spec = ag::AttentionSpec::self({len}, cfg.body.heads, true);
  auto x = nn::transformer(b, kPrefix + ".body", cfg.body, tokens, spec, &positions);
  return nn::layer_norm(b, kPrefix + ".final_ln", x);
}

KvCache make_cache(const BackboneConfig& cfg) {
  KvCache c;
  c.layers.resize(static_cast<std::size_t>(cfg.body.layers));
  return c;
}

Tensor<float> incremental_forward(const ParameterSet<float>& ps, const BackboneConfig& cfg,
                                  KvCache& cache, const Tensor<float>& tokens) {
  if (cache.layers.size() != static_cast<std::size_t>(cfg.body.layers)) {
    throw ShapeError("KV cache has " + std::to_string(cache.layers.size()) + " layers, model has " +
                     std::to_string(cfg.body.layers));
  }
  for (const auto& l : cache.layers) {
    if (l.len != cache.length) throw ShapeError("KV cache layers disagree on length");
  }
  const auto n = tokens.rows();
  if (n == 0 || tokens.cols() != cfg.body.width) throw ShapeError("incremental_forward: bad tokens");

  ag::Graph<float> g(false);
  Binder<float> b(g, ps, false);
  std::vector<std::int64_t> positions;
  for (std::int64_t i = 0; i < n; ++i) positions.push_back(cache.length + i);
  ag::AttentionSpec spec;
  spec.segments = {{0, n, 0, cache.length + n}};
  spec.heads = cfg.body.heads;
  spec.causal = true;
  auto x = g.constant(tokens.reshaped({n, tokens.cols()}));
  for (int l = 0; l < cfg.body.layers; ++l) {
    x = nn::transformer_layer(b, nn::layer_prefix(kPrefix + ".body", l), cfg.body, x, spec,
                              &positions, &cache.layers[static_cast<std::size_t>(l)]);
  }
  cache.length += n;
  return nn::layer_norm(b, kPrefix + ".final_ln", x).tensor();
}

Tensor<float> tag_token(const ParameterSet<float>& ps, Task task) {
  return ps.at(kPrefix + ".task_tag").slice_rows(static_cast<std::int64_t>(task), 1);
}

Tensor<float> text_tokens(const ParameterSet<float>& ps, const std::vector<int>& text) {
  const auto& table = ps.at(kPrefix + ".text_embedding");
  Tensor<float> out({static_cast<std::int64_t>(text.size()), table.cols()});
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] < 0 || text[i] >= table.rows()) {
      throw DomainError("unknown text symbol " + std::to_string(text[i]));
    }
    auto src = table.row(text[i]);
    std::copy(src.begin(), src.end(), out.row(static_cast<std::int64_t>(i)).begin());
  }
  return out;
}

std::span<const float> pad_embedding(const ParameterSet<float>& ps) {
  return ps.at(kPrefix + ".pad").row(0);
}

template <typename T>
ag::Var<T> stop_logits(Binder<T>& b, ag::Var<T> hidden) {
  return nn::linear(b, kStopPrefix + ".fc2", ag::gelu(nn::linear(b, kStopPrefix + ".fc1", hidden)));
}

double stop_logit(const ParameterSet<float>& ps, std::span<const float> h) {
  ag::Graph<float> g(false);
  Binder<float> b(g, ps, false);
  auto x = g.constant(1, static_cast<std::int64_t>(h.size()), std::vector<float>(h.begin(), h.end()));
  return stop_logits(b, x).item();
}

double stop_probability(const ParameterSet<float>& ps, std::span<const float> h) {
  return 1.0 / (1.0 + std::exp(-stop_logit(ps, h)));
}

double stop_weight(std::span<const int> labels) {
  std::int64_t stops = 0, cont = 0;
  for (int y : labels) {
    if (y == 1) {
      ++stops;
    } else if (y == 0) {
      ++cont;
    } else {
      throw DomainError("stop labels must be 0 or 1");
    }
  }
  if (stops == 0) throw DomainError("stop loss: batch has no stop label");
  return static_cast<double>(cont) / static_cast<double>(stops);
}

double stop_loss(std::span<const double> probs, std::span<const int> labels) {
  return stop_loss(probs, labels, stop_weight(labels));
}

double stop_loss(std::span<const double> probs, std::span<const int> labels, double weight) {
  if (probs.size() != labels.size()) throw ShapeError("stop loss: length mismatch");
  if (probs.empty()) throw ShapeError("stop loss: empty batch");
  constexpr double kClamp = 1e-7;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kClamp, 1.0 - kClamp);
    total -= labels[i] == 1 ? weight * std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

template <typename T>
ag::Var<T> stop_loss_from_logits(ag::Var<T> logits, std::span<const int> labels, double weight,
                                 double denom) {
  if (static_cast<std::size_t>(logits.rows() * logits.cols()) != labels.size()) {
    throw ShapeError("stop loss: logits/labels length mismatch");
  }
  if (!(denom > 0.0)) throw DomainError("stop loss: denominator must be positive");
  std::vector<T> wpos(labels.size()), wneg(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    wpos[i] = labels[i] == 1 ? static_cast<T>(weight / denom) : T(0);
    wneg[i] = labels[i] == 1 ? T(0) : static_cast<T>(1.0 / denom);
  }
  auto pos = ag::softplus(ag::scale(logits, T(-1)));
  auto neg = ag::softplus(logits);
  return ag::add(ag::weighted_sum(pos, std::move(wpos)), ag::weighted_sum(neg, std::move(wneg)));
}

#define TTAV_INSTANTIATE(T)                                                                   \
  template SequenceLayout<T> build_sequence(Binder<T>&, const std::vector<int>&, ag::Var<T>,  \
                                            ag::Var<T>, FusionMode, Task);                    \
  template ag::Var<T> forward_hidden(Binder<T>&, const BackboneConfig&, ag::Var<T>);          \
  template ag::Var<T> stop_logits(Binder<T>&, ag::Var<T>);                                    \
  template ag::Var<T> stop_loss_from_logits(ag::Var<T>, std::span<const int>, double, double);

TTAV_INSTANTIATE(float)
TTAV_INSTANTIATE(double)

#undef TTAV_INSTANTIATE

}  // namespace ttav::backbone
