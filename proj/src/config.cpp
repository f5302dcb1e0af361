#include "ttav/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>
#include <vector>

namespace ttav {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    try {
      out = static_cast<T>(std::stod(v, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError("invalid number for '" + key + "': " + v);
  } else {
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ConfigError("invalid integer for '" + key + "': " + v);
    }
  }
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One table drives both parse() and to_text() so they cannot drift apart.
struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define TTAV_INT(name, expr)                                                                   \
  Field {                                                                                      \
    name, [](TrainConfig& c, const std::string& v) {                                           \
      c.expr = parse_number<std::remove_reference_t<decltype(c.expr)>>(name, v);               \
    },                                                                                         \
        [](const TrainConfig& c) { return std::to_string(c.expr); }                            \
  }
#define TTAV_REAL(name, expr)                                                                  \
  Field {                                                                                      \
    name, [](TrainConfig& c, const std::string& v) { c.expr = parse_number<double>(name, v); }, \
        [](const TrainConfig& c) { return fmt_double(c.expr); }                                \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      TTAV_INT("seed", seed),
      TTAV_REAL("peak_lr", peak_lr),
      TTAV_REAL("warmup_fraction", warmup_fraction),
      TTAV_INT("batch_size", batch_size),
      TTAV_INT("total_steps", total_steps),
      TTAV_REAL("lambda_video", lambda_video),
      TTAV_REAL("alpha_stop", alpha_stop),
      TTAV_REAL("p_drop", p_drop),
      TTAV_REAL("history_noise", history_noise),
      TTAV_REAL("context_noise", context_noise),
      TTAV_REAL("tts_fraction", tts_fraction),
      TTAV_REAL("grad_clip", grad_clip),
      TTAV_REAL("weight_decay", weight_decay),
      TTAV_INT("threads", threads),
      TTAV_INT("log_every", log_every),
      TTAV_INT("checkpoint_every", checkpoint_every),
      TTAV_INT("model.patch", model.patch),
      TTAV_INT("model.width", model.width),
      TTAV_INT("model.encoder_layers", model.encoder_layers),
      TTAV_INT("model.encoder_heads", model.encoder_heads),
      TTAV_INT("model.backbone_layers", model.backbone_layers),
      TTAV_INT("model.backbone_heads", model.backbone_heads),
      TTAV_INT("model.head_layers", model.head_layers),
      TTAV_INT("model.head_heads", model.head_heads),
      TTAV_INT("model.head_width", model.head_width),
      TTAV_INT("model.ff_mult", model.ff_mult),
      Field{"model.fusion",
            [](TrainConfig& c, const std::string& v) { c.model.fusion = FusionMode::parse(v); },
            [](const TrainConfig& c) { return c.model.fusion.name(); }},
      TTAV_INT("codec.seed", codec.codec_seed),
      TTAV_INT("codec.min_duration", codec.min_duration),
      TTAV_INT("codec.max_duration", codec.max_duration),
      TTAV_REAL("codec.coarticulation", codec.coarticulation),
      TTAV_REAL("codec.noise_std", codec.noise_std),
      TTAV_REAL("codec.timbre_std", codec.timbre_std),
      TTAV_REAL("codec.pose_amplitude", codec.pose_amplitude),
      TTAV_INT("corpus.seed", corpus.corpus_seed),
      TTAV_INT("corpus.t2av_scripts", corpus.t2av_scripts),
      TTAV_INT("corpus.tts_scripts", corpus.tts_scripts),
      TTAV_INT("corpus.eval_scripts", corpus.eval_scripts),
      TTAV_INT("corpus.min_patches", corpus.min_patches),
      TTAV_INT("corpus.max_patches", corpus.max_patches),
      TTAV_INT("sampler.steps", sampler.steps),
      TTAV_REAL("sampler.temperature", sampler.temperature),
      TTAV_REAL("sampler.cfg_scale", sampler.cfg_scale),
      TTAV_REAL("sampler.stop_threshold", sampler.stop_threshold),
      TTAV_INT("sampler.max_patches", sampler.max_patches),
  };
  return table;
}

#undef TTAV_INT
#undef TTAV_REAL

}  // namespace

FusionMode FusionMode::delayed(int k) {
  if (k < 1) throw ConfigError("delay must be at least one patch");
  return {FusionKind::Delay, k};
}

std::string FusionMode::name() const {
  switch (kind) {
    case FusionKind::Add: return "add";
    case FusionKind::InterleavedAV: return "interleaved_av";
    case FusionKind::InterleavedVA: return "interleaved_va";
    case FusionKind::Delay: return "delay:" + std::to_string(delay);
  }
  return "?";
}

FusionMode FusionMode::parse(const std::string& text) {
  if (text == "add") return add();
  if (text == "interleaved_av") return interleaved_av();
  if (text == "interleaved_va") return interleaved_va();
  if (text.rfind("delay:", 0) == 0) return delayed(parse_number<int>("fusion", text.substr(6)));
  throw ConfigError("unknown fusion mode '" + text + "'");
}

void ModelConfig::validate() const {
  if (patch < 1) throw ConfigError("patch size must be ≥ 1");
  if (width < 2 || head_width < 2) throw ConfigError("widths must be ≥ 2");
  auto check = [](const nn::TransformerConfig& t, const char* what) {
    if (t.layers < 1 || t.heads < 1 || t.width % t.heads != 0 || (t.width / t.heads) % 2 != 0) {
      throw ConfigError(std::string(what) + ": width must split into an even per-head width");
    }
  };
  check(encoder_body(), "encoder");
  check(backbone_body(), "backbone");
  check(head_body(), "head");
  if (ff_mult < 1) throw ConfigError("ff_mult must be ≥ 1");
}

void SamplerSettings::validate() const {
  if (steps < 1) throw ConfigError("sampler steps must be ≥ 1");
  if (!(temperature >= 0.0 && temperature <= 1.0)) throw ConfigError("temperature must be in [0, 1]");
  if (!(stop_threshold > 0.0 && stop_threshold < 1.0)) throw ConfigError("stop threshold must be in (0, 1)");
  if (max_patches < 1) throw ConfigError("max_patches must be ≥ 1");
}

void TrainConfig::validate() const {
  model.validate();
  sampler.validate();
  if (!(lambda_video > 0.0) || !(alpha_stop > 0.0)) throw ConfigError("λ and α must be positive");
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ConfigError("p_drop must be in [0, 1)");
  if (!(history_noise >= 0.0 && std::isfinite(history_noise))) throw ConfigError("history_noise must be ≥ 0");
  if (!(context_noise >= 0.0 && std::isfinite(context_noise))) throw ConfigError("context_noise must be ≥ 0");
  if (!(tts_fraction >= 0.0 && tts_fraction <= 1.0)) throw ConfigError("tts_fraction must be in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be ≥ 1");
  if (total_steps < 1) throw ConfigError("total_steps must be ≥ 1");
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in (0, 1)");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (corpus.min_patches < 1 || corpus.max_patches < corpus.min_patches) {
    throw ConfigError("corpus patch range is empty");
  }
  if (corpus.t2av_scripts < 0 || corpus.tts_scripts < 0 || corpus.eval_scripts < 0) {
    throw ConfigError("corpus sizes must be non-negative");
  }
  if (threads < 0) throw ConfigError("threads must be ≥ 0");
}

int TrainConfig::resolved_threads() const {
  if (threads > 0) return threads;
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("duplicate key '" + key + "'");
  }
  return kv;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  for (const auto& [key, value] : parse_key_values(text)) {
    bool found = false;
    for (const auto& f : fields()) {
      if (key == f.key) {
        f.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace ttav
