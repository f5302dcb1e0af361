#include "ttav/checkpoint.hpp"

#include <cmath>
#include <set>

#include "ttav/binary_io.hpp"

namespace ttav::ckpt {
namespace {

constexpr const char* kStats = "__stats.";
constexpr const char* kOptimM = "__optim.m.";
constexpr const char* kOptimV = "__optim.v.";
constexpr const char* kMetaStep = "__meta.step";
constexpr const char* kOptimStep = "__optim.step";

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }
bool reserved(const std::string& name) { return starts_with(name, "__"); }

Tensor<float> counter_tensor(std::int64_t v) {
  if (v < 0) throw Error("negative step counter");
  const auto u = static_cast<std::uint64_t>(v);
  return Tensor<float>({4}, std::vector<float>{static_cast<float>(u & 0xFFFF),
                                               static_cast<float>((u >> 16) & 0xFFFF),
                                               static_cast<float>((u >> 32) & 0xFFFF),
                                               static_cast<float>((u >> 48) & 0xFFFF)});
}

std::int64_t counter_value(const Tensor<float>& t, io::ByteReader& r) {
  if (t.shape() != Shape{4}) r.fail("step counter has the wrong shape");
  std::uint64_t u = 0;
  for (int i = 0; i < 4; ++i) {
    const float c = t[i];
    if (!(c >= 0.0f && c <= 65535.0f) || c != std::floor(c)) r.fail("corrupt step counter");
    u |= static_cast<std::uint64_t>(c) << (16 * i);
  }
  if (u > static_cast<std::uint64_t>(INT64_MAX)) r.fail("step counter overflow");
  return static_cast<std::int64_t>(u);
}

Tensor<float> vec(const std::vector<float>& v) { return Tensor<float>::vector(v); }

void write_tensor(io::ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  if (name.size() > UINT16_MAX) throw Error("tensor name too long");
  if (t.rank() > 255) throw Error("tensor rank too large");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.text(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > UINT32_MAX) throw Error("tensor extent too large");
    w.u32(static_cast<std::uint32_t>(e));
  }
  for (float v : t.data()) w.f32(v);
}

struct Parsed {
  std::uint16_t version = 0;
  std::string config_text;
  std::vector<NamedTensor> tensors;
};

Parsed parse(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes, "corrupt checkpoint");
  Parsed p;
  if (r.text(4) != "TTAV") r.fail("bad magic");
  p.version = r.u16();
  if (p.version != kVersion) r.fail("unsupported version " + std::to_string(p.version));
  const auto cfg_len = r.u32();
  if (cfg_len > r.remaining()) r.fail("config blob overruns the file");
  p.config_text = r.text(cfg_len);
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.text(r.u16());
    if (nt.name.empty()) r.fail("empty tensor name");
    const auto rank = r.u8();
    Shape shape;
    std::uint64_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(r.u32());
      n *= static_cast<std::uint64_t>(shape.back());
      if (n > r.remaining()) r.fail("tensor '" + nt.name + "' overruns the file");
    }
    if (n * sizeof(float) > r.remaining()) r.fail("tensor '" + nt.name + "' overruns the file");
    std::vector<float> data(static_cast<std::size_t>(n));
    r.f32_array(data.data(), data.size());
    nt.tensor = Tensor<float>(std::move(shape), std::move(data));
    p.tensors.push_back(std::move(nt));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last tensor");
  return p;
}

}  // namespace

bool same_model_config(const ModelConfig& a, const ModelConfig& b) {
  return a.patch == b.patch && a.width == b.width && a.encoder_layers == b.encoder_layers &&
         a.encoder_heads == b.encoder_heads && a.backbone_layers == b.backbone_layers &&
         a.backbone_heads == b.backbone_heads && a.head_layers == b.head_layers &&
         a.head_heads == b.head_heads && a.head_width == b.head_width && a.ff_mult == b.ff_mult &&
         a.fusion == b.fusion;
}

std::vector<std::uint8_t> encode(const Model& model, const OptimizerState<float>* optimizer) {
  io::ByteWriter w;
  w.text("TTAV");
  w.u16(kVersion);
  const auto text = model.config.to_text();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.text(text);

  std::vector<NamedTensor> out;
  for (const auto& [name, t] : model.params.tensors) out.push_back({name, t});
  out.push_back({std::string(kStats) + "audio.mean", vec(model.stats.audio.mean)});
  out.push_back({std::string(kStats) + "audio.std", vec(model.stats.audio.std)});
  out.push_back({std::string(kStats) + "video.mean", vec(model.stats.video.mean)});
  out.push_back({std::string(kStats) + "video.std", vec(model.stats.video.std)});
  out.push_back({kMetaStep, counter_tensor(model.step)});
  if (optimizer) {
    for (const auto& [name, t] : optimizer->m) out.push_back({kOptimM + name, t});
    for (const auto& [name, t] : optimizer->v) out.push_back({kOptimV + name, t});
    out.push_back({kOptimStep, counter_tensor(optimizer->step)});
  }
  w.u32(static_cast<std::uint32_t>(out.size()));
  for (const auto& nt : out) write_tensor(w, nt.name, nt.tensor);
  return w.bytes();
}

Checkpoint decode(const std::vector<std::uint8_t>& bytes) {
  auto p = parse(bytes);
  io::ByteReader diag(bytes, "corrupt checkpoint");
  TrainConfig cfg;
  try {
    cfg = TrainConfig::parse(p.config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("corrupt checkpoint: bad config blob: ") + e.what());
  }
  Checkpoint ck;
  ck.model = init_model(cfg);
  auto& params = ck.model.params.tensors;
  std::size_t seen_params = 0;
  bool have_step = false;
  codec::LatentStats stats;
  int stats_seen = 0;
  std::set<std::string> names;
  for (auto& nt : p.tensors) {
    if (!names.insert(nt.name).second) diag.fail("duplicate tensor '" + nt.name + "'");
    if (!nt.tensor.all_finite()) diag.fail("tensor '" + nt.name + "' holds non-finite values");
    if (!reserved(nt.name)) {
      auto it = params.find(nt.name);
      if (it == params.end()) diag.fail("unexpected parameter '" + nt.name + "'");
      if (it->second.shape() != nt.tensor.shape()) {
        throw ShapeError("checkpoint parameter '" + nt.name + "' has shape " +
                         shape_to_string(nt.tensor.shape()) + ", config expects " +
                         shape_to_string(it->second.shape()));
      }
      it->second = std::move(nt.tensor);
      ++seen_params;
    } else if (starts_with(nt.name, kStats)) {
      const auto key = nt.name.substr(std::string(kStats).size());
      const auto& data = nt.tensor.storage();
      if (key == "audio.mean") stats.audio.mean = data;
      else if (key == "audio.std") stats.audio.std = data;
      else if (key == "video.mean") stats.video.mean = data;
      else if (key == "video.std") stats.video.std = data;
      else diag.fail("unknown statistics entry '" + key + "'");
      ++stats_seen;
    } else if (nt.name == kMetaStep) {
      ck.model.step = counter_value(nt.tensor, diag);
      have_step = true;
    } else if (nt.name == kOptimStep) {
      ck.optimizer.step = counter_value(nt.tensor, diag);
    } else if (starts_with(nt.name, kOptimM) || starts_with(nt.name, kOptimV)) {
      const bool is_m = starts_with(nt.name, kOptimM);
      const auto key = nt.name.substr(std::string(is_m ? kOptimM : kOptimV).size());
      auto it = params.find(key);
      if (it == params.end() || it->second.shape() != nt.tensor.shape()) {
        diag.fail("optimizer moment '" + nt.name + "' does not match a parameter");
      }
      (is_m ? ck.optimizer.m : ck.optimizer.v)[key] = std::move(nt.tensor);
    } else {
      diag.fail("unknown reserved entry '" + nt.name + "'");
    }
  }
  if (seen_params != params.size()) {
    diag.fail("holds " + std::to_string(seen_params) + " of " + std::to_string(params.size()) +
              " parameters");
  }
  if (!have_step) diag.fail("missing step counter");
  if (stats_seen != 4 || stats.audio.mean.size() != codec::kAudioDim ||
      stats.audio.std.size() != codec::kAudioDim || stats.video.mean.size() != codec::kVideoDim ||
      stats.video.std.size() != codec::kVideoDim) {
    diag.fail("incomplete normalization statistics");
  }
  for (const auto* s : {&stats.audio.std, &stats.video.std}) {
    for (float v : *s) {
      if (!(v > 0.0f)) diag.fail("non-positive standard deviation");
    }
  }
  ck.model.stats = std::move(stats);
  if (ck.optimizer.m.size() != ck.optimizer.v.size()) diag.fail("unpaired optimizer moments");
  return ck;
}

void save(const std::filesystem::path& path, const Model& model,
          const OptimizerState<float>* optimizer) {
  io::write_file(path, encode(model, optimizer));
}

Checkpoint load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

Checkpoint load(const std::filesystem::path& path, const ModelConfig& expected) {
  auto ck = load(path);
  const auto& got = ck.model.config.model;
  if (got.fusion != expected.fusion) {
    throw ConfigError("checkpoint was trained with fusion " + got.fusion.name() +
                      ", model expects " + expected.fusion.name());
  }
  if (!same_model_config(got, expected)) {
    throw ConfigError("checkpoint model dimensions differ from the configuration");
  }
  return ck;
}

Header inspect(const std::filesystem::path& path) {
  auto bytes = io::read_file(path);
  auto ck = decode(bytes);
  auto p = parse(bytes);
  Header h;
  h.version = p.version;
  h.config_text = p.config_text;
  h.step = ck.model.step;
  h.parameter_count = ck.model.params.count();
  h.parameter_tensors = static_cast<std::int64_t>(ck.model.params.tensors.size());
  h.tensors = static_cast<std::int64_t>(p.tensors.size());
  return h;
}

}  // namespace ttav::ckpt
