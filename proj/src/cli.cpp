#include "ttav/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ttav/checkpoint.hpp"
#include "ttav/pipeline.hpp"
#include "ttav/tlat.hpp"

namespace ttav::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

class UsageError : public Error {
 public:
  using Error::Error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("short write to '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b == std::string::npos) throw UsageError("empty element in list '" + text + "'");
    out.push_back(cur.substr(b, e - b + 1));
  }
  if (out.empty()) throw UsageError("empty list");
  return out;
}

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (text.empty() || text[0] == '-') throw std::invalid_argument("sign");
    v = std::stoull(text, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError(what + ": '" + text + "' is not an unsigned integer");
  return v;
}

TrainConfig config_from_checkpoint(const ckpt::Checkpoint& ck, const std::string& config_path) {
  if (config_path.empty()) return ck.model.config;
  auto cfg = load_config(config_path);
  if (cfg.model.fusion != ck.model.config.model.fusion) {
    throw ConfigError("checkpoint was trained with fusion " + ck.model.config.model.fusion.name() +
                      ", configuration asks for " + cfg.model.fusion.name());
  }
  if (!ckpt::same_model_config(cfg.model, ck.model.config.model)) {
    throw ConfigError("checkpoint model dimensions differ from the configuration");
  }
  return cfg;
}

// ------------------------------------------------------------ subcommands

struct Options {
  std::string config, checkpoint, mode, out, cond_stream, seeds, corpus;
};

GenMode gen_mode_arg(const std::string& text) {
  try {
    return parse_gen_mode(text);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("--mode: ") + e.what());
  }
}

FusionMode fusion_arg(const std::string& text) {
  try {
    return FusionMode::parse(text);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("--mode: ") + e.what());
  }
}

int cmd_gen_corpus(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o.config);
  const auto corpus = build_corpus(cfg);
  write_corpus(o.out, corpus);
  out << "wrote " << corpus.t2av.size() << " t2av, " << corpus.tts.size() << " tts, "
      << corpus.eval.size() << " eval scripts to " << o.out << '\n';
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o.config);
  make_dir(o.out);
  const fs::path dir(o.out);
  const auto corpus = build_corpus(cfg);
  Model model = init_model(cfg);
  auto opt = OptimizerState<float>::zeros_like(model.params);

  std::ofstream log(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw Error("cannot open '" + (dir / "metrics.jsonl").string() + "' for writing");
  auto sink = [&](const StepMetrics& m) { log << metrics_json(m) << '\n' << std::flush; };
  auto hook = [&](const Model& m, const OptimizerState<float>& os) {
    std::ostringstream name;
    name << "checkpoint-" << std::setw(6) << std::setfill('0') << m.step << ".ttav";
    ckpt::save(dir / name.str(), m, &os);
  };
  train(model, opt, corpus, sink, hook);
  if (!log) throw Error("failed writing metrics log");
  ckpt::save(dir / "model.ttav", model, &opt);
  out << "trained " << model.step << " steps, checkpoint " << (dir / "model.ttav").string() << '\n';
  return kOk;
}

// Request files use key=value lines: script (comma-separated symbol ids),
// script_seed, seed and any sampler.* key.
struct RequestFile {
  std::vector<int> symbols;
  std::uint64_t script_seed = 0;
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> sampler;
};

RequestFile parse_request(const std::string& text) {
  RequestFile r;
  bool have_script = false;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (key == "script") {
      for (const auto& s : split(value, ',')) {
        const auto v = parse_u64(s, "script");
        if (v >= static_cast<std::uint64_t>(codec::kVocab)) {
          throw ConfigError("script symbol " + s + " outside the vocabulary");
        }
        r.symbols.push_back(static_cast<int>(v));
      }
      have_script = true;
    } else if (key == "script_seed") {
      r.script_seed = parse_u64(value, key);
    } else if (key == "seed") {
      r.seed = parse_u64(value, key);
    } else if (key.rfind("sampler.", 0) == 0) {
      r.sampler[key] = value;
    } else {
      throw ConfigError("unknown request key '" + key + "'");
    }
  }
  if (!have_script) throw ConfigError("request needs a script");
  return r;
}

SamplerSettings sampler_with(const TrainConfig& base, const std::map<std::string, std::string>& kv) {
  auto all = parse_key_values(base.to_text());
  for (const auto& [k, v] : kv) {
    if (!all.count(k)) throw ConfigError("unknown request key '" + k + "'");
    all[k] = v;
  }
  std::string text;
  for (const auto& [k, v] : all) text += k + "=" + v + "\n";
  return TrainConfig::parse(text).sampler;
}

int cmd_generate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto mode = gen_mode_arg(o.mode);
  if (mode != GenMode::T2AV && o.cond_stream.empty()) {
    throw UsageError("--mode " + o.mode + " requires --cond-stream");
  }
  if (mode == GenMode::T2AV && !o.cond_stream.empty()) {
    throw UsageError("--cond-stream is only valid with --mode a2v or v2a");
  }
  const auto ck = ckpt::load(o.checkpoint);
  const auto request = parse_request(read_text(o.config));
  const auto& model = ck.model;
  const codec::SyntheticCodec codec(model.config.codec);

  GenerationRequest req;
  req.mode = mode;
  req.script = codec.make_script(request.symbols, request.script_seed);
  req.sampler = sampler_with(model.config, request.sampler);
  req.seed = seed_override(request.seed.value_or(model.config.seed));
  const auto P = model.config.model.patch;
  if (!o.cond_stream.empty()) {
    auto cond = tlat::read(o.cond_stream);
    const auto want = mode == GenMode::A2V ? codec::Modality::Audio : codec::Modality::Video;
    if (cond.modality != want) {
      throw ConfigError(std::string("--cond-stream must be a ") + codec::modality_name(want) +
                        " stream");
    }
    if (mode == GenMode::A2V) {
      req.refs.audio = audio_reference(cond, P);
    } else {
      req.refs.video = video_reference(cond);
    }
    req.cond = std::move(cond);
  }
  const auto result = generate(model, req);

  make_dir(o.out);
  const fs::path dir(o.out);
  tlat::write(dir / "audio.tlat", result.audio);
  tlat::write(dir / "video.tlat", result.video);
  json j;
  j["mode"] = gen_mode_name(mode);
  j["seed"] = req.seed;
  j["patches"] = result.patches;
  j["frames"] = result.audio.frame_count();
  j["stop_probabilities"] = result.stop_probs;
  j["head_evaluations"] = result.head_evaluations;
  write_text(dir / "generation.json", j.dump(2) + "\n");
  out << "generated " << result.patches << " patches (" << result.audio.frame_count()
      << " frames) in " << dir.string() << '\n';
  err << "generation took " << result.seconds << " s\n";
  return kOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text, std::uint64_t fallback, int count) {
  std::vector<std::uint64_t> seeds;
  if (text.empty()) {
    for (int i = 0; i < count; ++i) seeds.push_back(fallback + static_cast<std::uint64_t>(i));
    return seeds;
  }
  for (const auto& s : split(text, ',')) seeds.push_back(parse_u64(s, "--seeds"));
  return seeds;
}

int cmd_eval(const Options& o, std::ostream& out) {
  std::vector<GenMode> modes;
  for (const auto& m : split(o.mode.empty() ? "t2av" : o.mode, ',')) modes.push_back(gen_mode_arg(m));
  if (modes.empty()) throw UsageError("no evaluation mode");
  const auto ck = ckpt::load(o.checkpoint);
  const auto cfg = config_from_checkpoint(ck, o.config);
  for (auto m : modes) check_mode_support(cfg.model.fusion, m);
  const auto seeds = parse_seeds(o.seeds, seed_override(cfg.seed), 1);

  std::vector<CorpusItem> items;
  if (!o.corpus.empty()) {
    items = read_corpus_pool(o.corpus, "eval");
  } else {
    items = render_scripts(codec::SyntheticCodec(cfg.codec), cfg, "eval", cfg.corpus.eval_scripts,
                           true);
  }
  if (items.empty()) throw Error("evaluation corpus is empty");

  Model model = ck.model;
  model.config.codec = cfg.codec;
  make_dir(o.out);
  const fs::path dir(o.out);
  std::vector<MetricsReport> reports;
  std::vector<std::string> labels;
  for (auto m : modes) {
    for (auto seed : seeds) {
      auto report = evaluate(model, items, m, cfg.sampler, seed, cfg.resolved_threads());
      std::ostringstream rows;
      write_report_csv(rows, report);
      const auto label = gen_mode_name(m) + "_seed" + std::to_string(seed);
      write_text(dir / ("rows_" + label + ".csv"), rows.str());
      reports.push_back(std::move(report));
      labels.push_back(label);
    }
  }
  std::ostringstream summary;
  write_summary_csv(summary, reports, labels);
  write_text(dir / "summary.csv", summary.str());
  out << summary.str();
  return kOk;
}

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = load_config(o.config);
  std::vector<FusionMode> modes;
  for (const auto& m : split(o.mode.empty() ? "add,interleaved_av,delay:1,delay:3" : o.mode, ',')) {
    modes.push_back(fusion_arg(m));
  }
  if (modes.size() < 2) throw UsageError("ablate needs at least two fusion modes in --mode");
  const auto seeds = parse_seeds(o.seeds, cfg.seed, 3);
  const auto corpus = build_corpus(cfg);
  const auto result = run_ablation(modes, cfg, seeds, corpus);

  make_dir(o.out);
  const fs::path dir(o.out);
  std::ostringstream csv;
  write_ablation_csv(csv, result);
  write_text(dir / "ablation.csv", csv.str());
  std::string notes;
  for (const auto& v : result.ordering_violations) notes += "ordering: " + v + "\n";
  for (const auto& f : result.failures) notes += "failure: " + f + "\n";
  write_text(dir / "flags.txt", notes);
  out << csv.str();
  if (!notes.empty()) err << notes;
  return result.failures.empty() ? kOk : kRuntime;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  const auto h = ckpt::inspect(o.checkpoint);
  const auto cfg = TrainConfig::parse(h.config_text);
  out << "version " << h.version << '\n'
      << "step " << h.step << '\n'
      << "parameters " << h.parameter_count << '\n'
      << "parameter_tensors " << h.parameter_tensors << '\n'
      << "tensors " << h.tensors << '\n'
      << "fusion " << cfg.model.fusion.name() << '\n'
      << "config\n";
  std::istringstream lines(h.config_text);
  for (std::string line; std::getline(lines, line);) out << "  " << line << '\n';
  return kOk;
}

}  // namespace

TrainConfig load_config(const fs::path& path) {
  auto cfg = TrainConfig::parse(read_text(path));
  cfg.seed = seed_override(cfg.seed);
  return cfg;
}

std::uint64_t seed_override(std::uint64_t fallback) {
  const char* env = std::getenv("TTAV_SEED");
  if (!env) return fallback;
  try {
    return parse_u64(env, "TTAV_SEED");
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
}

void write_corpus(const fs::path& dir, const Corpus& corpus) {
  make_dir(dir);
  std::ostringstream manifest;
  auto pool = [&](const char* name, const std::vector<CorpusItem>& items) {
    make_dir(dir / name);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      std::ostringstream stem;
      stem << name << '/' << std::setw(5) << std::setfill('0') << i;
      json j;
      j["pool"] = name;
      j["index"] = i;
      j["seed"] = it.script.seed;
      j["symbols"] = it.script.symbols;
      j["durations"] = it.script.durations;
      j["audio"] = stem.str() + ".audio.tlat";
      tlat::write(dir / (stem.str() + ".audio.tlat"), it.audio);
      if (it.video.frame_count() > 0) {
        j["video"] = stem.str() + ".video.tlat";
        tlat::write(dir / (stem.str() + ".video.tlat"), it.video);
      }
      manifest << j.dump() << '\n';
    }
  };
  pool("t2av", corpus.t2av);
  pool("tts", corpus.tts);
  pool("eval", corpus.eval);
  write_text(dir / "manifest.jsonl", manifest.str());
  json stats;
  stats["audio"] = {{"mean", corpus.stats.audio.mean}, {"std", corpus.stats.audio.std}};
  stats["video"] = {{"mean", corpus.stats.video.mean}, {"std", corpus.stats.video.std}};
  write_text(dir / "stats.json", stats.dump(2) + "\n");
}

std::vector<CorpusItem> read_corpus_pool(const fs::path& dir, const std::string& pool) {
  std::istringstream manifest(read_text(dir / "manifest.jsonl"));
  std::vector<CorpusItem> items;
  std::string line;
  for (int n = 1; std::getline(manifest, line); ++n) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      if (j.at("pool").get<std::string>() != pool) continue;
      CorpusItem it;
      it.script.seed = j.at("seed").get<std::uint64_t>();
      it.script.symbols = j.at("symbols").get<std::vector<int>>();
      it.script.durations = j.at("durations").get<std::vector<int>>();
      it.audio = tlat::read(dir / j.at("audio").get<std::string>());
      if (j.contains("video")) {
        it.video = tlat::read(dir / j.at("video").get<std::string>());
      } else {
        it.video.modality = codec::Modality::Video;
      }
      items.push_back(std::move(it));
    } catch (const json::exception& e) {
      throw FormatError("manifest line " + std::to_string(n) + ": " + e.what());
    }
  }
  return items;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-to-audio-video autoregressive diffusion toolkit", "ttav"};
  app.require_subcommand(1);
  app.allow_windows_style_options(false);
  Options o;

  auto* gen_corpus = app.add_subcommand("gen-corpus", "render the synthetic corpus and its statistics");
  gen_corpus->add_option("--config", o.config, "configuration file")->required();
  gen_corpus->add_option("--out", o.out, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train a model, writing checkpoints and metrics.jsonl");
  train_cmd->add_option("--config", o.config, "configuration file")->required();
  train_cmd->add_option("--out", o.out, "output directory")->required();

  auto* gen = app.add_subcommand("generate", "generate latent streams from a request file");
  gen->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
  gen->add_option("--config", o.config, "request file (script, script_seed, seed, sampler.*)")
      ->required();
  gen->add_option("--mode", o.mode, "t2av, a2v or v2a")->default_val("t2av");
  gen->add_option("--cond-stream", o.cond_stream, "TLAT conditioning stream for a2v / v2a");
  gen->add_option("--out", o.out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against oracle renderings");
  eval->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
  eval->add_option("--config", o.config, "configuration overriding the checkpoint's sampler and corpus");
  eval->add_option("--corpus", o.corpus, "gen-corpus directory; its eval pool is used");
  eval->add_option("--mode", o.mode, "comma-separated t2av, a2v, v2a")->default_val("t2av");
  eval->add_option("--seeds", o.seeds, "comma-separated generation seeds");
  eval->add_option("--out", o.out, "output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "train and compare fusion modes");
  ablate->add_option("--config", o.config, "shared configuration")->required();
  ablate->add_option("--mode", o.mode, "comma-separated fusion modes");
  ablate->add_option("--seeds", o.seeds, "comma-separated training seeds");
  ablate->add_option("--out", o.out, "output directory")->required();

  auto* inspect_cmd = app.add_subcommand("inspect", "print a checkpoint header");
  inspect_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (gen_corpus->parsed()) return cmd_gen_corpus(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (gen->parsed()) return cmd_generate(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out, err);
    if (inspect_cmd->parsed()) return cmd_inspect(o, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n' << app.help() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ttav::cli
