#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "ttav/trainer.hpp"

namespace ttav::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kRuntime = 2;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

// gen-corpus output: manifest.jsonl, stats.json and one TLAT file per stream
// under <pool>/<index>.{audio,video}.tlat.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
std::vector<CorpusItem> read_corpus_pool(const std::filesystem::path& dir, const std::string& pool);

// Applies TTAV_SEED when set.
TrainConfig load_config(const std::filesystem::path& path);
std::uint64_t seed_override(std::uint64_t fallback);

}  // namespace ttav::cli
