#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stepmask/benchmarks.hpp"
#include "stepmask/corpus.hpp"
#include "stepmask/downstream.hpp"
#include "stepmask/model.hpp"
#include "stepmask/training.hpp"

namespace stepmask {

struct PathsConfig {
  std::filesystem::path corpus_dir = "corpus";
  std::filesystem::path benchmarks_dir = "benchmarks";
  std::filesystem::path checkpoints_dir = "checkpoints";
  std::filesystem::path reports_dir = "reports";
};

struct BenchmarkConfig {
  std::vector<BenchmarkKind> kinds = all_benchmark_kinds();
  BenchmarkOptions options;
  std::array<double, 3> split = {0.7, 0.15, 0.15};
};

// Everything one pipeline run needs. Sections: seed, corpus, embedder, model,
// mask, pretrain, finetune, benchmarks, paths.
struct RunConfig {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  nlohmann::json embedder;
  ModelConfig model;
  MaskSpec mask;
  PretrainConfig pretrain = PretrainConfig::desk_default(20);
  FinetuneConfig finetune;
  std::map<BenchmarkKind, FinetuneConfig> finetune_tasks;
  BenchmarkConfig benchmarks;
  PathsConfig paths;

  TextEmbedder make_embedder() const;
  FinetuneConfig finetune_for(BenchmarkKind kind) const;

  nlohmann::json to_json() const;
  // SHA-256 of the canonical JSON form without the paths section.
  std::string digest() const;
};

// Strict parse: unknown keys raise ConfigError naming the field path. Seeds
// left unset in a section default to the global seed; the model section
// overrides a preset sized from the corpus section.
RunConfig parse_run_config(nlohmann::json j);

// Applies "section.key=value" to a JSON document. Values parse as JSON when
// they can, otherwise they are taken as strings.
void apply_override(nlohmann::json& j, const std::string& assignment);

RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace stepmask
