#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stepmask/tensor.hpp"
#include "stepmask/weaklabel.hpp"

namespace stepmask {

struct CorpusConfig {
  std::size_t num_tasks = 4;
  std::size_t steps_per_task = 6;
  std::size_t vocab_size = 24;
  std::size_t videos_per_task = 2;
  double feature_noise_sigma = 0.0;
  double asr_noise = 0.0;
  std::size_t feature_dim = 32;
  std::uint64_t seed = 0;

  double skip_probability = 0.0;
  // Fraction of template positions that receive one substitutable label.
  double alternative_rate = 0.0;
  // Probability that a template position draws a label already used elsewhere.
  double label_sharing_rate = 0.0;
  // Skipping never shortens a video below this many steps.
  std::size_t min_length = 2;
  // Truncation level of weak label distributions.
  std::size_t top_k = 5;
  // Reserved; only one feature vector per step is supported.
  std::size_t clip_vectors_per_step = 1;
  // label -> label whose embedding serves as its clip-feature prototype.
  std::map<LabelId, LabelId> shared_prototypes;

  void validate() const;
  nlohmann::json to_json() const;
  // Rejects unknown keys; missing keys keep their defaults.
  static CorpusConfig from_json(const nlohmann::json& j);
};

struct TaskTemplate {
  int task_id = 0;
  std::string name;
  std::vector<LabelId> canonical_steps;
  // position -> labels that may replace the canonical one
  std::map<std::size_t, std::vector<LabelId>> alternatives;
  double skip_probability = 0.0;
  std::size_t min_length = 2;

  void validate(const StepVocabulary& vocab) const;
  nlohmann::json to_json() const;
  static TaskTemplate from_json(const nlohmann::json& j);
};

struct Clip {
  std::vector<double> feature;
  std::string asr;
  LabelDistribution weak;
  LabelId truth = 0;
  double start = 0.0;
  double end = 0.0;

  friend bool operator==(const Clip&, const Clip&) = default;
};

struct VideoRecord {
  std::string video_id;
  int task_id = 0;
  std::string task_name;
  std::vector<Clip> clips;

  std::size_t size() const { return clips.size(); }
  Tensor features() const;
  std::vector<LabelId> truths() const;
  void validate(const StepVocabulary& vocab) const;

  friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

// Steps titled "<Verb> the <noun>", with the lowercase title as description.
StepVocabulary make_synthetic_vocabulary(std::size_t size, const TextEmbedder& embedder);

// Zero-pads or truncates to `dim` components.
std::vector<double> fit_to_dim(std::span<const double> v, std::size_t dim);

std::vector<TaskTemplate> generate_task_library(const CorpusConfig& cfg,
                                                const StepVocabulary& vocab);

VideoRecord sample_video(const TaskTemplate& task, const StepVocabulary& vocab,
                         const TextEmbedder& embedder, const CorpusConfig& cfg,
                         std::uint64_t draw_seed);

// videos_per_task draws per template, in task order.
std::vector<VideoRecord> generate_videos(const std::vector<TaskTemplate>& tasks,
                                         const StepVocabulary& vocab,
                                         const TextEmbedder& embedder, const CorpusConfig& cfg);

std::string corpus_digest(const std::vector<VideoRecord>& videos);

// --- annotation + feature files ----------------------------------------------

void write_annotations(const std::filesystem::path& path, const std::vector<VideoRecord>& videos);

struct AnnotationLoadOptions {
  std::size_t top_k = 5;
  std::size_t feature_dim = 32;
  // When absent, features are the label embeddings fitted to feature_dim.
  std::optional<std::filesystem::path> feature_sidecar;
};

std::vector<VideoRecord> load_annotations(const std::filesystem::path& path,
                                          const StepVocabulary& vocab,
                                          const TextEmbedder& embedder,
                                          const AnnotationLoadOptions& options);

std::uint64_t video_hash(std::string_view video_id);

void write_feature_sidecar(const std::filesystem::path& path,
                           const std::vector<VideoRecord>& videos);

struct FeatureTable {
  std::uint32_t dim = 0;
  std::map<std::pair<std::uint64_t, std::uint32_t>, std::vector<double>> clips;
};
FeatureTable read_feature_sidecar(const std::filesystem::path& path);

// --- splits -------------------------------------------------------------------

struct CorpusSplits {
  std::vector<VideoRecord> train;
  std::vector<VideoRecord> val;
  std::vector<VideoRecord> test;
};

CorpusSplits split_corpus(const std::vector<VideoRecord>& videos,
                          const std::array<double, 3>& ratios, std::uint64_t seed);

// --- on-disk corpus directory ---------------------------------------------------

struct CorpusBundle {
  CorpusConfig config;
  TextEmbedder embedder = TextEmbedder::synthetic(0, 1);
  StepVocabulary vocab;
  std::vector<TaskTemplate> tasks;
  std::vector<VideoRecord> videos;
  std::string digest;
};

CorpusBundle generate_corpus(const CorpusConfig& cfg, const TextEmbedder& embedder);

// Writes vocab.json, tasks.json, annotations.json, features.stpf and
// manifest.json. Returns the manifest.
nlohmann::json save_corpus(const std::filesystem::path& dir, const CorpusBundle& bundle,
                           const std::string& config_digest = "");
CorpusBundle load_corpus(const std::filesystem::path& dir);

}  // namespace stepmask
