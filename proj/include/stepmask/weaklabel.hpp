#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace stepmask {

using LabelId = int;

// Lowercases ASCII and collapses runs of whitespace to single spaces; leading
// and trailing whitespace is dropped.
std::string normalize_text(std::string_view text);

// Maps sentences to unit-norm vectors. Synthetic mode hashes the normalized
// text with the seed and draws a Gaussian vector; table mode looks vectors up
// in a file loaded once at construction.
class TextEmbedder {
 public:
  static TextEmbedder synthetic(std::uint64_t seed, std::size_t dim);
  static TextEmbedder from_table(const std::filesystem::path& path);
  // In-memory table, keys are normalized like file keys.
  static TextEmbedder from_entries(
      const std::vector<std::pair<std::string, std::vector<double>>>& entries);
  static TextEmbedder from_json(const nlohmann::json& j);

  bool is_synthetic() const { return table_ == nullptr; }
  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<double> embed(std::string_view text) const;

  nlohmann::json to_json() const;

 private:
  using Table = std::unordered_map<std::string, std::vector<double>>;

  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  std::string table_path_;
  std::shared_ptr<const Table> table_;
};

inline std::vector<double> embed_text(const TextEmbedder& embedder, std::string_view text) {
  return embedder.embed(text);
}

struct Step {
  LabelId id = 0;
  std::string title;
  std::string description;
  std::vector<double> embedding;
};

struct StepText {
  LabelId id = 0;
  std::string title;
  std::string description;
};

// The finite label set. Embeddings are computed from step descriptions.
class StepVocabulary {
 public:
  StepVocabulary() = default;
  StepVocabulary(std::vector<StepText> steps, const TextEmbedder& embedder);

  static StepVocabulary from_json(const nlohmann::json& j, const TextEmbedder& embedder);
  static StepVocabulary load(const std::filesystem::path& path, const TextEmbedder& embedder);
  nlohmann::json to_json() const;
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return steps_.size(); }
  bool empty() const { return steps_.empty(); }
  std::size_t dim() const { return dim_; }
  bool contains(LabelId id) const { return id >= 0 && static_cast<std::size_t>(id) < steps_.size(); }
  const Step& step(LabelId id) const;
  const std::vector<Step>& steps() const { return steps_; }

  // Similarity of a sentence embedding against every step embedding.
  std::vector<double> similarities(std::span<const double> sentence) const;

 private:
  std::vector<Step> steps_;
  std::size_t dim_ = 0;
};

struct LabelEntry {
  LabelId label = 0;
  double probability = 0.0;
  friend bool operator==(const LabelEntry&, const LabelEntry&) = default;
};

// Sparse categorical distribution: strictly positive entries, sorted by
// descending probability (ties by ascending label), summing to one.
struct LabelDistribution {
  std::vector<LabelEntry> entries;
  std::size_t k = 0;

  double probability_of(LabelId label) const;
  std::vector<double> dense(std::size_t num_labels) const;
  void validate(std::size_t num_labels) const;

  friend bool operator==(const LabelDistribution&, const LabelDistribution&) = default;
};

double similarity(std::span<const double> a, std::span<const double> b);

// Max-subtracted softmax in double precision.
std::vector<double> softmax(std::span<const double> scores);

LabelDistribution truncate_topk(std::span<const double> dense, std::size_t k);

// Softmax over similarity scores followed by top-k truncation.
LabelDistribution weak_label_from_similarities(std::span<const double> sims, std::size_t k);

LabelDistribution weak_label_distribution(std::string_view asr_sentence,
                                          const StepVocabulary& vocab,
                                          const TextEmbedder& embedder, std::size_t k);

LabelId best_label(const LabelDistribution& dist);

// Inclusive index range [first, last].
struct Segment {
  std::size_t first = 0;
  std::size_t last = 0;
  friend bool operator==(const Segment&, const Segment&) = default;
};

// Groups adjacent items whose similarity exceeds threshold_scale times the
// mean similarity over all unordered pairs.
std::vector<Segment> cluster_by_similarity(const std::vector<std::vector<double>>& embeddings,
                                           double threshold_scale = 1.0);

std::vector<Segment> cluster_asr(const std::vector<std::string>& sentences,
                                 const TextEmbedder& embedder, double threshold_scale = 1.0);

}  // namespace stepmask
