#include "stepmask/weaklabel.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"

namespace stepmask {

namespace {

void normalize_in_place(std::vector<double>& v, std::string_view what) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw InvalidInput("cannot normalize zero or non-finite embedding for '" + std::string(what) +
                       "'");
  }
  for (double& x : v) x /= norm;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

// --- TextEmbedder -----------------------------------------------------------

TextEmbedder TextEmbedder::synthetic(std::uint64_t seed, std::size_t dim) {
  if (dim == 0) throw ConfigError("embedder dim must be positive");
  TextEmbedder e;
  e.dim_ = dim;
  e.seed_ = seed;
  return e;
}

TextEmbedder TextEmbedder::from_entries(
    const std::vector<std::pair<std::string, std::vector<double>>>& entries) {
  if (entries.empty()) throw InvalidInput("embedding table is empty");
  auto table = std::make_shared<Table>();
  const std::size_t dim = entries.front().second.size();
  if (dim == 0) throw InvalidInput("embedding table has zero-dimensional vectors");
  for (const auto& [text, vec] : entries) {
    if (vec.size() != dim) throw DimensionError("embedding table: inconsistent dimension");
    auto key = normalize_text(text);
    if (key.empty()) throw InvalidInput("embedding table: empty key");
    auto v = vec;
    normalize_in_place(v, key);
    (*table)[std::move(key)] = std::move(v);
  }
  TextEmbedder e;
  e.dim_ = dim;
  e.table_ = std::move(table);
  return e;
}

TextEmbedder TextEmbedder::from_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open embedding table " + path.string());
  std::vector<std::pair<std::string, std::vector<double>>> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": missing tab separator");
    }
    std::vector<double> vec;
    std::istringstream fields(line.substr(tab + 1));
    double x = 0.0;
    while (fields >> x) vec.push_back(x);
    if (!fields.eof() || vec.empty()) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed vector");
    }
    entries.emplace_back(line.substr(0, tab), std::move(vec));
  }
  auto e = from_entries(entries);
  e.table_path_ = path.string();
  return e;
}

TextEmbedder TextEmbedder::from_json(const nlohmann::json& j) {
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "synthetic") {
    return synthetic(j.at("seed").get<std::uint64_t>(), j.at("dim").get<std::size_t>());
  }
  if (mode == "table") {
    auto e = from_table(j.at("path").get<std::string>());
    if (j.contains("dim") && j.at("dim").get<std::size_t>() != e.dim()) {
      throw ConfigError("embedder.dim does not match table dimension");
    }
    return e;
  }
  throw ConfigError("embedder.mode must be 'synthetic' or 'table'");
}

nlohmann::json TextEmbedder::to_json() const {
  if (is_synthetic()) return {{"mode", "synthetic"}, {"seed", seed_}, {"dim", dim_}};
  return {{"mode", "table"}, {"path", table_path_}, {"dim", dim_}};
}

std::vector<double> TextEmbedder::embed(std::string_view text) const {
  const auto key = normalize_text(text);
  if (key.empty()) throw InvalidInput("cannot embed empty text");
  if (table_) {
    auto it = table_->find(key);
    if (it == table_->end()) throw MissingEmbedding("no embedding for '" + key + "'");
    return it->second;
  }
  Rng rng(combine_seed(fnv1a64(key), seed_));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim_);
  for (double& x : v) x = normal(rng);
  normalize_in_place(v, key);
  return v;
}

// --- StepVocabulary ---------------------------------------------------------

StepVocabulary::StepVocabulary(std::vector<StepText> steps, const TextEmbedder& embedder)
    : dim_(embedder.dim()) {
  std::sort(steps.begin(), steps.end(),
            [](const StepText& a, const StepText& b) { return a.id < b.id; });
  std::set<std::string> titles;
  steps_.reserve(steps.size());
  for (std::size_t i = 0; i < steps.size(); ++i) {
    auto& s = steps[i];
    if (s.id != static_cast<LabelId>(i)) {
      throw VocabularyMismatch("step ids must be 0..S-1 without gaps (missing id " +
                               std::to_string(i) + ")");
    }
    if (!titles.insert(s.title).second) {
      throw VocabularyMismatch("duplicate step title '" + s.title + "'");
    }
    auto emb = embedder.embed(s.description);
    steps_.push_back(Step{s.id, std::move(s.title), std::move(s.description), std::move(emb)});
  }
}

StepVocabulary StepVocabulary::from_json(const nlohmann::json& j, const TextEmbedder& embedder) {
  if (!j.is_array()) throw ParseError("vocabulary: expected a JSON array");
  std::vector<StepText> steps;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& item = j[i];
    try {
      steps.push_back({item.at("id").get<LabelId>(), item.at("title").get<std::string>(),
                       item.at("description").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("vocabulary[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return StepVocabulary(std::move(steps), embedder);
}

StepVocabulary StepVocabulary::load(const std::filesystem::path& path,
                                    const TextEmbedder& embedder) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open vocabulary " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return from_json(j, embedder);
}

nlohmann::json StepVocabulary::to_json() const {
  auto arr = nlohmann::json::array();
  for (const auto& s : steps_) {
    arr.push_back({{"id", s.id}, {"title", s.title}, {"description", s.description}});
  }
  return arr;
}

void StepVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << to_json().dump(2) << '\n';
}

const Step& StepVocabulary::step(LabelId id) const {
  if (!contains(id)) throw VocabularyMismatch("unknown label id " + std::to_string(id));
  return steps_[static_cast<std::size_t>(id)];
}

std::vector<double> StepVocabulary::similarities(std::span<const double> sentence) const {
  std::vector<double> sims(steps_.size());
  for (std::size_t n = 0; n < steps_.size(); ++n) sims[n] = similarity(sentence, steps_[n].embedding);
  return sims;
}

// --- distributions ----------------------------------------------------------

double LabelDistribution::probability_of(LabelId label) const {
  for (const auto& e : entries) {
    if (e.label == label) return e.probability;
  }
  return 0.0;
}

std::vector<double> LabelDistribution::dense(std::size_t num_labels) const {
  std::vector<double> out(num_labels, 0.0);
  for (const auto& e : entries) {
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_labels) {
      throw InvalidDistribution("label id outside vocabulary");
    }
    out[static_cast<std::size_t>(e.label)] = e.probability;
  }
  return out;
}

void LabelDistribution::validate(std::size_t num_labels) const {
  if (entries.empty()) throw InvalidDistribution("empty label distribution");
  if (k != 0 && entries.size() > k) throw InvalidDistribution("more than k entries");
  double total = 0.0;
  std::set<LabelId> seen;
  for (const auto& e : entries) {
    if (!(e.probability > 0.0) || !std::isfinite(e.probability)) {
      throw InvalidDistribution("non-positive probability");
    }
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_labels) {
      throw InvalidDistribution("label id " + std::to_string(e.label) + " outside vocabulary");
    }
    if (!seen.insert(e.label).second) throw InvalidDistribution("duplicate label entry");
    total += e.probability;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidDistribution("probabilities do not sum to 1");
}

double similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("similarity: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> softmax(std::span<const double> scores) {
  if (scores.empty()) return {};
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

LabelDistribution truncate_topk(std::span<const double> dense, std::size_t k) {
  if (k == 0) throw InvalidInput("k must be at least 1");
  if (dense.empty()) throw InvalidDistribution("empty distribution");
  double total = 0.0;
  for (double p : dense) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidDistribution("negative or non-finite mass");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidDistribution("input does not sum to 1");

  std::vector<LabelId> order(dense.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](LabelId a, LabelId b) {
    return dense[static_cast<std::size_t>(a)] > dense[static_cast<std::size_t>(b)];
  });

  LabelDistribution dist;
  dist.k = k;
  double kept = 0.0;
  for (std::size_t i = 0; i < order.size() && dist.entries.size() < k; ++i) {
    const double p = dense[static_cast<std::size_t>(order[i])];
    if (p <= 0.0) break;
    dist.entries.push_back({order[i], p});
    kept += p;
  }
  for (auto& e : dist.entries) e.probability /= kept;
  return dist;
}

LabelDistribution weak_label_from_similarities(std::span<const double> sims, std::size_t k) {
  if (sims.empty()) throw InvalidInput("empty vocabulary");
  return truncate_topk(softmax(sims), k);
}

LabelDistribution weak_label_distribution(std::string_view asr_sentence,
                                          const StepVocabulary& vocab,
                                          const TextEmbedder& embedder, std::size_t k) {
  if (k == 0) throw InvalidInput("k must be at least 1");
  if (vocab.empty()) throw InvalidInput("empty vocabulary");
  const auto emb = embedder.embed(asr_sentence);
  return weak_label_from_similarities(vocab.similarities(emb), k);
}

LabelId best_label(const LabelDistribution& dist) {
  if (dist.entries.empty()) throw InvalidInput("best_label of empty distribution");
  const LabelEntry* best = &dist.entries.front();
  for (const auto& e : dist.entries) {
    if (e.probability > best->probability ||
        (e.probability == best->probability && e.label < best->label)) {
      best = &e;
    }
  }
  return best->label;
}

// --- ASR clustering baseline --------------------------------------------------

std::vector<Segment> cluster_by_similarity(const std::vector<std::vector<double>>& embeddings,
                                           double threshold_scale) {
  if (embeddings.empty()) throw InvalidInput("cluster: need at least one sentence");
  if (!(threshold_scale > 0.0)) throw InvalidInput("threshold_scale must be positive");
  const std::size_t n = embeddings.size();
  if (n == 1) return {Segment{0, 0}};

  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      total += similarity(embeddings[i], embeddings[j]);
      ++pairs;
    }
  }
  const double tau = threshold_scale * total / static_cast<double>(pairs);

  std::vector<Segment> segments{Segment{0, 0}};
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (similarity(embeddings[i], embeddings[i + 1]) > tau) {
      segments.back().last = i + 1;
    } else {
      segments.push_back(Segment{i + 1, i + 1});
    }
  }
  return segments;
}

std::vector<Segment> cluster_asr(const std::vector<std::string>& sentences,
                                 const TextEmbedder& embedder, double threshold_scale) {
  std::vector<std::vector<double>> embeddings;
  embeddings.reserve(sentences.size());
  for (const auto& s : sentences) embeddings.push_back(embedder.embed(s));
  return cluster_by_similarity(embeddings, threshold_scale);
}

}  // namespace stepmask
