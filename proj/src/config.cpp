#include "stepmask/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"
#include "stepmask/json_util.hpp"

namespace stepmask {

namespace {

nlohmann::json section(const nlohmann::json& root, const char* key) {
  auto it = root.find(key);
  if (it == root.end()) return nlohmann::json::object();
  if (!it->is_object()) throw ConfigError(std::string(key) + ": expected an object");
  return *it;
}

void default_seed(nlohmann::json& s, std::uint64_t seed) {
  if (!s.contains("seed")) s["seed"] = seed;
}

ModelConfig parse_model(nlohmann::json s, const CorpusConfig& corpus) {
  std::string preset = "desk";
  if (auto it = s.find("preset"); it != s.end()) {
    if (!it->is_string()) throw ConfigError("model.preset: expected a string");
    preset = it->get<std::string>();
    s.erase("preset");
  }
  ModelConfig base;
  if (preset == "desk") {
    base = ModelConfig::desk_preset(corpus.feature_dim, corpus.vocab_size, corpus.num_tasks);
  } else if (preset == "paper") {
    base = ModelConfig::paper_preset(corpus.vocab_size, corpus.num_tasks);
  } else {
    throw ConfigError("model.preset must be 'desk' or 'paper'");
  }
  nlohmann::json merged = base.to_json();
  for (const auto& [k, v] : s.items()) merged[k] = v;
  // Unknown keys would survive the merge; check them against the preset's keys.
  for (const auto& [k, v] : s.items()) {
    if (!base.to_json().contains(k)) throw ConfigError("model." + k + ": unknown key");
  }
  ModelConfig cfg = ModelConfig::from_json(merged);
  cfg.validate();
  return cfg;
}

BenchmarkConfig parse_benchmarks(const nlohmann::json& s) {
  BenchmarkConfig b;
  ObjectReader r(s, "benchmarks");
  std::vector<std::string> kinds;
  if (r.read("kinds", kinds)) {
    b.kinds.clear();
    for (const auto& k : kinds) b.kinds.push_back(benchmark_kind_from_string(k));
  }
  r.read("instances_per_video", b.options.instances_per_video);
  r.read("positive_probability", b.options.positive_probability);
  r.read("same_task_donor", b.options.same_task_donor);
  r.read("split", b.split);
  r.finish();
  if (b.options.instances_per_video == 0) throw ConfigError("benchmarks.instances_per_video must be positive");
  double total = 0.0;
  for (double x : b.split) {
    if (x < 0.0) throw ConfigError("benchmarks.split: negative ratio");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("benchmarks.split: ratios must sum to 1");
  return b;
}

PathsConfig parse_paths(const nlohmann::json& s) {
  PathsConfig p;
  ObjectReader r(s, "paths");
  std::string v;
  if (r.read("corpus_dir", v)) p.corpus_dir = v;
  if (r.read("benchmarks_dir", v)) p.benchmarks_dir = v;
  if (r.read("checkpoints_dir", v)) p.checkpoints_dir = v;
  if (r.read("reports_dir", v)) p.reports_dir = v;
  r.finish();
  return p;
}

}  // namespace

TextEmbedder RunConfig::make_embedder() const {
  try {
    return TextEmbedder::from_json(embedder);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("embedder: ") + e.what());
  }
}

FinetuneConfig RunConfig::finetune_for(BenchmarkKind kind) const {
  auto it = finetune_tasks.find(kind);
  if (it != finetune_tasks.end()) return it->second;
  FinetuneConfig c = finetune;
  c.task_kind = kind;
  return c;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json ft = finetune.to_json();
  ft.erase("task");
  nlohmann::json tasks = nlohmann::json::object();
  for (const auto& [kind, cfg] : finetune_tasks) tasks[to_string(kind)] = cfg.to_json();
  ft["tasks"] = tasks;
  auto kinds = nlohmann::json::array();
  for (auto k : benchmarks.kinds) kinds.push_back(to_string(k));
  return {{"seed", seed},
          {"corpus", corpus.to_json()},
          {"embedder", embedder},
          {"model", model.to_json()},
          {"mask", mask.to_json()},
          {"pretrain", pretrain.to_json()},
          {"finetune", ft},
          {"benchmarks",
           {{"kinds", kinds},
            {"instances_per_video", benchmarks.options.instances_per_video},
            {"positive_probability", benchmarks.options.positive_probability},
            {"same_task_donor", benchmarks.options.same_task_donor},
            {"split", benchmarks.split}}},
          {"paths",
           {{"corpus_dir", paths.corpus_dir.string()},
            {"benchmarks_dir", paths.benchmarks_dir.string()},
            {"checkpoints_dir", paths.checkpoints_dir.string()},
            {"reports_dir", paths.reports_dir.string()}}}};
}

// Paths only say where artifacts live, so they stay out of the digest.
std::string RunConfig::digest() const {
  auto j = to_json();
  j.erase("paths");
  return sha256_hex(j.dump());
}

RunConfig parse_run_config(nlohmann::json j) {
  if (!j.is_object()) throw ConfigError("<root>: expected an object");
  static const std::set<std::string> known = {"seed",     "corpus",   "embedder",   "model", "mask",
                                              "pretrain", "finetune", "benchmarks", "paths"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError(k + ": unknown key");
  }
  RunConfig rc;
  if (j.contains("seed")) {
    try {
      rc.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("seed: ") + e.what());
    }
  }

  auto corpus = section(j, "corpus");
  default_seed(corpus, rc.seed);
  rc.corpus = CorpusConfig::from_json(corpus);
  rc.corpus.validate();

  rc.embedder = section(j, "embedder");
  if (!rc.embedder.contains("mode")) rc.embedder["mode"] = "synthetic";
  if (rc.embedder["mode"] == "synthetic") {
    default_seed(rc.embedder, rc.seed);
    if (!rc.embedder.contains("dim")) rc.embedder["dim"] = rc.corpus.feature_dim;
  }
  for (const auto& [k, v] : rc.embedder.items()) {
    if (k != "mode" && k != "seed" && k != "dim" && k != "path") {
      throw ConfigError("embedder." + k + ": unknown key");
    }
  }

  rc.model = parse_model(section(j, "model"), rc.corpus);

  auto mask = section(j, "mask");
  default_seed(mask, rc.seed);
  rc.mask = MaskSpec::from_json(mask);

  if (j.contains("pretrain")) rc.pretrain = PretrainConfig::from_json(section(j, "pretrain"));

  auto ft = section(j, "finetune");
  nlohmann::json tasks = nlohmann::json::object();
  if (auto it = ft.find("tasks"); it != ft.end()) {
    if (!it->is_object()) throw ConfigError("finetune.tasks: expected an object");
    tasks = *it;
    ft.erase("tasks");
  }
  default_seed(ft, rc.seed);
  rc.finetune = FinetuneConfig::from_json(ft);
  for (const auto& [name, overrides] : tasks.items()) {
    const BenchmarkKind kind = benchmark_kind_from_string(name);
    if (!overrides.is_object()) throw ConfigError("finetune.tasks." + name + ": expected an object");
    nlohmann::json merged = ft;
    for (const auto& [k, v] : overrides.items()) merged[k] = v;
    merged["task"] = name;
    rc.finetune_tasks[kind] = FinetuneConfig::from_json(merged, "finetune.tasks." + name);
  }

  rc.benchmarks = parse_benchmarks(section(j, "benchmarks"));
  rc.paths = parse_paths(section(j, "paths"));
  return rc;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty path component in '" + key + "'");
    if (!node->is_object()) throw ConfigError("--set: '" + key + "' does not name an object field");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  nlohmann::json j = nlohmann::json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config " + path->string());
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path->string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (seed) j["seed"] = *seed;
  return parse_run_config(std::move(j));
}

}  // namespace stepmask
