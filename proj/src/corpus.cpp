#include "stepmask/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "stepmask/binary_io.hpp"
#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"
#include "stepmask/json_util.hpp"

namespace stepmask {

namespace {

constexpr std::uint32_t kSidecarVersion = 1;
constexpr double kClipSeconds = 8.0;

const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v = {
      "Whisk", "Pour", "Cut", "Sand", "Drill", "Attach", "Mix", "Heat", "Fold", "Remove",
      "Tighten", "Measure", "Spread", "Rinse", "Peel", "Glue", "Paint", "Insert", "Press", "Trim"};
  return v;
}

const std::vector<std::string>& nouns() {
  static const std::vector<std::string> n = {
      "batter", "board", "screw", "panel", "dough", "pipe", "sauce", "fabric", "filter", "wheel",
      "shelf", "bolt", "onion", "tile", "cable", "lid", "frame", "hinge", "brush", "tray"};
  return n;
}

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> f = {"um",   "so",   "okay", "now",
                                             "like", "then", "right", "basically"};
  return f;
}

double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

std::string corrupt_asr(const std::string& title, double rate, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::istringstream tokens(title);
  std::string token, out;
  while (tokens >> token) {
    if (unif(rng) < rate) token = filler_words()[rng() % filler_words().size()];
    if (!out.empty()) out += ' ';
    out += token;
  }
  return out;
}

[[noreturn]] void annotation_error(const std::string& field, const std::string& msg) {
  throw ParseError(field + ": " + msg);
}

template <typename T>
T field_as(const nlohmann::json& obj, const char* key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) annotation_error(path + "." + key, "missing field");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    annotation_error(path + "." + key, e.what());
  }
}

}  // namespace

// --- CorpusConfig --------------------------------------------------------------

void CorpusConfig::validate() const {
  if (num_tasks == 0) throw ConfigError("corpus.num_tasks must be positive");
  if (steps_per_task < 2) throw ConfigError("corpus.steps_per_task must be at least 2");
  if (vocab_size < num_tasks) throw ConfigError("corpus.vocab_size must be >= num_tasks");
  if (feature_dim == 0) throw ConfigError("corpus.feature_dim must be positive");
  if (!(feature_noise_sigma >= 0.0)) throw ConfigError("corpus.feature_noise_sigma must be >= 0");
  if (!(asr_noise >= 0.0 && asr_noise < 1.0)) throw ConfigError("corpus.asr_noise must be in [0,1)");
  if (!(skip_probability >= 0.0 && skip_probability < 1.0)) {
    throw ConfigError("corpus.skip_probability must be in [0,1)");
  }
  if (!(alternative_rate >= 0.0 && alternative_rate <= 1.0)) {
    throw ConfigError("corpus.alternative_rate must be in [0,1]");
  }
  if (!(label_sharing_rate >= 0.0 && label_sharing_rate <= 1.0)) {
    throw ConfigError("corpus.label_sharing_rate must be in [0,1]");
  }
  if (min_length < 2) throw ConfigError("corpus.min_length must be at least 2");
  if (min_length > steps_per_task) throw ConfigError("corpus.min_length exceeds steps_per_task");
  if (top_k == 0) throw ConfigError("corpus.top_k must be at least 1");
  if (clip_vectors_per_step != 1) {
    throw ConfigError("corpus.clip_vectors_per_step: only 1 vector per step is supported");
  }
  for (const auto& [label, proto] : shared_prototypes) {
    if (label < 0 || proto < 0 || static_cast<std::size_t>(label) >= vocab_size ||
        static_cast<std::size_t>(proto) >= vocab_size) {
      throw ConfigError("corpus.shared_prototypes: label outside vocabulary");
    }
  }
}

nlohmann::json CorpusConfig::to_json() const {
  auto protos = nlohmann::json::array();
  for (const auto& [label, proto] : shared_prototypes) protos.push_back({label, proto});
  return {{"num_tasks", num_tasks},
          {"steps_per_task", steps_per_task},
          {"vocab_size", vocab_size},
          {"videos_per_task", videos_per_task},
          {"feature_noise_sigma", feature_noise_sigma},
          {"asr_noise", asr_noise},
          {"feature_dim", feature_dim},
          {"seed", seed},
          {"skip_probability", skip_probability},
          {"alternative_rate", alternative_rate},
          {"label_sharing_rate", label_sharing_rate},
          {"min_length", min_length},
          {"top_k", top_k},
          {"clip_vectors_per_step", clip_vectors_per_step},
          {"shared_prototypes", protos}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  ObjectReader r(j, "corpus");
  r.read("num_tasks", c.num_tasks);
  r.read("steps_per_task", c.steps_per_task);
  r.read("vocab_size", c.vocab_size);
  r.read("videos_per_task", c.videos_per_task);
  r.read("feature_noise_sigma", c.feature_noise_sigma);
  r.read("asr_noise", c.asr_noise);
  r.read("feature_dim", c.feature_dim);
  r.read("seed", c.seed);
  r.read("skip_probability", c.skip_probability);
  r.read("alternative_rate", c.alternative_rate);
  r.read("label_sharing_rate", c.label_sharing_rate);
  r.read("min_length", c.min_length);
  r.read("top_k", c.top_k);
  r.read("clip_vectors_per_step", c.clip_vectors_per_step);
  std::vector<std::array<LabelId, 2>> protos;
  if (r.read("shared_prototypes", protos)) {
    for (const auto& p : protos) c.shared_prototypes[p[0]] = p[1];
  }
  r.finish();
  return c;
}

// --- TaskTemplate ----------------------------------------------------------------

void TaskTemplate::validate(const StepVocabulary& vocab) const {
  if (canonical_steps.empty()) throw ConfigError(name + ": no canonical steps");
  if (canonical_steps.size() < 2 || min_length < 2 || min_length > canonical_steps.size()) {
    throw ConfigError(name + ": template cannot guarantee at least 2 steps");
  }
  for (LabelId id : canonical_steps) {
    if (!vocab.contains(id)) throw VocabularyMismatch(name + ": unknown label " + std::to_string(id));
  }
  for (const auto& [pos, alts] : alternatives) {
    if (pos >= canonical_steps.size()) throw ConfigError(name + ": alternative position out of range");
    std::set<LabelId> distinct(alts.begin(), alts.end());
    if (distinct.size() != alts.size()) throw ConfigError(name + ": duplicate alternatives");
    for (LabelId id : alts) {
      if (!vocab.contains(id)) throw VocabularyMismatch(name + ": unknown label " + std::to_string(id));
    }
  }
}

nlohmann::json TaskTemplate::to_json() const {
  auto alts = nlohmann::json::array();
  for (const auto& [pos, labels] : alternatives) alts.push_back({{"position", pos}, {"labels", labels}});
  return {{"task_id", task_id},
          {"name", name},
          {"canonical_steps", canonical_steps},
          {"alternatives", alts},
          {"skip_probability", skip_probability},
          {"min_length", min_length}};
}

TaskTemplate TaskTemplate::from_json(const nlohmann::json& j) {
  TaskTemplate t;
  t.task_id = j.at("task_id").get<int>();
  t.name = j.at("name").get<std::string>();
  t.canonical_steps = j.at("canonical_steps").get<std::vector<LabelId>>();
  for (const auto& a : j.at("alternatives")) {
    t.alternatives[a.at("position").get<std::size_t>()] = a.at("labels").get<std::vector<LabelId>>();
  }
  t.skip_probability = j.at("skip_probability").get<double>();
  t.min_length = j.at("min_length").get<std::size_t>();
  return t;
}

// --- VideoRecord ------------------------------------------------------------------

Tensor VideoRecord::features() const {
  if (clips.empty()) return Tensor(std::size_t{0}, std::size_t{0});
  Tensor t(clips.size(), clips.front().feature.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    std::copy(clips[i].feature.begin(), clips[i].feature.end(), t.row(i).begin());
  }
  return t;
}

std::vector<LabelId> VideoRecord::truths() const {
  std::vector<LabelId> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back(c.truth);
  return out;
}

void VideoRecord::validate(const StepVocabulary& vocab) const {
  if (clips.size() < 2) throw InvalidAnnotation(video_id + ": fewer than 2 clips");
  const std::size_t dim = clips.front().feature.size();
  for (const auto& c : clips) {
    if (c.feature.size() != dim) throw DimensionError(video_id + ": inconsistent feature dimension");
    if (!vocab.contains(c.truth)) throw VocabularyMismatch(video_id + ": unknown label");
    c.weak.validate(vocab.size());
  }
}

// --- generation ---------------------------------------------------------------------

StepVocabulary make_synthetic_vocabulary(std::size_t size, const TextEmbedder& embedder) {
  std::vector<StepText> steps;
  steps.reserve(size);
  const auto& vs = verbs();
  const auto& ns = nouns();
  const std::size_t combos = vs.size() * ns.size();
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t c = i % combos;
    // Stride through nouns so consecutive ids differ in both words.
    std::string title = vs[c % vs.size()] + " the " + ns[(c / vs.size() + c) % ns.size()];
    if (i >= combos) title += " again " + std::to_string(i / combos);
    steps.push_back({static_cast<LabelId>(i), title, normalize_text(title)});
  }
  return StepVocabulary(std::move(steps), embedder);
}

std::vector<double> fit_to_dim(std::span<const double> v, std::size_t dim) {
  std::vector<double> out(dim, 0.0);
  std::copy_n(v.begin(), std::min(dim, v.size()), out.begin());
  return out;
}

std::vector<TaskTemplate> generate_task_library(const CorpusConfig& cfg,
                                                const StepVocabulary& vocab) {
  cfg.validate();
  if (vocab.size() < cfg.vocab_size) throw ConfigError("vocabulary smaller than corpus.vocab_size");
  const std::size_t S = cfg.vocab_size;
  if (cfg.label_sharing_rate == 0.0 && S < cfg.num_tasks * cfg.steps_per_task) {
    throw ConfigError("vocabulary of " + std::to_string(S) + " labels cannot give " +
                      std::to_string(cfg.num_tasks) + " tasks " +
                      std::to_string(cfg.steps_per_task) + " distinct steps each");
  }
  if (cfg.alternative_rate > 0.0 && S <= cfg.steps_per_task) {
    throw ConfigError("vocabulary too small for alternative steps");
  }

  Rng rng(derive_seed(cfg.seed, "task-library"));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<LabelId> pool(S);
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::size_t next = 0;

  std::vector<TaskTemplate> tasks;
  tasks.reserve(cfg.num_tasks);
  for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
    TaskTemplate task;
    task.task_id = static_cast<int>(t);
    task.name = "task-" + std::to_string(t);
    task.skip_probability = cfg.skip_probability;
    task.min_length = cfg.min_length;
    std::set<LabelId> used;
    for (std::size_t p = 0; p < cfg.steps_per_task; ++p) {
      LabelId label = -1;
      if (cfg.label_sharing_rate > 0.0 && unif(rng) < cfg.label_sharing_rate) {
        std::vector<LabelId> candidates;
        for (std::size_t i = 0; i < next; ++i) {
          if (!used.count(pool[i])) candidates.push_back(pool[i]);
        }
        if (!candidates.empty()) label = candidates[rng() % candidates.size()];
      }
      if (label < 0) {
        while (next < S && used.count(pool[next])) ++next;
        if (next >= S) throw ConfigError("vocabulary exhausted while building task library");
        label = pool[next++];
      }
      used.insert(label);
      task.canonical_steps.push_back(label);
    }
    for (std::size_t p = 0; p < cfg.steps_per_task; ++p) {
      if (cfg.alternative_rate > 0.0 && unif(rng) < cfg.alternative_rate) {
        LabelId alt = 0;
        do {
          alt = static_cast<LabelId>(rng() % S);
        } while (used.count(alt));
        task.alternatives[p] = {alt};
      }
    }
    task.validate(vocab);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

VideoRecord sample_video(const TaskTemplate& task, const StepVocabulary& vocab,
                         const TextEmbedder& embedder, const CorpusConfig& cfg,
                         std::uint64_t draw_seed) {
  task.validate(vocab);
  Rng rng(draw_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const auto& steps = task.canonical_steps;
  std::vector<LabelId> realized;
  for (std::size_t p = 0; p < steps.size(); ++p) {
    const double u = unif(rng);
    const std::size_t remaining_after = steps.size() - p - 1;
    if (u < task.skip_probability && realized.size() + remaining_after >= task.min_length) continue;
    LabelId label = steps[p];
    auto alt = task.alternatives.find(p);
    if (alt != task.alternatives.end() && !alt->second.empty()) {
      const std::size_t choice = rng() % (alt->second.size() + 1);
      if (choice > 0) label = alt->second[choice - 1];
    }
    realized.push_back(label);
  }

  VideoRecord video;
  video.task_id = task.task_id;
  video.task_name = task.name;
  for (std::size_t i = 0; i < realized.size(); ++i) {
    const LabelId label = realized[i];
    auto proto_it = cfg.shared_prototypes.find(label);
    const LabelId proto = proto_it == cfg.shared_prototypes.end() ? label : proto_it->second;
    Clip clip;
    clip.feature = fit_to_dim(vocab.step(proto).embedding, cfg.feature_dim);
    for (double& x : clip.feature) {
      if (cfg.feature_noise_sigma > 0.0) x += cfg.feature_noise_sigma * noise(rng);
      x = to_f32(x);
    }
    clip.asr = corrupt_asr(vocab.step(label).title, cfg.asr_noise, rng);
    clip.weak = weak_label_distribution(clip.asr, vocab, embedder, cfg.top_k);
    clip.truth = label;
    clip.start = kClipSeconds * static_cast<double>(i);
    clip.end = kClipSeconds * static_cast<double>(i + 1);
    video.clips.push_back(std::move(clip));
  }
  return video;
}

std::vector<VideoRecord> generate_videos(const std::vector<TaskTemplate>& tasks,
                                         const StepVocabulary& vocab,
                                         const TextEmbedder& embedder, const CorpusConfig& cfg) {
  std::vector<VideoRecord> videos;
  videos.reserve(tasks.size() * cfg.videos_per_task);
  char id[64];
  for (const auto& task : tasks) {
    for (std::size_t v = 0; v < cfg.videos_per_task; ++v) {
      const std::uint64_t draw =
          derive_seed(cfg.seed, "video", static_cast<std::uint64_t>(task.task_id) * 1000003ULL + v);
      auto video = sample_video(task, vocab, embedder, cfg, draw);
      std::snprintf(id, sizeof id, "t%03d-v%04zu", task.task_id, v);
      video.video_id = id;
      videos.push_back(std::move(video));
    }
  }
  return videos;
}

std::string corpus_digest(const std::vector<VideoRecord>& videos) {
  std::ostringstream buf(std::ios::binary);
  for (const auto& v : videos) {
    buf << v.video_id << '\0' << v.task_id << '\0' << v.task_name << '\0' << v.clips.size() << '\0';
    for (const auto& c : v.clips) {
      binary::put<std::int32_t>(buf, c.truth);
      binary::put(buf, c.start);
      binary::put(buf, c.end);
      buf << c.asr << '\0';
      for (double x : c.feature) binary::put(buf, x);
      for (const auto& e : c.weak.entries) {
        binary::put<std::int32_t>(buf, e.label);
        binary::put(buf, e.probability);
      }
    }
  }
  return sha256_hex(buf.str());
}

// --- annotation files -------------------------------------------------------------------

void write_annotations(const std::filesystem::path& path, const std::vector<VideoRecord>& videos) {
  auto arr = nlohmann::json::array();
  for (const auto& v : videos) {
    auto steps = nlohmann::json::array();
    for (const auto& c : v.clips) {
      steps.push_back({{"label_id", c.truth}, {"start", c.start}, {"end", c.end}, {"asr", c.asr}});
    }
    arr.push_back({{"video_id", v.video_id},
                   {"task_id", v.task_id},
                   {"task_name", v.task_name},
                   {"steps", steps}});
  }
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << nlohmann::json{{"videos", arr}}.dump(1) << '\n';
}

std::vector<VideoRecord> load_annotations(const std::filesystem::path& path,
                                          const StepVocabulary& vocab,
                                          const TextEmbedder& embedder,
                                          const AnnotationLoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open annotation file " + path.string());
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!root.is_object() || !root.contains("videos") || !root["videos"].is_array()) {
    annotation_error("videos", "expected an array");
  }

  std::optional<FeatureTable> sidecar;
  if (options.feature_sidecar) {
    sidecar = read_feature_sidecar(*options.feature_sidecar);
    if (sidecar->dim != options.feature_dim) {
      throw DimensionError("feature sidecar dimension " + std::to_string(sidecar->dim) +
                           " differs from expected " + std::to_string(options.feature_dim));
    }
  }

  std::vector<VideoRecord> videos;
  const auto& arr = root["videos"];
  for (std::size_t vi = 0; vi < arr.size(); ++vi) {
    const std::string vpath = "videos[" + std::to_string(vi) + "]";
    const auto& jv = arr[vi];
    if (!jv.is_object()) annotation_error(vpath, "expected an object");
    VideoRecord video;
    video.video_id = field_as<std::string>(jv, "video_id", vpath);
    video.task_id = field_as<int>(jv, "task_id", vpath);
    video.task_name = field_as<std::string>(jv, "task_name", vpath);
    auto steps = jv.find("steps");
    if (steps == jv.end() || !steps->is_array()) annotation_error(vpath + ".steps", "expected an array");
    const std::uint64_t vhash = video_hash(video.video_id);
    double prev_end = -std::numeric_limits<double>::infinity();
    for (std::size_t si = 0; si < steps->size(); ++si) {
      const std::string spath = vpath + ".steps[" + std::to_string(si) + "]";
      const auto& js = (*steps)[si];
      if (!js.is_object()) annotation_error(spath, "expected an object");
      Clip clip;
      clip.truth = field_as<LabelId>(js, "label_id", spath);
      clip.start = field_as<double>(js, "start", spath);
      clip.end = field_as<double>(js, "end", spath);
      clip.asr = field_as<std::string>(js, "asr", spath);
      if (!vocab.contains(clip.truth)) {
        throw VocabularyMismatch(spath + ".label_id: unknown label " + std::to_string(clip.truth));
      }
      if (clip.end < clip.start) throw InvalidAnnotation(spath + ": end precedes start");
      if (clip.start < prev_end) throw InvalidAnnotation(spath + ": overlaps previous segment");
      prev_end = clip.end;
      clip.weak = weak_label_distribution(clip.asr, vocab, embedder, options.top_k);
      if (sidecar) {
        auto it = sidecar->clips.find({vhash, static_cast<std::uint32_t>(si)});
        if (it == sidecar->clips.end()) {
          throw ParseError(spath + ": no feature in sidecar for this clip");
        }
        clip.feature = it->second;
      } else {
        clip.feature = fit_to_dim(vocab.step(clip.truth).embedding, options.feature_dim);
        for (double& x : clip.feature) x = to_f32(x);
      }
      video.clips.push_back(std::move(clip));
    }
    videos.push_back(std::move(video));
  }
  return videos;
}

std::uint64_t video_hash(std::string_view video_id) { return fnv1a64(video_id); }

void write_feature_sidecar(const std::filesystem::path& path,
                           const std::vector<VideoRecord>& videos) {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  for (const auto& v : videos) {
    for (const auto& c : v.clips) {
      if (dim == 0) dim = static_cast<std::uint32_t>(c.feature.size());
      if (c.feature.size() != dim) throw DimensionError("sidecar: inconsistent feature dimension");
      ++count;
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  binary::put_magic(out, "STPF");
  binary::put<std::uint32_t>(out, kSidecarVersion);
  binary::put<std::uint32_t>(out, dim);
  binary::put<std::uint64_t>(out, count);
  for (const auto& v : videos) {
    const std::uint64_t h = video_hash(v.video_id);
    for (std::size_t i = 0; i < v.clips.size(); ++i) {
      binary::put<std::uint64_t>(out, h);
      binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(i));
      for (double x : v.clips[i].feature) binary::put<float>(out, static_cast<float>(x));
    }
  }
}

FeatureTable read_feature_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open feature sidecar " + path.string());
  binary::expect_magic(in, "STPF");
  const auto version = binary::get<std::uint32_t>(in, "version");
  if (version != kSidecarVersion) throw ParseError("unsupported sidecar version");
  FeatureTable table;
  table.dim = binary::get<std::uint32_t>(in, "dim");
  const auto count = binary::get<std::uint64_t>(in, "clip_count");
  for (std::uint64_t n = 0; n < count; ++n) {
    const auto h = binary::get<std::uint64_t>(in, "video_hash");
    const auto idx = binary::get<std::uint32_t>(in, "clip_index");
    std::vector<double> feature(table.dim);
    for (double& x : feature) x = binary::get<float>(in, "feature");
    if (!table.clips.emplace(std::make_pair(h, idx), std::move(feature)).second) {
      throw ParseError("sidecar: duplicate clip entry");
    }
  }
  return table;
}

// --- splits ----------------------------------------------------------------------------

CorpusSplits split_corpus(const std::vector<VideoRecord>& videos,
                          const std::array<double, 3>& ratios, std::uint64_t seed) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw InvalidInput("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("split ratios must sum to 1");

  std::map<int, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < videos.size(); ++i) by_task[videos[i].task_id].push_back(i);

  std::vector<int> assignment(videos.size(), -1);
  std::vector<std::size_t> unstratified;
  for (auto& [task, members] : by_task) {
    if (members.size() < 3) {
      spdlog::warn("task {} has {} videos; assigning its videos without stratification", task,
                   members.size());
      unstratified.insert(unstratified.end(), members.begin(), members.end());
      continue;
    }
    Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(task)));
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t n = members.size();
    const auto n_train = std::min<std::size_t>(n, std::llround(static_cast<double>(n) * ratios[0]));
    const auto n_val =
        std::min<std::size_t>(n - n_train, std::llround(static_cast<double>(n) * ratios[1]));
    for (std::size_t k = 0; k < n; ++k) {
      assignment[members[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
    }
  }
  std::sort(unstratified.begin(), unstratified.end());
  Rng rng(derive_seed(seed, "split-unstratified"));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t idx : unstratified) {
    const double u = unif(rng);
    assignment[idx] = u < ratios[0] ? 0 : (u < ratios[0] + ratios[1] ? 1 : 2);
    // Guard against a zero-ratio split receiving a video through rounding at u ~ 1.
    while (ratios[static_cast<std::size_t>(assignment[idx])] == 0.0) --assignment[idx];
  }

  CorpusSplits splits;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    auto& dest = assignment[i] == 0 ? splits.train : (assignment[i] == 1 ? splits.val : splits.test);
    dest.push_back(videos[i]);
  }
  return splits;
}

// --- corpus directories -------------------------------------------------------------------

CorpusBundle generate_corpus(const CorpusConfig& cfg, const TextEmbedder& embedder) {
  cfg.validate();
  CorpusBundle b;
  b.config = cfg;
  b.embedder = embedder;
  b.vocab = make_synthetic_vocabulary(cfg.vocab_size, embedder);
  b.tasks = generate_task_library(cfg, b.vocab);
  b.videos = generate_videos(b.tasks, b.vocab, embedder, cfg);
  b.digest = corpus_digest(b.videos);
  return b;
}

nlohmann::json save_corpus(const std::filesystem::path& dir, const CorpusBundle& bundle,
                           const std::string& config_digest) {
  std::filesystem::create_directories(dir);
  bundle.vocab.save(dir / "vocab.json");
  auto tasks = nlohmann::json::array();
  for (const auto& t : bundle.tasks) tasks.push_back(t.to_json());
  {
    std::ofstream out(dir / "tasks.json");
    out << tasks.dump(2) << '\n';
  }
  write_annotations(dir / "annotations.json", bundle.videos);
  write_feature_sidecar(dir / "features.stpf", bundle.videos);
  nlohmann::json manifest = {
      {"format", "stepmask-corpus"},
      {"version", 1},
      {"config", bundle.config.to_json()},
      {"embedder", bundle.embedder.to_json()},
      {"seeds", {{"corpus", bundle.config.seed}, {"embedder", bundle.embedder.seed()}}},
      {"content_digest", bundle.digest},
      {"config_digest", config_digest},
      {"num_videos", bundle.videos.size()},
      {"files",
       {{"vocabulary", "vocab.json"},
        {"tasks", "tasks.json"},
        {"annotations", "annotations.json"},
        {"features", "features.stpf"}}}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  return manifest;
}

CorpusBundle load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("no corpus manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
  CorpusBundle b;
  b.config = CorpusConfig::from_json(manifest.at("config"));
  b.embedder = TextEmbedder::from_json(manifest.at("embedder"));
  b.vocab = StepVocabulary::load(dir / "vocab.json", b.embedder);
  std::ifstream tin(dir / "tasks.json");
  nlohmann::json tasks;
  tin >> tasks;
  for (const auto& t : tasks) b.tasks.push_back(TaskTemplate::from_json(t));
  AnnotationLoadOptions opts;
  opts.top_k = b.config.top_k;
  opts.feature_dim = b.config.feature_dim;
  opts.feature_sidecar = dir / "features.stpf";
  b.videos = load_annotations(dir / "annotations.json", b.vocab, b.embedder, opts);
  b.digest = corpus_digest(b.videos);
  if (b.digest != manifest.at("content_digest").get<std::string>()) {
    throw ParseError(dir.string() + ": corpus content does not match manifest digest");
  }
  return b;
}

}  // namespace stepmask
