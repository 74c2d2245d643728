#include "stepmask/benchmarks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"

namespace stepmask {

namespace {

constexpr std::size_t kMaxRedraws = 100;

const std::pair<BenchmarkKind, const char*> kKindNames[] = {
    {BenchmarkKind::mistake_step, "MistakeStep"}, {BenchmarkKind::mistake_order, "MistakeOrder"},
    {BenchmarkKind::short_term, "ShortTerm"},     {BenchmarkKind::long_term, "LongTerm"},
    {BenchmarkKind::proc_rec, "ProcRec"},         {BenchmarkKind::step_cls, "StepCls"},
};

// Instance over a subset of one video's clips, in the given order.
BenchmarkInstance from_clips(BenchmarkKind kind, const VideoRecord& video,
                             const std::vector<std::size_t>& indices, std::uint64_t seed) {
  BenchmarkInstance inst;
  inst.kind = kind;
  inst.video_id = video.video_id;
  inst.task_id = video.task_id;
  inst.task_name = video.task_name;
  inst.seed = seed;
  const std::size_t dim = video.clips.empty() ? 0 : video.clips.front().feature.size();
  inst.clips = Tensor(indices.size(), dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Clip& c = video.clips.at(indices[r]);
    inst.clip_refs.push_back({video.video_id, indices[r]});
    inst.labels.push_back(c.truth);
    std::copy(c.feature.begin(), c.feature.end(), inst.clips.row(r).begin());
  }
  return inst;
}

std::vector<std::size_t> all_indices(const VideoRecord& video) {
  std::vector<std::size_t> idx(video.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::set<std::vector<LabelId>> task_orderings(int task_id, const std::vector<VideoRecord>& corpus) {
  std::set<std::vector<LabelId>> out;
  for (const auto& v : corpus) {
    if (v.task_id == task_id) out.insert(v.truths());
  }
  return out;
}

const VideoRecord* find_video(const std::vector<VideoRecord>& corpus, const std::string& id) {
  for (const auto& v : corpus) {
    if (v.video_id == id) return &v;
  }
  return nullptr;
}

}  // namespace

std::string to_string(BenchmarkKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "?";
}

BenchmarkKind benchmark_kind_from_string(const std::string& s) {
  for (const auto& [k, name] : kKindNames) {
    if (s == name) return k;
  }
  throw ConfigError("unknown benchmark kind '" + s + "'");
}

std::vector<BenchmarkKind> all_benchmark_kinds() {
  std::vector<BenchmarkKind> out;
  for (const auto& [k, name] : kKindNames) out.push_back(k);
  return out;
}

nlohmann::json BenchmarkInstance::to_json() const {
  auto refs = nlohmann::json::array();
  for (const auto& r : clip_refs) refs.push_back({r.video_id, r.clip_index});
  nlohmann::json j = {{"kind", to_string(kind)}, {"video_id", video_id}, {"task_id", task_id},
                      {"task_name", task_name},  {"clip_refs", refs},    {"seed", seed}};
  if (kind == BenchmarkKind::long_term) {
    auto slots = nlohmann::json::array();
    for (int t : target) slots.push_back(t == kNullLabel ? nlohmann::json(nullptr) : nlohmann::json(t));
    j["target"] = slots;
  } else if (kind == BenchmarkKind::mistake_order) {
    j["target"] = target.at(0) != 0;
  } else {
    j["target"] = target.at(0);
  }
  return j;
}

// --- synthesis ----------------------------------------------------------------------

BenchmarkInstance make_mistake_step(const VideoRecord& video,
                                    const std::vector<VideoRecord>& corpus, std::uint64_t seed,
                                    bool same_task_donor) {
  if (video.clips.empty()) throw InvalidInput("mistake step: empty video " + video.video_id);
  Rng rng(seed);
  const std::size_t j = std::uniform_int_distribution<std::size_t>(0, video.size() - 1)(rng);
  const LabelId replaced = video.clips[j].truth;

  std::vector<std::pair<const VideoRecord*, std::size_t>> donors;
  for (const auto& other : corpus) {
    if (other.video_id == video.video_id) continue;
    if (same_task_donor && other.task_id != video.task_id) continue;
    for (std::size_t c = 0; c < other.size(); ++c) {
      if (other.clips[c].truth != replaced) donors.emplace_back(&other, c);
    }
  }
  if (donors.empty()) {
    throw SynthesisError("mistake step: no donor clip for " + video.video_id);
  }
  const auto [donor, clip] =
      donors[std::uniform_int_distribution<std::size_t>(0, donors.size() - 1)(rng)];

  BenchmarkInstance inst = from_clips(BenchmarkKind::mistake_step, video, all_indices(video), seed);
  const Clip& d = donor->clips[clip];
  inst.clip_refs[j] = {donor->video_id, clip};
  inst.labels[j] = d.truth;
  std::copy(d.feature.begin(), d.feature.end(), inst.clips.row(j).begin());
  inst.target = {static_cast<int>(j)};
  return inst;
}

BenchmarkInstance make_mistake_order(const VideoRecord& video,
                                     const std::vector<VideoRecord>& corpus, std::uint64_t seed,
                                     double positive_probability) {
  if (video.size() < 2) throw InvalidInput("mistake order needs at least 2 clips");
  if (!(positive_probability >= 0.0 && positive_probability <= 1.0)) {
    throw InvalidInput("positive_probability must be in [0, 1]");
  }
  Rng rng(seed);
  auto order = all_indices(video);
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= positive_probability) {
    BenchmarkInstance inst = from_clips(BenchmarkKind::mistake_order, video, order, seed);
    inst.target = {0};
    return inst;
  }
  auto valid = task_orderings(video.task_id, corpus);
  valid.insert(video.truths());
  for (std::size_t attempt = 0; attempt < kMaxRedraws; ++attempt) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<LabelId> labels;
    for (std::size_t i : order) labels.push_back(video.clips[i].truth);
    if (!valid.count(labels)) {
      BenchmarkInstance inst = from_clips(BenchmarkKind::mistake_order, video, order, seed);
      inst.target = {1};
      return inst;
    }
  }
  throw SynthesisError("mistake order: no distinct ordering found for " + video.video_id);
}

BenchmarkInstance make_short_term(const VideoRecord& video, std::size_t n, std::uint64_t seed) {
  if (n < 1 || n >= video.size()) {
    throw InvalidInput("short term: n=" + std::to_string(n) + " out of range for K=" +
                       std::to_string(video.size()));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  BenchmarkInstance inst = from_clips(BenchmarkKind::short_term, video, idx, seed);
  inst.target = {video.clips[n].truth};
  return inst;
}

BenchmarkInstance make_long_term(const VideoRecord& video, std::size_t i, std::uint64_t seed) {
  if (video.size() < 2 || i > video.size() - 2) {
    throw InvalidInput("long term: i=" + std::to_string(i) + " out of range for K=" +
                       std::to_string(video.size()));
  }
  BenchmarkInstance inst = from_clips(BenchmarkKind::long_term, video, {i}, seed);
  inst.target.assign(kLongTermSlots, kNullLabel);
  for (std::size_t s = 0; s < kLongTermSlots && i + 1 + s < video.size(); ++s) {
    inst.target[s] = video.clips[i + 1 + s].truth;
  }
  return inst;
}

BenchmarkInstance make_proc_rec(const VideoRecord& video) {
  if (video.clips.empty()) throw InvalidInput("proc rec: empty video " + video.video_id);
  BenchmarkInstance inst = from_clips(BenchmarkKind::proc_rec, video, all_indices(video), 0);
  inst.target = {video.task_id};
  return inst;
}

BenchmarkInstance make_step_cls(const VideoRecord& video, std::size_t i) {
  if (i >= video.size()) throw InvalidInput("step cls: index out of range");
  BenchmarkInstance inst = from_clips(BenchmarkKind::step_cls, video, {i}, 0);
  inst.target = {video.clips[i].truth};
  return inst;
}

void verify_instance(const BenchmarkInstance& inst, const std::vector<VideoRecord>& corpus) {
  const VideoRecord* src = find_video(corpus, inst.video_id);
  if (!src) throw SynthesisError("source video " + inst.video_id + " not in corpus");
  const auto truths = src->truths();
  auto fail = [&](const std::string& what) {
    throw SynthesisError(to_string(inst.kind) + " instance of " + inst.video_id + ": " + what);
  };
  switch (inst.kind) {
    case BenchmarkKind::mistake_step: {
      if (inst.labels.size() != truths.size()) fail("length differs from source");
      std::vector<std::size_t> diff;
      for (std::size_t i = 0; i < truths.size(); ++i) {
        if (inst.labels[i] != truths[i]) diff.push_back(i);
      }
      if (diff.size() != 1) fail("expected exactly one differing position");
      if (static_cast<int>(diff[0]) != inst.target.at(0)) fail("target does not point at the change");
      break;
    }
    case BenchmarkKind::mistake_order: {
      const bool permuted = inst.target.at(0) != 0;
      if (!permuted) {
        if (inst.labels != truths) fail("unpermuted instance differs from source");
        break;
      }
      if (inst.labels == truths) fail("permuted sequence equals the source ordering");
      for (const auto& v : corpus) {
        if (v.task_id == inst.task_id && v.truths() == inst.labels) {
          fail("permuted sequence matches valid ordering of " + v.video_id);
        }
      }
      break;
    }
    case BenchmarkKind::long_term: {
      if (inst.target.size() != kLongTermSlots) fail("expected 5 slots");
      if (inst.target[0] == kNullLabel) fail("no real slot");
      bool seen_null = false;
      for (int t : inst.target) {
        if (t == kNullLabel) seen_null = true;
        else if (seen_null) fail("NULL slots interleaved with labels");
      }
      break;
    }
    default:
      break;
  }
}

// --- sets ------------------------------------------------------------------------------

std::string BenchmarkSet::digest() const { return sha256_hex(benchmark_jsonl(*this)); }

BenchmarkSet build_benchmark_set(BenchmarkKind kind, const std::vector<VideoRecord>& videos,
                                 const std::vector<VideoRecord>& reference, std::uint64_t seed,
                                 const BenchmarkOptions& options) {
  BenchmarkSet set;
  set.kind = kind;
  set.seed = seed;
  set.corpus_digest = corpus_digest(reference);
  std::size_t skipped = 0;
  for (const auto& video : videos) {
    auto instance_seed = [&](std::size_t index) { return derive_seed(seed, video.video_id, index); };
    try {
      switch (kind) {
        case BenchmarkKind::mistake_step:
          for (std::size_t k = 0; k < options.instances_per_video; ++k) {
            set.instances.push_back(
                make_mistake_step(video, reference, instance_seed(k), options.same_task_donor));
          }
          break;
        case BenchmarkKind::mistake_order:
          for (std::size_t k = 0; k < options.instances_per_video; ++k) {
            set.instances.push_back(make_mistake_order(video, reference, instance_seed(k),
                                                       options.positive_probability));
          }
          break;
        case BenchmarkKind::short_term:
          for (std::size_t n = 1; n < video.size(); ++n) {
            set.instances.push_back(make_short_term(video, n, instance_seed(n)));
          }
          break;
        case BenchmarkKind::long_term:
          for (std::size_t i = 0; i + 1 < video.size(); ++i) {
            set.instances.push_back(make_long_term(video, i, instance_seed(i)));
          }
          break;
        case BenchmarkKind::proc_rec:
          set.instances.push_back(make_proc_rec(video));
          break;
        case BenchmarkKind::step_cls:
          for (std::size_t i = 0; i < video.size(); ++i) set.instances.push_back(make_step_cls(video, i));
          break;
      }
    } catch (const SynthesisError& e) {
      ++skipped;
      spdlog::warn("{}: skipping {}: {}", to_string(kind), video.video_id, e.what());
    } catch (const InvalidInput& e) {
      ++skipped;
      spdlog::warn("{}: skipping {}: {}", to_string(kind), video.video_id, e.what());
    }
  }
  for (const auto& inst : set.instances) verify_instance(inst, reference);
  if (skipped > 0) spdlog::info("{}: {} videos skipped", to_string(kind), skipped);
  return set;
}

std::string benchmark_jsonl(const BenchmarkSet& set) {
  std::string out;
  for (const auto& inst : set.instances) {
    out += inst.to_json().dump();
    out += '\n';
  }
  return out;
}

void write_benchmark_set(const std::filesystem::path& path, const BenchmarkSet& set) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << benchmark_jsonl(set);
}

BenchmarkSet read_benchmark_set(const std::filesystem::path& path,
                                const std::vector<VideoRecord>& corpus) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open benchmark file " + path.string());
  std::unordered_map<std::string, const VideoRecord*> by_id;
  for (const auto& v : corpus) by_id[v.video_id] = &v;

  BenchmarkSet set;
  set.corpus_digest = corpus_digest(corpus);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      BenchmarkInstance inst;
      inst.kind = benchmark_kind_from_string(j.at("kind").get<std::string>());
      if (!set.instances.empty() && inst.kind != set.kind) {
        throw ParseError(where + ": mixed benchmark kinds in one file");
      }
      set.kind = inst.kind;
      inst.video_id = j.at("video_id").get<std::string>();
      inst.task_id = j.at("task_id").get<int>();
      inst.task_name = j.at("task_name").get<std::string>();
      inst.seed = j.at("seed").get<std::uint64_t>();
      const auto& refs = j.at("clip_refs");
      std::size_t dim = 0;
      std::vector<const Clip*> clips;
      for (const auto& r : refs) {
        ClipRef ref{r.at(0).get<std::string>(), r.at(1).get<std::size_t>()};
        auto it = by_id.find(ref.video_id);
        if (it == by_id.end()) throw VocabularyMismatch(where + ": unknown video " + ref.video_id);
        if (ref.clip_index >= it->second->size()) throw ParseError(where + ": clip index out of range");
        clips.push_back(&it->second->clips[ref.clip_index]);
        dim = clips.back()->feature.size();
        inst.clip_refs.push_back(std::move(ref));
      }
      inst.clips = Tensor(clips.size(), dim);
      for (std::size_t c = 0; c < clips.size(); ++c) {
        inst.labels.push_back(clips[c]->truth);
        std::copy(clips[c]->feature.begin(), clips[c]->feature.end(), inst.clips.row(c).begin());
      }
      const auto& t = j.at("target");
      if (inst.kind == BenchmarkKind::long_term) {
        for (const auto& s : t) inst.target.push_back(s.is_null() ? kNullLabel : s.get<int>());
      } else if (inst.kind == BenchmarkKind::mistake_order) {
        inst.target = {t.get<bool>() ? 1 : 0};
      } else {
        inst.target = {t.get<int>()};
      }
      set.instances.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return set;
}

}  // namespace stepmask
