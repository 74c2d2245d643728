#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stepmask/corpus.hpp"
#include "stepmask/tensor.hpp"

namespace stepmask {

enum class BenchmarkKind { mistake_step, mistake_order, short_term, long_term, proc_rec, step_cls };

// "MistakeStep", "MistakeOrder", "ShortTerm", "LongTerm", "ProcRec", "StepCls".
std::string to_string(BenchmarkKind kind);
BenchmarkKind benchmark_kind_from_string(const std::string& s);
std::vector<BenchmarkKind> all_benchmark_kinds();

// Padding target for long-term slots past the end of a video.
inline constexpr LabelId kNullLabel = -1;
inline constexpr std::size_t kLongTermSlots = 5;

struct ClipRef {
  std::string video_id;
  std::size_t clip_index = 0;
  friend bool operator==(const ClipRef&, const ClipRef&) = default;
};

struct BenchmarkInstance {
  BenchmarkKind kind = BenchmarkKind::step_cls;
  std::string video_id;  // source video
  int task_id = 0;
  std::string task_name;
  std::vector<ClipRef> clip_refs;
  Tensor clips;                 // K x D_in, resolved from clip_refs
  std::vector<LabelId> labels;  // ground-truth label of each input clip
  // MistakeStep: {j}; MistakeOrder: {permuted ? 1 : 0}; ShortTerm, StepCls:
  // {label}; LongTerm: five slots, kNullLabel for padding; ProcRec: {task_id}.
  std::vector<int> target;
  std::uint64_t seed = 0;

  std::size_t size() const { return clip_refs.size(); }
  nlohmann::json to_json() const;
  friend bool operator==(const BenchmarkInstance&, const BenchmarkInstance&) = default;
};

// Replaces clip j (uniform) with a clip of another video whose label differs
// from the replaced one.
BenchmarkInstance make_mistake_step(const VideoRecord& video,
                                    const std::vector<VideoRecord>& corpus, std::uint64_t seed,
                                    bool same_task_donor = false);

// Either the unmodified video or a permutation whose label sequence matches
// no same-task video in the corpus. At most 100 redraws.
BenchmarkInstance make_mistake_order(const VideoRecord& video,
                                     const std::vector<VideoRecord>& corpus, std::uint64_t seed,
                                     double positive_probability = 0.5);

BenchmarkInstance make_short_term(const VideoRecord& video, std::size_t n, std::uint64_t seed);
BenchmarkInstance make_long_term(const VideoRecord& video, std::size_t i, std::uint64_t seed);
BenchmarkInstance make_proc_rec(const VideoRecord& video);
BenchmarkInstance make_step_cls(const VideoRecord& video, std::size_t i);

// Checks the structural invariants of an instance against its source corpus.
// Throws SynthesisError describing the first violation.
void verify_instance(const BenchmarkInstance& instance, const std::vector<VideoRecord>& corpus);

struct BenchmarkOptions {
  // Instances drawn per source video for MistakeStep and MistakeOrder.
  std::size_t instances_per_video = 1;
  double positive_probability = 0.5;
  bool same_task_donor = false;
};

struct BenchmarkSet {
  BenchmarkKind kind = BenchmarkKind::step_cls;
  std::string split;
  std::uint64_t seed = 0;
  std::string corpus_digest;
  std::vector<BenchmarkInstance> instances;

  // SHA-256 of the JSON Lines serialization.
  std::string digest() const;
};

// Builds one set from `videos`; donors and valid orderings come from
// `reference` (normally the whole corpus). Videos that cannot host an
// instance are skipped with a warning.
BenchmarkSet build_benchmark_set(BenchmarkKind kind, const std::vector<VideoRecord>& videos,
                                 const std::vector<VideoRecord>& reference, std::uint64_t seed,
                                 const BenchmarkOptions& options = {});

// JSON Lines, one instance per line. Features are not stored; readers resolve
// clip_refs against the corpus.
void write_benchmark_set(const std::filesystem::path& path, const BenchmarkSet& set);
std::string benchmark_jsonl(const BenchmarkSet& set);
BenchmarkSet read_benchmark_set(const std::filesystem::path& path,
                                const std::vector<VideoRecord>& corpus);

}  // namespace stepmask
