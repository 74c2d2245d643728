#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "stepmask/benchmarks.hpp"
#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"

using namespace stepmask;
namespace fs = std::filesystem;

namespace {

// Video whose clip features encode their labels, so swaps are traceable.
VideoRecord labelled(const std::string& id, int task, const std::vector<LabelId>& labels) {
  VideoRecord v;
  v.video_id = id;
  v.task_id = task;
  v.task_name = "task-" + std::to_string(task);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Clip c;
    c.feature = {static_cast<double>(labels[i]), static_cast<double>(i)};
    c.truth = labels[i];
    c.weak = LabelDistribution{{{labels[i], 1.0}}, 1};
    c.start = 8.0 * static_cast<double>(i);
    c.end = c.start + 8.0;
    v.clips.push_back(c);
  }
  return v;
}

std::vector<VideoRecord> small_corpus() {
  return {labelled("a", 0, {0, 1, 2, 3}), labelled("b", 0, {0, 1, 2, 3}), labelled("c", 1, {4, 5, 6, 7, 8, 9}),
          labelled("d", 1, {4, 5, 6, 7, 8, 9}), labelled("e", 2, {10, 11})};
}

}  // namespace

TEST_CASE("mistake step swaps exactly one clip for a foreign label") {
  const auto corpus = small_corpus();
  const auto& v = corpus[0];
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto inst = make_mistake_step(v, corpus, seed);
    REQUIRE(inst.target.size() == 1);
    const auto j = static_cast<std::size_t>(inst.target[0]);
    REQUIRE(j < v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i == j) {
        CHECK(inst.labels[i] != v.clips[i].truth);
        CHECK(inst.clip_refs[i].video_id != v.video_id);
        // The donor clip's feature travels with it.
        CHECK(inst.clips(i, 0) == static_cast<double>(inst.labels[i]));
      } else {
        CHECK(inst.labels[i] == v.clips[i].truth);
        CHECK(inst.clip_refs[i] == ClipRef{"a", i});
      }
    }
    CHECK(inst == make_mistake_step(v, corpus, seed));
  }
  CHECK_THROWS_AS(make_mistake_step(v, {v}, 1), SynthesisError);
}

TEST_CASE("mistake step positions are uniform") {
  const auto corpus = small_corpus();
  const auto& v = corpus[2];  // K = 6
  std::vector<double> counts(6, 0.0);
  const int n = 10000;
  for (int s = 0; s < n; ++s) counts[static_cast<std::size_t>(make_mistake_step(v, corpus, derive_seed(1, "u", s)).target[0])] += 1;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - n / 6.0) * (c - n / 6.0) / (n / 6.0);
  // 99th percentile of chi-square with 5 degrees of freedom.
  CHECK(chi2 < 15.086);
}

TEST_CASE("same-task donors stay within the task") {
  const auto corpus = std::vector<VideoRecord>{labelled("a", 0, {0, 1, 2}), labelled("b", 0, {3, 4, 5}),
                                               labelled("c", 1, {6, 7, 8})};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto inst = make_mistake_step(corpus[0], corpus, seed, true);
    CHECK(inst.clip_refs[static_cast<std::size_t>(inst.target[0])].video_id == "b");
  }
}

TEST_CASE("mistake order: two-step video and degenerate labels") {
  const std::vector<VideoRecord> corpus = {labelled("x", 0, {1, 2})};
  std::size_t permuted = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = make_mistake_order(corpus[0], corpus, seed);
    if (inst.target[0] == 1) {
      ++permuted;
      CHECK(inst.labels == std::vector<LabelId>{2, 1});
    } else {
      CHECK(inst.labels == std::vector<LabelId>{1, 2});
    }
  }
  CHECK(permuted > 0);
  CHECK(permuted < 100);

  const std::vector<VideoRecord> same = {labelled("y", 0, {3, 3, 3})};
  CHECK_THROWS_AS(make_mistake_order(same[0], same, 1, 1.0), SynthesisError);

  // [b,a] is itself a valid ordering of the task, so no permutation is new.
  const std::vector<VideoRecord> both = {labelled("p", 0, {1, 2}), labelled("q", 0, {2, 1})};
  CHECK_THROWS_AS(make_mistake_order(both[0], both, 1, 1.0), SynthesisError);
}

TEST_CASE("mistake order positive fraction") {
  const auto corpus = small_corpus();
  std::size_t pos = 0;
  for (int s = 0; s < 10000; ++s) pos += make_mistake_order(corpus[2], corpus, derive_seed(2, "o", s)).target[0];
  CHECK(std::abs(static_cast<double>(pos) / 10000.0 - 0.5) <= 0.02);
}

TEST_CASE("short-term forecasting instances") {
  const auto v = labelled("s", 0, {7, 8, 9});
  const auto inst = make_short_term(v, 2, 0);
  CHECK(inst.size() == 2);
  CHECK(inst.labels == std::vector<LabelId>{7, 8});
  CHECK(inst.target == std::vector<int>{9});
  CHECK(make_short_term(v, 1, 0).target == std::vector<int>{8});
  CHECK_THROWS_AS(make_short_term(v, 0, 0), InvalidInput);
  CHECK_THROWS_AS(make_short_term(v, 3, 0), InvalidInput);
  CHECK(build_benchmark_set(BenchmarkKind::short_term, {v}, {v}, 1).instances.size() == 2);
}

TEST_CASE("long-term forecasting pads with NULL") {
  const auto v = labelled("l", 0, {1, 2, 3, 4});
  const auto first = make_long_term(v, 0, 0);
  CHECK(first.size() == 1);
  CHECK(first.target == std::vector<int>{2, 3, 4, kNullLabel, kNullLabel});
  CHECK(make_long_term(v, 2, 0).target == std::vector<int>{4, kNullLabel, kNullLabel, kNullLabel, kNullLabel});
  const auto six = labelled("m", 0, {1, 2, 3, 4, 5, 6, 7});
  CHECK(make_long_term(six, 0, 0).target == std::vector<int>{2, 3, 4, 5, 6});
  CHECK_THROWS_AS(make_long_term(v, 3, 0), InvalidInput);
}

TEST_CASE("procedure recognition and step classification") {
  const auto corpus = small_corpus();
  const auto pr = make_proc_rec(corpus[2]);
  CHECK(pr.size() == 6);
  CHECK(pr.target == std::vector<int>{1});
  const auto sc = make_step_cls(corpus[2], 3);
  CHECK(sc.size() == 1);
  CHECK(sc.target == std::vector<int>{7});
  std::size_t total = 0;
  for (const auto& v : corpus) total += v.size();
  CHECK(build_benchmark_set(BenchmarkKind::step_cls, corpus, corpus, 1).instances.size() == total);
}

TEST_CASE("verify_instance catches tampering") {
  const auto corpus = small_corpus();
  auto ms = make_mistake_step(corpus[0], corpus, 3);
  CHECK_NOTHROW(verify_instance(ms, corpus));
  ms.target[0] = (ms.target[0] + 1) % 4;
  CHECK_THROWS_AS(verify_instance(ms, corpus), SynthesisError);

  auto lt = make_long_term(corpus[0], 2, 0);
  lt.target = {3, kNullLabel, 3, kNullLabel, kNullLabel};
  CHECK_THROWS_AS(verify_instance(lt, corpus), SynthesisError);

  auto mo = make_mistake_order(corpus[0], corpus, 0, 1.0);
  CHECK_NOTHROW(verify_instance(mo, corpus));
  mo.labels = corpus[1].truths();
  CHECK_THROWS_AS(verify_instance(mo, corpus), SynthesisError);
}

TEST_CASE("benchmark sets are deterministic and round-trip through JSON Lines") {
  const auto corpus = small_corpus();
  BenchmarkOptions opts;
  opts.instances_per_video = 3;
  const auto dir = fs::temp_directory_path() / "stepmask-test-bench";
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (BenchmarkKind kind : all_benchmark_kinds()) {
    const auto set = build_benchmark_set(kind, corpus, corpus, 17, opts);
    CHECK(set.digest() == build_benchmark_set(kind, corpus, corpus, 17, opts).digest());
    CHECK_FALSE(set.instances.empty());
    const auto path = dir / (to_string(kind) + ".jsonl");
    write_benchmark_set(path, set);
    const auto back = read_benchmark_set(path, corpus);
    CHECK(back.kind == kind);
    REQUIRE(back.instances.size() == set.instances.size());
    for (std::size_t i = 0; i < set.instances.size(); ++i) CHECK(back.instances[i] == set.instances[i]);
    CHECK(benchmark_kind_from_string(to_string(kind)) == kind);
  }
  std::ofstream(dir / "bad.jsonl") << "{\"kind\": \"MistakeStep\", \"video_id\": \"a\"}\n";
  CHECK_THROWS_AS(read_benchmark_set(dir / "bad.jsonl", corpus), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("instances that cannot be built are skipped") {
  const std::vector<VideoRecord> corpus = {labelled("same", 0, {3, 3}), labelled("ok", 0, {1, 2})};
  const auto set = build_benchmark_set(BenchmarkKind::mistake_order, corpus, corpus, 5,
                                       BenchmarkOptions{4, 1.0, false});
  for (const auto& inst : set.instances) CHECK(inst.video_id == "ok");
}
