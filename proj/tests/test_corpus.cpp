#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "stepmask/corpus.hpp"
#include "stepmask/errors.hpp"

using namespace stepmask;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("stepmask-test-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Expected realized length when each position is skipped with probability q
// unless that would leave fewer than min_length steps.
double expected_length(std::size_t n, double q, std::size_t min_length) {
  std::vector<double> dist(n + 1, 0.0);  // by kept count
  dist[0] = 1.0;
  for (std::size_t p = 0; p < n; ++p) {
    std::vector<double> next(n + 1, 0.0);
    const std::size_t remaining_after = n - p - 1;
    for (std::size_t kept = 0; kept <= p; ++kept) {
      if (dist[kept] == 0.0) continue;
      if (kept + remaining_after >= min_length) {
        next[kept] += q * dist[kept];
        next[kept + 1] += (1.0 - q) * dist[kept];
      } else {
        next[kept + 1] += dist[kept];
      }
    }
    dist = next;
  }
  double mean = 0.0;
  for (std::size_t k = 0; k <= n; ++k) mean += static_cast<double>(k) * dist[k];
  return mean;
}

}  // namespace

TEST_CASE("task library counts and determinism") {
  CorpusConfig cfg;
  cfg.num_tasks = 1;
  cfg.steps_per_task = 3;
  const auto e = TextEmbedder::synthetic(1, 32);
  const auto vocab = make_synthetic_vocabulary(cfg.vocab_size, e);
  const auto lib = generate_task_library(cfg, vocab);
  REQUIRE(lib.size() == 1);
  CHECK(lib[0].canonical_steps.size() == 3);
  CHECK(lib[0].name == "task-0");

  cfg.num_tasks = 4;
  cfg.alternative_rate = 0.5;
  const auto a = generate_task_library(cfg, vocab);
  const auto b = generate_task_library(cfg, vocab);
  CHECK(a.size() == 4);
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(a[t].to_json() == b[t].to_json());
}

TEST_CASE("no label sharing gives distinct labels across the library") {
  CorpusConfig cfg;
  cfg.num_tasks = 10;
  cfg.steps_per_task = 6;
  cfg.vocab_size = 80;
  const auto e = TextEmbedder::synthetic(2, 32);
  const auto lib = generate_task_library(cfg, make_synthetic_vocabulary(80, e));
  std::set<LabelId> used;
  for (const auto& t : lib) used.insert(t.canonical_steps.begin(), t.canonical_steps.end());
  CHECK(used.size() == 60);
}

TEST_CASE("insufficient vocabulary is a config error") {
  CorpusConfig cfg;
  cfg.num_tasks = 10;
  cfg.steps_per_task = 6;
  cfg.vocab_size = 20;
  const auto e = TextEmbedder::synthetic(2, 32);
  CHECK_THROWS_AS(generate_task_library(cfg, make_synthetic_vocabulary(20, e)), ConfigError);
}

TEST_CASE("noiseless videos follow the canonical steps with perfect weak labels") {
  CorpusConfig cfg;
  cfg.videos_per_task = 3;
  const auto bundle = generate_corpus(cfg, TextEmbedder::synthetic(3, 32));
  for (const auto& v : bundle.videos) {
    const auto& task = bundle.tasks[static_cast<std::size_t>(v.task_id)];
    CHECK(v.truths() == task.canonical_steps);
    for (const auto& c : v.clips) {
      CHECK(best_label(c.weak) == c.truth);
      // sigma = 0: the feature is the label embedding, stored at float precision.
      const auto& emb = bundle.vocab.step(c.truth).embedding;
      REQUIRE(c.feature.size() == emb.size());
      for (std::size_t d = 0; d < emb.size(); ++d) {
        CHECK(c.feature[d] == static_cast<double>(static_cast<float>(emb[d])));
      }
    }
  }
}

TEST_CASE("fit_to_dim pads and truncates") {
  const std::vector<double> v = {1, 2, 3};
  CHECK(fit_to_dim(v, 5) == std::vector<double>{1, 2, 3, 0, 0});
  CHECK(fit_to_dim(v, 2) == std::vector<double>{1, 2});
}

TEST_CASE("mean length under skipping matches the exact expectation") {
  CorpusConfig cfg;
  cfg.num_tasks = 1;
  cfg.steps_per_task = 6;
  cfg.skip_probability = 0.2;
  const auto e = TextEmbedder::synthetic(4, 32);
  const auto vocab = make_synthetic_vocabulary(cfg.vocab_size, e);
  const auto task = generate_task_library(cfg, vocab).front();
  double total = 0.0;
  std::size_t shortest = 99;
  for (std::uint64_t d = 0; d < 1000; ++d) {
    const auto v = sample_video(task, vocab, e, cfg, d);
    total += static_cast<double>(v.size());
    shortest = std::min(shortest, v.size());
  }
  const double expected = expected_length(6, 0.2, 2);
  CHECK(expected == doctest::Approx(4.8).epsilon(1e-3));
  CHECK(std::abs(total / 1000.0 - expected) < 0.1);
  CHECK(shortest >= 2);
}

TEST_CASE("min_length floor holds under certain skipping") {
  CorpusConfig cfg;
  cfg.num_tasks = 1;
  cfg.skip_probability = 0.99;
  cfg.min_length = 3;
  const auto e = TextEmbedder::synthetic(5, 32);
  const auto vocab = make_synthetic_vocabulary(cfg.vocab_size, e);
  const auto task = generate_task_library(cfg, vocab).front();
  for (std::uint64_t d = 0; d < 200; ++d) CHECK(sample_video(task, vocab, e, cfg, d).size() >= 3);
}

TEST_CASE("corpus directory round-trips bit-exactly") {
  CorpusConfig cfg;
  cfg.feature_noise_sigma = 0.3;
  cfg.asr_noise = 0.2;
  cfg.skip_probability = 0.2;
  cfg.alternative_rate = 0.3;
  cfg.videos_per_task = 3;
  const auto bundle = generate_corpus(cfg, TextEmbedder::synthetic(6, 32));
  const auto dir = scratch_dir("corpus");
  save_corpus(dir, bundle);
  const auto back = load_corpus(dir);
  CHECK(back.videos == bundle.videos);
  CHECK(back.digest == bundle.digest);
  CHECK(corpus_digest(back.videos) == bundle.digest);
  fs::remove_all(dir);
}

TEST_CASE("feature sidecar round-trips") {
  CorpusConfig cfg;
  cfg.feature_noise_sigma = 0.5;
  const auto bundle = generate_corpus(cfg, TextEmbedder::synthetic(7, 32));
  const auto dir = scratch_dir("sidecar");
  write_feature_sidecar(dir / "f.stpf", bundle.videos);
  const auto table = read_feature_sidecar(dir / "f.stpf");
  CHECK(table.dim == 32);
  for (const auto& v : bundle.videos) {
    for (std::uint32_t i = 0; i < v.size(); ++i) {
      CHECK(table.clips.at({video_hash(v.video_id), i}) == v.clips[i].feature);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("annotation loading edge cases") {
  const auto e = TextEmbedder::synthetic(8, 32);
  const auto vocab = make_synthetic_vocabulary(24, e);
  const auto dir = scratch_dir("annotations");
  AnnotationLoadOptions opts;

  std::ofstream(dir / "empty.json") << R"({"videos": []})";
  CHECK(load_annotations(dir / "empty.json", vocab, e, opts).empty());

  std::ofstream(dir / "overlap.json") << R"({"videos": [{"video_id": "v", "task_id": 0, "task_name": "t",
    "steps": [{"label_id": 1, "start": 0.0, "end": 5.0, "asr": "a"},
              {"label_id": 2, "start": 4.0, "end": 9.0, "asr": "b"}]}]})";
  CHECK_THROWS_AS(load_annotations(dir / "overlap.json", vocab, e, opts), InvalidAnnotation);

  std::ofstream(dir / "unknown.json") << R"({"videos": [{"video_id": "v", "task_id": 0, "task_name": "t",
    "steps": [{"label_id": 1, "start": 0.0, "end": 5.0, "asr": "a"},
              {"label_id": 99, "start": 5.0, "end": 9.0, "asr": "b"}]}]})";
  CHECK_THROWS_AS(load_annotations(dir / "unknown.json", vocab, e, opts), VocabularyMismatch);

  std::ofstream(dir / "schema.json") << R"({"videos": [{"video_id": "v", "task_id": "zero", "steps": []}]})";
  CHECK_THROWS_AS(load_annotations(dir / "schema.json", vocab, e, opts), ParseError);

  // Without a sidecar, features are label embeddings.
  std::ofstream(dir / "ok.json") << R"({"videos": [{"video_id": "v", "task_id": 0, "task_name": "t",
    "steps": [{"label_id": 1, "start": 0.0, "end": 5.0, "asr": "a"},
              {"label_id": 2, "start": 5.0, "end": 9.0, "asr": "b"}]}]})";
  const auto videos = load_annotations(dir / "ok.json", vocab, e, opts);
  REQUIRE(videos.size() == 1);
  CHECK(videos[0].truths() == std::vector<LabelId>{1, 2});
  CHECK(videos[0].clips[1].feature.size() == 32);
  fs::remove_all(dir);
}

TEST_CASE("split_corpus partitions and stratifies") {
  CorpusConfig cfg;
  cfg.num_tasks = 10;
  cfg.steps_per_task = 3;
  cfg.vocab_size = 40;
  cfg.videos_per_task = 10;
  const auto bundle = generate_corpus(cfg, TextEmbedder::synthetic(9, 16));

  const auto all = split_corpus(bundle.videos, {1.0, 0.0, 0.0}, 1);
  CHECK(all.train.size() == 100);
  CHECK(all.val.empty());
  CHECK(all.test.empty());

  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto s = split_corpus(bundle.videos, {0.8, 0.1, 0.1}, seed);
    std::map<std::string, int> seen;
    std::map<int, int> train_per_task;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (const auto& v : *part) ++seen[v.video_id];
    }
    for (const auto& v : s.train) ++train_per_task[v.task_id];
    CHECK(seen.size() == 100);
    for (const auto& [id, n] : seen) CHECK(n == 1);
    for (const auto& [task, n] : train_per_task) CHECK(n == 8);
  }
  CHECK_THROWS_AS(split_corpus(bundle.videos, {0.5, 0.1, 0.1}, 1), InvalidInput);
}
