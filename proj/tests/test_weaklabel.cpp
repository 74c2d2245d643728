#include <doctest.h>

#include <cmath>
#include <numeric>

#include "stepmask/errors.hpp"
#include "stepmask/weaklabel.hpp"
#include "support.hpp"

using namespace stepmask;

TEST_CASE("normalize_text folds case and whitespace") {
  CHECK(normalize_text("  Whisk   THE\tbatter \n") == "whisk the batter");
  CHECK(normalize_text("") == "");
}

TEST_CASE("synthetic embedder is deterministic, unit norm and text-normalized") {
  const auto e = TextEmbedder::synthetic(3, 16);
  const auto a = e.embed("Whisk the batter");
  CHECK(a.size() == 16);
  CHECK(a == e.embed("whisk  the batter"));
  const double norm = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a != TextEmbedder::synthetic(4, 16).embed("whisk the batter"));
  CHECK(a != e.embed("whisk the eggs"));
}

TEST_CASE("table embedder looks up normalized keys") {
  const auto e = TextEmbedder::from_entries({{"Crack the egg", {1.0, 0.0}}, {"stir", {0.0, 1.0}}});
  CHECK(e.embed("crack  THE egg") == std::vector<double>{1.0, 0.0});
  CHECK_THROWS_AS(e.embed("missing"), MissingEmbedding);
}

TEST_CASE("softmax closed forms") {
  const auto u = softmax(std::vector<double>{0, 0, 0, 0});
  for (double p : u) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
  const auto p = softmax(std::vector<double>{std::log(2.0), 0.0});
  CHECK(std::abs(p[0] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(p[1] - 1.0 / 3.0) < 1e-12);
  // Shift invariance at a magnitude where a naive exp overflows.
  const auto big = softmax(std::vector<double>{1000.0 + std::log(2.0), 1000.0});
  CHECK(std::abs(big[0] - 2.0 / 3.0) < 1e-12);
}

TEST_CASE("top-k truncation renormalizes and orders entries") {
  const std::vector<double> dense = {0.1, 0.4, 0.2, 0.3};
  const auto d = truncate_topk(dense, 2);
  REQUIRE(d.entries.size() == 2);
  CHECK(d.entries[0].label == 1);
  CHECK(d.entries[1].label == 3);
  CHECK(d.entries[0].probability == doctest::Approx(0.4 / 0.7).epsilon(1e-14));
  CHECK(d.entries[1].probability == doctest::Approx(0.3 / 0.7).epsilon(1e-14));
  CHECK(d.probability_of(0) == 0.0);
  d.validate(4);
  // Ties break toward the lower label.
  const auto t = truncate_topk(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 1);
  CHECK(t.entries.front().label == 0);
  CHECK(t.entries.front().probability == 1.0);
}

TEST_CASE("weak labels from similarities agree with a direct long double softmax") {
  Rng rng(7);
  for (int n = 0; n < 200; ++n) {
    const std::size_t S = 1 + rng() % 60;
    const auto sims = testing::gaussian_vector(rng, S, 2.0);
    const std::size_t k = 1 + rng() % S;
    const auto d = weak_label_from_similarities(sims, k);
    std::vector<std::size_t> order(S);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sims[a] > sims[b]; });
    long double kept = 0.0L;
    for (std::size_t i = 0; i < k; ++i) kept += std::exp(static_cast<long double>(sims[order[i]]));
    REQUIRE(d.entries.size() == k);
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(d.entries[i].label == static_cast<LabelId>(order[i]));
      const double expect = static_cast<double>(std::exp(static_cast<long double>(sims[order[i]])) / kept);
      CHECK(std::abs(d.entries[i].probability - expect) < 1e-12);
    }
  }
}

TEST_CASE("invalid distributions are rejected") {
  LabelDistribution d{{{0, 0.5}, {1, 0.4}}, 2};
  CHECK_THROWS_AS(d.validate(3), InvalidDistribution);
  LabelDistribution out_of_range{{{5, 1.0}}, 1};
  CHECK_THROWS_AS(out_of_range.validate(3), InvalidDistribution);
}

TEST_CASE("weak label of a step's own description peaks on that step") {
  const auto e = TextEmbedder::synthetic(11, 32);
  std::vector<StepText> steps = {{0, "Whisk the batter", "whisk the batter"},
                                 {1, "Crack the egg", "crack the egg"},
                                 {2, "Pour the milk", "pour the milk"}};
  const StepVocabulary vocab(steps, e);
  for (LabelId id = 0; id < 3; ++id) {
    const auto d = weak_label_distribution(steps[static_cast<std::size_t>(id)].description, vocab, e, 3);
    CHECK(best_label(d) == id);
  }
}

TEST_CASE("similarity is the dot product of unit vectors") {
  CHECK(similarity(std::vector<double>{1, 0}, std::vector<double>{0.6, 0.8}) == doctest::Approx(0.6));
}

TEST_CASE("clustering groups adjacent similar sentences") {
  const std::vector<std::vector<double>> emb = {{1, 0, 0}, {0.99, 0.14, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0.1, 0.99}};
  const auto segs = cluster_by_similarity(emb);
  REQUIRE(segs.size() == 3);
  CHECK(segs[0] == Segment{0, 1});
  CHECK(segs[1] == Segment{2, 2});
  CHECK(segs[2] == Segment{3, 4});
}
