#pragma once

// Small fixtures shared by the unit tests and the acceptance binary.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stepmask/corpus.hpp"
#include "stepmask/hashing.hpp"
#include "stepmask/model.hpp"
#include "stepmask/training.hpp"
#include "stepmask/weaklabel.hpp"

namespace stepmask::testing {

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> nd(0.0, sigma);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

inline Tensor gaussian_tensor(Rng& rng, std::size_t rows, std::size_t cols, double sigma = 1.0) {
  Tensor t(rows, cols);
  std::normal_distribution<double> nd(0.0, sigma);
  for (double& x : t.values()) x = nd(rng);
  return t;
}

// A video with random features and weak labels drawn from random similarities.
inline VideoRecord random_video(Rng& rng, std::size_t K, std::size_t input_dim,
                                std::size_t num_labels, std::size_t top_k) {
  VideoRecord v;
  v.video_id = "random";
  for (std::size_t i = 0; i < K; ++i) {
    Clip c;
    c.feature = gaussian_vector(rng, input_dim);
    const auto sims = gaussian_vector(rng, num_labels);
    c.weak = weak_label_from_similarities(sims, top_k);
    c.truth = best_label(c.weak);
    c.start = 8.0 * static_cast<double>(i);
    c.end = c.start + 8.0;
    v.clips.push_back(std::move(c));
  }
  return v;
}

// Trace holding only logits, for exercising the losses directly.
inline ForwardTrace logits_trace(const Tensor& logits) {
  ForwardTrace tr;
  tr.logits = logits;
  tr.hidden = Tensor(logits.rows(), std::size_t{1});
  tr.num_clips = logits.rows();
  tr.masked.assign(logits.rows(), false);
  return tr;
}

// D=16, heads=2, layers=2, S=7.
inline ModelConfig tiny_model(std::size_t input_dim = 16, std::size_t num_labels = 7,
                              std::size_t num_tasks = 3) {
  ModelConfig cfg = ModelConfig::desk_preset(input_dim, num_labels, num_tasks);
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.layers = 2;
  return cfg;
}

}  // namespace stepmask::testing
