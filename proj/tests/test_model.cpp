#include <doctest.h>

#include <cmath>
#include <sstream>

#include "stepmask/checkpoint.hpp"
#include "stepmask/errors.hpp"
#include "stepmask/model.hpp"
#include "support.hpp"

using namespace stepmask;
using namespace stepmask::testing;

TEST_CASE("init_params is deterministic and shaped by the config") {
  const auto cfg = ModelConfig::desk_preset(12, 9, 3);
  const auto a = init_params(cfg, 5);
  CHECK(params_equal(a, init_params(cfg, 5)));
  CHECK_FALSE(params_equal(a, init_params(cfg, 6)));
  CHECK_NOTHROW(check_shapes(a, cfg));
  CHECK(a.input_projection.weight.shape() == std::vector<std::size_t>{12, 64});
  CHECK(a.positional.shape() == std::vector<std::size_t>{16, 64});
  CHECK(a.blocks.size() == 2);
  CHECK(a.blocks[0].fc1.weight.shape() == std::vector<std::size_t>{64, 256});
  CHECK(a.head.weight.shape() == std::vector<std::size_t>{64, 9});
  CHECK(a.task_head.weight.shape() == std::vector<std::size_t>{64, 3});
  CHECK(a.order_head.weight.shape() == std::vector<std::size_t>{64, 2});
  CHECK(a.mistake_head.weight.shape() == std::vector<std::size_t>{64, 1});
  CHECK(a.forecast_heads[4].weight.shape() == std::vector<std::size_t>{64, 10});
  for (const auto& [name, t] : named_arrays(a)) {
    if (name.ends_with(".gain")) {
      for (double x : t->values()) CHECK(x == 1.0);
    } else if (name.ends_with(".bias")) {
      for (double x : t->values()) CHECK(x == 0.0);
    }
  }
}

TEST_CASE("input projection entries have standard deviation 0.02") {
  const auto cfg = ModelConfig::desk_preset(200, 9, 3);
  const auto p = init_params(cfg, 1);
  const auto& w = p.input_projection.weight.values();
  REQUIRE(w.size() >= 10000);
  double mean = 0.0, sq = 0.0;
  for (double x : w) mean += x;
  mean /= static_cast<double>(w.size());
  for (double x : w) sq += (x - mean) * (x - mean);
  CHECK(std::abs(std::sqrt(sq / static_cast<double>(w.size() - 1)) - 0.02) < 0.002);
}

TEST_CASE("zero network outputs the head bias everywhere") {
  const auto cfg = tiny_model();
  auto p = allocate_params(cfg);
  for (std::size_t s = 0; s < cfg.num_labels; ++s) p.head.bias[s] = 0.1 * static_cast<double>(s) - 0.2;
  Rng rng(1);
  SequenceInput in;
  in.clips = gaussian_tensor(rng, 5, cfg.input_dim);
  in.masked = {1};
  in.prepend_cls = true;
  const auto tr = forward(p, cfg, in);
  CHECK(tr.tokens() == 6);
  for (std::size_t r = 0; r < tr.tokens(); ++r) {
    for (std::size_t s = 0; s < cfg.num_labels; ++s) CHECK(tr.logits(r, s) == p.head.bias[s]);
  }
}

TEST_CASE("softmax_logits closed forms") {
  for (double q : softmax_logits(std::vector<double>{0, 0, 0, 0})) CHECK(q == 0.25);
  const auto p = softmax_logits(std::vector<double>{std::log(2.0), 0.0});
  CHECK(std::abs(p[0] - 2.0 / 3.0) <= 1e-12);
  const auto shifted = softmax_logits(std::vector<double>{std::log(2.0) + 40.0, 40.0});
  CHECK(std::abs(shifted[0] - p[0]) <= 1e-12);
  Rng rng(3);
  const auto q = softmax_logits(gaussian_vector(rng, 50, 10.0));
  double sum = 0.0;
  for (double x : q) sum += x;
  CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("forward validates capacity and dimensions") {
  const auto cfg = tiny_model();
  const auto p = init_params(cfg, 2);
  Rng rng(2);
  SequenceInput in;
  in.clips = gaussian_tensor(rng, cfg.max_positions, cfg.input_dim);
  CHECK_NOTHROW(forward(p, cfg, in));
  in.prepend_cls = true;
  CHECK_THROWS_AS(forward(p, cfg, in), CapacityError);
  in.prepend_cls = false;
  in.clips = gaussian_tensor(rng, 3, cfg.input_dim + 1);
  CHECK_THROWS_AS(forward(p, cfg, in), DimensionError);
  in.clips = gaussian_tensor(rng, 3, cfg.input_dim);
  in.masked = {3};
  CHECK_THROWS(forward(p, cfg, in));
}

TEST_CASE("attention rows sum to one and a task token adds a row") {
  const auto cfg = tiny_model();
  const auto p = init_params(cfg, 4);
  Rng rng(4);
  SequenceInput in;
  in.clips = gaussian_tensor(rng, 4, cfg.input_dim);
  in.prepend_cls = true;
  in.task_token = gaussian_vector(rng, cfg.input_dim);
  const auto tr = forward(p, cfg, in);
  CHECK(tr.tokens() == 6);
  CHECK(tr.clip_offset == 2);
  for (const auto& b : tr.blocks) {
    for (const auto& a : b.attention) {
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (double x : a.row(r)) s += x;
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("a stale trace is rejected by backward") {
  const auto cfg = tiny_model();
  auto p = init_params(cfg, 5);
  Rng rng(5);
  SequenceInput in;
  in.clips = gaussian_tensor(rng, 3, cfg.input_dim);
  const auto tr = forward(p, cfg, in);
  auto grads = zeros_like(p);
  const Tensor d(tr.logits.rows(), tr.logits.cols(), 0.0);
  CHECK_NOTHROW(backward(p, cfg, tr, d, grads));
  ++p.revision;
  CHECK_THROWS_AS(backward(p, cfg, tr, d, grads), TraceError);
}

TEST_CASE("gelu derivative matches a central difference") {
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double h = 1e-5;
    CHECK(gelu_derivative(x) == doctest::Approx((gelu(x + h) - gelu(x - h)) / (2 * h)).epsilon(1e-8));
  }
}

TEST_CASE("parameter groups follow array names") {
  const auto p = init_params(tiny_model(), 6);
  std::size_t heads = 0;
  for (const auto& [name, t] : named_arrays(p)) {
    if (param_group(name) != ParamGroup::transformer) ++heads;
  }
  // head, task, order, mistake: weight+bias each; five forecast heads.
  CHECK(heads == 18);
  CHECK(param_group("head.weight") == ParamGroup::head);
  CHECK(param_group("blocks.0.query.weight") == ParamGroup::transformer);
}

TEST_CASE("checkpoints round-trip through a stream and a file") {
  const auto cfg = tiny_model();
  const auto p = init_params(cfg, 7);
  std::stringstream buf;
  write_checkpoint(buf, cfg, p);
  CHECK(buf.str().substr(0, 4) == "VTFM");
  const auto back = read_checkpoint(buf);
  CHECK(back.config == cfg);
  CHECK(params_equal(back.params, p));

  const auto path = std::filesystem::temp_directory_path() / "stepmask-test-ckpt.vtfm";
  const auto digest = save_checkpoint(path, cfg, p, {{"stage", "test"}});
  CHECK(digest == params_digest(p));
  const auto loaded = load_checkpoint(path);
  CHECK(params_equal(loaded.params, p));
  CHECK(loaded.sidecar.at("provenance").at("stage") == "test");
  std::filesystem::remove(path);
  std::filesystem::remove(sidecar_path(path));

  std::stringstream bad("VTFX");
  CHECK_THROWS_AS(read_checkpoint(bad), ParseError);
}

TEST_CASE("paper preset constructs and round-trips") {
  const auto cfg = ModelConfig::paper_preset(100, 10);
  CHECK(cfg.layers == 2);
  CHECK(cfg.hidden_dim == 768);
  CHECK(cfg.heads == 12);
  CHECK(cfg.max_positions == 12);
  const auto p = init_params(cfg, 8);
  std::stringstream buf;
  write_checkpoint(buf, cfg, p);
  const auto back = read_checkpoint(buf);
  CHECK(back.config == cfg);
  CHECK(params_digest(back.params) == params_digest(p));
}

TEST_CASE("model config JSON round-trips") {
  auto cfg = ModelConfig::desk_preset(20, 30, 5);
  cfg.pooling = Pooling::mean;
  cfg.use_positional = false;
  CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
  auto bad = cfg;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
