#include <doctest.h>

#include <algorithm>

#include "stepmask/downstream.hpp"
#include "stepmask/errors.hpp"
#include "support.hpp"

using namespace stepmask;
using namespace stepmask::testing;

namespace {

struct Fixture {
  CorpusBundle bundle;
  ModelConfig model;
  TransformerParams params;

  explicit Fixture(double sigma = 0.0, std::size_t videos_per_task = 3) {
    CorpusConfig cc;
    cc.num_tasks = 4;
    cc.steps_per_task = 5;
    cc.videos_per_task = videos_per_task;
    cc.feature_noise_sigma = sigma;
    cc.feature_dim = 16;
    cc.seed = 3;
    bundle = generate_corpus(cc, TextEmbedder::synthetic(3, 16));
    model = ModelConfig::desk_preset(16, cc.vocab_size, cc.num_tasks);
    model.hidden_dim = 32;
    params = init_params(model, 3);
  }

  void pretrain_encoder(std::size_t epochs) {
    MaskSpec mask;
    mask.seed = 3;
    params = pretrain(bundle.videos, model, mask, PretrainConfig::desk_default(epochs), 3).params;
  }
};

}  // namespace

TEST_CASE("head groups and trainable sets") {
  CHECK(head_group(BenchmarkKind::step_cls) == ParamGroup::head);
  CHECK(head_group(BenchmarkKind::short_term) == ParamGroup::head);
  CHECK(head_group(BenchmarkKind::proc_rec) == ParamGroup::task_head);
  CHECK(head_group(BenchmarkKind::mistake_order) == ParamGroup::order_head);
  CHECK(head_group(BenchmarkKind::mistake_step) == ParamGroup::mistake_head);
  CHECK(head_group(BenchmarkKind::long_term) == ParamGroup::forecast_heads);
  CHECK(trainable_groups(BenchmarkKind::proc_rec, FinetuneMode::linear_probe) == TrainableGroups{ParamGroup::task_head});
  CHECK(trainable_groups(BenchmarkKind::proc_rec, FinetuneMode::finetune) ==
        TrainableGroups{ParamGroup::task_head, ParamGroup::transformer});
}

TEST_CASE("inputs per kind") {
  Fixture f;
  const auto& v = f.bundle.videos[0];
  const auto st = make_short_term(v, 3, 0);
  const auto in = make_input(st, f.model, false);
  CHECK(in.clips.rows() == 4);
  CHECK(in.masked == std::vector<std::size_t>{3});
  CHECK_FALSE(in.prepend_cls);

  const auto pr = make_input(make_proc_rec(v), f.model, false);
  CHECK(pr.prepend_cls);
  CHECK_FALSE(pr.task_token.has_value());
  CHECK(forward(f.params, f.model, pr).tokens() == v.size() + 1);

  const TaskTokens tokens{&f.bundle.embedder};
  const auto lt = make_input(make_long_term(v, 0, 0), f.model, true, tokens);
  REQUIRE(lt.task_token.has_value());
  CHECK(*lt.task_token == embed_task_label(v.task_name, f.bundle.embedder, 16));
  CHECK(embed_task_label(v.task_name, f.bundle.embedder, 16) == embed_task_label(v.task_name, f.bundle.embedder, 16));
  CHECK(forward(f.params, f.model, lt).tokens() == 3);
}

TEST_CASE("the task token reaches long-term outputs") {
  Fixture f;
  const TaskTokens tokens{&f.bundle.embedder};
  const auto inst = make_long_term(f.bundle.videos[0], 1, 0);
  const auto with = head_outputs(f.params, f.model, inst, true, tokens);
  auto in = make_input(inst, f.model, true, tokens);
  std::fill(in.task_token->begin(), in.task_token->end(), 0.0);
  const auto tr = forward(f.params, f.model, in);
  const auto pooled_zero = pooled(tr, f.model);
  const auto zeroed = apply_linear(f.params.forecast_heads[0], pooled_zero);
  CHECK(zeroed != with[0]);
  CHECK(head_outputs(f.params, f.model, inst, false) != with);
}

TEST_CASE("tied mistake scores pick the first position") {
  Fixture f;
  f.params.mistake_head.weight.fill(0.0);
  f.params.mistake_head.bias.fill(0.0);
  const auto inst = make_mistake_step(f.bundle.videos[0], f.bundle.videos, 1);
  CHECK(predict(f.params, f.model, inst) == std::vector<int>{0});
}

TEST_CASE("long-term scoring ignores NULL slots") {
  BenchmarkInstance inst;
  inst.kind = BenchmarkKind::long_term;
  inst.target = {4, kNullLabel, kNullLabel, kNullLabel, kNullLabel};
  const auto c = score(inst, {4, 7, 7, 7, 7});
  CHECK(c.correct == 1);
  CHECK(c.total == 1);
  inst.target = {4, 5, kNullLabel, kNullLabel, kNullLabel};
  const auto half = score(inst, {4, 6, kNullLabel, 1, 2});
  CHECK(half.correct == 1);
  CHECK(half.total == 2);
}

TEST_CASE("fine-tuning contracts") {
  Fixture f(0.1);
  for (BenchmarkKind kind : all_benchmark_kinds()) {
    const auto set = build_benchmark_set(kind, f.bundle.videos, f.bundle.videos, 4);
    FinetuneConfig cfg;
    cfg.task_kind = kind;
    cfg.epochs = 0;
    const auto none = finetune(f.params, f.model, cfg, set);
    CHECK(params_equal(none.params, f.params));
    CHECK(none.report.epochs.empty());

    cfg.epochs = 2;
    cfg.mode = FinetuneMode::linear_probe;
    const auto probe = finetune(f.params, f.model, cfg, set);
    cfg.mode = FinetuneMode::finetune;
    const auto full = finetune(f.params, f.model, cfg, set);
    for (ParamGroup g : {ParamGroup::transformer, ParamGroup::head, ParamGroup::task_head, ParamGroup::order_head,
                         ParamGroup::mistake_head, ParamGroup::forecast_heads}) {
      const auto before = group_digest(f.params, g);
      const bool is_head = g == head_group(kind);
      CHECK((group_digest(probe.params, g) == before) == !is_head);
      CHECK((group_digest(full.params, g) == before) == !(is_head || g == ParamGroup::transformer));
    }
    // Same seed, same result.
    CHECK(params_digest(finetune(f.params, f.model, cfg, set).params) == params_digest(full.params));
  }
}

TEST_CASE("fine-tuning input validation") {
  Fixture f;
  FinetuneConfig cfg;
  cfg.task_kind = BenchmarkKind::proc_rec;
  BenchmarkSet empty;
  empty.kind = BenchmarkKind::proc_rec;
  CHECK_THROWS_AS(finetune(f.params, f.model, cfg, empty), InvalidInput);
  CHECK_THROWS_AS(evaluate(f.params, f.model, empty), InvalidInput);
  const auto set = build_benchmark_set(BenchmarkKind::step_cls, f.bundle.videos, f.bundle.videos, 1);
  CHECK_THROWS_AS(finetune(f.params, f.model, cfg, set), ConfigError);
}

TEST_CASE("evaluation arithmetic and order independence") {
  Fixture f(0.0, 10);
  auto set = build_benchmark_set(BenchmarkKind::mistake_order, f.bundle.videos, f.bundle.videos, 9,
                                 BenchmarkOptions{10, 0.5, false});
  // Constant "ordered" predictor scores the fraction of unpermuted instances.
  f.params.order_head.weight.fill(0.0);
  f.params.order_head.bias[0] = 1.0;
  f.params.order_head.bias[1] = 0.0;
  std::size_t ordered = 0;
  for (const auto& inst : set.instances) ordered += inst.target[0] == 0 ? 1 : 0;
  const auto r = evaluate(f.params, f.model, set);
  CHECK(r.correct == ordered);
  CHECK(r.total == set.instances.size());
  CHECK(r.accuracy == doctest::Approx(static_cast<double>(ordered) / r.total));
  CHECK(std::abs(r.accuracy - 0.5) < 0.1);

  std::reverse(set.instances.begin(), set.instances.end());
  CHECK(evaluate(f.params, f.model, set).to_json() == r.to_json());
  CHECK(EvalReport::from_json(r.to_json()).to_json() == r.to_json());

  // A perfect predictor: every target matches.
  auto proc = build_benchmark_set(BenchmarkKind::proc_rec, f.bundle.videos, f.bundle.videos, 1);
  for (auto& inst : proc.instances) inst.target = predict(f.params, f.model, inst);
  CHECK(evaluate(f.params, f.model, proc).accuracy == 1.0);
}

TEST_CASE("noiseless mistake-step training overfits") {
  Fixture f(0.0, 2);
  f.pretrain_encoder(30);
  const auto set = build_benchmark_set(BenchmarkKind::mistake_step, f.bundle.videos, f.bundle.videos, 2,
                                       BenchmarkOptions{5, 0.5, false});
  FinetuneConfig cfg;
  cfg.task_kind = BenchmarkKind::mistake_step;
  const auto r = finetune(f.params, f.model, cfg, set);
  CHECK(r.report.epochs.back().masked_accuracy >= 0.99);
}

TEST_CASE("short-term forecasting learns the grammar successor") {
  Fixture f(0.0, 3);
  f.pretrain_encoder(30);
  const auto set = build_benchmark_set(BenchmarkKind::short_term, f.bundle.videos, f.bundle.videos, 2);
  FinetuneConfig cfg;
  cfg.task_kind = BenchmarkKind::short_term;
  cfg.epochs = 30;
  const auto r = finetune(f.params, f.model, cfg, set);
  std::size_t wrong = 0;
  for (const auto& inst : set.instances) {
    // Grammar oracle: the canonical step following the last observed one.
    const auto& steps = f.bundle.tasks[static_cast<std::size_t>(inst.task_id)].canonical_steps;
    const LabelId successor = steps[inst.size()];
    if (predict(r.params, f.model, inst) != std::vector<int>{successor}) ++wrong;
  }
  CHECK(wrong == 0);
}

TEST_CASE("fine-tune config JSON") {
  FinetuneConfig cfg;
  cfg.task_kind = BenchmarkKind::long_term;
  cfg.mode = FinetuneMode::linear_probe;
  cfg.use_task_label = true;
  cfg.epochs = 20;
  CHECK(FinetuneConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  const auto opt = cfg.optimizer();
  CHECK(opt.lr == 0.005);
  CHECK(opt.lr_at(14) == 0.005);
  CHECK(opt.lr_at(15) == doctest::Approx(0.0005));
  CHECK(opt.lr_at(19) == doctest::Approx(0.00005));
  CHECK_THROWS_AS(FinetuneConfig::from_json({{"lr", 0.1}, {"bogus", 1}}), ConfigError);
}
