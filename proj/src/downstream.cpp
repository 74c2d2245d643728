#include "stepmask/downstream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "stepmask/checkpoint.hpp"
#include "stepmask/corpus.hpp"
#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"
#include "stepmask/json_util.hpp"

namespace stepmask {

// --- config -----------------------------------------------------------------------

OptimizerConfig FinetuneConfig::optimizer() const {
  OptimizerConfig o;
  o.kind = OptimizerKind::sgd_momentum;
  o.lr = lr;
  o.momentum = momentum;
  o.weight_decay = weight_decay;
  if (schedule) {
    o.schedule = *schedule;
  } else if (epochs > 0) {
    o.schedule = {{epochs * 3 / 4, 0.1}, {epochs * 19 / 20, 0.1}};
  }
  return o;
}

void FinetuneConfig::validate() const {
  if (batch_size == 0) throw ConfigError("finetune.batch_size must be at least 1");
  optimizer().validate();
}

nlohmann::json FinetuneConfig::to_json() const {
  nlohmann::json j = {{"task", to_string(task_kind)},
                      {"mode", mode == FinetuneMode::finetune ? "finetune" : "linear_probe"},
                      {"use_task_label", use_task_label},
                      {"lr", lr},
                      {"momentum", momentum},
                      {"weight_decay", weight_decay},
                      {"epochs", epochs},
                      {"batch_size", batch_size},
                      {"seed", seed}};
  if (schedule) {
    auto s = nlohmann::json::array();
    for (const auto& [at, mult] : *schedule) s.push_back({at, mult});
    j["schedule"] = s;
  }
  return j;
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j, const std::string& path) {
  FinetuneConfig c;
  ObjectReader r(j, path);
  std::string task;
  if (r.read("task", task)) c.task_kind = benchmark_kind_from_string(task);
  std::string mode;
  if (r.read("mode", mode)) {
    if (mode == "finetune") c.mode = FinetuneMode::finetune;
    else if (mode == "linear_probe") c.mode = FinetuneMode::linear_probe;
    else throw ConfigError(r.field("mode") + ": must be 'finetune' or 'linear_probe'");
  }
  r.read("use_task_label", c.use_task_label);
  r.read("lr", c.lr);
  r.read("momentum", c.momentum);
  r.read("weight_decay", c.weight_decay);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("seed", c.seed);
  std::vector<std::pair<std::size_t, double>> sched;
  if (r.read("schedule", sched)) c.schedule = sched;
  r.finish();
  c.validate();
  return c;
}

ParamGroup head_group(BenchmarkKind kind) {
  switch (kind) {
    case BenchmarkKind::step_cls:
    case BenchmarkKind::short_term:
      return ParamGroup::head;
    case BenchmarkKind::proc_rec:
      return ParamGroup::task_head;
    case BenchmarkKind::mistake_order:
      return ParamGroup::order_head;
    case BenchmarkKind::mistake_step:
      return ParamGroup::mistake_head;
    case BenchmarkKind::long_term:
      return ParamGroup::forecast_heads;
  }
  throw ConfigError("no head for benchmark kind");
}

TrainableGroups trainable_groups(BenchmarkKind kind, FinetuneMode mode) {
  TrainableGroups g = {head_group(kind)};
  if (mode == FinetuneMode::finetune) g.insert(ParamGroup::transformer);
  return g;
}

// --- inputs -----------------------------------------------------------------------

std::vector<double> embed_task_label(const std::string& task_name, const TextEmbedder& embedder,
                                     std::size_t input_dim) {
  if (task_name.empty()) throw InvalidInput("empty task name");
  const auto e = embedder.embed(task_name);
  return fit_to_dim(e, input_dim);
}

std::vector<double> TaskTokens::token(const std::string& task_name, std::size_t input_dim) const {
  if (!embedder) throw ConfigError("task-label conditioning needs a text embedder");
  return embed_task_label(task_name, *embedder, input_dim);
}

namespace {

bool uses_cls(BenchmarkKind kind) {
  return kind == BenchmarkKind::proc_rec || kind == BenchmarkKind::mistake_order ||
         kind == BenchmarkKind::long_term || kind == BenchmarkKind::mistake_step;
}

}  // namespace

SequenceInput make_input(const BenchmarkInstance& instance, const ModelConfig& model_cfg,
                         bool use_task_label, const TaskTokens& tokens) {
  if (instance.size() == 0) throw InvalidInput("instance has no clips");
  SequenceInput in;
  if (instance.kind == BenchmarkKind::short_term) {
    const std::size_t n = instance.clips.rows();
    in.clips = Tensor(n + 1, instance.clips.cols());
    std::copy(instance.clips.values().begin(), instance.clips.values().end(), in.clips.values().begin());
    in.masked = {n};
  } else {
    in.clips = instance.clips;
  }
  in.prepend_cls = uses_cls(instance.kind) && model_cfg.pooling == Pooling::cls;
  if (use_task_label) in.task_token = tokens.token(instance.task_name, model_cfg.input_dim);
  return in;
}

// --- per-kind heads and losses ---------------------------------------------------------

namespace {

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Cross-entropy of logits against class y; writes dLoss/dLogits into dy.
double cross_entropy(const std::vector<double>& logits, std::size_t y, std::vector<double>& dy) {
  if (y >= logits.size()) throw InvalidTarget("target class out of range");
  dy = softmax_logits(logits);
  const double loss = -std::log(std::max(dy[y], std::numeric_limits<double>::min()));
  dy[y] -= 1.0;
  return loss;
}

Linear& head_of(TransformerParams& p, BenchmarkKind kind) {
  switch (kind) {
    case BenchmarkKind::proc_rec:
      return p.task_head;
    case BenchmarkKind::mistake_order:
      return p.order_head;
    case BenchmarkKind::mistake_step:
      return p.mistake_head;
    default:
      return p.head;
  }
}

const Linear& head_of(const TransformerParams& p, BenchmarkKind kind) {
  return head_of(const_cast<TransformerParams&>(p), kind);
}

struct Pass {
  double loss = 0.0;
  std::vector<std::vector<double>> outputs;
};

// Forward pass, and when `grads` is given, the loss plus gradients of every
// head output. encoder_grads=false stops at the head.
Pass run_instance(const TransformerParams& params, const ModelConfig& cfg,
                  const BenchmarkInstance& inst, bool use_task_label, const TaskTokens& tokens,
                  TransformerParams* grads, bool encoder_grads) {
  const ForwardTrace trace = forward(params, cfg, make_input(inst, cfg, use_task_label, tokens));
  Pass pass;
  Tensor d_hidden;
  if (grads && encoder_grads) d_hidden = zeros_like(trace.hidden);
  std::vector<double> scratch(cfg.hidden_dim);
  auto dx_for = [&](std::size_t row) -> std::span<double> {
    return encoder_grads ? d_hidden.row(row) : std::span<double>(scratch);
  };

  switch (inst.kind) {
    case BenchmarkKind::step_cls:
    case BenchmarkKind::short_term: {
      const std::size_t row = trace.clip_row(inst.kind == BenchmarkKind::short_term ? inst.size() : 0);
      const auto logits = trace.logits.row(row);
      pass.outputs.emplace_back(logits.begin(), logits.end());
      if (grads) {
        std::vector<double> dy;
        pass.loss = cross_entropy(pass.outputs[0], static_cast<std::size_t>(inst.target.at(0)), dy);
        linear_backward(params.head, trace.hidden.row(row), dy, grads->head, dx_for(row));
      }
      break;
    }
    case BenchmarkKind::proc_rec:
    case BenchmarkKind::mistake_order:
    case BenchmarkKind::long_term: {
      const auto p = pooled(trace, cfg);
      std::vector<double> d_pooled(cfg.hidden_dim, 0.0);
      if (inst.kind == BenchmarkKind::long_term) {
        for (std::size_t s = 0; s < kForecastSlots; ++s) {
          pass.outputs.push_back(apply_linear(params.forecast_heads[s], p));
          if (grads) {
            const int t = inst.target.at(s);
            const std::size_t y = t == kNullLabel ? cfg.num_labels : static_cast<std::size_t>(t);
            std::vector<double> dy;
            pass.loss += cross_entropy(pass.outputs.back(), y, dy);
            linear_backward(params.forecast_heads[s], p, dy, grads->forecast_heads[s], d_pooled);
          }
        }
      } else {
        const Linear& head = head_of(params, inst.kind);
        pass.outputs.push_back(apply_linear(head, p));
        if (grads) {
          std::vector<double> dy;
          pass.loss = cross_entropy(pass.outputs[0], static_cast<std::size_t>(inst.target.at(0)), dy);
          linear_backward(head, p, dy, head_of(*grads, inst.kind), d_pooled);
        }
      }
      if (grads && encoder_grads) pooled_backward(trace, cfg, d_pooled, d_hidden);
      break;
    }
    case BenchmarkKind::mistake_step: {
      std::vector<double> scores(inst.size());
      for (std::size_t i = 0; i < inst.size(); ++i) {
        scores[i] = apply_linear(params.mistake_head, trace.hidden.row(trace.clip_row(i)))[0];
      }
      pass.outputs.push_back(scores);
      if (grads) {
        std::vector<double> dy;
        pass.loss = cross_entropy(scores, static_cast<std::size_t>(inst.target.at(0)), dy);
        for (std::size_t i = 0; i < inst.size(); ++i) {
          const std::size_t row = trace.clip_row(i);
          const double d = dy[i];
          linear_backward(params.mistake_head, trace.hidden.row(row), std::span<const double>(&d, 1),
                          grads->mistake_head, dx_for(row));
        }
      }
      break;
    }
  }
  if (grads && encoder_grads) backward_hidden(params, cfg, trace, d_hidden, *grads);
  return pass;
}

std::vector<int> decode(const BenchmarkInstance& inst, const ModelConfig& cfg,
                        const std::vector<std::vector<double>>& outputs) {
  std::vector<int> out;
  for (const auto& o : outputs) {
    const auto k = argmax(o);
    if (inst.kind == BenchmarkKind::long_term && k == cfg.num_labels) {
      out.push_back(kNullLabel);
    } else {
      out.push_back(static_cast<int>(k));
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> head_outputs(const TransformerParams& params,
                                              const ModelConfig& model_cfg,
                                              const BenchmarkInstance& instance,
                                              bool use_task_label, const TaskTokens& tokens) {
  return run_instance(params, model_cfg, instance, use_task_label, tokens, nullptr, false).outputs;
}

std::vector<int> predict(const TransformerParams& params, const ModelConfig& model_cfg,
                         const BenchmarkInstance& instance, bool use_task_label,
                         const TaskTokens& tokens) {
  return decode(instance, model_cfg,
                head_outputs(params, model_cfg, instance, use_task_label, tokens));
}

Counts score(const BenchmarkInstance& instance, const std::vector<int>& prediction) {
  if (prediction.size() != instance.target.size()) {
    throw DimensionError("prediction has " + std::to_string(prediction.size()) + " slots, target " +
                         std::to_string(instance.target.size()));
  }
  Counts c;
  for (std::size_t s = 0; s < prediction.size(); ++s) {
    if (instance.target[s] == kNullLabel) continue;
    ++c.total;
    if (prediction[s] == instance.target[s]) ++c.correct;
  }
  return c;
}

Counts score_predictions(const std::vector<BenchmarkInstance>& instances,
                         const std::vector<std::vector<int>>& predictions) {
  if (instances.size() != predictions.size()) throw DimensionError("prediction count mismatch");
  Counts total;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Counts c = score(instances[i], predictions[i]);
    total.correct += c.correct;
    total.total += c.total;
  }
  return total;
}

// --- fine-tuning ----------------------------------------------------------------------------

FinetuneResult finetune(TransformerParams params, const ModelConfig& model_cfg,
                        const FinetuneConfig& cfg, const BenchmarkSet& dataset,
                        const FinetuneOptions& options) {
  cfg.validate();
  check_shapes(params, model_cfg);
  if (dataset.instances.empty()) throw InvalidInput("empty dataset");
  if (dataset.kind != cfg.task_kind) {
    throw ConfigError("dataset kind " + to_string(dataset.kind) + " does not match finetune.task " +
                      to_string(cfg.task_kind));
  }
  const auto start = std::chrono::steady_clock::now();
  const TrainableGroups trainable = trainable_groups(cfg.task_kind, cfg.mode);
  const bool encoder_grads = cfg.mode == FinetuneMode::finetune;
  const OptimizerConfig opt = cfg.optimizer();
  OptimizerState state = make_optimizer(opt, params);
  TransformerParams grads = zeros_like(params);

  FinetuneResult result;
  result.report.seed = cfg.seed;
  result.report.config_digest = options.config_digest;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const TransformerParams last_good = params;
    std::vector<std::size_t> order(dataset.instances.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "finetune-order", epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    Counts counts;
    std::size_t pending = 0;
    auto flush = [&] {
      if (pending == 0) return;
      if (pending > 1) {
        for (auto& a : named_arrays(grads)) {
          for (double& x : a.tensor->values()) x /= static_cast<double>(pending);
        }
      }
      optimizer_step(state, params, grads, epoch, trainable);
      for (auto& a : named_arrays(grads)) a.tensor->fill(0.0);
      pending = 0;
    };

    for (std::size_t idx : order) {
      const auto& inst = dataset.instances[idx];
      Pass pass;
      try {
        pass = run_instance(params, model_cfg, inst, cfg.use_task_label, options.tokens, &grads,
                            encoder_grads);
      } catch (const DivergenceError&) {
        pass.loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(pass.loss)) {
        std::string path;
        if (options.checkpoint_dir) {
          path = (*options.checkpoint_dir / "finetune-last-good.vtfm").string();
          save_checkpoint(path, model_cfg, last_good, {{"stage", "finetune"}, {"seed", cfg.seed}});
        }
        throw DivergenceError("fine-tuning diverged at epoch " + std::to_string(epoch), path);
      }
      loss_sum += pass.loss;
      const Counts c = score(inst, decode(inst, model_cfg, pass.outputs));
      counts.correct += c.correct;
      counts.total += c.total;
      if (++pending == cfg.batch_size) flush();
    }
    flush();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(dataset.instances.size());
    rec.masked_accuracy = counts.total == 0 ? 0.0 : static_cast<double>(counts.correct) / counts.total;
    rec.lr = opt.lr_at(epoch);
    result.report.epochs.push_back(rec);
    spdlog::debug("{} epoch {}: loss {:.4f} acc {:.3f}", to_string(cfg.task_kind), epoch, rec.loss,
                  rec.masked_accuracy);
  }
  result.report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.params = std::move(params);
  return result;
}

// --- evaluation ------------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  return {{"task", task},
          {"split", split},
          {"accuracy", accuracy},
          {"correct", correct},
          {"total", total},
          {"config_digest", config_digest},
          {"corpus_digest", corpus_digest}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  ObjectReader reader(j, "report");
  reader.require("task", r.task);
  reader.read("split", r.split);
  reader.require("accuracy", r.accuracy);
  reader.require("correct", r.correct);
  reader.require("total", r.total);
  reader.read("config_digest", r.config_digest);
  reader.read("corpus_digest", r.corpus_digest);
  reader.finish();
  return r;
}

EvalReport evaluate(const TransformerParams& params, const ModelConfig& model_cfg,
                    const BenchmarkSet& dataset, bool use_task_label, const TaskTokens& tokens) {
  if (dataset.instances.empty()) throw InvalidInput("empty dataset");
  Counts counts;
  for (const auto& inst : dataset.instances) {
    const Counts c = score(inst, predict(params, model_cfg, inst, use_task_label, tokens));
    counts.correct += c.correct;
    counts.total += c.total;
  }
  EvalReport r;
  r.task = to_string(dataset.kind);
  r.split = dataset.split;
  r.correct = counts.correct;
  r.total = counts.total;
  r.accuracy = counts.total == 0 ? 0.0 : static_cast<double>(counts.correct) / counts.total;
  r.corpus_digest = dataset.corpus_digest;
  return r;
}

}  // namespace stepmask
