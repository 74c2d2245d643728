#include "stepmask/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "stepmask/checkpoint.hpp"
#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"
#include "stepmask/json_util.hpp"

namespace stepmask {

// --- masking ----------------------------------------------------------------------

void MaskSpec::validate() const {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("mask.ratio must be in (0, 1]");
}

nlohmann::json MaskSpec::to_json() const {
  return {{"ratio", ratio}, {"resample_if_empty", resample_if_empty}, {"seed", seed}};
}

MaskSpec MaskSpec::from_json(const nlohmann::json& j) {
  MaskSpec m;
  ObjectReader r(j, "mask");
  r.read("ratio", m.ratio);
  r.read("resample_if_empty", m.resample_if_empty);
  r.read("seed", m.seed);
  r.finish();
  m.validate();
  return m;
}

std::vector<std::size_t> sample_mask(std::size_t K, const MaskSpec& spec, std::uint64_t draw) {
  spec.validate();
  if (K == 0) throw InvalidInput("cannot mask an empty sequence");
  Rng rng(combine_seed(spec.seed, draw));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::size_t> masked;
  do {
    masked.clear();
    for (std::size_t i = 0; i < K; ++i) {
      if (unif(rng) < spec.ratio) masked.push_back(i);
    }
  } while (masked.empty() && spec.resample_if_empty);
  return masked;
}

// --- losses -------------------------------------------------------------------------

std::string to_string(LossKind kind) {
  return kind == LossKind::step_classification ? "SC" : "DM";
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "SC" || s == "sc" || s == "step_classification") return LossKind::step_classification;
  if (s == "DM" || s == "dm" || s == "distribution_matching") return LossKind::distribution_matching;
  throw ConfigError("loss must be 'SC' or 'DM', got '" + s + "'");
}

namespace {

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}

double reduction_weight(Reduction reduction, std::size_t count) {
  return reduction == Reduction::mean ? 1.0 / static_cast<double>(count) : 1.0;
}

void check_masked(const ForwardTrace& trace, const std::vector<std::size_t>& masked) {
  if (masked.empty()) throw InvalidInput("loss needs at least one masked position");
  for (std::size_t m : masked) {
    if (m >= trace.num_clips) throw InvalidInput("masked position out of range");
  }
}

}  // namespace

LossResult step_classification_loss(const ForwardTrace& trace,
                                    const std::map<std::size_t, LabelId>& targets,
                                    const std::vector<std::size_t>& masked, Reduction reduction) {
  check_masked(trace, masked);
  const std::size_t S = trace.logits.cols();
  const double w = reduction_weight(reduction, masked.size());
  LossResult out{0.0, zeros_like(trace.logits)};
  for (std::size_t m : masked) {
    auto it = targets.find(m);
    if (it == targets.end()) throw InvalidTarget("no target for masked position " + std::to_string(m));
    const LabelId y = it->second;
    if (y < 0 || static_cast<std::size_t>(y) >= S) throw InvalidTarget("target label out of range");
    const std::size_t row = trace.clip_row(m);
    const auto logits = trace.logits.row(row);
    out.loss += w * (log_sum_exp(logits) - logits[static_cast<std::size_t>(y)]);
    const auto q = softmax_logits(logits);
    auto d = out.d_logits.row(row);
    for (std::size_t j = 0; j < S; ++j) d[j] = w * q[j];
    d[static_cast<std::size_t>(y)] -= w;
  }
  return out;
}

LossResult distribution_matching_loss(const ForwardTrace& trace,
                                      const std::map<std::size_t, LabelDistribution>& targets,
                                      const std::vector<std::size_t>& masked,
                                      Reduction reduction) {
  check_masked(trace, masked);
  const std::size_t S = trace.logits.cols();
  const double w = reduction_weight(reduction, masked.size());
  LossResult out{0.0, zeros_like(trace.logits)};
  for (std::size_t m : masked) {
    auto it = targets.find(m);
    if (it == targets.end()) throw InvalidTarget("no target for masked position " + std::to_string(m));
    it->second.validate(S);
    const std::size_t row = trace.clip_row(m);
    const auto logits = trace.logits.row(row);
    const double lse = log_sum_exp(logits);
    double kl = 0.0;
    for (const auto& e : it->second.entries) {
      const double log_q = logits[static_cast<std::size_t>(e.label)] - lse;
      kl += e.probability * (std::log(e.probability) - log_q);
    }
    out.loss += w * kl;
    const auto q = softmax_logits(logits);
    auto d = out.d_logits.row(row);
    for (std::size_t j = 0; j < S; ++j) d[j] = w * q[j];
    for (const auto& e : it->second.entries) d[static_cast<std::size_t>(e.label)] -= w * e.probability;
  }
  return out;
}

MaskedExample make_masked_example(const VideoRecord& video, std::vector<std::size_t> masked) {
  MaskedExample ex;
  ex.clips = video.features();
  ex.masked = std::move(masked);
  for (std::size_t i = 0; i < video.clips.size(); ++i) {
    ex.hard_targets[i] = best_label(video.clips[i].weak);
    ex.soft_targets[i] = video.clips[i].weak;
  }
  return ex;
}

namespace {

SequenceInput to_input(const MaskedExample& example) {
  SequenceInput in;
  in.clips = example.clips;
  in.masked = example.masked;
  return in;
}

LossResult loss_for(const ForwardTrace& trace, const MaskedExample& example, LossKind kind,
                    Reduction reduction) {
  return kind == LossKind::step_classification
             ? step_classification_loss(trace, example.hard_targets, example.masked, reduction)
             : distribution_matching_loss(trace, example.soft_targets, example.masked, reduction);
}

void scale_in_place(Tensor& t, double s) {
  for (double& x : t.values()) x *= s;
}

// Adds gradients of loss_scale * loss into `grads`; returns the scaled loss
// and the forward trace.
std::pair<double, ForwardTrace> accumulate_gradients(const TransformerParams& params,
                                                     const ModelConfig& cfg,
                                                     const MaskedExample& example, LossKind kind,
                                                     Reduction reduction, double loss_scale,
                                                     TransformerParams& grads) {
  ForwardTrace trace = forward(params, cfg, to_input(example));
  LossResult loss = loss_for(trace, example, kind, reduction);
  if (loss_scale != 1.0) scale_in_place(loss.d_logits, loss_scale);
  backward(params, cfg, trace, loss.d_logits, grads);
  return {loss_scale * loss.loss, std::move(trace)};
}

}  // namespace

double compute_loss(const TransformerParams& params, const ModelConfig& cfg,
                    const MaskedExample& example, LossKind kind, Reduction reduction) {
  const ForwardTrace trace = forward(params, cfg, to_input(example));
  return loss_for(trace, example, kind, reduction).loss;
}

GradientResult compute_gradients(const TransformerParams& params, const ModelConfig& cfg,
                                 const MaskedExample& example, LossKind kind, Reduction reduction,
                                 double loss_scale) {
  GradientResult result;
  result.grads = zeros_like(params);
  auto [loss, trace] =
      accumulate_gradients(params, cfg, example, kind, reduction, loss_scale, result.grads);
  result.loss = loss;
  result.trace = std::move(trace);
  return result;
}

GradCheckResult grad_check(const TransformerParams& params, const ModelConfig& cfg,
                           const MaskedExample& example, LossKind kind,
                           const GradCheckOptions& options) {
  const GradientResult analytic = compute_gradients(params, cfg, example, kind, options.reduction);
  TransformerParams probe = params;
  auto probe_arrays = named_arrays(probe);
  const auto grad_arrays = named_arrays(analytic.grads);
  Rng rng(options.seed);

  GradCheckResult result;
  for (std::size_t a = 0; a < probe_arrays.size(); ++a) {
    Tensor& values = *probe_arrays[a].tensor;
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.coordinates_per_array) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coordinates_per_array);
    }
    for (std::size_t c : coords) {
      const double original = values[c];
      auto loss_at = [&](double offset) {
        values[c] = original + offset;
        return compute_loss(probe, cfg, example, kind, options.reduction);
      };
      const double h = options.epsilon;
      double numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
      if (options.stencil == Stencil::five_point) {
        numeric = (4.0 * numeric - (loss_at(2.0 * h) - loss_at(-2.0 * h)) / (4.0 * h)) / 3.0;
      }
      values[c] = original;
      const double exact = (*grad_arrays[a].tensor)[c];
      const double rel = std::abs(exact - numeric) / std::max(1e-8, std::abs(exact) + std::abs(numeric));
      if (rel > result.max_relative_error || result.worst_array.empty()) {
        result.max_relative_error = std::max(rel, result.max_relative_error);
        result.worst_array = probe_arrays[a].name;
      }
      ++result.coordinates;
    }
  }
  return result;
}

// --- optimizers -----------------------------------------------------------------------

double OptimizerConfig::lr_at(std::size_t epoch) const {
  double out = lr;
  for (const auto& [at, mult] : schedule) {
    if (at <= epoch) out *= mult;
  }
  return out;
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum must be in [0,1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer betas must be in [0,1)");
  }
  for (const auto& [at, mult] : schedule) {
    if (!(mult > 0.0)) throw ConfigError("optimizer.schedule multipliers must be positive");
  }
}

nlohmann::json OptimizerConfig::to_json() const {
  auto sched = nlohmann::json::array();
  for (const auto& [at, mult] : schedule) sched.push_back({at, mult});
  return {{"kind", kind == OptimizerKind::sgd_momentum ? "sgd" : "adamw"},
          {"lr", lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"schedule", sched}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j, const std::string& path) {
  OptimizerConfig o;
  ObjectReader r(j, path);
  std::string kind = "adamw";
  r.read("kind", kind);
  if (kind == "sgd" || kind == "sgd_momentum") o.kind = OptimizerKind::sgd_momentum;
  else if (kind == "adamw") o.kind = OptimizerKind::adamw;
  else throw ConfigError(r.field("kind") + ": must be 'sgd' or 'adamw'");
  r.read("lr", o.lr);
  r.read("momentum", o.momentum);
  r.read("weight_decay", o.weight_decay);
  r.read("beta1", o.beta1);
  r.read("beta2", o.beta2);
  r.read("eps", o.eps);
  std::vector<std::pair<std::size_t, double>> sched;
  if (r.read("schedule", sched)) o.schedule = sched;
  r.finish();
  o.validate();
  return o;
}

OptimizerState make_optimizer(const OptimizerConfig& config, const TransformerParams& params) {
  config.validate();
  OptimizerState s;
  s.config = config;
  s.first_moment = zeros_like(params);
  if (config.kind == OptimizerKind::adamw) s.second_moment = zeros_like(params);
  return s;
}

TrainableGroups all_groups() {
  return {ParamGroup::transformer, ParamGroup::head,         ParamGroup::task_head,
          ParamGroup::order_head,  ParamGroup::mistake_head, ParamGroup::forecast_heads};
}

void optimizer_step(OptimizerState& state, TransformerParams& params,
                    const TransformerParams& grads, std::size_t epoch,
                    const TrainableGroups& trainable) {
  auto p_arrays = named_arrays(params);
  const auto g_arrays = named_arrays(grads);
  auto m_arrays = named_arrays(state.first_moment);
  if (p_arrays.size() != g_arrays.size() || p_arrays.size() != m_arrays.size()) {
    throw DimensionError("optimizer: parameter structure mismatch");
  }
  const auto& c = state.config;
  const double lr = c.lr_at(epoch);
  ++state.step_count;
  const bool adam = c.kind == OptimizerKind::adamw;
  std::vector<NamedArray> v_arrays;
  if (adam) v_arrays = named_arrays(state.second_moment);
  const double bias1 = adam ? 1.0 - std::pow(c.beta1, static_cast<double>(state.step_count)) : 1.0;
  const double bias2 = adam ? 1.0 - std::pow(c.beta2, static_cast<double>(state.step_count)) : 1.0;

  for (std::size_t a = 0; a < p_arrays.size(); ++a) {
    if (!trainable.count(param_group(p_arrays[a].name))) continue;
    Tensor& theta = *p_arrays[a].tensor;
    const Tensor& g = *g_arrays[a].tensor;
    Tensor& m = *m_arrays[a].tensor;
    if (!theta.same_shape(g) || !theta.same_shape(m)) {
      throw DimensionError("optimizer: shape mismatch for " + p_arrays[a].name);
    }
    if (!adam) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = c.momentum * m[i] + g[i];
        theta[i] -= lr * (m[i] + c.weight_decay * theta[i]);
      }
    } else {
      Tensor& v = *v_arrays[a].tensor;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bias1;
        const double v_hat = v[i] / bias2;
        theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * theta[i]);
      }
    }
  }
  ++params.revision;
}

// --- pre-training config -------------------------------------------------------------------

std::size_t PretrainConfig::total_epochs() const {
  std::size_t n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

void PretrainConfig::validate() const {
  if (accumulate == 0) throw ConfigError("pretrain.accumulate must be at least 1");
  for (const auto& p : phases) p.optimizer.validate();
}

nlohmann::json PretrainConfig::to_json() const {
  auto phases_json = nlohmann::json::array();
  for (const auto& p : phases) phases_json.push_back({{"optimizer", p.optimizer.to_json()}, {"epochs", p.epochs}});
  return {{"loss", to_string(loss)},
          {"reduction", reduction == Reduction::mean ? "mean" : "sum"},
          {"accumulate", accumulate},
          {"phases", phases_json}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  ObjectReader r(j, "pretrain");
  PretrainConfig c;
  std::string recipe;
  if (r.read("recipe", recipe)) {
    if (recipe == "paper-pretrain") c = paper_recipe();
    else if (recipe != "desk") throw ConfigError("pretrain.recipe must be 'desk' or 'paper-pretrain'");
  }
  std::string loss;
  if (r.read("loss", loss)) c.loss = loss_kind_from_string(loss);
  std::string reduction;
  if (r.read("reduction", reduction)) {
    if (reduction == "mean") c.reduction = Reduction::mean;
    else if (reduction == "sum") c.reduction = Reduction::sum;
    else throw ConfigError("pretrain.reduction must be 'mean' or 'sum'");
  }
  r.read("accumulate", c.accumulate);
  std::size_t epochs = 0;
  const bool has_epochs = r.read("epochs", epochs);
  const nlohmann::json* opt = r.child("optimizer");
  if (const nlohmann::json* phases = r.child("phases")) {
    if (!phases->is_array()) throw ConfigError("pretrain.phases: expected an array");
    c.phases.clear();
    for (std::size_t i = 0; i < phases->size(); ++i) {
      const std::string path = "pretrain.phases[" + std::to_string(i) + "]";
      ObjectReader pr((*phases)[i], path);
      PretrainPhase phase;
      pr.require("epochs", phase.epochs);
      if (const nlohmann::json* o = pr.child("optimizer")) {
        phase.optimizer = OptimizerConfig::from_json(*o, path + ".optimizer");
      }
      pr.finish();
      c.phases.push_back(phase);
    }
  } else if (has_epochs || opt) {
    PretrainPhase phase = c.phases.empty() ? PretrainPhase{} : c.phases.front();
    if (c.phases.empty()) phase.optimizer = desk_default(0).phases.front().optimizer;
    if (has_epochs) phase.epochs = epochs;
    if (opt) phase.optimizer = OptimizerConfig::from_json(*opt, "pretrain.optimizer");
    c.phases = {phase};
  }
  r.finish();
  c.validate();
  return c;
}

PretrainConfig PretrainConfig::desk_default(std::size_t epochs) {
  PretrainConfig c;
  OptimizerConfig o;
  o.kind = OptimizerKind::adamw;
  o.lr = 1e-3;
  c.phases = {{o, epochs}};
  return c;
}

PretrainConfig PretrainConfig::paper_recipe() {
  PretrainConfig c;
  OptimizerConfig sgd;
  sgd.kind = OptimizerKind::sgd_momentum;
  sgd.lr = 0.01;
  sgd.momentum = 0.9;
  sgd.weight_decay = 1e-4;
  sgd.schedule = {{15, 0.1}, {19, 0.1}};
  OptimizerConfig adamw;
  adamw.kind = OptimizerKind::adamw;
  adamw.lr = 5e-5;
  adamw.weight_decay = 0.01;
  c.phases = {{sgd, 20}, {adamw, 15}};
  return c;
}

// --- reports ---------------------------------------------------------------------------------

nlohmann::json TrainReport::to_json() const {
  auto rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"loss", e.loss},
                    {"masked_acc", e.masked_accuracy},
                    {"lr", e.lr}});
  }
  return {{"seed", seed}, {"config_digest", config_digest}, {"epochs", rows}};
}

std::string TrainReport::to_csv() const {
  std::ostringstream out;
  out << "epoch,loss,masked_acc,lr\n";
  char buf[160];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.loss, e.masked_accuracy, e.lr);
    out << buf;
  }
  return out.str();
}

// --- pre-training loop ------------------------------------------------------------------------

namespace {

void zero(TransformerParams& p) {
  for (auto& a : named_arrays(p)) a.tensor->fill(0.0);
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace

PretrainResult pretrain(const std::vector<VideoRecord>& corpus, const ModelConfig& model_cfg,
                        const MaskSpec& mask, const PretrainConfig& cfg, std::uint64_t seed,
                        const PretrainOptions& options) {
  model_cfg.validate();
  return pretrain_from(init_params(model_cfg, derive_seed(seed, "init")), corpus, model_cfg, mask,
                       cfg, seed, options);
}

PretrainResult pretrain_from(TransformerParams params, const std::vector<VideoRecord>& corpus,
                             const ModelConfig& model_cfg, const MaskSpec& mask,
                             const PretrainConfig& cfg, std::uint64_t seed,
                             const PretrainOptions& options) {
  cfg.validate();
  mask.validate();
  check_shapes(params, model_cfg);
  if (corpus.empty()) throw InvalidInput("pretrain: empty corpus");
  for (const auto& v : corpus) {
    if (v.size() > model_cfg.max_positions) {
      throw CapacityError("video " + v.video_id + " has " + std::to_string(v.size()) +
                          " clips, capacity is " + std::to_string(model_cfg.max_positions));
    }
  }

  const auto start = std::chrono::steady_clock::now();
  PretrainResult result;
  result.report.seed = seed;
  result.report.config_digest = options.config_digest;
  const TrainableGroups trainable = {ParamGroup::transformer, ParamGroup::head};
  TransformerParams acc = zeros_like(params);

  auto checkpoint = [&](const TransformerParams& p, const std::string& name) -> std::string {
    if (!options.checkpoint_dir) return "";
    const auto path = *options.checkpoint_dir / name;
    save_checkpoint(path, model_cfg, p,
                    {{"stage", "pretrain"}, {"seed", seed}, {"config_digest", options.config_digest}});
    return path.string();
  };

  std::size_t global_epoch = 0;
  for (std::size_t phase_index = 0; phase_index < cfg.phases.size(); ++phase_index) {
    const auto& phase = cfg.phases[phase_index];
    OptimizerState state = make_optimizer(phase.optimizer, params);
    for (std::size_t e = 0; e < phase.epochs; ++e, ++global_epoch) {
      const TransformerParams last_good = params;
      std::vector<std::size_t> order(corpus.size());
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng(derive_seed(seed, "epoch-order", global_epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      double loss_sum = 0.0;
      std::size_t correct = 0, predicted = 0, pending = 0;
      auto flush = [&] {
        if (pending == 0) return;
        if (pending > 1) {
          for (auto& a : named_arrays(acc)) {
            for (double& x : a.tensor->values()) x /= static_cast<double>(pending);
          }
        }
        optimizer_step(state, params, acc, e, trainable);
        zero(acc);
        pending = 0;
      };

      for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const VideoRecord& video = corpus[order[pos]];
        const std::uint64_t draw = combine_seed(seed, global_epoch * corpus.size() + pos);
        MaskedExample ex = make_masked_example(video, sample_mask(video.size(), mask, draw));
        if (ex.masked.empty()) continue;
        double loss = 0.0;
        ForwardTrace trace;
        try {
          std::tie(loss, trace) =
              accumulate_gradients(params, model_cfg, ex, cfg.loss, cfg.reduction, 1.0, acc);
        } catch (const DivergenceError&) {
          loss = std::numeric_limits<double>::quiet_NaN();
        }
        if (!std::isfinite(loss)) {
          const auto path = checkpoint(last_good, "last-good.vtfm");
          throw DivergenceError("pretraining diverged at epoch " + std::to_string(global_epoch), path);
        }
        loss_sum += loss;
        for (std::size_t m : ex.masked) {
          const auto pred = static_cast<LabelId>(argmax(trace.logits.row(trace.clip_row(m))));
          correct += pred == ex.hard_targets.at(m) ? 1 : 0;
          ++predicted;
        }
        if (++pending == cfg.accumulate) flush();
      }
      flush();

      EpochRecord rec;
      rec.epoch = global_epoch;
      rec.loss = loss_sum / static_cast<double>(corpus.size());
      rec.masked_accuracy = predicted == 0 ? 0.0 : static_cast<double>(correct) / predicted;
      rec.lr = phase.optimizer.lr_at(e);
      result.report.epochs.push_back(rec);
      if (options.on_epoch) options.on_epoch(rec);

      const bool milestone = std::any_of(phase.optimizer.schedule.begin(), phase.optimizer.schedule.end(),
                                         [&](const auto& s) { return s.first == e + 1; });
      if (milestone || e + 1 == phase.epochs) {
        checkpoint(params, "pretrain-epoch" + std::to_string(global_epoch + 1) + ".vtfm");
      }
    }
  }
  result.report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  spdlog::debug("pretraining finished in {:.2f}s", result.report.wall_time_s);
  result.params = std::move(params);
  return result;
}

std::vector<LabelId> predict_masked(const TransformerParams& params, const ModelConfig& cfg,
                                    const Tensor& clips, const std::vector<std::size_t>& masked) {
  SequenceInput in;
  in.clips = clips;
  in.masked = masked;
  const ForwardTrace trace = forward(params, cfg, in);
  std::vector<LabelId> out;
  out.reserve(masked.size());
  for (std::size_t m : masked) out.push_back(static_cast<LabelId>(argmax(trace.logits.row(trace.clip_row(m)))));
  return out;
}

MaskedAccuracy single_mask_accuracy(const TransformerParams& params, const ModelConfig& cfg,
                                    const std::vector<VideoRecord>& videos, bool use_truth) {
  MaskedAccuracy acc;
  for (const auto& v : videos) {
    const Tensor clips = v.features();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const LabelId target = use_truth ? v.clips[i].truth : best_label(v.clips[i].weak);
      acc.correct += predict_masked(params, cfg, clips, {i}).front() == target ? 1 : 0;
      ++acc.total;
    }
  }
  return acc;
}

}  // namespace stepmask
