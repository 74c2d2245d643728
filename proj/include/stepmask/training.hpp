#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stepmask/corpus.hpp"
#include "stepmask/model.hpp"
#include "stepmask/weaklabel.hpp"

namespace stepmask {

// --- masking --------------------------------------------------------------------

struct MaskSpec {
  double ratio = 0.15;
  bool resample_if_empty = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static MaskSpec from_json(const nlohmann::json& j);
};

// Each index joins the mask independently with probability ratio. Sorted.
std::vector<std::size_t> sample_mask(std::size_t K, const MaskSpec& spec, std::uint64_t draw);

// --- losses -----------------------------------------------------------------------

enum class LossKind { step_classification, distribution_matching };
// Average over masked positions, or the literal sum.
enum class Reduction { mean, sum };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);

struct LossResult {
  double loss = 0.0;
  Tensor d_logits;  // same shape as trace.logits; zero outside masked clip rows
};

// Cross-entropy against hard labels at masked clip positions.
LossResult step_classification_loss(const ForwardTrace& trace,
                                    const std::map<std::size_t, LabelId>& targets,
                                    const std::vector<std::size_t>& masked,
                                    Reduction reduction = Reduction::mean);

// KL(target || softmax(logits)) at masked clip positions.
LossResult distribution_matching_loss(const ForwardTrace& trace,
                                      const std::map<std::size_t, LabelDistribution>& targets,
                                      const std::vector<std::size_t>& masked,
                                      Reduction reduction = Reduction::mean);

// One masked video: features plus per-clip targets for both loss kinds.
struct MaskedExample {
  Tensor clips;
  std::vector<std::size_t> masked;
  std::map<std::size_t, LabelId> hard_targets;
  std::map<std::size_t, LabelDistribution> soft_targets;
};

// Hard targets are the best weak label of each clip, soft targets the weak
// distributions themselves.
MaskedExample make_masked_example(const VideoRecord& video, std::vector<std::size_t> masked);

struct GradientResult {
  double loss = 0.0;
  TransformerParams grads;
  ForwardTrace trace;
};

double compute_loss(const TransformerParams& params, const ModelConfig& cfg,
                    const MaskedExample& example, LossKind kind,
                    Reduction reduction = Reduction::mean);

// Forward, loss, and exact reverse-mode gradients. loss_scale multiplies both.
GradientResult compute_gradients(const TransformerParams& params, const ModelConfig& cfg,
                                 const MaskedExample& example, LossKind kind,
                                 Reduction reduction = Reduction::mean, double loss_scale = 1.0);

// Two-point: (L(+e) - L(-e)) / 2e. Five-point adds the +-2e evaluations and
// cancels the e^2 truncation term.
enum class Stencil { two_point, five_point };

struct GradCheckOptions {
  double epsilon = 1e-5;
  Stencil stencil = Stencil::two_point;
  std::size_t coordinates_per_array = 200;
  std::uint64_t seed = 0;
  Reduction reduction = Reduction::mean;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_array;
  std::size_t coordinates = 0;
};

// Compares analytic gradients with central differences on a random subsample
// of coordinates of every array.
GradCheckResult grad_check(const TransformerParams& params, const ModelConfig& cfg,
                           const MaskedExample& example, LossKind kind,
                           const GradCheckOptions& options = {});

// --- optimizers -------------------------------------------------------------------

enum class OptimizerKind { sgd_momentum, adamw };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // (epoch, multiplier): from that epoch on, lr is scaled by multiplier.
  std::vector<std::pair<std::size_t, double>> schedule;

  double lr_at(std::size_t epoch) const;
  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j, const std::string& path = "optimizer");
};

struct OptimizerState {
  OptimizerConfig config;
  TransformerParams first_moment;   // SGD velocity or Adam m
  TransformerParams second_moment;  // Adam v
  std::uint64_t step_count = 0;
};

OptimizerState make_optimizer(const OptimizerConfig& config, const TransformerParams& params);

using TrainableGroups = std::set<ParamGroup>;
TrainableGroups all_groups();

// Updates only arrays in `trainable`; other arrays stay bit-identical.
void optimizer_step(OptimizerState& state, TransformerParams& params,
                    const TransformerParams& grads, std::size_t epoch,
                    const TrainableGroups& trainable);

// --- pre-training --------------------------------------------------------------------

struct PretrainPhase {
  OptimizerConfig optimizer;
  std::size_t epochs = 0;
};

struct PretrainConfig {
  LossKind loss = LossKind::step_classification;
  Reduction reduction = Reduction::mean;
  std::vector<PretrainPhase> phases;
  // Videos per optimizer step; gradients are averaged.
  std::size_t accumulate = 1;

  std::size_t total_epochs() const;
  void validate() const;
  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);

  // Single phase of AdamW at lr 1e-3.
  static PretrainConfig desk_default(std::size_t epochs);
  // SGD+momentum 0.01 for 20 epochs with x0.1 at epochs 15 and 19, then
  // 15 epochs of AdamW at 5e-5.
  static PretrainConfig paper_recipe();
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double masked_accuracy = 0.0;
  double lr = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double wall_time_s = 0.0;
  std::string config_digest;
  std::uint64_t seed = 0;

  // Timing is left out so reports from identical runs are byte-identical.
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct PretrainOptions {
  // Checkpoints at phase and schedule boundaries, plus last-good on divergence.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::string config_digest;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct PretrainResult {
  TransformerParams params;
  TrainReport report;
};

PretrainResult pretrain(const std::vector<VideoRecord>& corpus, const ModelConfig& model_cfg,
                        const MaskSpec& mask, const PretrainConfig& cfg, std::uint64_t seed,
                        const PretrainOptions& options = {});

// Continues from given parameters (used by pretrain and tests).
PretrainResult pretrain_from(TransformerParams params, const std::vector<VideoRecord>& corpus,
                             const ModelConfig& model_cfg, const MaskSpec& mask,
                             const PretrainConfig& cfg, std::uint64_t seed,
                             const PretrainOptions& options = {});

// Argmax label at each masked position.
std::vector<LabelId> predict_masked(const TransformerParams& params, const ModelConfig& cfg,
                                    const Tensor& clips, const std::vector<std::size_t>& masked);

struct MaskedAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

// Masks each clip on its own and scores the prediction against the clip's
// best weak label (use_truth=false) or its ground-truth label.
MaskedAccuracy single_mask_accuracy(const TransformerParams& params, const ModelConfig& cfg,
                                    const std::vector<VideoRecord>& videos, bool use_truth);

}  // namespace stepmask
