#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stepmask/benchmarks.hpp"
#include "stepmask/model.hpp"
#include "stepmask/training.hpp"
#include "stepmask/weaklabel.hpp"

namespace stepmask {

enum class FinetuneMode { linear_probe, finetune };

struct FinetuneConfig {
  BenchmarkKind task_kind = BenchmarkKind::step_cls;
  FinetuneMode mode = FinetuneMode::finetune;
  bool use_task_label = false;
  double lr = 0.005;
  // Plain SGD. Momentum 0.9 at batch size 1 diverges on the sequence heads.
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::size_t epochs = 50;
  // Instances per optimizer step.
  std::size_t batch_size = 1;
  // (epoch, multiplier) pairs. Unset means x0.1 at 75% and 95% of the epochs.
  std::optional<std::vector<std::pair<std::size_t, double>>> schedule;
  std::uint64_t seed = 0;

  OptimizerConfig optimizer() const;
  void validate() const;
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j, const std::string& path = "finetune");
};

// Only the kind's head, or that head plus the shared encoder.
TrainableGroups trainable_groups(BenchmarkKind kind, FinetuneMode mode);
ParamGroup head_group(BenchmarkKind kind);

// Sentence embedding of the task name fitted to input_dim.
std::vector<double> embed_task_label(const std::string& task_name, const TextEmbedder& embedder,
                                     std::size_t input_dim);

// Supplies task tokens when use_task_label is set.
struct TaskTokens {
  const TextEmbedder* embedder = nullptr;
  std::vector<double> token(const std::string& task_name, std::size_t input_dim) const;
};

SequenceInput make_input(const BenchmarkInstance& instance, const ModelConfig& model_cfg,
                         bool use_task_label, const TaskTokens& tokens = {});

// Predicted values in the same layout as BenchmarkInstance::target. LongTerm
// slots may predict kNullLabel.
std::vector<int> predict(const TransformerParams& params, const ModelConfig& model_cfg,
                         const BenchmarkInstance& instance, bool use_task_label = false,
                         const TaskTokens& tokens = {});

// Raw per-kind outputs of the relevant head(s), one vector per prediction slot.
std::vector<std::vector<double>> head_outputs(const TransformerParams& params,
                                              const ModelConfig& model_cfg,
                                              const BenchmarkInstance& instance,
                                              bool use_task_label = false,
                                              const TaskTokens& tokens = {});

struct Counts {
  std::size_t correct = 0;
  std::size_t total = 0;
};

// Scores one prediction. LongTerm counts each non-NULL slot.
Counts score(const BenchmarkInstance& instance, const std::vector<int>& prediction);
Counts score_predictions(const std::vector<BenchmarkInstance>& instances,
                         const std::vector<std::vector<int>>& predictions);

struct FinetuneResult {
  TransformerParams params;
  TrainReport report;  // masked_accuracy holds training accuracy
};

struct FinetuneOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::string config_digest;
  TaskTokens tokens;
};

FinetuneResult finetune(TransformerParams params, const ModelConfig& model_cfg,
                        const FinetuneConfig& cfg, const BenchmarkSet& dataset,
                        const FinetuneOptions& options = {});

struct EvalReport {
  std::string task;
  std::string split;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::string config_digest;
  std::string corpus_digest;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

EvalReport evaluate(const TransformerParams& params, const ModelConfig& model_cfg,
                    const BenchmarkSet& dataset, bool use_task_label = false,
                    const TaskTokens& tokens = {});

}  // namespace stepmask
