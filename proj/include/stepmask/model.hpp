#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stepmask/tensor.hpp"

namespace stepmask {

inline constexpr std::size_t kForecastSlots = 5;
inline constexpr double kLayerNormEps = 1e-5;

// How sequence-level heads read the encoder output.
enum class Pooling { cls, mean };

struct ModelConfig {
  std::size_t input_dim = 32;  // D_in
  std::size_t hidden_dim = 64;  // D
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_positions = 16;
  std::size_t num_labels = 24;  // S
  std::size_t num_tasks = 4;
  double mlp_ratio = 4.0;
  bool use_positional = true;
  Pooling pooling = Pooling::cls;
  double init_std = 0.02;

  std::size_t mlp_dim() const;
  std::size_t head_dim() const { return hidden_dim / heads; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  // D=64, heads=4, layers=2, mlp_ratio=4, max_positions=16.
  static ModelConfig desk_preset(std::size_t input_dim, std::size_t num_labels,
                                 std::size_t num_tasks);
  // Two layers, width 768, 12 heads, 12 segment positions.
  static ModelConfig paper_preset(std::size_t num_labels, std::size_t num_tasks);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// y = x * weight + bias with weight stored (in x out).
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct BlockParams {
  LayerNormParams ln1;
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  LayerNormParams ln2;
  Linear fc1;
  Linear fc2;
};

struct TransformerParams {
  Linear input_projection;
  Tensor mask_token;
  Tensor cls_token;
  Tensor positional;
  std::vector<BlockParams> blocks;
  // Label head over the step vocabulary.
  Linear head;
  // Downstream heads.
  Linear task_head;
  Linear order_head;
  Linear mistake_head;
  std::array<Linear, kForecastSlots> forecast_heads;

  // Bumped on every in-place update; traces remember the revision they saw.
  std::uint64_t revision = 0;
};

struct NamedArray {
  std::string name;
  Tensor* tensor;
};
struct ConstNamedArray {
  std::string name;
  const Tensor* tensor;
};

// Every learnable array in declaration order.
std::vector<NamedArray> named_arrays(TransformerParams& p);
std::vector<ConstNamedArray> named_arrays(const TransformerParams& p);

// Which component an array belongs to, derived from its name.
enum class ParamGroup { transformer, head, task_head, order_head, mistake_head, forecast_heads };
ParamGroup param_group(const std::string& name);

// Correctly shaped arrays: zeros, layer-norm gains one.
TransformerParams allocate_params(const ModelConfig& cfg);
TransformerParams init_params(const ModelConfig& cfg, std::uint64_t seed);
TransformerParams zeros_like(const TransformerParams& p);
std::size_t parameter_count(const TransformerParams& p);
bool params_equal(const TransformerParams& a, const TransformerParams& b);
// SHA-256 over the raw bytes of every array, in declaration order.
std::string params_digest(const TransformerParams& p);
// Digest restricted to arrays of one group.
std::string group_digest(const TransformerParams& p, ParamGroup group);
void check_shapes(const TransformerParams& p, const ModelConfig& cfg);

struct SequenceInput {
  Tensor clips;  // K x D_in
  std::vector<std::size_t> masked;
  bool prepend_cls = false;
  std::optional<std::vector<double>> task_token;  // D_in
};

struct BlockCache {
  Tensor input;
  Tensor ln1_xhat;
  Tensor ln1_rstd;
  Tensor ln1_out;
  Tensor query;
  Tensor key;
  Tensor value;
  std::vector<Tensor> attention;  // per head, T x T
  Tensor context;
  Tensor mid;
  Tensor ln2_xhat;
  Tensor ln2_rstd;
  Tensor ln2_out;
  Tensor pre_activation;
  Tensor activation;

  friend bool operator==(const BlockCache&, const BlockCache&) = default;
};

struct ForwardTrace {
  Tensor hidden;  // T x D
  Tensor logits;  // T x S
  std::size_t clip_offset = 0;
  std::size_t num_clips = 0;
  bool has_cls = false;
  bool has_task_token = false;
  std::vector<bool> masked;  // per clip
  // Rows fed through the input projection (zero for CLS and masked rows).
  Tensor projected_inputs;
  std::vector<bool> projected;  // per token
  std::vector<BlockCache> blocks;

  const void* source = nullptr;
  std::uint64_t revision = 0;

  std::size_t tokens() const { return hidden.rows(); }
  std::size_t clip_row(std::size_t i) const { return clip_offset + i; }

  friend bool operator==(const ForwardTrace&, const ForwardTrace&) = default;
};

ForwardTrace forward(const TransformerParams& params, const ModelConfig& cfg,
                     const SequenceInput& input);

// Accumulates parameter gradients given dLoss/dHidden.
void backward_hidden(const TransformerParams& params, const ModelConfig& cfg,
                     const ForwardTrace& trace, const Tensor& d_hidden, TransformerParams& grads);

// Accumulates gradients given dLoss/dLogits: through the label head, then the
// encoder.
void backward(const TransformerParams& params, const ModelConfig& cfg, const ForwardTrace& trace,
              const Tensor& d_logits, TransformerParams& grads);

std::vector<double> softmax_logits(std::span<const double> logits);

std::vector<double> apply_linear(const Linear& layer, std::span<const double> x);
// g.weight += x^T dy, g.bias += dy, dx += dy * W^T.
void linear_backward(const Linear& layer, std::span<const double> x, std::span<const double> dy,
                     Linear& grad, std::span<double> dx);

// Pooled sequence representation (CLS row or mean over clip rows).
std::vector<double> pooled(const ForwardTrace& trace, const ModelConfig& cfg);
// Adds dPooled into the right rows of d_hidden.
void pooled_backward(const ForwardTrace& trace, const ModelConfig& cfg,
                     std::span<const double> d_pooled, Tensor& d_hidden);

double gelu(double x);
double gelu_derivative(double x);

}  // namespace stepmask
