#include "stepmask/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "stepmask/errors.hpp"
#include "stepmask/hashing.hpp"
#include "stepmask/json_util.hpp"

namespace stepmask {

// --- config ------------------------------------------------------------------

std::size_t ModelConfig::mlp_dim() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(hidden_dim)));
}

void ModelConfig::validate() const {
  if (input_dim == 0 || hidden_dim == 0) throw ConfigError("model: dimensions must be positive");
  if (heads == 0 || hidden_dim % heads != 0) throw ConfigError("model.hidden_dim must be divisible by heads");
  if (layers < 1) throw ConfigError("model.layers must be at least 1");
  if (max_positions < 2) throw ConfigError("model.max_positions must be at least 2");
  if (num_labels == 0) throw ConfigError("model.num_labels must be positive");
  if (num_tasks == 0) throw ConfigError("model.num_tasks must be positive");
  if (!(mlp_ratio > 0.0) || mlp_dim() == 0) throw ConfigError("model.mlp_ratio must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"input_dim", input_dim},     {"hidden_dim", hidden_dim},
          {"layers", layers},           {"heads", heads},
          {"max_positions", max_positions}, {"num_labels", num_labels},
          {"num_tasks", num_tasks},     {"mlp_ratio", mlp_ratio},
          {"use_positional", use_positional},
          {"pooling", pooling == Pooling::cls ? "cls" : "mean"},
          {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  ObjectReader r(j, "model");
  r.read("input_dim", c.input_dim);
  r.read("hidden_dim", c.hidden_dim);
  r.read("layers", c.layers);
  r.read("heads", c.heads);
  r.read("max_positions", c.max_positions);
  r.read("num_labels", c.num_labels);
  r.read("num_tasks", c.num_tasks);
  r.read("mlp_ratio", c.mlp_ratio);
  r.read("use_positional", c.use_positional);
  std::string pooling = "cls";
  if (r.read("pooling", pooling)) {
    if (pooling == "cls") c.pooling = Pooling::cls;
    else if (pooling == "mean") c.pooling = Pooling::mean;
    else throw ConfigError("model.pooling must be 'cls' or 'mean'");
  }
  r.read("init_std", c.init_std);
  r.finish();
  return c;
}

ModelConfig ModelConfig::desk_preset(std::size_t input_dim, std::size_t num_labels,
                                     std::size_t num_tasks) {
  ModelConfig c;
  c.input_dim = input_dim;
  c.hidden_dim = 64;
  c.heads = 4;
  c.layers = 2;
  c.mlp_ratio = 4.0;
  c.max_positions = 16;
  c.num_labels = num_labels;
  c.num_tasks = num_tasks;
  return c;
}

ModelConfig ModelConfig::paper_preset(std::size_t num_labels, std::size_t num_tasks) {
  ModelConfig c;
  c.input_dim = 768;
  c.hidden_dim = 768;
  c.heads = 12;
  c.layers = 2;
  c.mlp_ratio = 4.0;
  c.max_positions = 12;
  c.num_labels = num_labels;
  c.num_tasks = num_tasks;
  return c;
}

// --- parameter bookkeeping -----------------------------------------------------

namespace {

template <typename P, typename Out>
void collect(P& p, Out& out) {
  auto lin = [&](const std::string& name, auto& l) {
    out.push_back({name + ".weight", &l.weight});
    out.push_back({name + ".bias", &l.bias});
  };
  auto norm = [&](const std::string& name, auto& n) {
    out.push_back({name + ".gain", &n.gain});
    out.push_back({name + ".bias", &n.bias});
  };
  lin("input_projection", p.input_projection);
  out.push_back({"mask_token", &p.mask_token});
  out.push_back({"cls_token", &p.cls_token});
  out.push_back({"positional", &p.positional});
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string prefix = "blocks." + std::to_string(i) + ".";
    norm(prefix + "ln1", b.ln1);
    lin(prefix + "query", b.query);
    lin(prefix + "key", b.key);
    lin(prefix + "value", b.value);
    lin(prefix + "output", b.output);
    norm(prefix + "ln2", b.ln2);
    lin(prefix + "fc1", b.fc1);
    lin(prefix + "fc2", b.fc2);
  }
  lin("head", p.head);
  lin("task_head", p.task_head);
  lin("order_head", p.order_head);
  lin("mistake_head", p.mistake_head);
  for (std::size_t s = 0; s < kForecastSlots; ++s) {
    lin("forecast_head." + std::to_string(s), p.forecast_heads[s]);
  }
}

bool starts_with(const std::string& s, std::string_view prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Linear make_linear(std::size_t in, std::size_t out) { return {Tensor(in, out), Tensor(out)}; }
LayerNormParams make_norm(std::size_t d) { return {Tensor(d, 1.0), Tensor(d)}; }

}  // namespace

TransformerParams allocate_params(const ModelConfig& cfg) {
  const std::size_t D = cfg.hidden_dim;
  TransformerParams p;
  p.input_projection = make_linear(cfg.input_dim, D);
  p.mask_token = Tensor(D);
  p.cls_token = Tensor(D);
  p.positional = Tensor(cfg.max_positions, D);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    BlockParams b;
    b.ln1 = make_norm(D);
    b.query = make_linear(D, D);
    b.key = make_linear(D, D);
    b.value = make_linear(D, D);
    b.output = make_linear(D, D);
    b.ln2 = make_norm(D);
    b.fc1 = make_linear(D, cfg.mlp_dim());
    b.fc2 = make_linear(cfg.mlp_dim(), D);
    p.blocks.push_back(std::move(b));
  }
  p.head = make_linear(D, cfg.num_labels);
  p.task_head = make_linear(D, cfg.num_tasks);
  p.order_head = make_linear(D, 2);
  p.mistake_head = make_linear(D, 1);
  for (auto& f : p.forecast_heads) f = make_linear(D, cfg.num_labels + 1);
  return p;
}

std::vector<NamedArray> named_arrays(TransformerParams& p) {
  std::vector<NamedArray> out;
  collect(p, out);
  return out;
}

std::vector<ConstNamedArray> named_arrays(const TransformerParams& p) {
  std::vector<ConstNamedArray> out;
  collect(p, out);
  return out;
}

ParamGroup param_group(const std::string& name) {
  if (starts_with(name, "head.")) return ParamGroup::head;
  if (starts_with(name, "task_head.")) return ParamGroup::task_head;
  if (starts_with(name, "order_head.")) return ParamGroup::order_head;
  if (starts_with(name, "mistake_head.")) return ParamGroup::mistake_head;
  if (starts_with(name, "forecast_head.")) return ParamGroup::forecast_heads;
  return ParamGroup::transformer;
}

TransformerParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TransformerParams p = allocate_params(cfg);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  for (auto& [name, t] : named_arrays(p)) {
    if (ends_with(name, ".bias")) {
      t->fill(0.0);
    } else if (ends_with(name, ".gain")) {
      t->fill(1.0);
    } else {
      for (double& x : t->values()) x = normal(rng);
    }
  }
  return p;
}

TransformerParams zeros_like(const TransformerParams& p) {
  TransformerParams z = p;
  for (auto& [name, t] : named_arrays(z)) t->fill(0.0);
  z.revision = 0;
  return z;
}

std::size_t parameter_count(const TransformerParams& p) {
  std::size_t n = 0;
  for (const auto& a : named_arrays(p)) n += a.tensor->size();
  return n;
}

bool params_equal(const TransformerParams& a, const TransformerParams& b) {
  const auto xa = named_arrays(a);
  const auto xb = named_arrays(b);
  if (xa.size() != xb.size()) return false;
  for (std::size_t i = 0; i < xa.size(); ++i) {
    if (!(*xa[i].tensor == *xb[i].tensor)) return false;
  }
  return true;
}

namespace {

std::string digest_of(const TransformerParams& p, const std::optional<ParamGroup>& group) {
  std::string bytes;
  for (const auto& [name, t] : named_arrays(p)) {
    if (group && param_group(name) != *group) continue;
    bytes += name;
    bytes.push_back('\0');
    bytes.append(reinterpret_cast<const char*>(t->storage().data()), t->size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

}  // namespace

std::string params_digest(const TransformerParams& p) { return digest_of(p, std::nullopt); }

std::string group_digest(const TransformerParams& p, ParamGroup group) {
  return digest_of(p, group);
}

void check_shapes(const TransformerParams& p, const ModelConfig& cfg) {
  const TransformerParams expected = allocate_params(cfg);
  const auto want = named_arrays(expected);
  const auto have = named_arrays(p);
  if (want.size() != have.size()) throw DimensionError("parameter set has wrong number of arrays");
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (!want[i].tensor->same_shape(*have[i].tensor)) {
      throw DimensionError("parameter " + want[i].name + " has wrong shape");
    }
    if (!have[i].tensor->all_finite()) throw DimensionError("parameter " + want[i].name + " is not finite");
  }
}

// --- primitives ----------------------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

std::vector<double> softmax_logits(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

std::vector<double> apply_linear(const Linear& layer, std::span<const double> x) {
  const std::size_t in = layer.weight.rows(), out = layer.weight.cols();
  if (x.size() != in) throw DimensionError("linear: input dimension mismatch");
  std::vector<double> y(layer.bias.storage());
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* w = layer.weight.row(i).data();
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * w[j];
  }
  return y;
}

void linear_backward(const Linear& layer, std::span<const double> x, std::span<const double> dy,
                     Linear& grad, std::span<double> dx) {
  const std::size_t in = layer.weight.rows(), out = layer.weight.cols();
  for (std::size_t j = 0; j < out; ++j) grad.bias[j] += dy[j];
  for (std::size_t i = 0; i < in; ++i) {
    const double* w = layer.weight.row(i).data();
    double* gw = grad.weight.row(i).data();
    double acc = 0.0;
    for (std::size_t j = 0; j < out; ++j) {
      gw[j] += x[i] * dy[j];
      acc += w[j] * dy[j];
    }
    if (!dx.empty()) dx[i] += acc;
  }
}

namespace {

Tensor linear_rows(const Tensor& x, const Linear& layer) {
  Tensor y = matmul(x, layer.weight);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += layer.bias[j];
  }
  return y;
}

// Returns dX; accumulates into grad.
Tensor linear_rows_backward(const Tensor& x, const Tensor& dy, const Linear& layer, Linear& grad) {
  matmul_tn_accumulate(x, dy, grad.weight);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto row = dy.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) grad.bias[j] += row[j];
  }
  return matmul_nt(dy, layer.weight);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& ln, Tensor& xhat, Tensor& rstd) {
  const std::size_t T = x.rows(), D = x.cols();
  xhat = Tensor(T, D);
  rstd = Tensor(T);
  Tensor y(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    auto row = x.row(t);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(D);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[t] = r;
    for (std::size_t d = 0; d < D; ++d) {
      const double h = (row[d] - mean) * r;
      xhat(t, d) = h;
      y(t, d) = ln.gain[d] * h + ln.bias[d];
    }
  }
  return y;
}

Tensor layer_norm_backward(const Tensor& dy, const Tensor& xhat, const Tensor& rstd,
                           const LayerNormParams& ln, LayerNormParams& grad) {
  const std::size_t T = dy.rows(), D = dy.cols();
  Tensor dx(T, D);
  std::vector<double> dxhat(D);
  for (std::size_t t = 0; t < T; ++t) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      grad.gain[d] += dy(t, d) * xhat(t, d);
      grad.bias[d] += dy(t, d);
      dxhat[d] = dy(t, d) * ln.gain[d];
      mean_dxhat += dxhat[d];
      mean_dxhat_xhat += dxhat[d] * xhat(t, d);
    }
    mean_dxhat /= static_cast<double>(D);
    mean_dxhat_xhat /= static_cast<double>(D);
    for (std::size_t d = 0; d < D; ++d) {
      dx(t, d) = rstd[t] * (dxhat[d] - mean_dxhat - xhat(t, d) * mean_dxhat_xhat);
    }
  }
  return dx;
}

void add_in_place(Tensor& a, const Tensor& b) {
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

void require_finite(const Tensor& t, std::size_t block) {
  if (!t.all_finite()) {
    throw DivergenceError("non-finite hidden state after block " + std::to_string(block), "");
  }
}

}  // namespace

// --- forward ------------------------------------------------------------------------

ForwardTrace forward(const TransformerParams& params, const ModelConfig& cfg,
                     const SequenceInput& input) {
  const std::size_t K = input.clips.rows();
  const std::size_t D = cfg.hidden_dim;
  if (K > 0 && input.clips.cols() != cfg.input_dim) {
    throw DimensionError("clip features have dimension " + std::to_string(input.clips.cols()) +
                         ", model expects " + std::to_string(cfg.input_dim));
  }
  if (input.task_token && input.task_token->size() != cfg.input_dim) {
    throw DimensionError("task token dimension mismatch");
  }
  if (params.blocks.size() != cfg.layers) throw DimensionError("params do not match layer count");

  ForwardTrace tr;
  tr.has_cls = input.prepend_cls;
  tr.has_task_token = input.task_token.has_value();
  tr.clip_offset = (tr.has_cls ? 1 : 0) + (tr.has_task_token ? 1 : 0);
  tr.num_clips = K;
  const std::size_t T = tr.clip_offset + K;
  if (T > cfg.max_positions) {
    throw CapacityError("sequence of " + std::to_string(T) + " tokens exceeds capacity " +
                        std::to_string(cfg.max_positions));
  }
  if (T == 0) throw InvalidInput("empty input sequence");
  tr.masked.assign(K, false);
  for (std::size_t m : input.masked) {
    if (m >= K) throw InvalidInput("mask index " + std::to_string(m) + " out of range");
    tr.masked[m] = true;
  }

  tr.projected_inputs = Tensor(T, cfg.input_dim);
  tr.projected.assign(T, false);
  if (tr.has_task_token) {
    const std::size_t t = tr.has_cls ? 1 : 0;
    std::copy(input.task_token->begin(), input.task_token->end(), tr.projected_inputs.row(t).begin());
    tr.projected[t] = true;
  }
  for (std::size_t i = 0; i < K; ++i) {
    if (tr.masked[i]) continue;
    const auto src = input.clips.row(i);
    std::copy(src.begin(), src.end(), tr.projected_inputs.row(tr.clip_row(i)).begin());
    tr.projected[tr.clip_row(i)] = true;
  }

  Tensor x = linear_rows(tr.projected_inputs, params.input_projection);
  for (std::size_t t = 0; t < T; ++t) {
    if (tr.projected[t]) continue;
    const Tensor& token = (tr.has_cls && t == 0) ? params.cls_token : params.mask_token;
    std::copy(token.values().begin(), token.values().end(), x.row(t).begin());
  }
  if (cfg.use_positional) {
    for (std::size_t t = 0; t < T; ++t) {
      auto row = x.row(t);
      auto pos = params.positional.row(t);
      for (std::size_t d = 0; d < D; ++d) row[d] += pos[d];
    }
  }

  const std::size_t H = cfg.heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(T);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const BlockParams& bp = params.blocks[l];
    BlockCache c;
    c.input = x;
    c.ln1_out = layer_norm(x, bp.ln1, c.ln1_xhat, c.ln1_rstd);
    c.query = linear_rows(c.ln1_out, bp.query);
    // The key bias adds q_i . b to a whole score row, which softmax cancels;
    // leaving it out makes that cancellation exact.
    c.key = matmul(c.ln1_out, bp.key.weight);
    c.value = linear_rows(c.ln1_out, bp.value);
    c.context = Tensor(T, D);
    c.attention.assign(H, Tensor(T, T));
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      Tensor& a = c.attention[h];
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += c.query(i, off + d) * c.key(j, off + d);
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          a(i, j) = std::exp(scores[j] - mx);
          total += a(i, j);
        }
        for (std::size_t j = 0; j < T; ++j) a(i, j) /= total;
        for (std::size_t j = 0; j < T; ++j) {
          const double w = a(i, j);
          for (std::size_t d = 0; d < dh; ++d) c.context(i, off + d) += w * c.value(j, off + d);
        }
      }
    }
    add_in_place(x, linear_rows(c.context, bp.output));
    c.mid = x;
    c.ln2_out = layer_norm(x, bp.ln2, c.ln2_xhat, c.ln2_rstd);
    c.pre_activation = linear_rows(c.ln2_out, bp.fc1);
    c.activation = zeros_like(c.pre_activation);
    for (std::size_t i = 0; i < c.activation.size(); ++i) c.activation[i] = gelu(c.pre_activation[i]);
    add_in_place(x, linear_rows(c.activation, bp.fc2));
    require_finite(x, l);
    tr.blocks.push_back(std::move(c));
  }

  tr.hidden = std::move(x);
  tr.logits = linear_rows(tr.hidden, params.head);
  tr.source = &params;
  tr.revision = params.revision;
  return tr;
}

// --- backward ------------------------------------------------------------------------

void backward_hidden(const TransformerParams& params, const ModelConfig& cfg,
                     const ForwardTrace& trace, const Tensor& d_hidden, TransformerParams& grads) {
  if (trace.source != &params || trace.revision != params.revision) {
    throw TraceError("trace was not produced by these parameters at their current revision");
  }
  if (trace.blocks.size() != cfg.layers || trace.hidden.empty()) {
    throw TraceError("trace is missing cached activations");
  }
  if (!d_hidden.same_shape(trace.hidden)) throw DimensionError("d_hidden shape mismatch");

  const std::size_t T = trace.tokens(), D = cfg.hidden_dim;
  const std::size_t H = cfg.heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor dx = d_hidden;

  for (std::size_t l = cfg.layers; l-- > 0;) {
    const BlockParams& bp = params.blocks[l];
    BlockParams& gb = grads.blocks[l];
    const BlockCache& c = trace.blocks[l];

    // x_out = mid + fc2(gelu(fc1(ln2(mid))))
    Tensor d_act = linear_rows_backward(c.activation, dx, bp.fc2, gb.fc2);
    Tensor d_pre = std::move(d_act);
    for (std::size_t i = 0; i < d_pre.size(); ++i) d_pre[i] *= gelu_derivative(c.pre_activation[i]);
    Tensor d_ln2 = linear_rows_backward(c.ln2_out, d_pre, bp.fc1, gb.fc1);
    Tensor d_mid = dx;
    add_in_place(d_mid, layer_norm_backward(d_ln2, c.ln2_xhat, c.ln2_rstd, bp.ln2, gb.ln2));

    // mid = input + output(attention(ln1(input)))
    Tensor d_context = linear_rows_backward(c.context, d_mid, bp.output, gb.output);
    Tensor d_query(T, D), d_key(T, D), d_value(T, D);
    std::vector<double> d_attn(T);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const Tensor& a = c.attention[h];
      for (std::size_t i = 0; i < T; ++i) {
        double row_dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += d_context(i, off + d) * c.value(j, off + d);
          d_attn[j] = s;
          row_dot += s * a(i, j);
          const double w = a(i, j);
          for (std::size_t d = 0; d < dh; ++d) d_value(j, off + d) += w * d_context(i, off + d);
        }
        for (std::size_t j = 0; j < T; ++j) {
          const double d_score = a(i, j) * (d_attn[j] - row_dot) * scale;
          if (d_score == 0.0) continue;
          for (std::size_t d = 0; d < dh; ++d) {
            d_query(i, off + d) += d_score * c.key(j, off + d);
            d_key(j, off + d) += d_score * c.query(i, off + d);
          }
        }
      }
    }
    Tensor d_ln1 = linear_rows_backward(c.ln1_out, d_query, bp.query, gb.query);
    matmul_tn_accumulate(c.ln1_out, d_key, gb.key.weight);
    add_in_place(d_ln1, matmul_nt(d_key, bp.key.weight));
    add_in_place(d_ln1, linear_rows_backward(c.ln1_out, d_value, bp.value, gb.value));
    dx = std::move(d_mid);
    add_in_place(dx, layer_norm_backward(d_ln1, c.ln1_xhat, c.ln1_rstd, bp.ln1, gb.ln1));
  }

  // Token construction.
  Tensor d_proj(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    auto g = dx.row(t);
    if (cfg.use_positional) {
      auto gp = grads.positional.row(t);
      for (std::size_t d = 0; d < D; ++d) gp[d] += g[d];
    }
    if (trace.projected[t]) {
      std::copy(g.begin(), g.end(), d_proj.row(t).begin());
    } else {
      Tensor& target = (trace.has_cls && t == 0) ? grads.cls_token : grads.mask_token;
      for (std::size_t d = 0; d < D; ++d) target[d] += g[d];
    }
  }
  matmul_tn_accumulate(trace.projected_inputs, d_proj, grads.input_projection.weight);
  for (std::size_t t = 0; t < T; ++t) {
    if (!trace.projected[t]) continue;
    for (std::size_t d = 0; d < D; ++d) grads.input_projection.bias[d] += d_proj(t, d);
  }
}

void backward(const TransformerParams& params, const ModelConfig& cfg, const ForwardTrace& trace,
              const Tensor& d_logits, TransformerParams& grads) {
  if (!d_logits.same_shape(trace.logits)) throw DimensionError("d_logits shape mismatch");
  if (trace.source != &params || trace.revision != params.revision) {
    throw TraceError("trace was not produced by these parameters at their current revision");
  }
  Tensor d_hidden = linear_rows_backward(trace.hidden, d_logits, params.head, grads.head);
  backward_hidden(params, cfg, trace, d_hidden, grads);
}

std::vector<double> pooled(const ForwardTrace& trace, const ModelConfig& cfg) {
  if (cfg.pooling == Pooling::cls) {
    if (!trace.has_cls) throw ConfigError("CLS pooling requires a prepended CLS token");
    const auto row = trace.hidden.row(0);
    return {row.begin(), row.end()};
  }
  std::vector<double> out(cfg.hidden_dim, 0.0);
  if (trace.num_clips == 0) throw InvalidInput("mean pooling over zero clips");
  for (std::size_t i = 0; i < trace.num_clips; ++i) {
    const auto row = trace.hidden.row(trace.clip_row(i));
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += row[d];
  }
  for (double& v : out) v /= static_cast<double>(trace.num_clips);
  return out;
}

void pooled_backward(const ForwardTrace& trace, const ModelConfig& cfg,
                     std::span<const double> d_pooled, Tensor& d_hidden) {
  if (cfg.pooling == Pooling::cls) {
    auto row = d_hidden.row(0);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] += d_pooled[d];
    return;
  }
  const double w = 1.0 / static_cast<double>(trace.num_clips);
  for (std::size_t i = 0; i < trace.num_clips; ++i) {
    auto row = d_hidden.row(trace.clip_row(i));
    for (std::size_t d = 0; d < row.size(); ++d) row[d] += w * d_pooled[d];
  }
}

}  // namespace stepmask
