#include "stepmask/checkpoint.hpp"

#include <fstream>

#include "stepmask/binary_io.hpp"
#include "stepmask/errors.hpp"

namespace stepmask {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_config(std::ostream& out, const ModelConfig& cfg) {
  for (std::size_t v : {cfg.input_dim, cfg.hidden_dim, cfg.layers, cfg.heads, cfg.max_positions,
                        cfg.num_labels, cfg.num_tasks}) {
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  binary::put<double>(out, cfg.mlp_ratio);
  binary::put<double>(out, cfg.init_std);
  binary::put<std::uint32_t>(out, cfg.use_positional ? 1 : 0);
  binary::put<std::uint32_t>(out, cfg.pooling == Pooling::cls ? 0 : 1);
}

ModelConfig read_config(std::istream& in) {
  ModelConfig cfg;
  for (std::size_t* v : {&cfg.input_dim, &cfg.hidden_dim, &cfg.layers, &cfg.heads,
                         &cfg.max_positions, &cfg.num_labels, &cfg.num_tasks}) {
    *v = binary::get<std::uint32_t>(in, "model config");
  }
  cfg.mlp_ratio = binary::get<double>(in, "mlp_ratio");
  cfg.init_std = binary::get<double>(in, "init_std");
  cfg.use_positional = binary::get<std::uint32_t>(in, "use_positional") != 0;
  const auto pooling = binary::get<std::uint32_t>(in, "pooling");
  if (pooling > 1) throw ParseError("checkpoint: unknown pooling mode");
  cfg.pooling = pooling == 0 ? Pooling::cls : Pooling::mean;
  cfg.validate();
  return cfg;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelConfig& cfg, const TransformerParams& params) {
  check_shapes(params, cfg);
  binary::put_magic(out, "VTFM");
  binary::put<std::uint32_t>(out, kCheckpointVersion);
  write_config(out, cfg);
  for (const auto& [name, t] : named_arrays(params)) {
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t->storage().data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw InvalidInput("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  binary::expect_magic(in, "VTFM");
  if (binary::get<std::uint32_t>(in, "version") != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version");
  }
  Checkpoint ck;
  ck.config = read_config(in);
  ck.params = allocate_params(ck.config);
  for (auto& [name, t] : named_arrays(ck.params)) {
    const auto rank = binary::get<std::uint32_t>(in, "rank");
    if (rank != t->rank()) throw ParseError("checkpoint: rank mismatch for " + name);
    for (std::size_t d : t->shape()) {
      if (binary::get<std::uint32_t>(in, "dim") != d) {
        throw ParseError("checkpoint: shape mismatch for " + name);
      }
    }
    if (!in.read(reinterpret_cast<char*>(t->storage().data()),
                 static_cast<std::streamsize>(t->size() * sizeof(double)))) {
      throw ParseError("checkpoint: truncated data for " + name);
    }
  }
  return ck;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".json";
  return p;
}

std::string save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                            const TransformerParams& params, const nlohmann::json& provenance) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write checkpoint " + path.string());
    write_checkpoint(out, cfg, params);
  }
  const auto digest = params_digest(params);
  nlohmann::json side = {{"format", "VTFM"},
                         {"version", kCheckpointVersion},
                         {"model", cfg.to_json()},
                         {"params_digest", digest},
                         {"provenance", provenance}};
  std::ofstream out(sidecar_path(path));
  out << side.dump(2) << '\n';
  return digest;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  Checkpoint ck = read_checkpoint(in);
  std::ifstream side(sidecar_path(path));
  if (side) {
    try {
      side >> ck.sidecar;
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(sidecar_path(path).string() + ": " + e.what());
    }
  }
  return ck;
}

}  // namespace stepmask
