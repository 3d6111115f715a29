// Parameter checkpoints.
//
// JSON document:
//   {
//     "format": "fqa-checkpoint/1",
//     "variant": "fqa",
//     "config": {"hidden": 32, "decisions": 8, "key_dim": 4, "response_dim": 6, ...},
//     "normalization": {"cx": .., "cy": .., "scale": .., "hash": "<16 hex>"},
//     "meta": {"seed": .., "split_seed": .., "epochs": .., "best_epoch": ..},
//     "parameters": [{"name": "fc1.weight", "shape": [66, 48], "values": [...]}, ...]
//   }
// Doubles are written in shortest round-trip form, so loading restores every
// parameter bit-exactly.

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqa/dataset.hpp"
#include "fqa/model.hpp"

namespace fqa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

inline std::vector<NamedArray> snapshot(const Model& model) {
  std::vector<NamedArray> out;
  for (const auto& p : model.parameters()) out.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  return out;
}

inline void restore(Model& model, const std::vector<NamedArray>& arrays) {
  auto& params = model.parameters();
  if (arrays.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(arrays.size()) + " arrays, model expects " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    auto& p = params[i];
    if (arrays[i].name != p.name || arrays[i].shape != p.tensor.shape()) {
      throw CheckpointError("checkpoint array '" + arrays[i].name + "' " + to_string(arrays[i].shape) +
                            " does not match model parameter '" + p.name + "' " + to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(arrays[i].values.begin(), arrays[i].values.end(), dst.begin());
  }
}

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
};

struct Checkpoint {
  ModelConfig config;
  NormalizeTransform normalization;
  CheckpointMeta meta;
  std::vector<NamedArray> parameters;

  Model build() const {
    Model m(config, 0);
    restore(m, parameters);
    return m;
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)},   {"hidden", c.hidden},
          {"decisions", c.decisions},          {"key_dim", c.key_dim},
          {"response_dim", c.response_dim},    {"attention", c.attention},
          {"fc1_out", c.fc1_out},              {"fc3_out", c.fc3_out},
          {"response_hidden", c.response_hidden}, {"vlstm_embed", c.vlstm_embed},
          {"vlstm_hidden", c.vlstm_hidden},    {"d_thresh", c.d_thresh}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.hidden = j.at("hidden").get<std::size_t>();
  c.decisions = j.at("decisions").get<std::size_t>();
  c.key_dim = j.at("key_dim").get<std::size_t>();
  c.response_dim = j.at("response_dim").get<std::size_t>();
  c.attention = j.at("attention").get<std::size_t>();
  c.fc1_out = j.at("fc1_out").get<std::size_t>();
  c.fc3_out = j.at("fc3_out").get<std::size_t>();
  c.response_hidden = j.at("response_hidden").get<std::size_t>();
  c.vlstm_embed = j.at("vlstm_embed").get<std::size_t>();
  c.vlstm_hidden = j.at("vlstm_hidden").get<std::size_t>();
  c.d_thresh = j.at("d_thresh").get<double>();
  return c;
}

inline std::string checkpoint_to_string(const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "fqa-checkpoint/1";
  j["variant"] = to_string(ck.config.variant);
  j["config"] = to_json(ck.config);
  j["normalization"] = {{"cx", ck.normalization.cx},
                        {"cy", ck.normalization.cy},
                        {"scale", ck.normalization.scale},
                        {"hash", ck.normalization.hash()}};
  j["meta"] = {{"seed", ck.meta.seed},
               {"split_seed", ck.meta.split_seed},
               {"epochs", ck.meta.epochs},
               {"best_epoch", ck.meta.best_epoch}};
  auto& arr = j["parameters"] = nlohmann::json::array();
  for (const auto& p : ck.parameters) arr.push_back({{"name", p.name}, {"shape", p.shape}, {"values", p.values}});
  return j.dump(1);
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "fqa-checkpoint/1") throw CheckpointError("unknown checkpoint format");
    Checkpoint ck;
    ck.config = model_config_from_json(j.at("config"));
    const auto& n = j.at("normalization");
    ck.normalization = {n.at("cx").get<double>(), n.at("cy").get<double>(), n.at("scale").get<double>()};
    if (n.contains("hash") && n.at("hash").get<std::string>() != ck.normalization.hash()) {
      throw CheckpointError("normalization hash does not match its parameters");
    }
    const auto& m = j.at("meta");
    ck.meta = {m.at("seed").get<std::uint64_t>(), m.at("split_seed").get<std::uint64_t>(),
               m.at("epochs").get<std::size_t>(), m.at("best_epoch").get<std::size_t>()};
    for (const auto& p : j.at("parameters")) {
      NamedArray a{p.at("name").get<std::string>(), p.at("shape").get<Shape>(),
                   p.at("values").get<std::vector<double>>()};
      if (numel_of(a.shape) != a.values.size()) throw CheckpointError("array '" + a.name + "' has wrong size");
      ck.parameters.push_back(std::move(a));
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_string(ck) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace fqa
