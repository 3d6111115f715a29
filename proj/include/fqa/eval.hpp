// Rollout RMSE evaluation.
//
// Ground truth is fed for the first floor(2T/5) frames; the model then rolls
// out on its own predictions and every valid (agent, frame, coordinate) cell
// of frames T_obs..T-1 contributes one squared error.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqa/dataset.hpp"
#include "fqa/model.hpp"
#include "fqa/training.hpp"

namespace fqa {

struct SceneError {
  std::string scene_id;
  double sse = 0.0;  // normalized units
  std::size_t coords = 0;

  double rmse() const { return coords ? std::sqrt(sse / static_cast<double>(coords)) : 0.0; }
};

struct EvalReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  double scale = 1.0;  // normalized -> original units
  double rmse = 0.0;   // original units
  double rmse_normalized = 0.0;
  std::size_t coords = 0;
  std::vector<SceneError> scenes;
};

/// Per-scene squared errors in normalized units. Scenes with no valid
/// predicted cell are reported with zero count.
inline std::vector<SceneError> scene_errors(const Model& model, std::span<const Scene> scenes,
                                            std::size_t batch_size = 32) {
  std::vector<SceneError> out(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) out[i].scene_id = scenes[i].scene_id;
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const auto& idx : batch_indices(scenes, order, batch_size)) {
    const Batch batch = make_batch(scenes, idx);
    const std::size_t T_obs = observed_frames(batch.T);
    if (T_obs == 0) continue;
    const auto res = rollout(model, batch, {.teacher_frames = T_obs});
    for (std::size_t t = T_obs - 1; t + 1 < batch.T; ++t) {
      const auto& pred = res.predictions[t].values();
      for (std::size_t r = 0; r < batch.rows(); ++r) {
        if (!(batch.masks[r * batch.T + t] && batch.masks[r * batch.T + t + 1])) continue;
        auto& se = out[batch.scene_index[r / batch.N]];
        for (int k = 0; k < 2; ++k) {
          const double e = pred[r * 2 + k] - batch.positions[(r * batch.T + t + 1) * 2 + k];
          se.sse += e * e;
          ++se.coords;
        }
      }
    }
  }
  return out;
}

/// Aggregates per-scene errors: sqrt(sum sse / sum coords).
inline double aggregate_rmse(std::span<const SceneError> scenes) {
  double sse = 0.0;
  std::size_t coords = 0;
  for (const auto& s : scenes) {
    sse += s.sse;
    coords += s.coords;
  }
  if (coords == 0) throw UndefinedLossError("no valid predicted cells to evaluate");
  return std::sqrt(sse / static_cast<double>(coords));
}

/// `scenes` must already be normalized with the transform whose scale is
/// `scale`.
inline EvalReport evaluate_rmse(const Model& model, std::span<const Scene> scenes, double scale = 1.0) {
  EvalReport rep;
  rep.variant = to_string(model.config().variant);
  rep.scale = scale;
  rep.scenes = scene_errors(model, scenes);
  rep.rmse_normalized = aggregate_rmse(rep.scenes);
  rep.rmse = rep.rmse_normalized * scale;
  for (const auto& s : rep.scenes) rep.coords += s.coords;
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : r.scenes) per.push_back({{"scene_id", s.scene_id}, {"rmse", s.rmse() * r.scale}, {"cells", s.coords}});
  return {{"variant", r.variant},
          {"seed", r.seed},
          {"split_seed", r.split_seed},
          {"rmse", r.rmse},
          {"rmse_normalized", r.rmse_normalized},
          {"scale", r.scale},
          {"cells", r.coords},
          {"scenes", per}};
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace fqa
