// Loss, Adam, learning-rate and burn-in schedules, early stopping and the
// epoch loop.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqa/checkpoint.hpp"
#include "fqa/dataset.hpp"
#include "fqa/model.hpp"
#include "fqa/tensor.hpp"

namespace fqa {

class UndefinedLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr0 = 1e-3;
  double gamma = 0.8;
  std::size_t decay_every = 5;
  std::size_t min_epochs = 50;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;          // weight initialization
  std::uint64_t shuffle_seed = 1;  // epoch order, independent of init

  void validate() const {
    if (batch_size == 0) throw ConfigurationError("train.batch_size must be >= 1");
    if (patience < 1) throw ConfigurationError("train.patience must be >= 1");
    if (max_epochs == 0) throw ConfigurationError("train.max_epochs must be >= 1");
    if (!(lr0 > 0)) throw ConfigurationError("train.lr0 must be > 0");
    if (decay_every == 0) throw ConfigurationError("train.decay_every must be >= 1");
  }
};

/// Observation window used at inference: floor(2T/5).
inline std::size_t observed_frames(std::size_t T) { return 2 * T / 5; }

inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(epoch / cfg.decay_every));
}

/// Ground-truth frames fed during training at `epoch`: starts at T and
/// drops by one per epoch down to T_obs.
inline std::size_t burn_in_horizon(std::size_t epoch, std::size_t T, std::size_t T_obs) {
  return epoch >= T ? T_obs : std::max(T - epoch, T_obs);
}

// ---------------------------------------------------------------------------
// Loss

/// Sum of squared coordinate errors over rows with `valid` set, plus the
/// number of contributing rows.
inline std::pair<Tensor, std::size_t> masked_squared_error(const Tensor& pred, const Tensor& target,
                                                           const std::vector<std::uint8_t>& valid) {
  if (pred.shape() != target.shape() || pred.rank() != 2 || valid.size() != pred.dim(0)) {
    throw DimensionError("masked_squared_error: shapes " + to_string(pred.shape()) + " and " +
                         to_string(target.shape()));
  }
  std::size_t count = 0;
  for (auto v : valid) count += v ? 1 : 0;
  const Tensor diff = sub(pred, target);
  Tensor sq = mul(diff, diff);
  if (count != valid.size()) sq = mul_rows(sq, detail::row_mask(valid));
  return {sum(sq), count};
}

/// Mean squared error per coordinate over (agent, step) cells present at
/// both t and t+1, for steps t in [first_step, T-2] (0-based).
inline Tensor masked_mse_loss(std::span<const Tensor> predictions, const Batch& batch, std::size_t first_step) {
  Tensor total;
  std::size_t cells = 0;
  for (std::size_t t = first_step; t + 1 < batch.T && t < predictions.size(); ++t) {
    const auto m0 = detail::frame_mask(batch, t);
    auto valid = detail::frame_mask(batch, t + 1);
    for (std::size_t r = 0; r < valid.size(); ++r) valid[r] = valid[r] && m0[r];
    auto [s, n] = masked_squared_error(predictions[t], detail::frame_positions(batch, t + 1), valid);
    if (n == 0) continue;
    cells += n;
    total = total.defined() ? add(total, s) : s;
  }
  if (cells == 0) throw UndefinedLossError("masked_mse_loss: no valid cells");
  return scale(total, 1.0 / (2.0 * static_cast<double>(cells)));
}

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double g : p.tensor.node().grad)
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor w = params_[k].tensor;
      if (!w.has_grad()) continue;
      const auto& g = w.node().grad;
      auto x = w.mutable_data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
        const double mh = m_[k][i] / bc1;
        const double vh = v_[k][i] / bc2;
        x[i] -= lr * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.node().grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (double& g : p.tensor.node().grad) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best validation score. Stopping is allowed from `min_epochs`
/// on, once `patience` epochs have passed since max(best epoch, min_epochs).
class EarlyStopping {
 public:
  EarlyStopping(std::size_t min_epochs, std::size_t patience) : min_epochs_(min_epochs), patience_(patience) {}

  /// Records the score of `epoch`; returns true if it is a new best.
  bool update(std::size_t epoch, double score) {
    if (!has_best_ || score < best_score_) {
      best_score_ = score;
      best_epoch_ = epoch;
      has_best_ = true;
      return true;
    }
    return false;
  }

  bool should_stop(std::size_t epoch) const {
    if (!has_best_ || epoch < min_epochs_) return false;
    return epoch - std::max(best_epoch_, min_epochs_) >= patience_;
  }

  std::optional<std::size_t> best_epoch() const { return has_best_ ? std::optional(best_epoch_) : std::nullopt; }
  double best_score() const { return best_score_; }

 private:
  std::size_t min_epochs_, patience_;
  std::size_t best_epoch_ = 0;
  bool has_best_ = false;
  double best_score_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t burn_in = 0;
  double train_loss = 0.0;
  double val_mse = 0.0;
  double val_rmse = 0.0;
  std::size_t clipped_batches = 0;
};

enum class TrainStatus { Completed, EarlyStopped, Diverged };

struct TrainResult {
  std::vector<NamedArray> best_parameters;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  std::vector<EpochRecord> history;
  TrainStatus status = TrainStatus::Completed;
};

/// Masked MSE of a full inference rollout: ground truth for the first
/// floor(2T/5) frames, own predictions afterwards, scored on frames T_obs..T-1.
struct RolloutError {
  double sse = 0.0;
  std::size_t coords = 0;
};

inline RolloutError rollout_error(const Model& model, const Batch& batch) {
  const std::size_t T_obs = observed_frames(batch.T);
  const auto res = rollout(model, batch, {.teacher_frames = T_obs});
  RolloutError err;
  for (std::size_t t = T_obs - 1; t + 1 < batch.T; ++t) {
    const auto& pred = res.predictions[t].values();
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      if (!(batch.masks[r * batch.T + t] && batch.masks[r * batch.T + t + 1])) continue;
      for (int k = 0; k < 2; ++k) {
        const double e = pred[r * 2 + k] - batch.positions[(r * batch.T + t + 1) * 2 + k];
        err.sse += e * e;
        ++err.coords;
      }
    }
  }
  return err;
}

inline double validation_mse(const Model& model, std::span<const Scene> scenes, std::size_t batch_size) {
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RolloutError total;
  for (const auto& idx : batch_indices(scenes, order, batch_size)) {
    const auto e = rollout_error(model, make_batch(scenes, idx));
    total.sse += e.sse;
    total.coords += e.coords;
  }
  if (total.coords == 0) throw UndefinedLossError("validation set has no valid cells");
  return total.sse / static_cast<double>(total.coords);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `model` in place; on return the model holds the best-validation
/// parameters.
inline TrainResult train(Model& model, std::span<const Scene> train_set, std::span<const Scene> val_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                         std::ostream* log = nullptr) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw ConfigurationError("train and validation splits must be nonempty");
  auto params = model.parameters();
  Adam adam(params);
  EarlyStopping stopper(cfg.min_epochs, cfg.patience);
  std::mt19937_64 shuffle_rng(cfg.shuffle_seed);
  TrainResult result;
  result.best_parameters = snapshot(model);

  std::size_t T_max = 0;
  for (const auto& s : train_set) T_max = std::max(T_max, s.T);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at_epoch(cfg, epoch);
    rec.burn_in = burn_in_horizon(epoch, T_max, observed_frames(T_max));

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(shuffle_rng)]);
    }

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : batch_indices(train_set, order, cfg.batch_size)) {
      const Batch batch = make_batch(train_set, idx);
      const std::size_t burn = burn_in_horizon(epoch, batch.T, observed_frames(batch.T));
      if (params.empty()) {
        // Nothing learnable: evaluate the loss only.
        const auto res = rollout(model, batch, {.teacher_frames = burn});
        loss_sum += masked_mse_loss(res.predictions, batch, 1).item();
        ++batches;
        continue;
      }
      model.zero_grad();
      Tape tape;
      const auto res = rollout(model, batch, {.teacher_frames = burn});
      const Tensor loss = masked_mse_loss(res.predictions, batch, 1);
      tape.backward(loss);
      const double norm = clip_grad_norm(params, cfg.clip_norm);
      if (norm > cfg.clip_norm) {
        ++rec.clipped_batches;
        if (log) *log << "epoch " << epoch << ": clipped gradient norm " << norm << '\n';
      }
      adam.step(rec.lr);
      loss_sum += loss.item();
      ++batches;
    }
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    rec.val_mse = validation_mse(model, val_set, cfg.batch_size);
    rec.val_rmse = std::sqrt(rec.val_mse);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!std::isfinite(rec.val_mse)) {
      result.status = TrainStatus::Diverged;
      if (log) *log << "epoch " << epoch << ": validation loss is not finite, aborting\n";
      break;
    }
    if (stopper.update(epoch, rec.val_mse)) result.best_parameters = snapshot(model);
    if (stopper.should_stop(epoch)) {
      result.status = TrainStatus::EarlyStopped;
      break;
    }
  }
  result.best_epoch = stopper.best_epoch().value_or(0);
  result.best_val_mse = stopper.best_score();
  restore(model, result.best_parameters);
  return result;
}

}  // namespace fqa
