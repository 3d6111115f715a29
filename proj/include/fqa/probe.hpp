// Decision -> collision probe.
//
// Decision trajectories are recorded from a trained model, then a classifier
// that sees only those trajectories predicts agent-agent collision events.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqa/dataset.hpp"
#include "fqa/model.hpp"
#include "fqa/scene.hpp"
#include "fqa/training.hpp"

namespace fqa {

class ProbeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decision values of one scene: n values per directed edge (s, r) per step
/// t = 0..T-2, where step t is the decision made at frame t.
struct SceneDecisions {
  std::string scene_id;
  std::size_t N = 0, steps = 0, n = 0;
  std::vector<double> values;         // [((s*N + r)*steps + t)*n + k]
  std::vector<std::uint8_t> present;  // [(s*N + r)*steps + t]

  bool has(std::size_t s, std::size_t r, std::size_t t) const { return present[(s * N + r) * steps + t] != 0; }
  std::span<const double> at(std::size_t s, std::size_t r, std::size_t t) const {
    return std::span(values).subspan(((s * N + r) * steps + t) * n, n);
  }
};

/// With `teacher_forced` every frame comes from ground truth; otherwise the
/// inference rollout from floor(2T/5) is used.
inline std::vector<SceneDecisions> extract_decisions(const Model& model, std::span<const Scene> scenes,
                                                     bool teacher_forced = true, std::size_t batch_size = 32) {
  if (!has_decisions(model.config().variant)) {
    throw ProbeError(std::string("variant '") + to_string(model.config().variant) + "' has no decisions");
  }
  const std::size_t n = model.config().total_decisions();
  std::vector<SceneDecisions> out(scenes.size());
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const auto& idx : batch_indices(scenes, order, batch_size)) {
    const Batch batch = make_batch(scenes, idx);
    const std::size_t steps = batch.T - 1;
    for (std::size_t b = 0; b < batch.B; ++b) {
      const Scene& s = scenes[batch.scene_index[b]];
      auto& d = out[batch.scene_index[b]];
      d.scene_id = s.scene_id;
      d.N = s.num_agents();
      d.steps = steps;
      d.n = n;
      d.values.assign(d.N * d.N * steps * n, 0.0);
      d.present.assign(d.N * d.N * steps, 0);
    }
    RolloutOptions opts;
    opts.teacher_frames = teacher_forced ? batch.T : observed_frames(batch.T);
    opts.record_decisions = true;
    const auto res = rollout(model, batch, opts);
    for (const auto& step : res.decisions) {
      for (std::size_t e = 0; e < step.edges.size(); ++e) {
        const auto [snd, rcv] = step.edges[e];
        const std::size_t b = snd / batch.N;
        auto& d = out[batch.scene_index[b]];
        const std::size_t s = snd % batch.N, r = rcv % batch.N;
        if (s >= d.N || r >= d.N) continue;
        d.present[(s * d.N + r) * steps + step.t] = 1;
        std::copy_n(step.values.begin() + static_cast<std::ptrdiff_t>(e * n), n,
                    d.values.begin() + static_cast<std::ptrdiff_t>(((s * d.N + r) * steps + step.t) * n));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probe dataset

struct ProbeRow {
  std::size_t scene = 0, sender = 0, receiver = 0, t = 0;
  int label = 0;
  std::vector<double> window;  // window x n values, oldest step first
};

struct ProbeDataset {
  std::size_t n = 0, window = 0;
  std::vector<ProbeRow> rows;
};

struct ProbeOptions {
  std::size_t window = 4;
  std::size_t negatives_per_positive = 5;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
};

/// Rows are directed edges between mobile agents with decisions at each of
/// the `window` steps ending at t. A row is positive when an agent-agent event
/// between the pair happens from frame t to t+1.
inline ProbeDataset build_probe_dataset(std::span<const SceneDecisions> decisions,
                                        std::span<const std::vector<bool>> mobile,
                                        std::span<const EventLog> events, const ProbeOptions& opts) {
  if (mobile.size() != decisions.size() || events.size() != decisions.size()) {
    throw std::invalid_argument("build_probe_dataset: decisions, mobility flags and events must align");
  }
  if (opts.window == 0) throw std::invalid_argument("build_probe_dataset: window must be positive");
  ProbeDataset ds;
  ds.window = opts.window;
  std::vector<ProbeRow> pos, neg;
  for (std::size_t sc = 0; sc < decisions.size(); ++sc) {
    const auto& d = decisions[sc];
    if (ds.n == 0) ds.n = d.n;
    if (d.n != ds.n) throw std::invalid_argument("build_probe_dataset: inconsistent decision width");
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> hits;  // (t, lo, hi)
    for (const auto& ev : events[sc].events) {
      if (ev.kind != EventKind::AgentAgent || ev.t < 1 || ev.j < 0) continue;
      const auto i = static_cast<std::size_t>(ev.i), j = static_cast<std::size_t>(ev.j);
      hits.insert({static_cast<std::size_t>(ev.t) - 1, std::min(i, j), std::max(i, j)});
    }
    for (std::size_t s = 0; s < d.N; ++s)
      for (std::size_t r = 0; r < d.N; ++r) {
        if (s == r || !mobile[sc][s] || !mobile[sc][r]) continue;
        for (std::size_t t = opts.window - 1; t < d.steps; ++t) {
          bool ok = true;
          for (std::size_t u = t + 1 - opts.window; u <= t && ok; ++u) ok = d.has(s, r, u);
          if (!ok) continue;
          ProbeRow row{sc, s, r, t, hits.count({t, std::min(s, r), std::max(s, r)}) ? 1 : 0, {}};
          for (std::size_t u = t + 1 - opts.window; u <= t; ++u) {
            const auto v = d.at(s, r, u);
            row.window.insert(row.window.end(), v.begin(), v.end());
          }
          (row.label ? pos : neg).push_back(std::move(row));
        }
      }
  }
  std::mt19937_64 rng(opts.seed);
  std::shuffle(neg.begin(), neg.end(), rng);
  if (!pos.empty()) neg.resize(std::min(neg.size(), pos.size() * opts.negatives_per_positive));
  ds.rows = std::move(pos);
  ds.rows.insert(ds.rows.end(), std::make_move_iterator(neg.begin()), std::make_move_iterator(neg.end()));
  std::sort(ds.rows.begin(), ds.rows.end(), [](const ProbeRow& a, const ProbeRow& b) {
    return std::tie(a.scene, a.t, a.sender, a.receiver) < std::tie(b.scene, b.t, b.sender, b.receiver);
  });
  return ds;
}

struct ProbeSplit {
  std::vector<std::size_t> train, test;  // row indices
};

/// Splits rows by scene so overlapping windows never straddle the split.
inline ProbeSplit split_by_scene(const ProbeDataset& ds, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> scenes;
  for (const auto& r : ds.rows) scenes.push_back(r.scene);
  std::sort(scenes.begin(), scenes.end());
  scenes.erase(std::unique(scenes.begin(), scenes.end()), scenes.end());
  std::mt19937_64 rng(seed);
  std::shuffle(scenes.begin(), scenes.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::round(train_fraction * static_cast<double>(scenes.size())));
  std::set<std::size_t> train_scenes(scenes.begin(), scenes.begin() + static_cast<std::ptrdiff_t>(n_train));
  ProbeSplit sp;
  for (std::size_t i = 0; i < ds.rows.size(); ++i) (train_scenes.count(ds.rows[i].scene) ? sp.train : sp.test).push_back(i);
  return sp;
}

// ---------------------------------------------------------------------------
// Metrics

/// Area under the ROC curve via the Mann-Whitney rank statistic (ties get
/// midranks).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) {
        rank_sum += mid;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ProbeError("auroc needs both classes");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

/// Trapezoidal integral of the ROC curve swept over distinct thresholds.
inline double auroc_trapezoid(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double P = 0, N = 0;
  for (int l : labels) (l ? P : N) += 1;
  if (P == 0 || N == 0) throw ProbeError("auroc needs both classes");
  double tp = 0, fp = 0, area = 0, prev_tpr = 0, prev_fpr = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    const double tpr = tp / P, fpr = fp / N;
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2;
    prev_tpr = tpr;
    prev_fpr = fpr;
    i = j;
  }
  return area;
}

inline double accuracy(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5) {
  if (probs.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) ok += ((probs[i] >= threshold) == (labels[i] != 0)) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------
// Classifiers

inline void require_both_classes(std::span<const int> labels, const char* what) {
  bool p = false, n = false;
  for (int l : labels) (l ? p : n) = true;
  if (!(p && n)) throw ProbeError(std::string(what) + " contains a single class");
}

/// L2-regularized logistic regression on standardized features, fitted by
/// full-batch gradient descent.
class LogisticProbe {
 public:
  struct Options {
    std::size_t iterations = 2000;
    double learning_rate = 0.5;
    double l2 = 1e-4;
  };

  LogisticProbe() = default;
  explicit LogisticProbe(Options o) : opts_(o) {}

  void fit(const std::vector<std::vector<double>>& x, std::span<const int> y) {
    require_both_classes(y, "probe training data");
    const std::size_t n = x.size(), d = x.front().size();
    mean_.assign(d, 0.0);
    sd_.assign(d, 0.0);
    for (const auto& r : x)
      for (std::size_t k = 0; k < d; ++k) mean_[k] += r[k] / static_cast<double>(n);
    for (const auto& r : x)
      for (std::size_t k = 0; k < d; ++k) sd_[k] += (r[k] - mean_[k]) * (r[k] - mean_[k]) / static_cast<double>(n);
    for (auto& s : sd_) s = s > 1e-24 ? std::sqrt(s) : 1.0;
    std::vector<std::vector<double>> z(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) z[i][k] = (x[i][k] - mean_[k]) / sd_[k];
    w_.assign(d, 0.0);
    b_ = 0.0;
    std::vector<double> gw(d);
    for (std::size_t it = 0; it < opts_.iterations; ++it) {
      std::fill(gw.begin(), gw.end(), 0.0);
      double gb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double err = logistic(score(z[i])) - y[i];
        for (std::size_t k = 0; k < d; ++k) gw[k] += err * z[i][k];
        gb += err;
      }
      for (std::size_t k = 0; k < d; ++k) w_[k] -= opts_.learning_rate * (gw[k] / static_cast<double>(n) + opts_.l2 * w_[k]);
      b_ -= opts_.learning_rate * gb / static_cast<double>(n);
    }
  }

  double predict(std::span<const double> x) const {
    std::vector<double> z(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) z[k] = (x[k] - mean_[k]) / sd_[k];
    return logistic(score(z));
  }

 private:
  static double logistic(double v) { return v >= 0 ? 1 / (1 + std::exp(-v)) : std::exp(v) / (1 + std::exp(v)); }
  double score(std::span<const double> z) const {
    double s = b_;
    for (std::size_t k = 0; k < z.size(); ++k) s += w_[k] * z[k];
    return s;
  }

  Options opts_;
  std::vector<double> mean_, sd_, w_;
  double b_ = 0.0;
};

/// A small LSTM over the decision sequence with a logistic head.
class RecurrentProbe {
 public:
  struct Options {
    std::size_t hidden = 8;
    std::size_t iterations = 400;
    double learning_rate = 1e-2;
    std::uint64_t seed = 0;
  };

  RecurrentProbe(std::size_t n, Options o) : opts_(o), n_(n) {
    std::mt19937_64 rng(o.seed);
    auto init = [&](std::size_t in, std::size_t out) {
      std::uniform_real_distribution<double> u(-1 / std::sqrt(double(in)), 1 / std::sqrt(double(in)));
      std::vector<double> v(in * out);
      for (auto& x : v) x = u(rng);
      return Tensor::parameter({in, out}, std::move(v));
    };
    cell_.hidden = o.hidden;
    cell_.gates = {init(n + o.hidden, 4 * o.hidden), Tensor::parameter({4 * o.hidden}, std::vector<double>(4 * o.hidden, 0.0))};
    head_w_ = init(o.hidden, 1);
    head_b_ = Tensor::parameter({1}, {0.0});
  }

  /// x rows hold `steps` consecutive n-vectors, oldest first.
  void fit(const std::vector<std::vector<double>>& x, std::span<const int> y) {
    require_both_classes(y, "probe training data");
    std::vector<NamedTensor> params{{"w", cell_.gates.weight}, {"b", cell_.gates.bias}, {"hw", head_w_}, {"hb", head_b_}};
    Adam adam(params);
    std::vector<double> yv(y.begin(), y.end());
    const Tensor target = Tensor::constant({y.size(), 1}, yv);
    for (std::size_t it = 0; it < opts_.iterations; ++it) {
      for (auto& p : params) p.tensor.zero_grad();
      Tape tape;
      const Tensor z = logits(x);
      const Tensor loss = mean(sub(softplus(z), mul(target, z)));
      tape.backward(loss);
      adam.step(opts_.learning_rate);
    }
  }

  std::vector<double> predict(const std::vector<std::vector<double>>& x) const {
    const Tensor p = sigmoid(logits(x));
    return p.values();
  }

 private:
  Tensor logits(const std::vector<std::vector<double>>& x) const {
    const std::size_t B = x.size(), steps = x.front().size() / n_;
    State st{Tensor::zeros({B, opts_.hidden}), Tensor::zeros({B, opts_.hidden})};
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<double> v(B * n_);
      for (std::size_t i = 0; i < B; ++i) std::copy_n(x[i].begin() + static_cast<std::ptrdiff_t>(t * n_), n_, v.begin() + static_cast<std::ptrdiff_t>(i * n_));
      auto [h, c] = cell_(Tensor::constant({B, n_}, std::move(v)), st.h, st.c);
      st = {h, c};
    }
    return affine(st.h, head_w_, head_b_);
  }

  Options opts_;
  std::size_t n_;
  LstmCell cell_;
  Tensor head_w_, head_b_;
};

// ---------------------------------------------------------------------------
// Probe protocol

struct ProbeResult {
  std::string mode;  // "tau=1", "tau=2", "tau=3", "recurrent"
  std::size_t tau = 0;
  double accuracy = 0.0, auroc = 0.0;
  std::size_t train_rows = 0, test_rows = 0, test_positives = 0;
};

struct ProbeReport {
  std::string variant;
  std::string decision_source;
  std::size_t n = 0, rows = 0, positives = 0;
  std::vector<ProbeResult> results;
  std::vector<double> control_auroc;  // tau=1 logistic probe on shuffled labels
  double control_auroc_mean = 0.0;
};

namespace detail {

inline std::vector<std::vector<double>> last_steps(const ProbeDataset& ds, std::span<const std::size_t> idx,
                                                   std::size_t tau) {
  std::vector<std::vector<double>> x;
  for (auto i : idx) {
    const auto& w = ds.rows[i].window;
    x.emplace_back(w.end() - static_cast<std::ptrdiff_t>(tau * ds.n), w.end());
  }
  return x;
}

inline std::vector<int> labels_of(const ProbeDataset& ds, std::span<const std::size_t> idx) {
  std::vector<int> y;
  for (auto i : idx) y.push_back(ds.rows[i].label);
  return y;
}

inline ProbeResult score_result(std::string mode, std::size_t tau, std::span<const double> probs,
                                std::span<const int> y, std::size_t train_rows) {
  ProbeResult r{std::move(mode), tau, accuracy(probs, y), auroc(probs, y), train_rows, y.size(), 0};
  for (int l : y) r.test_positives += l ? 1 : 0;
  return r;
}

}  // namespace detail

inline ProbeResult logistic_probe(const ProbeDataset& ds, const ProbeSplit& sp, std::size_t tau) {
  if (tau == 0 || tau > ds.window) throw std::invalid_argument("probe horizon must be in [1, window]");
  const auto xtr = detail::last_steps(ds, sp.train, tau), xte = detail::last_steps(ds, sp.test, tau);
  const auto ytr = detail::labels_of(ds, sp.train), yte = detail::labels_of(ds, sp.test);
  require_both_classes(yte, "probe test data");
  LogisticProbe probe;
  probe.fit(xtr, ytr);
  std::vector<double> p;
  for (const auto& r : xte) p.push_back(probe.predict(r));
  return detail::score_result("tau=" + std::to_string(tau), tau, p, yte, xtr.size());
}

inline ProbeResult recurrent_probe(const ProbeDataset& ds, const ProbeSplit& sp, std::uint64_t seed) {
  const auto xtr = detail::last_steps(ds, sp.train, ds.window), xte = detail::last_steps(ds, sp.test, ds.window);
  const auto ytr = detail::labels_of(ds, sp.train), yte = detail::labels_of(ds, sp.test);
  require_both_classes(yte, "probe test data");
  RecurrentProbe probe(ds.n, {.seed = seed});
  probe.fit(xtr, ytr);
  const auto p = probe.predict(xte);
  return detail::score_result("recurrent", ds.window, p, yte, xtr.size());
}

/// Fits tau = 1..3 logistic probes, the recurrent probe, and `shuffles`
/// label-shuffled tau = 1 controls.
inline ProbeReport run_probe(const ProbeDataset& ds, const ProbeOptions& opts, std::size_t shuffles = 5) {
  ProbeReport rep;
  rep.n = ds.n;
  rep.rows = ds.rows.size();
  for (const auto& r : ds.rows) rep.positives += r.label ? 1 : 0;
  std::vector<int> all;
  for (const auto& r : ds.rows) all.push_back(r.label);
  require_both_classes(all, "probe data");
  const auto sp = split_by_scene(ds, opts.train_fraction, opts.seed);
  for (std::size_t tau = 1; tau <= std::min<std::size_t>(3, ds.window); ++tau)
    rep.results.push_back(logistic_probe(ds, sp, tau));
  rep.results.push_back(recurrent_probe(ds, sp, opts.seed));

  std::mt19937_64 rng(opts.seed ^ 0x5eedULL);
  for (std::size_t k = 0; k < shuffles; ++k) {
    ProbeDataset shuffled = ds;
    std::vector<int> labels = all;
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < labels.size(); ++i) shuffled.rows[i].label = labels[i];
    rep.control_auroc.push_back(logistic_probe(shuffled, sp, 1).auroc);
  }
  if (!rep.control_auroc.empty())
    rep.control_auroc_mean = std::accumulate(rep.control_auroc.begin(), rep.control_auroc.end(), 0.0) /
                             static_cast<double>(rep.control_auroc.size());
  return rep;
}

inline nlohmann::json to_json(const ProbeReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : r.results)
    rows.push_back({{"mode", x.mode},
                    {"tau", x.tau},
                    {"accuracy", x.accuracy},
                    {"auroc", x.auroc},
                    {"train_rows", x.train_rows},
                    {"test_rows", x.test_rows},
                    {"test_positives", x.test_positives}});
  return {{"variant", r.variant},
          {"decision_source", r.decision_source},
          {"decisions_per_edge", r.n},
          {"rows", r.rows},
          {"positives", r.positives},
          {"results", rows},
          {"shuffled_control", {{"auroc", r.control_auroc}, {"auroc_mean", r.control_auroc_mean}}}};
}

}  // namespace fqa
