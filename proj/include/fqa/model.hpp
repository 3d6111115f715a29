// Fuzzy Query Attention trajectory predictor, its ablations, and the vanilla
// LSTM baseline.
//
// All models operate on a flattened batch: R = B*N agent rows, with agents of
// one scene occupying a contiguous block of N rows. Edges never cross scene
// blocks. Each step consumes positions at t (and t-1) and predicts t+1 as
//
//   p(t+1) = p(t) + v(t) + dv(t),    v(t) = p(t) - p(t-1)
//
// where dv is the learned velocity correction.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fqa/dataset.hpp"
#include "fqa/tensor.hpp"

namespace fqa {

class ConfigurationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Variant { Fqa, Inert, NoIntr, NoDec, Dce, Hk, Vlstm };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::Fqa: return "fqa";
    case Variant::Inert: return "inert";
    case Variant::NoIntr: return "nointr";
    case Variant::NoDec: return "nodec";
    case Variant::Dce: return "dce";
    case Variant::Hk: return "hk";
    case Variant::Vlstm: return "vlstm";
  }
  return "?";
}

inline Variant parse_variant(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s.rfind("fqa_", 0) == 0) s = s.substr(4);
  if (s == "fqa") return Variant::Fqa;
  if (s == "inert") return Variant::Inert;
  if (s == "nointr" || s == "noint") return Variant::NoIntr;
  if (s == "nodec") return Variant::NoDec;
  if (s == "dce") return Variant::Dce;
  if (s == "hk") return Variant::Hk;
  if (s == "vlstm") return Variant::Vlstm;
  throw ConfigurationError("unknown variant '" + s + "' (expected fqa, inert, nointr, nodec, dce, hk, vlstm)");
}

/// True for variants whose forward pass produces fuzzy decisions.
inline bool has_decisions(Variant v) {
  return v == Variant::Fqa || v == Variant::Dce || v == Variant::Hk;
}

struct ModelConfig {
  Variant variant = Variant::Fqa;
  std::size_t hidden = 32;        // LSTM state
  std::size_t decisions = 8;      // n
  std::size_t key_dim = 4;        // d
  std::size_t response_dim = 6;   // d_v
  std::size_t attention = 32;     // width of a_i
  std::size_t fc1_out = 48, fc3_out = 16, response_hidden = 33;
  std::size_t vlstm_embed = 32, vlstm_hidden = 64;
  double d_thresh = 0.5;

  /// Decisions including the fixed approach decision of the hk variant.
  std::size_t total_decisions() const { return decisions + (variant == Variant::Hk ? 1 : 0); }
  std::size_t feature_width() const { return 4 * 2 + 4 * hidden; }
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  Tensor operator()(const Tensor& x) const { return affine(x, weight, bias); }
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
  std::size_t num_parameters() const { return weight.numel() + bias.numel(); }
};

/// Gate layout of the fused projection: input, forget, candidate, output.
struct LstmCell {
  Linear gates;  // (input + hidden) -> 4*hidden
  std::size_t hidden = 0;

  /// Returns (h, c).
  std::pair<Tensor, Tensor> operator()(const Tensor& x, const Tensor& h, const Tensor& c) const {
    const Tensor z = gates(concat({x, h}, 1));
    const std::size_t H = hidden;
    const Tensor i = sigmoid(slice_last(z, 0, H));
    const Tensor f = sigmoid(slice_last(z, H, 2 * H));
    const Tensor g = tanh(slice_last(z, 2 * H, 3 * H));
    const Tensor o = sigmoid(slice_last(z, 3 * H, 4 * H));
    const Tensor c_next = add(mul(f, c), mul(i, g));
    return {mul(o, tanh(c_next)), c_next};
  }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct State {
  Tensor h, c;
};

struct StepInput {
  Tensor pos;   // R x 2, zero on masked rows
  Tensor prev;  // R x 2, positions at t-1 (zero where absent)
  std::vector<std::uint8_t> present, present_prev;
  std::size_t agents_per_scene = 0;
};

struct StepOptions {
  /// Replaces the decisions by constants holding their forward values.
  bool freeze_decisions = false;
  /// Substitutes the (detached) key/query input features.
  const Tensor* kq_features_override = nullptr;
};

struct StepOutput {
  Tensor next;  // R x 2 predicted positions at t+1 (zero on masked rows)
  State state;
  EdgeSet edges;
  Tensor decisions;    // E x total_decisions (decision variants only)
  Tensor kq_features;  // E x feature_width, detached
};

namespace detail {

inline Tensor row_mask(const std::vector<std::uint8_t>& m) {
  std::vector<double> v(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0 : 0.0;
  return Tensor::constant({m.size()}, std::move(v));
}

/// m ? a : b row-wise, with m a constant 0/1 row mask.
inline Tensor blend_rows(const Tensor& m, const Tensor& a, const Tensor& b) {
  return add(mul_rows(a, m), mul_rows(b, one_minus(m)));
}

inline bool all_set(const std::vector<std::uint8_t>& m) {
  for (auto x : m)
    if (!x) return false;
  return true;
}

}  // namespace detail

/// D * V_yes + (1 - D) * V_no, with D [E x n] broadcast over the trailing
/// response dimension of V [E x n x dv].
inline Tensor fuzzy_if_else(const Tensor& decisions, const Tensor& yes, const Tensor& no) {
  return add(mul_rows(yes, decisions), mul_rows(no, one_minus(decisions)));
}

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    std::mt19937_64 rng(seed);
    const auto& c = cfg_;
    const std::size_t H = c.hidden;
    if (c.variant == Variant::Vlstm) {
      embed_ = make_linear("vlstm.embed", 2, c.vlstm_embed, rng);
      lstm_ = make_lstm("vlstm.lstm", c.vlstm_embed, c.vlstm_hidden, rng);
      out_ = make_linear("vlstm.out", c.vlstm_hidden, 2, rng);
      return;
    }
    if (c.variant == Variant::Inert) return;  // no learnable influence
    lstm_ = make_lstm("lstm", 2, H, rng);
    fc_[1] = make_linear("fc1", 2 + H + c.attention, c.fc1_out, rng);
    fc_[2] = make_linear("fc2", c.fc1_out, H, rng);
    fc_[3] = make_linear("fc3", H, c.fc3_out, rng);
    fc_[4] = make_linear("fc4", c.fc3_out, 2, rng);
    if (c.variant == Variant::NoIntr) return;
    const std::size_t nd = c.decisions * c.key_dim;
    const std::size_t nv = c.total_decisions() * c.response_dim;
    if (c.variant == Variant::NoDec) {
      const std::size_t h = nodec_hidden(c);
      nodec_in_ = make_linear("nodec.fc_a", c.feature_width(), h, rng);
      nodec_out_ = make_linear("nodec.fc_b", h, c.decisions * c.response_dim, rng);
    } else {
      fc_[5] = make_linear("fc5", c.feature_width(), nd, rng);
      fc_[6] = make_linear("fc6", c.feature_width(), nd, rng);
      fc_[7] = make_linear("fc7", 2 + H, c.response_hidden, rng);
      fc_[8] = make_linear("fc8", c.response_hidden, nv, rng);
      fc_[9] = make_linear("fc9", 2 + H, c.response_hidden, rng);
      fc_[10] = make_linear("fc10", c.response_hidden, nv, rng);
      bias_B_ = Tensor::parameter({c.decisions}, std::vector<double>(c.decisions, 0.0));
      params_.push_back({"B", bias_B_});
    }
    const std::size_t v_width = c.variant == Variant::NoDec ? c.decisions * c.response_dim : nv;
    fc_[11] = make_linear("fc11", v_width, c.attention, rng);
    fc_[12] = make_linear("fc12", c.attention, c.attention, rng);
  }

  /// Parameter count of the decision block (fc5..fc10 and B) for `cfg`.
  static std::size_t decision_block_parameters(const ModelConfig& c) {
    const std::size_t F = c.feature_width(), nd = c.decisions * c.key_dim;
    const std::size_t nv = c.decisions * c.response_dim, rin = 2 + c.hidden, rh = c.response_hidden;
    return 2 * (F * nd + nd) + c.decisions + 2 * (rin * rh + rh + rh * nv + nv);
  }

  /// Hidden width of the no-decision replacement closest in parameter count.
  static std::size_t nodec_hidden(const ModelConfig& c) {
    const double target = static_cast<double>(decision_block_parameters(c));
    const double out = static_cast<double>(c.decisions * c.response_dim);
    const double per_unit = static_cast<double>(c.feature_width()) + 1.0 + out;
    return static_cast<std::size_t>(std::llround((target - out) / per_unit));
  }

  const ModelConfig& config() const { return cfg_; }
  Variant variant() const { return cfg_.variant; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  State initial_state(std::size_t rows) const {
    const std::size_t H = cfg_.variant == Variant::Vlstm ? cfg_.vlstm_hidden : cfg_.hidden;
    return {Tensor::zeros({rows, H}), Tensor::zeros({rows, H})};
  }

  StepOutput step(const StepInput& in, const State& state, const StepOptions& opts = {}) const {
    const std::size_t R = in.pos.dim(0);
    if (in.present.size() != R || in.present_prev.size() != R || in.agents_per_scene == 0 ||
        R % in.agents_per_scene != 0) {
      throw DimensionError("step: inconsistent row layout");
    }
    std::vector<std::uint8_t> moving(R);
    for (std::size_t i = 0; i < R; ++i) moving[i] = in.present[i] && in.present_prev[i];
    const Tensor m = detail::row_mask(in.present);
    const bool everyone = detail::all_set(in.present);
    const Tensor p = everyone ? in.pos : mul_rows(in.pos, m);
    const Tensor vel = mul_rows(sub(p, in.prev), detail::row_mask(moving));

    StepOutput out;
    if (cfg_.variant == Variant::Inert) {
      out.next = everyone ? add(p, vel) : mul_rows(add(p, vel), m);
      out.state = state;
      return out;
    }

    if (cfg_.variant == Variant::Vlstm) {
      auto [h, c] = lstm_(relu(embed_(p)), state.h, state.c);
      const Tensor next = add(add(p, vel), out_(h));
      out.next = everyone ? next : mul_rows(next, m);
      out.state = everyone ? State{h, c}
                           : State{detail::blend_rows(m, h, state.h), detail::blend_rows(m, c, state.c)};
      return out;
    }

    auto [h_tilde, c_next] = lstm_(p, state.h, state.c);
    if (!everyone) {
      h_tilde = detail::blend_rows(m, h_tilde, state.h);
      c_next = detail::blend_rows(m, c_next, state.c);
    }

    Tensor attention;
    if (cfg_.variant == Variant::NoIntr) {
      attention = Tensor::zeros({R, cfg_.attention});
    } else {
      out.edges = batch_edges(p, in.present, in.agents_per_scene);
      attention = interact(p, vel, h_tilde, out, R, opts);
    }

    const Tensor h = fc_[2](relu(fc_[1](concat({p, h_tilde, attention}, 1))));
    const Tensor dv = fc_[4](relu(fc_[3](h)));
    const Tensor next = add(add(p, vel), dv);
    out.next = everyone ? next : mul_rows(next, m);
    out.state = everyone ? State{h, c_next} : State{detail::blend_rows(m, h, state.h), c_next};
    return out;
  }

  EdgeSet batch_edges(const Tensor& p, const std::vector<std::uint8_t>& present, std::size_t n) const {
    const EdgeMode mode =
        cfg_.variant == Variant::Dce ? EdgeMode::cutoff(cfg_.d_thresh) : EdgeMode::full();
    const auto& pv = p.values();
    EdgeSet all;
    std::vector<Point> pts(n);
    for (std::size_t base = 0; base < present.size(); base += n) {
      for (std::size_t i = 0; i < n; ++i) pts[i] = {pv[(base + i) * 2], pv[(base + i) * 2 + 1]};
      const auto local = build_edges(pts, std::span(present).subspan(base, n), mode);
      for (const auto& e : local) all.push_back({base + e.sender, base + e.receiver});
    }
    return all;
  }

 private:
  /// Aggregated interaction vector a [R x attention]; zero for receivers
  /// without incoming edges.
  Tensor interact(const Tensor& p, const Tensor& vel, const Tensor& h, StepOutput& out, std::size_t R,
                  const StepOptions& opts) const {
    const auto& edges = out.edges;
    const std::size_t E = edges.size();
    if (E == 0) return Tensor::zeros({R, cfg_.attention});
    std::vector<std::size_t> snd(E), rcv(E);
    std::vector<double> has_edge(R, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
      snd[e] = edges[e].sender;
      rcv[e] = edges[e].receiver;
      has_edge[rcv[e]] = 1.0;
    }
    const Tensor ps = gather_rows(p, snd), pr = gather_rows(p, rcv);
    const Tensor hs = gather_rows(h, snd), hr = gather_rows(h, rcv);
    const Tensor psr = sub(ps, pr), hsr = sub(hs, hr);
    const Tensor p_unit = unit_rows(psr), h_unit = unit_rows(hsr);

    const std::size_t n_out = cfg_.variant == Variant::NoDec ? cfg_.decisions : cfg_.total_decisions();
    const std::size_t dv = cfg_.response_dim;
    Tensor responses;  // E x (n_out * dv)
    if (cfg_.variant == Variant::NoDec) {
      const Tensor f = concat({ps, pr, psr, p_unit, hs, hr, hsr, h_unit}, 1);
      responses = nodec_out_(relu(nodec_in_(f)));
    } else {
      Tensor f = detach(concat({ps, pr, psr, p_unit, hs, hr, hsr, h_unit}, 1));
      if (opts.kq_features_override) f = detach(*opts.kq_features_override);
      out.kq_features = f;
      const std::size_t n = cfg_.decisions, d = cfg_.key_dim;
      const Tensor keys = reshape(fc_[5](f), {E, n, d});
      const Tensor queries = reshape(fc_[6](f), {E, n, d});
      // Clamping the logits keeps every decision strictly inside (0,1).
      Tensor decisions = sigmoid(clamp(add(rowwise_dot(keys, queries), bias_B_), -36.0, 36.0));
      if (cfg_.variant == Variant::Hk) {
        const Tensor vel_sr = detach(sub(gather_rows(vel, snd), gather_rows(vel, rcv)));
        const Tensor approach = reshape(rowwise_dot(vel_sr, detach(p_unit)), {E, 1});
        decisions = concat({decisions, sigmoid(clamp(approach, -36.0, 36.0))}, 1);
      }
      if (opts.freeze_decisions) decisions = detach(decisions);
      out.decisions = decisions;
      const Tensor rin = concat({psr, hs}, 1);
      const Tensor yes = reshape(fc_[8](relu(fc_[7](rin))), {E, n_out, dv});
      const Tensor no = reshape(fc_[10](relu(fc_[9](rin))), {E, n_out, dv});
      responses = reshape(fuzzy_if_else(decisions, yes, no), {E, n_out * dv});
    }
    const Tensor pooled = segment_max(fc_[11](responses), rcv, R);
    return mul_rows(fc_[12](pooled), Tensor::constant({R}, std::move(has_edge)));
  }

  Linear make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (auto& x : w) x = u(rng);
    for (auto& x : b) x = u(rng);
    Linear l{Tensor::parameter({in, out}, std::move(w)), Tensor::parameter({out}, std::move(b))};
    params_.push_back({name + ".weight", l.weight});
    params_.push_back({name + ".bias", l.bias});
    return l;
  }

  LstmCell make_lstm(const std::string& name, std::size_t in, std::size_t hidden, std::mt19937_64& rng) {
    LstmCell cell{make_linear(name, in + hidden, 4 * hidden, rng), hidden};
    auto bias = cell.gates.bias.mutable_data();
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = 1.0;  // forget gate
    return cell;
  }

  ModelConfig cfg_;
  std::vector<NamedTensor> params_;
  LstmCell lstm_;
  Linear fc_[13];
  Linear nodec_in_, nodec_out_;
  Linear embed_, out_;
  Tensor bias_B_;
};

// ---------------------------------------------------------------------------
// Sequence rollout over a batch.

struct RolloutOptions {
  /// Number of leading frames fed from ground truth; later frames use the
  /// model's own predictions (agents absent at t-1 fall back to ground truth).
  std::size_t teacher_frames = 0;
  bool record_decisions = false;
  bool freeze_decisions = false;
};

struct StepDecisions {
  std::size_t t = 0;  // 0-based frame the decision was made at
  EdgeSet edges;
  std::vector<double> values;  // E x total_decisions
};

struct RolloutResult {
  /// predictions[t] is the prediction for frame t+1 made at frame t, t = 0..T-2.
  std::vector<Tensor> predictions;
  std::vector<StepDecisions> decisions;
};

namespace detail {

inline Tensor frame_positions(const Batch& b, std::size_t t) {
  std::vector<double> v(b.rows() * 2);
  for (std::size_t r = 0; r < b.rows(); ++r) {
    v[r * 2] = b.positions[(r * b.T + t) * 2];
    v[r * 2 + 1] = b.positions[(r * b.T + t) * 2 + 1];
  }
  return Tensor::constant({b.rows(), 2}, std::move(v));
}

inline std::vector<std::uint8_t> frame_mask(const Batch& b, std::size_t t) {
  std::vector<std::uint8_t> m(b.rows());
  for (std::size_t r = 0; r < b.rows(); ++r) m[r] = b.masks[r * b.T + t];
  return m;
}

}  // namespace detail

inline RolloutResult rollout(const Model& model, const Batch& batch, const RolloutOptions& opts) {
  const std::size_t R = batch.rows();
  RolloutResult res;
  State state = model.initial_state(R);
  Tensor x = detail::frame_positions(batch, 0);
  Tensor x_prev = Tensor::zeros({R, 2});
  std::vector<std::uint8_t> m_prev(R, 0);
  for (std::size_t t = 0; t + 1 < batch.T; ++t) {
    StepInput in{x, x_prev, detail::frame_mask(batch, t), m_prev, batch.N};
    StepOptions so;
    so.freeze_decisions = opts.freeze_decisions;
    StepOutput out = model.step(in, state, so);
    if (opts.record_decisions && out.decisions.defined()) {
      res.decisions.push_back({t, out.edges, out.decisions.values()});
    }
    state = std::move(out.state);
    res.predictions.push_back(out.next);

    const auto m_next = detail::frame_mask(batch, t + 1);
    Tensor truth = detail::frame_positions(batch, t + 1);
    if (t + 1 >= opts.teacher_frames) {
      std::vector<double> use_pred(R), keep_truth(R);
      bool any = false;
      for (std::size_t r = 0; r < R; ++r) {
        use_pred[r] = (in.present[r] && m_next[r]) ? 1.0 : 0.0;
        keep_truth[r] = 1.0 - use_pred[r];
        any = any || use_pred[r] > 0;
      }
      if (any) {
        truth = add(mul_rows(out.next, Tensor::constant({R}, use_pred)),
                    mul_rows(truth, Tensor::constant({R}, keep_truth)));
      }
    }
    x_prev = x;
    x = truth;
    m_prev = in.present;
  }
  return res;
}

}  // namespace fqa
