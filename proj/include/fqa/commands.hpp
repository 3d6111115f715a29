// Pipeline stages behind the `fqa` command line: generate, train, evaluate,
// probe and plot. Each stage writes its resolved configuration into its
// output directory before doing any work.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqa/checkpoint.hpp"
#include "fqa/config.hpp"
#include "fqa/dataset.hpp"
#include "fqa/eval.hpp"
#include "fqa/model.hpp"
#include "fqa/physics.hpp"
#include "fqa/plot.hpp"
#include "fqa/probe.hpp"
#include "fqa/training.hpp"

namespace fqa {

/// Bad invocation, missing inputs or inconsistent artifacts (exit code 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

namespace detail {

inline void prepare_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory '" + dir.string() + "'");
}

inline std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generate

inline void bind(RunConfig& rc, physics::CollisionsConfig& c) {
  rc.bind("collisions.num_agents", c.num_agents);
  rc.bind("collisions.num_landmarks", c.num_landmarks);
  rc.bind("collisions.box_half_width", c.box_half_width);
  rc.bind("collisions.agent_radius", c.agent_radius);
  rc.bind("collisions.landmark_radius", c.landmark_radius);
  rc.bind("collisions.dt", c.dt);
  rc.bind("collisions.substeps", c.substeps);
  rc.bind("collisions.T", c.T);
  rc.bind("collisions.speed_scale", c.speed_scale);
  rc.bind("collisions.max_placement_tries", c.max_placement_tries);
}

inline void bind(RunConfig& rc, physics::ChargesConfig& c) {
  rc.bind("charges.num_charges", c.num_charges);
  rc.bind("charges.charge_values", c.charge_values);
  rc.bind("charges.coulomb_constant", c.coulomb_constant);
  rc.bind("charges.softening", c.softening);
  rc.bind("charges.box_half_width", c.box_half_width);
  rc.bind("charges.dt", c.dt);
  rc.bind("charges.substeps", c.substeps);
  rc.bind("charges.T", c.T);
  rc.bind("charges.speed_scale", c.speed_scale);
}

struct GenerateSummary {
  std::string dataset;
  std::size_t count = 0, conserved = 0;

  std::string line() const {
    char buf[160];
    const double pct = count ? 100.0 * static_cast<double>(conserved) / static_cast<double>(count) : 100.0;
    std::snprintf(buf, sizeof buf, "generated %zu %s scenes; conservation checks passed %zu/%zu (%.1f%%)", count,
                  dataset.c_str(), conserved, count, pct);
    return buf;
  }
};

/// Charges scenes pass when total energy drifts by less than this fraction.
inline constexpr double kChargesEnergyTolerance = 1e-2;

inline GenerateSummary run_generate(RunConfig rc, const fs::path& out) {
  std::string dataset = "collisions";
  std::size_t count = 100;
  std::uint64_t seed = 0;
  rc.bind("dataset", dataset);
  rc.bind("count", count);
  rc.bind("seed", seed);
  physics::CollisionsConfig coll;
  physics::ChargesConfig chg;
  if (dataset == "collisions") {
    bind(rc, coll);
    coll.validate();
  } else if (dataset == "charges") {
    bind(rc, chg);
    chg.validate();
  } else {
    throw UsageError("dataset: expected 'collisions' or 'charges', got '" + dataset + "'");
  }
  rc.reject_unknown();
  detail::prepare_out_dir(out);
  rc.save((out / "config.ini").string());

  GenerateSummary sum{dataset, count, 0};
  SceneWriter scenes((out / "scenes.jsonl").string());
  std::ofstream events(out / "events.jsonl", std::ios::binary | std::ios::trunc);
  if (!events) throw std::runtime_error("cannot write '" + (out / "events.jsonl").string() + "'");
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = physics::scene_seed(seed, i);
    if (dataset == "collisions") {
      coll.seed = s;
      auto res = physics::generate_collisions(coll);
      if (physics::conserved(physics::check_conservation(res))) ++sum.conserved;
      scenes.write(res.scene);
      events << event_log_to_json_line(res.events) << '\n';
    } else {
      chg.seed = s;
      const Scene sc = physics::generate_charges(chg);
      if (physics::charges_energy_drift(chg) < kChargesEnergyTolerance) ++sum.conserved;
      scenes.write(sc);
      events << event_log_to_json_line({sc.scene_id, {}}) << '\n';
    }
  }
  if (!events) throw std::runtime_error("failed writing events");
  return sum;
}

// ---------------------------------------------------------------------------
// Data preparation shared by train / evaluate / probe / plot

struct PreparedData {
  Split raw;
  NormalizeTransform transform;
  std::vector<Scene> train, val, test;
};

inline std::vector<Scene> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data directory '" + dir.string() + "' does not exist");
  const auto file = dir / "scenes.jsonl";
  if (!fs::exists(file)) throw UsageError("data directory '" + dir.string() + "' has no scenes.jsonl");
  return load_scenes(file.string());
}

inline PreparedData prepare(std::span<const Scene> scenes, std::uint64_t split_seed) {
  PreparedData d;
  d.raw = split(scenes, split_seed);
  d.transform = fit_normalization(d.raw.train);
  auto norm = [&](const std::vector<Scene>& in) {
    std::vector<Scene> out;
    for (const auto& s : in) out.push_back(apply_transform(s, d.transform));
    return out;
  };
  d.train = norm(d.raw.train);
  d.val = norm(d.raw.val);
  d.test = norm(d.raw.test);
  return d;
}

/// Re-derives the split and normalization a checkpoint was trained with and
/// refuses data whose transform differs.
inline PreparedData prepare_for(const Checkpoint& ck, std::span<const Scene> scenes) {
  PreparedData d = prepare(scenes, ck.meta.split_seed);
  if (d.transform.hash() != ck.normalization.hash()) {
    throw UsageError("normalization mismatch: checkpoint was trained with transform " + ck.normalization.hash() +
                     " but this dataset's training split yields " + d.transform.hash() +
                     "; the checkpoint does not belong to this data");
  }
  return d;
}

// ---------------------------------------------------------------------------
// train

struct TrainSettings {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t split_seed = 0;
};

inline TrainSettings bind_train(RunConfig& rc) {
  TrainSettings s;
  std::string variant = to_string(s.model.variant);
  rc.bind("variant", variant);
  s.model.variant = parse_variant(variant);
  rc.set("variant", to_string(s.model.variant));
  rc.bind("seed", s.train.seed);
  rc.bind("split_seed", s.split_seed);
  rc.bind("model.d_thresh", s.model.d_thresh);
  rc.bind("train.batch_size", s.train.batch_size);
  rc.bind("train.lr0", s.train.lr0);
  rc.bind("train.gamma", s.train.gamma);
  rc.bind("train.decay_every", s.train.decay_every);
  rc.bind("train.min_epochs", s.train.min_epochs);
  rc.bind("train.patience", s.train.patience);
  rc.bind("train.max_epochs", s.train.max_epochs);
  rc.bind("train.clip_norm", s.train.clip_norm);
  rc.bind("train.shuffle_seed", s.train.shuffle_seed);
  s.train.validate();
  if (!(s.model.d_thresh > 0)) throw ConfigurationError("model.d_thresh must be > 0");
  return s;
}

inline void write_history(const fs::path& path, std::span<const EpochRecord> history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "epoch,lr,T_temp,train_loss,val_rmse\n";
  for (const auto& r : history)
    out << r.epoch << ',' << detail::fmt17(r.lr) << ',' << r.burn_in << ',' << detail::fmt17(r.train_loss) << ','
        << detail::fmt17(r.val_rmse) << '\n';
}

struct TrainOutcome {
  Checkpoint checkpoint;
  TrainResult result;
};

/// Trains one model on prepared data and writes checkpoint.json,
/// history.csv and train.log into `out`.
inline TrainOutcome train_one(const TrainSettings& s, const PreparedData& data, const fs::path& out,
                              std::ostream* progress) {
  Model model(s.model, s.train.seed);
  std::ofstream log(out / "train.log", std::ios::trunc);
  auto on_epoch = [&](const EpochRecord& r) {
    if (progress)
      *progress << "epoch " << r.epoch << "  lr " << r.lr << "  T_temp " << r.burn_in << "  train_loss "
                << r.train_loss << "  val_rmse " << r.val_rmse << '\n';
  };
  TrainOutcome o;
  o.result = train(model, data.train, data.val, s.train, on_epoch, &log);
  o.checkpoint = {s.model, data.transform,
                  {s.train.seed, s.split_seed, o.result.history.size(), o.result.best_epoch}, snapshot(model)};
  save_checkpoint((out / "checkpoint.json").string(), o.checkpoint);
  write_history(out / "history.csv", o.result.history);
  if (o.result.status == TrainStatus::Diverged)
    throw NumericalError("training diverged; the last finite checkpoint was written to " + out.string());
  return o;
}

inline std::string mean_std(std::span<const double> xs, int digits = 4) {
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  const double sd = xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, m, digits, sd);
  return buf;
}

struct SweepResult {
  std::string variant;
  std::vector<double> test_rmse;  // original units, one per seed
  std::vector<fs::path> checkpoints;
};

/// With `sweep`, trains seeds 0..sweep_seeds-1 into out/seed_<k> and reports
/// the test RMSE as mean ± std.
inline SweepResult run_train(RunConfig rc, const fs::path& data_dir, const fs::path& out, bool sweep,
                             std::ostream* progress = nullptr, std::size_t sweep_seeds = 5) {
  TrainSettings s = bind_train(rc);
  rc.reject_unknown();
  const auto scenes = load_dataset(data_dir);
  detail::prepare_out_dir(out);
  rc.save((out / "config.ini").string());
  const PreparedData data = prepare(scenes, s.split_seed);
  SweepResult res{to_string(s.model.variant), {}, {}};
  if (!sweep) {
    train_one(s, data, out, progress);
    res.checkpoints.push_back(out / "checkpoint.json");
    return res;
  }
  std::vector<double> rmse;
  nlohmann::json runs = nlohmann::json::array();
  for (std::uint64_t seed = 0; seed < sweep_seeds; ++seed) {
    TrainSettings ss = s;
    ss.train.seed = seed;
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    detail::prepare_out_dir(dir);
    RunConfig seed_rc = rc;
    seed_rc.set("seed", std::to_string(seed));
    seed_rc.save((dir / "config.ini").string());
    if (progress) *progress << "seed " << seed << '\n';
    const auto o = train_one(ss, data, dir, progress);
    const Model m = o.checkpoint.build();
    const double r = evaluate_rmse(m, data.test, data.transform.scale).rmse;
    rmse.push_back(r);
    res.checkpoints.push_back(dir / "checkpoint.json");
    runs.push_back({{"seed", seed}, {"test_rmse", r}, {"best_epoch", o.result.best_epoch}});
  }
  const std::string summary = std::string(to_string(s.model.variant)) + " test RMSE " + mean_std(rmse);
  write_json((out / "sweep.json").string(), {{"variant", to_string(s.model.variant)}, {"runs", runs}, {"summary", summary}});
  if (progress) *progress << summary << '\n';
  res.test_rmse = rmse;
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

inline EvalReport run_evaluate(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out) {
  const Checkpoint ck = load_checkpoint(checkpoint.string());
  const auto scenes = load_dataset(data_dir);
  const PreparedData data = prepare_for(ck, scenes);
  detail::prepare_out_dir(out);
  RunConfig rc;
  rc.set("checkpoint", checkpoint.string());
  rc.set("data", data_dir.string());
  rc.set("split", "test");
  rc.save((out / "config.ini").string());

  const auto t0 = std::chrono::steady_clock::now();
  const Model model = ck.build();
  EvalReport rep = evaluate_rmse(model, data.test, data.transform.scale);
  rep.seed = ck.meta.seed;
  rep.split_seed = ck.meta.split_seed;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json((out / "eval.json").string(), to_json(rep));
  write_json((out / "eval_timing.json").string(), {{"runtime_seconds", seconds}});
  return rep;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeSettings {
  ProbeOptions options;
  bool teacher_forced = true;
  std::size_t shuffles = 5;
};

inline std::vector<EventLog> load_events_for(const fs::path& data_dir, std::span<const Scene> scenes) {
  const auto file = data_dir / "events.jsonl";
  if (!fs::exists(file)) throw UsageError("data directory '" + data_dir.string() + "' has no events.jsonl");
  std::map<std::string, EventLog> by_id;
  for (auto& l : load_event_logs(file.string())) by_id[l.scene_id] = std::move(l);
  std::vector<EventLog> out;
  for (const auto& s : scenes) {
    auto it = by_id.find(s.scene_id);
    out.push_back(it == by_id.end() ? EventLog{s.scene_id, {}} : it->second);
  }
  return out;
}

inline ProbeReport run_probe(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out,
                             const ProbeSettings& ps) {
  const Checkpoint ck = load_checkpoint(checkpoint.string());
  if (!has_decisions(ck.config.variant)) {
    throw UsageError(std::string("variant '") + to_string(ck.config.variant) +
                     "' has no decisions to probe (use fqa, dce or hk)");
  }
  const auto scenes = load_dataset(data_dir);
  const PreparedData data = prepare_for(ck, scenes);
  const auto events = load_events_for(data_dir, data.test);
  detail::prepare_out_dir(out);
  RunConfig rc;
  rc.set("checkpoint", checkpoint.string());
  rc.set("data", data_dir.string());
  rc.set("split", "test");
  rc.set("probe.seed", std::to_string(ps.options.seed));
  rc.set("probe.window", std::to_string(ps.options.window));
  rc.set("probe.negatives_per_positive", std::to_string(ps.options.negatives_per_positive));
  rc.set("probe.train_fraction", detail::format_value(ps.options.train_fraction));
  rc.set("probe.decisions", ps.teacher_forced ? "teacher-forced" : "rollout");
  rc.set("probe.shuffles", std::to_string(ps.shuffles));
  rc.save((out / "config.ini").string());

  const Model model = ck.build();
  const auto decisions = extract_decisions(model, data.test, ps.teacher_forced);
  std::vector<std::vector<bool>> mobile;
  for (const auto& s : data.test) {
    std::vector<bool> m;
    for (const auto& a : s.agents) m.push_back(!a.immobile);
    mobile.push_back(std::move(m));
  }
  const auto ds = build_probe_dataset(decisions, mobile, events, ps.options);
  ProbeReport rep = fqa::run_probe(ds, ps.options, ps.shuffles);
  rep.variant = to_string(ck.config.variant);
  rep.decision_source = ps.teacher_forced ? "teacher-forced" : "rollout";
  write_json((out / "probe.json").string(), to_json(rep));
  return rep;
}

// ---------------------------------------------------------------------------
// plot

/// One panel per checkpoint, drawn on test-split scene `scene_index`.
inline void run_plot(std::span<const fs::path> checkpoints, const fs::path& data_dir, std::size_t scene_index,
                     std::uint64_t split_seed, const fs::path& out) {
  const auto scenes = load_dataset(data_dir);
  std::vector<Checkpoint> cks;
  for (const auto& p : checkpoints) cks.push_back(load_checkpoint(p.string()));
  const std::uint64_t seed = cks.empty() ? split_seed : cks.front().meta.split_seed;
  const PreparedData data = prepare(scenes, seed);
  if (scene_index >= data.test.size()) {
    throw UsageError("scene index " + std::to_string(scene_index) + " out of range (test split has " +
                     std::to_string(data.test.size()) + " scenes)");
  }
  std::vector<PlotPanel> panels;
  std::map<std::string, int> seen;
  for (std::size_t k = 0; k < cks.size(); ++k) {
    const PreparedData d = prepare_for(cks[k], scenes);
    std::string label = to_string(cks[k].config.variant);
    if (seen[label]++) label += "#" + std::to_string(seen[label]);
    panels.push_back(predict_panel(cks[k].build(), d.test[scene_index], d.transform, label));
  }
  detail::prepare_out_dir(out);
  RunConfig rc;
  for (std::size_t k = 0; k < checkpoints.size(); ++k) rc.set("checkpoint." + std::to_string(k), checkpoints[k].string());
  rc.set("data", data_dir.string());
  rc.set("scene", std::to_string(scene_index));
  rc.set("split_seed", std::to_string(seed));
  rc.save((out / "config.ini").string());
  emit_plot(data.raw.test[scene_index], panels, (out / "plot.svg").string(), (out / "plot.csv").string());
}

}  // namespace fqa
