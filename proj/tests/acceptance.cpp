// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
//   fqa_acceptance --work-dir DIR [--criterion N]...

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fqa/commands.hpp"
#include "fqa/runtime.hpp"
#include "gradcheck.hpp"

using namespace fqa;
using fqa::testing::check_gradients;
using fqa::testing::probe_sum;
using fqa::testing::random_parameter;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean_of(std::span<const double> xs) { return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size()); }

fs::path fresh(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradients() {
  constexpr double tol = 1e-5;
  std::mt19937_64 rng(2024);
  Tensor a = random_parameter({3, 4}, rng), b = random_parameter({3, 4}, rng), r = random_parameter({4}, rng);
  Tensor w = random_parameter({4, 5}, rng), bias = random_parameter({5}, rng);
  Tensor k = random_parameter({3, 2, 4}, rng), q = random_parameter({3, 2, 4}, rng);
  Tensor s = random_parameter({3}, rng), c = random_parameter({3, 2}, rng);
  const std::vector<std::pair<const char*, std::pair<std::vector<Tensor>, std::function<Tensor()>>>> ops = {
      {"add", {{a, r}, [&] { return probe_sum(add(a, r)); }}},
      {"sub", {{a, b}, [&] { return probe_sum(sub(a, b)); }}},
      {"mul", {{a, r}, [&] { return probe_sum(mul(a, r)); }}},
      {"scale", {{a}, [&] { return probe_sum(scale(a, -1.7)); }}},
      {"sigmoid", {{a}, [&] { return probe_sum(sigmoid(a)); }}},
      {"tanh", {{a}, [&] { return probe_sum(tanh(a)); }}},
      {"softplus", {{a}, [&] { return probe_sum(softplus(a)); }}},
      {"relu", {{a}, [&] { return probe_sum(relu(a)); }}},
      {"clamp", {{a}, [&] { return probe_sum(clamp(a, -1.0, 1.0)); }}},
      {"one_minus", {{a}, [&] { return probe_sum(one_minus(a)); }}},
      {"mul_rows", {{a, s}, [&] { return probe_sum(mul_rows(a, s)); }}},
      {"matmul", {{a, w}, [&] { return probe_sum(matmul(a, w)); }}},
      {"affine", {{a, w, bias}, [&] { return probe_sum(affine(a, w, bias)); }}},
      {"rowwise_dot", {{k, q}, [&] { return probe_sum(rowwise_dot(k, q)); }}},
      {"reshape", {{a}, [&] { return probe_sum(reshape(a, {4, 3})); }}},
      {"concat", {{a, c}, [&] { return probe_sum(concat({a, c}, 1)); }}},
      {"slice_last", {{a}, [&] { return probe_sum(slice_last(a, 1, 3)); }}},
      {"gather_rows", {{a}, [&] { return probe_sum(gather_rows(a, {2, 0, 2, 1})); }}},
      {"unit_rows", {{a}, [&] { return probe_sum(unit_rows(a)); }}},
      {"maxpool_set", {{a}, [&] { return probe_sum(maxpool_set(a)); }}},
      {"segment_max", {{a}, [&] { return probe_sum(segment_max(a, {1, 0, 1}, 3)); }}},
      {"sum", {{a}, [&] { return sum(a); }}},
      {"mean", {{a}, [&] { return mean(a); }}},
      {"mse", {{a, b}, [&] { return mse(a, b); }}},
  };
  double worst = 0.0;
  std::string where = "-";
  for (const auto& [name, c] : ops) {
    const auto res = check_gradients(c.first, c.second);
    if (res.worst > worst) {
      worst = res.worst;
      where = name;
    }
  }

  // Full-size FQA model, one step on a random 3-agent scene.
  Model m(ModelConfig{}, 11);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> pos(6), prev(6), target(6);
  for (std::size_t i = 0; i < 6; ++i) {
    pos[i] = u(rng);
    prev[i] = pos[i] + 0.05 * u(rng);
    target[i] = pos[i] + 0.05 * u(rng);
  }
  const StepInput in{Tensor::constant({3, 2}, pos), Tensor::constant({3, 2}, prev), {1, 1, 1}, {1, 1, 1}, 3};
  const State st{random_parameter({3, 32}, rng, -0.5, 0.5), random_parameter({3, 32}, rng, -0.5, 0.5)};
  const Tensor goal = Tensor::constant({3, 2}, target);
  // Key/query inputs are detached; finite differences hold them at the base point.
  const Tensor features = m.step(in, st).kq_features;
  StepOptions opts;
  opts.kq_features_override = &features;
  std::vector<Tensor> leaves;
  std::size_t count = 0;
  for (auto& p : m.parameters()) {
    leaves.push_back(p.tensor);
    count += p.tensor.numel();
  }
  const auto model_res = check_gradients(leaves, [&] { return mse(m.step(in, st, opts).next, goal); });
  const bool pass = worst < tol && model_res.worst < tol;
  return {pass, fmt("%zu ops worst %.2e (%s); full FQA step over %zu parameters worst %.2e (%s); tol %.0e", ops.size(),
                    worst, where.c_str(), count, model_res.worst, model_res.where.c_str(), tol)};
}

// ---------------------------------------------------------------------------
// 2. Detach contract

Outcome detach_contract() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1, 1);
  Model m(ModelConfig{}, 5);
  std::vector<double> pos(8), prev(8), target(8);
  for (std::size_t i = 0; i < 8; ++i) {
    pos[i] = u(rng);
    prev[i] = pos[i] + 0.05 * u(rng);
    target[i] = pos[i] + 0.05 * u(rng);
  }
  const StepInput in{Tensor::constant({4, 2}, pos), Tensor::constant({4, 2}, prev), {1, 1, 1, 1}, {1, 1, 1, 1}, 4};
  const State st{random_parameter({4, 32}, rng, -0.5, 0.5), random_parameter({4, 32}, rng, -0.5, 0.5)};
  const Tensor goal = Tensor::constant({4, 2}, target);
  auto grads = [&](bool freeze) {
    m.zero_grad();
    StepOptions o;
    o.freeze_decisions = freeze;
    {
      Tape tape;
      tape.backward(mse(m.step(in, st, o).next, goal));
    }
    std::vector<std::vector<double>> g;
    for (const auto& p : m.parameters()) g.push_back(p.tensor.grad());
    return g;
  };
  const auto live = grads(false), frozen = grads(true);
  std::size_t identical = 0, checked = 0;
  bool decision_grads_live = false;
  for (std::size_t k = 0; k < live.size(); ++k) {
    const auto& name = m.parameters()[k].name;
    if (name.rfind("fc5.", 0) == 0 || name.rfind("fc6.", 0) == 0 || name == "B") {
      decision_grads_live |= std::any_of(live[k].begin(), live[k].end(), [](double g) { return g != 0.0; });
      continue;
    }
    ++checked;
    identical += live[k] == frozen[k] ? 1 : 0;
  }
  return {identical == checked && decision_grads_live,
          fmt("%zu/%zu non-decision parameter gradients bit-identical; key/query layers receive gradient only when live: %s",
              identical, checked, decision_grads_live ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 3. Physics conservation

Outcome conservation() {
  physics::ConservationReport worst;
  std::size_t pass = 0, agent_events = 0, reflections = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    physics::CollisionsConfig cfg;
    cfg.T = 25;
    cfg.seed = physics::scene_seed(0, i);
    const auto res = physics::generate_collisions(cfg);
    const auto rep = physics::check_conservation(res);
    worst.energy_drift = std::max(worst.energy_drift, rep.energy_drift);
    worst.contact_momentum = std::max(worst.contact_momentum, rep.contact_momentum);
    worst.contact_energy = std::max(worst.contact_energy, rep.contact_energy);
    worst.reflection_speed = std::max(worst.reflection_speed, rep.reflection_speed);
    pass += physics::conserved(rep) ? 1 : 0;
    for (const auto& c : res.contacts) (c.kind == EventKind::AgentAgent ? agent_events : reflections) += 1;
  }
  return {pass == 100 && agent_events > 0 && reflections > 0,
          fmt("%zu/100 scenes; worst KE drift %.1e, contact momentum %.1e, contact KE %.1e, reflection speed %.1e "
              "(%zu agent-agent, %zu wall/landmark contacts)",
              pass, worst.energy_drift, worst.contact_momentum, worst.contact_energy, worst.reflection_speed, agent_events,
              reflections)};
}

// ---------------------------------------------------------------------------
// 4 and 5. Collisions ablation and decision probe

// Crowded geometry: a half-width 0.5 box with radius 0.08 agents, so contacts
// are frequent enough for interaction modelling to matter at 800 scenes.
constexpr std::uint64_t kCollisionsSeed = 42, kSplitSeed = 7;

fs::path collisions_data(const fs::path& work) {
  const fs::path dir = work / "collisions_data";
  if (fs::exists(dir / "scenes.jsonl")) return dir;
  RunConfig rc;
  rc.set("count", "800");
  rc.set("seed", std::to_string(kCollisionsSeed));
  rc.set("collisions.box_half_width", "0.5");
  rc.set("collisions.agent_radius", "0.08");
  run_generate(rc, fresh(dir));
  return dir;
}

SweepResult sweep(const fs::path& data, const fs::path& out, const std::string& variant, std::size_t seeds) {
  RunConfig rc;
  rc.set("variant", variant);
  rc.set("split_seed", std::to_string(kSplitSeed));
  const auto t0 = std::chrono::steady_clock::now();
  auto res = run_train(rc, data, fresh(out), true, nullptr, seeds);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
  std::cout << "  " << variant << ':';
  for (double r : res.test_rmse) std::cout << fmt(" %.4f", r);
  std::cout << fmt("  (%.1f min)", minutes) << std::endl;
  return res;
}

fs::path fqa_seed0_checkpoint;

Outcome ablation(const fs::path& work) {
  const fs::path data = collisions_data(work);
  const fs::path root = work / "c4";
  const auto fqa = sweep(data, root / "fqa", "fqa", 5);
  const auto nointr = sweep(data, root / "nointr", "nointr", 5);
  const auto inert = sweep(data, root / "inert", "inert", 5);
  fqa_seed0_checkpoint = fqa.checkpoints.front();
  const double f = mean_of(fqa.test_rmse), n = mean_of(nointr.test_rmse), i = mean_of(inert.test_rmse);
  const bool pass = f < n && n < i && f <= 0.85 * i;
  return {pass, fmt("mean test RMSE over 5 seeds: FQA %.4f < NoIntr %.4f < inert %.4f; FQA is %.1f%% below inert "
                    "(need >= 15%%)",
                    f, n, i, 100 * (1 - f / i))};
}

Outcome probe(const fs::path& work) {
  const fs::path data = collisions_data(work);
  if (fqa_seed0_checkpoint.empty() || !fs::exists(fqa_seed0_checkpoint)) {
    const fs::path out = work / "c5" / "fqa";
    RunConfig rc;
    rc.set("variant", "fqa");
    rc.set("split_seed", std::to_string(kSplitSeed));
    fqa_seed0_checkpoint = run_train(rc, data, fresh(out), false).checkpoints.front();
  }
  const auto rep = run_probe(fqa_seed0_checkpoint, data, fresh(work / "c5" / "probe"), ProbeSettings{});
  const auto& tau1 = rep.results.front();
  const double recurrent = rep.results.back().auroc;
  const bool pass = tau1.auroc >= 0.75 && std::abs(rep.control_auroc_mean - 0.5) <= 0.05;
  return {pass, fmt("tau=1 AUROC %.3f (accuracy %.3f, need >= 0.75); recurrent AUROC %.3f; shuffled control %.3f "
                    "(need 0.5 +- 0.05); %zu rows, %zu positives",
                    tau1.auroc, tau1.accuracy, recurrent, rep.control_auroc_mean, rep.rows, rep.positives)};
}

// ---------------------------------------------------------------------------
// 6. Proximity decision

Outcome proximity() {
  Model m(ModelConfig{}, 0);
  auto data = [&](const std::string& name) {
    Tensor alias = *m.find(name);
    return alias.mutable_data();
  };
  const std::size_t A = m.find("fc5.weight")->dim(1);
  for (const char* fc : {"fc5", "fc6"}) {
    auto w = data(std::string(fc) + ".weight");
    std::fill(w.begin(), w.end(), 0.0);
    for (double& x : data(std::string(fc) + ".bias")) x = 0.0;
    // The relative position p_sr sits in feature columns 4 and 5.
    w[4 * A + 0] = 1.0;
    w[5 * A + 1] = 1.0;
  }
  const double d_th = 0.5;
  data("B")[0] = -d_th * d_th;
  std::vector<double> d, D;
  for (int k = 1; k <= 100; ++k) {
    const double sep = 0.01 * k;
    const StepInput in{Tensor::constant({2, 2}, {0, 0, sep, 0}), Tensor::constant({2, 2}, {0, 0, sep, 0}), {1, 1}, {1, 1}, 2};
    const auto out = m.step(in, m.initial_state(2));
    std::size_t e = 0;
    while (!(out.edges[e].sender == 1 && out.edges[e].receiver == 0)) ++e;
    d.push_back(sep);
    D.push_back(out.decisions.values()[e * m.config().total_decisions()]);
  }
  bool monotone = true, sides = true;
  double oracle_err = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i > 0 && !(D[i] > D[i - 1])) monotone = false;
    if (d[i] < d_th - 1e-12 && !(D[i] < 0.5)) sides = false;
    if (d[i] > d_th + 1e-12 && !(D[i] > 0.5)) sides = false;
    oracle_err = std::max(oracle_err, std::abs(D[i] - 1 / (1 + std::exp(-(d[i] * d[i] - d_th * d_th)))));
  }
  const double at = D[49];
  return {monotone && sides && at == 0.5 && oracle_err < 1e-12,
          fmt("D(0.50) = %.17g; strictly increasing over 100 separations: %s; below/above 0.5 on either side: %s; "
              "max deviation from sigma(d^2 - d_th^2) %.1e",
              at, monotone ? "yes" : "no", sides ? "yes" : "no", oracle_err)};
}

// ---------------------------------------------------------------------------
// 7. Schedule

Outcome schedule() {
  const TrainConfig cfg;
  const std::size_t T = 25, T_obs = observed_frames(T);
  std::size_t mismatches = 0;
  double lr = 1e-3;
  std::size_t horizon = T;
  for (std::size_t e = 0; e <= 100; ++e) {
    if (e > 0 && e % 5 == 0) lr *= 0.8;
    if (std::abs(lr_at_epoch(cfg, e) - lr) > 1e-15 * lr) ++mismatches;
    if (burn_in_horizon(e, T, T_obs) != horizon) ++mismatches;
    if (horizon > T_obs) --horizon;
  }
  const bool anchors = lr_at_epoch(cfg, 4) == 1e-3 && std::abs(lr_at_epoch(cfg, 5) - 8e-4) < 1e-18 &&
                       std::abs(lr_at_epoch(cfg, 100) - 1.152921504606847e-05) < 1e-18 &&
                       burn_in_horizon(0, T, T_obs) == 25 && burn_in_horizon(15, T, T_obs) == 10 &&
                       burn_in_horizon(100, T, T_obs) == 10;
  return {T_obs == 10 && mismatches == 0 && anchors,
          fmt("T_obs = %zu; %zu mismatches over epochs 0-100; lr(100) = %.6e; burn-in reaches T_obs at epoch 15", T_obs,
              mismatches, lr_at_epoch(cfg, 100))};
}

// ---------------------------------------------------------------------------
// 8. Determinism

Outcome determinism(const fs::path& work) {
  auto pipeline = [&](const fs::path& dir) {
    fresh(dir);
    RunConfig gen;
    gen.set("count", "200");
    gen.set("seed", "123");
    run_generate(gen, dir / "data");
    RunConfig tr;
    tr.set("seed", "123");
    tr.set("train.max_epochs", "5");
    run_train(tr, dir / "data", dir / "run", false);
    run_evaluate(dir / "run" / "checkpoint.json", dir / "data", dir / "eval");
  };
  pipeline(work / "c8" / "a");
  pipeline(work / "c8" / "b");
  const std::vector<fs::path> files{"data/scenes.jsonl", "data/events.jsonl", "data/config.ini", "run/config.ini",
                                    "run/checkpoint.json", "run/history.csv", "eval/eval.json"};
  std::size_t same = 0;
  std::string differing;
  for (const auto& f : files) {
    if (slurp(work / "c8" / "a" / f) == slurp(work / "c8" / "b" / f) && !slurp(work / "c8" / "a" / f).empty()) {
      ++same;
    } else {
      differing += " " + f.string();
    }
  }
  return {same == files.size(), fmt("%zu/%zu artifacts byte-identical across two generate -> train (5 epochs) -> evaluate runs%s",
                                    same, files.size(), differing.empty() ? "" : ("; differ:" + differing).c_str())};
}

// ---------------------------------------------------------------------------
// 9. Charges

Outcome charges(const fs::path& work) {
  const fs::path data = work / "charges_data";
  RunConfig gen;
  gen.set("dataset", "charges");
  gen.set("count", "600");
  gen.set("seed", std::to_string(kCollisionsSeed));
  run_generate(gen, fresh(data));
  const auto fqa = sweep(data, work / "c9" / "fqa", "fqa", 3);
  const auto inert = sweep(data, work / "c9" / "inert", "inert", 3);
  const double f = mean_of(fqa.test_rmse), i = mean_of(inert.test_rmse);
  return {f <= 0.85 * i, fmt("mean test RMSE over 3 seeds: FQA %.4f vs inert %.4f; FQA is %.1f%% below inert (need >= 15%%)",
                             f, i, 100 * (1 - f / i))};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "scratch directory for generated data and checkpoints")->capture_default_str();
  app.add_option("--criterion", only, "run only these criteria (repeatable)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  const fs::path work(work_dir);
  fs::create_directories(work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"detach contract", detach_contract},
      {"physics conservation", conservation},
      {"ablation ordering", [&] { return ablation(work); }},
      {"decision probe", [&] { return probe(work); }},
      {"proximity decision", proximity},
      {"schedule fidelity", schedule},
      {"determinism", [&] { return determinism(work); }},
      {"charges sanity", [&] { return charges(work); }},
  };
  std::size_t run = 0, passed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++run;
    passed += o.pass ? 1 : 0;
    std::cout << "criterion " << id << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << criteria[k].first << ": " << o.detail
              << fmt(" [%.0fs]", sec) << std::endl;
  }
  std::cout << passed << '/' << run << " criteria passed" << std::endl;
  return passed == run ? 0 : 1;
}
