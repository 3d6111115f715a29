// fqa: generate -> train -> evaluate -> probe -> plot.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fqa/commands.hpp"
#include "fqa/runtime.hpp"

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", c.config, "key = value config file; flags override its entries");
    cmd->add_option("--set", c.sets, "extra override, key=value (repeatable)");
  }
  cmd->add_option("--out", c.out, "output directory")->required();
}

fqa::RunConfig load_config(const Common& c) {
  fqa::RunConfig rc = c.config.empty() ? fqa::RunConfig{} : fqa::RunConfig::load(c.config);
  for (const auto& kv : c.sets) rc.set_assignment(kv);
  return rc;
}

std::string reference_page(const CLI::App& app) {
  std::ostringstream md;
  md << "# fqa command reference\n\n"
     << "Generated by `fqa docs`. Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.\n";
  for (const CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    md << "\n## fqa " << sub->get_name() << "\n\n" << sub->get_description() << "\n\n";
    md << "| option | description |\n|---|---|\n";
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help") continue;
      std::string name = opt->get_name(false, true);
      if (opt->get_required()) name += " (required)";
      std::string desc = opt->get_description();
      if (!opt->get_default_str().empty()) desc += " [default: " + opt->get_default_str() + "]";
      md << "| `" << name << "` | " << desc << " |\n";
    }
  }
  return md.str();
}

}  // namespace

int main(int argc, char** argv) {
  fqa::tune_allocator();
  CLI::App app{"Fuzzy query attention trajectory prediction toolkit"};
  app.require_subcommand(1);

  Common gen_c;
  std::string dataset = "collisions";
  std::size_t count = 0;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset (scenes.jsonl, events.jsonl, config.ini)");
  gen->add_option("dataset", dataset, "collisions or charges")->check(CLI::IsMember({"collisions", "charges"}));
  auto* gen_count = gen->add_option("--count", count, "number of scenes [config key: count, default 100]");
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "master seed [config key: seed, default 0]");
  add_common(gen, gen_c);

  Common tr_c;
  std::string data_dir, variant;
  std::uint64_t tr_seed = 0;
  double d_thresh = 0.5;
  bool sweep = false, quiet = false;
  std::size_t sweep_seeds = 5;
  auto* tr = app.add_subcommand("train", "Train a model variant; writes checkpoint.json, history.csv, config.ini");
  tr->add_option("--data", data_dir, "dataset directory produced by generate")->required();
  auto* tr_variant = tr->add_option("--variant", variant, "fqa, inert, nointr, nodec, dce, hk or vlstm [default: fqa]");
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "weight initialization seed [default: 0]");
  auto* tr_d = tr->add_option("--d-thresh", d_thresh, "edge distance cutoff of the dce variant [default: 0.5]");
  tr->add_flag("--sweep", sweep, "train seeds 0..N-1 (see --seeds) and report test RMSE mean ± std");
  tr->add_option("--seeds", sweep_seeds, "number of seeds in a sweep")->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_flag("--quiet", quiet, "suppress per-epoch progress");
  add_common(tr, tr_c);

  Common ev_c;
  std::string ev_ck, ev_data;
  auto* ev = app.add_subcommand("evaluate", "Rollout RMSE on the test split; writes eval.json");
  ev->add_option("--checkpoint", ev_ck, "checkpoint.json from train")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  add_common(ev, ev_c, false);

  Common pr_c;
  std::string pr_ck, pr_data;
  fqa::ProbeSettings ps;
  bool rollout_decisions = false;
  auto* pr = app.add_subcommand("probe", "Decision -> collision probe on the test split; writes probe.json");
  pr->add_option("--checkpoint", pr_ck, "checkpoint of a decision variant (fqa, dce, hk)")->required();
  pr->add_option("--data", pr_data, "dataset directory with events.jsonl")->required();
  pr->add_option("--seed", ps.options.seed, "probe split and subsampling seed")->capture_default_str();
  pr->add_option("--window", ps.options.window, "decision steps per row used by the recurrent probe")
      ->capture_default_str();
  pr->add_option("--negatives", ps.options.negatives_per_positive, "negatives kept per positive")->capture_default_str();
  pr->add_option("--shuffles", ps.shuffles, "label-shuffled control repetitions")->capture_default_str();
  pr->add_flag("--rollout-decisions", rollout_decisions, "record decisions from the inference rollout instead of ground truth");
  add_common(pr, pr_c, false);

  Common pl_c;
  std::vector<std::string> pl_cks;
  std::string pl_data;
  std::size_t scene = 0;
  std::uint64_t pl_split_seed = 0;
  auto* pl = app.add_subcommand("plot", "Trajectory plot of one test scene; one panel per checkpoint");
  pl->add_option("--checkpoint", pl_cks, "checkpoint per panel (repeatable)");
  pl->add_option("--data", pl_data, "dataset directory")->required();
  pl->add_option("--scene", scene, "index into the test split")->capture_default_str();
  pl->add_option("--split-seed", pl_split_seed, "split seed when no checkpoint is given")->capture_default_str();
  add_common(pl, pl_c, false);

  std::string docs_out;
  auto* docs = app.add_subcommand("docs", "Print the command reference as Markdown");
  docs->add_option("--out", docs_out, "write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      fqa::RunConfig rc = load_config(gen_c);
      rc.set("dataset", dataset);
      if (*gen_count) rc.set("count", std::to_string(count));
      if (*gen_seed_opt) rc.set("seed", std::to_string(gen_seed));
      std::cout << fqa::run_generate(rc, gen_c.out).line() << '\n';
    } else if (*tr) {
      fqa::RunConfig rc = load_config(tr_c);
      if (*tr_variant) rc.set("variant", variant);
      if (*tr_seed_opt) rc.set("seed", std::to_string(tr_seed));
      if (*tr_d) rc.set("model.d_thresh", fqa::detail::format_value(d_thresh));
      fqa::run_train(rc, data_dir, tr_c.out, sweep, quiet ? nullptr : &std::cout, sweep_seeds);
    } else if (*ev) {
      const auto rep = fqa::run_evaluate(ev_ck, ev_data, ev_c.out);
      std::cout << rep.variant << " test RMSE " << rep.rmse << " (normalized " << rep.rmse_normalized << ", "
                << rep.scenes.size() << " scenes)\n";
    } else if (*pr) {
      ps.teacher_forced = !rollout_decisions;
      const auto rep = fqa::run_probe(pr_ck, pr_data, pr_c.out, ps);
      for (const auto& r : rep.results)
        std::cout << r.mode << "  accuracy " << r.accuracy << "  auroc " << r.auroc << '\n';
      std::cout << "shuffled control auroc " << rep.control_auroc_mean << '\n';
    } else if (*pl) {
      std::vector<fs::path> cks(pl_cks.begin(), pl_cks.end());
      fqa::run_plot(cks, pl_data, scene, pl_split_seed, pl_c.out);
      std::cout << "wrote " << (fs::path(pl_c.out) / "plot.svg").string() << '\n';
    } else if (*docs) {
      const std::string page = reference_page(app);
      if (docs_out.empty()) {
        std::cout << page;
      } else {
        std::ofstream f(docs_out, std::ios::trunc);
        if (!f) throw fqa::UsageError("cannot write '" + docs_out + "'");
        f << page;
      }
    }
  } catch (const fqa::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const fqa::RunConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const fqa::physics::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const fqa::ConfigurationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
