// fv2ic command line: dataset generation, federated training, evaluation,
// sweeps, ablations, latent analysis and plotting.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fv2ic/fv2ic.hpp"

namespace fs = std::filesystem;
using namespace fv2ic;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  bool no_plots = false;
};

ExperimentConfig load_config(const GlobalArgs& g) {
  ExperimentConfig cfg =
      g.config_path.empty() ? ExperimentConfig{} : parse_config(g.config_path);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.dataset.seed = *g.seed;
  }
  if (g.no_plots) cfg.output.plots = false;
  cfg.validate();
  return cfg;
}

std::vector<std::uint64_t> derive_seeds(std::uint64_t base, int n) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n; ++i) seeds.push_back(base + static_cast<std::uint64_t>(i));
  return seeds;
}

void print_metrics_table(const std::string& label, const SegMetrics& m) {
  std::printf("%-12s dice=%.4f jaccard=%.4f sensitivity=%.4f accuracy=%.4f\n", label.c_str(),
              m.dice, m.jaccard, m.sensitivity, m.accuracy);
}

int cmd_generate(const GlobalArgs& g) {
  ExperimentConfig cfg = load_config(g);
  cfg.dataset.seed = cfg.seed;
  FederatedDataset ds = generate_dataset(cfg.dataset);
  save_dataset(ds, g.out);
  int labeled = 0, total = 0;
  for (const auto& c : ds.clients) {
    labeled += static_cast<int>(c.labeled.size());
    total += c.size();
  }
  std::printf("dataset: %d train (%d labeled), %zu val, %zu test -> %s\n", total, labeled,
              ds.val.size(), ds.test.size(), g.out.c_str());
  return 0;
}

int cmd_train(const GlobalArgs& g) {
  ExperimentConfig cfg = load_config(g);
  ExperimentResult res = run_experiment(cfg, g.out, worker_budget());
  if (cfg.output.plots) {
    const CsvTable report = load_csv(fs::path(g.out) / "report.csv");
    std::vector<int> clients;
    for (int c = 0; c < cfg.dataset.num_clients; ++c) clients.push_back(c);
    write_convergence_plots(convergence_series(report, clients, 5), fs::path(g.out) / "plots");
  }
  std::printf("trained %zu rounds; best round %d (val dice %.4f)\n", res.rounds.size(),
              res.best_round, res.best_val_dice);
  print_metrics_table("test", res.test);
  std::printf("comm total: %llu bytes\n",
              static_cast<unsigned long long>(res.ledger.total_up + res.ledger.total_down));
  return 0;
}

int cmd_evaluate(const GlobalArgs& g, const std::string& ckpt, const std::string& split) {
  ExperimentConfig cfg = load_config(g);
  cfg.dataset.seed = cfg.seed;
  const FederatedDataset ds = generate_dataset(cfg.dataset);
  const std::vector<Sample>* samples = nullptr;
  std::vector<Sample> train_flat;
  if (split == "test") {
    samples = &ds.test;
  } else if (split == "val") {
    samples = &ds.val;
  } else if (split == "train") {
    for (const auto& c : ds.clients) {
      train_flat.insert(train_flat.end(), c.labeled.begin(), c.labeled.end());
      train_flat.insert(train_flat.end(), c.unlabeled.begin(), c.unlabeled.end());
    }
    samples = &train_flat;
  } else {
    throw ConfigError("evaluate.split", "must be train|val|test");
  }

  ModelParams params = load_checkpoint(ckpt);
  Rng rng(0);
  VaeModel vae(cfg.arch(), rng);
  UnetModel unet(cfg.arch(), rng);
  load_combined(vae, unet, params);
  EvalResult res = evaluate_split(vae, unet, *samples, cfg.metrics);

  CsvWriter csv({"split", "dice", "jaccard", "sensitivity", "accuracy", "samples"});
  csv.add_row({split, fmt_double(res.metrics.dice), fmt_double(res.metrics.jaccard),
               fmt_double(res.metrics.sensitivity), fmt_double(res.metrics.accuracy),
               std::to_string(samples->size())});
  fs::create_directories(g.out);
  csv.save(fs::path(g.out) / "evaluate.csv");
  print_metrics_table(split, res.metrics);
  return 0;
}

int cmd_sweep_ratio(const GlobalArgs& g, std::vector<double> ratios, int n_seeds) {
  ExperimentConfig cfg = load_config(g);
  if (ratios.empty()) ratios = {0.1, 0.2, 0.4};
  const auto seeds = derive_seeds(cfg.seed, n_seeds);
  auto cells = sweep_labeled_ratio(cfg, ratios, seeds, plain_runner(), worker_budget());
  write_sweep_outputs(cells, ratios, g.out, cfg.output.plots);
  for (double r : ratios) {
    std::printf("ratio %.2f: fv2ic %.4f vs baseline %.4f\n", r,
                sweep_mean_dice(cells, r, "fv2ic"), sweep_mean_dice(cells, r, "fedavg_baseline"));
  }
  for (const SweepCell& c : cells) {
    if (!c.ok) std::fprintf(stderr, "cell failed (ratio %.2f %s seed %llu): %s\n", c.ratio,
                            c.method.c_str(), static_cast<unsigned long long>(c.seed),
                            c.error.c_str());
  }
  return 0;
}

int cmd_ablation(const GlobalArgs& g, int n_seeds) {
  ExperimentConfig cfg = load_config(g);
  const auto seeds = derive_seeds(cfg.seed, n_seeds);
  auto rows = run_ablation(cfg, seeds, plain_runner(), worker_budget());
  fs::create_directories(g.out);
  ablation_csv(rows).save(fs::path(g.out) / "ablation.csv");
  for (const auto& r : rows) print_metrics_table(r.name, r.mean);
  return 0;
}

int cmd_analyze_latent(const GlobalArgs& g, const std::string& combined_ckpt,
                       const std::string& vae_only_ckpt) {
  ExperimentConfig cfg = load_config(g);
  cfg.dataset.seed = cfg.seed;
  const FederatedDataset ds = generate_dataset(cfg.dataset);
  LatentReport rep = analyze_latent(load_checkpoint(combined_ckpt),
                                    load_checkpoint(vae_only_ckpt), ds.test, cfg.arch(),
                                    cfg.metrics);
  write_latent_outputs(rep, g.out, cfg.output.plots);
  std::printf("avg_d combined=%.6f vae_only=%.6f\n", rep.combined.avg_d, rep.vae_only.avg_d);
  return 0;
}

int cmd_plot(const GlobalArgs& g, const std::string& report_path, std::vector<int> clients,
             int window) {
  const CsvTable report = load_csv(report_path);
  if (clients.empty()) {
    for (std::size_t i = 0; i < report.header.size(); ++i) {
      const std::string& h = report.header[i];
      if (h.rfind("c", 0) == 0 && h.find("_dice") != std::string::npos) {
        clients.push_back(std::stoi(h.substr(1, h.find('_') - 1)));
      }
    }
  }
  write_convergence_plots(convergence_series(report, clients, window), g.out);
  std::printf("plots written to %s\n", g.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated semi-supervised segmentation simulator"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON experiment config")->envname("FV2IC_CONFIG");
  std::uint64_t seed_arg = 0;
  auto* seed_opt = app.add_option("--seed", seed_arg, "override the config seed");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--no-plots", g.no_plots, "suppress image emission (CSVs still written)");

  auto* generate = app.add_subcommand("generate", "generate and cache the synthetic dataset");
  auto* train = app.add_subcommand("train", "run the federated training loop");
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on a split");
  std::string ckpt, split = "test";
  evaluate->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  evaluate->add_option("--split", split, "train|val|test");
  auto* sweep = app.add_subcommand("sweep-ratio", "labeled-ratio sweep vs the FedAvg baseline");
  std::vector<double> ratios;
  int n_seeds = 3;
  sweep->add_option("--ratios", ratios, "labeled ratios (default 0.1 0.2 0.4)");
  sweep->add_option("--seeds", n_seeds, "number of seeds per cell");
  auto* ablation = app.add_subcommand("ablation", "component ablation grid");
  ablation->add_option("--seeds", n_seeds, "number of seeds per row");
  auto* latent = app.add_subcommand("analyze-latent", "latent-space comparison of two checkpoints");
  std::string combined_ckpt, vae_only_ckpt;
  latent->add_option("--combined", combined_ckpt, "combined-model checkpoint dir")->required();
  latent->add_option("--vae-only", vae_only_ckpt, "VAE-only-model checkpoint dir")->required();
  auto* plot = app.add_subcommand("plot", "convergence plots from a report.csv");
  std::string report_path;
  std::vector<int> plot_clients;
  int window = 5;
  plot->add_option("--report", report_path, "path to report.csv")->required();
  plot->add_option("--clients", plot_clients, "client ids to plot (default: all)");
  plot->add_option("--window", window, "moving-average window (1 = raw)");

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) g.seed = seed_arg;

  try {
    if (generate->parsed()) return cmd_generate(g);
    if (train->parsed()) return cmd_train(g);
    if (evaluate->parsed()) return cmd_evaluate(g, ckpt, split);
    if (sweep->parsed()) return cmd_sweep_ratio(g, ratios, n_seeds);
    if (ablation->parsed()) return cmd_ablation(g, n_seeds);
    if (latent->parsed()) return cmd_analyze_latent(g, combined_ckpt, vae_only_ckpt);
    if (plot->parsed()) return cmd_plot(g, report_path, plot_clients, window);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
