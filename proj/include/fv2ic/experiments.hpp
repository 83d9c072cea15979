#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fv2ic/analysis.hpp"
#include "fv2ic/config.hpp"
#include "fv2ic/csv.hpp"
#include "fv2ic/fedsim.hpp"
#include "fv2ic/parallel.hpp"
#include "fv2ic/svgplot.hpp"

namespace fv2ic {

// Labeled-only FedAvg baseline: no consistency, no latent injection, no
// distillation. The VAE still trains in its own phase (it has no path into
// the segmentation loss), which doubles as the "VAE trained alone" reference
// for the latent analysis.
inline ExperimentConfig baseline_config(ExperimentConfig cfg) {
  cfg.loss.consistency = "off";
  cfg.loss.lambda_max = 0.0;
  cfg.model.latent_injection = false;
  cfg.federation.distill = false;
  return cfg;
}

using RunFn = std::function<ExperimentResult(const ExperimentConfig&)>;

inline RunFn plain_runner(int workers_per_run = 1) {
  return [workers_per_run](const ExperimentConfig& cfg) {
    return run_experiment(cfg, {}, workers_per_run);
  };
}

// ---------------------------------------------------------------------------
// Labeled-ratio sweep (framework vs baseline across ratios and seeds)
// ---------------------------------------------------------------------------

struct SweepCell {
  double ratio = 0.0;
  std::string method;  // "fv2ic" or "fedavg_baseline"
  std::uint64_t seed = 0;
  double dice = 0.0;
  bool ok = false;
  std::string error;
};

inline std::vector<SweepCell> sweep_labeled_ratio(const ExperimentConfig& base,
                                                  const std::vector<double>& ratios,
                                                  const std::vector<std::uint64_t>& seeds,
                                                  const RunFn& runner, int max_workers = 0) {
  std::vector<SweepCell> cells;
  std::vector<ExperimentConfig> cfgs;
  for (double ratio : ratios) {
    if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("sweep.ratios", "ratios must be in (0,1]");
    for (const std::string& method : {std::string("fv2ic"), std::string("fedavg_baseline")}) {
      for (std::uint64_t seed : seeds) {
        ExperimentConfig cfg = method == "fv2ic" ? base : baseline_config(base);
        cfg.dataset.labeled_ratio = ratio;
        cfg.seed = seed;
        cells.push_back({ratio, method, seed, 0.0, false, ""});
        cfgs.push_back(cfg);
      }
    }
  }
  parallel_for(
      static_cast<int>(cells.size()),
      [&](int i) {
        auto& cell = cells[static_cast<std::size_t>(i)];
        try {
          cell.dice = runner(cfgs[static_cast<std::size_t>(i)]).test.dice;
          cell.ok = true;
        } catch (const std::exception& e) {
          cell.error = e.what();  // mark and continue with the remaining cells
        }
      },
      max_workers);
  return cells;
}

inline CsvWriter sweep_csv(const std::vector<SweepCell>& cells) {
  CsvWriter csv({"ratio", "method", "seed", "dice", "status"});
  for (const SweepCell& c : cells) {
    csv.add_row({fmt_double(c.ratio), c.method, std::to_string(c.seed),
                 c.ok ? fmt_double(c.dice) : "nan", c.ok ? "ok" : "failed"});
  }
  return csv;
}

inline double sweep_mean_dice(const std::vector<SweepCell>& cells, double ratio,
                              const std::string& method) {
  double s = 0.0;
  int n = 0;
  for (const SweepCell& c : cells) {
    if (c.ok && c.method == method && c.ratio == ratio) {
      s += c.dice;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("sweep", "no successful cells for " + method);
  return s / n;
}

inline void write_sweep_outputs(const std::vector<SweepCell>& cells,
                                const std::vector<double>& ratios,
                                const std::filesystem::path& out_dir, bool plots) {
  std::filesystem::create_directories(out_dir);
  sweep_csv(cells).save(out_dir / "sweep.csv");
  if (!plots) return;
  SvgPlot plot("Dice vs labeled ratio", "labeled ratio", "test dice");
  for (const std::string& method : {std::string("fv2ic"), std::string("fedavg_baseline")}) {
    std::vector<double> xs, ys;
    for (double r : ratios) {
      xs.push_back(r);
      ys.push_back(sweep_mean_dice(cells, r, method));
    }
    plot.add_series(method, xs, ys);
  }
  plot.save(out_dir / "sweep.svg");
}

// ---------------------------------------------------------------------------
// Ablation grid mirroring the reference table's component axes
// ---------------------------------------------------------------------------

struct AblationRowSpec {
  std::string name;
  ExperimentConfig cfg;
};

inline std::vector<AblationRowSpec> ablation_configs(const ExperimentConfig& base) {
  auto off_everything = [&](ExperimentConfig c) {
    c.loss.consistency = "off";
    c.model.latent_injection = false;
    c.federation.distill = false;
    return c;
  };
  std::vector<AblationRowSpec> rows;
  {
    ExperimentConfig c = off_everything(base);
    c.loss.omega = 0.0;
    rows.push_back({"dice_only", c});
  }
  rows.push_back({"dice_ce", off_everything(base)});
  {
    ExperimentConfig c = off_everything(base);
    c.loss.consistency = "gaussian";
    rows.push_back({"gaussian_aug", c});
  }
  {
    ExperimentConfig c = off_everything(base);
    c.loss.consistency = "vae";
    rows.push_back({"vae_aug", c});
  }
  {
    ExperimentConfig c = off_everything(base);
    c.loss.consistency = "gaussian";
    c.model.latent_injection = true;
    rows.push_back({"gaussian_aug_feature", c});
  }
  {
    ExperimentConfig c = off_everything(base);
    c.loss.consistency = "vae";
    c.model.latent_injection = true;
    rows.push_back({"vae_aug_feature", c});  // full minus distillation
  }
  {
    ExperimentConfig c = base;
    c.loss.consistency = "vae";
    c.model.latent_injection = true;
    c.federation.distill = true;
    rows.push_back({"full", c});
  }
  return rows;
}

struct AblationRowResult {
  std::string name;
  SegMetrics mean;
  std::vector<SegMetrics> per_seed;
  bool ok = false;
  std::string error;
};

inline std::vector<AblationRowResult> run_ablation(const ExperimentConfig& base,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   const RunFn& runner, int max_workers = 0) {
  const std::vector<AblationRowSpec> specs = ablation_configs(base);
  struct Cell {
    std::size_t row;
    ExperimentConfig cfg;
    SegMetrics metrics;
    bool ok = false;
    std::string error;
  };
  std::vector<Cell> cells;
  for (std::size_t r = 0; r < specs.size(); ++r) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = specs[r].cfg;
      cfg.seed = seed;
      cells.push_back({r, cfg, {}, false, ""});
    }
  }
  parallel_for(
      static_cast<int>(cells.size()),
      [&](int i) {
        Cell& cell = cells[static_cast<std::size_t>(i)];
        try {
          cell.metrics = runner(cell.cfg).test;
          cell.ok = true;
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      },
      max_workers);

  std::vector<AblationRowResult> rows(specs.size());
  for (std::size_t r = 0; r < specs.size(); ++r) rows[r].name = specs[r].name;
  for (const Cell& cell : cells) {
    AblationRowResult& row = rows[cell.row];
    if (!cell.ok) {
      row.error = cell.error;
      continue;
    }
    row.per_seed.push_back(cell.metrics);
  }
  for (AblationRowResult& row : rows) {
    if (row.per_seed.empty()) continue;
    for (const SegMetrics& m : row.per_seed) row.mean += m;
    row.mean = row.mean.scaled(1.0 / static_cast<double>(row.per_seed.size()));
    row.ok = true;
  }
  return rows;
}

inline CsvWriter ablation_csv(const std::vector<AblationRowResult>& rows) {
  CsvWriter csv({"configuration", "dice", "jaccard", "sensitivity", "accuracy", "seeds", "status"});
  for (const auto& r : rows) {
    csv.add_row({r.name, fmt_double(r.mean.dice), fmt_double(r.mean.jaccard),
                 fmt_double(r.mean.sensitivity), fmt_double(r.mean.accuracy),
                 std::to_string(r.per_seed.size()), r.ok ? "ok" : ("failed: " + r.error)});
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Convergence curves from report.csv
// ---------------------------------------------------------------------------

struct ConvergenceSeries {
  std::vector<double> rounds;
  std::map<int, std::vector<double>> supervised;   // client -> dice loss
  std::map<int, std::vector<double>> consistency;  // client -> consistency loss
  std::vector<double> distill_kl;                  // server trajectory (mean per round)
};

inline ConvergenceSeries convergence_series(const CsvTable& report,
                                            const std::vector<int>& clients, int window) {
  ConvergenceSeries out;
  out.rounds = report.column_values("round");
  for (int c : clients) {
    const std::string p = "c" + std::to_string(c) + "_";
    out.supervised[c] = moving_average(report.column_values(p + "dice"), window);
    out.consistency[c] = moving_average(report.column_values(p + "cons"), window);
  }
  out.distill_kl = moving_average(report.column_values("distill_kl_mean"), window);
  return out;
}

inline void write_convergence_plots(const ConvergenceSeries& s,
                                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  SvgPlot sup("Supervised loss", "round", "dice loss");
  for (const auto& [c, ys] : s.supervised) sup.add_series("client " + std::to_string(c), s.rounds, ys);
  sup.save(out_dir / "supervised_loss.svg");

  SvgPlot uns("Unsupervised loss", "round", "loss");
  for (const auto& [c, ys] : s.consistency)
    uns.add_series("cons client " + std::to_string(c), s.rounds, ys);
  uns.add_series("distill kl", s.rounds, s.distill_kl);
  uns.save(out_dir / "unsupervised_loss.svg");
}

// ---------------------------------------------------------------------------
// Latent report emission
// ---------------------------------------------------------------------------

inline void write_latent_outputs(const LatentReport& rep, const std::filesystem::path& out_dir,
                                 bool plots) {
  std::filesystem::create_directories(out_dir);
  {
    CsvWriter csv({"model", "avg_d", "points"});
    for (const LatentModelReport* m : {&rep.combined, &rep.vae_only}) {
      csv.add_row({m->name, fmt_double(m->avg_d), std::to_string(m->coords.size())});
    }
    csv.save(out_dir / "latent_summary.csv");
  }
  {
    CsvWriter csv({"model", "index", "x", "y", "dice"});
    for (const LatentModelReport* m : {&rep.combined, &rep.vae_only}) {
      for (std::size_t i = 0; i < m->coords.size(); ++i) {
        csv.add_row({m->name, std::to_string(i), fmt_double(m->coords[i][0]),
                     fmt_double(m->coords[i][1]), fmt_double(m->dice[i])});
      }
    }
    csv.save(out_dir / "latent_points.csv");
  }
  if (!plots) return;
  for (const LatentModelReport* m : {&rep.combined, &rep.vae_only}) {
    SvgPlot plot("Latent projection: " + m->name + " (avg_d " + fmt_double(m->avg_d) + ")",
                 "component 1", "component 2");
    std::vector<double> hx, hy, lx, ly;
    for (std::size_t i = 0; i < m->coords.size(); ++i) {
      if (m->dice[i] > 0.9) {
        hx.push_back(m->coords[i][0]);
        hy.push_back(m->coords[i][1]);
      } else {
        lx.push_back(m->coords[i][0]);
        ly.push_back(m->coords[i][1]);
      }
    }
    plot.add_scatter("dice > 0.9", hx, hy);
    plot.add_scatter("dice <= 0.9", lx, ly);
    plot.save(out_dir / ("latent_" + m->name + ".svg"));
  }
}

}  // namespace fv2ic
