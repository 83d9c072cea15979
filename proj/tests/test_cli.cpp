#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>

#include "testutil.hpp"

using namespace fv2ic;
using fv2ic::testing::micro_config;

TEST_CASE("parse_config") {
  SECTION("empty object yields the desk defaults") {
    const ExperimentConfig cfg = parse_config_json(nlohmann::json::object());
    REQUIRE(cfg == ExperimentConfig{});
  }

  SECTION("out-of-range value names the key path") {
    nlohmann::json j{{"dataset", {{"labeled_ratio", 1.5}}}};
    try {
      parse_config_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      REQUIRE(e.field() == "dataset.labeled_ratio");
    }
  }

  SECTION("unknown keys are rejected") {
    REQUIRE_THROWS_AS(parse_config_json({{"datasett", nlohmann::json::object()}}), ConfigError);
    REQUIRE_THROWS_AS(parse_config_json({{"dataset", {{"unknown_knob", 3}}}}), ConfigError);
    try {
      parse_config_json({{"loss", {{"omege", 0.5}}}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      REQUIRE(e.field() == "loss.omege");
    }
  }

  SECTION("wrong types are rejected with the key path") {
    REQUIRE_THROWS_AS(parse_config_json({{"federation", {{"rounds", "many"}}}}), ConfigError);
  }

  SECTION("paper_scale preset") {
    const ExperimentConfig cfg = parse_config_json({{"preset", "paper_scale"}});
    REQUIRE(cfg.federation.rounds == 200);
    REQUIRE(cfg.dataset.num_clients == 10);
    REQUIRE(cfg.federation.batch_labeled == 4);
    REQUIRE(cfg.federation.batch_unlabeled == 20);
    REQUIRE(cfg.federation.lr_unet == 2e-4);
    REQUIRE(cfg.federation.lr_vae == 1e-3);
  }

  SECTION("preset fields can be overridden") {
    const ExperimentConfig cfg =
        parse_config_json({{"preset", "paper_scale"}, {"federation", {{"rounds", 7}}}});
    REQUIRE(cfg.federation.rounds == 7);
    REQUIRE(cfg.dataset.num_clients == 10);
  }

  SECTION("unknown preset rejected") {
    REQUIRE_THROWS_AS(parse_config_json({{"preset", "gpu_cluster"}}), ConfigError);
  }

  SECTION("round-trip: parse(emit(cfg)) == cfg") {
    ExperimentConfig cfg = micro_config();
    cfg.loss.consistency = "gaussian";
    cfg.loss.omega = 0.75;
    cfg.metrics.empty_class = EmptyClassPolicy::skip;
    cfg.output.dir = "elsewhere";
    const ExperimentConfig back = parse_config_json(emit_config(cfg));
    REQUIRE(back == cfg);
  }

  SECTION("config hash is stable and key-sensitive") {
    const ExperimentConfig a = micro_config();
    ExperimentConfig b = micro_config();
    REQUIRE(config_hash(a) == config_hash(b));
    b.loss.lambda_max += 0.01;
    REQUIRE(config_hash(a) != config_hash(b));
  }

  SECTION("file errors") {
    REQUIRE_THROWS_AS(parse_config("/nonexistent/path.json"), ConfigError);
    namespace fs = std::filesystem;
    const fs::path bad = fs::temp_directory_path() / "fv2ic_bad.json";
    std::ofstream(bad) << "{not json";
    REQUIRE_THROWS_AS(parse_config(bad), ConfigError);
    fs::remove(bad);
  }
}

TEST_CASE("csv: formatting and self round-trip") {
  CsvWriter w({"a", "b"});
  w.add_row({fmt_double(0.1), fmt_double(-3.25e-9)});
  w.add_row({fmt_double(12345.0), "text"});
  const CsvTable t = parse_csv(w.str());
  REQUIRE(t.header == std::vector<std::string>{"a", "b"});
  REQUIRE(t.rows.size() == 2);
  REQUIRE(t.number(0, 0) == 0.1);  // shortest round-trip formatting
  REQUIRE(t.number(0, 1) == -3.25e-9);
  REQUIRE_THROWS_AS(t.column("c"), ConfigError);
  REQUIRE_THROWS_AS(t.number(1, 1), ConfigError);
  REQUIRE_THROWS_AS(parse_csv(""), ConfigError);
  REQUIRE_THROWS_AS(w.add_row({"only-one"}), ContractViolation);
}

TEST_CASE("moving_average") {
  const std::vector<double> xs{1, 2, 3, 4, 5};
  REQUIRE(moving_average(xs, 1) == xs);  // window 1 reproduces raw values
  const auto smooth = moving_average(xs, 3);
  REQUIRE(smooth[0] == Catch::Approx(1.5));
  REQUIRE(smooth[2] == Catch::Approx(3.0));
  REQUIRE(smooth[4] == Catch::Approx(4.5));
}

namespace {

// Synthetic 40-round report with two clients' worth of columns.
CsvTable fake_report(int rounds, const std::vector<int>& client_ids) {
  std::vector<std::string> header{"round", "lambda"};
  for (int c : client_ids) {
    const std::string p = "c" + std::to_string(c) + "_";
    for (const char* k : {"vae_kl", "vae_mse", "dice", "ce", "cons", "seg_total"})
      header.push_back(p + k);
  }
  for (const char* k : {"val_dice", "val_jaccard", "val_sensitivity", "val_accuracy",
                        "distill_kl_first", "distill_kl_last", "distill_kl_mean", "up_bytes",
                        "down_bytes"})
    header.emplace_back(k);
  CsvWriter w(header);
  for (int t = 0; t < rounds; ++t) {
    std::vector<std::string> row{std::to_string(t), "0.1"};
    for (std::size_t c = 0; c < client_ids.size(); ++c) {
      for (int k = 0; k < 6; ++k) row.push_back(fmt_double(1.0 / (t + 1) + 0.01 * k));
    }
    for (int k = 0; k < 7; ++k) row.push_back(fmt_double(0.5 / (t + 1)));
    row.push_back("100");
    row.push_back("100");
    w.add_row(row);
  }
  return parse_csv(w.str());
}

}  // namespace

TEST_CASE("convergence series from report.csv") {
  const CsvTable report = fake_report(40, {1, 6});

  SECTION("40-round report gives 40-point curves") {
    const ConvergenceSeries s = convergence_series(report, {1, 6}, 5);
    REQUIRE(s.rounds.size() == 40);
    REQUIRE(s.supervised.at(1).size() == 40);
    REQUIRE(s.distill_kl.size() == 40);
  }

  SECTION("selecting clients {1,6} yields exactly two series per panel") {
    const ConvergenceSeries s = convergence_series(report, {1, 6}, 1);
    REQUIRE(s.supervised.size() == 2);
    REQUIRE(s.consistency.size() == 2);
    REQUIRE(s.supervised.count(1) == 1);
    REQUIRE(s.supervised.count(6) == 1);
  }

  SECTION("window 1 reproduces the raw column") {
    const ConvergenceSeries s = convergence_series(report, {1}, 1);
    REQUIRE(s.supervised.at(1) == report.column_values("c1_dice"));
  }

  SECTION("missing columns raise an error") {
    REQUIRE_THROWS_AS(convergence_series(report, {2}, 1), ConfigError);
  }

  SECTION("plots are written") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "fv2ic_plot_test";
    fs::remove_all(dir);
    write_convergence_plots(convergence_series(report, {1, 6}, 5), dir);
    REQUIRE(fs::exists(dir / "supervised_loss.svg"));
    REQUIRE(fs::exists(dir / "unsupervised_loss.svg"));
    std::ifstream f(dir / "supervised_loss.svg");
    std::stringstream ss;
    ss << f.rdbuf();
    REQUIRE(ss.str().find("polyline") != std::string::npos);
    fs::remove_all(dir);
  }
}

TEST_CASE("ablation grid mirrors the component axes") {
  const auto rows = ablation_configs(micro_config());
  REQUIRE(rows.size() == 7);

  SECTION("row names") {
    REQUIRE(rows[0].name == "dice_only");
    REQUIRE(rows[1].name == "dice_ce");
    REQUIRE(rows[6].name == "full");
  }

  SECTION("+CE differs from dice_only only in omega") {
    ExperimentConfig a = rows[0].cfg;
    const ExperimentConfig& b = rows[1].cfg;
    REQUIRE(a.loss.omega == 0.0);
    REQUIRE(b.loss.omega == micro_config().loss.omega);
    a.loss.omega = b.loss.omega;
    REQUIRE(a == b);
  }

  SECTION("augmentation rows differ only in the consistency mode") {
    ExperimentConfig g = rows[2].cfg;  // gaussian_aug
    const ExperimentConfig& v = rows[3].cfg;  // vae_aug
    REQUIRE(g.loss.consistency == "gaussian");
    REQUIRE(v.loss.consistency == "vae");
    g.loss.consistency = "vae";
    REQUIRE(g == v);
  }

  SECTION("no-distillation row is the full row with distillation off") {
    ExperimentConfig nd = rows[5].cfg;  // vae_aug_feature
    const ExperimentConfig& full = rows[6].cfg;
    REQUIRE(!nd.federation.distill);
    REQUIRE(full.federation.distill);
    nd.federation.distill = true;
    REQUIRE(nd == full);
  }
}

TEST_CASE("run_ablation aggregates per-seed metrics into 7 rows") {
  // Stub runner: deterministic fake metrics, no training.
  RunFn stub = [](const ExperimentConfig& cfg) {
    ExperimentResult r;
    r.test.dice = 0.5 + 0.01 * static_cast<double>(cfg.seed);
    r.test.jaccard = 0.4;
    r.test.sensitivity = 0.6;
    r.test.accuracy = 0.9;
    return r;
  };
  const auto rows = run_ablation(micro_config(), {1, 2, 3}, stub, 1);
  REQUIRE(rows.size() == 7);
  for (const auto& r : rows) {
    REQUIRE(r.ok);
    REQUIRE(r.per_seed.size() == 3);
    REQUIRE(r.mean.dice == Catch::Approx(0.52));
  }
  const CsvWriter csv = ablation_csv(rows);
  REQUIRE(csv.row_count() == 7);
}

TEST_CASE("sweep_labeled_ratio") {
  RunFn stub = [](const ExperimentConfig& cfg) {
    if (cfg.seed == 13) throw std::runtime_error("boom");
    ExperimentResult r;
    r.test.dice = cfg.dataset.labeled_ratio + (cfg.model.latent_injection ? 0.1 : 0.0);
    return r;
  };

  SECTION("grid size: ratios x methods x seeds") {
    const auto cells = sweep_labeled_ratio(micro_config(), {0.2, 0.6, 1.0}, {1, 2, 3}, stub, 1);
    REQUIRE(cells.size() == 18);
    const CsvWriter csv = sweep_csv(cells);
    REQUIRE(csv.row_count() == 18);
    REQUIRE(sweep_mean_dice(cells, 0.2, "fv2ic") == Catch::Approx(0.3));
    REQUIRE(sweep_mean_dice(cells, 0.2, "fedavg_baseline") == Catch::Approx(0.2));
  }

  SECTION("failed cells are marked and the sweep continues") {
    const auto cells = sweep_labeled_ratio(micro_config(), {0.5}, {12, 13}, stub, 1);
    int ok = 0, failed = 0;
    for (const auto& c : cells) (c.ok ? ok : failed)++;
    REQUIRE(ok == 2);
    REQUIRE(failed == 2);
    for (const auto& c : cells)
      if (!c.ok) REQUIRE(c.error == "boom");
  }

  SECTION("invalid ratios rejected") {
    REQUIRE_THROWS_AS(sweep_labeled_ratio(micro_config(), {0.0}, {1}, stub, 1), ConfigError);
  }
}

TEST_CASE("latent analysis") {
  ExperimentConfig cfg = micro_config();
  DatasetConfig d = cfg.dataset;
  d.seed = cfg.seed;
  const FederatedDataset ds = generate_dataset(d);
  const ArchConfig arch = cfg.arch();
  Rng r1(1), r2(2);
  auto [vae1, unet1] = init_models(arch, r1);
  auto [vae2, unet2] = init_models(arch, r2);
  const ModelParams ckpt1 = combined_snapshot(vae1, unet1);
  const ModelParams ckpt2 = combined_snapshot(vae2, unet2);

  SECTION("avg_d matches the brute-force pairwise loop") {
    const Tensor mus = encode_means(vae1, ds.test);
    const int n = mus.dim(0), dd = mus.dim(1);
    double brute = 0.0;
    int pairs = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        double sq = 0.0;
        for (int k = 0; k < dd; ++k) {
          const double diff = mus[i * dd + k] - mus[j * dd + k];
          sq += diff * diff;
        }
        brute += std::sqrt(sq);
        ++pairs;
      }
    brute /= pairs;
    REQUIRE(avg_pairwise_distance(mus) == Catch::Approx(brute).margin(1e-9));
  }

  SECTION("single point has avg_d zero") {
    const std::vector<Sample> one{ds.test[0]};
    REQUIRE(avg_pairwise_distance(encode_means(vae1, one)) == 0.0);
  }

  SECTION("identical checkpoints report identical avg_d") {
    const LatentReport rep = analyze_latent(ckpt1, ckpt1, ds.test, arch, cfg.metrics);
    REQUIRE(rep.combined.avg_d == rep.vae_only.avg_d);
  }

  SECTION("full report has coords and dice per sample") {
    const LatentReport rep = analyze_latent(ckpt1, ckpt2, ds.test, arch, cfg.metrics);
    REQUIRE(rep.combined.coords.size() == ds.test.size());
    REQUIRE(rep.combined.dice.size() == ds.test.size());
    REQUIRE(rep.combined.avg_d != rep.vae_only.avg_d);

    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "fv2ic_latent_test";
    fs::remove_all(dir);
    write_latent_outputs(rep, dir, true);
    REQUIRE(fs::exists(dir / "latent_summary.csv"));
    REQUIRE(fs::exists(dir / "latent_points.csv"));
    REQUIRE(fs::exists(dir / "latent_combined.svg"));
    const CsvTable pts = load_csv(dir / "latent_points.csv");
    REQUIRE(pts.rows.size() == 2 * ds.test.size());
    fs::remove_all(dir);
  }

  SECTION("mds projection preserves the two-point distance") {
    Tensor two({2, 4});
    for (int k = 0; k < 4; ++k) two[4 + k] = 1.0;
    const auto coords = mds_project(two);
    const double dx = coords[0][0] - coords[1][0];
    const double dy = coords[0][1] - coords[1][1];
    REQUIRE(std::sqrt(dx * dx + dy * dy) == Catch::Approx(2.0).margin(1e-9));
  }
}

TEST_CASE("worker budget reads FV2IC_THREADS") {
  setenv("FV2IC_THREADS", "3", 1);
  REQUIRE(worker_budget() == 3);
  setenv("FV2IC_THREADS", "0", 1);  // invalid -> hardware fallback
  REQUIRE(worker_budget() >= 1);
  unsetenv("FV2IC_THREADS");
  REQUIRE(worker_budget() >= 1);
}

TEST_CASE("baseline_config strips every semi-supervised component") {
  const ExperimentConfig b = baseline_config(micro_config());
  REQUIRE(b.loss.consistency == "off");
  REQUIRE(b.loss.lambda_max == 0.0);
  REQUIRE(!b.model.latent_injection);
  REQUIRE(!b.federation.distill);
}
