#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fv2ic/checkpoint.hpp"
#include "fv2ic/config.hpp"
#include "fv2ic/csv.hpp"
#include "fv2ic/losses.hpp"
#include "fv2ic/metrics.hpp"
#include "fv2ic/models.hpp"
#include "fv2ic/optim.hpp"
#include "fv2ic/parallel.hpp"
#include "fv2ic/synthdata.hpp"

namespace fv2ic {

// In-process federation simulator: clients run Algorithm-1-style local
// training (VAE phase, then segmentation phase), the server runs FedAvg and
// the generated-sample distillation pass, and a ledger charges float32
// payloads for every upload and broadcast.

struct ClientState {
  int client_id = 0;
  const ClientDataset* data = nullptr;
  std::unique_ptr<VaeModel> vae;
  std::unique_ptr<UnetModel> unet;
  BatchSampler sampler;
  Rng rng;

  ClientState(int id, const ClientDataset& ds, const ArchConfig& arch, std::uint64_t seed)
      : client_id(id),
        data(&ds),
        sampler(ds),
        rng(derive_rng(seed, "client", id)) {
    Rng init = derive_rng(seed, "client-init", id);
    vae = std::make_unique<VaeModel>(arch, init);
    unet = std::make_unique<UnetModel>(arch, init);
  }

  long size() const { return data->size(); }
};

struct ServerState {
  std::unique_ptr<VaeModel> vae;
  std::unique_ptr<UnetModel> unet;
  int round = 0;
  int total_rounds = 0;
  Rng rng;

  ServerState(const ArchConfig& arch, int rounds, std::uint64_t seed)
      : total_rounds(rounds), rng(derive_rng(seed, "server")) {
    Rng init = derive_rng(seed, "init");
    vae = std::make_unique<VaeModel>(arch, init);
    unet = std::make_unique<UnetModel>(arch, init);
  }

  ModelParams snapshot() const { return combined_snapshot(*vae, *unet); }
  void load(const ModelParams& p) { load_combined(*vae, *unet, p); }
};

struct CommLedger {
  struct Row {
    int round = 0;
    int client = 0;
    std::uint64_t up_bytes = 0;
    std::uint64_t down_bytes = 0;
  };
  std::vector<Row> rows;
  std::uint64_t total_up = 0;
  std::uint64_t total_down = 0;

  void record(int round, int client, std::uint64_t up, std::uint64_t down) {
    rows.push_back({round, client, up, down});
    total_up += up;
    total_down += down;
  }

  std::uint64_t round_total(int round) const {
    std::uint64_t t = 0;
    for (const Row& r : rows)
      if (r.round == round) t += r.up_bytes + r.down_bytes;
    return t;
  }
};

struct ClientRoundSummary {
  LossBreakdown vae;  // phase A means
  LossBreakdown seg;  // phase B means
};

struct RoundRow {
  int round = 0;
  double lambda_t = 0.0;
  std::vector<ClientRoundSummary> clients;
  SegMetrics val;
  std::vector<double> distill_kl;  // per-iteration trajectory
  std::uint64_t up_bytes = 0;
  std::uint64_t down_bytes = 0;
};

inline void clear_grads(const std::vector<Var>& params) {
  for (const Var& p : params) p->grad = Tensor();
}

inline int auto_iters(int configured, long dataset_size, int batch_all) {
  if (configured >= 0) return configured;  // explicit count; 0 skips the phase
  if (batch_all <= 0) return 1;
  return static_cast<int>((dataset_size + batch_all - 1) / batch_all);  // one epoch
}

// Local training: pull the broadcast parameters, run iters_vae VAE steps on
// mixed batches, then iters_seg steps of the combined segmentation loss that
// update both networks.
inline ClientRoundSummary client_local_train(ClientState& state, const ModelParams& global,
                                             double t, const ExperimentConfig& cfg) {
  load_combined(*state.vae, *state.unet, global);
  const LossConfig lc = cfg.loss_config();
  const int batch_all = cfg.federation.batch_labeled + cfg.federation.batch_unlabeled;
  ClientRoundSummary sum;

  try {
    const int iters_vae = auto_iters(cfg.federation.iters_vae, state.size(), batch_all);
    if (iters_vae > 0) {
      Adam opt({{state.vae->params().vars(), cfg.federation.lr_vae}});
      for (int it = 0; it < iters_vae; ++it) {
        Batch b = state.sampler.next(cfg.federation.batch_labeled, cfg.federation.batch_unlabeled,
                                     state.rng);
        auto g = vae_loss(*state.vae, b.all_images, state.rng, lc.sample_z);
        backward(g.total);
        opt.step();
        const LossBreakdown v = g.values();
        sum.vae.kl += v.kl / iters_vae;
        sum.vae.mse += v.mse / iters_vae;
        sum.vae.total += v.total / iters_vae;
      }
      clear_grads(state.vae->params().vars());
    }

    const int iters_seg = auto_iters(cfg.federation.iters_seg, state.size(), batch_all);
    if (iters_seg > 0) {
      // The segmentation phase updates both networks; the VAE group only
      // receives gradients when z or the reconstruction branch is in play.
      const bool vae_in_graph = lc.use_latent || lc.consistency == ConsistencyMode::vae;
      std::vector<Adam::Group> groups{{state.unet->params().vars(), cfg.federation.lr_unet}};
      if (vae_in_graph) groups.push_back({state.vae->params().vars(), cfg.federation.lr_vae});
      Adam opt(std::move(groups));
      for (int it = 0; it < iters_seg; ++it) {
        Batch b = state.sampler.next(cfg.federation.batch_labeled, cfg.federation.batch_unlabeled,
                                     state.rng);
        auto g = seg_loss(*state.unet, *state.vae, b.labeled_images, b.labeled_masks, b.all_images,
                          t, lc, state.rng);
        backward(g.total);
        opt.step();
        const LossBreakdown v = g.values();
        sum.seg.dice += v.dice / iters_seg;
        sum.seg.ce += v.ce / iters_seg;
        sum.seg.cons += v.cons / iters_seg;
        sum.seg.total += v.total / iters_seg;
        sum.seg.lambda_t = v.lambda_t;
        sum.seg.omega = v.omega;
      }
      clear_grads(state.unet->params().vars());
      clear_grads(state.vae->params().vars());
    }
  } catch (const NumericFault& e) {
    throw NumericFault("client " + std::to_string(state.client_id) + ": " + e.where());
  }
  return sum;
}

// Parameter-wise weighted mean, weights |x_c| / sum |x_c|, accumulated in
// ascending client order so the summation order is fixed.
inline ModelParams fedavg_aggregate(const std::vector<ModelParams>& uploads,
                                    const std::vector<long>& sizes) {
  if (uploads.empty()) throw ProtocolError("fedavg: no clients");
  if (uploads.size() != sizes.size()) throw ProtocolError("fedavg: sizes/uploads mismatch");
  const Manifest ref = uploads[0].manifest();
  for (const ModelParams& p : uploads) {
    if (p.manifest() != ref) throw ProtocolError("fedavg: manifest mismatch");
  }
  double total = 0.0;
  for (long s : sizes) total += static_cast<double>(s);
  ModelParams out;
  out.names = uploads[0].names;
  for (const Tensor& t : uploads[0].tensors) out.tensors.emplace_back(t.shape());
  for (std::size_t c = 0; c < uploads.size(); ++c) {
    const double w = static_cast<double>(sizes[c]) / total;
    for (std::size_t k = 0; k < out.tensors.size(); ++k) {
      Tensor& dst = out.tensors[k];
      const Tensor& src = uploads[c].tensors[k];
      for (int i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    }
  }
  return out;
}

// Size-weighted ensemble of the clients' predictions on generated images:
// each client decodes z with its own decoder and segments with its own UNet.
inline Tensor ensemble_predict(const std::vector<std::unique_ptr<ClientState>>& clients,
                               const Tensor& z_batch) {
  if (clients.empty()) throw ProtocolError("ensemble_predict: no clients");
  double total = 0.0;
  for (const auto& c : clients) total += static_cast<double>(c->size());
  Tensor out;
  for (const auto& c : clients) {
    const double w = static_cast<double>(c->size()) / total;
    Var z = constant(z_batch);
    Var img = c->vae->decode(z);
    Var probs = softmax_channels(
        c->unet->forward(img, c->unet->arch().latent_injection ? z : Var()));
    if (out.empty()) {
      out = Tensor(probs->value.shape());
    }
    for (int i = 0; i < out.size(); ++i) out[i] += w * probs->value[i];
  }
  return out;
}

// Server-side consistency distillation on sampled latents. The global
// decoder and UNet descend on the KL to the client ensemble; the global
// encoder is not part of this graph (it stays frozen unless the config
// routes it into the optimizer, where it still receives no gradient).
inline std::vector<double> distill(ServerState& server,
                                   const std::vector<std::unique_ptr<ClientState>>& clients,
                                   const ExperimentConfig& cfg) {
  std::vector<double> trajectory;
  if (!cfg.federation.distill || cfg.federation.iters_distill <= 0) return trajectory;
  const LossConfig lc = cfg.loss_config();
  std::vector<Adam::Group> groups{{server.vae->decoder_vars(), cfg.federation.lr_distill},
                                  {server.unet->params().vars(), cfg.federation.lr_distill}};
  if (cfg.federation.distill_update_encoder) {
    groups.push_back({server.vae->encoder_vars(), cfg.federation.lr_distill});
  }
  Adam opt(std::move(groups));

  const int dbatch = cfg.federation.distill_batch;
  const int ddim = server.vae->latent_dim();
  Tensor fixed_z;
  if (cfg.federation.distill_fixed_z) fixed_z = Tensor::randn({dbatch, ddim}, server.rng);

  for (int it = 0; it < cfg.federation.iters_distill; ++it) {
    const Tensor zt =
        cfg.federation.distill_fixed_z ? fixed_z : Tensor::randn({dbatch, ddim}, server.rng);
    const Tensor target = ensemble_predict(clients, zt);
    Var z = constant(zt);
    Var img = server.vae->decode(z);
    Var logits = server.unet->forward(img, server.unet->arch().latent_injection ? z : Var());
    Var loss = kl_vs_softmax(target, logits, lc.prob_clamp, lc.distill_reverse);
    ensure_finite(loss->value, "distill");
    trajectory.push_back(loss->value[0]);
    backward(loss);
    opt.step();
  }
  clear_grads(server.vae->params().vars());
  clear_grads(server.unet->params().vars());
  return trajectory;
}

// Deterministic split evaluation with z = mu. Returns macro metrics averaged
// per image (or pooled counts when configured) plus per-sample dice.
struct EvalResult {
  SegMetrics metrics;
  std::vector<double> per_sample_dice;
};

inline EvalResult evaluate_split(const VaeModel& vae, const UnetModel& unet,
                                 const std::vector<Sample>& split, const MetricsConfig& mc,
                                 int batch = 16) {
  EvalResult res;
  if (split.empty()) return res;
  const int C = unet.arch().num_classes;
  ConfusionCounts pooled;
  pooled.classes.resize(static_cast<std::size_t>(C));
  int done = 0;
  while (done < static_cast<int>(split.size())) {
    const int n = std::min(batch, static_cast<int>(split.size()) - done);
    std::vector<const Sample*> chunk;
    for (int i = 0; i < n; ++i) chunk.push_back(&split[static_cast<std::size_t>(done + i)]);
    Var x = constant(detail::stack_images(chunk));
    Var z;
    if (unet.arch().latent_injection) {
      auto [mu, logvar] = vae.encode(x);
      z = mu;  // evaluation contract: z = mu
    }
    Var logits = unet.forward(x, z);
    const int hw = logits->value.dim(2) * logits->value.dim(3);
    for (int i = 0; i < n; ++i) {
      Tensor one = Tensor::from({C, logits->value.dim(2), logits->value.dim(3)},
                                std::vector<double>(
                                    logits->value.values().begin() + static_cast<std::ptrdiff_t>(i) * C * hw,
                                    logits->value.values().begin() + static_cast<std::ptrdiff_t>(i + 1) * C * hw));
      const std::vector<std::uint8_t> pred = argmax_mask(one);
      const ConfusionCounts cc = confusion(pred, chunk[static_cast<std::size_t>(i)]->mask, C);
      const SegMetrics m = macro_metrics(cc, mc.foreground_only, mc.empty_class);
      res.per_sample_dice.push_back(m.dice);
      if (mc.pooled) {
        for (int c = 0; c < C; ++c) {
          pooled.classes[static_cast<std::size_t>(c)].tp += cc.classes[static_cast<std::size_t>(c)].tp;
          pooled.classes[static_cast<std::size_t>(c)].fp += cc.classes[static_cast<std::size_t>(c)].fp;
          pooled.classes[static_cast<std::size_t>(c)].fn += cc.classes[static_cast<std::size_t>(c)].fn;
          pooled.classes[static_cast<std::size_t>(c)].tn += cc.classes[static_cast<std::size_t>(c)].tn;
        }
      } else {
        res.metrics += m;
      }
    }
    done += n;
  }
  if (mc.pooled) {
    res.metrics = macro_metrics(pooled, mc.foreground_only, mc.empty_class);
  } else {
    res.metrics = res.metrics.scaled(1.0 / static_cast<double>(split.size()));
  }
  return res;
}

// One federation round: broadcast, parallel local training, upload, FedAvg,
// distillation, validation. Client order cannot affect the result: every
// client owns its rng and models, and aggregation runs in ascending id.
inline RoundRow run_round(ServerState& server, std::vector<std::unique_ptr<ClientState>>& clients,
                          int t, const ExperimentConfig& cfg, const FederatedDataset& ds,
                          CommLedger& ledger, int max_workers = 1) {
  RoundRow row;
  row.round = t;
  const LossConfig lc = cfg.loss_config();
  row.lambda_t = ramp_weight(t, lc.lambda_max, lc.ramp_rounds);

  const ModelParams global = server.snapshot();
  const std::uint64_t payload = global.payload_bytes();

  const int n = static_cast<int>(clients.size());
  std::vector<ClientRoundSummary> summaries(static_cast<std::size_t>(n));
  std::vector<ModelParams> uploads(static_cast<std::size_t>(n));
  parallel_for(
      n,
      [&](int i) {
        auto& c = *clients[static_cast<std::size_t>(i)];
        summaries[static_cast<std::size_t>(i)] = client_local_train(c, global, t, cfg);
        uploads[static_cast<std::size_t>(i)] = combined_snapshot(*c.vae, *c.unet);
      },
      max_workers);
  row.clients = std::move(summaries);

  std::vector<long> sizes;
  for (const auto& c : clients) sizes.push_back(c->size());
  for (int i = 0; i < n; ++i) {
    ledger.record(t, clients[static_cast<std::size_t>(i)]->client_id, payload, payload);
  }
  row.up_bytes = payload * static_cast<std::uint64_t>(n);
  row.down_bytes = payload * static_cast<std::uint64_t>(n);

  server.load(fedavg_aggregate(uploads, sizes));
  row.distill_kl = distill(server, clients, cfg);
  row.val = evaluate_split(*server.vae, *server.unet, ds.val, cfg.metrics).metrics;
  server.round = t + 1;
  return row;
}

struct ExperimentResult {
  std::vector<RoundRow> rounds;
  CommLedger ledger;
  SegMetrics test;
  int best_round = -1;
  double best_val_dice = -1.0;
  ModelParams best_params;   // best-validation checkpoint (VAE + UNet)
  ModelParams final_params;  // last-round global parameters
  double wall_time_s = 0.0;
  std::string config_hash;
};

inline CsvWriter report_csv(const std::vector<RoundRow>& rounds, int num_clients) {
  std::vector<std::string> header{"round", "lambda"};
  for (int c = 0; c < num_clients; ++c) {
    const std::string p = "c" + std::to_string(c) + "_";
    for (const char* k : {"vae_kl", "vae_mse", "dice", "ce", "cons", "seg_total"}) {
      header.push_back(p + k);
    }
  }
  for (const char* k : {"val_dice", "val_jaccard", "val_sensitivity", "val_accuracy",
                        "distill_kl_first", "distill_kl_last", "distill_kl_mean", "up_bytes",
                        "down_bytes"}) {
    header.emplace_back(k);
  }
  CsvWriter csv(header);
  for (const RoundRow& r : rounds) {
    std::vector<std::string> row{std::to_string(r.round), fmt_double(r.lambda_t)};
    for (const ClientRoundSummary& s : r.clients) {
      row.push_back(fmt_double(s.vae.kl));
      row.push_back(fmt_double(s.vae.mse));
      row.push_back(fmt_double(s.seg.dice));
      row.push_back(fmt_double(s.seg.ce));
      row.push_back(fmt_double(s.seg.cons));
      row.push_back(fmt_double(s.seg.total));
    }
    double first = 0.0, last = 0.0, mean = 0.0;
    if (!r.distill_kl.empty()) {
      first = r.distill_kl.front();
      last = r.distill_kl.back();
      for (double v : r.distill_kl) mean += v;
      mean /= static_cast<double>(r.distill_kl.size());
    }
    row.push_back(fmt_double(r.val.dice));
    row.push_back(fmt_double(r.val.jaccard));
    row.push_back(fmt_double(r.val.sensitivity));
    row.push_back(fmt_double(r.val.accuracy));
    row.push_back(fmt_double(first));
    row.push_back(fmt_double(last));
    row.push_back(fmt_double(mean));
    row.push_back(std::to_string(r.up_bytes));
    row.push_back(std::to_string(r.down_bytes));
    csv.add_row(std::move(row));
  }
  return csv;
}

inline CsvWriter ledger_csv(const CommLedger& ledger) {
  CsvWriter csv({"round", "client", "up_bytes", "down_bytes"});
  for (const auto& r : ledger.rows) {
    csv.add_row({std::to_string(r.round), std::to_string(r.client), std::to_string(r.up_bytes),
                 std::to_string(r.down_bytes)});
  }
  return csv;
}

// Full run: build the dataset, train `rounds` federation rounds, select the
// best-validation checkpoint and score it on the test split. When `out_dir`
// is nonempty, writes report.csv, ledger.csv, summary.json and checkpoints.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg_in,
                                       const std::filesystem::path& out_dir = {},
                                       int max_workers = 1) {
  ExperimentConfig cfg = cfg_in;
  cfg.dataset.seed = cfg.seed;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  const FederatedDataset ds = generate_dataset(cfg.dataset);
  const ArchConfig arch = cfg.arch();
  ServerState server(arch, cfg.federation.rounds, cfg.seed);
  std::vector<std::unique_ptr<ClientState>> clients;
  for (int c = 0; c < cfg.dataset.num_clients; ++c) {
    clients.push_back(std::make_unique<ClientState>(c, ds.clients[static_cast<std::size_t>(c)],
                                                    arch, cfg.seed));
  }

  ExperimentResult res;
  res.config_hash = config_hash(cfg);
  const bool write = !out_dir.empty();
  if (write) std::filesystem::create_directories(out_dir);

  for (int t = 0; t < cfg.federation.rounds; ++t) {
    RoundRow row = run_round(server, clients, t, cfg, ds, res.ledger, max_workers);
    if (row.val.dice > res.best_val_dice) {
      res.best_val_dice = row.val.dice;
      res.best_round = t;
      res.best_params = server.snapshot();
    }
    res.rounds.push_back(std::move(row));
    if (write && cfg.output.checkpoint_every > 0 && (t + 1) % cfg.output.checkpoint_every == 0) {
      save_checkpoint(server.snapshot(),
                      out_dir / "checkpoints" / ("round_" + std::to_string(t + 1)));
    }
  }
  res.final_params = server.snapshot();

  // Test metrics come from the best-validation checkpoint.
  {
    VaeModel vae(arch, server.rng);  // throwaway init, overwritten by load
    UnetModel unet(arch, server.rng);
    load_combined(vae, unet, res.best_params);
    res.test = evaluate_split(vae, unet, ds.test, cfg.metrics).metrics;
  }
  res.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (write) {
    report_csv(res.rounds, cfg.dataset.num_clients).save(out_dir / "report.csv");
    ledger_csv(res.ledger).save(out_dir / "ledger.csv");
    save_checkpoint(res.best_params, out_dir / "checkpoints" / "best");
    save_checkpoint(res.final_params, out_dir / "checkpoints" / "final");

    nlohmann::json summary;
    summary["config_hash"] = res.config_hash;
    summary["config"] = emit_config(cfg);
    summary["seed"] = cfg.seed;
    summary["rounds"] = cfg.federation.rounds;
    summary["best_round"] = res.best_round;
    summary["best_val_dice"] = res.best_val_dice;
    summary["test"] = {{"dice", res.test.dice},
                       {"jaccard", res.test.jaccard},
                       {"sensitivity", res.test.sensitivity},
                       {"accuracy", res.test.accuracy}};
    summary["comm_total_bytes"] = res.ledger.total_up + res.ledger.total_down;
    summary["payload_bytes"] = server.snapshot().payload_bytes();
    summary["param_scalars"] = server.snapshot().total_scalars();
    summary["wall_time_s"] = res.wall_time_s;
    std::ofstream f(out_dir / "summary.json");
    f << summary.dump(2) << "\n";
  }
  return res;
}

}  // namespace fv2ic
