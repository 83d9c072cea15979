#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "fv2ic/errors.hpp"
#include "fv2ic/losses.hpp"
#include "fv2ic/metrics.hpp"
#include "fv2ic/models.hpp"
#include "fv2ic/synthdata.hpp"

namespace fv2ic {

struct FederationConfig {
  int rounds = 40;
  int batch_labeled = 2;
  int batch_unlabeled = 6;
  int iters_vae = -1;     // -1: one pass over the client's data per round; 0: skip
  int iters_seg = -1;     // -1: one pass per round; 0: skip
  int iters_distill = 5;
  int distill_batch = 12;
  bool distill = true;
  bool distill_fixed_z = false;
  bool distill_update_encoder = false;
  double lr_unet = 1e-3;
  double lr_vae = 2e-3;
  double lr_distill = 2e-3;

  bool operator==(const FederationConfig&) const = default;
};

struct MetricsConfig {
  bool foreground_only = true;
  bool pooled = false;  // pool pixel counts over the split instead of per-image means
  EmptyClassPolicy empty_class = EmptyClassPolicy::score_one;

  bool operator==(const MetricsConfig&) const = default;
};

struct OutputConfig {
  std::string dir = "out";
  int checkpoint_every = 10;  // 0 disables periodic checkpoints
  bool plots = true;

  bool operator==(const OutputConfig&) const = default;
};

struct ModelConfig {
  int latent_dim = 16;
  int unet_depth = 3;
  int unet_width = 8;
  int vae_levels = 3;
  int vae_width = 8;
  int inject_channels = 16;
  bool latent_injection = true;
  bool sample_z = true;

  bool operator==(const ModelConfig&) const = default;
};

struct LossSettings {
  double omega = 0.5;
  double lambda_max = 0.1;
  double ramp_rounds = -1;  // -1: 0.6 * rounds
  std::string consistency = "vae";  // vae | gaussian | off
  double sigma_noise = 0.1;
  double dice_smooth = 1e-5;
  double prob_clamp = 1e-8;
  bool cons_on_logits = false;
  bool distill_reverse = false;

  bool operator==(const LossSettings&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  ModelConfig model;
  LossSettings loss;
  FederationConfig federation;
  MetricsConfig metrics;
  OutputConfig output;

  bool operator==(const ExperimentConfig& o) const {
    return seed == o.seed && dataset_eq(dataset, o.dataset) && model == o.model &&
           loss == o.loss && federation == o.federation && metrics == o.metrics &&
           output == o.output;
  }

  ArchConfig arch() const {
    ArchConfig a;
    a.image_size = dataset.image_size;
    a.num_classes = dataset.num_classes;
    a.latent_dim = model.latent_dim;
    a.unet_depth = model.unet_depth;
    a.unet_width = model.unet_width;
    a.vae_levels = model.vae_levels;
    a.vae_width = model.vae_width;
    a.inject_channels = model.inject_channels;
    a.latent_injection = model.latent_injection;
    a.sample_z_in_training = model.sample_z;
    return a;
  }

  LossConfig loss_config() const {
    LossConfig c;
    c.omega = loss.omega;
    c.lambda_max = loss.lambda_max;
    c.ramp_rounds = loss.ramp_rounds < 0 ? 0.6 * federation.rounds : loss.ramp_rounds;
    c.consistency = loss.consistency == "vae"        ? ConsistencyMode::vae
                    : loss.consistency == "gaussian" ? ConsistencyMode::gaussian
                                                     : ConsistencyMode::off;
    c.sigma_noise = loss.sigma_noise;
    c.dice_smooth = loss.dice_smooth;
    c.prob_clamp = loss.prob_clamp;
    c.cons_on_logits = loss.cons_on_logits;
    c.distill_reverse = loss.distill_reverse;
    c.use_latent = model.latent_injection;
    c.sample_z = model.sample_z;
    return c;
  }

  void validate() const {
    DatasetConfig d = dataset;
    d.seed = seed;
    d.validate();
    arch().validate();
    if (loss.omega < 0) throw ConfigError("loss.omega", "must be >= 0");
    if (loss.lambda_max < 0) throw ConfigError("loss.lambda_max", "must be >= 0");
    if (loss.sigma_noise <= 0) throw ConfigError("loss.sigma_noise", "must be > 0");
    if (loss.dice_smooth <= 0) throw ConfigError("loss.dice_smooth", "must be > 0");
    if (loss.prob_clamp <= 0) throw ConfigError("loss.prob_clamp", "must be > 0");
    if (loss.consistency != "vae" && loss.consistency != "gaussian" && loss.consistency != "off") {
      throw ConfigError("loss.consistency", "must be vae|gaussian|off");
    }
    if (federation.rounds < 1) throw ConfigError("federation.rounds", "must be >= 1");
    if (federation.batch_labeled < 1) throw ConfigError("federation.batch_labeled", "must be >= 1");
    if (federation.batch_unlabeled < 0) throw ConfigError("federation.batch_unlabeled", "must be >= 0");
    if (federation.iters_vae < -1) throw ConfigError("federation.iters_vae", "must be >= -1 (-1 = one epoch)");
    if (federation.iters_seg < -1) throw ConfigError("federation.iters_seg", "must be >= -1 (-1 = one epoch)");
    if (federation.iters_distill < 0) throw ConfigError("federation.iters_distill", "must be >= 0");
    if (federation.distill_batch < 1) throw ConfigError("federation.distill_batch", "must be >= 1");
    if (federation.lr_unet <= 0) throw ConfigError("federation.lr_unet", "must be > 0");
    if (federation.lr_vae <= 0) throw ConfigError("federation.lr_vae", "must be > 0");
    if (federation.lr_distill <= 0) throw ConfigError("federation.lr_distill", "must be > 0");
    if (output.checkpoint_every < 0) throw ConfigError("output.checkpoint_every", "must be >= 0");
  }

 private:
  static bool dataset_eq(const DatasetConfig& a, const DatasetConfig& b) {
    return a.image_size == b.image_size && a.num_classes == b.num_classes &&
           a.num_clients == b.num_clients && a.samples_per_client == b.samples_per_client &&
           a.labeled_ratio == b.labeled_ratio && a.noniid_intensity == b.noniid_intensity &&
           a.noniid_center == b.noniid_center && a.noise_std == b.noise_std &&
           a.texture_amp == b.texture_amp && a.val_samples == b.val_samples &&
           a.test_samples == b.test_samples;
  }
};

namespace detail {

class ConfigReader {
 public:
  // Holds the section by value: callers hand in temporaries.
  ConfigReader(nlohmann::json j, std::string prefix)
      : j_(std::move(j)), prefix_(std::move(prefix)) {}

  template <typename T>
  void get(const char* key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path(key), "wrong type");
    }
  }

  nlohmann::json section(const char* key) {
    known_.insert(key);
    if (!j_.contains(key)) return nlohmann::json::object();
    if (!j_.at(key).is_object()) throw ConfigError(path(key), "must be an object");
    return j_.at(key);
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError(path(it.key().c_str()), "unknown key");
    }
  }

  std::string path(const char* key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

 private:
  nlohmann::json j_;
  std::string prefix_;
  std::set<std::string> known_;
};

}  // namespace detail

// Named presets. "desk" is the default configuration; "paper_scale" mirrors
// the reference training recipe (200 rounds, 10 clients, 4+20 batches,
// Adam 2e-4 / 1e-3).
inline ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig cfg;
  if (name == "desk" || name.empty()) return cfg;
  if (name == "paper_scale") {
    cfg.dataset.num_clients = 10;
    cfg.dataset.samples_per_client = 100;
    cfg.federation.rounds = 200;
    cfg.federation.batch_labeled = 4;
    cfg.federation.batch_unlabeled = 20;
    cfg.federation.distill_batch = 24;
    cfg.federation.lr_unet = 2e-4;
    cfg.federation.lr_vae = 1e-3;
    cfg.federation.lr_distill = 1e-3;
    cfg.output.checkpoint_every = 50;
    return cfg;
  }
  throw ConfigError("preset", "unknown preset '" + name + "'");
}

inline ExperimentConfig parse_config_json(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config", "top level must be an object");
  detail::ConfigReader top(root, "");
  std::string preset = "desk";
  top.get("preset", preset);
  ExperimentConfig cfg = preset_config(preset);
  top.get("seed", cfg.seed);

  {
    detail::ConfigReader r(top.section("dataset"), "dataset");
    r.get("image_size", cfg.dataset.image_size);
    r.get("num_classes", cfg.dataset.num_classes);
    r.get("num_clients", cfg.dataset.num_clients);
    r.get("samples_per_client", cfg.dataset.samples_per_client);
    r.get("labeled_ratio", cfg.dataset.labeled_ratio);
    r.get("noniid_intensity", cfg.dataset.noniid_intensity);
    r.get("noniid_center", cfg.dataset.noniid_center);
    r.get("noise_std", cfg.dataset.noise_std);
    r.get("texture_amp", cfg.dataset.texture_amp);
    r.get("val_samples", cfg.dataset.val_samples);
    r.get("test_samples", cfg.dataset.test_samples);
    r.reject_unknown();
  }
  {
    detail::ConfigReader r(top.section("model"), "model");
    r.get("latent_dim", cfg.model.latent_dim);
    r.get("unet_depth", cfg.model.unet_depth);
    r.get("unet_width", cfg.model.unet_width);
    r.get("vae_levels", cfg.model.vae_levels);
    r.get("vae_width", cfg.model.vae_width);
    r.get("inject_channels", cfg.model.inject_channels);
    r.get("latent_injection", cfg.model.latent_injection);
    r.get("sample_z", cfg.model.sample_z);
    r.reject_unknown();
  }
  {
    detail::ConfigReader r(top.section("loss"), "loss");
    r.get("omega", cfg.loss.omega);
    r.get("lambda_max", cfg.loss.lambda_max);
    r.get("ramp_rounds", cfg.loss.ramp_rounds);
    r.get("consistency", cfg.loss.consistency);
    r.get("sigma_noise", cfg.loss.sigma_noise);
    r.get("dice_smooth", cfg.loss.dice_smooth);
    r.get("prob_clamp", cfg.loss.prob_clamp);
    r.get("cons_on_logits", cfg.loss.cons_on_logits);
    r.get("distill_reverse", cfg.loss.distill_reverse);
    r.reject_unknown();
  }
  {
    detail::ConfigReader r(top.section("federation"), "federation");
    r.get("rounds", cfg.federation.rounds);
    r.get("batch_labeled", cfg.federation.batch_labeled);
    r.get("batch_unlabeled", cfg.federation.batch_unlabeled);
    r.get("iters_vae", cfg.federation.iters_vae);
    r.get("iters_seg", cfg.federation.iters_seg);
    r.get("iters_distill", cfg.federation.iters_distill);
    r.get("distill_batch", cfg.federation.distill_batch);
    r.get("distill", cfg.federation.distill);
    r.get("distill_fixed_z", cfg.federation.distill_fixed_z);
    r.get("distill_update_encoder", cfg.federation.distill_update_encoder);
    r.get("lr_unet", cfg.federation.lr_unet);
    r.get("lr_vae", cfg.federation.lr_vae);
    r.get("lr_distill", cfg.federation.lr_distill);
    r.reject_unknown();
  }
  {
    detail::ConfigReader r(top.section("metrics"), "metrics");
    r.get("foreground_only", cfg.metrics.foreground_only);
    r.get("pooled", cfg.metrics.pooled);
    std::string empty = cfg.metrics.empty_class == EmptyClassPolicy::skip ? "skip" : "score_one";
    r.get("empty_class", empty);
    if (empty == "skip") cfg.metrics.empty_class = EmptyClassPolicy::skip;
    else if (empty == "score_one") cfg.metrics.empty_class = EmptyClassPolicy::score_one;
    else throw ConfigError("metrics.empty_class", "must be score_one|skip");
    r.reject_unknown();
  }
  {
    detail::ConfigReader r(top.section("output"), "output");
    r.get("dir", cfg.output.dir);
    r.get("checkpoint_every", cfg.output.checkpoint_every);
    r.get("plots", cfg.output.plots);
    r.reject_unknown();
  }
  top.reject_unknown();

  cfg.dataset.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config", "cannot open " + path.string());
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config", std::string("malformed JSON: ") + e.what());
  }
  return parse_config_json(root);
}

inline nlohmann::json emit_config(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["dataset"] = {{"image_size", cfg.dataset.image_size},
                  {"num_classes", cfg.dataset.num_classes},
                  {"num_clients", cfg.dataset.num_clients},
                  {"samples_per_client", cfg.dataset.samples_per_client},
                  {"labeled_ratio", cfg.dataset.labeled_ratio},
                  {"noniid_intensity", cfg.dataset.noniid_intensity},
                  {"noniid_center", cfg.dataset.noniid_center},
                  {"noise_std", cfg.dataset.noise_std},
                  {"texture_amp", cfg.dataset.texture_amp},
                  {"val_samples", cfg.dataset.val_samples},
                  {"test_samples", cfg.dataset.test_samples}};
  j["model"] = {{"latent_dim", cfg.model.latent_dim},
                {"unet_depth", cfg.model.unet_depth},
                {"unet_width", cfg.model.unet_width},
                {"vae_levels", cfg.model.vae_levels},
                {"vae_width", cfg.model.vae_width},
                {"inject_channels", cfg.model.inject_channels},
                {"latent_injection", cfg.model.latent_injection},
                {"sample_z", cfg.model.sample_z}};
  j["loss"] = {{"omega", cfg.loss.omega},
               {"lambda_max", cfg.loss.lambda_max},
               {"ramp_rounds", cfg.loss.ramp_rounds},
               {"consistency", cfg.loss.consistency},
               {"sigma_noise", cfg.loss.sigma_noise},
               {"dice_smooth", cfg.loss.dice_smooth},
               {"prob_clamp", cfg.loss.prob_clamp},
               {"cons_on_logits", cfg.loss.cons_on_logits},
               {"distill_reverse", cfg.loss.distill_reverse}};
  j["federation"] = {{"rounds", cfg.federation.rounds},
                     {"batch_labeled", cfg.federation.batch_labeled},
                     {"batch_unlabeled", cfg.federation.batch_unlabeled},
                     {"iters_vae", cfg.federation.iters_vae},
                     {"iters_seg", cfg.federation.iters_seg},
                     {"iters_distill", cfg.federation.iters_distill},
                     {"distill_batch", cfg.federation.distill_batch},
                     {"distill", cfg.federation.distill},
                     {"distill_fixed_z", cfg.federation.distill_fixed_z},
                     {"distill_update_encoder", cfg.federation.distill_update_encoder},
                     {"lr_unet", cfg.federation.lr_unet},
                     {"lr_vae", cfg.federation.lr_vae},
                     {"lr_distill", cfg.federation.lr_distill}};
  j["metrics"] = {{"foreground_only", cfg.metrics.foreground_only},
                  {"pooled", cfg.metrics.pooled},
                  {"empty_class",
                   cfg.metrics.empty_class == EmptyClassPolicy::skip ? "skip" : "score_one"}};
  j["output"] = {{"dir", cfg.output.dir},
                 {"checkpoint_every", cfg.output.checkpoint_every},
                 {"plots", cfg.output.plots}};
  return j;
}

// FNV-1a over the canonical (key-sorted) JSON dump.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = emit_config(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : dump) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fv2ic
