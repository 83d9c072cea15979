#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "fv2ic/errors.hpp"
#include "fv2ic/rng.hpp"
#include "fv2ic/tensor.hpp"

namespace fv2ic {

// Procedural multi-class segmentation benchmark: each image carries
// num_classes-1 foreground structures (a main ellipse, a nested inner
// ellipse, then adjacent satellites) over a textured noisy background.
// Per-client contrast and position shifts give a controllable non-IID knob.

struct DatasetConfig {
  int image_size = 32;
  int num_classes = 4;
  int num_clients = 4;
  int samples_per_client = 60;
  double labeled_ratio = 0.2;
  double noniid_intensity = 0.15;  // foreground contrast shift bound per client
  double noniid_center = 0.10;     // structure center bias, fraction of the image
  double noise_std = 0.08;
  double texture_amp = 0.18;
  int val_samples = -1;   // -1: train/7, the 70/10/20 convention
  int test_samples = -1;  // -1: 2*train/7
  std::uint64_t seed = 1;

  int resolved_val() const {
    const int train = num_clients * samples_per_client;
    return val_samples >= 0 ? val_samples : static_cast<int>(std::lround(train / 7.0));
  }
  int resolved_test() const {
    const int train = num_clients * samples_per_client;
    return test_samples >= 0 ? test_samples : static_cast<int>(std::lround(2.0 * train / 7.0));
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset.num_classes", "must be >= 2");
    if (image_size < 16) throw ConfigError("dataset.image_size", "must be >= 16");
    if (num_clients < 1) throw ConfigError("dataset.num_clients", "must be >= 1");
    if (samples_per_client < 1) throw ConfigError("dataset.samples_per_client", "must be >= 1");
    if (!(labeled_ratio > 0.0) || labeled_ratio > 1.0) {
      throw ConfigError("dataset.labeled_ratio", "must be in (0, 1]");
    }
    if (noniid_intensity < 0.0) throw ConfigError("dataset.noniid_intensity", "must be >= 0");
    if (noniid_center < 0.0) throw ConfigError("dataset.noniid_center", "must be >= 0");
    if (noise_std < 0.0) throw ConfigError("dataset.noise_std", "must be >= 0");
    if (texture_amp < 0.0) throw ConfigError("dataset.texture_amp", "must be >= 0");
  }
};

struct Sample {
  Tensor image;               // (1,H,W), min-max normalized to [0,1]
  std::vector<std::uint8_t> mask;  // H*W class ids; always kept for evaluation
  int sample_id = 0;
  int client_id = -1;  // -1 for the central validation/test splits
  bool labeled = false;
};

struct ClientDataset {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  int client_id = 0;

  int size() const { return static_cast<int>(labeled.size() + unlabeled.size()); }
};

struct FederatedDataset {
  std::vector<ClientDataset> clients;
  std::vector<Sample> val;
  std::vector<Sample> test;
  DatasetConfig config;
};

// (x - min) / (max - min); a constant image maps to all zeros.
inline Tensor normalize(const Tensor& image) {
  if (image.empty()) throw ContractViolation("normalize: empty image");
  const double lo = image.min();
  const double hi = image.max();
  Tensor out = image;
  if (hi == lo) {
    out.fill(0.0);
    return out;
  }
  // True division: (hi-lo)/(hi-lo) == 1 exactly, which makes the map
  // idempotent (a second pass divides by exactly 1).
  const double range = hi - lo;
  for (int i = 0; i < out.size(); ++i) out[i] = (out[i] - lo) / range;
  return out;
}

namespace detail {

struct ClientProfile {
  double intensity_shift = 0.0;
  double dx = 0.0, dy = 0.0;
};

inline ClientProfile client_profile(const DatasetConfig& cfg, int client) {
  Rng rng = derive_rng(cfg.seed, "profile", client);
  ClientProfile p;
  p.intensity_shift = cfg.noniid_intensity * rng.uniform(-1.0, 1.0);
  p.dx = cfg.noniid_center * cfg.image_size * rng.uniform(-1.0, 1.0);
  p.dy = cfg.noniid_center * cfg.image_size * rng.uniform(-1.0, 1.0);
  return p;
}

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * cos_t + dy * sin_t) / a;
    const double v = (-dx * sin_t + dy * cos_t) / b;
    return u * u + v * v <= 1.0;
  }
};

inline Ellipse make_ellipse(double cx, double cy, double a, double b, double theta) {
  return {cx, cy, a, b, std::cos(theta), std::sin(theta)};
}

inline Sample generate_sample(const DatasetConfig& cfg, const ClientProfile& prof, int sample_id,
                              int client_id) {
  Rng rng = derive_rng(cfg.seed, "sample", sample_id);
  const int S = cfg.image_size;
  const double Sf = S;

  auto clampd = [](double v, double lo, double hi) { return std::min(std::max(v, lo), hi); };

  // Geometry first, in a fixed draw order.
  const double cx = clampd(0.5 * Sf + prof.dx + rng.uniform(-0.12, 0.12) * Sf, 0.28 * Sf, 0.72 * Sf);
  const double cy = clampd(0.5 * Sf + prof.dy + rng.uniform(-0.12, 0.12) * Sf, 0.28 * Sf, 0.72 * Sf);
  const double a1 = Sf * rng.uniform(0.16, 0.33);
  const double b1 = Sf * rng.uniform(0.16, 0.33);
  const Ellipse main_el = make_ellipse(cx, cy, a1, b1, rng.uniform(0.0, 3.141592653589793));

  const double nshrink = rng.uniform(0.30, 0.58);
  const double ncx = cx + rng.uniform(-0.08, 0.08) * a1;
  const double ncy = cy + rng.uniform(-0.08, 0.08) * b1;
  const Ellipse nested =
      make_ellipse(ncx, ncy, a1 * nshrink, b1 * nshrink, rng.uniform(0.0, 3.141592653589793));

  std::vector<Ellipse> satellites;
  const int n_sat = std::max(0, cfg.num_classes - 3);
  for (int k = 0; k < n_sat; ++k) {
    const double phi = rng.uniform(0.0, 6.283185307179586) ;
    const double dist = std::max(a1, b1) * rng.uniform(1.25, 1.70);
    const double sx = clampd(cx + dist * std::cos(phi), 0.10 * Sf, 0.90 * Sf);
    const double sy = clampd(cy + dist * std::sin(phi), 0.10 * Sf, 0.90 * Sf);
    satellites.push_back(make_ellipse(sx, sy, Sf * rng.uniform(0.06, 0.14),
                                      Sf * rng.uniform(0.06, 0.14),
                                      rng.uniform(0.0, 3.141592653589793)));
  }

  // Region intensities: fixed base levels, per-sample jitter, then the
  // per-client contrast shift on foreground only (an additive shift on the
  // whole image would vanish under min-max normalization).
  const double bg = 0.15;
  const double main_v = 0.42 + rng.uniform(-0.09, 0.09) + prof.intensity_shift;
  const double nested_v = 0.78 + rng.uniform(-0.09, 0.09) + prof.intensity_shift;
  std::vector<double> sat_v;
  for (int k = 0; k < n_sat; ++k) {
    sat_v.push_back(0.60 + rng.uniform(-0.09, 0.09) + prof.intensity_shift);
  }

  // Two-component sinusoidal texture field.
  const double f1x = rng.uniform(0.5, 2.0) / Sf, f1y = rng.uniform(0.5, 2.0) / Sf;
  const double f2x = rng.uniform(1.0, 3.0) / Sf, f2y = rng.uniform(1.0, 3.0) / Sf;
  const double ph1 = rng.uniform(0.0, 6.283185307179586);
  const double ph2 = rng.uniform(0.0, 6.283185307179586);

  Sample s;
  s.sample_id = sample_id;
  s.client_id = client_id;
  s.image = Tensor({1, S, S});
  s.mask.assign(static_cast<std::size_t>(S) * S, 0);

  const double two_pi = 6.283185307179586;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * S + x;
      std::uint8_t cls = 0;
      for (int k = 0; k < n_sat; ++k) {
        if (satellites[static_cast<std::size_t>(k)].contains(x + 0.5, y + 0.5)) {
          cls = static_cast<std::uint8_t>(3 + k);
        }
      }
      if (main_el.contains(x + 0.5, y + 0.5)) cls = 1;
      if (cfg.num_classes >= 3 && nested.contains(x + 0.5, y + 0.5)) cls = 2;
      s.mask[idx] = cls;

      double v = bg;
      if (cls == 1) v = main_v;
      else if (cls == 2) v = nested_v;
      else if (cls >= 3) v = sat_v[static_cast<std::size_t>(cls - 3)];
      v += cfg.texture_amp * 0.5 *
           (std::sin(two_pi * (f1x * x + f1y * y) + ph1) + std::sin(two_pi * (f2x * x + f2y * y) + ph2));
      v += cfg.noise_std * rng.normal();
      s.image[static_cast<int>(idx)] = v;
    }
  }
  s.image = normalize(s.image);
  return s;
}

}  // namespace detail

inline FederatedDataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  FederatedDataset ds;
  ds.config = cfg;

  std::vector<detail::ClientProfile> profiles;
  for (int c = 0; c < cfg.num_clients; ++c) profiles.push_back(detail::client_profile(cfg, c));

  int next_id = 0;
  for (int c = 0; c < cfg.num_clients; ++c) {
    ClientDataset cd;
    cd.client_id = c;
    std::vector<Sample> samples;
    for (int i = 0; i < cfg.samples_per_client; ++i) {
      samples.push_back(detail::generate_sample(cfg, profiles[static_cast<std::size_t>(c)],
                                                next_id++, c));
    }
    // Labeled subset: |labeled| == round(ratio * total).
    const int n_lab = static_cast<int>(std::lround(cfg.labeled_ratio * cfg.samples_per_client));
    std::vector<int> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng lab_rng = derive_rng(cfg.seed, "labels", c);
    lab_rng.shuffle(order.begin(), order.end());
    std::vector<bool> is_lab(samples.size(), false);
    for (int i = 0; i < n_lab; ++i) is_lab[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      samples[i].labeled = is_lab[i];
      (is_lab[i] ? cd.labeled : cd.unlabeled).push_back(std::move(samples[i]));
    }
    ds.clients.push_back(std::move(cd));
  }

  // Central splits draw profiles cyclically so they represent the
  // federation's joint distribution.
  const int n_val = cfg.resolved_val();
  const int n_test = cfg.resolved_test();
  for (int i = 0; i < n_val; ++i) {
    Sample s = detail::generate_sample(
        cfg, profiles[static_cast<std::size_t>(i % cfg.num_clients)], next_id++, -1);
    s.labeled = true;
    ds.val.push_back(std::move(s));
  }
  for (int i = 0; i < n_test; ++i) {
    Sample s = detail::generate_sample(
        cfg, profiles[static_cast<std::size_t>(i % cfg.num_clients)], next_id++, -1);
    s.labeled = true;
    ds.test.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct Batch {
  Tensor labeled_images;               // (nl,1,H,W)
  std::vector<std::uint8_t> labeled_masks;  // nl*H*W
  Tensor all_images;                   // (nl+nu,1,H,W); labeled block first
  int n_labeled = 0;
  int n_unlabeled = 0;
};

namespace detail {

inline Tensor stack_images(const std::vector<const Sample*>& samples) {
  const int n = static_cast<int>(samples.size());
  const int h = samples[0]->image.dim(1), w = samples[0]->image.dim(2);
  Tensor out({n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy(samples[static_cast<std::size_t>(i)]->image.values().begin(),
              samples[static_cast<std::size_t>(i)]->image.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(i) * h * w);
  }
  return out;
}

}  // namespace detail

// Draws batches from one client's pools: shuffled epochs without
// replacement, falling back to with-replacement draws when a pool is
// smaller than the request (keeps batch shapes static).
class BatchSampler {
 public:
  explicit BatchSampler(const ClientDataset& client) : client_(&client) {
    lab_order_.resize(client.labeled.size());
    unl_order_.resize(client.unlabeled.size());
    std::iota(lab_order_.begin(), lab_order_.end(), 0);
    std::iota(unl_order_.begin(), unl_order_.end(), 0);
    lab_cursor_ = lab_order_.size();  // force an initial shuffle
    unl_cursor_ = unl_order_.size();
  }

  Batch next(int n_labeled, int n_unlabeled, Rng& rng) {
    if (n_labeled >= 1 && client_->labeled.empty()) {
      throw ProtocolError("client " + std::to_string(client_->client_id) +
                          " has no labeled samples for a supervised batch");
    }
    Batch b;
    std::vector<const Sample*> lab, unl;
    draw(client_->labeled, lab_order_, lab_cursor_, n_labeled, rng, lab);
    draw(client_->unlabeled, unl_order_, unl_cursor_, n_unlabeled, rng, unl);
    b.n_labeled = static_cast<int>(lab.size());
    b.n_unlabeled = static_cast<int>(unl.size());
    if (!lab.empty()) {
      b.labeled_images = detail::stack_images(lab);
      for (const Sample* s : lab) b.labeled_masks.insert(b.labeled_masks.end(), s->mask.begin(), s->mask.end());
    }
    std::vector<const Sample*> all = lab;
    all.insert(all.end(), unl.begin(), unl.end());
    if (!all.empty()) b.all_images = detail::stack_images(all);
    return b;
  }

 private:
  void draw(const std::vector<Sample>& pool, std::vector<int>& order, std::size_t& cursor, int n,
            Rng& rng, std::vector<const Sample*>& out) {
    if (n <= 0 || pool.empty()) return;
    if (static_cast<int>(pool.size()) < n) {
      // Pool smaller than the request: sample with replacement.
      for (int i = 0; i < n; ++i) out.push_back(&pool[rng.below(pool.size())]);
      return;
    }
    for (int i = 0; i < n; ++i) {
      if (cursor >= order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      // Drop epoch remainders too small for a full draw.
      if (order.size() - cursor < static_cast<std::size_t>(n - i)) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      out.push_back(&pool[static_cast<std::size_t>(order[cursor++])]);
    }
  }

  const ClientDataset* client_;
  std::vector<int> lab_order_, unl_order_;
  std::size_t lab_cursor_ = 0, unl_cursor_ = 0;
};

// One-shot batch draw (tests and ad-hoc callers).
inline Batch make_batch(const ClientDataset& client, int n_labeled, int n_unlabeled, Rng& rng) {
  BatchSampler sampler(client);
  return sampler.next(n_labeled, n_unlabeled, rng);
}

// ---------------------------------------------------------------------------
// Disk cache: per split a raw float32 image file and a uint8 mask file,
// plus a JSON manifest with shapes, seed, client assignment and labels.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_split(const std::filesystem::path& dir, const std::string& name,
                        const std::vector<const Sample*>& samples, int hw) {
  std::ofstream fi(dir / (name + "_images.f32"), std::ios::binary);
  std::ofstream fm(dir / (name + "_masks.u8"), std::ios::binary);
  for (const Sample* s : samples) {
    for (int i = 0; i < hw; ++i) {
      const float v = static_cast<float>(s->image[i]);
      fi.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
    fm.write(reinterpret_cast<const char*>(s->mask.data()), static_cast<std::streamsize>(s->mask.size()));
  }
}

inline void read_split(const std::filesystem::path& dir, const std::string& name,
                       std::vector<Sample>& samples, int h, int w) {
  std::ifstream fi(dir / (name + "_images.f32"), std::ios::binary);
  std::ifstream fm(dir / (name + "_masks.u8"), std::ios::binary);
  if (!fi || !fm) throw ConfigError("dataset.cache", "missing split files for " + name);
  for (Sample& s : samples) {
    s.image = Tensor({1, h, w});
    for (int i = 0; i < h * w; ++i) {
      float v = 0.0f;
      fi.read(reinterpret_cast<char*>(&v), sizeof(float));
      s.image[i] = v;
    }
    s.mask.resize(static_cast<std::size_t>(h) * w);
    fm.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
  }
}

}  // namespace detail

inline void save_dataset(const FederatedDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int hw = ds.config.image_size * ds.config.image_size;

  nlohmann::json man;
  man["format_version"] = 1;
  man["seed"] = ds.config.seed;
  man["image_size"] = ds.config.image_size;
  man["num_classes"] = ds.config.num_classes;
  man["num_clients"] = ds.config.num_clients;
  man["labeled_ratio"] = ds.config.labeled_ratio;
  man["samples_per_client"] = ds.config.samples_per_client;

  std::vector<const Sample*> train;
  nlohmann::json train_meta = nlohmann::json::array();
  for (const ClientDataset& c : ds.clients) {
    std::vector<const Sample*> ordered;
    for (const Sample& s : c.labeled) ordered.push_back(&s);
    for (const Sample& s : c.unlabeled) ordered.push_back(&s);
    std::sort(ordered.begin(), ordered.end(),
              [](const Sample* a, const Sample* b) { return a->sample_id < b->sample_id; });
    for (const Sample* s : ordered) {
      train.push_back(s);
      train_meta.push_back({{"id", s->sample_id}, {"client", s->client_id}, {"labeled", s->labeled}});
    }
  }
  man["train"] = train_meta;

  auto ids_of = [](const std::vector<Sample>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const Sample& s : v) a.push_back(s.sample_id);
    return a;
  };
  man["val"] = ids_of(ds.val);
  man["test"] = ids_of(ds.test);

  detail::write_split(dir, "train", train, hw);
  std::vector<const Sample*> vp, tp;
  for (const Sample& s : ds.val) vp.push_back(&s);
  for (const Sample& s : ds.test) tp.push_back(&s);
  detail::write_split(dir, "val", vp, hw);
  detail::write_split(dir, "test", tp, hw);

  std::ofstream fm(dir / "manifest.json");
  fm << man.dump(2) << "\n";
}

inline FederatedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw ConfigError("dataset.cache", "manifest.json not found in " + dir.string());
  nlohmann::json man = nlohmann::json::parse(f);

  FederatedDataset ds;
  ds.config.seed = man.at("seed").get<std::uint64_t>();
  ds.config.image_size = man.at("image_size").get<int>();
  ds.config.num_classes = man.at("num_classes").get<int>();
  ds.config.num_clients = man.at("num_clients").get<int>();
  ds.config.labeled_ratio = man.at("labeled_ratio").get<double>();
  ds.config.samples_per_client = man.at("samples_per_client").get<int>();
  const int s = ds.config.image_size;

  std::vector<Sample> train(man.at("train").size());
  detail::read_split(dir, "train", train, s, s);
  ds.clients.resize(static_cast<std::size_t>(ds.config.num_clients));
  for (int c = 0; c < ds.config.num_clients; ++c) ds.clients[static_cast<std::size_t>(c)].client_id = c;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& meta = man.at("train").at(i);
    train[i].sample_id = meta.at("id").get<int>();
    train[i].client_id = meta.at("client").get<int>();
    train[i].labeled = meta.at("labeled").get<bool>();
    auto& cd = ds.clients.at(static_cast<std::size_t>(train[i].client_id));
    (train[i].labeled ? cd.labeled : cd.unlabeled).push_back(std::move(train[i]));
  }

  ds.val.resize(man.at("val").size());
  detail::read_split(dir, "val", ds.val, s, s);
  for (std::size_t i = 0; i < ds.val.size(); ++i) {
    ds.val[i].sample_id = man.at("val").at(i).get<int>();
    ds.val[i].labeled = true;
  }
  ds.test.resize(man.at("test").size());
  detail::read_split(dir, "test", ds.test, s, s);
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    ds.test[i].sample_id = man.at("test").at(i).get<int>();
    ds.test[i].labeled = true;
  }
  return ds;
}

}  // namespace fv2ic
