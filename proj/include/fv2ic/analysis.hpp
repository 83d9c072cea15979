#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fv2ic/config.hpp"
#include "fv2ic/fedsim.hpp"
#include "fv2ic/models.hpp"
#include "fv2ic/synthdata.hpp"

namespace fv2ic {

// Latent-space study: how far apart the encoder means sit for a trained
// model, and a 2-D view of where well-segmented samples cluster.

// Encoder means for every sample in the split, row per sample.
inline Tensor encode_means(const VaeModel& vae, const std::vector<Sample>& split, int batch = 32) {
  const int n = static_cast<int>(split.size());
  const int d = vae.latent_dim();
  Tensor mus({n, d});
  int done = 0;
  while (done < n) {
    const int b = std::min(batch, n - done);
    std::vector<const Sample*> chunk;
    for (int i = 0; i < b; ++i) chunk.push_back(&split[static_cast<std::size_t>(done + i)]);
    Var x = constant(detail::stack_images(chunk));
    auto [mu, logvar] = vae.encode(x);
    std::copy(mu->value.values().begin(), mu->value.values().end(),
              mus.values().begin() + static_cast<std::ptrdiff_t>(done) * d);
    done += b;
  }
  return mus;
}

// Average pairwise Euclidean distance via the Gram-matrix route
// (||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b). Zero when fewer than two points.
inline double avg_pairwise_distance(const Tensor& points) {
  const int n = points.dim(0), d = points.dim(1);
  if (n < 2) return 0.0;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(
      points.data(), n, d);
  Eigen::MatrixXd gram = M * M.transpose();
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double sq = gram(i, i) + gram(j, j) - 2.0 * gram(i, j);
      total += std::sqrt(std::max(0.0, sq));
    }
  return total / (0.5 * n * (n - 1));
}

// Classical multidimensional scaling to 2-D: double-center the squared
// distance matrix and keep the top two eigenpairs. Deterministic.
inline std::vector<std::array<double, 2>> mds_project(const Tensor& points) {
  const int n = points.dim(0), d = points.dim(1);
  std::vector<std::array<double, 2>> coords(static_cast<std::size_t>(n), {0.0, 0.0});
  if (n < 2) return coords;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(
      points.data(), n, d);
  Eigen::MatrixXd gram = M * M.transpose();
  Eigen::MatrixXd d2(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) d2(i, j) = gram(i, i) + gram(j, j) - 2.0 * gram(i, j);
  Eigen::MatrixXd J = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
  Eigen::MatrixXd B = -0.5 * J * d2 * J;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
  // Eigenvalues ascend; the last two carry the projection.
  for (int k = 0; k < 2; ++k) {
    const int idx = n - 1 - k;
    const double lam = std::max(0.0, es.eigenvalues()(idx));
    const double s = std::sqrt(lam);
    for (int i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
        s * es.eigenvectors()(i, idx);
  }
  return coords;
}

struct LatentModelReport {
  std::string name;
  double avg_d = 0.0;
  std::vector<std::array<double, 2>> coords;
  std::vector<double> dice;  // per-sample macro dice under this checkpoint
};

struct LatentReport {
  LatentModelReport combined;
  LatentModelReport vae_only;
};

// Compares the latent geometry of two checkpoints (each holding a VAE+UNet
// pair) on the same test split. Scatter points are colored by whether that
// checkpoint's own segmentation reaches dice > 0.9 on the sample.
inline LatentReport analyze_latent(const ModelParams& combined, const ModelParams& vae_only,
                                   const std::vector<Sample>& split, const ArchConfig& arch,
                                   const MetricsConfig& mc) {
  LatentReport rep;
  auto analyze_one = [&](const ModelParams& params, const std::string& name) {
    Rng rng(0);
    VaeModel vae(arch, rng);
    UnetModel unet(arch, rng);
    load_combined(vae, unet, params);
    LatentModelReport r;
    r.name = name;
    const Tensor mus = encode_means(vae, split);
    r.avg_d = avg_pairwise_distance(mus);
    r.coords = mds_project(mus);
    r.dice = evaluate_split(vae, unet, split, mc).per_sample_dice;
    return r;
  };
  // Both checkpoints must agree on the latent dimension (same arch here by
  // construction; loading throws on any manifest mismatch).
  rep.combined = analyze_one(combined, "combined");
  rep.vae_only = analyze_one(vae_only, "vae_only");
  return rep;
}

}  // namespace fv2ic
