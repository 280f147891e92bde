#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "prism/image.hpp"

namespace prism {

/// Pearson correlation over flattened pixels. Constant images have no
/// defined correlation.
double pixcorr(const Image& a, const Image& b);

/// Mean structural similarity over all fully-contained windows, Gaussian
/// weighted (sigma 1.5), constants C1=(0.01 L)^2, C2=(0.03 L)^2, averaged
/// across channels.
double ssim(const Image& a, const Image& b, int window = 8, double data_range = 1.0);

/// Seed of the fixed random convolutional feature stack.
inline constexpr std::uint64_t kPerceptualSeed = 0x5052534D;

/// Untrained 3-layer stride-2 conv stack (3->8->16->32 channels, tanh) with
/// weights drawn once from a fixed seed. Stands in for a pretrained
/// perceptual backbone.
class FeatureStack {
public:
  explicit FeatureStack(std::uint64_t seed = kPerceptualSeed);

  /// Flattened per-layer activations.
  std::vector<Eigen::VectorXd> layer_features(const Image& image) const;

  /// Concatenation of the per-layer features, each layer L2-normalized, so
  /// cosine of two embeddings equals the mean of per-layer cosines.
  Eigen::VectorXd embedding(const Image& image) const;

private:
  // weights_[l] is out_ch x (in_ch*9), one row per output channel.
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<int> channels_;
};

/// (1 - mean per-layer cosine similarity) / 2, in [0,1]; 0 on identical
/// images. Both images must share a shape.
double perceptual_distance(const Image& a, const Image& b);

using ImageEmbedder = std::function<Eigen::VectorXd(const Image&)>;

/// Raw flattened pixels.
Eigen::VectorXd pixel_embedding(const Image& image);

/// Mean success over ordered pairs (i, j != i) of the trial
/// cos(e(recon_i), e(truth_i)) > cos(e(recon_i), e(truth_j)).
double two_way_identification(const std::vector<Image>& recons, const std::vector<Image>& truths,
                              const ImageEmbedder& embedder);

struct EvalReport {
  double pixcorr = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
  double twoway_pixel = 0.0;
  double twoway_embed = 0.0;
  int n = 0;
};

/// Mean per-pair metrics plus both two-way identifications (pixel embedder
/// and the fixed feature stack).
EvalReport evaluate_batch(const std::vector<Image>& recons, const std::vector<Image>& truths);

}  // namespace prism
