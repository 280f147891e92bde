#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prism/common.hpp"
#include "prism/descriptions.hpp"
#include "prism/image.hpp"
#include "prism/neural.hpp"

namespace prism {

/// Variance schedule of the forward noising process. alpha_bars[t-1] holds
/// the cumulative product over the first t betas and decreases strictly.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;

  int steps() const { return static_cast<int>(betas.size()); }

  /// Cumulative signal fraction at a 1-based timestep; alpha_bar(0) == 1.
  double alpha_bar(int t) const;
};

/// Validates betas in (0,1) and precomputes the cumulative products.
NoiseSchedule make_schedule(const std::vector<double>& betas);

/// Linear ramp between the endpoints. The defaults put the terminal signal
/// fraction near zero over 40 steps, so sampling can start from unit noise.
NoiseSchedule linear_schedule(int steps = 40, double beta_start = 1e-3, double beta_end = 0.35);

/// Diffusion state: d channels on an h by w grid. Rows of values are cells in
/// row-major order, so cell (y, x) is row y*w + x.
struct LatentGrid {
  int h = 0;
  int w = 0;
  int d = 0;
  Eigen::MatrixXd values;  // (h*w) x d
  int t = 0;

  static LatentGrid zero(int h, int w, int d, int t = 0);
  bool same_shape(const LatentGrid& other) const {
    return h == other.h && w == other.w && d == other.d;
  }
};

/// Token-embedding conditioning; rows act as both keys and values.
using ConditioningMatrix = Eigen::MatrixXd;

/// Projections of one cross-attention layer. phi and psi are the learned
/// affine maps applied to queries and to keys/values before projecting.
struct AttentionWeights {
  Eigen::MatrixXd wq;        // d x d_k
  Eigen::MatrixXd wk;        // d' x d_k
  Eigen::MatrixXd wv;        // d' x d
  Eigen::MatrixXd phi_w;     // d x d
  Eigen::RowVectorXd phi_b;  // 1 x d
  Eigen::MatrixXd psi_w;     // d' x d'
  Eigen::RowVectorXd psi_b;  // 1 x d'
};

/// softmax(phi(H) Wq (psi(C) Wk)^T / sqrt(d_k)) psi(C) Wv, softmax row-wise
/// over keys, reshaped back onto the grid. The residual is the caller's job.
LatentGrid cross_attention(const LatentGrid& h, const ConditioningMatrix& c, const AttentionWeights& w);

/// H_t = sqrt(abar_t) H_0 + sqrt(1 - abar_t) eps.
LatentGrid forward_noise(const LatentGrid& h0, int t, const Eigen::MatrixXd& eps,
                         const NoiseSchedule& sched);

/// Noise prediction hook eps_hat(H_t, t, C). Lets tests drive the sampler
/// with closed-form oracles in place of a trained network.
using NoisePredictor =
    std::function<Eigen::MatrixXd(const LatentGrid&, int, const ConditioningMatrix&)>;

/// One reverse step. Deterministic mode inverts the closed form exactly
/// (alpha_bar(0) == 1); stochastic mode adds schedule-scaled Gaussian noise
/// drawn from rng, which it then requires.
LatentGrid denoise_step(const LatentGrid& ht, int t, const ConditioningMatrix& c,
                        const NoisePredictor& model, const NoiseSchedule& sched,
                        bool deterministic = true, Rng* rng = nullptr);

/// Bilinear resample of every channel onto an out_h by out_w grid using
/// half-pixel centers; the identity size copies bit-exactly.
LatentGrid resize_bilinear(const LatentGrid& grid, int out_h, int out_w);

/// Spatial composition: each latent is resized into its location's rectangle
/// in latent coordinates. Accepts one full-frame entry or exactly two entries
/// whose locations partition the frame (left/right or top/bottom).
LatentGrid compose_psi(const std::vector<std::pair<LatentGrid, LocationLabel>>& parts);

/// beta * cat + (1 - beta) * ctx, elementwise; beta must sit in [0,1].
LatentGrid blend(const LatentGrid& cat, const LatentGrid& ctx, double beta);

/// Seed of the default codec channel lift.
inline constexpr std::uint64_t kDefaultCodecSeed = 0x434F444543;  // "CODEC"

/// Fixed pooling codec between pixels and latents. Encoding averages each
/// 4x4 patch per channel and lifts the centered means through an orthonormal
/// 8x3 basis; decoding applies a learned 1x1 channel mix and upsamples by
/// nearest neighbor. The default mix inverts the lift exactly; fit() refits
/// it from data by regularized least squares.
class PatchCodec {
public:
  static constexpr int kPatch = 4;
  static constexpr int kLatentDim = 8;

  explicit PatchCodec(std::uint64_t seed = kDefaultCodecSeed);

  /// Rebuilds from stored matrices (checkpoint loading); shapes 8x3, 3x8, 3.
  PatchCodec(Eigen::MatrixXd lift, Eigen::MatrixXd mix, Eigen::VectorXd mix_bias);

  /// Requires height and width divisible by 4; the result has t = 0.
  LatentGrid encode(const Image& image) const;

  /// Decodes to pixels clamped to [0,1].
  Image decode(const LatentGrid& latent) const;

  /// Least-squares refit of the decoder mix on the images' patches, ridged
  /// toward the current mix so degenerate data cannot destroy it.
  void fit(const std::vector<Image>& images);

  const Eigen::MatrixXd& lift() const { return lift_; }          // 8x3
  const Eigen::MatrixXd& mix() const { return mix_; }            // 3x8
  const Eigen::VectorXd& mix_bias() const { return mix_bias_; }  // 3

private:
  Eigen::MatrixXd lift_;
  Eigen::MatrixXd mix_;
  Eigen::VectorXd mix_bias_;
};

/// Toy conditional noise predictor: a lift convolution over the latent plus
/// two fixed coordinate channels, `blocks` residual blocks of 3x3 convolution
/// with an additive sinusoidal-time bias, tanh, and one cross-attention over
/// the conditioning tokens, then a 1x1 head back to the latent width.
struct DenoiserConfig {
  int latent_dim = PatchCodec::kLatentDim;
  int width = 32;
  int blocks = 4;
  int cond_dim = 64;  // token embedding width
  int d_k = 32;
  int time_dim = 32;  // sinusoidal embedding width, even
  int pixel_height = 64;  // canvas the checkpoint is trained for
  int pixel_width = 64;
  std::uint64_t seed = 0;
};

namespace detail {
struct DenoiserCache;
}

class Denoiser {
public:
  explicit Denoiser(const DenoiserConfig& cfg = {});

  const DenoiserConfig& config() const { return cfg_; }
  std::size_t parameter_count() const;

  /// eps_hat for a latent grid under token conditioning; rows match ht.
  Eigen::MatrixXd predict(const LatentGrid& ht, int t, const ConditioningMatrix& c) const;

  /// Adapter onto the sampler hook; the denoiser must outlive it.
  NoisePredictor predictor() const;

  /// Mean squared error between predicted and true noise. With accumulate it
  /// also adds the parameter gradients of the loss.
  double noise_loss(const LatentGrid& ht, int t, const ConditioningMatrix& c,
                    const Eigen::MatrixXd& eps, bool accumulate);

  void zero_grads();
  void scale_grads(double factor);
  double grad_norm() const;

  /// Adam update from the accumulated gradients; bias correction counts the
  /// steps taken by this instance.
  void adam_step(double lr);

  Eigen::VectorXd flatten_params() const;
  void set_params(const Eigen::VectorXd& flat);
  Eigen::VectorXd flatten_grads() const;

  std::vector<detail::Tensor*> tensors();
  std::vector<const detail::Tensor*> tensors() const;

private:
  struct Block {
    detail::Tensor conv_w, conv_b;  // (9*width) x width, 1 x width
    detail::Tensor time_w, time_b;  // time_dim x width, 1 x width
    detail::Tensor text_w;          // cond x width, fed the token-mean row
    detail::Tensor pool_w;          // 2*cond x width, fed the aligned pools
    detail::Tensor wq, wk, wv;      // width x d_k, cond x d_k, cond x width
    detail::Tensor phi_w, phi_b;    // width x width, 1 x width
    detail::Tensor psi_w, psi_b;    // cond x cond, 1 x cond
  };

  Eigen::MatrixXd forward(const LatentGrid& ht, int t, const ConditioningMatrix& c,
                          detail::DenoiserCache* cache) const;
  void backward(const detail::DenoiserCache& cache, const Eigen::MatrixXd& dpred);

  DenoiserConfig cfg_;
  detail::Tensor lift_w_, lift_b_;  // (9*(latent+2)) x width, 1 x width
  std::vector<Block> blocks_;
  detail::Tensor head_w_, head_b_;  // width x latent, 1 x latent
  // Time-conditioned linear readout of the noisy latent itself. It soaks up
  // the per-timestep whitening that a plain conv stack relearns slowly, so
  // the blocks can spend their capacity on content.
  detail::Tensor skip_m_, skip_b_;  // time_dim x latent*latent, time_dim x latent
  // Low-rank bilinear text-by-time readout added to every cell. The clean
  // latent is close to linear in the aligned token pools, so a direct
  // time-gated readout of them fits fast and carries the conditioning.
  detail::Tensor txt_a_, txt_b_, txt_o_;  // 3*cond x rank, time_dim x rank, rank x latent
  long adam_steps_ = 0;
};

/// One conditional training example: a stimulus and its description text.
struct DenoiserSample {
  Image image;
  std::string text;
};

/// Noise-prediction training, minimizing E|eps - eps_hat|^2 over uniformly
/// drawn timesteps with conditioning embedded from each sample's text.
/// Returns the per-epoch mean loss; deterministic in the seed.
std::vector<double> train_denoiser(Denoiser& model, const PatchCodec& codec,
                                   const std::vector<DenoiserSample>& corpus,
                                   const NoiseSchedule& sched, int epochs, double lr,
                                   std::uint64_t seed);

struct ReconstructOptions {
  double blend_beta = 0.5;
  int steps = 40;
  std::uint64_t seed = 0;
  int height = 0;  // 0 picks the model's trained canvas
  int width = 0;
  bool strip_headers = true;  // drop relation headers from per-object text
};

/// Reverse chain from seeded noise: at every step three branches denoise the
/// shared state under the global text C_0 and the per-object texts C_1, C_2;
/// the object branches are composed by location and blended with the global
/// branch. Decodes through the codec and clamps to [0,1].
Image reconstruct(const StructuredDescription& d, const Denoiser& model, const PatchCodec& codec,
                  const NoiseSchedule& sched, const ReconstructOptions& opt = {});

struct DiffusionBundle {
  Denoiser model;
  PatchCodec codec;
  NoiseSchedule sched;
};

/// Single-file checkpoint holding the denoiser, the codec, and the schedule.
void save_diffusion(const Denoiser& model, const PatchCodec& codec, const NoiseSchedule& sched,
                    const std::filesystem::path& path);
DiffusionBundle load_diffusion(const std::filesystem::path& path);

}  // namespace prism
