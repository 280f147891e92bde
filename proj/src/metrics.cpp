#include "prism/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prism/common.hpp"

namespace prism {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* metric) {
  if (a.height <= 0 || a.width <= 0) {
    throw Error(ErrorCode::shape_mismatch, std::string(metric) + " needs non-empty images");
  }
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::shape_mismatch, std::string(metric) + " needs equal image shapes");
  }
}

Eigen::Map<const Eigen::VectorXd> flat(const Image& image) {
  return {image.data.data(), static_cast<Eigen::Index>(image.data.size())};
}

/// Normalized 1D Gaussian taps centered on the window.
Eigen::VectorXd gaussian_taps(int window, double sigma) {
  Eigen::VectorXd taps(window);
  double center = (window - 1) / 2.0;
  for (int i = 0; i < window; ++i) {
    double d = i - center;
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return taps / taps.sum();
}

/// Valid-mode separable filtering: rows then columns with the same taps.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const Eigen::VectorXd& taps) {
  int w = static_cast<int>(taps.size());
  Eigen::MatrixXd rows(plane.rows(), plane.cols() - w + 1);
  for (int c = 0; c < rows.cols(); ++c) {
    rows.col(c) = plane.middleCols(c, w) * taps;
  }
  Eigen::MatrixXd out(plane.rows() - w + 1, rows.cols());
  for (int r = 0; r < out.rows(); ++r) {
    out.row(r) = taps.transpose() * rows.middleRows(r, w);
  }
  return out;
}

Eigen::MatrixXd channel_plane(const Image& image, int channel) {
  Eigen::MatrixXd plane(image.height, image.width);
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      plane(r, c) = image.at(r, c, channel);
    }
  }
  return plane;
}

double safe_cosine(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  double nu = u.norm();
  double nv = v.norm();
  if (nu < 1e-300 || nv < 1e-300) {
    return 0.0;
  }
  return u.dot(v) / (nu * nv);
}

}  // namespace

double pixcorr(const Image& a, const Image& b) {
  require_same_shape(a, b, "pixcorr");
  auto x = flat(a);
  auto y = flat(b);
  Eigen::VectorXd xc = x.array() - x.mean();
  Eigen::VectorXd yc = y.array() - y.mean();
  double nx = xc.norm();
  double ny = yc.norm();
  if (nx <= 1e-12 || ny <= 1e-12) {
    throw Error(ErrorCode::constant_input, "pixcorr is undefined for a constant image");
  }
  return xc.dot(yc) / (nx * ny);
}

double ssim(const Image& a, const Image& b, int window, double data_range) {
  require_same_shape(a, b, "ssim");
  if (window < 2 || data_range <= 0.0) {
    throw Error(ErrorCode::usage, "ssim needs window >= 2 and a positive data range");
  }
  if (a.height < window || a.width < window) {
    throw Error(ErrorCode::shape_mismatch, "ssim needs both image sides >= the window size");
  }
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  Eigen::VectorXd taps = gaussian_taps(window, 1.5);

  double total = 0.0;
  for (int channel = 0; channel < 3; ++channel) {
    Eigen::MatrixXd x = channel_plane(a, channel);
    Eigen::MatrixXd y = channel_plane(b, channel);
    Eigen::MatrixXd mx = filter_valid(x, taps);
    Eigen::MatrixXd my = filter_valid(y, taps);
    Eigen::MatrixXd mxx = filter_valid(x.cwiseProduct(x), taps);
    Eigen::MatrixXd myy = filter_valid(y.cwiseProduct(y), taps);
    Eigen::MatrixXd mxy = filter_valid(x.cwiseProduct(y), taps);
    Eigen::ArrayXXd vx = mxx.array() - mx.array().square();
    Eigen::ArrayXXd vy = myy.array() - my.array().square();
    Eigen::ArrayXXd cov = mxy.array() - (mx.array() * my.array());
    Eigen::ArrayXXd numerator = (2.0 * mx.array() * my.array() + c1) * (2.0 * cov + c2);
    Eigen::ArrayXXd denominator = (mx.array().square() + my.array().square() + c1) * (vx + vy + c2);
    total += (numerator / denominator).mean();
  }
  return total / 3.0;
}

FeatureStack::FeatureStack(std::uint64_t seed) : channels_{3, 8, 16, 32} {
  for (std::size_t layer = 0; layer + 1 < channels_.size(); ++layer) {
    int in_ch = channels_[layer];
    int out_ch = channels_[layer + 1];
    Rng rng(seed_stream(seed, "conv", layer));
    Eigen::MatrixXd w(out_ch, in_ch * 9);
    double scale = 1.0 / std::sqrt(static_cast<double>(in_ch) * 9.0);
    for (int r = 0; r < w.rows(); ++r) {
      for (int c = 0; c < w.cols(); ++c) {
        w(r, c) = rng.normal() * scale;
      }
    }
    weights_.push_back(std::move(w));
  }
}

std::vector<Eigen::VectorXd> FeatureStack::layer_features(const Image& image) const {
  if (image.height <= 0 || image.width <= 0) {
    throw Error(ErrorCode::shape_mismatch, "feature stack needs a non-empty image");
  }
  // Activations as ch x (h*w), pixels recentred to [-1, 1].
  int h = image.height;
  int w = image.width;
  Eigen::MatrixXd acts(3, static_cast<Eigen::Index>(h) * w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        acts(ch, static_cast<Eigen::Index>(r) * w + c) = 2.0 * image.at(r, c, ch) - 1.0;
      }
    }
  }

  std::vector<Eigen::VectorXd> features;
  for (const Eigen::MatrixXd& weight : weights_) {
    int in_ch = static_cast<int>(acts.rows());
    int out_h = (h + 1) / 2;
    int out_w = (w + 1) / 2;
    Eigen::MatrixXd next(weight.rows(), static_cast<Eigen::Index>(out_h) * out_w);
    Eigen::VectorXd patch(weight.cols());
    for (int r = 0; r < out_h; ++r) {
      for (int c = 0; c < out_w; ++c) {
        patch.setZero();
        // 3x3 receptive field around (2r, 2c) with zero padding.
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            int sr = 2 * r + dr;
            int sc = 2 * c + dc;
            if (sr < 0 || sr >= h || sc < 0 || sc >= w) {
              continue;
            }
            int tap = (dr + 1) * 3 + (dc + 1);
            patch.segment(static_cast<Eigen::Index>(tap) * in_ch, in_ch) =
                acts.col(static_cast<Eigen::Index>(sr) * w + sc);
          }
        }
        next.col(static_cast<Eigen::Index>(r) * out_w + c) = (weight * patch).array().tanh();
      }
    }
    acts = std::move(next);
    h = out_h;
    w = out_w;
    features.emplace_back(Eigen::Map<const Eigen::VectorXd>(acts.data(), acts.size()));
  }
  return features;
}

Eigen::VectorXd FeatureStack::embedding(const Image& image) const {
  std::vector<Eigen::VectorXd> layers = layer_features(image);
  Eigen::Index total = 0;
  for (const auto& layer : layers) {
    total += layer.size();
  }
  Eigen::VectorXd out(total);
  Eigen::Index offset = 0;
  for (const auto& layer : layers) {
    double norm = layer.norm();
    out.segment(offset, layer.size()) = norm < 1e-300 ? layer : Eigen::VectorXd(layer / norm);
    offset += layer.size();
  }
  return out;
}

double perceptual_distance(const Image& a, const Image& b) {
  require_same_shape(a, b, "perceptual distance");
  static const FeatureStack stack;
  std::vector<Eigen::VectorXd> fa = stack.layer_features(a);
  std::vector<Eigen::VectorXd> fb = stack.layer_features(b);
  double mean_cos = 0.0;
  for (std::size_t layer = 0; layer < fa.size(); ++layer) {
    mean_cos += safe_cosine(fa[layer], fb[layer]);
  }
  mean_cos /= static_cast<double>(fa.size());
  // Self-cosine can exceed 1 by an ulp; the distance stays in [0,1].
  return std::clamp((1.0 - mean_cos) / 2.0, 0.0, 1.0);
}

Eigen::VectorXd pixel_embedding(const Image& image) {
  return flat(image);
}

double two_way_identification(const std::vector<Image>& recons, const std::vector<Image>& truths,
                              const ImageEmbedder& embedder) {
  if (recons.size() != truths.size()) {
    throw Error(ErrorCode::shape_mismatch, "two-way identification needs matched list lengths");
  }
  std::size_t n = recons.size();
  if (n < 2) {
    throw Error(ErrorCode::usage, "two-way identification needs at least two pairs");
  }
  std::vector<Eigen::VectorXd> er(n);
  std::vector<Eigen::VectorXd> et(n);
  for (std::size_t i = 0; i < n; ++i) {
    er[i] = embedder(recons[i]);
    et[i] = embedder(truths[i]);
  }
  int wins = 0;
  int trials = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double own = safe_cosine(er[i], et[i]);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        continue;
      }
      wins += own > safe_cosine(er[i], et[j]) ? 1 : 0;
      ++trials;
    }
  }
  return static_cast<double>(wins) / static_cast<double>(trials);
}

EvalReport evaluate_batch(const std::vector<Image>& recons, const std::vector<Image>& truths) {
  if (recons.size() != truths.size()) {
    throw Error(ErrorCode::shape_mismatch, "evaluation needs matched list lengths");
  }
  if (recons.empty()) {
    throw Error(ErrorCode::usage, "evaluation needs at least one pair");
  }
  EvalReport report;
  report.n = static_cast<int>(recons.size());
  for (std::size_t i = 0; i < recons.size(); ++i) {
    report.pixcorr += pixcorr(recons[i], truths[i]);
    report.ssim += ssim(recons[i], truths[i]);
    report.perceptual += perceptual_distance(recons[i], truths[i]);
  }
  report.pixcorr /= report.n;
  report.ssim /= report.n;
  report.perceptual /= report.n;
  if (report.n >= 2) {
    FeatureStack stack;
    report.twoway_pixel = two_way_identification(recons, truths, pixel_embedding);
    report.twoway_embed = two_way_identification(
        recons, truths, [&stack](const Image& image) { return stack.embedding(image); });
  } else {
    // Two-way identification needs a distractor.
    report.twoway_pixel = std::numeric_limits<double>::quiet_NaN();
    report.twoway_embed = std::numeric_limits<double>::quiet_NaN();
  }
  return report;
}

}  // namespace prism
