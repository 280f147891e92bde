#include "prism/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "prism/matrix_io.hpp"
#include "prism/text.hpp"

namespace prism {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kGradClip = 1.0;
constexpr int kTrainBatch = 8;
constexpr char kCheckpointMagic[4] = {'P', 'E', 'N', 'C'};
constexpr const char* kCheckpointFormat = "prism-diffusion";
constexpr int kTextRank = 16;

void check_grid(const LatentGrid& g, const char* who) {
  if (g.h < 1 || g.w < 1 || g.d < 1)
    throw Error(ErrorCode::dimension_mismatch,
                std::string(who) + ": latent grid needs positive dimensions, got " +
                    std::to_string(g.h) + "x" + std::to_string(g.w) + "x" + std::to_string(g.d));
  if (g.values.rows() != static_cast<Eigen::Index>(g.h) * g.w || g.values.cols() != g.d)
    throw Error(ErrorCode::dimension_mismatch,
                std::string(who) + ": latent values are " + std::to_string(g.values.rows()) + "x" +
                    std::to_string(g.values.cols()) + " but the grid says " +
                    std::to_string(g.h * g.w) + "x" + std::to_string(g.d));
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

void row_softmax(const Eigen::MatrixXd& scores, Eigen::MatrixXd& out) {
  out.resize(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double peak = scores.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (scores.row(r).array() - peak).exp().matrix();
    out.row(r) = e / e.sum();
  }
}

}  // namespace

namespace detail {

struct AttnCache {
  Eigen::MatrixXd hq;  // phi(X)
  Eigen::MatrixXd cb;  // psi(C)
  Eigen::MatrixXd q, k, v;
  Eigen::MatrixXd a;  // softmax scores
};

}  // namespace detail

namespace {

/// Shared attention math. Biases are 1 x n matrices.
Eigen::MatrixXd attn_forward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& c,
                             const Eigen::MatrixXd& wq, const Eigen::MatrixXd& wk,
                             const Eigen::MatrixXd& wv, const Eigen::MatrixXd& phi_w,
                             const Eigen::MatrixXd& phi_b, const Eigen::MatrixXd& psi_w,
                             const Eigen::MatrixXd& psi_b, detail::AttnCache* cache) {
  Eigen::MatrixXd hq = x * phi_w;
  hq.rowwise() += phi_b.row(0);
  Eigen::MatrixXd cb = c * psi_w;
  cb.rowwise() += psi_b.row(0);
  Eigen::MatrixXd q = hq * wq;
  Eigen::MatrixXd k = cb * wk;
  Eigen::MatrixXd v = cb * wv;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  Eigen::MatrixXd a;
  row_softmax(q * k.transpose() * inv_sqrt, a);
  Eigen::MatrixXd out = a * v;
  if (cache != nullptr) {
    cache->hq = std::move(hq);
    cache->cb = std::move(cb);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->a = std::move(a);
  }
  return out;
}

detail::Tensor make_tensor(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                           Rng* rng, double scale) {
  detail::Tensor t;
  t.name = name;
  if (rng != nullptr) {
    t.value = gaussian(rows, cols, *rng) * scale;
  } else {
    t.value = Eigen::MatrixXd::Zero(rows, cols);
  }
  t.grad = Eigen::MatrixXd::Zero(rows, cols);
  t.vel = Eigen::MatrixXd::Zero(rows, cols);
  t.vel2 = Eigen::MatrixXd::Zero(rows, cols);
  return t;
}

/// Gathered copy of x shifted by (dy, dx) on an h by w grid, zero padded.
Eigen::MatrixXd shift_gather(const Eigen::MatrixXd& x, int h, int w, int dy, int dx) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  const int y_lo = std::max(0, -dy);
  const int y_hi = h - std::max(0, dy);
  const int x_lo = std::max(0, -dx);
  const int x_hi = w - std::max(0, dx);
  if (x_hi <= x_lo) return out;
  for (int y = y_lo; y < y_hi; ++y) {
    out.middleRows(static_cast<Eigen::Index>(y) * w + x_lo, x_hi - x_lo) =
        x.middleRows(static_cast<Eigen::Index>(y + dy) * w + x_lo + dx, x_hi - x_lo);
  }
  return out;
}

/// Scatter-add of rows back through the shift used by shift_gather.
void shift_scatter_add(Eigen::MatrixXd& acc, const Eigen::MatrixXd& rows, int h, int w, int dy,
                       int dx) {
  const int y_lo = std::max(0, -dy);
  const int y_hi = h - std::max(0, dy);
  const int x_lo = std::max(0, -dx);
  const int x_hi = w - std::max(0, dx);
  if (x_hi <= x_lo) return;
  for (int y = y_lo; y < y_hi; ++y) {
    acc.middleRows(static_cast<Eigen::Index>(y + dy) * w + x_lo + dx, x_hi - x_lo) +=
        rows.middleRows(static_cast<Eigen::Index>(y) * w + x_lo, x_hi - x_lo);
  }
}

/// 3x3 convolution with zero padding; weight rows hold the nine taps stacked.
Eigen::MatrixXd conv3x3(const Eigen::MatrixXd& x, const Eigen::MatrixXd& weight, int h, int w) {
  const Eigen::Index in = x.cols();
  const Eigen::Index out_dim = weight.cols();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), out_dim);
  for (int tap = 0; tap < 9; ++tap) {
    const int dy = tap / 3 - 1;
    const int dx = tap % 3 - 1;
    y.noalias() += shift_gather(x, h, w, dy, dx) * weight.middleRows(tap * in, in);
  }
  return y;
}

/// Backward of conv3x3; dx may be null when the input needs no gradient.
void conv3x3_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& x,
                      const Eigen::MatrixXd& weight, int h, int w, Eigen::MatrixXd* dx,
                      Eigen::MatrixXd& dweight) {
  const Eigen::Index in = x.cols();
  for (int tap = 0; tap < 9; ++tap) {
    const int dy_off = tap / 3 - 1;
    const int dx_off = tap % 3 - 1;
    Eigen::MatrixXd gathered = shift_gather(x, h, w, dy_off, dx_off);
    dweight.middleRows(tap * in, in).noalias() += gathered.transpose() * dy;
    if (dx != nullptr) {
      Eigen::MatrixXd back = dy * weight.middleRows(tap * in, in).transpose();
      shift_scatter_add(*dx, back, h, w, dy_off, dx_off);
    }
  }
}

/// Normalized cell-center coordinates in (-1, 1), one (x, y) pair per row.
Eigen::MatrixXd coord_channels(int h, int w) {
  Eigen::MatrixXd coords(static_cast<Eigen::Index>(h) * w, 2);
  for (int y = 0; y < h; ++y) {
    const double cy = (y + 0.5) / h * 2.0 - 1.0;
    for (int x = 0; x < w; ++x) {
      const double cx = (x + 0.5) / w * 2.0 - 1.0;
      coords(static_cast<Eigen::Index>(y) * w + x, 0) = cx;
      coords(static_cast<Eigen::Index>(y) * w + x, 1) = cy;
    }
  }
  return coords;
}

/// Soft alignment of cells to token rows. Cell coordinate q along an axis
/// reads tokens near relative sentence position q, so prompts whose word
/// order follows the scene layout land on the right cells. The width covers
/// roughly three neighboring tokens of a typical scene sentence.
constexpr double kPoolSharpness = 96.0;

Eigen::MatrixXd aligned_pool(const Eigen::MatrixXd& c, int h, int w) {
  const Eigen::Index n = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index dt = c.rows();
  Eigen::RowVectorXd pos(dt);
  for (Eigen::Index j = 0; j < dt; ++j) pos(j) = (j + 0.5) / static_cast<double>(dt);
  Eigen::MatrixXd pooled(n, 2 * c.cols());
  Eigen::RowVectorXd wx(dt), wy(dt);
  for (int y = 0; y < h; ++y) {
    const double qy = (y + 0.5) / h;
    for (int x = 0; x < w; ++x) {
      const double qx = (x + 0.5) / w;
      for (Eigen::Index j = 0; j < dt; ++j) {
        wx(j) = -kPoolSharpness * (qx - pos(j)) * (qx - pos(j));
        wy(j) = -kPoolSharpness * (qy - pos(j)) * (qy - pos(j));
      }
      const Eigen::RowVectorXd ex = (wx.array() - wx.maxCoeff()).exp().matrix();
      const Eigen::RowVectorXd ey = (wy.array() - wy.maxCoeff()).exp().matrix();
      const Eigen::Index row = static_cast<Eigen::Index>(y) * w + x;
      pooled.row(row).head(c.cols()) = (ex / ex.sum()) * c;
      pooled.row(row).tail(c.cols()) = (ey / ey.sum()) * c;
    }
  }
  return pooled;
}

/// Fixed sinusoidal embedding of an integer timestep.
Eigen::RowVectorXd time_embedding(int t, int dim) {
  Eigen::RowVectorXd s(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    s(2 * i) = std::sin(t * freq);
    s(2 * i + 1) = std::cos(t * freq);
  }
  return s;
}

Eigen::MatrixXd patch_means(const Image& image) {
  if (image.height < PatchCodec::kPatch || image.width < PatchCodec::kPatch ||
      image.height % PatchCodec::kPatch != 0 || image.width % PatchCodec::kPatch != 0)
    throw Error(ErrorCode::dimension_mismatch,
                "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " is not 4x4-patch aligned");
  const int h = image.height / PatchCodec::kPatch;
  const int w = image.width / PatchCodec::kPatch;
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h) * w, 3);
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int y = 0; y < PatchCodec::kPatch; ++y)
        for (int x = 0; x < PatchCodec::kPatch; ++x)
          for (int c = 0; c < 3; ++c)
            acc[c] += image.at(py * PatchCodec::kPatch + y, px * PatchCodec::kPatch + x, c);
      for (int c = 0; c < 3; ++c)
        means(static_cast<Eigen::Index>(py) * w + px, c) =
            acc[c] / (PatchCodec::kPatch * PatchCodec::kPatch);
    }
  }
  return means;
}

}  // namespace

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > steps())
    throw Error(ErrorCode::range_violation, "timestep " + std::to_string(t) + " outside [0, " +
                                                std::to_string(steps()) + "]");
  return alpha_bars[static_cast<std::size_t>(t) - 1];
}

NoiseSchedule make_schedule(const std::vector<double>& betas) {
  if (betas.empty()) throw Error(ErrorCode::usage, "schedule needs at least one beta");
  NoiseSchedule sched;
  sched.betas = betas;
  sched.alpha_bars.reserve(betas.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!std::isfinite(betas[i]) || betas[i] <= 0.0 || betas[i] >= 1.0)
      throw Error(ErrorCode::range_violation,
                  "beta[" + std::to_string(i) + "] = " + std::to_string(betas[i]) +
                      " outside (0, 1)");
    prod *= 1.0 - betas[i];
    if (prod <= 0.0 || prod >= 1.0 ||
        (!sched.alpha_bars.empty() && prod >= sched.alpha_bars.back()))
      throw Error(ErrorCode::range_violation,
                  "alpha_bar stopped decreasing at step " + std::to_string(i + 1));
    sched.alpha_bars.push_back(prod);
  }
  return sched;
}

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw Error(ErrorCode::usage, "schedule needs at least one step");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
  }
  return make_schedule(betas);
}

LatentGrid LatentGrid::zero(int h, int w, int d, int t) {
  LatentGrid g;
  g.h = h;
  g.w = w;
  g.d = d;
  g.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h) * w, d);
  g.t = t;
  check_grid(g, "latent");
  return g;
}

LatentGrid cross_attention(const LatentGrid& h, const ConditioningMatrix& c,
                           const AttentionWeights& w) {
  check_grid(h, "cross_attention");
  if (c.rows() < 1)
    throw Error(ErrorCode::dimension_mismatch, "cross_attention needs at least one key row");
  if (w.wq.rows() != h.d || w.phi_w.rows() != h.d || w.phi_w.cols() != h.d ||
      w.phi_b.cols() != h.d || w.wv.cols() != h.d)
    throw Error(ErrorCode::dimension_mismatch,
                "query-side attention shapes do not match latent width " + std::to_string(h.d));
  if (w.wk.rows() != c.cols() || w.wv.rows() != c.cols() || w.psi_w.rows() != c.cols() ||
      w.psi_w.cols() != c.cols() || w.psi_b.cols() != c.cols())
    throw Error(ErrorCode::dimension_mismatch,
                "key-side attention shapes do not match conditioning width " +
                    std::to_string(c.cols()));
  if (w.wq.cols() != w.wk.cols())
    throw Error(ErrorCode::dimension_mismatch, "W_Q and W_K disagree on the key width");
  LatentGrid out = h;
  out.values = attn_forward(h.values, c, w.wq, w.wk, w.wv, w.phi_w, Eigen::MatrixXd(w.phi_b),
                            w.psi_w, Eigen::MatrixXd(w.psi_b), nullptr);
  return out;
}

LatentGrid forward_noise(const LatentGrid& h0, int t, const Eigen::MatrixXd& eps,
                         const NoiseSchedule& sched) {
  check_grid(h0, "forward_noise");
  if (t < 1 || t > sched.steps())
    throw Error(ErrorCode::range_violation, "timestep " + std::to_string(t) + " outside [1, " +
                                                std::to_string(sched.steps()) + "]");
  if (eps.rows() != h0.values.rows() || eps.cols() != h0.values.cols())
    throw Error(ErrorCode::dimension_mismatch,
                "noise is " + std::to_string(eps.rows()) + "x" + std::to_string(eps.cols()) +
                    " but the latent is " + std::to_string(h0.values.rows()) + "x" +
                    std::to_string(h0.values.cols()));
  const double ab = sched.alpha_bar(t);
  LatentGrid out = h0;
  out.values = std::sqrt(ab) * h0.values + std::sqrt(1.0 - ab) * eps;
  out.t = t;
  return out;
}

LatentGrid denoise_step(const LatentGrid& ht, int t, const ConditioningMatrix& c,
                        const NoisePredictor& model, const NoiseSchedule& sched,
                        bool deterministic, Rng* rng) {
  check_grid(ht, "denoise_step");
  if (t < 1 || t > sched.steps())
    throw Error(ErrorCode::range_violation, "timestep " + std::to_string(t) + " outside [1, " +
                                                std::to_string(sched.steps()) + "]");
  if (!model) throw Error(ErrorCode::usage, "denoise_step needs a noise predictor");
  Eigen::MatrixXd eps_hat = model(ht, t, c);
  if (eps_hat.rows() != ht.values.rows() || eps_hat.cols() != ht.values.cols())
    throw Error(ErrorCode::dimension_mismatch,
                "the model returned " + std::to_string(eps_hat.rows()) + "x" +
                    std::to_string(eps_hat.cols()) + " noise for a " +
                    std::to_string(ht.values.rows()) + "x" + std::to_string(ht.values.cols()) +
                    " latent");
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t - 1);
  Eigen::MatrixXd h0_hat = (ht.values - std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(ab_t);
  LatentGrid out = ht;
  out.t = t - 1;
  if (deterministic) {
    out.values = std::sqrt(ab_prev) * h0_hat + std::sqrt(1.0 - ab_prev) * eps_hat;
    return out;
  }
  if (rng == nullptr)
    throw Error(ErrorCode::usage, "stochastic denoising needs a random generator");
  const double beta_t = sched.betas[static_cast<std::size_t>(t) - 1];
  const double sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t;
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma2));
  out.values = std::sqrt(ab_prev) * h0_hat + dir * eps_hat +
               std::sqrt(sigma2) * gaussian(ht.values.rows(), ht.values.cols(), *rng);
  return out;
}

LatentGrid resize_bilinear(const LatentGrid& grid, int out_h, int out_w) {
  check_grid(grid, "resize_bilinear");
  if (out_h < 1 || out_w < 1)
    throw Error(ErrorCode::dimension_mismatch, "resize target must be positive");
  LatentGrid out;
  out.h = out_h;
  out.w = out_w;
  out.d = grid.d;
  out.t = grid.t;
  out.values.resize(static_cast<Eigen::Index>(out_h) * out_w, grid.d);
  for (int y = 0; y < out_h; ++y) {
    double sy = (y + 0.5) * static_cast<double>(grid.h) / out_h - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(grid.h - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, grid.h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      double sx = (x + 0.5) * static_cast<double>(grid.w) / out_w - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(grid.w - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, grid.w - 1);
      const double fx = sx - x0;
      out.values.row(static_cast<Eigen::Index>(y) * out_w + x) =
          (1.0 - fy) * (1.0 - fx) * grid.values.row(static_cast<Eigen::Index>(y0) * grid.w + x0) +
          (1.0 - fy) * fx * grid.values.row(static_cast<Eigen::Index>(y0) * grid.w + x1) +
          fy * (1.0 - fx) * grid.values.row(static_cast<Eigen::Index>(y1) * grid.w + x0) +
          fy * fx * grid.values.row(static_cast<Eigen::Index>(y1) * grid.w + x1);
    }
  }
  return out;
}

LatentGrid compose_psi(const std::vector<std::pair<LatentGrid, LocationLabel>>& parts) {
  if (parts.empty())
    throw Error(ErrorCode::composition, "composition needs at least one object latent");
  for (const auto& part : parts) check_grid(part.first, "compose_psi");
  for (std::size_t i = 1; i < parts.size(); ++i)
    if (parts[i].first.d != parts[0].first.d)
      throw Error(ErrorCode::dimension_mismatch, "object latents disagree on the channel width");
  if (parts.size() == 1) {
    if (parts[0].second != LocationLabel::full)
      throw Error(ErrorCode::composition,
                  std::string("a single object at ") + location_name(parts[0].second) +
                      " does not tile the frame");
    return resize_bilinear(parts[0].first, parts[0].first.h, parts[0].first.w);
  }
  if (parts.size() != 2)
    throw Error(ErrorCode::composition,
                "composition takes one or two object latents, got " + std::to_string(parts.size()));
  const LocationLabel a = parts[0].second;
  const LocationLabel b = parts[1].second;
  const bool horizontal = (a == LocationLabel::left_half && b == LocationLabel::right_half) ||
                          (a == LocationLabel::right_half && b == LocationLabel::left_half);
  const bool vertical = (a == LocationLabel::top_half && b == LocationLabel::bottom_half) ||
                        (a == LocationLabel::bottom_half && b == LocationLabel::top_half);
  if (!horizontal && !vertical)
    throw Error(ErrorCode::composition, std::string("locations ") + location_name(a) + " and " +
                                            location_name(b) + " do not partition the frame");
  // The frame takes the first latent's resolution.
  const int h = parts[0].first.h;
  const int w = parts[0].first.w;
  if (horizontal && w % 2 != 0)
    throw Error(ErrorCode::composition,
                "width " + std::to_string(w) + " does not split into half planes");
  if (vertical && h % 2 != 0)
    throw Error(ErrorCode::composition,
                "height " + std::to_string(h) + " does not split into half planes");
  LatentGrid out = LatentGrid::zero(h, w, parts[0].first.d, parts[0].first.t);
  for (const auto& [grid, loc] : parts) {
    const Rect rect = location_rect(loc);
    const int c0 = static_cast<int>(std::lround(rect.x0 * w));
    const int c1 = static_cast<int>(std::lround(rect.x1 * w));
    const int r0 = static_cast<int>(std::lround(rect.y0 * h));
    const int r1 = static_cast<int>(std::lround(rect.y1 * h));
    const LatentGrid sub = resize_bilinear(grid, r1 - r0, c1 - c0);
    for (int y = 0; y < sub.h; ++y) {
      out.values.middleRows(static_cast<Eigen::Index>(y + r0) * w + c0, sub.w) =
          sub.values.middleRows(static_cast<Eigen::Index>(y) * sub.w, sub.w);
    }
  }
  return out;
}

LatentGrid blend(const LatentGrid& cat, const LatentGrid& ctx, double beta) {
  if (!cat.same_shape(ctx))
    throw Error(ErrorCode::dimension_mismatch, "blend inputs disagree on the grid shape");
  if (!std::isfinite(beta) || beta < 0.0 || beta > 1.0)
    throw Error(ErrorCode::range_violation,
                "blend ratio " + std::to_string(beta) + " outside [0, 1]");
  LatentGrid out = cat;
  out.values = beta * cat.values + (1.0 - beta) * ctx.values;
  return out;
}

PatchCodec::PatchCodec(std::uint64_t seed) {
  Rng rng(seed_stream(seed, "codec-lift"));
  Eigen::MatrixXd g = gaussian(kLatentDim, 3, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  lift_ = qr.householderQ() * Eigen::MatrixXd::Identity(kLatentDim, 3);
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(3, 3);
  for (int j = 0; j < 3; ++j)
    if (r(j, j) < 0.0) lift_.col(j) *= -1.0;
  mix_ = lift_.transpose();
  mix_bias_ = Eigen::VectorXd::Zero(3);
}

PatchCodec::PatchCodec(Eigen::MatrixXd lift, Eigen::MatrixXd mix, Eigen::VectorXd mix_bias)
    : lift_(std::move(lift)), mix_(std::move(mix)), mix_bias_(std::move(mix_bias)) {
  if (lift_.rows() != kLatentDim || lift_.cols() != 3 || mix_.rows() != 3 ||
      mix_.cols() != kLatentDim || mix_bias_.size() != 3)
    throw Error(ErrorCode::shape_mismatch, "codec matrices must be 8x3, 3x8 and length 3");
}

LatentGrid PatchCodec::encode(const Image& image) const {
  const Eigen::MatrixXd means = patch_means(image);
  LatentGrid out;
  out.h = image.height / kPatch;
  out.w = image.width / kPatch;
  out.d = kLatentDim;
  out.t = 0;
  // Centered means in [-1, 1] through the orthonormal lift.
  out.values = (2.0 * means - Eigen::MatrixXd::Ones(means.rows(), 3)) * lift_.transpose();
  return out;
}

Image PatchCodec::decode(const LatentGrid& latent) const {
  check_grid(latent, "decode");
  if (latent.d != kLatentDim)
    throw Error(ErrorCode::dimension_mismatch,
                "codec latents have 8 channels, got " + std::to_string(latent.d));
  Image image(latent.h * kPatch, latent.w * kPatch);
  Eigen::MatrixXd rgb = latent.values * mix_.transpose();
  rgb.rowwise() += mix_bias_.transpose();
  rgb = ((rgb.array() + 1.0) * 0.5).max(0.0).min(1.0).matrix();
  for (int py = 0; py < latent.h; ++py)
    for (int px = 0; px < latent.w; ++px)
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x)
          for (int c = 0; c < 3; ++c)
            image.at(py * kPatch + y, px * kPatch + x, c) =
                rgb(static_cast<Eigen::Index>(py) * latent.w + px, c);
  return image;
}

void PatchCodec::fit(const std::vector<Image>& images) {
  if (images.empty()) throw Error(ErrorCode::usage, "codec fitting needs at least one image");
  Eigen::Index total = 0;
  std::vector<Eigen::MatrixXd> all_means;
  all_means.reserve(images.size());
  for (const Image& image : images) {
    all_means.push_back(patch_means(image));
    total += all_means.back().rows();
  }
  Eigen::MatrixXd g(total, kLatentDim + 1);
  Eigen::MatrixXd y(total, 3);
  Eigen::Index row = 0;
  for (const Eigen::MatrixXd& means : all_means) {
    const Eigen::MatrixXd centered = 2.0 * means - Eigen::MatrixXd::Ones(means.rows(), 3);
    g.block(row, 0, means.rows(), kLatentDim) = centered * lift_.transpose();
    g.block(row, kLatentDim, means.rows(), 1).setOnes();
    y.middleRows(row, means.rows()) = centered;
    row += means.rows();
  }
  // Ridge toward the current mix keeps degenerate patch sets harmless.
  const double ridge = 1e-8 * static_cast<double>(std::max<Eigen::Index>(1, total));
  Eigen::MatrixXd prior(kLatentDim + 1, 3);
  prior.topRows(kLatentDim) = mix_.transpose();
  prior.row(kLatentDim) = mix_bias_.transpose();
  const Eigen::MatrixXd lhs =
      g.transpose() * g + ridge * Eigen::MatrixXd::Identity(kLatentDim + 1, kLatentDim + 1);
  const Eigen::MatrixXd rhs = g.transpose() * y + ridge * prior;
  const Eigen::MatrixXd solved = lhs.ldlt().solve(rhs);
  mix_ = solved.topRows(kLatentDim).transpose();
  mix_bias_ = solved.row(kLatentDim).transpose();
}

namespace detail {

struct DenoiserCache {
  int h = 0, w = 0;
  Eigen::MatrixXd x0;  // latent plus coordinate channels
  Eigen::MatrixXd c;
  Eigen::MatrixXd pooled;  // cell-aligned token pools, (h*w) x 2*cond
  Eigen::RowVectorXd tvec;
  Eigen::RowVectorXd cmean;
  Eigen::MatrixXd tu;      // per-cell text factors, (h*w) x rank
  Eigen::RowVectorXd tv;   // time gate, 1 x rank
  Eigen::MatrixXd tf;      // squashed readout, (h*w) x rank
  struct BlockCache {
    Eigen::MatrixXd x_in;
    Eigen::MatrixXd z;
    AttnCache attn;
  };
  std::vector<BlockCache> blocks;
  Eigen::MatrixXd x_last;
};

}  // namespace detail

Denoiser::Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
  if (cfg.latent_dim < 1 || cfg.width < 1 || cfg.blocks < 1 || cfg.cond_dim < 1 || cfg.d_k < 1)
    throw Error(ErrorCode::usage, "denoiser dimensions must be positive");
  if (cfg.time_dim < 2 || cfg.time_dim % 2 != 0)
    throw Error(ErrorCode::usage, "the time embedding width must be even and at least 2");
  if (cfg.pixel_height < PatchCodec::kPatch || cfg.pixel_width < PatchCodec::kPatch ||
      cfg.pixel_height % PatchCodec::kPatch != 0 || cfg.pixel_width % PatchCodec::kPatch != 0)
    throw Error(ErrorCode::usage, "the trained canvas must be a positive multiple of 4");
  Rng rng(seed_stream(cfg.seed, "denoiser"));
  const int in0 = cfg.latent_dim + 2;
  lift_w_ = make_tensor("lift.w", 9 * in0, cfg.width, &rng, 1.0 / std::sqrt(9.0 * in0));
  lift_b_ = make_tensor("lift.b", 1, cfg.width, nullptr, 0.0);
  blocks_.reserve(static_cast<std::size_t>(cfg.blocks));
  for (int i = 0; i < cfg.blocks; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    Block b;
    b.conv_w =
        make_tensor(p + "conv_w", 9 * cfg.width, cfg.width, &rng, 1.0 / std::sqrt(9.0 * cfg.width));
    b.conv_b = make_tensor(p + "conv_b", 1, cfg.width, nullptr, 0.0);
    b.time_w =
        make_tensor(p + "time_w", cfg.time_dim, cfg.width, &rng, 1.0 / std::sqrt(cfg.time_dim));
    b.time_b = make_tensor(p + "time_b", 1, cfg.width, nullptr, 0.0);
    // The token-mean bias gives the text a direct path into every cell; the
    // attention layer stays responsible for anything position dependent.
    b.text_w = make_tensor(p + "text_w", cfg.cond_dim, cfg.width, nullptr, 0.0);
    b.pool_w = make_tensor(p + "pool_w", 2 * cfg.cond_dim, cfg.width, nullptr, 0.0);
    b.wq = make_tensor(p + "wq", cfg.width, cfg.d_k, &rng, 1.0 / std::sqrt(cfg.width));
    b.wk = make_tensor(p + "wk", cfg.cond_dim, cfg.d_k, &rng, 1.0 / std::sqrt(cfg.cond_dim));
    // Zero value projection starts every attention branch as the identity.
    b.wv = make_tensor(p + "wv", cfg.cond_dim, cfg.width, nullptr, 0.0);
    b.phi_w = make_tensor(p + "phi_w", cfg.width, cfg.width, &rng, 1.0 / std::sqrt(cfg.width));
    b.phi_b = make_tensor(p + "phi_b", 1, cfg.width, nullptr, 0.0);
    b.psi_w =
        make_tensor(p + "psi_w", cfg.cond_dim, cfg.cond_dim, &rng, 1.0 / std::sqrt(cfg.cond_dim));
    b.psi_b = make_tensor(p + "psi_b", 1, cfg.cond_dim, nullptr, 0.0);
    blocks_.push_back(std::move(b));
  }
  // Zero head makes the initial prediction vanish, so the first loss sits at
  // the raw noise energy.
  head_w_ = make_tensor("head.w", cfg.width, cfg.latent_dim, nullptr, 0.0);
  head_b_ = make_tensor("head.b", 1, cfg.latent_dim, nullptr, 0.0);
  skip_m_ = make_tensor("skip.m", cfg.time_dim, cfg.latent_dim * cfg.latent_dim, nullptr, 0.0);
  skip_b_ = make_tensor("skip.b", cfg.time_dim, cfg.latent_dim, nullptr, 0.0);
  txt_a_ =
      make_tensor("txt.a", 3 * cfg.cond_dim, kTextRank, &rng, 1.0 / std::sqrt(3.0 * cfg.cond_dim));
  txt_b_ = make_tensor("txt.b", cfg.time_dim, kTextRank, &rng, 1.0 / std::sqrt(cfg.time_dim));
  txt_o_ = make_tensor("txt.o", kTextRank, cfg.latent_dim, nullptr, 0.0);
  if (parameter_count() > 1000000)
    throw Error(ErrorCode::usage,
                "denoiser holds " + std::to_string(parameter_count()) + " parameters, over 1M");
}

std::vector<detail::Tensor*> Denoiser::tensors() {
  std::vector<detail::Tensor*> all;
  all.push_back(&lift_w_);
  all.push_back(&lift_b_);
  for (Block& b : blocks_) {
    all.push_back(&b.conv_w);
    all.push_back(&b.conv_b);
    all.push_back(&b.time_w);
    all.push_back(&b.time_b);
    all.push_back(&b.text_w);
    all.push_back(&b.pool_w);
    all.push_back(&b.wq);
    all.push_back(&b.wk);
    all.push_back(&b.wv);
    all.push_back(&b.phi_w);
    all.push_back(&b.phi_b);
    all.push_back(&b.psi_w);
    all.push_back(&b.psi_b);
  }
  all.push_back(&head_w_);
  all.push_back(&head_b_);
  all.push_back(&skip_m_);
  all.push_back(&skip_b_);
  all.push_back(&txt_a_);
  all.push_back(&txt_b_);
  all.push_back(&txt_o_);
  return all;
}

std::vector<const detail::Tensor*> Denoiser::tensors() const {
  std::vector<const detail::Tensor*> all;
  for (detail::Tensor* t : const_cast<Denoiser*>(this)->tensors()) all.push_back(t);
  return all;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const detail::Tensor* t : tensors()) n += static_cast<std::size_t>(t->value.size());
  return n;
}

Eigen::MatrixXd Denoiser::forward(const LatentGrid& ht, int t, const ConditioningMatrix& c,
                                  detail::DenoiserCache* cache) const {
  check_grid(ht, "denoiser");
  if (ht.d != cfg_.latent_dim)
    throw Error(ErrorCode::dimension_mismatch, "the denoiser expects " +
                                                   std::to_string(cfg_.latent_dim) +
                                                   " latent channels, got " + std::to_string(ht.d));
  if (c.cols() != cfg_.cond_dim)
    throw Error(ErrorCode::dimension_mismatch,
                "conditioning width " + std::to_string(c.cols()) + " does not match " +
                    std::to_string(cfg_.cond_dim));
  if (c.rows() < 1)
    throw Error(ErrorCode::dimension_mismatch, "conditioning needs at least one token row");
  if (t < 1) throw Error(ErrorCode::range_violation, "timestep must be at least 1");
  const Eigen::Index n = ht.values.rows();
  Eigen::MatrixXd x0(n, cfg_.latent_dim + 2);
  x0.leftCols(cfg_.latent_dim) = ht.values;
  x0.rightCols(2) = coord_channels(ht.h, ht.w);
  const Eigen::RowVectorXd tvec = time_embedding(t, cfg_.time_dim);
  // Unit-normalized token mean, so short and long prompts land on one scale.
  Eigen::RowVectorXd cmean = c.colwise().mean();
  cmean /= std::max(cmean.norm(), 1e-8);
  const Eigen::MatrixXd pooled = aligned_pool(c, ht.h, ht.w);
  Eigen::MatrixXd x = conv3x3(x0, lift_w_.value, ht.h, ht.w);
  x.rowwise() += lift_b_.value.row(0);
  if (cache != nullptr) {
    cache->h = ht.h;
    cache->w = ht.w;
    cache->x0 = x0;
    cache->c = c;
    cache->pooled = pooled;
    cache->tvec = tvec;
    cache->cmean = cmean;
    cache->blocks.resize(blocks_.size());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    detail::DenoiserCache::BlockCache* bc = cache != nullptr ? &cache->blocks[i] : nullptr;
    if (bc != nullptr) bc->x_in = x;
    Eigen::MatrixXd a = conv3x3(x, b.conv_w.value, ht.h, ht.w);
    a.rowwise() += b.conv_b.value.row(0) + tvec * b.time_w.value + b.time_b.value.row(0) +
                   cmean * b.text_w.value;
    a.noalias() += pooled * b.pool_w.value;
    Eigen::MatrixXd z = a.array().tanh().matrix();
    Eigen::MatrixXd o = attn_forward(z, c, b.wq.value, b.wk.value, b.wv.value, b.phi_w.value,
                                     b.phi_b.value, b.psi_w.value, b.psi_b.value,
                                     bc != nullptr ? &bc->attn : nullptr);
    if (bc != nullptr) bc->z = z;
    x = z + o;
  }
  if (cache != nullptr) cache->x_last = x;
  Eigen::MatrixXd pred = x * head_w_.value;
  pred.rowwise() += head_b_.value.row(0);
  const int d = cfg_.latent_dim;
  const Eigen::RowVectorXd sflat = tvec * skip_m_.value;
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      smat(sflat.data(), d, d);
  pred.noalias() += ht.values * smat;
  pred.rowwise() += tvec * skip_b_.value;
  Eigen::MatrixXd tu = pooled * txt_a_.value.topRows(2 * cfg_.cond_dim);
  tu.rowwise() += cmean * txt_a_.value.bottomRows(cfg_.cond_dim);
  const Eigen::RowVectorXd tv = tvec * txt_b_.value;
  // Squashing the factors keeps off-corpus prompts from extrapolating wildly.
  const Eigen::MatrixXd tf = (tu.array().rowwise() * tv.array()).tanh().matrix();
  if (cache != nullptr) {
    cache->tu = tu;
    cache->tv = tv;
    cache->tf = tf;
  }
  pred.noalias() += tf * txt_o_.value;
  return pred;
}

void Denoiser::backward(const detail::DenoiserCache& cache, const Eigen::MatrixXd& dpred) {
  const int d = cfg_.latent_dim;
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dsmat =
      cache.x0.leftCols(d).transpose() * dpred;
  skip_m_.grad.noalias() +=
      cache.tvec.transpose() * Eigen::Map<const Eigen::RowVectorXd>(dsmat.data(), d * d);
  const Eigen::RowVectorXd dsum = dpred.colwise().sum();
  skip_b_.grad.noalias() += cache.tvec.transpose() * dsum;
  txt_o_.grad.noalias() += cache.tf.transpose() * dpred;
  const Eigen::MatrixXd dtf = ((dpred * txt_o_.value.transpose()).array() *
                               (1.0 - cache.tf.array().square()))
                                  .matrix();
  const Eigen::MatrixXd dtu = (dtf.array().rowwise() * cache.tv.array()).matrix();
  txt_b_.grad.noalias() +=
      cache.tvec.transpose() * (dtf.array() * cache.tu.array()).colwise().sum().matrix();
  txt_a_.grad.topRows(2 * cfg_.cond_dim).noalias() += cache.pooled.transpose() * dtu;
  txt_a_.grad.bottomRows(cfg_.cond_dim).noalias() +=
      cache.cmean.transpose() * dtu.colwise().sum();
  head_w_.grad.noalias() += cache.x_last.transpose() * dpred;
  head_b_.grad.row(0) += dpred.colwise().sum();
  Eigen::MatrixXd dx = dpred * head_w_.value.transpose();
  for (std::size_t ri = blocks_.size(); ri > 0; --ri) {
    Block& b = blocks_[ri - 1];
    const detail::DenoiserCache::BlockCache& bc = cache.blocks[ri - 1];
    const detail::AttnCache& ac = bc.attn;
    // x_out = z + a(z): the attention path adds its own gradient onto dz.
    Eigen::MatrixXd dz = dx;
    Eigen::MatrixXd da_mat = dx * ac.v.transpose();
    Eigen::MatrixXd dv = ac.a.transpose() * dx;
    Eigen::VectorXd rs = (da_mat.array() * ac.a.array()).rowwise().sum().matrix();
    Eigen::MatrixXd ds = (ac.a.array() * (da_mat.colwise() - rs).array()).matrix();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.d_k));
    Eigen::MatrixXd dq = ds * ac.k * inv_sqrt;
    Eigen::MatrixXd dk = ds.transpose() * ac.q * inv_sqrt;
    b.wq.grad.noalias() += ac.hq.transpose() * dq;
    Eigen::MatrixXd dhq = dq * b.wq.value.transpose();
    b.wk.grad.noalias() += ac.cb.transpose() * dk;
    b.wv.grad.noalias() += ac.cb.transpose() * dv;
    Eigen::MatrixXd dcb = dk * b.wk.value.transpose() + dv * b.wv.value.transpose();
    b.phi_w.grad.noalias() += bc.z.transpose() * dhq;
    b.phi_b.grad.row(0) += dhq.colwise().sum();
    dz.noalias() += dhq * b.phi_w.value.transpose();
    b.psi_w.grad.noalias() += cache.c.transpose() * dcb;
    b.psi_b.grad.row(0) += dcb.colwise().sum();
    Eigen::MatrixXd da = (dz.array() * (1.0 - bc.z.array().square())).matrix();
    const Eigen::RowVectorXd dbias = da.colwise().sum();
    b.conv_b.grad.row(0) += dbias;
    b.time_w.grad.noalias() += cache.tvec.transpose() * dbias;
    b.time_b.grad.row(0) += dbias;
    b.text_w.grad.noalias() += cache.cmean.transpose() * dbias;
    b.pool_w.grad.noalias() += cache.pooled.transpose() * da;
    Eigen::MatrixXd dx_prev = Eigen::MatrixXd::Zero(bc.x_in.rows(), bc.x_in.cols());
    conv3x3_backward(da, bc.x_in, b.conv_w.value, cache.h, cache.w, &dx_prev, b.conv_w.grad);
    dx = std::move(dx_prev);
  }
  lift_b_.grad.row(0) += dx.colwise().sum();
  conv3x3_backward(dx, cache.x0, lift_w_.value, cache.h, cache.w, nullptr, lift_w_.grad);
}

Eigen::MatrixXd Denoiser::predict(const LatentGrid& ht, int t, const ConditioningMatrix& c) const {
  return forward(ht, t, c, nullptr);
}

NoisePredictor Denoiser::predictor() const {
  return [this](const LatentGrid& ht, int t, const ConditioningMatrix& c) {
    return predict(ht, t, c);
  };
}

double Denoiser::noise_loss(const LatentGrid& ht, int t, const ConditioningMatrix& c,
                            const Eigen::MatrixXd& eps, bool accumulate) {
  if (eps.rows() != ht.values.rows() || eps.cols() != ht.values.cols())
    throw Error(ErrorCode::dimension_mismatch, "true noise does not match the latent shape");
  detail::DenoiserCache cache;
  const Eigen::MatrixXd pred = forward(ht, t, c, accumulate ? &cache : nullptr);
  const Eigen::MatrixXd diff = pred - eps;
  const double scale = 1.0 / static_cast<double>(diff.size());
  const double loss = diff.squaredNorm() * scale;
  if (accumulate) backward(cache, 2.0 * scale * diff);
  return loss;
}

void Denoiser::zero_grads() {
  for (detail::Tensor* t : tensors()) t->grad.setZero();
}

void Denoiser::scale_grads(double factor) {
  for (detail::Tensor* t : tensors()) t->grad *= factor;
}

double Denoiser::grad_norm() const {
  double sq = 0.0;
  for (const detail::Tensor* t : tensors()) sq += t->grad.squaredNorm();
  return std::sqrt(sq);
}

void Denoiser::adam_step(double lr) {
  ++adam_steps_;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam_steps_));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam_steps_));
  for (detail::Tensor* t : tensors()) {
    t->vel = kAdamBeta1 * t->vel + (1.0 - kAdamBeta1) * t->grad;
    t->vel2 = kAdamBeta2 * t->vel2 + (1.0 - kAdamBeta2) * t->grad.cwiseAbs2();
    t->value.array() -=
        lr * (t->vel.array() / c1) / ((t->vel2.array() / c2).sqrt() + kAdamEps);
  }
}

Eigen::VectorXd Denoiser::flatten_params() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index at = 0;
  for (const detail::Tensor* t : tensors()) {
    flat.segment(at, t->value.size()) =
        Eigen::Map<const Eigen::VectorXd>(t->value.data(), t->value.size());
    at += t->value.size();
  }
  return flat;
}

void Denoiser::set_params(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count()))
    throw Error(ErrorCode::dimension_mismatch,
                "expected " + std::to_string(parameter_count()) + " parameters, got " +
                    std::to_string(flat.size()));
  Eigen::Index at = 0;
  for (detail::Tensor* t : tensors()) {
    Eigen::Map<Eigen::VectorXd>(t->value.data(), t->value.size()) =
        flat.segment(at, t->value.size());
    at += t->value.size();
  }
}

Eigen::VectorXd Denoiser::flatten_grads() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index at = 0;
  for (const detail::Tensor* t : tensors()) {
    flat.segment(at, t->grad.size()) =
        Eigen::Map<const Eigen::VectorXd>(t->grad.data(), t->grad.size());
    at += t->grad.size();
  }
  return flat;
}

std::vector<double> train_denoiser(Denoiser& model, const PatchCodec& codec,
                                   const std::vector<DenoiserSample>& corpus,
                                   const NoiseSchedule& sched, int epochs, double lr,
                                   std::uint64_t seed) {
  if (epochs < 0) throw Error(ErrorCode::usage, "epochs must be non-negative");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::usage, "lr must be positive");
  if (epochs == 0) return {};
  if (corpus.empty()) throw Error(ErrorCode::usage, "training needs at least one sample");
  if (model.config().latent_dim != PatchCodec::kLatentDim)
    throw Error(ErrorCode::dimension_mismatch,
                "the denoiser latent width does not match the codec");
  const TextEmbedder embedder(kDefaultTextEmbedSeed, model.config().cond_dim);
  std::vector<LatentGrid> latents;
  std::vector<ConditioningMatrix> conds;
  latents.reserve(corpus.size());
  conds.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    latents.push_back(codec.encode(corpus[i].image));
    conds.push_back(embedder.embed_tokens(corpus[i].text));
    if (conds.back().rows() < 1)
      throw Error(ErrorCode::usage, "sample " + std::to_string(i) + " has empty text");
  }
  Rng rng(seed_stream(seed, "train-denoiser"));
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(epochs));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += kTrainBatch) {
      const std::size_t stop = std::min(order.size(), start + kTrainBatch);
      model.zero_grads();
      for (std::size_t at = start; at < stop; ++at) {
        const std::size_t idx = order[at];
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
        const Eigen::MatrixXd eps =
            gaussian(latents[idx].values.rows(), latents[idx].values.cols(), rng);
        const LatentGrid ht = forward_noise(latents[idx], t, eps, sched);
        const double loss = model.noise_loss(ht, t, conds[idx], eps, true);
        if (!std::isfinite(loss))
          throw Error(ErrorCode::diverged,
                      "denoiser loss diverged at epoch " + std::to_string(epoch));
        total += loss;
      }
      model.scale_grads(1.0 / static_cast<double>(stop - start));
      const double norm = model.grad_norm();
      if (norm > kGradClip) model.scale_grads(kGradClip / norm);
      model.adam_step(lr);
    }
    curve.push_back(total / static_cast<double>(order.size()));
  }
  return curve;
}

Image reconstruct(const StructuredDescription& d, const Denoiser& model, const PatchCodec& codec,
                  const NoiseSchedule& sched, const ReconstructOptions& opt) {
  if (opt.steps < 1) throw Error(ErrorCode::usage, "reconstruction needs at least one step");
  if (opt.steps > sched.steps())
    throw Error(ErrorCode::range_violation, "step count " + std::to_string(opt.steps) +
                                                " exceeds the schedule length " +
                                                std::to_string(sched.steps()));
  const int height = opt.height > 0 ? opt.height : model.config().pixel_height;
  const int width = opt.width > 0 ? opt.width : model.config().pixel_width;
  if (height < PatchCodec::kPatch || width < PatchCodec::kPatch ||
      height % PatchCodec::kPatch != 0 || width % PatchCodec::kPatch != 0)
    throw Error(ErrorCode::dimension_mismatch, "the canvas must be a positive multiple of 4");
  const TextEmbedder embedder(kDefaultTextEmbedSeed, model.config().cond_dim);
  const ConditioningMatrix c_global = embedder.embed_tokens(serialize_description(d));
  std::array<ConditioningMatrix, 2> c_obj;
  for (std::size_t j = 0; j < 2; ++j) {
    const ObjectTuple& obj = d.objects[j];
    const std::string desc = opt.strip_headers ? strip_relation_header(obj.desc) : obj.desc;
    // Per-object prompt: the object's tuple fills every slot of a full-shape
    // description. Token positions then line up with training text while the
    // object's content covers the whole canvas; composition crops it to the
    // object's own region afterwards.
    StructuredDescription solo = d;
    for (ObjectTuple& slot : solo.objects) {
      slot.name = obj.name;
      slot.desc = desc;
    }
    c_obj[j] = embedder.embed_tokens(serialize_description(solo));
  }
  Rng rng(seed_stream(opt.seed, "reconstruct"));
  LatentGrid state;
  state.h = height / PatchCodec::kPatch;
  state.w = width / PatchCodec::kPatch;
  state.d = model.config().latent_dim;
  state.t = opt.steps;
  state.values = gaussian(static_cast<Eigen::Index>(state.h) * state.w, state.d, rng);
  const NoisePredictor pred = model.predictor();
  for (int t = opt.steps; t >= 1; --t) {
    const LatentGrid global = denoise_step(state, t, c_global, pred, sched, true);
    const LatentGrid first = denoise_step(state, t, c_obj[0], pred, sched, true);
    const LatentGrid second = denoise_step(state, t, c_obj[1], pred, sched, true);
    const LatentGrid composed =
        compose_psi({{first, d.objects[0].loc}, {second, d.objects[1].loc}});
    state = blend(composed, global, opt.blend_beta);
    state.t = t - 1;
  }
  return codec.decode(state);
}

namespace {

nlohmann::json config_json(const DenoiserConfig& cfg) {
  return nlohmann::json{{"latent_dim", cfg.latent_dim},
                        {"width", cfg.width},
                        {"blocks", cfg.blocks},
                        {"cond_dim", cfg.cond_dim},
                        {"d_k", cfg.d_k},
                        {"time_dim", cfg.time_dim},
                        {"pixel_height", cfg.pixel_height},
                        {"pixel_width", cfg.pixel_width},
                        {"seed", cfg.seed}};
}

DenoiserConfig config_from_json(const nlohmann::json& j) {
  DenoiserConfig cfg;
  cfg.latent_dim = j.at("latent_dim").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.blocks = j.at("blocks").get<int>();
  cfg.cond_dim = j.at("cond_dim").get<int>();
  cfg.d_k = j.at("d_k").get<int>();
  cfg.time_dim = j.at("time_dim").get<int>();
  cfg.pixel_height = j.at("pixel_height").get<int>();
  cfg.pixel_width = j.at("pixel_width").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

void save_diffusion(const Denoiser& model, const PatchCodec& codec, const NoiseSchedule& sched,
                    const std::filesystem::path& path) {
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> blocks;
  const Eigen::MatrixXd bias_col = codec.mix_bias();
  blocks.emplace_back("codec.lift", &codec.lift());
  blocks.emplace_back("codec.mix", &codec.mix());
  blocks.emplace_back("codec.mix_bias", &bias_col);
  for (const detail::Tensor* t : model.tensors()) blocks.emplace_back(t->name, &t->value);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, value] : blocks)
    manifest.push_back({{"name", name}, {"rows", value->rows()}, {"cols", value->cols()}});
  nlohmann::json header{{"format", kCheckpointFormat},
                        {"version", 1},
                        {"config", config_json(model.config())},
                        {"schedule", {{"betas", sched.betas}}},
                        {"params", manifest}};
  const std::string header_text = header.dump();
  std::string bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  append_u32(bytes, static_cast<std::uint32_t>(header_text.size()));
  bytes += header_text;
  for (const auto& [name, value] : blocks) bytes += encode_matrix(*value);
  write_file(path, bytes);
}

DiffusionBundle load_diffusion(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string origin = path.string();
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw Error(ErrorCode::parse, origin + ": not a model checkpoint");
  std::uint32_t header_len = 0;
  for (int i = 0; i < 4; ++i)
    header_len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  std::size_t at = 8;
  if (bytes.size() < at + header_len)
    throw Error(ErrorCode::parse, origin + ": truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(at, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, origin + ": bad checkpoint header: " + e.what());
  }
  at += header_len;
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat)
      throw Error(ErrorCode::parse, origin + ": not a diffusion checkpoint");
    if (header.at("version").get<int>() != 1)
      throw Error(ErrorCode::parse, origin + ": unsupported checkpoint version");
    DiffusionBundle bundle{Denoiser(config_from_json(header.at("config"))),
                           PatchCodec(),
                           make_schedule(header.at("schedule").at("betas").get<std::vector<double>>())};
    std::vector<std::pair<std::string, Eigen::MatrixXd*>> slots;
    Eigen::MatrixXd lift(PatchCodec::kLatentDim, 3);
    Eigen::MatrixXd mix(3, PatchCodec::kLatentDim);
    Eigen::MatrixXd bias(3, 1);
    slots.emplace_back("codec.lift", &lift);
    slots.emplace_back("codec.mix", &mix);
    slots.emplace_back("codec.mix_bias", &bias);
    for (detail::Tensor* t : bundle.model.tensors()) slots.emplace_back(t->name, &t->value);
    const nlohmann::json& manifest = header.at("params");
    if (!manifest.is_array() || manifest.size() != slots.size())
      throw Error(ErrorCode::shape_mismatch,
                  origin + ": checkpoint lists " + std::to_string(manifest.size()) +
                      " tensors, expected " + std::to_string(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const nlohmann::json& entry = manifest[i];
      if (entry.at("name").get<std::string>() != slots[i].first)
        throw Error(ErrorCode::shape_mismatch,
                    origin + ": tensor " + std::to_string(i) + " is named " +
                        entry.at("name").get<std::string>() + ", expected " + slots[i].first);
      const auto rows = entry.at("rows").get<Eigen::Index>();
      const auto cols = entry.at("cols").get<Eigen::Index>();
      if (rows != slots[i].second->rows() || cols != slots[i].second->cols())
        throw Error(ErrorCode::shape_mismatch,
                    origin + ": tensor " + slots[i].first + " is " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", expected " +
                        std::to_string(slots[i].second->rows()) + "x" +
                        std::to_string(slots[i].second->cols()));
      const std::size_t need =
          16 + static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 4;
      if (bytes.size() < at + need)
        throw Error(ErrorCode::parse, origin + ": truncated tensor " + slots[i].first);
      *slots[i].second = decode_matrix(std::string_view(bytes).substr(at, need), origin);
      at += need;
    }
    if (at != bytes.size())
      throw Error(ErrorCode::parse, origin + ": trailing bytes after the last tensor");
    bundle.codec = PatchCodec(lift, mix, Eigen::VectorXd(bias.col(0)));
    return bundle;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, origin + ": bad checkpoint header: " + e.what());
  }
}

}  // namespace prism
