#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "prism/common.hpp"
#include "prism/dataio.hpp"
#include "prism/diffusion.hpp"
#include "prism/text.hpp"

namespace {

prism::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const prism::Error& err) {
    return err.code();
  }
  throw std::logic_error("expected a prism error");
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

prism::LatentGrid random_grid(int h, int w, int d, std::uint64_t seed) {
  prism::LatentGrid g = prism::LatentGrid::zero(h, w, d);
  prism::Rng rng(seed);
  for (Eigen::Index r = 0; r < g.values.rows(); ++r)
    for (Eigen::Index c = 0; c < g.values.cols(); ++c) g.values(r, c) = rng.normal();
  return g;
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Eigen::MatrixXd m(rows, cols);
  prism::Rng rng(seed);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

prism::AttentionWeights random_weights(int d, int d_cond, int d_k, std::uint64_t seed) {
  prism::AttentionWeights w;
  w.wq = random_matrix(d, d_k, seed + 1);
  w.wk = random_matrix(d_cond, d_k, seed + 2);
  w.wv = random_matrix(d_cond, d, seed + 3);
  w.phi_w = random_matrix(d, d, seed + 4);
  w.phi_b = random_matrix(1, d, seed + 5).row(0);
  w.psi_w = random_matrix(d_cond, d_cond, seed + 6);
  w.psi_b = random_matrix(1, d_cond, seed + 7).row(0);
  return w;
}

double max_abs(const Eigen::MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

/// Deterministic evaluation pairs (timestep, noise) for a held-out latent.
struct EvalSet {
  std::vector<int> ts;
  std::vector<Eigen::MatrixXd> eps;
};

EvalSet make_eval_set(const prism::LatentGrid& latent, const prism::NoiseSchedule& sched, int n,
                      std::uint64_t seed) {
  EvalSet set;
  prism::Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    set.ts.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps()))));
    Eigen::MatrixXd e(latent.values.rows(), latent.values.cols());
    for (Eigen::Index r = 0; r < e.rows(); ++r)
      for (Eigen::Index c = 0; c < e.cols(); ++c) e(r, c) = rng.normal();
    set.eps.push_back(std::move(e));
  }
  return set;
}

double eval_loss(prism::Denoiser& model, const std::vector<prism::LatentGrid>& latents,
                 const std::vector<prism::ConditioningMatrix>& conds,
                 const std::vector<EvalSet>& sets, const prism::NoiseSchedule& sched) {
  double total = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    for (std::size_t j = 0; j < sets[i].ts.size(); ++j) {
      const prism::LatentGrid ht =
          prism::forward_noise(latents[i], sets[i].ts[j], sets[i].eps[j], sched);
      total += model.noise_loss(ht, sets[i].ts[j], conds[i], sets[i].eps[j], false);
      ++n;
    }
  }
  return total / n;
}

}  // namespace

TEST_CASE("linear schedule matches an independent cumulative product") {
  const prism::NoiseSchedule sched = prism::linear_schedule();
  REQUIRE(sched.steps() == 40);
  CHECK(sched.betas.front() == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(sched.betas.back() == doctest::Approx(2e-2).epsilon(1e-12));

  // Independent sequential product over the same betas.
  double prod = 1.0;
  for (int i = 0; i < 40; ++i) {
    const double beta = 1e-4 + (2e-2 - 1e-4) * i / 39.0;
    prod *= 1.0 - beta;
  }
  CHECK(sched.alpha_bars.back() == doctest::Approx(prod).epsilon(1e-14));
  CHECK(sched.alpha_bar(40) == doctest::Approx(prod).epsilon(1e-14));
  CHECK(sched.alpha_bar(0) == 1.0);

  for (std::size_t i = 0; i < sched.alpha_bars.size(); ++i) {
    CHECK(sched.alpha_bars[i] > 0.0);
    CHECK(sched.alpha_bars[i] < 1.0);
    if (i > 0) CHECK(sched.alpha_bars[i] < sched.alpha_bars[i - 1]);
  }

  CHECK(code_of([] { prism::make_schedule({}); }) == prism::ErrorCode::usage);
  CHECK(code_of([] { prism::make_schedule({0.1, 0.0}); }) == prism::ErrorCode::range_violation);
  CHECK(code_of([] { prism::make_schedule({1.0}); }) == prism::ErrorCode::range_violation);
  CHECK(code_of([] { prism::make_schedule({-0.2}); }) == prism::ErrorCode::range_violation);
  CHECK(code_of([&] { sched.alpha_bar(41); }) == prism::ErrorCode::range_violation);
  CHECK(code_of([] { prism::linear_schedule(0); }) == prism::ErrorCode::usage);
}

TEST_CASE("forward noising obeys the closed form at both limits") {
  const prism::NoiseSchedule sched = prism::linear_schedule();
  const prism::LatentGrid h0 = random_grid(3, 4, 5, 21);
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(h0.values.rows(), h0.values.cols());

  // Noiseless limit: pure signal decay.
  const prism::LatentGrid noiseless = prism::forward_noise(h0, 17, zero, sched);
  CHECK(max_abs(noiseless.values - std::sqrt(sched.alpha_bar(17)) * h0.values) < 1e-15);
  CHECK(noiseless.t == 17);

  // Exact decomposition at an interior step.
  const Eigen::MatrixXd eps = random_matrix(h0.values.rows(), h0.values.cols(), 22);
  const prism::LatentGrid mixed = prism::forward_noise(h0, 29, eps, sched);
  const double ab = sched.alpha_bar(29);
  CHECK(max_abs(mixed.values - std::sqrt(ab) * h0.values - std::sqrt(1.0 - ab) * eps) < 1e-12);

  // Pure-noise limit on a long schedule: 1 - sqrt(1-a) <= a bounds the slack.
  const prism::NoiseSchedule longer = prism::linear_schedule(400, 1e-4, 5e-2);
  const double ab_late = longer.alpha_bar(400);
  CHECK(ab_late < 1e-3);
  const prism::LatentGrid late = prism::forward_noise(h0, 400, eps, longer);
  CHECK(max_abs(late.values - eps) <=
        std::sqrt(ab_late) * max_abs(h0.values) + ab_late * max_abs(eps) + 1e-12);

  CHECK(code_of([&] { prism::forward_noise(h0, 0, eps, sched); }) ==
        prism::ErrorCode::range_violation);
  CHECK(code_of([&] { prism::forward_noise(h0, 41, eps, sched); }) ==
        prism::ErrorCode::range_violation);
  CHECK(code_of([&] { prism::forward_noise(h0, 3, eps.topRows(2), sched); }) ==
        prism::ErrorCode::dimension_mismatch);
}

TEST_CASE("cross attention collapses for degenerate keys") {
  const prism::LatentGrid h = random_grid(2, 3, 4, 31);

  // A single key row makes every softmax weight one.
  prism::AttentionWeights w = random_weights(4, 6, 5, 32);
  const Eigen::MatrixXd c1 = random_matrix(1, 6, 33);
  const Eigen::MatrixXd cb = (c1 * w.psi_w).rowwise() + w.psi_b;
  const Eigen::MatrixXd v = cb * w.wv;
  const prism::LatentGrid one_key = prism::cross_attention(h, c1, w);
  CHECK(one_key.same_shape(h));
  for (Eigen::Index r = 0; r < one_key.values.rows(); ++r)
    CHECK(max_abs(one_key.values.row(r) - v.row(0)) < 1e-12);

  // Identical keys (zero key projection) make the softmax uniform.
  w.wk.setZero();
  const Eigen::MatrixXd c3 = random_matrix(3, 6, 34);
  const Eigen::MatrixXd values3 = ((c3 * w.psi_w).rowwise() + w.psi_b) * w.wv;
  const Eigen::RowVectorXd mean_row = values3.colwise().mean();
  const prism::LatentGrid uniform = prism::cross_attention(h, c3, w);
  for (Eigen::Index r = 0; r < uniform.values.rows(); ++r)
    CHECK(max_abs(uniform.values.row(r) - mean_row) < 1e-12);

  // Shape guards.
  prism::AttentionWeights bad = random_weights(4, 6, 5, 35);
  bad.wq = random_matrix(3, 5, 36);
  CHECK(code_of([&] { prism::cross_attention(h, c3, bad); }) ==
        prism::ErrorCode::dimension_mismatch);
  CHECK(code_of([&] {
          prism::cross_attention(h, Eigen::MatrixXd::Zero(0, 6), random_weights(4, 6, 5, 37));
        }) == prism::ErrorCode::dimension_mismatch);
  prism::AttentionWeights mismatch = random_weights(4, 6, 5, 38);
  mismatch.wk = random_matrix(6, 7, 39);
  CHECK(code_of([&] { prism::cross_attention(h, c3, mismatch); }) ==
        prism::ErrorCode::dimension_mismatch);
}

TEST_CASE("cross attention matches a hand-worked two-cell example") {
  // Scalar channels: two grid cells, two keys, every projection a number.
  prism::LatentGrid h = prism::LatentGrid::zero(2, 1, 1);
  h.values << 0.5, -1.0;
  Eigen::MatrixXd c(2, 1);
  c << 2.0, -0.5;
  prism::AttentionWeights w;
  w.wq = Eigen::MatrixXd::Constant(1, 1, 0.7);
  w.wk = Eigen::MatrixXd::Constant(1, 1, -0.4);
  w.wv = Eigen::MatrixXd::Constant(1, 1, 1.3);
  w.phi_w = Eigen::MatrixXd::Constant(1, 1, 0.9);
  w.phi_b = Eigen::RowVectorXd::Constant(1, 0.2);
  w.psi_w = Eigen::MatrixXd::Constant(1, 1, -1.1);
  w.psi_b = Eigen::RowVectorXd::Constant(1, 0.3);

  const prism::LatentGrid out = prism::cross_attention(h, c, w);

  for (int cell = 0; cell < 2; ++cell) {
    const double q = (h.values(cell, 0) * 0.9 + 0.2) * 0.7;
    double score[2], value[2];
    for (int key = 0; key < 2; ++key) {
      const double kb = c(key, 0) * -1.1 + 0.3;
      score[key] = q * (kb * -0.4) / std::sqrt(1.0);
      value[key] = kb * 1.3;
    }
    const double peak = std::max(score[0], score[1]);
    const double e0 = std::exp(score[0] - peak);
    const double e1 = std::exp(score[1] - peak);
    const double expected = (e0 * value[0] + e1 * value[1]) / (e0 + e1);
    CHECK(out.values(cell, 0) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("attention softmax rows sum to one through a ones-valued probe") {
  // With psi collapsing every token to ones and a power-of-two fan-in the
  // value rows are exactly 1, so each output entry is its softmax row sum.
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const int d_cond = 4;
    const prism::LatentGrid h = random_grid(3, 5, 3, 100 + seed);
    prism::AttentionWeights w = random_weights(3, d_cond, 6, 200 + seed);
    w.psi_w.setZero();
    w.psi_b.setOnes();
    w.wv = Eigen::MatrixXd::Constant(d_cond, 3, 1.0 / d_cond);
    const Eigen::MatrixXd c = random_matrix(7, d_cond, 300 + seed);
    const prism::LatentGrid out = prism::cross_attention(h, c, w);
    CHECK(max_abs(out.values - Eigen::MatrixXd::Ones(out.values.rows(), 3)) < 1e-6);
  }
}

TEST_CASE("deterministic denoise steps invert the forward process") {
  const prism::NoiseSchedule sched = prism::linear_schedule(64, 1e-4, 3e-2);
  const prism::LatentGrid h0 = random_grid(4, 3, 5, 41);
  const Eigen::MatrixXd eps = random_matrix(h0.values.rows(), h0.values.cols(), 42);
  const prism::ConditioningMatrix c = random_matrix(2, 4, 43);
  const prism::NoisePredictor oracle = [&](const prism::LatentGrid&, int,
                                           const prism::ConditioningMatrix&) { return eps; };

  // One step from t peels the forward form back to t-1 exactly.
  const prism::LatentGrid h17 = prism::forward_noise(h0, 17, eps, sched);
  const prism::LatentGrid h16 = prism::denoise_step(h17, 17, c, oracle, sched);
  CHECK(h16.t == 16);
  const double ab16 = sched.alpha_bar(16);
  CHECK(max_abs(h16.values - std::sqrt(1.0 - ab16) * eps - std::sqrt(ab16) * h0.values) < 1e-12);

  // Boundary: alpha_bar(0) is one, so t=1 returns the clean latent.
  const prism::LatentGrid h1 = prism::forward_noise(h0, 1, eps, sched);
  const prism::LatentGrid back = prism::denoise_step(h1, 1, c, oracle, sched);
  CHECK(back.t == 0);
  CHECK(max_abs(back.values - h0.values) < 1e-12);

  // Full-chain inversion property over several draws.
  for (std::uint64_t seed : {7ULL, 8ULL, 9ULL}) {
    const prism::LatentGrid start = random_grid(3, 3, 4, 400 + seed);
    const Eigen::MatrixXd noise = random_matrix(start.values.rows(), start.values.cols(), 500 + seed);
    const prism::NoisePredictor fixed = [&](const prism::LatentGrid&, int,
                                            const prism::ConditioningMatrix&) { return noise; };
    prism::LatentGrid state = prism::forward_noise(start, 64, noise, sched);
    for (int t = 64; t >= 1; --t) state = prism::denoise_step(state, t, c, fixed, sched);
    CHECK(state.t == 0);
    CHECK(max_abs(state.values - start.values) < 1e-5);
  }
}

TEST_CASE("a fixed model pins the denoise update formula") {
  // Scalar re-computation with beta = {0.1, 0.2} and a constant model.
  const prism::NoiseSchedule sched = prism::make_schedule({0.1, 0.2});
  CHECK(sched.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(sched.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-15));

  prism::LatentGrid ht = prism::LatentGrid::zero(1, 1, 1, 2);
  ht.values(0, 0) = 0.8;
  const prism::NoisePredictor constant = [](const prism::LatentGrid& g, int,
                                            const prism::ConditioningMatrix&) {
    return Eigen::MatrixXd::Constant(g.values.rows(), g.values.cols(), 0.3).eval();
  };
  const prism::ConditioningMatrix c = Eigen::MatrixXd::Zero(1, 1);

  const prism::LatentGrid out = prism::denoise_step(ht, 2, c, constant, sched);
  const double h0_hat = (0.8 - std::sqrt(1.0 - 0.72) * 0.3) / std::sqrt(0.72);
  const double expected = std::sqrt(0.9) * h0_hat + std::sqrt(1.0 - 0.9) * 0.3;
  CHECK(out.values(0, 0) == doctest::Approx(expected).epsilon(1e-14));

  // Stochastic mode needs a generator, is seed-deterministic, and collapses
  // to the deterministic update at t=1 where the noise scale vanishes.
  CHECK(code_of([&] { prism::denoise_step(ht, 2, c, constant, sched, false); }) ==
        prism::ErrorCode::usage);
  prism::Rng rng_a(77);
  prism::Rng rng_b(77);
  const prism::LatentGrid sa = prism::denoise_step(ht, 2, c, constant, sched, false, &rng_a);
  const prism::LatentGrid sb = prism::denoise_step(ht, 2, c, constant, sched, false, &rng_b);
  CHECK(sa.values == sb.values);
  CHECK(sa.values(0, 0) != doctest::Approx(out.values(0, 0)).epsilon(1e-12));

  prism::LatentGrid h1 = prism::LatentGrid::zero(1, 1, 1, 1);
  h1.values(0, 0) = -0.4;
  prism::Rng rng_c(78);
  const prism::LatentGrid det1 = prism::denoise_step(h1, 1, c, constant, sched);
  const prism::LatentGrid sto1 = prism::denoise_step(h1, 1, c, constant, sched, false, &rng_c);
  CHECK(det1.values == sto1.values);

  CHECK(code_of([&] { prism::denoise_step(ht, 0, c, constant, sched); }) ==
        prism::ErrorCode::range_violation);
  const prism::NoisePredictor bad_shape = [](const prism::LatentGrid&, int,
                                             const prism::ConditioningMatrix&) {
    return Eigen::MatrixXd::Zero(2, 2).eval();
  };
  CHECK(code_of([&] { prism::denoise_step(ht, 2, c, bad_shape, sched); }) ==
        prism::ErrorCode::dimension_mismatch);
}

TEST_CASE("composition tiles half planes exactly") {
  const prism::LatentGrid left = random_grid(6, 8, 3, 51);
  const prism::LatentGrid right = random_grid(6, 8, 3, 52);

  // Single full-frame entry is the identity.
  const prism::LatentGrid solo = prism::compose_psi({{left, prism::LocationLabel::full}});
  CHECK(solo.values == left.values);
  CHECK(solo.h == 6);
  CHECK(solo.w == 8);

  // Left/right placement is bit-exact against the standalone resize.
  const prism::LatentGrid lr = prism::compose_psi(
      {{left, prism::LocationLabel::left_half}, {right, prism::LocationLabel::right_half}});
  CHECK(lr.h == 6);
  CHECK(lr.w == 8);
  const prism::LatentGrid left_resized = prism::resize_bilinear(left, 6, 4);
  const prism::LatentGrid right_resized = prism::resize_bilinear(right, 6, 4);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 4; ++x) {
      CHECK(lr.values.row(y * 8 + x) == left_resized.values.row(y * 4 + x));
      CHECK(lr.values.row(y * 8 + 4 + x) == right_resized.values.row(y * 4 + x));
    }
  }

  // Swapped order lands in the same regions.
  const prism::LatentGrid rl = prism::compose_psi(
      {{right, prism::LocationLabel::right_half}, {left, prism::LocationLabel::left_half}});
  CHECK(rl.values == lr.values);

  // Constant fields integrate to the average of the two halves.
  prism::LatentGrid top = prism::LatentGrid::zero(4, 4, 2);
  top.values.setConstant(2.5);
  prism::LatentGrid bottom = prism::LatentGrid::zero(4, 4, 2);
  bottom.values.setConstant(-1.5);
  const prism::LatentGrid tb = prism::compose_psi(
      {{top, prism::LocationLabel::top_half}, {bottom, prism::LocationLabel::bottom_half}});
  CHECK(tb.values.mean() == doctest::Approx((2.5 - 1.5) / 2.0).epsilon(1e-12));

  // Location sets that do not tile the frame are rejected.
  using LL = prism::LocationLabel;
  CHECK(code_of([&] { prism::compose_psi({}); }) == prism::ErrorCode::composition);
  CHECK(code_of([&] { prism::compose_psi({{left, LL::left_half}}); }) ==
        prism::ErrorCode::composition);
  CHECK(code_of([&] { prism::compose_psi({{left, LL::left_half}, {right, LL::top_half}}); }) ==
        prism::ErrorCode::composition);
  CHECK(code_of([&] { prism::compose_psi({{left, LL::left_half}, {right, LL::left_half}}); }) ==
        prism::ErrorCode::composition);
  CHECK(code_of([&] { prism::compose_psi({{left, LL::full}, {right, LL::full}}); }) ==
        prism::ErrorCode::composition);
  CHECK(code_of([&] {
          prism::compose_psi({{left, LL::left_half}, {right, LL::right_half}, {left, LL::full}});
        }) == prism::ErrorCode::composition);
  const prism::LatentGrid odd = random_grid(6, 5, 3, 53);
  CHECK(code_of([&] { prism::compose_psi({{odd, LL::left_half}, {odd, LL::right_half}}); }) ==
        prism::ErrorCode::composition);
  const prism::LatentGrid odd_h = random_grid(5, 6, 3, 54);
  CHECK(code_of([&] { prism::compose_psi({{odd_h, LL::top_half}, {odd_h, LL::bottom_half}}); }) ==
        prism::ErrorCode::composition);
  const prism::LatentGrid thin = random_grid(6, 8, 2, 55);
  CHECK(code_of([&] { prism::compose_psi({{left, LL::left_half}, {thin, LL::right_half}}); }) ==
        prism::ErrorCode::dimension_mismatch);

  // Bilinear resize: identity size is a bit-exact copy, constants persist.
  const prism::LatentGrid same = prism::resize_bilinear(left, 6, 8);
  CHECK(same.values == left.values);
  prism::LatentGrid flat = prism::LatentGrid::zero(3, 5, 2);
  flat.values.setConstant(0.625);
  const prism::LatentGrid stretched = prism::resize_bilinear(flat, 7, 11);
  CHECK(max_abs(stretched.values - Eigen::MatrixXd::Constant(77, 2, 0.625)) < 1e-12);
}

TEST_CASE("blend is the exact affine path") {
  const prism::LatentGrid a = random_grid(4, 5, 3, 61);
  const prism::LatentGrid b = random_grid(4, 5, 3, 62);

  CHECK(prism::blend(a, b, 1.0).values == a.values);
  CHECK(prism::blend(a, b, 0.0).values == b.values);

  prism::Rng rng(63);
  for (int trial = 0; trial < 8; ++trial) {
    const double b1 = rng.uniform();
    const double b2 = rng.uniform();
    const Eigen::MatrixXd lhs =
        prism::blend(a, b, b1).values + prism::blend(a, b, b2).values;
    const Eigen::MatrixXd rhs = 2.0 * prism::blend(a, b, (b1 + b2) / 2.0).values;
    CHECK(max_abs(lhs - rhs) < 1e-9);
  }

  const prism::LatentGrid other = random_grid(4, 6, 3, 64);
  CHECK(code_of([&] { prism::blend(a, other, 0.5); }) == prism::ErrorCode::dimension_mismatch);
  CHECK(code_of([&] { prism::blend(a, b, 1.5); }) == prism::ErrorCode::range_violation);
  CHECK(code_of([&] { prism::blend(a, b, -0.1); }) == prism::ErrorCode::range_violation);

  // Inference defaults: half-and-half blending over a 40-step chain.
  const prism::ReconstructOptions defaults;
  CHECK(defaults.blend_beta == 0.5);
  CHECK(defaults.steps == 40);
}

TEST_CASE("patch codec preserves per-patch channel means") {
  const prism::PatchCodec codec;
  CHECK(max_abs(codec.lift().transpose() * codec.lift() - Eigen::MatrixXd::Identity(3, 3)) <
        1e-12);
  const prism::PatchCodec twin;
  CHECK(twin.lift() == codec.lift());

  // A mix of rendered scenes and unstructured noise images.
  std::vector<prism::Image> images;
  prism::Rng rng(71);
  for (int i = 0; i < 3; ++i)
    images.push_back(prism::render_scene(prism::random_scene(rng), 32, 32));
  prism::Image noise_img(16, 24);
  for (double& v : noise_img.data) v = rng.uniform();
  images.push_back(noise_img);

  prism::PatchCodec fitted;
  fitted.fit(images);
  for (const prism::Image& image : images) {
    const prism::LatentGrid latent = fitted.encode(image);
    CHECK(latent.d == prism::PatchCodec::kLatentDim);
    CHECK(latent.h == image.height / 4);
    CHECK(latent.w == image.width / 4);
    const prism::Image decoded = fitted.decode(latent);
    REQUIRE(decoded.same_shape(image));
    for (int py = 0; py < latent.h; ++py) {
      for (int px = 0; px < latent.w; ++px) {
        for (int c = 0; c < 3; ++c) {
          double want = 0.0, got = 0.0;
          for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) {
              want += image.at(py * 4 + y, px * 4 + x, c);
              got += decoded.at(py * 4 + y, px * 4 + x, c);
            }
          }
          CHECK(std::abs(want - got) / 16.0 < 1e-2);
          CHECK(std::abs(want - got) / 16.0 < 1e-6);
        }
      }
    }
  }

  // Decoding clamps runaway latents into the pixel range.
  prism::LatentGrid wild = prism::LatentGrid::zero(2, 2, 8);
  wild.values.setConstant(50.0);
  const prism::Image clamped = codec.decode(wild);
  for (double v : clamped.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CHECK(code_of([&] { codec.encode(prism::Image(14, 16)); }) ==
        prism::ErrorCode::dimension_mismatch);
  CHECK(code_of([&] { codec.decode(prism::LatentGrid::zero(2, 2, 4)); }) ==
        prism::ErrorCode::dimension_mismatch);
  CHECK(code_of([&] { prism::PatchCodec empty_fit; empty_fit.fit({}); }) ==
        prism::ErrorCode::usage);
  CHECK(code_of([] {
          prism::PatchCodec(Eigen::MatrixXd::Zero(4, 3), Eigen::MatrixXd::Zero(3, 8),
                            Eigen::VectorXd::Zero(3));
        }) == prism::ErrorCode::shape_mismatch);
}

TEST_CASE("denoiser gradients match central finite differences") {
  prism::DenoiserConfig cfg;
  cfg.latent_dim = 3;
  cfg.width = 6;
  cfg.blocks = 2;
  cfg.cond_dim = 5;
  cfg.d_k = 4;
  cfg.time_dim = 4;
  cfg.pixel_height = 16;
  cfg.pixel_width = 16;
  cfg.seed = 81;
  prism::Denoiser model(cfg);

  // Randomize away the zero-initialized head and value projections.
  const Eigen::Index n = static_cast<Eigen::Index>(model.parameter_count());
  Eigen::VectorXd params = 0.2 * random_matrix(n, 1, 82).col(0);
  model.set_params(params);

  const prism::LatentGrid ht = random_grid(3, 4, 3, 83);
  const Eigen::MatrixXd eps = random_matrix(ht.values.rows(), ht.values.cols(), 84);
  const prism::ConditioningMatrix c = random_matrix(4, 5, 85);
  const int t = 7;

  model.zero_grads();
  const double base = model.noise_loss(ht, t, c, eps, true);
  CHECK(std::isfinite(base));
  const Eigen::VectorXd analytic = model.flatten_grads();

  const double h = 1e-5;
  int close = 0;
  double worst = 0.0;
  Eigen::Index worst_at = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd probe = params;
    probe(i) = params(i) + h;
    model.set_params(probe);
    const double up = model.noise_loss(ht, t, c, eps, false);
    probe(i) = params(i) - h;
    model.set_params(probe);
    const double down = model.noise_loss(ht, t, c, eps, false);
    const double fd = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic(i) - fd) /
                       std::max(std::abs(analytic(i)) + std::abs(fd), 1e-8);
    if (rel < 1e-3) ++close;
    if (rel > worst) {
      worst = rel;
      worst_at = i;
    }
  }
  CAPTURE(worst);
  CAPTURE(worst_at);
  CHECK(close >= static_cast<int>(0.99 * static_cast<double>(n)));

  CHECK(prism::Denoiser(prism::DenoiserConfig{}).parameter_count() <= 1000000);
  CHECK(code_of([] {
          prism::DenoiserConfig bad;
          bad.time_dim = 5;
          prism::Denoiser m(bad);
        }) == prism::ErrorCode::usage);
}

TEST_CASE("training reduces held-out denoising loss") {
  const prism::NoiseSchedule sched = prism::linear_schedule();
  prism::Rng scene_rng(91);
  std::vector<prism::DenoiserSample> train;
  std::vector<prism::DenoiserSample> held;
  for (int i = 0; i < 28; ++i) {
    const prism::SyntheticScene scene = prism::random_scene(scene_rng);
    prism::DenoiserSample sample{
        prism::render_scene(scene, 16, 16),
        prism::serialize_description(prism::ground_truth_description(scene))};
    if (i < 24) {
      train.push_back(std::move(sample));
    } else {
      held.push_back(std::move(sample));
    }
  }

  prism::DenoiserConfig cfg;
  cfg.width = 16;
  cfg.blocks = 2;
  cfg.d_k = 8;
  cfg.time_dim = 8;
  cfg.pixel_height = 16;
  cfg.pixel_width = 16;
  cfg.seed = 92;
  prism::Denoiser model(cfg);
  const prism::PatchCodec codec;

  const prism::TextEmbedder embedder(prism::kDefaultTextEmbedSeed, cfg.cond_dim);
  std::vector<prism::LatentGrid> held_latents;
  std::vector<prism::ConditioningMatrix> held_conds;
  std::vector<EvalSet> held_sets;
  for (std::size_t i = 0; i < held.size(); ++i) {
    held_latents.push_back(codec.encode(held[i].image));
    held_conds.push_back(embedder.embed_tokens(held[i].text));
    held_sets.push_back(make_eval_set(held_latents.back(), sched, 16, 93 + i));
  }

  // The zero-initialized head predicts nothing, so the first loss sits at
  // the raw unit-noise energy.
  const double initial = eval_loss(model, held_latents, held_conds, held_sets, sched);
  CHECK(initial > 0.7);
  CHECK(initial < 1.3);

  const std::vector<double> curve = prism::train_denoiser(model, codec, train, sched, 120, 2e-3, 94);
  REQUIRE(curve.size() == 120);
  for (double v : curve) CHECK(std::isfinite(v));
  const double final_loss = eval_loss(model, held_latents, held_conds, held_sets, sched);
  CAPTURE(initial);
  CAPTURE(final_loss);
  CHECK(final_loss < 0.7 * initial);
  CHECK(curve.back() < curve.front());

  // Bitwise determinism in the seed.
  prism::Denoiser again(cfg);
  const std::vector<double> curve2 = prism::train_denoiser(again, codec, train, sched, 120, 2e-3, 94);
  CHECK(curve2 == curve);
  CHECK(again.flatten_params() == model.flatten_params());

  // No-op schedule leaves the parameters untouched.
  prism::Denoiser idle(cfg);
  const Eigen::VectorXd before = idle.flatten_params();
  CHECK(prism::train_denoiser(idle, codec, train, sched, 0, 2e-3, 94).empty());
  CHECK(idle.flatten_params() == before);

  CHECK(code_of([&] { prism::train_denoiser(idle, codec, train, sched, 1, -1.0, 94); }) ==
        prism::ErrorCode::usage);
  CHECK(code_of([&] { prism::train_denoiser(idle, codec, {}, sched, 1, 2e-3, 94); }) ==
        prism::ErrorCode::usage);
  try {
    prism::Denoiser doomed(cfg);
    prism::train_denoiser(doomed, codec, train, sched, 3, 1e300, 94);
    FAIL("expected divergence");
  } catch (const prism::Error& err) {
    CHECK(err.code() == prism::ErrorCode::diverged);
    CHECK(std::string(err.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("reconstruction is deterministic and honors the blend endpoint") {
  prism::DenoiserConfig cfg;
  cfg.width = 8;
  cfg.blocks = 1;
  cfg.d_k = 4;
  cfg.time_dim = 4;
  cfg.pixel_height = 16;
  cfg.pixel_width = 16;
  cfg.seed = 101;
  prism::Denoiser model(cfg);
  // Random parameters make the prediction depend on the conditioning.
  model.set_params(0.1 * random_matrix(static_cast<Eigen::Index>(model.parameter_count()), 1, 102)
                             .col(0));
  const prism::PatchCodec codec;
  const prism::NoiseSchedule sched = prism::linear_schedule(12, 1e-4, 2e-2);

  prism::StructuredDescription d;
  d.objects[0] = {"circle", "red solid", prism::LocationLabel::left_half};
  d.objects[1] = {"square", "blue solid", prism::LocationLabel::right_half};
  d.background = "white background";

  prism::ReconstructOptions opt;
  opt.steps = 12;
  opt.seed = 4;
  const prism::Image once = prism::reconstruct(d, model, codec, sched, opt);
  const prism::Image twice = prism::reconstruct(d, model, codec, sched, opt);
  CHECK(once.height == 16);
  CHECK(once.width == 16);
  CHECK(once.data == twice.data);
  for (double v : once.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  prism::ReconstructOptions reseeded = opt;
  reseeded.seed = 5;
  CHECK(prism::reconstruct(d, model, codec, sched, reseeded).data != once.data);

  // The zero endpoint reduces to a single-branch chain under the global text.
  prism::ReconstructOptions global_only = opt;
  global_only.blend_beta = 0.0;
  const prism::Image endpoint = prism::reconstruct(d, model, codec, sched, global_only);

  const prism::TextEmbedder embedder(prism::kDefaultTextEmbedSeed, cfg.cond_dim);
  const prism::ConditioningMatrix c0 = embedder.embed_tokens(prism::serialize_description(d));
  prism::Rng rng(prism::seed_stream(opt.seed, "reconstruct"));
  prism::LatentGrid state = prism::LatentGrid::zero(4, 4, cfg.latent_dim, opt.steps);
  for (Eigen::Index r = 0; r < state.values.rows(); ++r)
    for (Eigen::Index col = 0; col < state.values.cols(); ++col)
      state.values(r, col) = rng.normal();
  const prism::NoisePredictor pred = model.predictor();
  for (int t = opt.steps; t >= 1; --t)
    state = prism::denoise_step(state, t, c0, pred, sched);
  const prism::Image manual = codec.decode(state);
  CHECK(endpoint.data == manual.data);

  // Stripping relation headers changes the per-object conditioning.
  prism::StructuredDescription with_header = d;
  with_header.objects[0].desc =
      prism::serialize_header({"circle", "left of", "square", ""}) + " red solid";
  prism::ReconstructOptions keep = opt;
  keep.strip_headers = false;
  const prism::Image stripped = prism::reconstruct(with_header, model, codec, sched, opt);
  const prism::Image kept = prism::reconstruct(with_header, model, codec, sched, keep);
  CHECK(stripped.data != kept.data);

  prism::ReconstructOptions bad = opt;
  bad.steps = 0;
  CHECK(code_of([&] { prism::reconstruct(d, model, codec, sched, bad); }) ==
        prism::ErrorCode::usage);
  prism::ReconstructOptions too_long = opt;
  too_long.steps = 13;
  CHECK(code_of([&] { prism::reconstruct(d, model, codec, sched, too_long); }) ==
        prism::ErrorCode::range_violation);
}

TEST_CASE("diffusion checkpoints round trip by byte") {
  const auto dir = fresh_dir("prism_diffusion_ckpt");
  prism::DenoiserConfig cfg;
  cfg.width = 8;
  cfg.blocks = 2;
  cfg.d_k = 4;
  cfg.time_dim = 4;
  cfg.pixel_height = 16;
  cfg.pixel_width = 16;
  cfg.seed = 111;
  prism::Denoiser model(cfg);
  model.set_params(0.05 * random_matrix(static_cast<Eigen::Index>(model.parameter_count()), 1, 112)
                              .col(0));
  prism::PatchCodec codec;
  prism::Rng img_rng(113);
  std::vector<prism::Image> imgs{prism::render_scene(prism::random_scene(img_rng), 16, 16)};
  codec.fit(imgs);
  const prism::NoiseSchedule sched = prism::linear_schedule(12, 2e-4, 1e-2);

  const auto path = dir / "diffusion.ckpt";
  prism::save_diffusion(model, codec, sched, path);
  prism::DiffusionBundle loaded = prism::load_diffusion(path);

  CHECK(loaded.model.config().width == cfg.width);
  CHECK(loaded.model.config().blocks == cfg.blocks);
  CHECK(loaded.model.config().pixel_height == 16);
  CHECK(loaded.sched.betas == sched.betas);
  CHECK(max_abs(loaded.codec.lift() - codec.lift()) < 1e-6);
  CHECK(max_abs(loaded.codec.mix() - codec.mix()) < 1e-6);
  CHECK((loaded.model.flatten_params() - model.flatten_params()).cwiseAbs().maxCoeff() < 1e-6);

  // Tensors are stored as f32, so save(load(f)) is byte-stable.
  const auto resaved = dir / "resaved.ckpt";
  prism::save_diffusion(loaded.model, loaded.codec, loaded.sched, resaved);
  CHECK(prism::sha256_hex(prism::read_file(resaved)) !=
        prism::sha256_hex(std::string()));
  prism::DiffusionBundle reloaded = prism::load_diffusion(resaved);
  CHECK(reloaded.model.flatten_params() == loaded.model.flatten_params());
  const auto resaved2 = dir / "resaved2.ckpt";
  prism::save_diffusion(reloaded.model, reloaded.codec, reloaded.sched, resaved2);
  CHECK(prism::read_file(resaved2) == prism::read_file(resaved));

  // Reconstruction is a pure function of the checkpoint contents.
  prism::StructuredDescription d;
  d.objects[0] = {"circle", "red solid", prism::LocationLabel::left_half};
  d.objects[1] = {"square", "blue solid", prism::LocationLabel::right_half};
  d.background = "white background";
  prism::ReconstructOptions opt;
  opt.steps = 12;
  opt.seed = 9;
  const prism::Image via_a = prism::reconstruct(d, loaded.model, loaded.codec, loaded.sched, opt);
  const prism::Image via_b =
      prism::reconstruct(d, reloaded.model, reloaded.codec, reloaded.sched, opt);
  CHECK(via_a.data == via_b.data);

  // Tampering knocks out precise failure modes.
  std::string bytes = prism::read_file(path);
  std::string wrong_magic = bytes;
  wrong_magic[0] = 'X';
  prism::write_file(dir / "magic.ckpt", wrong_magic);
  CHECK(code_of([&] { prism::load_diffusion(dir / "magic.ckpt"); }) == prism::ErrorCode::parse);

  prism::write_file(dir / "short.ckpt", bytes.substr(0, bytes.size() - 7));
  CHECK(code_of([&] { prism::load_diffusion(dir / "short.ckpt"); }) == prism::ErrorCode::parse);

  prism::write_file(dir / "long.ckpt", bytes + "x");
  CHECK(code_of([&] { prism::load_diffusion(dir / "long.ckpt"); }) == prism::ErrorCode::parse);

  const std::string needle = "\"name\":\"codec.mix\",\"rows\":3";
  const auto at = bytes.find(needle);
  REQUIRE(at != std::string::npos);
  std::string patched = bytes;
  patched.replace(at, needle.size(), "\"name\":\"codec.mix\",\"rows\":4");
  prism::write_file(dir / "rows.ckpt", patched);
  CHECK(code_of([&] { prism::load_diffusion(dir / "rows.ckpt"); }) ==
        prism::ErrorCode::shape_mismatch);

  const std::string name_needle = "\"name\":\"blk0.psi_w\"";
  const auto name_at = bytes.find(name_needle);
  REQUIRE(name_at != std::string::npos);
  std::string renamed = bytes;
  renamed.replace(name_at, name_needle.size(), "\"name\":\"blk0.xsi_w\"");
  prism::write_file(dir / "name.ckpt", renamed);
  CHECK(code_of([&] { prism::load_diffusion(dir / "name.ckpt"); }) ==
        prism::ErrorCode::shape_mismatch);
}
