#include "prism/alignment.hpp"

#include <algorithm>
#include <cmath>

#include "prism/common.hpp"
#include "prism/mlp.hpp"

namespace prism {

namespace {

Eigen::MatrixXd pairwise_squared_distances(const Eigen::MatrixXd& samples) {
  const Eigen::VectorXd sq = samples.rowwise().squaredNorm();
  Eigen::MatrixXd d = sq.replicate(1, samples.rows()) + sq.transpose().replicate(samples.rows(), 1) -
                      2.0 * samples * samples.transpose();
  return d.cwiseMax(0.0);  // rounding can dip below zero
}

// Subtracts row and column means, adds back the grand mean: H * g * H.
Eigen::MatrixXd center_gram(const Eigen::MatrixXd& g) {
  const Eigen::VectorXd row_mean = g.rowwise().mean();
  const double grand = row_mean.mean();
  Eigen::MatrixXd out = g;
  out.colwise() -= row_mean;
  out.rowwise() -= row_mean.transpose();
  out.array() += grand;
  return out;
}

}  // namespace

GramMatrix rbf_gram(const Eigen::MatrixXd& samples, std::optional<double> bandwidth) {
  const Eigen::Index n = samples.rows();
  if (n < 2) throw Error(ErrorCode::usage, "rbf_gram needs at least 2 samples");
  if (!samples.allFinite()) throw Error(ErrorCode::nan_payload, "rbf_gram input not finite");
  if (bandwidth && *bandwidth <= 0) {
    throw Error(ErrorCode::degenerate_bandwidth, "bandwidth must be positive");
  }

  const Eigen::MatrixXd d2 = pairwise_squared_distances(samples);
  double sigma;
  if (bandwidth) {
    sigma = *bandwidth;
  } else {
    std::vector<double> dist;
    dist.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) dist.push_back(std::sqrt(d2(i, j)));
    }
    std::sort(dist.begin(), dist.end());
    const std::size_t m = dist.size();
    sigma = m % 2 == 1 ? dist[m / 2] : 0.5 * (dist[m / 2 - 1] + dist[m / 2]);
    if (sigma == 0.0) {
      throw Error(ErrorCode::degenerate_bandwidth,
                  "median pairwise distance is zero (all samples identical)");
    }
    sigma = std::max(sigma, 1e-12);
  }

  GramMatrix gram;
  gram.bandwidth = sigma;
  gram.values = (-d2 / (2.0 * sigma * sigma)).array().exp().matrix();
  gram.values = ((gram.values + gram.values.transpose()) / 2.0).eval();  // exact symmetry
  gram.values.diagonal().setOnes();
  return gram;
}

double hsic(const GramMatrix& gx, const GramMatrix& gk) {
  const Eigen::Index n = gx.values.rows();
  if (n != gx.values.cols() || gk.values.rows() != n || gk.values.cols() != n) {
    throw Error(ErrorCode::shape_mismatch, "hsic needs equal square Gram matrices");
  }
  if (n < 2) throw Error(ErrorCode::usage, "hsic needs N >= 2");
  const Eigen::MatrixXd cx = center_gram(gx.values);
  const Eigen::MatrixXd ck = center_gram(gk.values);
  // Both factors are symmetric, so the trace is the elementwise product sum.
  const double denom = static_cast<double>(n - 1) * (n - 1);
  return (cx.array() * ck.array()).sum() / denom;
}

double cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& k) {
  if (x.rows() < 3 || k.rows() < 3) throw Error(ErrorCode::usage, "cka needs N >= 3");
  if (x.rows() != k.rows()) throw Error(ErrorCode::shape_mismatch, "cka needs paired samples");
  GramMatrix gx, gk;
  try {
    gx = rbf_gram(x);
    gk = rbf_gram(k);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::degenerate_bandwidth) {
      throw Error(ErrorCode::constant_input, "cka input has no variation across samples");
    }
    throw;
  }
  const double hxx = hsic(gx, gx);
  const double hkk = hsic(gk, gk);
  if (hxx <= 1e-15 || hkk <= 1e-15) {
    throw Error(ErrorCode::constant_input, "cka denominator vanished");
  }
  return std::clamp(hsic(gx, gk) / std::sqrt(hxx * hkk), 0.0, 1.0);
}

namespace {

// (C + ridge I)^(-1/2) via symmetric eigendecomposition. With ridge = 0 a
// (numerically) singular covariance is a rank-deficiency error.
Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& cov, double ridge) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorCode::diverged, "covariance eigendecomposition failed");
  }
  const Eigen::VectorXd evals = eig.eigenvalues();
  const double floor = std::max(evals.maxCoeff(), 0.0) * 1e-12;
  Eigen::VectorXd inv(evals.size());
  for (Eigen::Index i = 0; i < evals.size(); ++i) {
    const double lifted = evals[i] + ridge;
    if (lifted <= floor) {
      throw Error(ErrorCode::rank_deficient,
                  "covariance is singular; pass a positive ridge");
    }
    inv[i] = 1.0 / std::sqrt(lifted);
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double cca_first(const Eigen::MatrixXd& x, const Eigen::MatrixXd& k, std::optional<double> ridge) {
  const Eigen::Index n = x.rows();
  if (n <= 2) throw Error(ErrorCode::usage, "cca_first needs N > 2");
  if (k.rows() != n) throw Error(ErrorCode::shape_mismatch, "cca_first needs paired samples");
  if (ridge && *ridge < 0) throw Error(ErrorCode::usage, "ridge must be nonnegative");

  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd kc = k.rowwise() - k.colwise().mean();
  const double denom = static_cast<double>(n - 1);
  const Eigen::MatrixXd cxx = xc.transpose() * xc / denom;
  const Eigen::MatrixXd ckk = kc.transpose() * kc / denom;
  const Eigen::MatrixXd cxk = xc.transpose() * kc / denom;

  const double rx = ridge ? *ridge : 1e-6 * cxx.trace() / static_cast<double>(cxx.rows());
  const double rk = ridge ? *ridge : 1e-6 * ckk.trace() / static_cast<double>(ckk.rows());
  const Eigen::MatrixXd m = inverse_sqrt(cxx, rx) * cxk * inverse_sqrt(ckk, rk);
  const double rho = m.jacobiSvd().singularValues()(0);
  return std::clamp(rho, 0.0, 1.0);
}

GapReport generalization_gap(const Eigen::MatrixXd& x_train, const Eigen::MatrixXd& y_train,
                             const Eigen::MatrixXd& x_test, const Eigen::MatrixXd& y_test,
                             const ProbeConfig& config) {
  if (x_train.rows() < 1 || x_test.rows() < 1) {
    throw Error(ErrorCode::usage, "gap probe needs at least one sample per split");
  }
  if (x_train.rows() != y_train.rows() || x_test.rows() != y_test.rows() ||
      x_train.cols() != x_test.cols() || y_train.cols() != y_test.cols()) {
    throw Error(ErrorCode::shape_mismatch, "gap probe inputs misaligned");
  }
  if (config.epochs < 1) throw Error(ErrorCode::usage, "probe epochs must be >= 1");

  const int v = static_cast<int>(x_train.cols());
  const int d = static_cast<int>(y_train.cols());
  std::vector<int> dims{v};
  if (config.hidden_sizes.empty()) {
    dims.push_back(4 * std::min(v, d));
  } else {
    dims.insert(dims.end(), config.hidden_sizes.begin(), config.hidden_sizes.end());
  }
  dims.push_back(d);
  Mlp probe(dims, config.seed);

  const auto mse = [](const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
    return (pred - target).squaredNorm() / static_cast<double>(target.size());
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Mlp::Cache cache;
    const Eigen::MatrixXd pred = probe.forward(x_train, &cache);
    const double loss = mse(pred, y_train);
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::diverged, "probe loss not finite at epoch " + std::to_string(epoch));
    }
    const Eigen::MatrixXd grad = 2.0 * (pred - y_train) / static_cast<double>(y_train.size());
    probe.backward(cache, grad);
    probe.step(config.learning_rate);
  }

  GapReport report;
  report.train_loss = mse(probe.forward(x_train), y_train);
  report.test_loss = mse(probe.forward(x_test), y_test);
  if (!std::isfinite(report.train_loss) || !std::isfinite(report.test_loss)) {
    throw Error(ErrorCode::diverged, "probe loss not finite after training");
  }
  report.gap = report.test_loss - report.train_loss;
  return report;
}

}  // namespace prism
