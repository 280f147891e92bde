#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

namespace prism {

/// RBF kernel matrix with the bandwidth that produced it.
struct GramMatrix {
  Eigen::MatrixXd values;  // N x N, symmetric, unit diagonal
  double bandwidth = 0.0;
};

/// Entry (i,j) = exp(-|s_i - s_j|^2 / (2 sigma^2)). Without an explicit
/// bandwidth, sigma is the median pairwise distance (clamped to >= 1e-12);
/// all-identical samples then raise degenerate-bandwidth.
GramMatrix rbf_gram(const Eigen::MatrixXd& samples, std::optional<double> bandwidth = {});

/// tr((H Gx H)(H Gk H)) / (N-1)^2 with H = I - (1/N) 1 1^T.
double hsic(const GramMatrix& gx, const GramMatrix& gk);

/// HSIC(X,K) / sqrt(HSIC(X,X) HSIC(K,K)) over median-bandwidth RBF Grams,
/// clamped to [0,1]. Row-constant input raises constant-input.
double cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& k);

/// First canonical correlation: largest singular value of
/// (Cxx+rI)^(-1/2) Cxk (Ckk+rI)^(-1/2) after column centering, clamped to
/// [0,1]. Default ridge is 1e-6 * trace/dim per side; ridge=0 on singular
/// covariance raises rank-deficient.
double cca_first(const Eigen::MatrixXd& x, const Eigen::MatrixXd& k,
                 std::optional<double> ridge = {});

struct ProbeConfig {
  std::vector<int> hidden_sizes;  // empty = one hidden layer of 4*min(v,d)
  int epochs = 200;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct GapReport {
  double train_loss = 0.0;
  double test_loss = 0.0;
  double gap = 0.0;  // test - train
};

/// Trains an MLP probe from x to y with mean-squared loss and reports the
/// train/test loss difference. Deterministic for a fixed config.
GapReport generalization_gap(const Eigen::MatrixXd& x_train, const Eigen::MatrixXd& y_train,
                             const Eigen::MatrixXd& x_test, const Eigen::MatrixXd& y_test,
                             const ProbeConfig& config = {});

/// Table-style summary for one representation pair.
struct AlignmentReport {
  double cka = 0.0;
  double cca_rho = 0.0;
  double gen_gap = 0.0;
};

}  // namespace prism
