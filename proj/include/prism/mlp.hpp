#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

namespace prism {

/// Fully-connected net with tanh hidden activations and a linear output
/// layer. Rows are samples. Training is manual-backprop SGD with momentum;
/// weight init is N(0, 1/fan_in), biases start at zero.
class Mlp {
public:
  /// dims = [input, hidden..., output]; needs at least input and output.
  Mlp(const std::vector<int>& dims, std::uint64_t seed);

  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }

  struct Cache {
    std::vector<Eigen::MatrixXd> acts;  // acts[0] = input, then post-activation
  };

  /// Forward pass; pass a cache to enable backward().
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const;

  /// Accumulates parameter gradients for d(loss)/d(output) and returns
  /// d(loss)/d(input).
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_out);

  /// Momentum step over accumulated gradients, with global-norm clipping
  /// (clip <= 0 disables). Gradients are cleared afterwards.
  void step(double lr, double momentum = 0.9, double clip = 1.0);

  void zero_grads();

  /// Multiplies accumulated gradients in place. Lets a caller clip by the
  /// global norm of several components jointly, then step with clip disabled.
  void scale_grads(double factor);

  /// Squared global norm of the accumulated gradients (pre-clip).
  double grad_squared_norm() const;

  // Flat parameter access for checkpoints and finite-difference checks.
  Eigen::VectorXd flatten_params() const;
  void set_params(const Eigen::VectorXd& flat);
  Eigen::VectorXd flatten_grads() const;
  std::int64_t parameter_count() const;

  const std::vector<int>& dims() const { return dims_; }

private:
  std::vector<int> dims_;
  std::vector<Eigen::MatrixXd> w_;  // in x out per layer
  std::vector<Eigen::VectorXd> b_;
  std::vector<Eigen::MatrixXd> gw_;
  std::vector<Eigen::VectorXd> gb_;
  std::vector<Eigen::MatrixXd> vw_;
  std::vector<Eigen::VectorXd> vb_;
};

}  // namespace prism
