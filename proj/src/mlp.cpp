#include "prism/mlp.hpp"

#include <cmath>

#include "prism/common.hpp"

namespace prism {

Mlp::Mlp(const std::vector<int>& dims, std::uint64_t seed) : dims_(dims) {
  if (dims.size() < 2) throw Error(ErrorCode::usage, "mlp needs input and output dims");
  for (int d : dims) {
    if (d < 1) throw Error(ErrorCode::usage, "mlp layer widths must be positive");
  }
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int in = dims[l], out = dims[l + 1];
    Eigen::MatrixXd w(in, out);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (int r = 0; r < in; ++r) {
      for (int c = 0; c < out; ++c) w(r, c) = scale * rng.normal();
    }
    w_.push_back(std::move(w));
    b_.push_back(Eigen::VectorXd::Zero(out));
    gw_.push_back(Eigen::MatrixXd::Zero(in, out));
    gb_.push_back(Eigen::VectorXd::Zero(out));
    vw_.push_back(Eigen::MatrixXd::Zero(in, out));
    vb_.push_back(Eigen::VectorXd::Zero(out));
  }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Cache* cache) const {
  if (x.cols() != input_dim()) {
    throw Error(ErrorCode::dimension_mismatch,
                "mlp expects " + std::to_string(input_dim()) + " inputs, got " +
                    std::to_string(x.cols()));
  }
  if (cache) {
    cache->acts.clear();
    cache->acts.push_back(x);
  }
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    Eigen::MatrixXd z = (a * w_[l]).rowwise() + b_[l].transpose();
    a = l + 1 < w_.size() ? z.array().tanh().matrix() : std::move(z);
    if (cache) cache->acts.push_back(a);
  }
  return a;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const Eigen::MatrixXd& grad_out) {
  if (cache.acts.size() != w_.size() + 1) {
    throw Error(ErrorCode::usage, "mlp backward needs a cache from forward");
  }
  Eigen::MatrixXd grad = grad_out;
  for (std::size_t l = w_.size(); l-- > 0;) {
    // Last layer is linear; hidden layers apply tanh'(z) = 1 - a^2.
    if (l + 1 < w_.size()) {
      grad = (grad.array() * (1.0 - cache.acts[l + 1].array().square())).matrix();
    }
    gw_[l] += cache.acts[l].transpose() * grad;
    gb_[l] += grad.colwise().sum().transpose();
    grad = grad * w_[l].transpose();
  }
  return grad;
}

double Mlp::grad_squared_norm() const {
  double total = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    total += gw_[l].squaredNorm() + gb_[l].squaredNorm();
  }
  return total;
}

void Mlp::step(double lr, double momentum, double clip) {
  double scale = 1.0;
  if (clip > 0) {
    const double norm = std::sqrt(grad_squared_norm());
    if (norm > clip) scale = clip / norm;
  }
  for (std::size_t l = 0; l < w_.size(); ++l) {
    vw_[l] = momentum * vw_[l] + scale * gw_[l];
    vb_[l] = momentum * vb_[l] + scale * gb_[l];
    w_[l] -= lr * vw_[l];
    b_[l] -= lr * vb_[l];
  }
  zero_grads();
}

void Mlp::scale_grads(double factor) {
  for (std::size_t l = 0; l < w_.size(); ++l) {
    gw_[l] *= factor;
    gb_[l] *= factor;
  }
}

void Mlp::zero_grads() {
  for (std::size_t l = 0; l < w_.size(); ++l) {
    gw_[l].setZero();
    gb_[l].setZero();
  }
}

std::int64_t Mlp::parameter_count() const {
  std::int64_t n = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) n += w_[l].size() + b_[l].size();
  return n;
}

Eigen::VectorXd Mlp::flatten_params() const {
  Eigen::VectorXd flat(parameter_count());
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    flat.segment(at, w_[l].size()) = Eigen::Map<const Eigen::VectorXd>(w_[l].data(), w_[l].size());
    at += w_[l].size();
    flat.segment(at, b_[l].size()) = b_[l];
    at += b_[l].size();
  }
  return flat;
}

void Mlp::set_params(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) {
    throw Error(ErrorCode::shape_mismatch, "flat parameter vector has the wrong length");
  }
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    Eigen::Map<Eigen::VectorXd>(w_[l].data(), w_[l].size()) = flat.segment(at, w_[l].size());
    at += w_[l].size();
    b_[l] = flat.segment(at, b_[l].size());
    at += b_[l].size();
  }
}

Eigen::VectorXd Mlp::flatten_grads() const {
  Eigen::VectorXd flat(parameter_count());
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    flat.segment(at, gw_[l].size()) =
        Eigen::Map<const Eigen::VectorXd>(gw_[l].data(), gw_[l].size());
    at += gw_[l].size();
    flat.segment(at, gb_[l].size()) = gb_[l];
    at += gb_[l].size();
  }
  return flat;
}

}  // namespace prism
