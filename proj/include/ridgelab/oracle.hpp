#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "ridgelab/dataset.hpp"
#include "ridgelab/schedule.hpp"

namespace ridgelab::oracle {

/// Closed-form quantities of the forward marginal p_t when p_0 is the
/// empirical distribution of a Dataset. p_t is then a Gaussian mixture with
/// centers alpha(t)*x_i and isotropic variance noise_var(t); everything below
/// follows from the mixture posterior over centers.

inline void check_time(double t) {
  if (!(t > 0.0)) throw std::invalid_argument("oracle: need t > 0 (noise variance vanishes at 0)");
}

/// Posterior probabilities of the mixture components at (t, x).
/// Max-subtracted softmax of -|x - alpha*x_i|^2 / (2*noise_var).
inline Eigen::VectorXd softmax_weights(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  check_time(t);
  const double a = alpha(t), h = noise_var(t);
  const int n = ds.count();
  Eigen::VectorXd e(n);
  for (int i = 0; i < n; ++i) e(i) = -(x - a * ds.point(i)).squaredNorm() / (2.0 * h);
  const double m = e.maxCoeff();
  Eigen::VectorXd w = (e.array() - m).exp();
  w /= w.sum();
  return w;
}

struct Eval {
  double t = 0.0;
  Eigen::VectorXd x;
  Eigen::VectorXd weights;      // n, sums to 1
  Eigen::VectorXd log_weights;  // unnormalized, shifted so the max is 0
  Eigen::VectorXd mean;         // posterior mean of alpha(t) X_0 given X_t = x
  Eigen::MatrixXd cov;          // posterior covariance of the same
  Eigen::VectorXd score;        // grad log p_t(x) = (mean - x)/h
  Eigen::MatrixXd hessian;      // -I/h + cov/h^2
};

inline Eval evaluate(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  check_time(t);
  const double a = alpha(t), h = noise_var(t);
  Eval ev;
  ev.t = t;
  ev.x = x;
  {
    const int n = ds.count();
    Eigen::VectorXd e(n);
    for (int i = 0; i < n; ++i) e(i) = -(x - a * ds.point(i)).squaredNorm() / (2.0 * h);
    ev.log_weights = e.array() - e.maxCoeff();
    ev.weights = ev.log_weights.array().exp();
    ev.weights /= ev.weights.sum();
  }
  const Eigen::MatrixXd centers = a * ds.points();  // d x n
  ev.mean = centers * ev.weights;
  const int d = ds.dim(), n = ds.count();
  // Filled on the lower triangle and mirrored, so symmetry is structural.
  ev.cov = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd c = centers.col(i) - ev.mean;
    for (int r = 0; r < d; ++r)
      for (int s = 0; s <= r; ++s) ev.cov(r, s) += ev.weights(i) * c(r) * c(s);
  }
  for (int r = 0; r < d; ++r)
    for (int s = 0; s < r; ++s) ev.cov(s, r) = ev.cov(r, s);
  ev.score = (ev.mean - x) / h;
  ev.hessian = ev.cov / (h * h);
  ev.hessian.diagonal().array() -= 1.0 / h;
  return ev;
}

inline Eigen::VectorXd posterior_mean(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  check_time(t);
  return (alpha(t) * ds.points()) * softmax_weights(ds, t, x);
}

inline Eigen::VectorXd score(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  return evaluate(ds, t, x).score;
}

inline Eigen::MatrixXd hessian(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  return evaluate(ds, t, x).hessian;
}

/// Jacobian of the posterior mean: cov / noise_var.
inline Eigen::MatrixXd grad_mean(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  return evaluate(ds, t, x).cov / noise_var(t);
}

/// Symmetric third derivative tensor of log p_t, stored dense (d <= 8).
class ThirdTensor {
 public:
  explicit ThirdTensor(int d) : d_(d), v_(static_cast<std::size_t>(d) * d * d, 0.0) {}
  double operator()(int a, int b, int c) const { return v_[(static_cast<std::size_t>(a) * d_ + b) * d_ + c]; }
  double& at(int a, int b, int c) { return v_[(static_cast<std::size_t>(a) * d_ + b) * d_ + c]; }
  int dim() const { return d_; }

  /// Contraction T[.,u,v] as a vector.
  Eigen::VectorXd contract(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d_);
    for (int a = 0; a < d_; ++a)
      for (int b = 0; b < d_; ++b)
        for (int c = 0; c < d_; ++c) out(a) += (*this)(a, b, c) * u(b) * v(c);
    return out;
  }

 private:
  int d_;
  std::vector<double> v_;
};

/// E[(U - mean)^{(x)3}] / h^3 with U the center-valued posterior variable.
inline ThirdTensor third_tensor(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  check_time(t);
  if (ds.dim() > 8) throw std::invalid_argument("third_tensor: dense d^3 storage limited to d <= 8");
  const double h = noise_var(t);
  const Eval ev = evaluate(ds, t, x);
  const Eigen::MatrixXd centers = alpha(t) * ds.points();
  ThirdTensor tt(ds.dim());
  const double h3 = h * h * h;
  const int d = ds.dim();
  for (int i = 0; i < ds.count(); ++i) {
    const Eigen::VectorXd c = centers.col(i) - ev.mean;
    const double w = ev.weights(i) / h3;
    // One product per sorted triple, written to every permutation slot, so the
    // stored tensor is symmetric bit-for-bit.
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b)
        for (int cc = b; cc < d; ++cc) {
          const double v = w * c(a) * c(b) * c(cc);
          tt.at(a, b, cc) += v;
          if (b != cc) tt.at(a, cc, b) += v;
          if (a != b) {
            tt.at(b, a, cc) += v;
            if (a != cc) tt.at(b, cc, a) += v;
            if (a != cc && b != cc) {
              tt.at(cc, a, b) += v;
              tt.at(cc, b, a) += v;
            }
          } else if (a != cc) {
            tt.at(cc, a, b) += v;
          }
        }
  }
  return tt;
}

/// log p_t(x) of the mixture, normalization included (log-sum-exp).
inline double log_density(const Dataset& ds, double t, const Eigen::VectorXd& x) {
  check_time(t);
  const double a = alpha(t), h = noise_var(t);
  const int n = ds.count(), d = ds.dim();
  Eigen::VectorXd e(n);
  for (int i = 0; i < n; ++i) e(i) = -(x - a * ds.point(i)).squaredNorm() / (2.0 * h);
  const double m = e.maxCoeff();
  const double lse = m + std::log((e.array() - m).exp().sum());
  constexpr double two_pi = 6.283185307179586476925286766559;
  return lse - std::log(static_cast<double>(n)) - 0.5 * d * std::log(two_pi * h);
}

/// Index i when component i carries weight >= 1 - theta; at most one exists
/// for theta < 1/2.
inline std::optional<int> dominant_center(const Dataset& ds, double t, const Eigen::VectorXd& x,
                                          double theta) {
  if (!(theta > 0.0) || !(theta < 0.5))
    throw std::invalid_argument("dominant_center: theta in (0, 1/2)");
  const Eigen::VectorXd w = softmax_weights(ds, t, x);
  Eigen::Index idx = 0;
  w.maxCoeff(&idx);
  if (w(idx) >= 1.0 - theta) return static_cast<int>(idx);
  return std::nullopt;
}

}  // namespace ridgelab::oracle
