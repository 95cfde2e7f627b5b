#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ridgelab/oracle.hpp"

namespace ridgelab::ridge {

enum class FrameAt { Point, Projection };

inline FrameAt frame_at_from_string(const std::string& s) {
  if (s == "point") return FrameAt::Point;
  if (s == "projection") return FrameAt::Projection;
  throw std::invalid_argument("ridge.frame_at must be point|projection");
}

struct RidgeConfig {
  int d_star = 1;                  // intrinsic dimension, 1 <= d_star < d
  double c = 0.5;                  // curvature threshold coefficient, beta_t = c/h_t
  double tube_radius_scale = 1.0;  // rho_t = scale * sqrt(h_t)
  double newton_tol = 1e-10;
  int newton_max_iter = 50;
  FrameAt frame_at = FrameAt::Projection;

  void validate(int d) const {
    if (d_star < 1 || d_star >= d) throw std::invalid_argument("ridge: need 1 <= d_star < d");
    if (!(c >= 0.5) || !(c < 1.0)) throw std::invalid_argument("ridge: need c in [1/2, 1)");
    if (!(tube_radius_scale > 0.0)) throw std::invalid_argument("ridge: tube_radius_scale > 0");
    if (!(newton_tol > 0.0) || newton_max_iter < 1) throw std::invalid_argument("ridge: bad newton params");
  }
};

/// Curvature threshold at time t.
inline double beta(const RidgeConfig& cfg, double t) { return cfg.c / noise_var(t); }

/// Working tube radius rho_t around the ridge.
inline double tube_radius(const RidgeConfig& cfg, double t) {
  return cfg.tube_radius_scale * std::sqrt(noise_var(t));
}

/// Eigenframe of the log-density Hessian at one point, split into the top
/// d_star tangent directions and the remaining normal directions.
struct RidgeFrame {
  Eigen::VectorXd eigvals;  // descending
  Eigen::MatrixXd tangent;  // d x d_star
  Eigen::MatrixXd normal;   // d x (d - d_star)
  double eigengap = 0.0;    // lambda_{d*} - lambda_{d*+1}
  bool degenerate = false;  // eigengap below resolution; split is unreliable
};

/// Deterministic sign: the first component of largest magnitude is made
/// nonnegative, so identical inputs give bit-identical frames.
inline void normalize_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v(imax) < 0.0) v = -v;
}

/// Eigenframe of the log-density Hessian via the posterior covariance.
///
/// The Hessian is -I/h + Sigma/h^2, so it shares eigenvectors and eigenvalue
/// order with Sigma. Sigma in turn has the pairwise form
///   Sigma = sum_{i<j} w_i w_j (c_i - c_j)(c_i - c_j)^T,
/// whose relative structure stays computable in log space long after the
/// softmax weights themselves underflow. Eigenvectors and the tangent/normal
/// split come from the rescaled pairwise matrix; the reported eigenvalues are
/// mapped back to Hessian scale. Degeneracy is judged on the scale-free
/// pairwise matrix, where an unresolved gap means the local geometry really
/// has no preferred d*-split.
inline RidgeFrame frame_from_eval(const Dataset& ds, const oracle::Eval& ev,
                                  const RidgeConfig& cfg) {
  const int d = ds.dim(), n = ds.count();
  cfg.validate(d);
  const double h = noise_var(ev.t);
  const double a = alpha(ev.t);

  Eigen::MatrixXd pairwise = Eigen::MatrixXd::Zero(d, d);
  double max_pair = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      max_pair = std::max(max_pair, ev.log_weights(i) + ev.log_weights(j));
  if (n > 1) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const double w = std::exp(ev.log_weights(i) + ev.log_weights(j) - max_pair);
        const Eigen::VectorXd diff = a * (ds.point(i) - ds.point(j));
        for (int r = 0; r < d; ++r)
          for (int s = 0; s <= r; ++s) pairwise(r, s) += w * diff(r) * diff(s);
      }
    for (int r = 0; r < d; ++r)
      for (int s = 0; s < r; ++s) pairwise(s, r) = pairwise(r, s);
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  if (d <= 3) es.computeDirect(pairwise);
  else es.compute(pairwise);
  if (es.info() != Eigen::Success) throw std::runtime_error("ridge: eigensolver failed");

  RidgeFrame f;
  const Eigen::VectorXd pair_eigs = es.eigenvalues().reverse();  // descending
  Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
  for (int j = 0; j < d; ++j) normalize_sign(vecs.col(j));
  f.tangent = vecs.leftCols(cfg.d_star);
  f.normal = vecs.rightCols(d - cfg.d_star);

  // Back to Hessian scale: lambda = -1/h + sigma * mu / h^2 with the pairwise
  // normalizer sigma = exp(max_pair) / (sum exp(lw))^2; underflow of sigma
  // leaves the isotropic -1/h, which is the correct double value there.
  const double log_z = std::log(ev.log_weights.array().exp().sum());
  const double sigma = n > 1 ? std::exp(max_pair - 2.0 * log_z) : 0.0;
  f.eigvals.resize(d);
  for (int j = 0; j < d; ++j) f.eigvals(j) = -1.0 / h + sigma * pair_eigs(j) / (h * h);
  f.eigengap = f.eigvals(cfg.d_star - 1) - f.eigvals(cfg.d_star);
  const double pair_scale = std::max(pair_eigs.cwiseAbs().maxCoeff(), 0.0);
  f.degenerate = n < 2 || (pair_eigs(cfg.d_star - 1) - pair_eigs(cfg.d_star)) <= 1e-8 * pair_scale;
  return f;
}

inline RidgeFrame eig_frame(const Dataset& ds, double t, const Eigen::VectorXd& x,
                            const RidgeConfig& cfg) {
  return frame_from_eval(ds, oracle::evaluate(ds, t, x), cfg);
}

/// Tangent/normal orthogonal projectors of a frame.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> projectors(const RidgeFrame& f) {
  return {f.tangent * f.tangent.transpose(), f.normal * f.normal.transpose()};
}

struct RidgeCheck {
  double residual_norm = 0.0;    // |E^T grad log p|
  bool curvature_ok = false;     // lambda_{d*+1} <= -beta_t
  double newton_distance = 0.0;  // |Lambda_perp^{-1} E^T grad log p|
  bool on_ridge = false;
};

namespace detail {
inline Eigen::VectorXd newton_offset(const oracle::Eval& ev, const RidgeFrame& f) {
  // Coordinates of the first-order ridge correction in the normal basis.
  const Eigen::VectorXd g = f.normal.transpose() * ev.score;
  const int m = static_cast<int>(g.size());
  Eigen::VectorXd eta(m);
  for (int i = 0; i < m; ++i) {
    const double lam = f.eigvals(f.eigvals.size() - m + i);
    if (std::abs(lam) < 1e-12) throw std::runtime_error("ridge: degenerate normal curvature (|lambda| < 1e-12)");
    eta(i) = -g(i) / lam;
  }
  return eta;
}
}  // namespace detail

/// First-order (Newton) estimate of the distance from x to the ridge set.
inline double newton_distance(const Dataset& ds, double t, const Eigen::VectorXd& x,
                              const RidgeConfig& cfg) {
  const oracle::Eval ev = oracle::evaluate(ds, t, x);
  const RidgeFrame f = frame_from_eval(ds, ev, cfg);
  return detail::newton_offset(ev, f).norm();
}

inline RidgeCheck check_point(const Dataset& ds, double t, const Eigen::VectorXd& x,
                              const RidgeConfig& cfg) {
  const oracle::Eval ev = oracle::evaluate(ds, t, x);
  const RidgeFrame f = frame_from_eval(ds, ev, cfg);
  RidgeCheck rc;
  rc.residual_norm = (f.normal.transpose() * ev.score).norm();
  rc.curvature_ok = f.eigvals(cfg.d_star) <= -beta(cfg, t);
  rc.newton_distance = detail::newton_offset(ev, f).norm();
  rc.on_ridge = rc.curvature_ok && rc.residual_norm <= cfg.newton_tol / noise_var(t);
  return rc;
}

struct ProjectionResult {
  Eigen::VectorXd point;
  int iterations = 0;
  double residual = 0.0;
  bool monotone = true;  // residual decreased at every iteration
};

/// Newton iteration in the normal space: x <- x + E eta until the normal score
/// residual drops below newton_tol/h_t. Valid inside the tube.
inline ProjectionResult project_to_ridge(const Dataset& ds, double t, const Eigen::VectorXd& x,
                                         const RidgeConfig& cfg) {
  const double h = noise_var(t);
  if (newton_distance(ds, t, x, cfg) > tube_radius(cfg, t))
    throw std::domain_error("project_to_ridge: point outside the tube neighborhood");
  ProjectionResult res;
  res.point = x;
  double prev = std::numeric_limits<double>::infinity();
  const double tol = cfg.newton_tol / h;
  for (int it = 0; it < cfg.newton_max_iter; ++it) {
    const oracle::Eval ev = oracle::evaluate(ds, t, res.point);
    const RidgeFrame f = frame_from_eval(ds, ev, cfg);
    res.residual = (f.normal.transpose() * ev.score).norm();
    if (res.residual > prev) res.monotone = false;
    if (res.residual <= tol) {
      res.iterations = it;
      return res;
    }
    prev = res.residual;
    res.point += f.normal * detail::newton_offset(ev, f);
    res.iterations = it + 1;
  }
  const oracle::Eval ev = oracle::evaluate(ds, t, res.point);
  const RidgeFrame f = frame_from_eval(ds, ev, cfg);
  res.residual = (f.normal.transpose() * ev.score).norm();
  if (res.residual <= tol) return res;
  throw std::runtime_error("project_to_ridge: no convergence after " +
                           std::to_string(cfg.newton_max_iter) +
                           " iterations (residual " + std::to_string(res.residual) + ")");
}

/// Fixed points of the posterior mean near each scaled data point. Each is a
/// ridge point whose distance to alpha(t) x_i obeys the separation bound
/// 2 alpha R (n-1) exp(-alpha^2 Delta^2 / (2 h)).
inline std::vector<Eigen::VectorXd> ridge_points_near_centers(const Dataset& ds, double t,
                                                              const RidgeConfig& cfg) {
  const double a = alpha(t), h = noise_var(t);
  const double bound = ds.count() == 1
                           ? 0.0
                           : 2.0 * a * ds.max_radius() * (ds.count() - 1) *
                                 std::exp(-a * a * ds.min_separation() * ds.min_separation() / (2.0 * h));
  std::vector<Eigen::VectorXd> out;
  out.reserve(ds.count());
  for (int i = 0; i < ds.count(); ++i) {
    Eigen::VectorXd z = a * ds.point(i);
    const int max_iter = 1000;
    bool converged = false;
    for (int it = 0; it < max_iter; ++it) {
      const oracle::Eval ev = oracle::evaluate(ds, t, z);
      const Eigen::MatrixXd gm = ev.cov / h;  // grad of the posterior mean
      const double contraction =
          Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gm, Eigen::EigenvaluesOnly)
              .eigenvalues().cwiseAbs().maxCoeff();
      if (!(contraction < 1.0))
        throw std::runtime_error("ridge_points_near_centers: fixed-point map not contracting near center " +
                                 std::to_string(i));
      const Eigen::VectorXd next = ev.mean;
      const double step = (next - z).norm();
      z = next;
      if (step < cfg.newton_tol) { converged = true; break; }
    }
    if (!converged)
      throw std::runtime_error("ridge_points_near_centers: no convergence for center " + std::to_string(i));
    const double dist = (z - a * ds.point(i)).norm();
    // The separation bound is asymptotic in small t; the cushion absorbs the
    // fixed point's own exponentially small drift relative to the center.
    if (dist > bound * (1.0 + 1e-6) + 1e-12)
      throw std::runtime_error("ridge_points_near_centers: separation bound violated at center " +
                               std::to_string(i) + " (dist " + std::to_string(dist) + " vs bound " +
                               std::to_string(bound) + ")");
    out.push_back(std::move(z));
  }
  return out;
}

}  // namespace ridgelab::ridge
