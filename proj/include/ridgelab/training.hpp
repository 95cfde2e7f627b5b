#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ridgelab/models.hpp"
#include "ridgelab/oracle.hpp"
#include "ridgelab/ridge.hpp"
#include "ridgelab/rng.hpp"
#include "ridgelab/schedule.hpp"

namespace ridgelab::training {

/// Time-and-noise averaged kernels of the random feature regression:
/// feature_kernel is the p x p second moment of the scaled features,
/// cross_kernel the d x p data-feature cross moment. Gradient descent on the
/// denoising mean-matching loss is linear with exactly these coefficients.
struct KernelPair {
  Eigen::MatrixXd feature_kernel;  // p x p, symmetric PSD
  Eigen::MatrixXd cross_kernel;    // d x p
  Eigen::VectorXd eigvals;         // descending
  Eigen::MatrixXd eigvecs;         // p x p, columns aligned with eigvals
  int rank = 0;                    // eigenvalues above rank_tol * eigvals(0)
  double rank_tol = 1e-10;
  int mc_samples = 0;
  std::uint64_t seed = 0;

  int width() const { return static_cast<int>(feature_kernel.rows()); }
};

namespace detail {

inline void require_ascending(const TimeGrid& grid) {
  if (grid.size() < 2 || !grid.ascending())
    throw std::invalid_argument("training: quadrature grid must ascend delta -> T");
}

inline double trapezoid_weight(const TimeGrid& g, std::size_t q) {
  if (q == 0) return 0.5 * (g[1] - g[0]);
  if (q + 1 == g.size()) return 0.5 * (g[q] - g[q - 1]);
  return 0.5 * (g[q + 1] - g[q - 1]);
}

/// Forward samples at one node: column (i*mc + j) is alpha x_i + sqrt(h) z_ij.
/// Draws are keyed by (seed, node, point, sample, coord) so every consumer of
/// the same seed and grid sees the same sample set.
inline Eigen::MatrixXd node_samples(const Dataset& ds, double t, std::size_t node, int mc,
                                    std::uint64_t seed) {
  const double a = alpha(t), sh = std::sqrt(noise_var(t));
  const int d = ds.dim(), n = ds.count();
  Eigen::MatrixXd x(d, static_cast<Eigen::Index>(n) * mc);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < mc; ++j) {
      const Eigen::Index col = static_cast<Eigen::Index>(i) * mc + j;
      for (int c = 0; c < d; ++c)
        x(c, col) = a * ds.points()(c, i) + sh * rng::gaussian(seed, rng::kKernelNoise, node, i,
                                                               static_cast<std::uint64_t>(j), c);
    }
  return x;
}

inline Eigen::MatrixXd node_targets(const Dataset& ds, double t, int mc) {
  const double a = alpha(t);
  const int d = ds.dim(), n = ds.count();
  Eigen::MatrixXd y(d, static_cast<Eigen::Index>(n) * mc);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < mc; ++j) y.col(static_cast<Eigen::Index>(i) * mc + j) = a * ds.point(i);
  return y;
}

}  // namespace detail

/// Trapezoidal quadrature over the grid; expectation over the data points is
/// exact, the Gaussian forward noise is Monte Carlo with mc_samples draws per
/// (node, point). Deterministic given (seed, grid, mc_samples).
inline KernelPair estimate_kernels(const Dataset& ds, const RfnnModel& model, WeightKind w,
                                   const TimeGrid& grid, int mc_samples, std::uint64_t seed) {
  detail::require_ascending(grid);
  if (mc_samples < 1) throw std::invalid_argument("estimate_kernels: mc_samples >= 1");
  const int p = model.width(), d = ds.dim(), n = ds.count();
  const double sp = std::sqrt(static_cast<double>(p));
  KernelPair kp;
  kp.mc_samples = mc_samples;
  kp.seed = seed;
  kp.feature_kernel = Eigen::MatrixXd::Zero(p, p);
  kp.cross_kernel = Eigen::MatrixXd::Zero(d, p);
  const Eigen::Index batch = static_cast<Eigen::Index>(n) * mc_samples;
  for (std::size_t q = 0; q < grid.size(); ++q) {
    const double t = grid[q];
    const double h = noise_var(t);
    const double coef = detail::trapezoid_weight(grid, q) * weight(w, t) / (h * h);
    const Eigen::MatrixXd x = detail::node_samples(ds, t, q, mc_samples, seed);
    const Eigen::MatrixXd feats = model.features_batch(t, x);  // p x batch
    kp.feature_kernel.selfadjointView<Eigen::Lower>().rankUpdate(
        feats, coef / (static_cast<double>(batch) * p));
    kp.cross_kernel.noalias() +=
        (coef / (static_cast<double>(batch) * sp)) * detail::node_targets(ds, t, mc_samples) * feats.transpose();
  }
  Eigen::MatrixXd full = kp.feature_kernel.selfadjointView<Eigen::Lower>();
  kp.feature_kernel = std::move(full);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(kp.feature_kernel);
  if (es.info() != Eigen::Success) throw std::runtime_error("estimate_kernels: eigensolver failed");
  kp.eigvals = es.eigenvalues().reverse();
  kp.eigvecs = es.eigenvectors().rowwise().reverse();
  for (int j = 0; j < p; ++j) ridge::normalize_sign(kp.eigvecs.col(j));
  const double lead = kp.eigvals(0);
  kp.rank = 0;
  while (kp.rank < p && kp.eigvals(kp.rank) > kp.rank_tol * lead) ++kp.rank;
  return kp;
}

/// The A-independent part of the denoising loss under the same quadrature.
inline double dmm_constant(const Dataset& ds, WeightKind w, const TimeGrid& grid) {
  detail::require_ascending(grid);
  double c = 0.0;
  const double msq = ds.points().colwise().squaredNorm().mean();
  for (std::size_t q = 0; q < grid.size(); ++q) {
    const double t = grid[q], h = noise_var(t), a = alpha(t);
    c += detail::trapezoid_weight(grid, q) * weight(w, t) / (h * h) * a * a * msq;
  }
  return c;
}

/// Denoising loss as an explicit quadratic form in the readout.
inline double dmm_quadratic(const KernelPair& kp, const Eigen::MatrixXd& a, double constant) {
  return constant + (a * kp.feature_kernel).cwiseProduct(a).sum() -
         2.0 * a.cwiseProduct(kp.cross_kernel).sum();
}

/// Denoising mean-matching loss of an arbitrary mean predictor, evaluated by
/// the same quadrature/Monte Carlo scheme (and, for equal seed, the exact same
/// sample set) as estimate_kernels. mean_batch: (t, d x B states) -> d x B.
template <typename MeanBatchFn>
double dmm_loss(const Dataset& ds, MeanBatchFn&& mean_batch, WeightKind w, const TimeGrid& grid,
                int mc_samples, std::uint64_t seed) {
  detail::require_ascending(grid);
  if (mc_samples < 1) throw std::invalid_argument("dmm_loss: mc_samples >= 1");
  double loss = 0.0;
  const Eigen::Index batch = static_cast<Eigen::Index>(ds.count()) * mc_samples;
  for (std::size_t q = 0; q < grid.size(); ++q) {
    const double t = grid[q], h = noise_var(t);
    const double coef = detail::trapezoid_weight(grid, q) * weight(w, t) / (h * h);
    const Eigen::MatrixXd x = detail::node_samples(ds, t, q, mc_samples, seed);
    const Eigen::MatrixXd pred = mean_batch(t, x);
    const Eigen::MatrixXd tgt = detail::node_targets(ds, t, mc_samples);
    loss += coef * (pred - tgt).colwise().squaredNorm().sum() / static_cast<double>(batch);
  }
  return loss;
}

struct DirectionalLoss {
  double total = 0.0, normal = 0.0, tangent = 0.0;
  double se_total = 0.0, se_normal = 0.0, se_tangent = 0.0;
  double degenerate_fraction = 0.0;
};

/// Mean-matching loss split by the ridge projectors at the sampled forward
/// points (or at their ridge projections, per cfg.frame_at). Degenerate-frame
/// samples are dropped from all three components, so total = normal + tangent
/// holds exactly over the kept set.
template <typename MeanBatchFn>
DirectionalLoss mm_loss_directional(const Dataset& ds, MeanBatchFn&& mean_batch, WeightKind w,
                                    const TimeGrid& grid, int mc_samples, std::uint64_t seed,
                                    const ridge::RidgeConfig& rcfg, int n_batches = 4) {
  detail::require_ascending(grid);
  if (mc_samples < 1) throw std::invalid_argument("mm_loss_directional: mc_samples >= 1");
  n_batches = std::max(1, std::min(n_batches, mc_samples));
  struct Acc {
    double tot = 0.0, nor = 0.0, tan = 0.0;
    long kept = 0;
  };
  std::vector<Acc> batch_acc(static_cast<std::size_t>(n_batches));
  DirectionalLoss out;
  long dropped = 0, seen = 0;
  std::vector<double> tot_b(n_batches, 0.0), nor_b(n_batches, 0.0), tan_b(n_batches, 0.0);
  for (std::size_t q = 0; q < grid.size(); ++q) {
    const double t = grid[q], h = noise_var(t);
    const double coef = detail::trapezoid_weight(grid, q) * weight(w, t) / (h * h);
    const Eigen::MatrixXd x = detail::node_samples(ds, t, q, mc_samples, seed);
    const Eigen::MatrixXd pred = mean_batch(t, x);
    for (auto& a : batch_acc) { a.tot = a.nor = a.tan = 0.0; a.kept = 0; }
    long node_drop = 0;
    for (Eigen::Index col = 0; col < x.cols(); ++col) {
      const int j = static_cast<int>(col % mc_samples);
      const int b = j * n_batches / mc_samples;
      ++seen;
      const oracle::Eval ev = oracle::evaluate(ds, t, x.col(col));
      Eigen::VectorXd probe = x.col(col);
      ridge::RidgeFrame f = ridge::frame_from_eval(ds, ev, rcfg);
      if (!f.degenerate && rcfg.frame_at == ridge::FrameAt::Projection) {
        try {
          const auto proj = ridge::project_to_ridge(ds, t, probe, rcfg);
          f = ridge::eig_frame(ds, t, proj.point, rcfg);
        } catch (const std::exception&) {
          // Outside the tube or no convergence: fall back to the frame at x.
        }
      }
      if (f.degenerate) {
        ++dropped;
        ++node_drop;
        continue;
      }
      const Eigen::VectorXd e = pred.col(col) - ev.mean;
      const double en = (f.normal.transpose() * e).squaredNorm();
      const double et = (f.tangent.transpose() * e).squaredNorm();
      batch_acc[b].tot += en + et;
      batch_acc[b].nor += en;
      batch_acc[b].tan += et;
      ++batch_acc[b].kept;
    }
    if (2 * node_drop > static_cast<long>(x.cols()))
      throw std::runtime_error("mm_loss_directional: more than half the frames degenerate at t=" +
                               std::to_string(t));
    long kept_total = 0;
    double tot = 0.0, nor = 0.0, tan = 0.0;
    for (int b = 0; b < n_batches; ++b) {
      kept_total += batch_acc[b].kept;
      tot += batch_acc[b].tot;
      nor += batch_acc[b].nor;
      tan += batch_acc[b].tan;
      if (batch_acc[b].kept > 0) {
        tot_b[b] += coef * batch_acc[b].tot / batch_acc[b].kept;
        nor_b[b] += coef * batch_acc[b].nor / batch_acc[b].kept;
        tan_b[b] += coef * batch_acc[b].tan / batch_acc[b].kept;
      }
    }
    if (kept_total > 0) {
      out.total += coef * tot / kept_total;
      out.normal += coef * nor / kept_total;
      out.tangent += coef * tan / kept_total;
    }
  }
  out.degenerate_fraction = seen > 0 ? static_cast<double>(dropped) / seen : 0.0;
  auto se = [&](const std::vector<double>& v) {
    if (n_batches < 2) return 0.0;
    double m = 0.0;
    for (double x : v) m += x;
    m /= n_batches;
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (n_batches - 1) / n_batches);
  };
  out.se_total = se(tot_b);
  out.se_normal = se(nor_b);
  out.se_tangent = se(tan_b);
  return out;
}

/// One constant-rate gradient descent step of the quadratic loss.
inline Eigen::MatrixXd gd_step(const Eigen::MatrixXd& a, const KernelPair& kp, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("gd_step: eta > 0");
  return a - 2.0 * eta * (a * kp.feature_kernel - kp.cross_kernel);
}

/// True when every mode contracts strictly, i.e. eta < 1/lambda_1.
inline bool gd_stable(const KernelPair& kp, double eta) { return eta * kp.eigvals(0) < 1.0; }

/// k-step iterate in closed form, evaluated in the kernel eigenbasis without
/// rank truncation.
inline Eigen::MatrixXd gd_iterate_closed_form(const Eigen::MatrixXd& a0, const KernelPair& kp,
                                              double eta, long k) {
  const int p = kp.width();
  Eigen::VectorXd dec_k(p), geo(p);
  for (int j = 0; j < p; ++j) {
    const double dec = 1.0 - 2.0 * eta * kp.eigvals(j);
    dec_k(j) = std::pow(dec, static_cast<double>(k));
    // 2*eta * sum_{i<k} dec^i = (1 - dec^k)/lambda, finite for vanishing modes.
    geo(j) = std::abs(2.0 * eta * kp.eigvals(j)) > 1e-14
                 ? (1.0 - dec_k(j)) / kp.eigvals(j)
                 : 2.0 * eta * static_cast<double>(k);
  }
  const Eigen::MatrixXd a0e = a0 * kp.eigvecs;
  const Eigen::MatrixXd ve = kp.cross_kernel * kp.eigvecs;
  Eigen::MatrixXd mix = a0e * dec_k.asDiagonal() + ve * geo.asDiagonal();
  return mix * kp.eigvecs.transpose();
}

/// Gradient descent limit A0 (I - P_range) + cross K^+, with the pseudo-inverse
/// truncated at rank_tol relative to the leading eigenvalue.
inline Eigen::MatrixXd gd_limit(const Eigen::MatrixXd& a0, const KernelPair& kp) {
  const auto ur = kp.eigvecs.leftCols(kp.rank);
  const Eigen::MatrixXd a0r = a0 * ur;
  const Eigen::MatrixXd vr = kp.cross_kernel * ur;
  Eigen::MatrixXd res = a0;
  res.noalias() -= a0r * ur.transpose();
  res.noalias() += vr * kp.eigvals.head(kp.rank).cwiseInverse().asDiagonal() * ur.transpose();
  return res;
}

/// Per-mode initialization residuals a_j = (A0 - A*) u_j, one column per
/// retained mode.
inline Eigen::MatrixXd residual_coeffs(const KernelPair& kp, const Eigen::MatrixXd& a0) {
  const auto ur = kp.eigvecs.leftCols(kp.rank);
  const Eigen::MatrixXd astar = kp.cross_kernel * ur * kp.eigvals.head(kp.rank).cwiseInverse().asDiagonal() *
                                ur.transpose();
  return (a0 - astar) * ur;
}

/// Optimization error after k steps: sum_j lambda_j (1-2 eta lambda_j)^{2k} |a_j|^2.
inline double err_train(const KernelPair& kp, const Eigen::MatrixXd& coeffs, double eta, long k) {
  double s = 0.0;
  for (int j = 0; j < kp.rank; ++j) {
    const double dec = 1.0 - 2.0 * eta * kp.eigvals(j);
    s += kp.eigvals(j) * std::pow(dec, 2.0 * static_cast<double>(k)) * coeffs.col(j).squaredNorm();
  }
  return s;
}

struct DecompositionReport {
  // Architecture error (residual at the least-squares readout), split by the
  // ridge projectors.
  double err_arc_total = 0.0, err_arc_normal = 0.0, err_arc_tangent = 0.0;
  double se_arc_normal = 0.0, se_arc_tangent = 0.0;
  std::vector<long> ks;
  std::vector<double> err_train_exact;    // spectral closed form per k
  std::vector<double> err_train_normal;   // Monte Carlo directional split
  std::vector<double> err_train_tangent;
  std::vector<double> se_train_normal, se_train_tangent;
  Eigen::MatrixXd cross_normal, cross_tangent;  // d x rank: b_j vectors
  Eigen::MatrixXd cross_sum_se;                 // d x rank: SE of the summed cross vectors
  double degenerate_fraction = 0.0;
};

/// Monte Carlo estimate of the directional architecture/optimization error
/// split. The per-mode projected covariances are never materialized; only the
/// scalar contractions entering the error formulas are accumulated.
inline DecompositionReport directional_decomposition(const Dataset& ds, const RfnnModel& model,
                                                     const KernelPair& kp, const Eigen::MatrixXd& a0,
                                                     double eta, const std::vector<long>& ks,
                                                     const ridge::RidgeConfig& rcfg, WeightKind w,
                                                     const TimeGrid& grid, int mc_samples,
                                                     std::uint64_t seed, int n_batches = 8) {
  detail::require_ascending(grid);
  if (mc_samples < 1) throw std::invalid_argument("directional_decomposition: mc_samples >= 1");
  n_batches = std::max(2, std::min(n_batches, mc_samples));
  const int p = model.width(), d = ds.dim(), r = kp.rank;
  const double sp = std::sqrt(static_cast<double>(p));
  const auto ur = kp.eigvecs.leftCols(r);
  const Eigen::MatrixXd astar = kp.cross_kernel * ur *
                                kp.eigvals.head(r).cwiseInverse().asDiagonal() * ur.transpose();
  const Eigen::MatrixXd coeffs = (a0 - astar) * ur;  // d x r

  DecompositionReport rep;
  rep.ks = ks;
  const std::size_t nk = ks.size();
  rep.err_train_exact.resize(nk);
  for (std::size_t i = 0; i < nk; ++i) rep.err_train_exact[i] = err_train(kp, coeffs, eta, ks[i]);

  // Decay factors per mode and per requested k.
  Eigen::MatrixXd dec(r, nk);
  for (int j = 0; j < r; ++j)
    for (std::size_t i = 0; i < nk; ++i)
      dec(j, i) = std::pow(1.0 - 2.0 * eta * kp.eigvals(j), static_cast<double>(ks[i]));

  struct Acc {
    double arc_n = 0.0, arc_t = 0.0;
    Eigen::MatrixXd bsum;                 // d x r accumulated b_n + b_t (should vanish)
    Eigen::MatrixXd bn, bt;               // d x r
    std::vector<double> tr_n, tr_t;       // per k
    long kept = 0;
    void init(int d_, int r_, std::size_t nk_) {
      bsum = Eigen::MatrixXd::Zero(d_, r_);
      bn = Eigen::MatrixXd::Zero(d_, r_);
      bt = Eigen::MatrixXd::Zero(d_, r_);
      tr_n.assign(nk_, 0.0);
      tr_t.assign(nk_, 0.0);
    }
  };
  std::vector<Acc> acc(static_cast<std::size_t>(n_batches));
  for (auto& a : acc) a.init(d, r, nk);
  Acc total;
  total.init(d, r, nk);
  long dropped = 0, seen = 0;
  // Per-batch totals require per-node normalization identical to the full
  // estimate; accumulate node contributions scaled by per-batch kept counts.
  std::vector<Acc> batch_totals(static_cast<std::size_t>(n_batches));
  for (auto& a : batch_totals) a.init(d, r, nk);

  for (std::size_t q = 0; q < grid.size(); ++q) {
    const double t = grid[q], h = noise_var(t);
    const double coef = detail::trapezoid_weight(grid, q) * weight(w, t) / (h * h);
    const Eigen::MatrixXd x = detail::node_samples(ds, t, q, mc_samples, seed);
    const Eigen::MatrixXd feats = model.features_batch(t, x);           // p x B
    const Eigen::MatrixXd s_modes = (ur.transpose() * feats) / sp;      // r x B
    const Eigen::MatrixXd pred_star = astar * feats / sp;               // d x B
    for (auto& a : acc) { a.arc_n = a.arc_t = 0.0; a.kept = 0;
      a.bsum.setZero(); a.bn.setZero(); a.bt.setZero();
      std::fill(a.tr_n.begin(), a.tr_n.end(), 0.0);
      std::fill(a.tr_t.begin(), a.tr_t.end(), 0.0); }
    for (Eigen::Index col = 0; col < x.cols(); ++col) {
      const int j = static_cast<int>(col % mc_samples);
      const int b = j * n_batches / mc_samples;
      ++seen;
      const oracle::Eval ev = oracle::evaluate(ds, t, x.col(col));
      ridge::RidgeFrame f = ridge::frame_from_eval(ds, ev, rcfg);
      if (!f.degenerate && rcfg.frame_at == ridge::FrameAt::Projection) {
        try {
          const auto proj = ridge::project_to_ridge(ds, t, x.col(col), rcfg);
          f = ridge::eig_frame(ds, t, proj.point, rcfg);
        } catch (const std::exception&) {
        }
      }
      if (f.degenerate) { ++dropped; continue; }
      const Eigen::VectorXd res = pred_star.col(col) - ev.mean;
      const Eigen::VectorXd rn = f.normal * (f.normal.transpose() * res);
      const Eigen::VectorXd rt = res - rn;
      Acc& a = acc[b];
      a.arc_n += rn.squaredNorm();
      a.arc_t += rt.squaredNorm();
      // b_j accumulators: s_j * P res.
      a.bn.noalias() += rn * s_modes.col(col).transpose();
      a.bt.noalias() += rt * s_modes.col(col).transpose();
      for (std::size_t i = 0; i < nk; ++i) {
        // g = sum_j dec_j(k) s_j a_j collapses the double mode sum.
        const Eigen::VectorXd g = coeffs * dec.col(i).cwiseProduct(s_modes.col(col));
        const Eigen::VectorXd gn = f.normal * (f.normal.transpose() * g);
        const Eigen::VectorXd gt = g - gn;
        a.tr_n[i] += gn.squaredNorm() + 2.0 * gn.dot(rn);
        a.tr_t[i] += gt.squaredNorm() + 2.0 * gt.dot(rt);
      }
      ++a.kept;
    }
    long kept_total = 0;
    for (auto& a : acc) kept_total += a.kept;
    if (2 * (static_cast<long>(x.cols()) - kept_total) > static_cast<long>(x.cols()))
      throw std::runtime_error("directional_decomposition: more than half the frames degenerate at t=" +
                               std::to_string(t));
    if (kept_total == 0) continue;
    for (int b = 0; b < n_batches; ++b) {
      const Acc& a = acc[b];
      if (a.kept == 0) continue;
      const double cb = coef / a.kept;
      batch_totals[b].arc_n += cb * a.arc_n;
      batch_totals[b].arc_t += cb * a.arc_t;
      batch_totals[b].bn += cb * a.bn;
      batch_totals[b].bt += cb * a.bt;
      batch_totals[b].bsum += cb * (a.bn + a.bt);
      for (std::size_t i = 0; i < nk; ++i) {
        batch_totals[b].tr_n[i] += cb * a.tr_n[i];
        batch_totals[b].tr_t[i] += cb * a.tr_t[i];
      }
    }
    const double ct = coef / kept_total;
    for (const auto& a : acc) {
      total.arc_n += ct * a.arc_n;
      total.arc_t += ct * a.arc_t;
      total.bn += ct * a.bn;
      total.bt += ct * a.bt;
      for (std::size_t i = 0; i < nk; ++i) {
        total.tr_n[i] += ct * a.tr_n[i];
        total.tr_t[i] += ct * a.tr_t[i];
      }
    }
  }

  rep.degenerate_fraction = seen > 0 ? static_cast<double>(dropped) / seen : 0.0;
  rep.err_arc_normal = total.arc_n;
  rep.err_arc_tangent = total.arc_t;
  rep.err_arc_total = total.arc_n + total.arc_t;
  rep.cross_normal = total.bn;
  rep.cross_tangent = total.bt;
  rep.err_train_normal.resize(nk);
  rep.err_train_tangent.resize(nk);
  for (std::size_t i = 0; i < nk; ++i) {
    rep.err_train_normal[i] = total.tr_n[i];
    rep.err_train_tangent[i] = total.tr_t[i];
  }

  auto batch_se = [&](auto&& get) {
    double m = 0.0;
    for (int b = 0; b < n_batches; ++b) m += get(batch_totals[b]);
    m /= n_batches;
    double s = 0.0;
    for (int b = 0; b < n_batches; ++b) {
      const double v = get(batch_totals[b]) - m;
      s += v * v;
    }
    return std::sqrt(s / (n_batches - 1) / n_batches);
  };
  rep.se_arc_normal = batch_se([](const Acc& a) { return a.arc_n; });
  rep.se_arc_tangent = batch_se([](const Acc& a) { return a.arc_t; });
  rep.se_train_normal.resize(nk);
  rep.se_train_tangent.resize(nk);
  for (std::size_t i = 0; i < nk; ++i) {
    rep.se_train_normal[i] = batch_se([&](const Acc& a) { return a.tr_n[i]; });
    rep.se_train_tangent[i] = batch_se([&](const Acc& a) { return a.tr_t[i]; });
  }
  rep.cross_sum_se = Eigen::MatrixXd::Zero(d, r);
  for (int row = 0; row < d; ++row)
    for (int colj = 0; colj < r; ++colj)
      rep.cross_sum_se(row, colj) =
          batch_se([&](const Acc& a) { return a.bsum(row, colj); });
  return rep;
}

/// Closed-form optimization error components for the axis-symmetric two-point
/// set, where the cross kernel must have (numerically) vanishing second row.
/// Returns {tangent, normal}.
inline std::pair<double, double> two_point_closed_forms(const KernelPair& kp,
                                                        const Eigen::MatrixXd& a0, double eta,
                                                        long k, double row2_tol) {
  if (a0.rows() != 2) throw std::invalid_argument("two_point_closed_forms: d == 2 only");
  const double row2 = kp.cross_kernel.row(1).norm();
  if (row2 > row2_tol)
    throw std::runtime_error("two_point_closed_forms: cross kernel row 2 norm " +
                             std::to_string(row2) + " above tolerance");
  const Eigen::VectorXd v = kp.cross_kernel.row(0).transpose();
  double tan = 0.0, nor = 0.0;
  for (int j = 0; j < kp.rank; ++j) {
    const double lam = kp.eigvals(j);
    const double dec = std::pow(1.0 - 2.0 * eta * lam, 2.0 * static_cast<double>(k));
    const double pt = a0.row(0).dot(kp.eigvecs.col(j)) - v.dot(kp.eigvecs.col(j)) / lam;
    const double pn = a0.row(1).dot(kp.eigvecs.col(j));
    tan += lam * dec * pt * pt;
    nor += lam * dec * pn * pn;
  }
  return {tan, nor};
}

/// Full-batch gradient descent of the small MLP on the discretized denoising
/// loss. Noise is redrawn each epoch unless frozen_noise; gradients use the
/// hand-written backward pass. Returns the loss trace; the callback (if set)
/// fires every log_every epochs.
inline std::vector<double> train_mlp(
    const Dataset& ds, MlpModel& model, WeightKind w, const TimeGrid& grid, long epochs, double lr,
    int mc_samples, std::uint64_t seed, bool frozen_noise = false, long log_every = 100,
    const std::function<void(long, double, const MlpModel&)>& on_log = nullptr) {
  detail::require_ascending(grid);
  if (mc_samples < 1) throw std::invalid_argument("train_mlp: mc_samples >= 1");
  const int n = ds.count(), d = ds.dim();
  const Eigen::Index batch = static_cast<Eigen::Index>(n) * mc_samples;
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(epochs));
  Eigen::MatrixXd z(d, batch);
  for (long epoch = 0; epoch < epochs; ++epoch) {
    const std::uint64_t ekey = frozen_noise ? 0ull : static_cast<std::uint64_t>(epoch);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < mc_samples; ++j)
        for (int c = 0; c < d; ++c)
          z(c, static_cast<Eigen::Index>(i) * mc_samples + j) =
              rng::gaussian(seed, rng::kMlpNoise, ekey, i, static_cast<std::uint64_t>(j), c);
    MlpGradients g = model.zero_gradients();
    double loss = 0.0;
    for (std::size_t q = 1; q < grid.size(); ++q) {
      const double t = grid[q], h = noise_var(t), a = alpha(t);
      const double coef = (grid[q] - grid[q - 1]) * weight(w, t) / (h * h);
      Eigen::MatrixXd x(d, batch);
      Eigen::MatrixXd tgt(d, batch);
      const double sh = std::sqrt(h);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < mc_samples; ++j) {
          const Eigen::Index col = static_cast<Eigen::Index>(i) * mc_samples + j;
          tgt.col(col) = a * ds.point(i);
          x.col(col) = tgt.col(col) + sh * z.col(col);
        }
      const Eigen::MatrixXd pred = model.forward_batch(t, x);
      const Eigen::MatrixXd err = pred - tgt;
      loss += coef * err.colwise().squaredNorm().sum() / static_cast<double>(batch);
      const Eigen::MatrixXd upstream = (2.0 * coef / static_cast<double>(batch)) * err;
      model.backward_batch_accum(t, x, upstream, g);
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("train_mlp: non-finite loss at epoch " + std::to_string(epoch));
    trace.push_back(loss);
    if (on_log && (epoch % log_every == 0 || epoch + 1 == epochs)) on_log(epoch, loss, model);
    model.apply_step(g, lr);
  }
  return trace;
}

}  // namespace ridgelab::training
