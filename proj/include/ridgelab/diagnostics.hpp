#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ridgelab/oracle.hpp"
#include "ridgelab/parallel.hpp"
#include "ridgelab/ridge.hpp"
#include "ridgelab/sampler.hpp"

namespace ridgelab::diagnostics {

struct DiagnosticsConfig {
  double theta = 1e-3;                    // center-dominance threshold
  double entry_fraction_threshold = 0.5;  // batch-level entry marker
  int window = 50;                        // trailing window for phase detection
  double rel_decrease = 0.02;             // plateau sensitivity
};

/// Per-recorded-step statistics of a trajectory batch relative to the moving
/// ridge geometry. Averages over entered, non-degenerate, non-failed
/// trajectories; tangent components are tracked per data center.
struct Series {
  std::vector<int> steps;
  std::vector<double> times;
  std::vector<double> entry_fraction;
  std::vector<double> mean_newton_dist, mean_newton_dist_se;      // entered trajectories
  std::vector<double> mean_newton_dist_all, mean_newton_dist_all_se;  // all alive trajectories
  std::vector<double> mean_sq_dist, mean_sq_dist_se;  // E[D], Newton-distance squared
  std::vector<double> degenerate_fraction;
  Eigen::MatrixXd tangent_sq;      // centers x records: E|u|^2 per dominant center
  Eigen::MatrixXd tangent_count;   // centers x records
  std::vector<int> entry_record;   // per trajectory; -1 = never entered

  int n_records() const { return static_cast<int>(steps.size()); }
  int first_entry_record(double fraction) const {
    for (int s = 0; s < n_records(); ++s)
      if (entry_fraction[static_cast<std::size_t>(s)] >= fraction) return s;
    return -1;
  }
};

/// Tangent frames of the log-density Hessian at every scaled data center.
inline std::vector<Eigen::MatrixXd> center_tangent_frames(const Dataset& ds, double t,
                                                          const ridge::RidgeConfig& rcfg) {
  std::vector<Eigen::MatrixXd> frames;
  frames.reserve(static_cast<std::size_t>(ds.count()));
  const double a = alpha(t);
  for (int i = 0; i < ds.count(); ++i) {
    const Eigen::VectorXd c = a * ds.point(i);
    frames.push_back(ridge::eig_frame(ds, t, c, rcfg).tangent);
  }
  return frames;
}

inline Series compute_series(const sampler::TrajectoryBatch& batch, const Dataset& ds,
                             const ridge::RidgeConfig& rcfg, const DiagnosticsConfig& dcfg) {
  const int records = batch.n_records();
  const int n = batch.cfg.n_trajectories;
  const int n_centers = ds.count();
  Series out;
  out.steps = batch.steps;
  out.times = batch.times;
  out.entry_fraction.assign(records, 0.0);
  out.mean_newton_dist.assign(records, 0.0);
  out.mean_newton_dist_se.assign(records, 0.0);
  out.mean_newton_dist_all.assign(records, 0.0);
  out.mean_newton_dist_all_se.assign(records, 0.0);
  out.mean_sq_dist.assign(records, 0.0);
  out.mean_sq_dist_se.assign(records, 0.0);
  out.degenerate_fraction.assign(records, 0.0);
  out.tangent_sq = Eigen::MatrixXd::Zero(n_centers, records);
  out.tangent_count = Eigen::MatrixXd::Zero(n_centers, records);
  out.entry_record.assign(n, -1);

  // Per-record center frames (shared across trajectories).
  std::vector<std::vector<Eigen::MatrixXd>> frames(static_cast<std::size_t>(records));
  for (int s = 0; s < records; ++s)
    frames[static_cast<std::size_t>(s)] = center_tangent_frames(ds, batch.times[s], rcfg);

  struct BlockAgg {
    std::vector<double> nd, nd2, nd4, nd_count, degen, alive, entered;
    std::vector<double> nda, nda2, nda_count;
    Eigen::MatrixXd tan_sq, tan_count;
    std::vector<int> entry;
  };
  const long block = 256;
  const long n_blocks = (n + block - 1) / block;
  std::vector<BlockAgg> agg(static_cast<std::size_t>(n_blocks));

  parallel_blocks(n, block, [&](long b0, long b1) {
    BlockAgg& a = agg[static_cast<std::size_t>(b0 / block)];
    a.nd.assign(records, 0.0);
    a.nd2.assign(records, 0.0);
    a.nd4.assign(records, 0.0);
    a.nd_count.assign(records, 0.0);
    a.nda.assign(records, 0.0);
    a.nda2.assign(records, 0.0);
    a.nda_count.assign(records, 0.0);
    a.degen.assign(records, 0.0);
    a.alive.assign(records, 0.0);
    a.entered.assign(records, 0.0);
    a.tan_sq = Eigen::MatrixXd::Zero(n_centers, records);
    a.tan_count = Eigen::MatrixXd::Zero(n_centers, records);
    a.entry.assign(static_cast<std::size_t>(b1 - b0), -1);
    for (long j = b0; j < b1; ++j) {
      bool entered = false;
      for (int s = 0; s < records; ++s) {
        if (!batch.alive_at(static_cast<int>(j), s)) continue;
        const double t = batch.times[s];
        a.alive[s] += 1.0;
        const Eigen::VectorXd x = batch.states[static_cast<std::size_t>(s)].col(j);
        const oracle::Eval ev = oracle::evaluate(ds, t, x);
        const ridge::RidgeFrame f = ridge::frame_from_eval(ds, ev, rcfg);
        if (f.degenerate) {
          a.degen[s] += 1.0;
        } else {
          const double nd = ridge::detail::newton_offset(ev, f).norm();
          a.nda[s] += nd;
          a.nda2[s] += nd * nd;
          a.nda_count[s] += 1.0;
          if (!entered && nd <= ridge::tube_radius(rcfg, t)) {
            entered = true;
            a.entry[static_cast<std::size_t>(j - b0)] = s;
          }
          if (entered) {
            a.nd[s] += nd;
            a.nd2[s] += nd * nd;
            a.nd4[s] += nd * nd * nd * nd;
            a.nd_count[s] += 1.0;
          }
        }
        if (entered) a.entered[s] += 1.0;
        const auto dom = oracle::dominant_center(ds, t, x, dcfg.theta);
        if (dom) {
          const Eigen::VectorXd u =
              frames[static_cast<std::size_t>(s)][static_cast<std::size_t>(*dom)].transpose() *
              (x - alpha(t) * ds.point(*dom));
          a.tan_sq(*dom, s) += u.squaredNorm();
          a.tan_count(*dom, s) += 1.0;
        }
      }
    }
  });

  // Reduce in block order; merge per-trajectory entry records.
  std::vector<double> nd(records, 0.0), nd2(records, 0.0), nd4(records, 0.0), cnt(records, 0.0),
      nda(records, 0.0), nda2(records, 0.0), nda_cnt(records, 0.0), degen(records, 0.0),
      alive(records, 0.0), entered(records, 0.0);
  for (long b = 0; b < n_blocks; ++b) {
    const BlockAgg& a = agg[static_cast<std::size_t>(b)];
    for (int s = 0; s < records; ++s) {
      nd[s] += a.nd[s];
      nd2[s] += a.nd2[s];
      nd4[s] += a.nd4[s];
      cnt[s] += a.nd_count[s];
      nda[s] += a.nda[s];
      nda2[s] += a.nda2[s];
      nda_cnt[s] += a.nda_count[s];
      degen[s] += a.degen[s];
      alive[s] += a.alive[s];
      entered[s] += a.entered[s];
    }
    out.tangent_sq += a.tan_sq;
    out.tangent_count += a.tan_count;
    for (std::size_t i = 0; i < a.entry.size(); ++i)
      out.entry_record[static_cast<std::size_t>(b * block) + i] = a.entry[i];
  }
  for (int s = 0; s < records; ++s) {
    out.entry_fraction[s] = alive[s] > 0 ? entered[s] / alive[s] : 0.0;
    out.degenerate_fraction[s] = alive[s] > 0 ? degen[s] / alive[s] : 0.0;
    if (nda_cnt[s] > 0) {
      const double m1a = nda[s] / nda_cnt[s];
      const double m2a = nda2[s] / nda_cnt[s];
      out.mean_newton_dist_all[s] = m1a;
      if (nda_cnt[s] > 1)
        out.mean_newton_dist_all_se[s] =
            std::sqrt(std::max(0.0, m2a - m1a * m1a) / (nda_cnt[s] - 1));
    }
    if (cnt[s] > 0) {
      const double m1 = nd[s] / cnt[s];
      const double m2 = nd2[s] / cnt[s];
      const double m4 = nd4[s] / cnt[s];
      out.mean_newton_dist[s] = m1;
      out.mean_sq_dist[s] = m2;
      if (cnt[s] > 1) {
        out.mean_newton_dist_se[s] = std::sqrt(std::max(0.0, m2 - m1 * m1) / (cnt[s] - 1));
        out.mean_sq_dist_se[s] = std::sqrt(std::max(0.0, m4 - m2 * m2) / (cnt[s] - 1));
      }
    }
  }
  for (int c = 0; c < n_centers; ++c)
    for (int s = 0; s < records; ++s)
      if (out.tangent_count(c, s) > 0) out.tangent_sq(c, s) /= out.tangent_count(c, s);
  return out;
}

/// Mean squared tangent offset at one record, averaged over centers weighted
/// by membership counts.
inline double aggregate_tangent_sq(const Series& s, int record) {
  double num = 0.0, den = 0.0;
  for (int c = 0; c < s.tangent_sq.rows(); ++c) {
    num += s.tangent_sq(c, record) * s.tangent_count(c, record);
    den += s.tangent_count(c, record);
  }
  return den > 0 ? num / den : std::numeric_limits<double>::quiet_NaN();
}

struct PhaseSegmentation {
  int reach_end = 0;
  int align_end = 0;
  double plateau_level = 0.0;
};

/// reach ends when half the batch has entered the tube; align ends when the
/// windowed relative decrease of the mean Newton distance drops below
/// rel_decrease; the plateau level is the mean over the final window.
inline PhaseSegmentation segment_phases(const Series& s, const DiagnosticsConfig& dcfg) {
  const int n = s.n_records();
  if (n < dcfg.window + 1) throw std::invalid_argument("segment_phases: series shorter than window");
  PhaseSegmentation ps;
  const int reach = s.first_entry_record(dcfg.entry_fraction_threshold);
  ps.reach_end = reach < 0 ? n - 1 : reach;
  ps.align_end = n - 1;
  for (int t = ps.reach_end + dcfg.window; t < n; ++t) {
    const double prev = s.mean_newton_dist[static_cast<std::size_t>(t - dcfg.window)];
    const double cur = s.mean_newton_dist[static_cast<std::size_t>(t)];
    if (prev <= 0.0) continue;
    if ((prev - cur) / prev < dcfg.rel_decrease) {
      ps.align_end = t;
      break;
    }
  }
  double acc = 0.0;
  for (int t = n - dcfg.window; t < n; ++t) acc += s.mean_newton_dist[static_cast<std::size_t>(t)];
  ps.plateau_level = acc / dcfg.window;
  return ps;
}

struct BoundSeries {
  int entry_record = 0;
  std::vector<double> normal_rhs;       // full Gronwall right-hand side
  std::vector<double> normal_dim_term;  // dimension/tube part
  std::vector<double> normal_err_term;  // accumulated projected model error
  std::vector<double> tangent_rhs;
  std::vector<double> mean_err_normal_sq;   // measured E|e^perp|^2 per record
  std::vector<double> mean_err_tangent_sq;  // measured per dominant center
};

/// Discrete Gronwall accumulation of the normal/tangent contraction bounds
/// along the batch, with unit prefactor. The model error enters through the
/// measured projected posterior-mean error; with the exact oracle mean the
/// error integrals vanish identically.
inline BoundSeries bound_series(const sampler::TrajectoryBatch& batch, const Dataset& ds,
                                const ridge::RidgeConfig& rcfg, const Series& series,
                                const sampler::MeanSource* model,
                                const DiagnosticsConfig& dcfg = {}) {
  const int records = batch.n_records();
  const int n = batch.cfg.n_trajectories;
  BoundSeries bs;
  const int entry = series.first_entry_record(dcfg.entry_fraction_threshold);
  bs.entry_record = entry < 0 ? 0 : entry;
  bs.normal_rhs.assign(records, 0.0);
  bs.normal_dim_term.assign(records, 0.0);
  bs.normal_err_term.assign(records, 0.0);
  bs.tangent_rhs.assign(records, 0.0);
  bs.mean_err_normal_sq.assign(records, 0.0);
  bs.mean_err_tangent_sq.assign(records, 0.0);

  // Measured projected model errors per record.
  if (model) {
    std::vector<std::vector<Eigen::MatrixXd>> cframes(static_cast<std::size_t>(records));
    for (int s = 0; s < records; ++s)
      cframes[static_cast<std::size_t>(s)] = center_tangent_frames(ds, batch.times[s], rcfg);
    for (int s = 0; s < records; ++s) {
      const double t = batch.times[s];
      const Eigen::MatrixXd& x = batch.states[static_cast<std::size_t>(s)];
      const Eigen::MatrixXd pred = model->mean_batch(t, x);
      double accn = 0.0, acct = 0.0;
      long cn = 0, ct = 0;
      for (int j = 0; j < n; ++j) {
        if (!batch.alive_at(j, s)) continue;
        const oracle::Eval ev = oracle::evaluate(ds, t, x.col(j));
        const Eigen::VectorXd e = pred.col(j) - ev.mean;
        ridge::RidgeFrame f = ridge::frame_from_eval(ds, ev, rcfg);
        if (!f.degenerate && rcfg.frame_at == ridge::FrameAt::Projection) {
          try {
            const auto proj = ridge::project_to_ridge(ds, t, x.col(j), rcfg);
            f = ridge::eig_frame(ds, t, proj.point, rcfg);
          } catch (const std::exception&) {
          }
        }
        if (!f.degenerate) {
          accn += (f.normal.transpose() * e).squaredNorm();
          ++cn;
        }
        const auto dom = oracle::dominant_center(ds, t, x.col(j), dcfg.theta);
        if (dom) {
          acct += (cframes[static_cast<std::size_t>(s)][static_cast<std::size_t>(*dom)].transpose() * e)
                      .squaredNorm();
          ++ct;
        }
      }
      bs.mean_err_normal_sq[s] = cn > 0 ? accn / cn : 0.0;
      bs.mean_err_tangent_sq[s] = ct > 0 ? acct / ct : 0.0;
    }
  }

  const double R = ds.max_radius();
  const int d = ds.dim();
  const int e0 = bs.entry_record;
  double dim_int = 0.0, err_int = 0.0, decay = 1.0;
  double tan_int = 0.0, tan_decay = 1.0;
  const double rho_in = ridge::tube_radius(rcfg, batch.times[e0]);
  const double tan_in = aggregate_tangent_sq(series, e0);
  const double tan_in0 = std::isfinite(tan_in) ? tan_in : 0.0;
  auto clamp_exp = [](double v) { return std::exp(std::min(700.0, std::max(-700.0, v))); };
  auto dim_f = [&](double t) { return ridge::tube_radius(rcfg, t) * R + d; };
  auto err_f = [&](double t, int s) {
    return bs.mean_err_normal_sq[s] / (noise_var(t) * noise_var(t) * ridge::beta(rcfg, t));
  };
  auto tan_f = [&](double t, int s) {
    return static_cast<double>(d) + 4.0 / noise_var(t) * bs.mean_err_tangent_sq[s];
  };
  for (int s = e0; s < records; ++s) {
    const double t = batch.times[s];
    if (s > e0) {
      const double t_prev = batch.times[s - 1];
      const double dtau = t_prev - t;  // inference-time increment
      const double kappa_n =
          (ridge::beta(rcfg, t_prev) + ridge::beta(rcfg, t) - 2.0) * dtau;  // 2*avg(beta-1)*dtau
      const double dn = clamp_exp(-kappa_n);
      decay *= dn;
      // Trapezoidal update of int exp(-kappa(u, tau)) f(u) du.
      dim_int = dim_int * dn + 0.5 * dtau * (dim_f(t_prev) * dn + dim_f(t));
      err_int = err_int * dn + 0.5 * dtau * (err_f(t_prev, s - 1) * dn + err_f(t, s));
      const double kappa_t =
          0.5 * (1.0 / noise_var(t_prev) + 1.0 / noise_var(t) - 4.0) * dtau;  // avg(1/h-2)*dtau
      const double dtn = clamp_exp(-kappa_t);
      tan_decay *= dtn;
      tan_int = tan_int * dtn + 0.5 * dtau * (tan_f(t_prev, s - 1) * dtn + tan_f(t, s));
    }
    bs.normal_dim_term[s] = decay * rho_in + dim_int;
    bs.normal_err_term[s] = err_int;
    bs.normal_rhs[s] = bs.normal_dim_term[s] + bs.normal_err_term[s];
    bs.tangent_rhs[s] = tan_decay * tan_in0 + tan_int;
  }
  return bs;
}

/// Per-trajectory tube entry records (recorded-step indices).
inline std::vector<std::optional<int>> entry_times(const sampler::TrajectoryBatch& batch,
                                                   const Dataset& ds,
                                                   const ridge::RidgeConfig& rcfg) {
  DiagnosticsConfig dcfg;
  const Series s = compute_series(batch, ds, rcfg, dcfg);
  std::vector<std::optional<int>> out(static_cast<std::size_t>(batch.cfg.n_trajectories));
  for (int j = 0; j < batch.cfg.n_trajectories; ++j)
    if (s.entry_record[static_cast<std::size_t>(j)] >= 0)
      out[static_cast<std::size_t>(j)] = s.entry_record[static_cast<std::size_t>(j)];
  return out;
}

struct KdeGrid {
  Eigen::VectorXd xs, ys;
  Eigen::MatrixXd density;  // ny x nx
  double bandwidth_x = 0.0, bandwidth_y = 0.0;
};

/// Gaussian product-kernel density estimate of 2D points on a rectangular
/// grid. Bandwidth defaults to Silverman's rule per dimension.
inline KdeGrid kde_grid(const Eigen::MatrixXd& pts, int nx, int ny, double xmin, double xmax,
                        double ymin, double ymax, double bandwidth = 0.0) {
  if (pts.rows() != 2) throw std::invalid_argument("kde_grid: 2D points expected");
  const Eigen::Index m = pts.cols();
  if (m < 2) throw std::invalid_argument("kde_grid: need at least two points");
  KdeGrid g;
  const Eigen::VectorXd mean = pts.rowwise().mean();
  Eigen::VectorXd sd(2);
  for (int r = 0; r < 2; ++r)
    sd(r) = std::sqrt((pts.row(r).array() - mean(r)).square().sum() / (m - 1));
  if (bandwidth > 0.0) {
    g.bandwidth_x = g.bandwidth_y = bandwidth;
  } else {
    if (!(sd.minCoeff() > 0.0))
      throw std::invalid_argument("kde_grid: degenerate points (zero variance)");
    const double factor = std::pow(4.0 / (4.0 * m), 1.0 / 6.0);  // Silverman, d = 2
    g.bandwidth_x = sd(0) * factor;
    g.bandwidth_y = sd(1) * factor;
  }
  g.xs.setLinSpaced(nx, xmin, xmax);
  g.ys.setLinSpaced(ny, ymin, ymax);
  g.density = Eigen::MatrixXd::Zero(ny, nx);
  const double norm = 1.0 / (2.0 * 3.14159265358979323846 * g.bandwidth_x * g.bandwidth_y * m);
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const double dx = (g.xs(ix) - pts(0, j)) / g.bandwidth_x;
        const double dy = (g.ys(iy) - pts(1, j)) / g.bandwidth_y;
        acc += std::exp(-0.5 * (dx * dx + dy * dy));
      }
      g.density(iy, ix) = norm * acc;
    }
  return g;
}

}  // namespace ridgelab::diagnostics
