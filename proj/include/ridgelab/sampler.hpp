#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ridgelab/dataset.hpp"
#include "ridgelab/models.hpp"
#include "ridgelab/oracle.hpp"
#include "ridgelab/parallel.hpp"
#include "ridgelab/rng.hpp"
#include "ridgelab/schedule.hpp"

namespace ridgelab::sampler {

struct SamplerConfig {
  int n_steps = 1000;
  int n_trajectories = 2000;
  std::uint64_t seed = 0;
  int record_every = 1;
  GridKind grid = GridKind::Geometric;
  double blowup_threshold = 1e8;

  void validate() const {
    if (n_steps < 1 || n_trajectories < 1 || record_every < 1)
      throw std::invalid_argument("sampler: n_steps, n_trajectories, record_every >= 1");
  }
};

/// Posterior-mean predictor driving the reverse SDE drift.
class MeanSource {
 public:
  virtual ~MeanSource() = default;
  virtual int dim() const = 0;
  virtual std::string name() const = 0;
  /// states: d x B columns at a common diffusion time t.
  virtual Eigen::MatrixXd mean_batch(double t, const Eigen::MatrixXd& states) const = 0;
};

class ExactMeanSource final : public MeanSource {
 public:
  explicit ExactMeanSource(const Dataset& ds) : ds_(&ds) {}
  int dim() const override { return ds_->dim(); }
  std::string name() const override { return "exact"; }
  Eigen::MatrixXd mean_batch(double t, const Eigen::MatrixXd& states) const override {
    Eigen::MatrixXd out(states.rows(), states.cols());
    for (Eigen::Index c = 0; c < states.cols(); ++c)
      out.col(c) = oracle::posterior_mean(*ds_, t, states.col(c));
    return out;
  }

 private:
  const Dataset* ds_;
};

class RfnnMeanSource final : public MeanSource {
 public:
  explicit RfnnMeanSource(const RfnnModel& m) : m_(&m) {}
  int dim() const override { return m_->dim(); }
  std::string name() const override { return "rfnn"; }
  Eigen::MatrixXd mean_batch(double t, const Eigen::MatrixXd& states) const override {
    return m_->forward_batch(t, states);
  }

 private:
  const RfnnModel* m_;
};

class MlpMeanSource final : public MeanSource {
 public:
  explicit MlpMeanSource(const MlpModel& m) : m_(&m) {}
  int dim() const override { return m_->dim(); }
  std::string name() const override { return "mlp"; }
  Eigen::MatrixXd mean_batch(double t, const Eigen::MatrixXd& states) const override {
    return m_->forward_batch(t, states);
  }

 private:
  const MlpModel* m_;
};

/// One explicit Euler-Maruyama step of the reverse SDE from t_hi down to t_lo.
/// Drift is evaluated at the left (larger-t) endpoint.
inline Eigen::VectorXd em_step(const Eigen::VectorXd& x, double t_hi, double t_lo,
                               const Eigen::VectorXd& mean, const Eigen::VectorXd& noise) {
  if (!(t_hi > t_lo)) throw std::invalid_argument("em_step: need t_hi > t_lo");
  const double dt = t_hi - t_lo;
  const Eigen::VectorXd drift = x + (2.0 / noise_var(t_hi)) * (mean - x);
  return x + dt * drift + std::sqrt(2.0 * dt) * noise;
}

struct TrajectoryBatch {
  Schedule schedule;
  SamplerConfig cfg;
  int dim = 0;
  std::string mean_source;
  std::vector<int> steps;                 // recorded step indices (step grid positions)
  std::vector<double> times;              // diffusion time at each record, descending T..delta
  std::vector<Eigen::MatrixXd> states;    // one d x n_trajectories matrix per record
  std::vector<int> fail_step;             // per trajectory; -1 when the path stayed finite

  int n_records() const { return static_cast<int>(steps.size()); }
  bool failed(int traj) const { return fail_step[static_cast<std::size_t>(traj)] >= 0; }
  /// True when trajectory `traj` is still alive at the record's step index.
  bool alive_at(int traj, int record) const {
    return fail_step[static_cast<std::size_t>(traj)] < 0 ||
           fail_step[static_cast<std::size_t>(traj)] > steps[static_cast<std::size_t>(record)];
  }
  const Eigen::MatrixXd& final_states() const { return states.back(); }
};

/// Simulates n_trajectories reverse paths from N(0, I) at t = T down the
/// descending grid to t = delta. Noise is keyed by (seed, trajectory, step),
/// so batches are reproducible under any scheduling; diverged trajectories are
/// frozen and flagged rather than aborting the batch.
inline TrajectoryBatch sample(const MeanSource& src, const Schedule& sched,
                              const SamplerConfig& cfg) {
  cfg.validate();
  const int d = src.dim();
  const int n = cfg.n_trajectories;
  const TimeGrid grid = make_grid(sched, cfg.n_steps, cfg.grid);

  TrajectoryBatch batch;
  batch.schedule = sched;
  batch.cfg = cfg;
  batch.dim = d;
  batch.mean_source = src.name();
  batch.fail_step.assign(static_cast<std::size_t>(n), -1);

  Eigen::MatrixXd x(d, n);
  for (int j = 0; j < n; ++j)
    for (int c = 0; c < d; ++c) x(c, j) = rng::gaussian(cfg.seed, rng::kSamplerInit, j, c);

  auto record = [&](int step_idx) {
    batch.steps.push_back(step_idx);
    batch.times.push_back(grid[static_cast<std::size_t>(step_idx)]);
    batch.states.push_back(x);
  };
  record(0);

  Eigen::MatrixXd means(d, n);
  for (int k = 0; k < cfg.n_steps; ++k) {
    const double t_hi = grid[static_cast<std::size_t>(k)];
    const double t_lo = grid[static_cast<std::size_t>(k) + 1];
    const double dt = t_hi - t_lo;
    const double drift_gain = 2.0 / noise_var(t_hi);
    const double noise_gain = std::sqrt(2.0 * dt);
    parallel_blocks(n, 256, [&](long b0, long b1) {
      const auto cols = x.middleCols(b0, b1 - b0);
      means.middleCols(b0, b1 - b0) = src.mean_batch(t_hi, cols);
      for (long j = b0; j < b1; ++j) {
        if (batch.fail_step[static_cast<std::size_t>(j)] >= 0) continue;
        Eigen::VectorXd next(d);
        bool ok = true;
        for (int c = 0; c < d; ++c) {
          const double drift = x(c, j) + drift_gain * (means(c, j) - x(c, j));
          const double v = x(c, j) + dt * drift +
                           noise_gain * rng::gaussian(cfg.seed, rng::kSamplerNoise,
                                                      static_cast<std::uint64_t>(j),
                                                      static_cast<std::uint64_t>(k), c);
          if (!std::isfinite(v) || std::abs(v) > cfg.blowup_threshold) ok = false;
          next(c) = v;
        }
        if (ok) x.col(j) = next;
        else batch.fail_step[static_cast<std::size_t>(j)] = k + 1;  // frozen at last finite state
      }
    });
    if ((k + 1) % cfg.record_every == 0 || k + 1 == cfg.n_steps) record(k + 1);
  }
  return batch;
}

/// Counts final states within `radius` of each data point (nearest mode wins).
/// Failed trajectories are excluded.
inline std::vector<long> terminal_mode_counts(const TrajectoryBatch& batch, const Dataset& ds,
                                              double radius = 0.5) {
  std::vector<long> counts(static_cast<std::size_t>(ds.count()), 0);
  const Eigen::MatrixXd& fin = batch.final_states();
  for (Eigen::Index j = 0; j < fin.cols(); ++j) {
    if (batch.failed(static_cast<int>(j))) continue;
    int best = -1;
    double best_d = radius;
    for (int i = 0; i < ds.count(); ++i) {
      const double dist = (fin.col(j) - ds.point(i)).norm();
      if (dist <= best_d) {
        best = i;
        best_d = dist;
      }
    }
    if (best >= 0) ++counts[static_cast<std::size_t>(best)];
  }
  return counts;
}

/// Mean distance of final states to their nearest data point, with the batch
/// standard error. The spread summary behind mode-concentration comparisons.
inline std::pair<double, double> terminal_spread(const TrajectoryBatch& batch, const Dataset& ds) {
  const Eigen::MatrixXd& fin = batch.final_states();
  double s = 0.0, s2 = 0.0;
  long m = 0;
  for (Eigen::Index j = 0; j < fin.cols(); ++j) {
    if (batch.failed(static_cast<int>(j))) continue;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < ds.count(); ++i) best = std::min(best, (fin.col(j) - ds.point(i)).norm());
    s += best;
    s2 += best * best;
    ++m;
  }
  if (m == 0) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  const double mean = s / m;
  const double var = std::max(0.0, s2 / m - mean * mean);
  return {mean, std::sqrt(var / std::max<long>(1, m - 1))};
}

}  // namespace ridgelab::sampler
