#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ridgelab/config.hpp"
#include "ridgelab/csv.hpp"
#include "ridgelab/dataset.hpp"
#include "ridgelab/diagnostics.hpp"
#include "ridgelab/models.hpp"
#include "ridgelab/parallel.hpp"
#include "ridgelab/ridge.hpp"
#include "ridgelab/sampler.hpp"
#include "ridgelab/schedule.hpp"
#include "ridgelab/training.hpp"

namespace ridgelab::harness {

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "run.name", "run.out_dir", "run.seed",
      "data.points", "data.csv",
      "schedule.T", "schedule.delta", "schedule.n_steps", "schedule.grid",
      "loss.weight",
      "ridge.d_star", "ridge.c", "ridge.tube_radius_scale", "ridge.newton_tol",
      "ridge.newton_max_iter", "ridge.frame_at",
      "model.kind", "model.p", "model.kt", "model.hidden", "model.activation", "model.seed",
      "train.eta", "train.eta_scale", "train.epochs", "train.mc_samples",
      "train.quadrature_nodes", "train.seed",
      "train.init", "train.log_every", "train.frozen_noise", "train.slow_spectrum_floor",
      "sample.n_steps", "sample.n_trajectories", "sample.record_every", "sample.mean_source",
      "sample.seed",
      "diag.theta", "diag.entry_fraction_threshold", "diag.window", "diag.rel_decrease",
      "diag.mode_radius",
      "kde.nx", "kde.ny", "kde.margin",
  };
  return keys;
}

struct ExperimentConfig {
  std::string name = "run";
  std::string out_dir = "runs";
  std::uint64_t seed = 1;

  std::vector<std::vector<double>> points{{-3.0, 0.0}, {3.0, 0.0}};
  std::string data_csv;  // when set, overrides the inline points

  Schedule schedule{10.0, 1e-3};
  GridKind grid_kind = GridKind::Geometric;
  WeightKind weight = WeightKind::ConstOne;

  ridge::RidgeConfig ridge_cfg;
  diagnostics::DiagnosticsConfig diag_cfg;
  double mode_radius = 0.5;
  int kde_nx = 100, kde_ny = 100;
  double kde_margin = 2.0;

  std::string model_kind = "exact";  // exact|rfnn|mlp
  int width = 2000;
  int time_frequencies = 128;
  int hidden = 128;
  Activation activation = Activation::ReLU;
  std::uint64_t model_seed = 0, train_seed = 0, sample_seed = 0;  // 0 = derive from run seed

  double eta = 5e-4;
  double eta_scale = 0.0;  // when > 0, use eta_scale / lambda_1 instead of eta
  long epochs = 40000;
  int mc_samples = 8;
  int quadrature_nodes = 2000;
  std::string init = "zeros";  // zeros|ones|gaussian|slow_spectrum
  long log_every = 1000;
  bool frozen_noise = false;
  double slow_spectrum_floor = 1e-6;

  std::string mean_source;  // defaults to model_kind
  sampler::SamplerConfig sampler_cfg;

  std::uint64_t resolved_model_seed() const { return model_seed ? model_seed : seed; }
  std::uint64_t resolved_train_seed() const { return train_seed ? train_seed : seed + 1000; }
  std::uint64_t resolved_sample_seed() const { return sample_seed ? sample_seed : seed + 2000; }
  std::string resolved_mean_source() const { return mean_source.empty() ? model_kind : mean_source; }

  static ExperimentConfig from_config(const KeyValueConfig& kv) {
    kv.validate_keys(known_keys());
    ExperimentConfig c;
    c.name = kv.get_string("run.name", c.name);
    c.out_dir = kv.get_string("run.out_dir", c.out_dir);
    c.seed = static_cast<std::uint64_t>(kv.get_long("run.seed", 1));
    if (kv.has("data.csv")) c.data_csv = kv.get_string("data.csv", "");
    else if (kv.has("data.points")) c.points = kv.get_points("data.points");
    c.schedule = Schedule(kv.get_double("schedule.T", 10.0), kv.get_double("schedule.delta", 1e-3));
    const std::string grid = kv.get_string("schedule.grid", "geometric");
    if (grid == "geometric") c.grid_kind = GridKind::Geometric;
    else if (grid == "uniform") c.grid_kind = GridKind::Uniform;
    else throw std::runtime_error("schedule.grid must be geometric|uniform");
    c.weight = weight_from_string(kv.get_string("loss.weight", "one"));

    c.ridge_cfg.d_star = kv.get_int("ridge.d_star", 1);
    c.ridge_cfg.c = kv.get_double("ridge.c", 0.5);
    c.ridge_cfg.tube_radius_scale = kv.get_double("ridge.tube_radius_scale", 1.0);
    c.ridge_cfg.newton_tol = kv.get_double("ridge.newton_tol", 1e-10);
    c.ridge_cfg.newton_max_iter = kv.get_int("ridge.newton_max_iter", 50);
    c.ridge_cfg.frame_at = ridge::frame_at_from_string(kv.get_string("ridge.frame_at", "projection"));

    c.model_kind = kv.get_string("model.kind", "exact");
    if (c.model_kind != "exact" && c.model_kind != "rfnn" && c.model_kind != "mlp")
      throw std::runtime_error("model.kind must be exact|rfnn|mlp");
    c.width = kv.get_int("model.p", c.width);
    c.time_frequencies = kv.get_int("model.kt", c.time_frequencies);
    c.hidden = kv.get_int("model.hidden", c.hidden);
    c.activation = activation_from_string(kv.get_string("model.activation", "relu"));
    c.model_seed = static_cast<std::uint64_t>(kv.get_long("model.seed", 0));

    c.eta = kv.get_double("train.eta", c.eta);
    c.eta_scale = kv.get_double("train.eta_scale", 0.0);
    c.epochs = kv.get_long("train.epochs", c.epochs);
    c.mc_samples = kv.get_int("train.mc_samples", c.mc_samples);
    const int fallback_nodes = kv.get_int("schedule.n_steps", c.quadrature_nodes);
    c.quadrature_nodes = kv.get_int("train.quadrature_nodes", fallback_nodes);
    c.train_seed = static_cast<std::uint64_t>(kv.get_long("train.seed", 0));
    c.init = kv.get_string("train.init", c.init);
    if (c.init != "zeros" && c.init != "ones" && c.init != "gaussian" && c.init != "slow_spectrum")
      throw std::runtime_error("train.init must be zeros|ones|gaussian|slow_spectrum");
    c.log_every = kv.get_long("train.log_every", std::max<long>(1, c.epochs / 40));
    c.frozen_noise = kv.get_bool("train.frozen_noise", false);
    c.slow_spectrum_floor = kv.get_double("train.slow_spectrum_floor", 1e-6);

    c.sampler_cfg.n_steps = kv.get_int("sample.n_steps", kv.get_int("schedule.n_steps", 1000));
    c.sampler_cfg.n_trajectories = kv.get_int("sample.n_trajectories", 2000);
    c.sampler_cfg.record_every = kv.get_int("sample.record_every", 1);
    c.sampler_cfg.grid = c.grid_kind;
    c.sample_seed = static_cast<std::uint64_t>(kv.get_long("sample.seed", 0));
    c.mean_source = kv.get_string("sample.mean_source", "");
    if (!c.mean_source.empty() && c.mean_source != "exact" && c.mean_source != "rfnn" &&
        c.mean_source != "mlp")
      throw std::runtime_error("sample.mean_source must be exact|rfnn|mlp");

    c.diag_cfg.theta = kv.get_double("diag.theta", 1e-3);
    c.diag_cfg.entry_fraction_threshold = kv.get_double("diag.entry_fraction_threshold", 0.5);
    c.diag_cfg.window = kv.get_int("diag.window", 50);
    c.diag_cfg.rel_decrease = kv.get_double("diag.rel_decrease", 0.02);
    c.mode_radius = kv.get_double("diag.mode_radius", 0.5);
    c.kde_nx = kv.get_int("kde.nx", 100);
    c.kde_ny = kv.get_int("kde.ny", 100);
    c.kde_margin = kv.get_double("kde.margin", 2.0);
    return c;
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    kv.set("run.name", name);
    kv.set("run.out_dir", out_dir);
    kv.set("run.seed", std::to_string(seed));
    if (!data_csv.empty()) {
      kv.set("data.csv", data_csv);
    } else {
      nlohmann::json j = points;
      kv.set("data.points", j.dump());
    }
    kv.set("schedule.T", csv::format(schedule.T));
    kv.set("schedule.delta", csv::format(schedule.delta));
    kv.set("schedule.grid", grid_kind == GridKind::Geometric ? "geometric" : "uniform");
    kv.set("loss.weight", to_string(weight));
    kv.set("ridge.d_star", std::to_string(ridge_cfg.d_star));
    kv.set("ridge.c", csv::format(ridge_cfg.c));
    kv.set("ridge.tube_radius_scale", csv::format(ridge_cfg.tube_radius_scale));
    kv.set("ridge.newton_tol", csv::format(ridge_cfg.newton_tol));
    kv.set("ridge.newton_max_iter", std::to_string(ridge_cfg.newton_max_iter));
    kv.set("ridge.frame_at", ridge_cfg.frame_at == ridge::FrameAt::Point ? "point" : "projection");
    kv.set("model.kind", model_kind);
    if (model_kind == "rfnn") {
      kv.set("model.p", std::to_string(width));
      kv.set("model.kt", std::to_string(time_frequencies));
      kv.set("model.activation", to_string(activation));
    }
    if (model_kind == "mlp") kv.set("model.hidden", std::to_string(hidden));
    if (model_kind != "exact") {
      kv.set("model.seed", std::to_string(resolved_model_seed()));
      kv.set("train.eta", csv::format(eta));
      if (eta_scale > 0.0) kv.set("train.eta_scale", csv::format(eta_scale));
      kv.set("train.epochs", std::to_string(epochs));
      kv.set("train.mc_samples", std::to_string(mc_samples));
      kv.set("train.quadrature_nodes", std::to_string(quadrature_nodes));
      kv.set("train.seed", std::to_string(resolved_train_seed()));
      kv.set("train.init", init);
      kv.set("train.log_every", std::to_string(log_every));
      kv.set("train.frozen_noise", frozen_noise ? "true" : "false");
      kv.set("train.slow_spectrum_floor", csv::format(slow_spectrum_floor));
    }
    kv.set("sample.n_steps", std::to_string(sampler_cfg.n_steps));
    kv.set("sample.n_trajectories", std::to_string(sampler_cfg.n_trajectories));
    kv.set("sample.record_every", std::to_string(sampler_cfg.record_every));
    kv.set("sample.mean_source", resolved_mean_source());
    kv.set("sample.seed", std::to_string(resolved_sample_seed()));
    kv.set("diag.theta", csv::format(diag_cfg.theta));
    kv.set("diag.entry_fraction_threshold", csv::format(diag_cfg.entry_fraction_threshold));
    kv.set("diag.window", std::to_string(diag_cfg.window));
    kv.set("diag.rel_decrease", csv::format(diag_cfg.rel_decrease));
    kv.set("diag.mode_radius", csv::format(mode_radius));
    kv.set("kde.nx", std::to_string(kde_nx));
    kv.set("kde.ny", std::to_string(kde_ny));
    kv.set("kde.margin", csv::format(kde_margin));
    return kv;
  }
};

inline std::vector<std::string> preset_names() {
  return {"two_point_w1", "two_point_wht", "two_point_wht2", "three_point", "four_point_square",
          "m_shape_13", "init_zero", "init_ones", "init_slow_spectrum"};
}

/// Fixed 13-point M-shaped fixture (artifact-defined; the layout is two
/// vertical strokes joined by a mid-height vee).
inline std::vector<std::vector<double>> m_shape_points() {
  return {{-3, 0}, {-3, 4.0 / 3.0}, {-3, 8.0 / 3.0}, {-3, 4}, {-2, 3}, {-1, 2}, {0, 1},
          {1, 2},  {2, 3},          {3, 4},          {3, 8.0 / 3.0}, {3, 4.0 / 3.0}, {3, 0}};
}

inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.seed = 1;
  auto rfnn_two_point = [&]() {
    c.points = {{-3.0, 0.0}, {3.0, 0.0}};
    c.model_kind = "rfnn";
    c.width = 2000;
    c.time_frequencies = 128;
    c.eta = 5e-4;
    c.epochs = 40000;
    c.mc_samples = 8;
    c.quadrature_nodes = 2000;
    c.sampler_cfg.n_steps = 1000;
    c.sampler_cfg.n_trajectories = 2000;
  };
  if (name == "two_point_w1") {
    rfnn_two_point();
    c.weight = WeightKind::ConstOne;
  } else if (name == "two_point_wht") {
    rfnn_two_point();
    c.weight = WeightKind::NoiseVar;
  } else if (name == "two_point_wht2") {
    rfnn_two_point();
    c.weight = WeightKind::NoiseVarSquared;
  } else if (name == "three_point") {
    rfnn_two_point();
    c.points = {{0.0, 0.0}, {3.0, 0.0}, {0.0, 5.0}};
    c.weight = WeightKind::NoiseVar;
  } else if (name == "four_point_square") {
    rfnn_two_point();
    c.points = {{-1.0, -1.0}, {-1.0, 1.0}, {1.0, -1.0}, {1.0, 1.0}};
    c.weight = WeightKind::NoiseVar;
  } else if (name == "m_shape_13") {
    c.points = m_shape_points();
    c.model_kind = "exact";
    c.sampler_cfg.n_steps = 1000;
    c.sampler_cfg.n_trajectories = 2000;
  } else if (name == "init_zero") {
    rfnn_two_point();
    c.init = "zeros";
  } else if (name == "init_ones") {
    rfnn_two_point();
    c.init = "ones";
  } else if (name == "init_slow_spectrum") {
    rfnn_two_point();
    c.init = "slow_spectrum";
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return c;
}

inline Dataset load_dataset(const ExperimentConfig& c) {
  if (!c.data_csv.empty()) return Dataset::from_csv(c.data_csv);
  return Dataset::from_rows(c.points);
}

/// Initial readout per train.init. slow_spectrum puts the second row on the
/// slowest safely-retained kernel eigendirection, scaled by its inverse
/// eigenvalue.
inline Eigen::MatrixXd initial_readout(const ExperimentConfig& c, const Dataset& ds,
                                       const training::KernelPair& kp) {
  const int d = ds.dim(), p = kp.width();
  Eigen::MatrixXd a0 = Eigen::MatrixXd::Zero(d, p);
  if (c.init == "zeros") return a0;
  if (c.init == "ones") return Eigen::MatrixXd::Ones(d, p);
  if (c.init == "gaussian") {
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < p; ++j) a0(i, j) = rng::gaussian(c.resolved_train_seed(), rng::kInitA, i, j);
    return a0;
  }
  // slow_spectrum
  if (d != 2) throw std::runtime_error("train.init=slow_spectrum is defined for d=2");
  int r = -1;
  for (int j = kp.rank - 1; j >= 0; --j) {
    if (kp.eigvals(j) >= c.slow_spectrum_floor * kp.eigvals(0)) { r = j; break; }
  }
  if (r < 0) throw std::runtime_error("slow_spectrum: no eigenvalue above the floor");
  for (int j = 0; j < p; ++j) a0(0, j) = rng::gaussian(c.resolved_train_seed(), rng::kInitA, 0, j);
  a0.row(1) = kp.eigvecs.col(r).transpose() / kp.eigvals(r);
  return a0;
}

struct HistoryRow {
  long epoch = 0;
  double dmm = 0.0;  // quadratic-form value
  double mm_total = 0.0, mm_normal = 0.0, mm_tangent = 0.0;
  double err_train_total = 0.0, err_train_normal = 0.0, err_train_tangent = 0.0;
  double se_mm_total = 0.0, se_mm_normal = 0.0, se_mm_tangent = 0.0;
  double dmm_direct = 0.0, se_dmm_direct = 0.0;  // fresh-sample Monte Carlo route
};

/// One logged-epoch snapshot of the RFNN directional losses. Features are
/// evaluated once per sample; the optimization components come from the exact
/// per-sample split against the least-squares readout.
inline HistoryRow rfnn_history_row(const Dataset& ds, const RfnnModel& model,
                                   const Eigen::MatrixXd& a_k, const Eigen::MatrixXd& a_star,
                                   WeightKind w, const TimeGrid& grid, int mc, std::uint64_t seed,
                                   const ridge::RidgeConfig& rcfg, int n_batches = 4) {
  const int p = model.width();
  const double sp = std::sqrt(static_cast<double>(p));
  HistoryRow row;
  const int nb = std::max(1, std::min(n_batches, mc));
  std::vector<double> tot_b(nb, 0.0), nor_b(nb, 0.0), tan_b(nb, 0.0), dmm_b(nb, 0.0);
  struct Cell { double tot = 0, nor = 0, tan = 0, arcn = 0, arct = 0, dmm = 0; long kept = 0, all = 0; };
  for (std::size_t q = 0; q < grid.size(); ++q) {
    const double t = grid[q], h = noise_var(t);
    const double coef = training::detail::trapezoid_weight(grid, q) * weight(w, t) / (h * h);
    const Eigen::MatrixXd x = training::detail::node_samples(ds, t, q, mc, seed);
    const Eigen::MatrixXd tgt = training::detail::node_targets(ds, t, mc);
    const Eigen::MatrixXd feats = model.features_batch(t, x);
    const Eigen::MatrixXd pred_k = a_k * feats / sp;
    const Eigen::MatrixXd pred_star = a_star * feats / sp;
    std::vector<Cell> cells(static_cast<std::size_t>(nb));
    for (Eigen::Index col = 0; col < x.cols(); ++col) {
      const int j = static_cast<int>(col % mc);
      Cell& cell = cells[static_cast<std::size_t>(j * nb / mc)];
      cell.dmm += (pred_k.col(col) - tgt.col(col)).squaredNorm();
      ++cell.all;
      const oracle::Eval ev = oracle::evaluate(ds, t, x.col(col));
      ridge::RidgeFrame f = ridge::frame_from_eval(ds, ev, rcfg);
      if (!f.degenerate && rcfg.frame_at == ridge::FrameAt::Projection) {
        try {
          const auto proj = ridge::project_to_ridge(ds, t, x.col(col), rcfg);
          f = ridge::eig_frame(ds, t, proj.point, rcfg);
        } catch (const std::exception&) {
        }
      }
      if (f.degenerate) continue;
      const Eigen::VectorXd e = pred_k.col(col) - ev.mean;
      const Eigen::VectorXd res = pred_star.col(col) - ev.mean;
      const double en = (f.normal.transpose() * e).squaredNorm();
      const double et = (f.tangent.transpose() * e).squaredNorm();
      cell.nor += en;
      cell.tan += et;
      cell.tot += en + et;
      cell.arcn += (f.normal.transpose() * res).squaredNorm();
      cell.arct += (f.tangent.transpose() * res).squaredNorm();
      ++cell.kept;
    }
    long kept = 0, all = 0;
    double tot = 0, nor = 0, tan = 0, arcn = 0, arct = 0, dmm = 0;
    for (int b = 0; b < nb; ++b) {
      const Cell& cell = cells[static_cast<std::size_t>(b)];
      kept += cell.kept;
      all += cell.all;
      tot += cell.tot;
      nor += cell.nor;
      tan += cell.tan;
      arcn += cell.arcn;
      arct += cell.arct;
      dmm += cell.dmm;
      if (cell.kept > 0) {
        tot_b[b] += coef * cell.tot / cell.kept;
        nor_b[b] += coef * cell.nor / cell.kept;
        tan_b[b] += coef * cell.tan / cell.kept;
      }
      if (cell.all > 0) dmm_b[b] += coef * cell.dmm / cell.all;
    }
    if (kept > 0) {
      row.mm_total += coef * tot / kept;
      row.mm_normal += coef * nor / kept;
      row.mm_tangent += coef * tan / kept;
      row.err_train_normal += coef * (nor - arcn) / kept;
      row.err_train_tangent += coef * (tan - arct) / kept;
    }
    if (all > 0) row.dmm_direct += coef * dmm / all;
  }
  auto se = [&](const std::vector<double>& v) {
    if (nb < 2) return 0.0;
    double m = 0;
    for (double x : v) m += x;
    m /= nb;
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (nb - 1) / nb);
  };
  row.se_mm_total = se(tot_b);
  row.se_mm_normal = se(nor_b);
  row.se_mm_tangent = se(tan_b);
  row.se_dmm_direct = se(dmm_b);
  return row;
}

struct RunResult {
  std::string dir;
  nlohmann::json summary;
  bool ok = true;
};

namespace detail {

inline void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows) {
  csv::Writer w(path);
  w.header({"epoch", "k", "dmm_loss", "mm_loss", "mm_loss_normal", "mm_loss_tangent",
            "err_train_total", "err_train_normal", "err_train_tangent", "stderr_mm_loss",
            "stderr_mm_loss_normal", "stderr_mm_loss_tangent"});
  for (const auto& r : rows)
    w.row({static_cast<double>(r.epoch), static_cast<double>(r.epoch), r.dmm, r.mm_total,
           r.mm_normal, r.mm_tangent, r.err_train_total, r.err_train_normal, r.err_train_tangent,
           r.se_mm_total, r.se_mm_normal, r.se_mm_tangent});
}

inline void write_trajectories_csv(const std::string& path, const sampler::TrajectoryBatch& b) {
  csv::Writer w(path);
  std::vector<std::string> head = {"traj_id", "step", "t"};
  for (int c = 0; c < b.dim; ++c) head.push_back("x_" + std::to_string(c));
  head.push_back("failed");
  w.header(head);
  for (int j = 0; j < b.cfg.n_trajectories; ++j) {
    for (int s = 0; s < b.n_records(); ++s) {
      std::vector<double> row = {static_cast<double>(j), static_cast<double>(b.steps[s]), b.times[s]};
      for (int c = 0; c < b.dim; ++c) row.push_back(b.states[static_cast<std::size_t>(s)](c, j));
      row.push_back(b.alive_at(j, s) ? 0.0 : 1.0);
      w.row(row);
    }
  }
}

inline void write_diagnostics_csv(const std::string& path, const diagnostics::Series& s,
                                  const diagnostics::BoundSeries& bs, int n_centers) {
  csv::Writer w(path);
  std::vector<std::string> head = {"step", "t", "entry_fraction", "mean_newton_dist",
                                   "mean_newton_dist_se", "mean_D"};
  for (int c = 0; c < n_centers; ++c) head.push_back("center_" + std::to_string(c) + "_tangent_sq");
  head.push_back("degenerate_fraction");
  head.push_back("normal_bound_rhs");
  head.push_back("tangent_bound_rhs");
  w.header(head);
  for (int i = 0; i < s.n_records(); ++i) {
    std::vector<double> row = {static_cast<double>(s.steps[i]), s.times[i], s.entry_fraction[i],
                               s.mean_newton_dist[i], s.mean_newton_dist_se[i], s.mean_sq_dist[i]};
    for (int c = 0; c < n_centers; ++c) row.push_back(s.tangent_sq(c, i));
    row.push_back(s.degenerate_fraction[i]);
    row.push_back(bs.normal_rhs[static_cast<std::size_t>(i)]);
    row.push_back(bs.tangent_rhs[static_cast<std::size_t>(i)]);
    w.row(row);
  }
}

inline void write_kde_csv(const std::string& path, const diagnostics::KdeGrid& g) {
  csv::Writer w(path);
  w.header({"x", "y", "density"});
  for (int iy = 0; iy < g.ys.size(); ++iy)
    for (int ix = 0; ix < g.xs.size(); ++ix) w.row({g.xs(ix), g.ys(iy), g.density(iy, ix)});
}

inline void write_mode_counts_csv(const std::string& path, const Dataset& ds,
                                  const std::vector<long>& counts) {
  csv::Writer w(path);
  std::vector<std::string> head = {"mode_index"};
  for (int c = 0; c < ds.dim(); ++c) head.push_back("x_" + std::to_string(c));
  head.push_back("count");
  w.header(head);
  for (int i = 0; i < ds.count(); ++i) {
    std::vector<double> row = {static_cast<double>(i)};
    for (int c = 0; c < ds.dim(); ++c) row.push_back(ds.points()(c, i));
    row.push_back(static_cast<double>(counts[static_cast<std::size_t>(i)]));
    w.row(row);
  }
}

}  // namespace detail

/// Executes train -> sample -> diagnose for one configuration and writes the
/// run directory: resolved config, history/trajectories/diagnostics CSVs, KDE
/// grid, mode counts, and a versioned summary of the acceptance scalars.
/// Stage failures are recorded in the summary; earlier outputs are preserved.
inline RunResult run(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  RunResult result;
  const fs::path dir = fs::path(cfg.out_dir) / cfg.name;
  fs::create_directories(dir);
  result.dir = dir.string();

  {
    std::ofstream out(dir / "config.txt");
    out << cfg.to_config().serialize();
  }

  nlohmann::json summary;
  summary["schema_version"] = 1;
  summary["name"] = cfg.name;
  summary["workers"] = lab_workers();
  summary["seed"] = cfg.seed;
  summary["mean_source"] = cfg.resolved_mean_source();
  summary["weight"] = to_string(cfg.weight);
  summary["init"] = cfg.init;

  auto finish = [&](bool ok) {
    summary["ok"] = ok;
    std::ofstream out(dir / "summary.json");
    out << summary.dump(2) << "\n";
    result.summary = summary;
    result.ok = ok;
    return result;
  };

  std::optional<Dataset> ds_opt;
  try {
    ds_opt.emplace(load_dataset(cfg));
  } catch (const std::exception& e) {
    summary["train"] = {{"status", "error"}, {"error", std::string("dataset: ") + e.what()}};
    return finish(false);
  }
  const Dataset& ds = *ds_opt;
  {
    std::vector<std::vector<double>> pts(static_cast<std::size_t>(ds.count()));
    for (int i = 0; i < ds.count(); ++i)
      for (int c = 0; c < ds.dim(); ++c) pts[static_cast<std::size_t>(i)].push_back(ds.points()(c, i));
    summary["data_points"] = pts;
  }

  std::unique_ptr<RfnnModel> rfnn;
  std::unique_ptr<MlpModel> mlp;

  // --- train ---
  try {
    if (cfg.model_kind == "exact") {
      summary["train"] = {{"status", "skipped"}};
    } else if (cfg.model_kind == "rfnn") {
      rfnn = std::make_unique<RfnnModel>(ds.dim(), cfg.width, cfg.time_frequencies, cfg.schedule.T,
                                         cfg.activation, cfg.resolved_model_seed());
      const TimeGrid quad = make_grid(cfg.schedule, cfg.quadrature_nodes, cfg.grid_kind).reversed();
      const training::KernelPair kp = training::estimate_kernels(
          ds, *rfnn, cfg.weight, quad, cfg.mc_samples, cfg.resolved_train_seed());
      const double eta =
          cfg.eta_scale > 0.0 ? cfg.eta_scale / kp.eigvals(0) : cfg.eta;
      const bool stable = training::gd_stable(kp, eta);
      if (!stable)
        std::cerr << "[ridgelab] warning: eta " << eta << " >= 1/lambda_1 = "
                  << 1.0 / kp.eigvals(0) << "; gradient descent may diverge\n";
      Eigen::MatrixXd a = initial_readout(cfg, ds, kp);
      const Eigen::MatrixXd a0 = a;
      const Eigen::MatrixXd astar =
          kp.cross_kernel * kp.eigvecs.leftCols(kp.rank) *
          kp.eigvals.head(kp.rank).cwiseInverse().asDiagonal() *
          kp.eigvecs.leftCols(kp.rank).transpose();
      const Eigen::MatrixXd coeffs = training::residual_coeffs(kp, a0);
      const double constant = training::dmm_constant(ds, cfg.weight, quad);
      const std::uint64_t eval_seed = cfg.resolved_train_seed() + 1;
      double worst_route_gap = 0.0;

      std::vector<HistoryRow> history;
      auto log_epoch = [&](long epoch) {
        HistoryRow row = rfnn_history_row(ds, *rfnn, a, astar, cfg.weight, quad, cfg.mc_samples,
                                          eval_seed, cfg.ridge_cfg);
        row.epoch = epoch;
        row.dmm = training::dmm_quadratic(kp, a, constant);
        row.err_train_total = training::err_train(kp, coeffs, eta, epoch);
        // Two routes to the same loss: the quadratic form over the kernel
        // samples and a fresh-sample Monte Carlo estimate. Near the
        // architecture floor they differ by the kernel's own sampling error
        // (in-sample optimism), so only gross disagreement aborts; the worst
        // gap is reported in the summary.
        const double gap = std::abs(row.dmm - row.dmm_direct);
        worst_route_gap = std::max(worst_route_gap,
                                   gap / std::max(1e-12, std::abs(row.dmm)));
        if (gap > 3.0 * row.se_dmm_direct + 0.5 * std::abs(row.dmm) + 1e-9)
          throw std::runtime_error("rfnn training: quadratic-form loss " + std::to_string(row.dmm) +
                                   " and Monte Carlo loss " + std::to_string(row.dmm_direct) +
                                   " disagree grossly at epoch " + std::to_string(epoch));
        history.push_back(row);
      };
      for (long k = 0; k < cfg.epochs; ++k) {
        if (k % cfg.log_every == 0) log_epoch(k);
        a = training::gd_step(a, kp, eta);
      }
      log_epoch(cfg.epochs);
      rfnn->readout() = a;
      detail::write_history_csv((dir / "history.csv").string(), history);
      rfnn->save((dir / "model_rfnn.json").string());
      summary["train"] = {{"status", "ok"},
                          {"eta_stable", stable},
                          {"eta_used", eta},
                          {"lambda_1", kp.eigvals(0)},
                          {"rank", kp.rank},
                          {"worst_loss_route_gap", worst_route_gap},
                          {"final_dmm", history.back().dmm},
                          {"final_mm_normal", history.back().mm_normal},
                          {"final_mm_tangent", history.back().mm_tangent}};
    } else {  // mlp
      mlp = std::make_unique<MlpModel>(ds.dim(), cfg.hidden, cfg.schedule.T, cfg.resolved_model_seed());
      const TimeGrid quad = make_grid(cfg.schedule, cfg.quadrature_nodes, cfg.grid_kind).reversed();
      const std::uint64_t eval_seed = cfg.resolved_train_seed() + 1;
      std::vector<HistoryRow> history;
      training::train_mlp(ds, *mlp, cfg.weight, quad, cfg.epochs, cfg.eta, cfg.mc_samples,
                          cfg.resolved_train_seed(), cfg.frozen_noise, cfg.log_every,
                          [&](long epoch, double loss, const MlpModel& m) {
                            const auto dl = training::mm_loss_directional(
                                ds, [&](double t, const Eigen::MatrixXd& xs) { return m.forward_batch(t, xs); },
                                cfg.weight, quad, cfg.mc_samples, eval_seed, cfg.ridge_cfg);
                            HistoryRow row;
                            row.epoch = epoch;
                            row.dmm = loss;
                            row.mm_total = dl.total;
                            row.mm_normal = dl.normal;
                            row.mm_tangent = dl.tangent;
                            row.err_train_total = std::numeric_limits<double>::quiet_NaN();
                            row.err_train_normal = std::numeric_limits<double>::quiet_NaN();
                            row.err_train_tangent = std::numeric_limits<double>::quiet_NaN();
                            row.se_mm_total = dl.se_total;
                            row.se_mm_normal = dl.se_normal;
                            row.se_mm_tangent = dl.se_tangent;
                            history.push_back(row);
                          });
      detail::write_history_csv((dir / "history.csv").string(), history);
      mlp->save((dir / "model_mlp.json").string());
      summary["train"] = {{"status", "ok"}, {"final_dmm", history.back().dmm}};
    }
  } catch (const std::exception& e) {
    summary["train"] = {{"status", "error"}, {"error", e.what()}};
    return finish(false);
  }

  // --- sample ---
  std::unique_ptr<sampler::TrajectoryBatch> batch;
  try {
    std::unique_ptr<sampler::MeanSource> src;
    const std::string ms = cfg.resolved_mean_source();
    if (ms == "exact") src = std::make_unique<sampler::ExactMeanSource>(ds);
    else if (ms == "rfnn") {
      if (!rfnn) throw std::runtime_error("sample.mean_source=rfnn but no trained rfnn model");
      src = std::make_unique<sampler::RfnnMeanSource>(*rfnn);
    } else {
      if (!mlp) throw std::runtime_error("sample.mean_source=mlp but no trained mlp model");
      src = std::make_unique<sampler::MlpMeanSource>(*mlp);
    }
    sampler::SamplerConfig scfg = cfg.sampler_cfg;
    scfg.seed = cfg.resolved_sample_seed();
    batch = std::make_unique<sampler::TrajectoryBatch>(sampler::sample(*src, cfg.schedule, scfg));
    detail::write_trajectories_csv((dir / "trajectories.csv").string(), *batch);
    long failed = 0;
    for (int j = 0; j < scfg.n_trajectories; ++j)
      if (batch->failed(j)) ++failed;
    summary["sample"] = {{"status", "ok"}, {"failed_trajectories", failed}};
  } catch (const std::exception& e) {
    summary["sample"] = {{"status", "error"}, {"error", e.what()}};
    return finish(false);
  }

  // --- diagnose ---
  try {
    const diagnostics::Series series = diagnostics::compute_series(*batch, ds, cfg.ridge_cfg, cfg.diag_cfg);
    std::unique_ptr<sampler::MeanSource> err_src;
    if (cfg.resolved_mean_source() == "rfnn") err_src = std::make_unique<sampler::RfnnMeanSource>(*rfnn);
    else if (cfg.resolved_mean_source() == "mlp") err_src = std::make_unique<sampler::MlpMeanSource>(*mlp);
    const diagnostics::BoundSeries bounds =
        diagnostics::bound_series(*batch, ds, cfg.ridge_cfg, series, err_src.get(), cfg.diag_cfg);
    detail::write_diagnostics_csv((dir / "diagnostics.csv").string(), series, bounds, ds.count());

    const Eigen::MatrixXd& fin = batch->final_states();
    if (ds.dim() == 2) {
      const double xmin = ds.points().row(0).minCoeff() - cfg.kde_margin;
      const double xmax = ds.points().row(0).maxCoeff() + cfg.kde_margin;
      const double ymin = ds.points().row(1).minCoeff() - cfg.kde_margin;
      const double ymax = ds.points().row(1).maxCoeff() + cfg.kde_margin;
      detail::write_kde_csv((dir / "kde.csv").string(),
                            diagnostics::kde_grid(fin, cfg.kde_nx, cfg.kde_ny, xmin, xmax, ymin, ymax));
    }
    const std::vector<long> counts = sampler::terminal_mode_counts(*batch, ds, cfg.mode_radius);
    detail::write_mode_counts_csv((dir / "mode_counts.csv").string(), ds, counts);
    const auto [spread, spread_se] = sampler::terminal_spread(*batch, ds);

    const int last = series.n_records() - 1;
    summary["diagnose"] = {{"status", "ok"}};
    summary["final_entry_fraction"] = series.entry_fraction[static_cast<std::size_t>(last)];
    summary["final_mean_newton_dist"] = series.mean_newton_dist[static_cast<std::size_t>(last)];
    summary["final_mean_newton_dist_se"] = series.mean_newton_dist_se[static_cast<std::size_t>(last)];
    summary["final_mean_newton_dist_all"] =
        series.mean_newton_dist_all[static_cast<std::size_t>(last)];
    summary["final_mean_newton_dist_all_se"] =
        series.mean_newton_dist_all_se[static_cast<std::size_t>(last)];
    summary["final_mean_D"] = series.mean_sq_dist[static_cast<std::size_t>(last)];
    summary["final_tangent_sq"] = diagnostics::aggregate_tangent_sq(series, last);
    summary["final_degenerate_fraction"] = series.degenerate_fraction[static_cast<std::size_t>(last)];
    summary["mode_counts"] = counts;
    long total = 0;
    for (long c : counts) total += c;
    summary["mode_count_total"] = total;
    summary["spread_mean"] = spread;
    summary["spread_se"] = spread_se;

    // Bound dominance along the post-entry window (unit prefactor).
    bool dominates = true;
    std::vector<double> slack;
    for (int s = bounds.entry_record; s < series.n_records(); ++s) {
      if (series.mean_sq_dist[static_cast<std::size_t>(s)] >
          bounds.normal_rhs[static_cast<std::size_t>(s)])
        dominates = false;
      slack.push_back(bounds.normal_rhs[static_cast<std::size_t>(s)] -
                      series.mean_sq_dist[static_cast<std::size_t>(s)]);
    }
    std::sort(slack.begin(), slack.end());
    summary["normal_bound_dominates"] = dominates;
    summary["normal_bound_median_slack"] = slack.empty() ? 0.0 : slack[slack.size() / 2];

    try {
      const auto phases = diagnostics::segment_phases(series, cfg.diag_cfg);
      summary["reach_end"] = phases.reach_end;
      summary["align_end"] = phases.align_end;
      summary["plateau_level"] = phases.plateau_level;
    } catch (const std::exception&) {
      // Series shorter than the phase window; phases stay unset.
    }
  } catch (const std::exception& e) {
    summary["diagnose"] = {{"status", "error"}, {"error", e.what()}};
    return finish(false);
  }

  return finish(true);
}

/// Strict summary reader: versioned schema, unknown fields rejected.
inline nlohmann::json read_summary(const std::string& run_dir) {
  const std::string path = (std::filesystem::path(run_dir) / "summary.json").string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("compare: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
    throw std::runtime_error("compare: unsupported summary schema in " + path);
  static const std::set<std::string> known = {
      "schema_version", "name", "workers", "seed", "mean_source", "weight", "init", "ok",
      "data_points", "train", "sample", "diagnose", "final_entry_fraction",
      "final_mean_newton_dist", "final_mean_newton_dist_se", "final_mean_newton_dist_all",
      "final_mean_newton_dist_all_se", "final_mean_D", "final_tangent_sq",
      "final_degenerate_fraction", "mode_counts", "mode_count_total", "spread_mean", "spread_se",
      "normal_bound_dominates", "normal_bound_median_slack", "reach_end", "align_end",
      "plateau_level"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::runtime_error("compare: unknown summary field '" + it.key() + "' in " + path);
  return j;
}

/// Side-by-side comparison of runs over one dataset: spread, mode counts,
/// entry fractions, and the weight/initialization ordering verdicts.
inline std::string compare(const std::vector<std::string>& dirs) {
  if (dirs.size() < 2) throw std::invalid_argument("compare: need at least two run directories");
  std::vector<nlohmann::json> sums;
  for (const auto& d : dirs) sums.push_back(read_summary(d));
  for (std::size_t i = 1; i < sums.size(); ++i)
    if (sums[i]["data_points"] != sums[0]["data_points"])
      throw std::runtime_error("compare: datasets differ between runs");

  std::ostringstream out;
  out << "run, weight, init, spread, spread_se, mode_total, entry_fraction, final_tangent_sq, "
         "final_mean_newton_dist\n";
  for (const auto& s : sums) {
    out << s["name"].get<std::string>() << ", " << s["weight"].get<std::string>() << ", "
        << s["init"].get<std::string>() << ", " << s.value("spread_mean", 0.0) << ", "
        << s.value("spread_se", 0.0) << ", " << s.value("mode_count_total", 0l) << ", "
        << s.value("final_entry_fraction", 0.0) << ", " << s.value("final_tangent_sq", 0.0) << ", "
        << s.value("final_mean_newton_dist", 0.0) << "\n";
  }

  auto find_weight = [&](const std::string& w) -> const nlohmann::json* {
    for (const auto& s : sums)
      if (s["weight"].get<std::string>() == w) return &s;
    return nullptr;
  };
  const auto* w1 = find_weight("one");
  const auto* wh = find_weight("ht");
  const auto* wh2 = find_weight("ht2");
  if (w1 && wh && wh2) {
    const double s1 = w1->value("spread_mean", 0.0), e1 = w1->value("spread_se", 0.0);
    const double s2 = wh->value("spread_mean", 0.0), e2 = wh->value("spread_se", 0.0);
    const double s3 = wh2->value("spread_mean", 0.0), e3 = wh2->value("spread_se", 0.0);
    const bool ordered = (s1 + 3 * e1 < s2 - 3 * e2) && (s2 + 3 * e2 < s3 - 3 * e3);
    out << "weight_ordering_verdict: "
        << (ordered ? "one < ht < ht2 (tangent spread, 3-se separated)" : "not separated") << "\n";
    const long c1 = w1->value("mode_count_total", 0l), c2 = wh->value("mode_count_total", 0l),
               c3 = wh2->value("mode_count_total", 0l);
    out << "mode_count_ordering: " << (c1 > c2 && c2 > c3 ? "one > ht > ht2" : "not ordered") << "\n";
  }
  const nlohmann::json* zero = nullptr;
  const nlohmann::json* slow = nullptr;
  for (const auto& s : sums) {
    if (s["init"].get<std::string>() == "zeros") zero = &s;
    if (s["init"].get<std::string>() == "slow_spectrum") slow = &s;
  }
  if (zero && slow) {
    const double z = zero->value("final_mean_newton_dist", 0.0);
    const double sl = slow->value("final_mean_newton_dist", 0.0);
    out << "init_normal_offset_ratio: " << (z > 0 ? sl / z : std::numeric_limits<double>::infinity())
        << " (slow_spectrum / zeros)\n";
  }
  return out.str();
}

}  // namespace ridgelab::harness
