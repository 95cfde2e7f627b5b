#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace ridgelab {

/// Variance-preserving OU schedule on [0, T] with early stopping at delta.
/// The forward marginal of a point x0 at time t is alpha(t)*x0 + sqrt(noise_var(t))*Z.
struct Schedule {
  double T = 10.0;
  double delta = 1e-3;

  Schedule() = default;
  Schedule(double terminal, double early_stop) : T(terminal), delta(early_stop) {
    if (!(delta > 0.0) || !(delta < T))
      throw std::invalid_argument("Schedule: need 0 < delta < T");
  }
};

/// Mean decay factor e^{-t}.
inline double alpha(double t) {
  if (t < 0.0) throw std::invalid_argument("alpha: negative time");
  return std::exp(-t);
}

/// Noise variance 1 - e^{-2t}, evaluated cancellation-free near 0.
inline double noise_var(double t) {
  if (t < 0.0) throw std::invalid_argument("noise_var: negative time");
  return -std::expm1(-2.0 * t);
}

enum class WeightKind { ConstOne, NoiseVar, NoiseVarSquared };

inline double weight(WeightKind w, double t) {
  switch (w) {
    case WeightKind::ConstOne: return 1.0;
    case WeightKind::NoiseVar: return noise_var(t);
    case WeightKind::NoiseVarSquared: {
      const double h = noise_var(t);
      return h * h;
    }
  }
  throw std::logic_error("weight: bad kind");
}

inline WeightKind weight_from_string(const std::string& s) {
  if (s == "one") return WeightKind::ConstOne;
  if (s == "ht") return WeightKind::NoiseVar;
  if (s == "ht2") return WeightKind::NoiseVarSquared;
  throw std::invalid_argument("unknown loss weight '" + s + "' (want one|ht|ht2)");
}

inline std::string to_string(WeightKind w) {
  switch (w) {
    case WeightKind::ConstOne: return "one";
    case WeightKind::NoiseVar: return "ht";
    case WeightKind::NoiseVarSquared: return "ht2";
  }
  return "?";
}

enum class GridKind { Geometric, Uniform };

/// Strictly monotone time grid with endpoints delta and T.
struct TimeGrid {
  std::vector<double> nodes;
  GridKind kind = GridKind::Geometric;

  bool ascending() const { return nodes.size() >= 2 && nodes.front() < nodes.back(); }
  std::size_t size() const { return nodes.size(); }
  double operator[](std::size_t i) const { return nodes[i]; }

  TimeGrid reversed() const {
    TimeGrid g{*this};
    std::reverse(g.nodes.begin(), g.nodes.end());
    return g;
  }
};

/// n_steps+1 nodes t_i = T*(delta/T)^{i/N}, descending from T to delta.
/// Reverse for quadrature use.
inline TimeGrid geometric_grid(const Schedule& s, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("geometric_grid: n_steps >= 1");
  TimeGrid g;
  g.kind = GridKind::Geometric;
  g.nodes.resize(static_cast<std::size_t>(n_steps) + 1);
  const double log_ratio = std::log(s.delta / s.T);
  for (int i = 1; i < n_steps; ++i)
    g.nodes[i] = s.T * std::exp(log_ratio * static_cast<double>(i) / n_steps);
  g.nodes.front() = s.T;
  g.nodes.back() = s.delta;
  return g;
}

inline TimeGrid uniform_grid(const Schedule& s, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("uniform_grid: n_steps >= 1");
  TimeGrid g;
  g.kind = GridKind::Uniform;
  g.nodes.resize(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 1; i < n_steps; ++i)
    g.nodes[i] = s.T + (s.delta - s.T) * static_cast<double>(i) / n_steps;
  g.nodes.front() = s.T;
  g.nodes.back() = s.delta;
  return g;
}

inline TimeGrid make_grid(const Schedule& s, int n_steps, GridKind kind) {
  return kind == GridKind::Geometric ? geometric_grid(s, n_steps) : uniform_grid(s, n_steps);
}

}  // namespace ridgelab
