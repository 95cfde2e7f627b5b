#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ridgelab {

/// Immutable training set of n points in R^d. Caches the minimal pairwise
/// separation and the maximal norm, which every localization bound depends on.
class Dataset {
 public:
  /// points: d x n, one column per point.
  explicit Dataset(Eigen::MatrixXd points) : pts_(std::move(points)) {
    if (pts_.cols() < 1) throw std::invalid_argument("Dataset: need at least one point");
    if (!pts_.allFinite()) throw std::invalid_argument("Dataset: non-finite point");
    radius_ = pts_.colwise().norm().maxCoeff();
    separation_ = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < pts_.cols(); ++i)
      for (Eigen::Index j = i + 1; j < pts_.cols(); ++j)
        separation_ = std::min(separation_, (pts_.col(i) - pts_.col(j)).norm());
    if (pts_.cols() > 1 && !(separation_ > 0.0))
      throw std::invalid_argument("Dataset: duplicate points (zero separation)");
  }

  static Dataset from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("Dataset: empty point list");
    const std::size_t d = rows.front().size();
    if (d == 0) throw std::invalid_argument("Dataset: zero-dimensional point");
    Eigen::MatrixXd pts(d, rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != d) throw std::invalid_argument("Dataset: ragged point list");
      for (std::size_t a = 0; a < d; ++a) pts(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i)) = rows[i][a];
    }
    return Dataset(std::move(pts));
  }

  /// CSV: one point per row, d comma-separated columns, optional header line.
  static Dataset from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("Dataset: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::stringstream ss(line);
      std::string cell;
      bool numeric = true;
      while (std::getline(ss, cell, ',')) {
        try {
          std::size_t used = 0;
          double v = std::stod(cell, &used);
          row.push_back(v);
          (void)used;
        } catch (const std::exception&) {
          numeric = false;
          break;
        }
      }
      if (!numeric) {
        if (first) { first = false; continue; }  // header
        throw std::runtime_error("Dataset: non-numeric row in " + path);
      }
      first = false;
      rows.push_back(std::move(row));
    }
    return from_rows(rows);
  }

  int dim() const { return static_cast<int>(pts_.rows()); }
  int count() const { return static_cast<int>(pts_.cols()); }
  const Eigen::MatrixXd& points() const { return pts_; }
  Eigen::VectorXd point(int i) const { return pts_.col(i); }

  /// min_{i != j} |x_i - x_j|; +inf for a single point.
  double min_separation() const { return separation_; }
  /// max_i |x_i|.
  double max_radius() const { return radius_; }

 private:
  Eigen::MatrixXd pts_;  // d x n
  double separation_ = 0.0;
  double radius_ = 0.0;
};

}  // namespace ridgelab
