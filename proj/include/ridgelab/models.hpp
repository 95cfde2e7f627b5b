#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "ridgelab/rng.hpp"

namespace ridgelab {

enum class Activation { ReLU, Tanh };

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  throw std::invalid_argument("activation must be relu|tanh");
}

inline std::string to_string(Activation a) { return a == Activation::ReLU ? "relu" : "tanh"; }

/// 2K+1 Fourier features on [0, T]: constant plus sqrt(2)-scaled cos/sin
/// pairs, so the embedding norm is exactly sqrt(2K+1) for every t.
struct FourierTimeEmbedding {
  int k_t = 128;
  double T = 10.0;

  int dim() const { return 2 * k_t + 1; }

  Eigen::VectorXd operator()(double t) const {
    Eigen::VectorXd phi(dim());
    phi(0) = 1.0;
    constexpr double two_pi = 6.283185307179586476925286766559;
    const double base = two_pi * t / T;
    const double s2 = std::sqrt(2.0);
    for (int k = 1; k <= k_t; ++k) {
      phi(2 * k - 1) = s2 * std::cos(base * k);
      phi(2 * k) = s2 * std::sin(base * k);
    }
    return phi;
  }
};

/// Two-layer random feature network for the posterior mean:
///   m_A(t, x) = (A / sqrt(p)) act(Wx x / sqrt(d) + Wt phi_t / sqrt(2K+1) + b).
/// Wx, Wt, b are frozen standard normal draws, a pure function of
/// (seed, p, d, K_t); only A trains.
class RfnnModel {
 public:
  RfnnModel(int d, int p, int k_t, double T, Activation act, std::uint64_t seed)
      : d_(d), p_(p), act_(act), seed_(seed), embed_{k_t, T} {
    if (d < 1 || p < 1 || k_t < 0) throw std::invalid_argument("RfnnModel: bad sizes");
    w_x_.resize(p, d);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < d; ++j) w_x_(i, j) = rng::gaussian(seed, rng::kFrozenWx, i, j);
    const int q = embed_.dim();
    w_t_.resize(p, q);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < q; ++j) w_t_(i, j) = rng::gaussian(seed, rng::kFrozenWt, i, j);
    b_.resize(p);
    for (int i = 0; i < p; ++i) b_(i) = rng::gaussian(seed, rng::kFrozenBias, i);
    a_ = Eigen::MatrixXd::Zero(d, p);
  }

  int dim() const { return d_; }
  int width() const { return p_; }
  int time_frequencies() const { return embed_.k_t; }
  double horizon() const { return embed_.T; }
  Activation activation() const { return act_; }
  std::uint64_t seed() const { return seed_; }

  Eigen::MatrixXd& readout() { return a_; }
  const Eigen::MatrixXd& readout() const { return a_; }

  /// Input-independent part of the pre-activation at time t.
  Eigen::VectorXd time_shift(double t) const {
    return w_t_ * embed_(t) / std::sqrt(static_cast<double>(embed_.dim())) + b_;
  }

  Eigen::VectorXd features(double t, const Eigen::VectorXd& x) const {
    Eigen::VectorXd pre = w_x_ * x / std::sqrt(static_cast<double>(d_)) + time_shift(t);
    return activate(pre);
  }

  /// Features of a batch of points (columns) at a common time.
  Eigen::MatrixXd features_batch(double t, const Eigen::MatrixXd& xs) const {
    Eigen::MatrixXd pre = w_x_ * xs / std::sqrt(static_cast<double>(d_));
    pre.colwise() += time_shift(t);
    return activate(pre);
  }

  /// Same, with the time shift precomputed by the caller.
  Eigen::MatrixXd features_batch_with_shift(const Eigen::VectorXd& shift,
                                            const Eigen::MatrixXd& xs) const {
    Eigen::MatrixXd pre = w_x_ * xs / std::sqrt(static_cast<double>(d_));
    pre.colwise() += shift;
    return activate(pre);
  }

  Eigen::VectorXd forward(double t, const Eigen::VectorXd& x) const {
    return a_ * features(t, x) / std::sqrt(static_cast<double>(p_));
  }

  Eigen::MatrixXd forward_batch(double t, const Eigen::MatrixXd& xs) const {
    return a_ * features_batch(t, xs) / std::sqrt(static_cast<double>(p_));
  }

  template <typename M>
  M activate(M pre) const {
    if (act_ == Activation::ReLU) return pre.cwiseMax(0.0);
    return pre.array().tanh().matrix();
  }

  /// Checkpoint: JSON header (d, p, k_t, T, seed, activation) plus the readout
  /// row-major. Frozen weights are regenerated from the seed on load.
  void save(const std::string& path) const {
    nlohmann::json j;
    j["format"] = "rfnn-checkpoint";
    j["version"] = 1;
    j["d"] = d_;
    j["p"] = p_;
    j["k_t"] = embed_.k_t;
    j["T"] = embed_.T;
    j["seed"] = seed_;
    j["activation"] = to_string(act_);
    std::vector<double> flat(static_cast<std::size_t>(d_) * p_);
    for (int i = 0; i < d_; ++i)
      for (int jj = 0; jj < p_; ++jj) flat[static_cast<std::size_t>(i) * p_ + jj] = a_(i, jj);
    j["readout_row_major"] = flat;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("RfnnModel: cannot write " + path);
    out << j.dump();
  }

  static RfnnModel load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("RfnnModel: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "rfnn-checkpoint")
      throw std::runtime_error("RfnnModel: not an rfnn checkpoint: " + path);
    RfnnModel m(j.at("d").get<int>(), j.at("p").get<int>(), j.at("k_t").get<int>(),
                j.at("T").get<double>(), activation_from_string(j.at("activation").get<std::string>()),
                j.at("seed").get<std::uint64_t>());
    const auto flat = j.at("readout_row_major").get<std::vector<double>>();
    if (flat.size() != static_cast<std::size_t>(m.d_) * m.p_)
      throw std::runtime_error("RfnnModel: readout size mismatch in " + path);
    for (int i = 0; i < m.d_; ++i)
      for (int jj = 0; jj < m.p_; ++jj) m.a_(i, jj) = flat[static_cast<std::size_t>(i) * m.p_ + jj];
    return m;
  }

 private:
  int d_, p_;
  Activation act_;
  std::uint64_t seed_;
  FourierTimeEmbedding embed_;
  Eigen::MatrixXd w_x_;  // p x d
  Eigen::MatrixXd w_t_;  // p x (2K+1)
  Eigen::VectorXd b_;    // p
  Eigen::MatrixXd a_;    // d x p, trainable
};

/// Sinusoidal time embedding of fixed dimension 32: 16 sin/cos pairs with
/// frequencies geometric from 1 to 1000 applied to t/T.
struct SinusoidalTimeEmbedding {
  static constexpr int kPairs = 16;
  double T = 10.0;

  int dim() const { return 2 * kPairs; }

  Eigen::VectorXd operator()(double t) const {
    Eigen::VectorXd e(dim());
    constexpr double two_pi = 6.283185307179586476925286766559;
    const double u = t / T;
    for (int k = 0; k < kPairs; ++k) {
      const double f = std::pow(1000.0, static_cast<double>(k) / (kPairs - 1));
      e(2 * k) = std::sin(two_pi * f * u);
      e(2 * k + 1) = std::cos(two_pi * f * u);
    }
    return e;
  }
};

struct MlpGradients {
  Eigen::MatrixXd w1, w2;
  Eigen::VectorXd b1, b2;
};

/// Small time-conditioned MLP: [x, embed(t)] -> hidden (ReLU) -> R^d, with a
/// hand-written backward pass for full-batch gradient descent.
class MlpModel {
 public:
  MlpModel(int d, int hidden, double T, std::uint64_t seed) : d_(d), hidden_(hidden), embed_{T} {
    if (d < 1 || hidden < 1) throw std::invalid_argument("MlpModel: bad sizes");
    const int in = d + embed_.dim();
    w1_.resize(hidden, in);
    b1_ = Eigen::VectorXd::Zero(hidden);
    w2_.resize(d, hidden);
    b2_ = Eigen::VectorXd::Zero(d);
    // He-style fan-in scaling for the ReLU layer.
    const double s1 = std::sqrt(2.0 / in), s2 = std::sqrt(2.0 / hidden);
    for (int i = 0; i < hidden; ++i)
      for (int j = 0; j < in; ++j) w1_(i, j) = s1 * rng::gaussian(seed, rng::kMlpInit, 0, i, j);
    for (int i = 0; i < d_; ++i)
      for (int j = 0; j < hidden; ++j) w2_(i, j) = s2 * rng::gaussian(seed, rng::kMlpInit, 1, i, j);
  }

  int dim() const { return d_; }
  int hidden() const { return hidden_; }
  double horizon() const { return embed_.T; }

  Eigen::VectorXd input(double t, const Eigen::VectorXd& x) const {
    Eigen::VectorXd u(d_ + embed_.dim());
    u.head(d_) = x;
    u.tail(embed_.dim()) = embed_(t);
    return u;
  }

  Eigen::VectorXd forward(double t, const Eigen::VectorXd& x) const {
    const Eigen::VectorXd u = input(t, x);
    const Eigen::VectorXd z1 = w1_ * u + b1_;
    return w2_ * z1.cwiseMax(0.0) + b2_;
  }

  Eigen::MatrixXd forward_batch(double t, const Eigen::MatrixXd& xs) const {
    const int B = static_cast<int>(xs.cols());
    Eigen::MatrixXd u(d_ + embed_.dim(), B);
    u.topRows(d_) = xs;
    u.bottomRows(embed_.dim()).colwise() = embed_(t);
    Eigen::MatrixXd z1 = w1_ * u;
    z1.colwise() += b1_;
    Eigen::MatrixXd out = w2_ * z1.cwiseMax(0.0);
    out.colwise() += b2_;
    return out;
  }

  /// Gradients of <upstream, forward(t, x)> with respect to all weights.
  MlpGradients backward(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream) const {
    const Eigen::VectorXd u = input(t, x);
    const Eigen::VectorXd z1 = w1_ * u + b1_;
    const Eigen::VectorXd h1 = z1.cwiseMax(0.0);
    MlpGradients g;
    g.w2 = upstream * h1.transpose();
    g.b2 = upstream;
    Eigen::VectorXd dz1 = w2_.transpose() * upstream;
    for (int i = 0; i < hidden_; ++i)
      if (z1(i) <= 0.0) dz1(i) = 0.0;
    g.w1 = dz1 * u.transpose();
    g.b1 = dz1;
    return g;
  }

  /// Accumulating batch backward: adds gradients of sum_b <upstream_b, out_b>.
  void backward_batch_accum(double t, const Eigen::MatrixXd& xs, const Eigen::MatrixXd& upstream,
                            MlpGradients& g) const {
    const int B = static_cast<int>(xs.cols());
    Eigen::MatrixXd u(d_ + embed_.dim(), B);
    u.topRows(d_) = xs;
    u.bottomRows(embed_.dim()).colwise() = embed_(t);
    Eigen::MatrixXd z1 = w1_ * u;
    z1.colwise() += b1_;
    const Eigen::MatrixXd h1 = z1.cwiseMax(0.0);
    g.w2.noalias() += upstream * h1.transpose();
    g.b2.noalias() += upstream.rowwise().sum();
    Eigen::MatrixXd dz1 = w2_.transpose() * upstream;
    dz1.array() *= (z1.array() > 0.0).cast<double>();
    g.w1.noalias() += dz1 * u.transpose();
    g.b1.noalias() += dz1.rowwise().sum();
  }

  void apply_step(const MlpGradients& g, double lr) {
    w1_ -= lr * g.w1;
    b1_ -= lr * g.b1;
    w2_ -= lr * g.w2;
    b2_ -= lr * g.b2;
  }

  MlpGradients zero_gradients() const {
    MlpGradients g;
    g.w1 = Eigen::MatrixXd::Zero(hidden_, d_ + embed_.dim());
    g.w2 = Eigen::MatrixXd::Zero(d_, hidden_);
    g.b1 = Eigen::VectorXd::Zero(hidden_);
    g.b2 = Eigen::VectorXd::Zero(d_);
    return g;
  }

  Eigen::MatrixXd& w1() { return w1_; }
  Eigen::MatrixXd& w2() { return w2_; }
  Eigen::VectorXd& b1() { return b1_; }
  Eigen::VectorXd& b2() { return b2_; }
  const Eigen::MatrixXd& w1() const { return w1_; }
  const Eigen::MatrixXd& w2() const { return w2_; }
  const Eigen::VectorXd& b1() const { return b1_; }
  const Eigen::VectorXd& b2() const { return b2_; }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["format"] = "mlp-checkpoint";
    j["version"] = 1;
    j["d"] = d_;
    j["hidden"] = hidden_;
    j["T"] = embed_.T;
    auto dump = [](const Eigen::MatrixXd& m) {
      std::vector<double> v(static_cast<std::size_t>(m.size()));
      Eigen::Map<Eigen::MatrixXd>(v.data(), m.rows(), m.cols()) = m;
      return v;
    };
    j["w1"] = dump(w1_);
    j["b1"] = std::vector<double>(b1_.data(), b1_.data() + b1_.size());
    j["w2"] = dump(w2_);
    j["b2"] = std::vector<double>(b2_.data(), b2_.data() + b2_.size());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("MlpModel: cannot write " + path);
    out << j.dump();
  }

  static MlpModel load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("MlpModel: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "mlp-checkpoint")
      throw std::runtime_error("MlpModel: not an mlp checkpoint: " + path);
    MlpModel m(j.at("d").get<int>(), j.at("hidden").get<int>(), j.at("T").get<double>(), 0);
    auto fill = [&](Eigen::MatrixXd& dst, const char* key) {
      const auto v = j.at(key).get<std::vector<double>>();
      if (v.size() != static_cast<std::size_t>(dst.size()))
        throw std::runtime_error("MlpModel: size mismatch for " + std::string(key));
      dst = Eigen::Map<const Eigen::MatrixXd>(v.data(), dst.rows(), dst.cols());
    };
    fill(m.w1_, "w1");
    fill(m.w2_, "w2");
    auto b1v = j.at("b1").get<std::vector<double>>();
    auto b2v = j.at("b2").get<std::vector<double>>();
    m.b1_ = Eigen::Map<const Eigen::VectorXd>(b1v.data(), static_cast<Eigen::Index>(b1v.size()));
    m.b2_ = Eigen::Map<const Eigen::VectorXd>(b2v.data(), static_cast<Eigen::Index>(b2v.size()));
    return m;
  }

 private:
  int d_, hidden_;
  SinusoidalTimeEmbedding embed_;
  Eigen::MatrixXd w1_, w2_;
  Eigen::VectorXd b1_, b2_;
};

}  // namespace ridgelab
