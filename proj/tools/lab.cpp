// Experiment driver: run presets or config files, compare run directories,
// and execute the built-in invariant checks.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "ridgelab/harness.hpp"

namespace {

using namespace ridgelab;

int run_command(const std::string& config_path, const std::string& preset_name,
                const std::vector<std::string>& overrides, const std::string& out_dir) {
  KeyValueConfig kv;
  if (!preset_name.empty()) {
    kv = harness::preset(preset_name).to_config();
  } else if (!config_path.empty()) {
    kv = KeyValueConfig::load(config_path);
  } else {
    std::cerr << "lab run: need --preset or --config\n";
    return 2;
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      std::cerr << "lab run: override must be key=value, got '" << ov << "'\n";
      return 2;
    }
    kv.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  if (!out_dir.empty()) kv.set("run.out_dir", out_dir);
  const auto cfg = harness::ExperimentConfig::from_config(kv);
  const auto result = harness::run(cfg);
  std::cout << "run directory: " << result.dir << "\n";
  std::cout << result.summary.dump(2) << "\n";
  return result.ok ? 0 : 1;
}

// Fast subset of the library invariants; exercised in full by the test suite.
int check_command() {
  int failures = 0;
  auto report = [&](const std::string& name, bool ok) {
    std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", name.c_str());
    if (!ok) ++failures;
  };

  {
    double worst = 0.0;
    for (int i = 0; i < 1000000; ++i) {
      const double t = 50.0 * rng::uniform(rng::key(7, 0x77, static_cast<std::uint64_t>(i)));
      const double a = alpha(t);
      worst = std::max(worst, std::abs(a * a + noise_var(t) - 1.0));
    }
    report("variance-preserving identity |a^2 + h - 1| <= 1e-14 (1e6 samples)", worst <= 1e-14);
  }
  {
    const Schedule s{10.0, 1e-3};
    const TimeGrid g1 = geometric_grid(s, 1000), g2 = geometric_grid(s, 1000);
    bool same = g1.nodes == g2.nodes;
    bool mono = true;
    for (std::size_t i = 1; i < g1.size(); ++i) mono = mono && g1[i] < g1[i - 1];
    report("geometric grid bit-reproducible and strictly monotone", same && mono);
  }
  {
    const Dataset ds = Dataset::from_rows({{-3.0, 0.0}, {3.0, 0.0}});
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
      const double t = 0.05 + 4.95 * rng::uniform(rng::key(11, 0x7a, static_cast<std::uint64_t>(i)));
      Eigen::VectorXd x(2);
      x << 8.0 * rng::uniform(rng::key(11, 0x7b, static_cast<std::uint64_t>(i))) - 4.0,
          8.0 * rng::uniform(rng::key(11, 0x7c, static_cast<std::uint64_t>(i))) - 4.0;
      const Eigen::VectorXd s = oracle::score(ds, t, x);
      const double step = 1e-5 * (1.0 + x.norm());
      Eigen::VectorXd fd(2);
      for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd xp = x, xm = x;
        xp(c) += step;
        xm(c) -= step;
        fd(c) = (oracle::log_density(ds, t, xp) - oracle::log_density(ds, t, xm)) / (2.0 * step);
      }
      worst = std::max(worst, (s - fd).norm() / std::max(1e-12, s.norm()));
    }
    report("score matches finite-difference log-density gradient (rel 1e-6)", worst <= 1e-6);
  }
  {
    const Dataset ds = Dataset::from_rows({{-3.0, 0.0}, {3.0, 0.0}});
    ridge::RidgeConfig rcfg;
    double worst = 0.0;
    for (int i = 0; i < 400; ++i) {
      const double t = 0.05 + 1.95 * rng::uniform(rng::key(13, 0x7d, static_cast<std::uint64_t>(i)));
      Eigen::VectorXd x(2);
      x << 8.0 * rng::uniform(rng::key(13, 0x7e, static_cast<std::uint64_t>(i))) - 4.0,
          2.0 * rng::uniform(rng::key(13, 0x7f, static_cast<std::uint64_t>(i))) - 1.0;
      worst = std::max(worst, std::abs(ridge::newton_distance(ds, t, x, rcfg) - std::abs(x(1))));
    }
    report("Newton distance equals |y| on the axis-symmetric two-point set (1e-10)", worst <= 1e-10);
  }
  {
    const Dataset ds = Dataset::from_rows({{0.0, 0.0}, {3.0, 0.0}, {0.0, 5.0}});
    ridge::RidgeConfig rcfg;
    bool ok = true;
    for (int i = 0; i < 50; ++i) {
      const double t = 0.1 + 2.0 * rng::uniform(rng::key(17, 0x80, static_cast<std::uint64_t>(i)));
      Eigen::VectorXd x(2);
      x << 6.0 * rng::uniform(rng::key(17, 0x81, static_cast<std::uint64_t>(i))) - 1.5,
          6.0 * rng::uniform(rng::key(17, 0x82, static_cast<std::uint64_t>(i))) - 1.5;
      const auto f = ridge::eig_frame(ds, t, x, rcfg);
      const auto [pt, pn] = ridge::projectors(f);
      ok = ok && ((pt + pn - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() <= 1e-12);
      ok = ok && ((pt * pt - pt).cwiseAbs().maxCoeff() <= 1e-12);
    }
    report("ridge projectors complete and idempotent", ok);
  }
  {
    const Dataset ds = Dataset::from_rows({{-3.0, 0.0}, {3.0, 0.0}});
    sampler::ExactMeanSource src(ds);
    sampler::SamplerConfig cfg;
    cfg.n_steps = 50;
    cfg.n_trajectories = 16;
    cfg.seed = 99;
    const auto b1 = sampler::sample(src, Schedule{10.0, 1e-3}, cfg);
    const auto b2 = sampler::sample(src, Schedule{10.0, 1e-3}, cfg);
    bool same = true;
    for (int s = 0; s < b1.n_records(); ++s) same = same && (b1.states[s] == b2.states[s]);
    report("sampler batches bit-identical across reruns", same);
  }
  std::printf("%s\n", failures == 0 ? "all checks passed" : "CHECKS FAILED");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ridgelab: diffusion inference geometry laboratory"};
  app.require_subcommand(1);

  std::string config_path, preset_name, out_dir;
  std::vector<std::string> overrides;
  auto* run = app.add_subcommand("run", "execute one experiment");
  run->add_option("--config", config_path, "flat key=value config file");
  run->add_option("--preset", preset_name, "preset name");
  run->add_option("--override", overrides, "key=value override (repeatable)");
  run->add_option("--out", out_dir, "output directory root");

  std::vector<std::string> dirs;
  auto* cmp = app.add_subcommand("compare", "compare finished run directories");
  cmp->add_option("dirs", dirs, "run directories")->expected(-2);

  auto* chk = app.add_subcommand("check", "run the built-in invariant suite");
  auto* lst = app.add_subcommand("presets", "list preset names");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return run_command(config_path, preset_name, overrides, out_dir);
    if (cmp->parsed()) {
      std::cout << ridgelab::harness::compare(dirs);
      return 0;
    }
    if (chk->parsed()) return check_command();
    if (lst->parsed()) {
      for (const auto& n : ridgelab::harness::preset_names()) std::cout << n << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
