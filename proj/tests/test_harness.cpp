#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ridgelab/harness.hpp"

using namespace ridgelab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch() {
  const fs::path p = fs::temp_directory_path() / "ridgelab_harness_tests";
  fs::create_directories(p);
  return p;
}

harness::ExperimentConfig small_exact(const std::string& name) {
  auto kv = harness::preset("m_shape_13").to_config();
  kv.set("run.name", name);
  kv.set("run.out_dir", (scratch() / "runs").string());
  kv.set("sample.n_steps", "120");
  kv.set("sample.n_trajectories", "60");
  kv.set("kde.nx", "20");
  kv.set("kde.ny", "20");
  kv.set("diag.window", "20");
  return harness::ExperimentConfig::from_config(kv);
}

}  // namespace

TEST_CASE("exact-mean run writes the full run directory") {
  const auto cfg = small_exact("exact_small");
  const auto result = harness::run(cfg);
  REQUIRE(result.ok);
  const fs::path dir = result.dir;
  for (const char* f :
       {"config.txt", "trajectories.csv", "diagnostics.csv", "kde.csv", "mode_counts.csv",
        "summary.json"}) {
    INFO(f);
    CHECK(fs::exists(dir / f));
  }
  CHECK_FALSE(fs::exists(dir / "history.csv"));  // training skipped
  CHECK(result.summary["train"]["status"] == "skipped");
  CHECK(result.summary["sample"]["status"] == "ok");
  CHECK(result.summary["diagnose"]["status"] == "ok");
  CHECK(result.summary["final_entry_fraction"].get<double>() >= 0.5);
  SECTION("summary reader validates the schema") {
    CHECK_NOTHROW(harness::read_summary(dir.string()));
    auto j = harness::read_summary(dir.string());
    j["surprise"] = 1;
    std::ofstream(dir / "summary.json") << j.dump();
    CHECK_THROWS(harness::read_summary(dir.string()));
    std::ofstream(dir / "summary.json") << result.summary.dump(2) << "\n";
  }
  SECTION("diagnostics CSV carries the documented columns") {
    std::ifstream in(dir / "diagnostics.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "step,t,entry_fraction,mean_newton_dist,mean_newton_dist_se,mean_D,"
          "center_0_tangent_sq,center_1_tangent_sq,center_2_tangent_sq,center_3_tangent_sq,"
          "center_4_tangent_sq,center_5_tangent_sq,center_6_tangent_sq,center_7_tangent_sq,"
          "center_8_tangent_sq,center_9_tangent_sq,center_10_tangent_sq,center_11_tangent_sq,"
          "center_12_tangent_sq,degenerate_fraction,normal_bound_rhs,tangent_bound_rhs");
  }
  SECTION("trajectory CSV columns") {
    std::ifstream in(dir / "trajectories.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "traj_id,step,t,x_0,x_1,failed");
  }
}

TEST_CASE("reruns are byte-identical") {
  auto cfg = small_exact("determinism_a");
  const auto r1 = harness::run(cfg);
  cfg.name = "determinism_b";
  const auto r2 = harness::run(cfg);
  REQUIRE(r1.ok);
  REQUIRE(r2.ok);
  for (const char* f : {"trajectories.csv", "diagnostics.csv", "kde.csv", "mode_counts.csv"}) {
    INFO(f);
    CHECK(slurp(fs::path(r1.dir) / f) == slurp(fs::path(r2.dir) / f));
  }
}

TEST_CASE("tiny rfnn run trains, samples, and diagnoses") {
  auto kv = harness::preset("two_point_w1").to_config();
  kv.set("run.name", "rfnn_tiny");
  kv.set("run.out_dir", (scratch() / "runs").string());
  kv.set("model.p", "64");
  kv.set("model.kt", "8");
  kv.set("train.epochs", "300");
  kv.set("train.log_every", "100");
  kv.set("train.mc_samples", "2");
  kv.set("train.quadrature_nodes", "150");
  kv.set("sample.n_steps", "150");
  kv.set("sample.n_trajectories", "80");
  kv.set("kde.nx", "15");
  kv.set("kde.ny", "15");
  kv.set("diag.window", "20");
  const auto cfg = harness::ExperimentConfig::from_config(kv);
  const auto result = harness::run(cfg);
  REQUIRE(result.ok);
  const fs::path dir = result.dir;
  CHECK(fs::exists(dir / "history.csv"));
  CHECK(fs::exists(dir / "model_rfnn.json"));
  SECTION("history CSV header and loss progress") {
    std::ifstream in(dir / "history.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "epoch,k,dmm_loss,mm_loss,mm_loss_normal,mm_loss_tangent,err_train_total,"
          "err_train_normal,err_train_tangent,stderr_mm_loss,stderr_mm_loss_normal,"
          "stderr_mm_loss_tangent");
    std::vector<double> dmm;
    std::string line;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string cell;
      std::getline(ss, cell, ',');
      std::getline(ss, cell, ',');
      std::getline(ss, cell, ',');
      dmm.push_back(std::stod(cell));
    }
    REQUIRE(dmm.size() >= 3);
    CHECK(dmm.back() < dmm.front());
  }
  SECTION("checkpoint reloads and reproduces the sampler source") {
    const auto model = RfnnModel::load((dir / "model_rfnn.json").string());
    CHECK(model.width() == 64);
    CHECK(model.readout().allFinite());
  }
}

TEST_CASE("tiny mlp run trains through the same pipeline") {
  auto kv = harness::preset("two_point_w1").to_config();
  kv.set("run.name", "mlp_tiny");
  kv.set("run.out_dir", (scratch() / "runs").string());
  kv.set("model.kind", "mlp");
  kv.set("model.hidden", "16");
  kv.set("train.eta", "1e-4");
  kv.set("train.epochs", "60");
  kv.set("train.log_every", "20");
  kv.set("train.mc_samples", "2");
  kv.set("train.quadrature_nodes", "80");
  kv.set("sample.n_steps", "100");
  kv.set("sample.n_trajectories", "40");
  kv.set("kde.nx", "12");
  kv.set("kde.ny", "12");
  kv.set("diag.window", "20");
  const auto cfg = harness::ExperimentConfig::from_config(kv);
  const auto result = harness::run(cfg);
  REQUIRE(result.ok);
  CHECK(fs::exists(fs::path(result.dir) / "history.csv"));
  CHECK(fs::exists(fs::path(result.dir) / "model_mlp.json"));
  CHECK(result.summary["mean_source"] == "mlp");
  CHECK(result.summary["sample"]["status"] == "ok");
}

TEST_CASE("compare runs") {
  auto a = small_exact("cmp_a");
  const auto ra = harness::run(a);
  auto b = small_exact("cmp_b");
  b.seed = 2;
  const auto rb = harness::run(b);
  const std::string report = harness::compare({ra.dir, rb.dir});
  CHECK(report.find("cmp_a") != std::string::npos);
  CHECK(report.find("cmp_b") != std::string::npos);
  SECTION("mismatched datasets are rejected") {
    auto c = small_exact("cmp_c");
    c.points = {{-1.0, 0.0}, {1.0, 0.0}};
    const auto rc = harness::run(c);
    CHECK_THROWS(harness::compare({ra.dir, rc.dir}));
  }
  SECTION("at least two runs required") { CHECK_THROWS(harness::compare({ra.dir})); }
}

TEST_CASE("stage errors are recorded, not thrown") {
  auto cfg = small_exact("bad_data");
  cfg.data_csv = "/nonexistent/file.csv";
  const auto result = harness::run(cfg);
  CHECK_FALSE(result.ok);
  CHECK(result.summary["train"]["status"] == "error");
  CHECK(fs::exists(fs::path(result.dir) / "summary.json"));
}
