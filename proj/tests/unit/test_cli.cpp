#include "doctest.h"

#include "cli.hpp"
#include "run_config.hpp"

#include "limcast/binary_io.hpp"
#include "limcast/error.hpp"
#include "limcast/lim.hpp"
#include "limcast/synth.hpp"

#include "json.hpp"

#include <Eigen/SVD>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace limcast;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("limcast_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const std::vector<std::string> kTinyTrain = {
    "--epochs",         "2",    "--set", "train.hidden=8",       "--set", "train.layers=1",
    "--set",            "train.samples_per_epoch=64",            "--set", "train.val_samples=32",
    "--set",            "train.horizon=12",                      "--set", "train.members=4",
    "--set",            "train.t_hist=4"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("run config layering") {
    cli::RunConfig cfg;
    CHECK(cfg.train().epochs == hybrid::TrainConfig{}.epochs);
    cfg.set("train.epochs", "7");
    CHECK(cfg.train().epochs == 7);
    cfg.set("lim.kind", "stationary");
    CHECK(cfg.tree()["lim"]["kind"] == "stationary");
    cfg.set("prepare.n_keep", "[3,2]");
    CHECK(cfg.n_keep() == std::vector<int>{3, 2});

    CHECK_THROWS_AS(cfg.set("train.nope", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.set("train.epochs", "1.5"), ConfigError);
    CHECK_THROWS_AS(cfg.set("lim.kind", "3"), ConfigError);
    CHECK(cfg.train().epochs == 7);  // failed overrides leave the config unchanged

    cfg.set("train.lr_max", "1");  // integer into a float slot is fine
    CHECK(cfg.train().lr_max == 1.0);
    cfg.set("train.batch", "0");
    CHECK_THROWS_AS(cfg.train(), ConfigError);

    TempDir dir("config");
    std::ofstream(dir.path / "c.json") << R"({"synth": {"d": 4, "years": 120}, "seed": 9})";
    cli::RunConfig from_file;
    from_file.merge_file(dir.path / "c.json");
    CHECK(from_file.record().d == 4);
    CHECK(from_file.record().years == 120);
    CHECK(from_file.seed() == 9);
    std::ofstream(dir.path / "bad.json") << "{not json";
    CHECK_THROWS_AS(from_file.merge_file(dir.path / "bad.json"), ConfigError);
  }

  TEST_CASE("exit codes") {
    TempDir dir("codes");
    const auto ws = dir.path.string();
    CHECK(run({}).code == cli::config_error);
    CHECK(run({"--out-dir", ws, "no-such-command"}).code == cli::config_error);
    CHECK(run({"--out-dir", ws, "prepare"}).code == cli::config_error);  // no input
    CHECK(run({"--out-dir", ws, "--set", "train.nope=1", "fit-lim"}).code == cli::config_error);
    CHECK(run({"--out-dir", ws, "fit-lim"}).code == cli::data_error);  // nothing prepared
    std::ofstream(dir.path / "junk.limg") << "junk";
    const auto r = run({"--out-dir", ws, "prepare", "--input", (dir.path / "junk.limg").string()});
    CHECK(r.code == cli::data_error);
    CHECK(!r.err.empty());
    CHECK(run({"--out-dir", ws, "--help"}).code == cli::ok);
  }

  TEST_CASE("pipeline on a small synthetic record") {
    const auto start = std::chrono::steady_clock::now();
    TempDir dir("pipeline");
    const auto ws = (dir.path / "ws").string();
    const std::vector<std::string> base = {"--out-dir", ws, "--set", "synth.d=6", "--set", "prepare.n_keep=[4,2]"};

    REQUIRE(run(cat(base, {"synth-gen", "--years", "200"})).code == cli::ok);
    const auto observed = (dir.path / "ws" / "observed.limg").string();
    REQUIRE(run(cat(base, {"prepare", "--input", observed})).code == cli::ok);
    CHECK(fs::exists(dir.path / "ws" / "resolved_config.json"));
    const auto resolved = json::parse(slurp(dir.path / "ws" / "resolved_config.json"));
    CHECK(resolved["prepare"]["n_keep"] == json::array({4, 2}));

    SUBCASE("prepare is reproducible") {
      const auto again = (dir.path / "again").string();
      REQUIRE(run({"--out-dir", again, "--set", "prepare.n_keep=[4,2]", "prepare", "--input", observed}).code == cli::ok);
      for (const char* f : {"anomalies.limg", "basis.eofb", "climatology.bin", "pcs_train.bin", "pcs_test.bin", "split.json"})
        CHECK(slurp(dir.path / "ws" / f) == slurp(dir.path / "again" / f));
    }

    const auto truth_json = (dir.path / "ws" / "synth_system.json").string();
    const auto truth_pcs = (dir.path / "ws" / "truth_pcs.bin").string();
    REQUIRE(run(cat(base, {"fit-lim", "--truth", truth_json, "--pcs", truth_pcs, "--clip-radius", "0.99"})).code == cli::ok);
    const auto report = json::parse(slurp(dir.path / "ws" / "fit_report.json"));
    CHECK(report["regimes"].size() == 12);
    for (const auto& m : report["regimes"]) CHECK(m["max_abs_eig_g"].get<double>() < 1.0);
    {
      // Recovery error recomputed from the written operator and 16 explicit Euler steps.
      const auto op = lim::LimOperator::from_section(io::find_section(io::read_sections(dir.path / "ws" / "lim.limo"), "LIMO"));
      std::ifstream in(dir.path / "ws" / "synth_system.json");
      std::ostringstream os;
      os << in.rdbuf();
      const auto sys = synth::from_json(os.str());
      double err = 0.0;
      for (int m = 1; m <= 12; ++m) {
        Eigen::MatrixXd g_true = Eigen::MatrixXd::Identity(6, 6);
        const Eigen::MatrixXd step = Eigen::MatrixXd::Identity(6, 6) + sys.l_month(m) / 16.0;
        for (int k = 0; k < 16; ++k) g_true = step * g_true;
        err = std::max(err, (op.month_propagator(m) - g_true).norm() / g_true.norm());
      }
      CHECK(report["recovery_max_rel_error"].get<double>() == doctest::Approx(err).epsilon(1e-9));
    }
    REQUIRE(run(cat(base, {"fit-lim", "--truth", truth_json})).code == cli::ok);
    CHECK(json::parse(slurp(dir.path / "ws" / "fit_report.json"))["recovery_max_rel_error"].get<double>() < 1.0);

    REQUIRE(run(cat(cat(base, {"train"}), kTinyTrain)).code == cli::ok);
    CHECK(fs::exists(dir.path / "ws" / "hybrid_seed0.ckpt"));
    CHECK(slurp(dir.path / "ws" / "history_hybrid_seed0.csv").rfind("epoch,", 0) == 0);

    const auto ckpt = (dir.path / "ws" / "hybrid_seed0.ckpt").string();
    REQUIRE(run(cat(base, {"forecast", "--checkpoint", ckpt})).code == cli::ok);
    REQUIRE(run(cat(base, {"--set", "forecast.horizon=12", "forecast"})).code == cli::ok);
    const auto fc = dir.path / "ws" / "forecast_hybrid_test.csv";
    CHECK(slurp(fc).rfind("init_time,member,lead,pc_index,value\n", 0) == 0);

    const auto ev = run(cat(base, {"--set", "evaluate.leads=[1,6,12]", "--set", "evaluate.n_boot=50", "evaluate",
                                   "--forecasts", fc.string()}));
    REQUIRE(ev.code == cli::ok);
    const auto lead_csv = slurp(dir.path / "ws" / "skill_lead.csv");
    CHECK(lead_csv.rfind("metric,reference,lead,value,p_value\n", 0) == 0);
    CHECK(lead_csv.find("acc,climatology,12,") != std::string::npos);
    CHECK(fs::exists(dir.path / "ws" / "skill_map.csv"));
    CHECK(fs::exists(dir.path / "ws" / "skill_seasonal.csv"));
    CHECK(fs::exists(dir.path / "ws" / "significance_mask.limg"));

    const auto oic = run(cat(base, {"--set", "oic.all_months=true", "oic", "--checkpoint", ckpt}));
    REQUIRE(oic.code == cli::ok);
    const auto oj = json::parse(slurp(dir.path / "ws" / "oic.json"));
    CHECK(oj["sigma1"].get<double>() == doctest::Approx(oj["sigma1_svd"].get<double>()).epsilon(1e-8));
    CHECK(slurp(dir.path / "ws" / "fig6_oic_bands.csv").rfind("band_lo,band_hi,n,acc_lim,acc_hybrid\n", 0) == 0);

    REQUIRE(run(cat(base, {"--set", "composites.band_lower=50", "composites", "--checkpoint", ckpt})).code == cli::ok);
    CHECK(slurp(dir.path / "ws" / "fig7_composites.csv").find("\nhybrid,") != std::string::npos);

    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(seconds < 60.0);
  }

  TEST_CASE("pc-lstm through the cli") {
    TempDir dir("pclstm");
    const auto ws = (dir.path / "ws").string();
    const std::vector<std::string> base = {"--out-dir", ws, "--set", "synth.d=4", "--set", "prepare.n_keep=[2,2]"};
    REQUIRE(run(cat(base, {"synth-gen", "--years", "150"})).code == cli::ok);
    REQUIRE(run(cat(base, {"prepare", "--input", (dir.path / "ws" / "observed.limg").string()})).code == cli::ok);
    REQUIRE(run(cat(cat(base, {"train", "--model", "pc-lstm", "--seeds", "2"}), kTinyTrain)).code == cli::ok);
    CHECK(fs::exists(dir.path / "ws" / "pclstm_seed0.ckpt"));
    CHECK(fs::exists(dir.path / "ws" / "pclstm_seed1.ckpt"));
    REQUIRE(run(cat(base, {"forecast", "--checkpoint", (dir.path / "ws" / "pclstm_seed1.ckpt").string()})).code == cli::ok);
    CHECK(fs::exists(dir.path / "ws" / "forecast_pc-lstm_test.csv"));
  }
}
