#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mmseg_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(MMSEG_CLI_PATH) + " " + args + " > " +
                          (kRoot / "stdout.txt").string() + " 2> " + (kRoot / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};

} // namespace

TEST_CASE_FIXTURE(Fixture, "make-phantom is reproducible") {
  REQUIRE(run("make-phantom --out " + (kRoot / "a").string() + " --seed 5 --cases 2 --shape 12") == 0);
  REQUIRE(run("make-phantom --out " + (kRoot / "b").string() + " --seed 5 --cases 2 --shape 12") == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(kRoot / "a")) {
    CHECK(slurp(e.path()) == slurp(kRoot / "b" / e.path().filename()));
    ++files;
  }
  CHECK(files == 11);
}

TEST_CASE_FIXTURE(Fixture, "analyze-correlation on a noiseless phantom") {
  REQUIRE(run("make-phantom --out " + (kRoot / "clean").string() + " --cases 1 --shape 16 --noise 0") == 0);
  REQUIRE(run("analyze-correlation --data " + (kRoot / "clean").string() + " --out " +
              (kRoot / "corr").string() + " --bins 16") == 0);
  const auto rows = csv_rows(kRoot / "corr" / "pearson.csv");
  REQUIRE(rows.size() == 7);
  CHECK(rows[0][3] == "pearson");
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(std::stod(rows[i][3]) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(fs::exists(kRoot / "corr" / "phantom_000_FLAIR_T1.pgm"));
  CHECK(fs::exists(kRoot / "corr" / "phantom_000_FLAIR_T1.txt"));
}

TEST_CASE_FIXTURE(Fixture, "exit codes") {
  CHECK(run("no-such-command") == 2);
  CHECK(run("train --data") == 2);
  CHECK(run("evaluate --checkpoint " + (kRoot / "missing.ckpt").string() + " --data " +
            (kRoot / "none").string() + " --out " + (kRoot / "o").string()) == 1);
  CHECK(slurp(kRoot / "stderr.txt").find("error:") != std::string::npos);
  CHECK(run("make-phantom --out " + (kRoot / "x").string() + " --cases 0") == 1);
}

TEST_CASE_FIXTURE(Fixture, "train, predict, evaluate, inspect") {
  const auto data = (kRoot / "data").string();
  const auto run_dir = (kRoot / "run").string();
  REQUIRE(run("make-phantom --out " + data + " --cases 4 --shape 32") == 0);
  REQUIRE(run("train --data " + data + " --out " + run_dir +
              " --epochs 2 --lambda 0.2 --pairs 'T2>FLAIR'") == 0);
  for (const char* f : {"config.txt", "history.csv", "best.ckpt", "last.ckpt", "attention.csv"})
    CHECK_MESSAGE(fs::exists(kRoot / "run" / f), f);
  const auto history = csv_rows(kRoot / "run" / "history.csv");
  CHECK(history.size() == 3);
  const auto config = slurp(kRoot / "run" / "config.txt");
  CHECK(config.find("lambda=0.2") != std::string::npos);
  CHECK(config.find("pairs=T2>FLAIR") != std::string::npos);

  const auto ckpt = (kRoot / "run" / "best.ckpt").string();
  REQUIRE(run("predict --checkpoint " + ckpt + " --data " + data + " --out " +
              (kRoot / "pred").string() + " --overlay") == 0);
  CHECK(fs::exists(kRoot / "pred" / "phantom_000_pred.mmsv"));
  CHECK(fs::exists(kRoot / "pred" / "phantom_003_overlay.ppm"));
  CHECK(fs::exists(kRoot / "pred" / "phantom_001_WT.pgm"));

  REQUIRE(run("evaluate --checkpoint " + ckpt + " --data " + data + " --out " +
              (kRoot / "eval").string()) == 0);
  const auto metrics = csv_rows(kRoot / "eval" / "metrics.csv");
  REQUIRE(metrics.size() == 1 + 4 * 3 + 3);
  CHECK(metrics[0] == std::vector<std::string>{"case_id", "region", "dice", "hausdorff_mm"});
  CHECK(metrics.back()[0] == "mean");

  REQUIRE(run("inspect-checkpoint --checkpoint " + ckpt) == 0);
  CHECK(slurp(kRoot / "stdout.txt").find("total:") != std::string::npos);
}
