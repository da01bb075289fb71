#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cosynorm/io.hpp"
#include "support.hpp"

using namespace cosynorm;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(COSYNORM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("selftest passes") {
  const auto dir = testing::scratch_dir("cli_selftest");
  CHECK(run("selftest", dir / "log") == 0);
  const std::string out = slurp(dir / "log");
  CHECK(out.find("FAIL") == std::string::npos);
  CHECK(out.find("PASS") != std::string::npos);
}

TEST_CASE("unknown flags print usage and exit 2") {
  const auto dir = testing::scratch_dir("cli_usage");
  CHECK(run("train --no-such-flag", dir / "log") == 2);
  CHECK(slurp(dir / "log").find("Usage") != std::string::npos);
  CHECK(run("", dir / "log2") == 2);
}

TEST_CASE("datagen, train and convert from the command line") {
  const auto dir = testing::scratch_dir("cli_e2e");
  const std::string cfg = dump_config(testing::tiny_config());
  write_bytes(std::vector<unsigned char>(cfg.begin(), cfg.end()), dir / "config.json");
  const std::string c = (dir / "config.json").string(), data = (dir / "data").string(),
                    ckpt = (dir / "model.bin").string();

  REQUIRE(run("datagen --config " + c + " --out " + data + " --seed 3", dir / "log1") == 0);
  REQUIRE(run("train --config " + c + " --data " + data + " --out " + ckpt + " --train-steps 3", dir / "log2") == 0);
  CHECK(fs::exists(ckpt + ".json"));

  Rng rng(1, 1);
  write_features(testing::random_tensor_f(rng, 130, 20), dir / "in.bin");
  const std::string io = " --input " + (dir / "in.bin").string() + " --output " + (dir / "out.bin").string();
  REQUIRE(run("convert --checkpoint " + ckpt + " --data " + data + " --speaker spk00 --steps 4 --mode inherit" + io,
              dir / "log3") == 0);
  CHECK(read_features(dir / "out.bin").rows() == 130);
  CHECK(slurp(dir / "out.bin.json").find("\"target_len\": 130") != std::string::npos);

  REQUIRE(run("convert --checkpoint " + ckpt + " --data " + data + " --speaker spk01 --steps 4 --mode fixed --fixed-len 57" + io,
              dir / "log4") == 0);
  CHECK(read_features(dir / "out.bin").rows() == 57);

  CHECK(run("convert --checkpoint " + ckpt + " --data " + data + " --speaker spk00 --mode fixed" + io, dir / "log5") == 1);
  CHECK(run("convert --checkpoint " + ckpt + " --data " + data + " --speaker nobody" + io, dir / "log6") == 1);
  CHECK(run("eval --checkpoint " + ckpt + " --data " + data + " --split test --steps 2 --report " +
                (dir / "report.jsonl").string(), dir / "log7") == 0);
  CHECK(fs::exists(dir / "report.jsonl"));
}

}  // TEST_SUITE
