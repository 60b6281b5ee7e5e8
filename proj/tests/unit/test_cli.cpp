#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path root = fs::temp_directory_path() / "coopdrive_test_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(COOPDRIVE_CLI) + " " + args + " > " + (root / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string dir(const std::string& name) { return (root / name).string(); }

}  // namespace

TEST_CASE("gen-episodes, eval, train, report and replay through the command line") {
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string gen = "gen-episodes --map onramp --count 2 --seed 7 --demand 3500 --duration 90 --penetration 0.3 --out-dir ";

  REQUIRE(run(gen + dir("ep_a")) == 0);
  REQUIRE(run(gen + dir("ep_b")) == 0);
  for (const char* f : {"onramp_3500_000.json", "onramp_3500_001.json", "manifest.json"})
    CHECK(slurp(root / "ep_a" / f) == slurp(root / "ep_b" / f));
  const auto manifest = nlohmann::json::parse(slurp(root / "ep_a" / "manifest.json"));
  CHECK(manifest.at("seeds") == nlohmann::json::array({7, 8}));
  CHECK(manifest.at("outputs").size() == 2);

  fs::create_directories(root / "empty");
  CHECK(run("eval --map onramp --controller nc --episodes " + dir("empty") + " --out-dir " + dir("ev_x")) != 0);
  CHECK(run("eval --map onramp --controller nc --episodes " + dir("missing") + " --out-dir " + dir("ev_x")) != 0);
  CHECK(run("eval --map onramp --controller warp --episodes " + dir("ep_a") + " --out-dir " + dir("ev_x")) != 0);
  CHECK(run("eval --map onramp --controller alinea --episodes " + dir("ep_a") + " --out-dir " + dir("ev_x")) != 0);
  CHECK(run("eval --map onramp --bogus-flag 3") != 0);
  CHECK(run("gen-episodes --map onramp") != 0);
  CHECK(run("gen-episodes --map nowhere --out-dir " + dir("ev_x")) != 0);

  REQUIRE(run("eval --map onramp --controller nc --episodes " + dir("ep_a") + " --out-dir " + dir("nc")) == 0);
  REQUIRE(run("eval --map onramp --controller nc --jobs 2 --episodes " + dir("ep_a") + " --out-dir " + dir("nc2")) == 0);
  for (const char* f : {"report.json", "releases.jsonl", "manifest.json"}) CHECK(slurp(root / "nc" / f) == slurp(root / "nc2" / f));

  const nlohmann::json cfg = {{"map", "onramp"},
                              {"policy", {{"width", 8}, {"ff_width", 12}}},
                              {"train", {{"rollout_length", 30}, {"minibatch", 15}, {"epochs", 1}, {"total_steps", 30}, {"seed", 3}}},
                              {"penetration", 0.3},
                              {"demands", {3500}},
                              {"duration", 60.0},
                              {"pool_size", 4},
                              {"eval_episodes", 0},
                              {"out_dir", dir("run")}};
  std::ofstream(root / "run.json") << cfg.dump(2);
  REQUIRE(run("train --quiet --config " + (root / "run.json").string()) == 0);
  CHECK(fs::exists(root / "run" / "latest.ckpt"));
  CHECK(fs::exists(root / "run" / "train_log.jsonl"));
  CHECK(slurp(root / "run" / "config.json") == cfg.dump(2));

  const std::string ckpt = (root / "run" / "latest.ckpt").string();
  CHECK(run("eval --map lanedrop --controller policy:" + ckpt + " --episodes " + dir("ep_a") + " --out-dir " + dir("ev_x")) != 0);
  REQUIRE(run("eval --map onramp --save-actions --controller policy:" + ckpt + " --episodes " + dir("ep_a") + " --out-dir " +
              dir("pol")) == 0);
  REQUIRE(run("eval --map onramp --save-actions --controller policy:" + ckpt + " --episodes " + dir("ep_a") + " --out-dir " +
              dir("pol2")) == 0);
  CHECK(slurp(root / "pol" / "report.json") == slurp(root / "pol2" / "report.json"));
  CHECK(slurp(root / "pol" / "manifest.json") == slurp(root / "pol2" / "manifest.json"));

  REQUIRE(run("report --eval-dir " + dir("nc") + " " + dir("pol") + " --out-dir " + dir("tables")) == 0);
  const std::string table = slurp(root / "tables" / "throughput_onramp.csv");
  CHECK(table.find("\nNC,") != std::string::npos);
  CHECK(table.find("\nDVC-30-100,") != std::string::npos);

  // Replaying the saved actions reproduces the evaluated releases.
  REQUIRE(run("replay --episode " + (root / "ep_a" / "onramp_3500_000.json").string() + " --actions " +
              (root / "pol" / "actions" / "onramp_3500_000.jsonl").string() + " --checkpoint " + ckpt + " --out " +
              dir("traj.jsonl")) == 0);
  const auto report = nlohmann::json::parse(slurp(root / "pol" / "report.json"));
  std::size_t released0 = 0;
  std::istringstream rel(slurp(root / "pol" / "releases.jsonl"));
  for (std::string line; std::getline(rel, line);)
    released0 += nlohmann::json::parse(line).at("episode") == "onramp_3500_000.json";
  CHECK(slurp(root / "last.log").find("released " + std::to_string(released0) + " of") != std::string::npos);
  CHECK(fs::file_size(root / "traj.jsonl") > 0);
  fs::remove_all(root);
}
