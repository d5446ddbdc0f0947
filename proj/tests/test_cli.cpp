#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "spurlens/binary_io.hpp"
#include "spurlens/checkpoint.hpp"
#include "spurlens/cli.hpp"
#include "spurlens/data.hpp"
#include "spurlens/error.hpp"

using namespace spurlens;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out, err;
  fs::path dir() const { return out.substr(0, out.find('\n')); }
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "spurlens");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "spurlens_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("parse_config") {
  const Settings s = parse_config("# header\nrho = 0.9\n\n  seed=7   # trailing\nstyle=patch\n");
  CHECK(s.size() == 3);
  CHECK(s.at("rho") == "0.9");
  CHECK(s.at("seed") == "7");
  CHECK(s.at("style") == "patch");
  CHECK(parse_config("a=\n").at("a").empty());
  CHECK_THROWS_AS(parse_config("rho 0.9\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("=3\n"), ConfigError);
}

TEST_CASE("every subcommand is registered") {
  const std::vector<std::string> expected{"gen",  "train", "eval",   "sweep", "sscore", "prune", "finetune",
                                          "dfr",  "mask",  "ablate", "attn",  "embed",  "tsne",  "report"};
  CHECK(cli_commands() == expected);
  for (const auto& c : expected) {
    const auto keys = cli_keys(c);
    CHECK(std::find(keys.begin(), keys.end(), "out") != keys.end());
  }
  CHECK_THROWS_AS(cli_keys("nope"), ConfigError);
}

TEST_CASE("gen is deterministic byte for byte") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const std::vector<std::string> flags{"gen", "--style", "patch", "--rho", "0.95", "--seed", "7", "--n_per_class", "40"};
  auto fa = flags, fb = flags;
  fa.insert(fa.end(), {"--out", a.string()});
  fb.insert(fb.end(), {"--out", b.string()});
  const Outcome ra = cli(fa), rb = cli(fb);
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  CHECK(ra.dir().filename() == rb.dir().filename());
  for (const char* f : {"train.bin", "test.bin", "census.csv", "gen.json", "manifest.json"}) {
    CHECK(read_file_bytes(ra.dir() / f) == read_file_bytes(rb.dir() / f));
  }
  const Dataset d = load_dataset(ra.dir() / "train.bin");
  CHECK(d.census() == std::array<Index, 4>{38, 2, 2, 38});

  const auto manifest = nlohmann::json::parse(read_text_file(ra.dir() / "manifest.json"));
  CHECK(manifest["command"] == "gen");
  CHECK(manifest["seeds"]["seed"] == "7");
  const auto bytes = read_file_bytes(ra.dir() / "train.bin");
  CHECK(manifest["artifacts"]["train.bin"] == hex64(fnv1a64(bytes.data(), bytes.size())));
  CHECK_FALSE(fs::exists(ra.dir() / ".lock"));

  fb.back() = a.string();
  fb.insert(fb.end(), {"--seed", "8"});
  CHECK(cli(fb).dir() != ra.dir());
}

TEST_CASE("config file with flag overrides") {
  const fs::path root = scratch("config");
  write_text_file(root / "gen.cfg", "# small\nn_per_class = 20\nrho=0.5\nseed=3\ntest_per_group=0\n");
  const Outcome r = cli({"gen", "--config", (root / "gen.cfg").string(), "--seed", "4", "--out", root.string()});
  REQUIRE(r.code == 0);
  const auto manifest = nlohmann::json::parse(read_text_file(r.dir() / "manifest.json"));
  CHECK(manifest["config"]["n_per_class"] == "20");
  CHECK(manifest["config"]["seed"] == "4");
  CHECK(load_dataset(r.dir() / "train.bin").census() == std::array<Index, 4>{10, 10, 10, 10});
  CHECK_FALSE(fs::exists(r.dir() / "test.bin"));

  write_text_file(root / "bad.cfg", "rho=0.5\nrhoo=0.4\n");
  const Outcome bad = cli({"gen", "--config", (root / "bad.cfg").string(), "--out", root.string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("unknown key 'rhoo'") != std::string::npos);
  CHECK(bad.err.find("n_per_class, noise, one_sided, out, patch_size, rho, seed") != std::string::npos);
}

TEST_CASE("exit codes") {
  const fs::path root = scratch("codes");
  SUBCASE("unknown flag prints usage") {
    const Outcome r = cli({"gen", "--rhoo", "0.5", "--out", root.string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(r.err.find("--rho") != std::string::npos);
  }
  SUBCASE("missing subcommand") { CHECK(cli({}).code == 1); }
  SUBCASE("bad value") {
    const Outcome r = cli({"gen", "--rho", "abc", "--out", root.string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("rho") != std::string::npos);
  }
  SUBCASE("contract violation") {
    CHECK(cli({"gen", "--rho", "1.5", "--out", root.string()}).code == 1);
    CHECK(cli({"train", "--out", root.string()}).code == 1);
  }
  SUBCASE("missing input file") {
    CHECK(cli({"eval", "--model", (root / "none.ckpt").string(), "--data", (root / "none.bin").string(), "--out",
               root.string()})
              .code == 2);
  }
  SUBCASE("help") {
    const Outcome r = cli({"sscore", "--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("--alpha") != std::string::npos);
  }
}

TEST_CASE("a locked run directory is refused") {
  const fs::path root = scratch("lock");
  const std::vector<std::string> flags{"gen", "--n_per_class", "20", "--rho", "0.5", "--out", root.string()};
  const Outcome first = cli(flags);
  REQUIRE(first.code == 0);
  write_text_file(first.dir() / ".lock", "");
  const Outcome second = cli(flags);
  CHECK(second.code == 1);
  CHECK(second.err.find("locked") != std::string::npos);
  CHECK(fs::exists(first.dir() / ".lock"));
  fs::remove(first.dir() / ".lock");
  CHECK(cli(flags).code == 0);
}

TEST_CASE("sscore writes a report over n samples; report aggregates") {
  const fs::path root = scratch("sscore");
  const Outcome g = cli({"gen", "--n_per_class", "60", "--rho", "0.9", "--test_per_group", "0", "--out", root.string()});
  REQUIRE(g.code == 0);
  save_checkpoint(root / "m.ckpt", Model::build(SmallCnnConfig{}, 5));

  const Outcome s = cli({"sscore", "--model", (root / "m.ckpt").string(), "--data", (g.dir() / "train.bin").string(),
                         "--n", "50", "--alpha", "0.5", "--out", root.string()});
  REQUIRE(s.code == 0);
  const auto j = nlohmann::json::parse(read_text_file(s.dir() / "sscore.json"));
  CHECK(j["n"] == 50);
  CHECK(j["sample_ids"].size() == 50);
  CHECK(j["scores"].size() == 64);
  CHECK(j["schema"] == 1);

  const std::string inputs = g.dir().string() + "," + s.dir().string();
  const Outcome r1 = cli({"report", "--inputs", inputs, "--out", root.string()});
  REQUIRE(r1.code == 0);
  const auto first = read_file_bytes(r1.dir() / "report.json");
  const auto rep = nlohmann::json::parse(std::string(first.begin(), first.end()));
  const auto& runs = rep["runs"];
  CHECK(runs.size() == 2);
  CHECK(runs[s.dir().filename().string()]["command"] == "sscore");
  CHECK(runs[s.dir().filename().string()]["artifacts"]["sscore.json"] == j);
  CHECK(runs[g.dir().filename().string()]["artifacts"].contains("gen.json"));
  const Outcome r2 = cli({"report", "--inputs", inputs, "--out", root.string()});
  REQUIRE(r2.code == 0);
  CHECK(read_file_bytes(r2.dir() / "report.json") == first);
  CHECK(cli({"report", "--inputs", (root / "absent").string(), "--out", root.string()}).code == 2);
}
