#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "kforge/checkpoint.hpp"
#include "kforge/commands.hpp"
#include "support.hpp"

using namespace kforge;

namespace {

RunConfig tiny_config(const std::string& name) {
  RunConfig c;
  c.seed = 3;
  c.output_dir = kforge::testing::scratch_dir(name).string();
  c.data.window_length = 256;
  c.data.windows_per_recording = 12;
  c.data.noise_sigma = 0.05;
  c.structure.num_blocks = 1;
  c.structure.layers_per_block = 2;
  c.structure.base_channels = 4;
  c.search.epochs = 2;
  c.search.controller_steps = 2;
  c.search.archs_per_step = 4;
  c.search.final_samples = 4;
  c.search.batch_size = 32;
  c.search.reward_batch_size = 32;
  c.search.trend_samples = 3;
  c.search.scratch_epochs = 2;
  return c;
}

struct Captured {
  int code;
  std::string out;
  std::string log;
};

template <typename Fn>
Captured capture(Fn&& fn) {
  std::ostringstream out, log;
  const int code = fn(CommandIo{out, log});
  return {code, out.str(), log.str()};
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string value_of(const std::string& out, const std::string& key) {
  std::istringstream in(out);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  return {};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

// Metrics rows: epoch as an integer, then six plain decimal numbers, no trailing comma.
bool strict_metrics_row(const std::string& line) {
  static const std::regex row(R"(\d+(,-?\d+\.\d+){6})");
  return std::regex_match(line, row);
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults") {
    const RunConfig c;
    CHECK(c.search.batch_size == 128);
    CHECK(c.search.epochs == 200);
    CHECK(c.search.controller_steps == 5);
    CHECK(c.search.archs_per_step == 20);
    CHECK(c.search.final_samples == 100);
    CHECK(c.search.trend_samples == 50);
    CHECK(c.structure.base_channels == 8);
    CHECK(c.search.child_lr == 1e-3);
    CHECK(c.controller.lr == 0.01);
    CHECK(c.structure.num_blocks == 4);
    CHECK(c.data.window_length == 1000);
    CHECK(c.data.window_step == 50);
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("text round trip") {
    RunConfig c = tiny_config("config-roundtrip");
    c.controller.lr = 0.123456789;
    c.data.split_mode = "group";
    c.search.reward_full_validation = true;
    const RunConfig back = RunConfig::parse(c.to_text());
    CHECK(back == c);
    CHECK(back.controller.lr == 0.123456789);
    CHECK(back.search.reward_full_validation);
  }

  TEST_CASE("comments, spacing and partial files") {
    const RunConfig c = RunConfig::parse("# run\n[search-engine]\n  epochs=7   # short\n\n[cli]\nseed = 11\n");
    CHECK(c.search.epochs == 7);
    CHECK(c.seed == 11);
    CHECK(c.search.batch_size == 128);
  }

  TEST_CASE("bad input names the line") {
    const auto message = [](const std::string& text) {
      try {
        RunConfig::parse(text, "x.ini");
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string("no error");
    };
    CHECK(message("[cli]\nseed = 1\nspeed = 2\n").rfind("x.ini:3:", 0) == 0);
    CHECK(message("[nowhere]\n").rfind("x.ini:1:", 0) == 0);
    CHECK(message("[search-engine]\nepochs = many\n").rfind("x.ini:2:", 0) == 0);
    CHECK(message("seed = 1\n").rfind("x.ini:1:", 0) == 0);
    CHECK(message("[cli]\nseed\n").rfind("x.ini:2:", 0) == 0);
  }

  TEST_CASE("validation") {
    RunConfig c;
    c.data.train_ratio = 0.9;
    CHECK_THROWS(c.validate());
    c = RunConfig{};
    c.data.split_mode = "sideways";
    CHECK_THROWS(c.validate());
    c = RunConfig{};
    c.search.batch_size = 0;
    CHECK_THROWS(c.validate());
  }

  TEST_CASE("written config rereads identically") {
    const RunConfig c = tiny_config("config-file");
    c.save(c.out_path("saved.ini"));
    CHECK(RunConfig::load(c.out_path("saved.ini")) == c);
  }
}

TEST_SUITE("architecture names") {
  TEST_CASE("presets are the uniform architectures") {
    CHECK(resolve_architecture("M1", 8) == resolve_architecture("0 0 0 0 0 0 0 0", 8));
    CHECK(resolve_architecture("M6", 8) == Architecture::uniform(5, 8));
    CHECK(resolve_architecture("M3", 4) == Architecture{{2, 2, 2, 2}});
  }

  TEST_CASE("invalid token strings") {
    CHECK_THROWS(resolve_architecture("9 0 0 0 0 0 0 0", 8));
    CHECK_THROWS(resolve_architecture("0 0 0", 8));
    CHECK_THROWS(resolve_architecture("M7", 8));
    CHECK_THROWS(resolve_architecture("a b", 2));
  }
}

TEST_SUITE("commands") {
  TEST_CASE("gen-data is byte-identical per seed and covers every class") {
    RunConfig a = tiny_config("gen-a"), b = tiny_config("gen-b");
    const Captured ra = capture([&](CommandIo io) { return cmd_gen_data(a, io); });
    const Captured rb = capture([&](CommandIo io) { return cmd_gen_data(b, io); });
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(read_text(a.cache_path()) == read_text(b.cache_path()));
    CHECK(ra.out == rb.out);
    const DatasetSplits d = load_dataset(a);
    CHECK(ra.out == "train " + std::to_string(d.train.size()) + "\nval " + std::to_string(d.val.size()) + "\ntest " +
                        std::to_string(d.test.size()) + "\n");
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
      for (std::size_t n : d.get(s).class_counts(6)) CHECK(n > 0);

    RunConfig c = tiny_config("gen-c");
    c.seed = 4;
    capture([&](CommandIo io) { return cmd_gen_data(c, io); });
    CHECK(read_text(c.cache_path()) != read_text(a.cache_path()));
  }

  TEST_CASE("search smoke run emits consistent artifacts") {
    RunConfig c = tiny_config("search");
    c.structure.num_blocks = 2;
    REQUIRE(capture([&](CommandIo io) { return cmd_gen_data(c, io); }).code == 0);
    const Captured r = capture([&](CommandIo io) { return cmd_search(c, io); });
    INFO(r.log);
    REQUIRE(r.code == 0);
    for (const char* name : {"metrics.csv", "derivation.json", "search.kf", "model.kf", "config.ini"})
      CHECK(std::filesystem::exists(c.out_path(name)));

    const auto rows = lines_of(read_text(c.out_path("metrics.csv")));
    REQUIRE(rows.size() == c.search.epochs + 1);
    CHECK(rows[0] == "epoch,mean_acc,max_acc,min_acc,baseline,ctrl_loss,seconds");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(strict_metrics_row(rows[i]));
      CHECK(rows[i].rfind(std::to_string(i) + ",", 0) == 0);
    }

    const auto report = nlohmann::json::parse(read_text(c.out_path("derivation.json")));
    REQUIRE(report["samples"].size() == c.search.final_samples);
    double best = -1.0;
    for (const auto& s : report["samples"]) best = std::max(best, s["reward"].get<double>());
    CHECK(report["winner"]["reward"].get<double>() == best);
    CHECK(value_of(r.out, "derived_arch") == report["winner"]["arch"].get<std::string>());
    CHECK(RunConfig::load(c.out_path("config.ini")) == c);
    CHECK(Checkpoint::load(c.out_path("model.kf")).names().size() > 0);
  }

  TEST_CASE("train is deterministic and eval agrees with it") {
    RunConfig c = tiny_config("train");
    REQUIRE(capture([&](CommandIo io) { return cmd_gen_data(c, io); }).code == 0);
    const Captured first = capture([&](CommandIo io) { return cmd_train(c, "M3", io); });
    REQUIRE(first.code == 0);
    const std::string first_model = read_text(c.out_path("trained.kf"));
    const Captured second = capture([&](CommandIo io) { return cmd_train(c, "2 2", io); });
    REQUIRE(second.code == 0);
    CHECK(first.out == second.out);
    CHECK(read_text(c.out_path("trained.kf")) == first_model);
    CHECK(value_of(first.out, "arch") == "2 2");

    const double reported = std::stod(value_of(first.out, "train_accuracy"));
    const Captured on_train = capture([&](CommandIo io) { return cmd_eval(c, c.out_path("trained.kf"), Split::kTrain, io); });
    REQUIRE(on_train.code == 0);
    CHECK(std::regex_match(on_train.out, std::regex(R"([01]\.\d{4}\n)")));
    CHECK(std::stod(on_train.out) >= reported - 0.01);

    const Captured t1 = capture([&](CommandIo io) { return cmd_eval(c, c.out_path("trained.kf"), Split::kTest, io); });
    const Captured t2 = capture([&](CommandIo io) { return cmd_eval(c, c.out_path("trained.kf"), Split::kTest, io); });
    CHECK(t1.out == t2.out);
    CHECK(t1.out == value_of(first.out, "test_accuracy") + "\n");
  }

  TEST_CASE("eval failures exit nonzero") {
    RunConfig c = tiny_config("eval-bad");
    REQUIRE(capture([&](CommandIo io) { return cmd_gen_data(c, io); }).code == 0);
    REQUIRE(capture([&](CommandIo io) { return cmd_train(c, "M1", io); }).code == 0);
    std::string bytes = read_text(c.out_path("trained.kf"));
    bytes[0] = 'J';
    std::ofstream(c.out_path("broken.kf"), std::ios::binary) << bytes;
    const Captured broken = capture([&](CommandIo io) { return cmd_eval(c, c.out_path("broken.kf"), Split::kTest, io); });
    CHECK(broken.code != 0);
    CHECK(broken.out.empty());
    CHECK(broken.log.find("error:") != std::string::npos);
    CHECK(capture([&](CommandIo io) { return cmd_eval(c, c.out_path("none.kf"), Split::kTest, io); }).code != 0);

    // A cache with longer windows than the checkpoint was trained on.
    RunConfig other = tiny_config("eval-other");
    other.data.window_length = 300;
    REQUIRE(capture([&](CommandIo io) { return cmd_gen_data(other, io); }).code == 0);
    const Captured mismatch = capture([&](CommandIo io) { return cmd_eval(other, c.out_path("trained.kf"), Split::kTest, io); });
    CHECK(mismatch.code != 0);
    CHECK(mismatch.log.find("length") != std::string::npos);
  }

  TEST_CASE("commands need the dataset cache") {
    RunConfig c = tiny_config("no-cache");
    CHECK(capture([&](CommandIo io) { return cmd_search(c, io); }).code != 0);
    CHECK(capture([&](CommandIo io) { return cmd_train(c, "M1", io); }).code != 0);
    CHECK(capture([&](CommandIo io) { return cmd_train(c, "7 7", io); }).code != 0);
  }

  TEST_CASE("compare emits the eight-row table") {
    RunConfig c = tiny_config("compare");
    c.search.scratch_epochs = 1;
    REQUIRE(capture([&](CommandIo io) { return cmd_gen_data(c, io); }).code == 0);
    const Captured r = capture([&](CommandIo io) { return cmd_compare(c, io); });
    INFO(r.log);
    REQUIRE(r.code == 0);
    const std::string table = read_text(c.out_path("comparison.csv"));
    CHECK(r.out == table);
    const auto rows = lines_of(table);
    REQUIRE(rows.size() == 9);
    CHECK(rows[0] == kComparisonHeader);
    const std::regex row(R"(([A-Za-z0-9-]+),((?:[0-5] )*[0-5]),(\d{1,3}\.\d{2}))");
    const char* models[] = {"M1", "M2", "M3", "M4", "M5", "M6", "searched", "random-search"};
    for (std::size_t i = 0; i < 8; ++i) {
      std::smatch m;
      REQUIRE(std::regex_match(rows[i + 1], m, row));
      CHECK(m[1].str() == models[i]);
      const double pct = std::stod(m[3].str());
      CHECK(pct >= 0.0);
      CHECK(pct <= 100.0);
      if (i < 6) CHECK(m[2].str() == Architecture::uniform(i, 2).to_string());
    }
  }
}

TEST_CASE("the executable parses flags and reports errors") {
  const auto dir = kforge::testing::scratch_dir("binary");
  RunConfig c = tiny_config("binary");
  c.save(dir / "run.ini");
  const std::string exe = KFORGE_CLI_PATH;
  const auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + exe + "\" " + args + " > \"" + (dir / "stdout.txt").string() + "\" 2> \"" +
                            (dir / "stderr.txt").string() + "\"";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(run("gen-data --config \"" + (dir / "run.ini").string() + "\" --seed 5") == 0);
  CHECK(lines_of(read_text(dir / "stdout.txt")).size() == 3);
  CHECK(run("eval --config \"" + (dir / "run.ini").string() + "\" --checkpoint \"" + (dir / "nothing.kf").string() +
            "\"") != 0);
  CHECK(read_text(dir / "stderr.txt").find("error:") != std::string::npos);
  CHECK(run("train") != 0);
  CHECK(run("eval --checkpoint x --split sideways") != 0);
  CHECK(run("") != 0);
}
