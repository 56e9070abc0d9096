#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "nemf/cli.hpp"
#include "nemf/config.hpp"
#include "nemf/error.hpp"
#include "nemf/inference.hpp"
#include "test_support.hpp"

namespace nemf {
namespace {

namespace fs = std::filesystem;
using testing::read_bytes;
using testing::temp_dir;

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nemf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Small enough that a few optimizer steps take well under a second.
fs::path tiny_config(const fs::path& dir) {
  std::ofstream out(dir / "tiny.cfg");
  out << "# tiny model\n"
         "hidden=16\nchannels=4\nheads=2\nblocks=2\ngrid_rows=4\ngrid_cols=4\nffn_hidden=8\n"
         "conv_channels=2\ndescriptor_dim=16\npe_octaves=4\nsamples=8\nsynthetic_keypoints=4\n"
         "\nsteps=3\nlearning_rate=1e-3\n";
  return dir / "tiny.cfg";
}

TEST(Config, DefaultsAndOverrides) {
  Config cfg;
  EXPECT_EQ(cfg.get_size("samples"), 50u);
  EXPECT_DOUBLE_EQ(cfg.get_double("tau"), 0.07);
  cfg.apply_override(" rounds = 3 ");
  EXPECT_EQ(cfg.inference().rounds, 3u);
  EXPECT_NE(cfg.dump().find("rounds=3\n"), std::string::npos);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  Config cfg;
  auto code = [&](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kInvalidArgument;
  };
  EXPECT_EQ(code([&] { cfg.set("learnign_rate", "1"); }), ErrorCode::kConfig);
  EXPECT_EQ(code([&] { cfg.apply_override("steps"); }), ErrorCode::kConfig);
  cfg.set("steps", "-4");
  EXPECT_EQ(code([&] { cfg.loss(); }), ErrorCode::kConfig);
  cfg.set("steps", "4");
  cfg.set("neighborhood", "6");
  EXPECT_EQ(code([&] { cfg.inference(); }), ErrorCode::kConfig);
  cfg.set("channels", "5");
  EXPECT_EQ(code([&] { cfg.model(); }), ErrorCode::kConfig);
}

TEST(Config, FileErrorsNameTheLine) {
  const auto dir = temp_dir("cfg_file");
  {
    std::ofstream out(dir / "bad.cfg");
    out << "# ok\nsteps=2\n\nbogus=1\n";
  }
  Config cfg;
  try {
    cfg.load_file(dir / "bad.cfg");
    ADD_FAILURE() << "unknown key accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.cfg:4"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Cli, UsageErrorsExitWithTwo) {
  const auto dir = temp_dir("cli_usage");
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run_cli({}), cli::kExitUsage);
  EXPECT_EQ(run_cli({"train", "-o", dir.string()}), cli::kExitUsage);
  EXPECT_EQ(run_cli({"train", "--synthetic", "1", "--set", "nonsense=1", "-o", dir.string()}), cli::kExitUsage);
  EXPECT_EQ(run_cli({"infer", "-m", (dir / "none.nmfw").string(), "--source", "a.png", "--target", "b.png"}),
            cli::kExitUsage);
  EXPECT_EQ(run_cli({"train", "--data", (dir / "missing.jsonl").string(), "-o", dir.string()}), cli::kExitUsage);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("checkpoint not found"), std::string::npos) << err;
  EXPECT_NE(err.find("nonsense"), std::string::npos) << err;
}

TEST(Cli, NonFiniteLossExitsWithThree) {
  const auto dir = temp_dir("cli_nan");
  ::testing::internal::CaptureStderr();
  const int code = run_cli({"train", "--synthetic", "1", "-c", tiny_config(dir).string(), "--set",
                            "tau_softargmax=1e-310", "-o", (dir / "out").string()});
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, cli::kExitNumerical);
  EXPECT_NE(err.find("non-finite"), std::string::npos) << err;
}

TEST(Cli, TrainingIsReproducible) {
  const auto dir = temp_dir("cli_repro");
  const auto cfg = tiny_config(dir);
  for (const char* run : {"a", "b"}) {
    ::testing::internal::CaptureStdout();
    ::testing::internal::CaptureStderr();
    const int code =
        run_cli({"train", "--synthetic", "2", "-c", cfg.string(), "--seed", "5", "-o", (dir / run).string()});
    ::testing::internal::GetCapturedStdout();
    ::testing::internal::GetCapturedStderr();
    ASSERT_EQ(code, cli::kExitOk);
  }
  EXPECT_EQ(read_bytes(dir / "a" / "model.nmfw"), read_bytes(dir / "b" / "model.nmfw"));
  EXPECT_EQ(slurp(dir / "a" / "loss.csv"), slurp(dir / "b" / "loss.csv"));
  const std::string effective = slurp(dir / "a" / "train.effective.cfg");
  EXPECT_NE(effective.find("seed=5\n"), std::string::npos);
  EXPECT_NE(effective.find("hidden=16\n"), std::string::npos);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir = new fs::path(temp_dir("cli_pipeline"));
    const auto cfg = tiny_config(*dir);
    ::testing::internal::CaptureStdout();
    ::testing::internal::CaptureStderr();
    codes[0] = run_cli({"gen-synthetic", "--count", "2", "--warp", "affine", "-c", cfg.string(), "-o",
                        (*dir / "data").string()});
    codes[1] = run_cli({"train", "--data", (*dir / "data" / "annotations.jsonl").string(), "-c", cfg.string(), "-o",
                        (*dir / "model").string()});
    ::testing::internal::GetCapturedStdout();
    ::testing::internal::GetCapturedStderr();
  }
  static void TearDownTestSuite() { delete dir; }

  static int infer(const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args = {"infer",  "-m",         (*dir / "model" / "model.nmfw").string(),
                                     "--data", (*dir / "data" / "annotations.jsonl").string(),
                                     "-c",     (*dir / "tiny.cfg").string(),
                                     "-o",     (*dir / out).string(),
                                     "--lattice", "8"};
    args.insert(args.end(), extra.begin(), extra.end());
    ::testing::internal::CaptureStdout();
    ::testing::internal::CaptureStderr();
    const int code = run_cli(args);
    ::testing::internal::GetCapturedStdout();
    ::testing::internal::GetCapturedStderr();
    return code;
  }

  static fs::path* dir;
  static int codes[2];
};

fs::path* CliPipeline::dir = nullptr;
int CliPipeline::codes[2] = {-1, -1};

TEST_F(CliPipeline, GeneratesDataAndTrains) {
  EXPECT_EQ(codes[0], cli::kExitOk);
  EXPECT_EQ(codes[1], cli::kExitOk);
  EXPECT_TRUE(fs::exists(*dir / "data" / "pair_0001_tgt.png"));
  EXPECT_TRUE(fs::exists(*dir / "data" / "pair_0000_flow.nmff"));
  EXPECT_TRUE(fs::exists(*dir / "model" / "model.nmfw.cfg"));
  const auto flow = read_flow(*dir / "data" / "pair_0000_flow.nmff");
  EXPECT_EQ(flow.targets.size(), 32u * 32u);
}

TEST_F(CliPipeline, ExhaustiveInferenceThenEval) {
  ASSERT_EQ(infer("exh", {"--strategy", "exhaustive"}), cli::kExitOk);
  EXPECT_TRUE(fs::exists(*dir / "exh" / "flow_0001.nmff"));
  const auto flow = read_flow(*dir / "exh" / "flow_0000.nmff");
  EXPECT_EQ(flow.targets.size(), 64u);
  // exhaustive results sit on target lattice nodes
  for (const auto& t : flow.targets) {
    const double step = 31.0 / 7.0;
    EXPECT_NEAR(t.row / step, std::round(t.row / step), 1e-5);  // stored as float32
  }
  const std::string report = slurp(*dir / "exh" / "infer_report.csv");
  EXPECT_EQ(report.rfind("pair,strategy,batch_size", 0), 0u);

  ::testing::internal::CaptureStdout();
  const int code = run_cli({"eval", "--predictions", (*dir / "exh" / "predictions.jsonl").string(), "--annotations",
                            (*dir / "data" / "annotations.jsonl").string(), "-o", (*dir / "eval").string()});
  const std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(code, cli::kExitOk);
  EXPECT_NE(out.find("alpha_pck"), std::string::npos);
  std::istringstream csv(slurp(*dir / "eval" / "pck.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "alpha_pck,pck,correct,total");
  std::size_t rows = 0;
  double last = -1.0;
  while (std::getline(csv, line)) {
    ++rows;
    std::istringstream fields(line);
    std::string alpha, value;
    std::getline(fields, alpha, ',');
    std::getline(fields, value, ',');
    EXPECT_GE(std::stod(value), last);
    last = std::stod(value);
  }
  EXPECT_EQ(rows, 5u);
}

TEST_F(CliPipeline, BatchSizeDoesNotChangeTheFlow) {
  ASSERT_EQ(infer("b100", {"--batch-size", "100", "--rounds", "2"}), cli::kExitOk);
  ASSERT_EQ(infer("b10000", {"--batch-size", "10000", "--rounds", "2", "--threads", "2"}), cli::kExitOk);
  for (const char* f : {"flow_0000.nmff", "flow_0001.nmff"}) {
    EXPECT_EQ(read_bytes(*dir / "b100" / f), read_bytes(*dir / "b10000" / f)) << f;
  }
  EXPECT_EQ(slurp(*dir / "b100" / "predictions.jsonl"), slurp(*dir / "b10000" / "predictions.jsonl"));
}

TEST_F(CliPipeline, ExportsAFieldSlice) {
  ::testing::internal::CaptureStdout();
  const int code =
      run_cli({"export-field", "-m", (*dir / "model" / "model.nmfw").string(), "--source",
               (*dir / "data" / "pair_0000_src.png").string(), "--target", (*dir / "data" / "pair_0000_tgt.png").string(),
               "--keypoint", "10,12", "--resolution", "6", "--smoothing", "1", "-o", (*dir / "slice").string()});
  ::testing::internal::GetCapturedStdout();
  ASSERT_EQ(code, cli::kExitOk);
  const std::string csv = slurp(*dir / "slice" / "field_slice.csv");
  EXPECT_EQ(csv.rfind("# smoothing_radius=1\nrow,col,score\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2 + 36);

  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run_cli({"export-field", "-m", (*dir / "model" / "model.nmfw").string(), "--source",
                     (*dir / "data" / "pair_0000_src.png").string(), "--target",
                     (*dir / "data" / "pair_0000_tgt.png").string(), "--keypoint", "40,2", "-o",
                     (*dir / "slice").string()}),
            cli::kExitUsage);
  ::testing::internal::GetCapturedStderr();
}

}  // namespace
}  // namespace nemf
