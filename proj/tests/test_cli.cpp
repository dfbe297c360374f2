#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "mue/mue.hpp"

using namespace mue;
namespace fs = std::filesystem;

namespace {

struct CommandResult {
  int status = -1;
  std::string out;
};

CommandResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MUE_CLI_PATH) + " " + args + " 2>/dev/null";
  CommandResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mue_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::create_directories(dir_);
    config_ = dir_ / "run.cfg";
    write_text(config_, "# small model\n"
                        "model.n_enc_layers = 2\nmodel.n_dec_layers = 2\nmodel.d_model = 16\n"
                        "model.n_heads = 2\nmodel.ffn_dim = 16\nmodel.max_gen_len = 6\n"
                        "train.steps = 3\ntrain.batch_size = 4\ntrain.learning_rate = 0.001\n"
                        "data.task = caption\ndata.seed = 5\ndata.count = 12\n"
                        "data.path = " + (dir_ / "data.txt").string() + "\n"
                        "output.checkpoint = " + (dir_ / "model.ckpt").string() + "\n"
                        "output.loss_csv = " + (dir_ / "loss.csv").string() + "\n"
                        "output.bench_csv = " + (dir_ / "bench.csv").string() + "\n"
                        "output.profile_csv = " + (dir_ / "profile.csv").string() + "\n");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string cli(const std::string& sub, const std::string& extra = "") const {
    return sub + " --config " + config_.string() + " " + extra;
  }

  fs::path dir_, config_;
};

std::string small_config_text() {
  return "model.n_enc_layers = 2\nmodel.n_dec_layers = 2\nmodel.d_model = 16\nmodel.n_heads = 2\n"
         "model.ffn_dim = 16\n";
}

ModelConfig small_model_config() { return load_run_config(small_config_text()).model; }

}  // namespace

// --- configuration ------------------------------------------------------------

TEST(Config, ParsesValuesCommentsAndWhitespace) {
  const RunConfig cfg = load_run_config("  exit.kind = decay  # schedule\n\nexit.theta=0.97\n"
                                        "output.theta_grid = 0.5, 0.9 ,1.01\nmodel.max_gen_len = 12\n");
  EXPECT_EQ(cfg.exit.kind, PolicyKind::kDecay);
  EXPECT_EQ(cfg.exit.theta, 0.97);
  EXPECT_EQ(cfg.output.theta_grid, (std::vector<double>{0.5, 0.9, 1.01}));
  EXPECT_EQ(cfg.exit.total_steps, 12u);
  EXPECT_EQ(cfg.model.d_model, 64u);
}

TEST(Config, RejectsUnknownDuplicateAndMalformedLines) {
  EXPECT_THROW(load_run_config("model.depth = 3\n"), UnknownKeyError);
  EXPECT_THROW(load_run_config("exit.theta = 0.9\nexit.theta = 0.8\n"), ConfigError);
  EXPECT_THROW(load_run_config("exit.theta 0.9\n"), ConfigError);
  EXPECT_THROW(load_run_config("exit.theta = high\n"), ConfigValueError);
  EXPECT_THROW(load_run_config("model.n_heads = 5\n"), ConfigValueError);
  EXPECT_THROW(load_run_config("", {"exit.nope=1"}), UnknownKeyError);
}

TEST(Config, OverridesTakePrecedence) {
  const RunConfig cfg = load_run_config("exit.theta = 0.9\n", {"exit.theta=0.5", "train.steps=7"});
  EXPECT_EQ(cfg.exit.theta, 0.5);
  EXPECT_EQ(cfg.train.steps, 7u);
}

TEST(Config, RequiredKeysMustBeExplicit) {
  const RunConfig cfg = load_run_config("data.path = x.txt\n");
  EXPECT_NO_THROW(cfg.require("data.path"));
  try {
    cfg.require("output.checkpoint");
    FAIL() << "expected MissingKeyError";
  } catch (const MissingKeyError& e) {
    EXPECT_NE(std::string(e.what()).find("output.checkpoint"), std::string::npos);
  }
}

TEST(Config, SampleConfigsLoad) {
  std::size_t seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(MUE_CONFIGS_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    SCOPED_TRACE(entry.path().string());
    RunConfig cfg;
    EXPECT_NO_THROW(cfg = load_run_config(read_file_bytes(entry.path().string())));
    EXPECT_NO_THROW(cfg.require("data.path"));
    EXPECT_NO_THROW(cfg.require("output.checkpoint"));
    ++seen;
  }
  EXPECT_EQ(seen, 4u);
}

// --- checkpoints --------------------------------------------------------------

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const ModelParams p = init_params(small_model_config(), 3);
  const std::string bytes = serialize_checkpoint(p);
  const ModelParams q = parse_checkpoint(bytes, small_model_config());
  EXPECT_EQ(serialize_checkpoint(q), bytes);
  zip_visit([](const std::string& name, const Tensor2D& a, const Tensor2D& b) { EXPECT_EQ(a, b) << name; },
            p.weights, q.weights);
}

TEST(Checkpoint, PreservesSpecialValuesBitForBit) {
  ModelParams p = init_params(small_model_config(), 4);
  p.weights.patch_b(0, 0) = -0.0;
  p.weights.patch_b(0, 1) = 5e-324;
  const ModelParams q = parse_checkpoint(serialize_checkpoint(p), small_model_config());
  EXPECT_TRUE(std::signbit(q.weights.patch_b(0, 0)));
  EXPECT_EQ(q.weights.patch_b(0, 1), 5e-324);
}

TEST(Checkpoint, DetectsCorruption) {
  const std::string bytes = serialize_checkpoint(init_params(small_model_config(), 5));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad, small_model_config()), BadMagicError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(parse_checkpoint(bad, small_model_config()), BadVersionError);
  bad = bytes;
  bad[bad.size() - 20] ^= 0x10;
  EXPECT_THROW(parse_checkpoint(bad, small_model_config()), ChecksumError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3), small_model_config()), CheckpointFormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10), small_model_config()), CheckpointFormatError);
  EXPECT_THROW(parse_checkpoint("", small_model_config()), BadMagicError);
}

TEST(Checkpoint, LayerMismatchNamesTheTensor) {
  const std::string bytes = serialize_checkpoint(init_params(small_model_config(), 6));
  ModelConfig deeper = small_model_config();
  deeper.n_dec_layers = 3;
  try {
    parse_checkpoint(bytes, deeper);
    FAIL() << "expected CheckpointShapeError";
  } catch (const CheckpointShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dec.2.ln1.gain"), std::string::npos) << e.what();
  }
  ModelConfig wider = small_model_config();
  wider.ffn_dim = 32;
  try {
    parse_checkpoint(bytes, wider);
    FAIL() << "expected CheckpointShapeError";
  } catch (const CheckpointShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("ffn.w1"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingFileIsAnIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/model.ckpt", small_model_config()), IoError);
}

// --- datasets -----------------------------------------------------------------

TEST(Dataset, SerializeParseRoundTrip) {
  for (Task task : {Task::kEntail, Task::kCaption}) {
    for (const auto& ex : generate_dataset(7, 50, task, 4)) EXPECT_EQ(parse_example(serialize_example(ex)), ex);
  }
  EXPECT_THROW(parse_example("0 5 5 | 9"), ParseError);
  EXPECT_THROW(parse_example("7 5 | 9 | 3 1"), ParseError);
}

TEST(Dataset, GeneratorRuleOracle) {
  for (const auto& ex : generate_dataset(8, 200, Task::kCaption, 4)) {
    std::vector<TokenId> expected;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c)
        if (ex.grid[r * 4 + c] >= 16 && ex.grid[r * 4 + c] < 32) expected.push_back(ex.grid[r * 4 + c]);
    expected.push_back(tokens::kEos);
    EXPECT_EQ(ex.target, expected);
    EXPECT_TRUE(std::is_sorted(expected.begin(), expected.end() - 1));
    EXPECT_EQ(ex.text, (std::vector<TokenId>{6, 7, 8}));
  }
  std::size_t yes = 0, same_shape = 0;
  for (const auto& ex : generate_dataset(9, 600, Task::kEntail, 4)) {
    ASSERT_EQ(ex.text.size(), 7u);
    const int a = ex.text[3] - 32, b = ex.text[6] - 32;
    bool has_a = false, has_b = false;
    std::size_t objects = 0;
    for (TokenId t : ex.grid) {
      if (t < 16 || t >= 32) continue;
      ++objects;
      has_a = has_a || (t - 16) / 4 == a;
      has_b = has_b || (t - 16) / 4 == b;
    }
    EXPECT_EQ(objects, 1u);
    const bool truth = ex.text[4] == vocab::kAnd ? (has_a && !has_b) : (has_a || !has_b);
    const TokenId answer = truth ? vocab::kYes : vocab::kNo;
    EXPECT_EQ(ex.target, (std::vector<TokenId>{answer, tokens::kEos}));
    yes += answer == vocab::kYes;
    same_shape += a == b;
  }
  EXPECT_GT(yes, 240u);
  EXPECT_LT(yes, 360u);
  EXPECT_GT(same_shape, 360u);
  EXPECT_LT(same_shape, 440u);
}

TEST(Dataset, GenerationIsDeterministicPerSeed) {
  EXPECT_EQ(generate_dataset(10, 20, Task::kEntail, 4), generate_dataset(10, 20, Task::kEntail, 4));
  EXPECT_NE(generate_dataset(10, 20, Task::kEntail, 4), generate_dataset(11, 20, Task::kEntail, 4));
  EXPECT_THROW(generate_dataset(10, 0, Task::kEntail, 4), ContractError);
}

// --- command line ---------------------------------------------------------------

TEST_F(CliRun, GenDataWritesOneLinePerExample) {
  ASSERT_EQ(run_cli(cli("gen-data", "--set data.count=1 --set data.task=entail")).status, 0);
  const auto data = read_dataset((dir_ / "data.txt").string());
  ASSERT_EQ(data.size(), 1u);
  EXPECT_TRUE(data[0].target[0] == vocab::kYes || data[0].target[0] == vocab::kNo);
  EXPECT_EQ(data, generate_dataset(5, 1, Task::kEntail, 4));
}

TEST_F(CliRun, TrainInferBenchProfile) {
  ASSERT_EQ(run_cli(cli("gen-data")).status, 0);
  const CommandResult train = run_cli(cli("train"));
  ASSERT_EQ(train.status, 0);
  const auto summary = nlohmann::json::parse(train.out);
  EXPECT_EQ(summary["steps"], 3);

  // the logged loss is reproduced from the saved checkpoint
  const RunConfig cfg = load_run_config(read_file_bytes(config_.string()));
  const ModelParams reloaded = load_checkpoint((dir_ / "model.ckpt").string(), cfg.model);
  const auto data = read_dataset((dir_ / "data.txt").string());
  EXPECT_NEAR(batch_loss(data, reloaded, true), summary["final_eval_loss"].get<double>(), 1e-12);

  std::ifstream loss(dir_ / "loss.csv");
  std::string header;
  std::getline(loss, header);
  EXPECT_EQ(header, "step,total,layer_1,layer_2");

  const CommandResult never = run_cli(cli("infer", "--set exit.kind=never"));
  const CommandResult above = run_cli(cli("infer", "--set exit.kind=static --set exit.theta=1.01 "
                                                   "--set exit.theta_image=1.01 --set exit.theta_text=1.01"));
  ASSERT_EQ(never.status, 0);
  EXPECT_EQ(never.out, above.out);
  std::istringstream lines(never.out);
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["time_reduction"].get<double>(), 0.0);
    EXPECT_EQ(j["index"], n);
  }
  EXPECT_EQ(n, 12u);

  ASSERT_EQ(run_cli(cli("bench", "--set exit.kind=static --set output.theta_grid=1.01")).status, 0);
  std::ifstream bench(dir_ / "bench.csv");
  std::string row;
  std::getline(bench, row);
  std::getline(bench, row);
  std::vector<std::string> fields;
  std::stringstream ss(row);
  for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
  ASSERT_EQ(fields.size(), 10u);
  EXPECT_EQ(fields[0], "static");
  EXPECT_EQ(std::stod(fields[4]), 0.0);

  ASSERT_EQ(run_cli(cli("profile")).status, 0);
  std::ifstream profile(dir_ / "profile.csv");
  std::getline(profile, header);
  EXPECT_EQ(header, "layer,stack,mean_similarity");
}

TEST_F(CliRun, EndToEndIsDeterministic) {
  ASSERT_EQ(run_cli(cli("gen-data")).status, 0);
  ASSERT_EQ(run_cli(cli("train")).status, 0);
  const std::string first = read_file_bytes((dir_ / "model.ckpt").string());
  const std::string first_loss = read_file_bytes((dir_ / "loss.csv").string());
  ASSERT_EQ(run_cli(cli("gen-data")).status, 0);
  ASSERT_EQ(run_cli(cli("train")).status, 0);
  EXPECT_EQ(read_file_bytes((dir_ / "model.ckpt").string()), first);
  EXPECT_EQ(read_file_bytes((dir_ / "loss.csv").string()), first_loss);
}

TEST_F(CliRun, UsageErrorsExitNonZero) {
  EXPECT_NE(run_cli(cli("train", "--bogus")).status, 0);
  EXPECT_NE(run_cli("").status, 0);
  EXPECT_NE(run_cli("train --config /nonexistent.cfg").status, 0);
  EXPECT_EQ(run_cli(cli("infer", "--set exit.speed=3")).status, 2);
  EXPECT_EQ(run_cli(cli("bench", "--set model.n_heads=5")).status, 2);
  write_text(config_, small_config_text());
  EXPECT_EQ(run_cli(cli("train")).status, 2);
}

TEST_F(CliRun, MissingCheckpointIsARuntimeError) {
  ASSERT_EQ(run_cli(cli("gen-data")).status, 0);
  EXPECT_EQ(run_cli(cli("infer")).status, 1);
}
