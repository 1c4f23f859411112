#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "slim/bench.hpp"
#include "slim/errors.hpp"
#include "slim/slim.hpp"
#include "test_util.hpp"

namespace slim {
namespace {

const char* kTinyJson = R"({
  "name": "tiny", "L": 8, "d_model": 8, "d_ff": 32, "heads": 2, "layers": 2,
  "feature_dim": 4, "vocab": 11, "feature_map": "square", "block_size": 3, "ln_eps": 1e-5,
  "seed": 4
})";

TEST(RunConfig, ParsesModelAndRunKeys) {
  const RunConfig c = parse_run_config(kTinyJson);
  EXPECT_EQ(c.name, "tiny");
  EXPECT_EQ(c.model.seq_len, 8u);
  EXPECT_EQ(c.model.d1(), 40u);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.steps, RunConfig{}.steps);
}

TEST(RunConfig, RejectsUnknownMissingAndMistypedKeys) {
  std::string unknown = kTinyJson;
  unknown.insert(1, "\"lerning_rate\": 1, ");
  EXPECT_THROW(parse_run_config(unknown), ConfigError);
  std::string missing = kTinyJson;
  missing.replace(missing.find("\"vocab\": 11,"), 12, "");
  EXPECT_THROW(parse_run_config(missing), ConfigError);
  std::string typed = kTinyJson;
  typed.replace(typed.find("\"heads\": 2"), 10, "\"heads\": \"2\"");
  EXPECT_THROW(parse_run_config(typed), ConfigError);
  std::string bad_heads = kTinyJson;
  bad_heads.replace(bad_heads.find("\"heads\": 2"), 10, "\"heads\": 3");
  EXPECT_THROW(parse_run_config(bad_heads), ConfigError);
  EXPECT_THROW(parse_run_config("{"), ConfigError);
  EXPECT_THROW(parse_run_config("[]"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST(ChunkList, Parsing) {
  EXPECT_EQ(parse_chunk_list("1,8,64,full", 256), (std::vector<std::size_t>{1, 8, 64, 256}));
  EXPECT_THROW(parse_chunk_list("0", 8), ConfigError);
  EXPECT_THROW(parse_chunk_list("9", 8), ConfigError);
  EXPECT_THROW(parse_chunk_list("2,x", 8), ConfigError);
  EXPECT_THROW(parse_chunk_list("-1", 8), ConfigError);
  EXPECT_THROW(parse_chunk_list("", 8), ConfigError);
}

TEST(Csv, HeaderAndRowFormat) {
  EXPECT_EQ(run_record_header(),
            "config_name,L,C,seed,wall_time_seconds,peak_activation_bytes,total_flops,rel_grad_discrepancy,"
            "final_metric");
  RunRecord r{"desk", 256, 16, 3, 0.5, 1024, 99, 1.25e-15, 5.5};
  EXPECT_EQ(to_csv_row(r), "desk,256,16,3,0.5,1024,99,1.25e-15,5.5");
  std::ostringstream ss;
  const std::vector<RunRecord> rs{r};
  write_csv(ss, rs);
  EXPECT_EQ(ss.str(), run_record_header() + "\n" + to_csv_row(r) + "\n");
}

TEST(Copying, SampleInvariants) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const CopyingSample s = gen_copying(64, 16, rng);
    ASSERT_EQ(s.tokens.size(), 64u);
    EXPECT_EQ(s.tokens[0], 0);
    EXPECT_EQ(s.tokens[32], 0);
    for (std::size_t i = 1; i < 32; ++i) {
      EXPECT_EQ(s.tokens[i], s.tokens[i + 32]);
      EXPECT_GE(s.tokens[i], 1);
      EXPECT_LT(s.tokens[i], 16);
    }
    double weight = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      weight += s.mask[i];
      EXPECT_EQ(s.mask[i], i >= 32 ? 1.0 : 0.0);
    }
    EXPECT_EQ(weight, 32.0);
  }
  EXPECT_THROW(gen_copying(7, 16, rng), ConfigError);
  EXPECT_THROW(gen_copying(2, 16, rng), ConfigError);
  EXPECT_THROW(gen_copying(8, 1, rng), ConfigError);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  AdamState s = AdamState::zeros(3, 0.1);
  std::vector<double> p{1, -2, 3};
  const std::vector<double> g(3, 0.0);
  adam_step(s, p, g);
  EXPECT_EQ(p, (std::vector<double>{1, -2, 3}));
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState s = AdamState::zeros(3, 0.01);
  std::vector<double> p{0, 0, 0};
  const std::vector<double> g{2.0, -0.5, 1e-3};
  adam_step(s, p, g);
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = -0.01 * std::abs(g[i]) / (std::abs(g[i]) + 1e-8) * (g[i] > 0 ? 1 : -1);
    EXPECT_NEAR(p[i], expected, 1e-15);
    EXPECT_NEAR(std::abs(p[i]), 0.01, 1e-7);
  }
}

TEST(Adam, IdenticalInputsStayIdentical) {
  AdamState a = AdamState::zeros(4, 0.01), b = AdamState::zeros(4, 0.01);
  std::vector<double> pa{1, 2, 3, 4}, pb = pa;
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> g(4);
    for (auto& v : g) v = rng.uniform(-1, 1);
    adam_step(a, pa, g);
    adam_step(b, pb, g);
  }
  EXPECT_EQ(pa, pb);
  EXPECT_EQ(a.m, b.m);
  std::vector<double> wrong(3);
  EXPECT_THROW(adam_step(a, wrong, wrong), DimensionError);
}

TEST(Gradcheck, WithinToleranceAndDeterministic) {
  const RunConfig c = parse_run_config(kTinyJson);
  const std::vector<std::size_t> chunks{1, 3, 8};
  const GradcheckReport a = run_gradcheck(c, chunks, 7, 1e-10);
  EXPECT_TRUE(a.within_tolerance);
  ASSERT_EQ(a.records.size(), 3u);
  for (const auto& r : a.records) {
    EXPECT_LE(r.rel_grad_discrepancy, 1e-10);
    EXPECT_EQ(r.wall_time_seconds, 0.0);
    EXPECT_GT(r.total_flops, 0u);
    EXPECT_GT(r.peak_activation_bytes, 0u);
  }
  const GradcheckReport b = run_gradcheck(c, chunks, 7, 1e-10);
  std::ostringstream sa, sb;
  write_csv(sa, a.records);
  write_csv(sb, b.records);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_FALSE(run_gradcheck(c, chunks, 7, -1.0).within_tolerance);
}

TEST(Bench, RecordsPerChunkAndRepeatValidation) {
  const RunConfig c = parse_run_config(kTinyJson);
  const std::vector<std::size_t> chunks{1, 2, 4, 8};
  EXPECT_THROW(run_bench(c, chunks, 0), ConfigError);
  const auto recs = run_bench(c, chunks, 2);
  ASSERT_EQ(recs.size(), 4u);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].C, chunks[i]);
    EXPECT_GE(recs[i].wall_time_seconds, 0.0);
    EXPECT_LE(recs[i].rel_grad_discrepancy, 1e-10);
    if (i > 0) EXPECT_GE(recs[i].peak_activation_bytes, recs[i - 1].peak_activation_bytes);
  }
  // Totals differ across C only by per-chunk boundary work.
  const Params p = Params::init(c.model, 1);
  Rng rng(3);
  const auto tokens = testing::random_tokens(rng, 8, c.model.vocab);
  for (std::size_t chunk : chunks) {
    const FlopReport rep = flop_report(tokens, p, c.model, chunk, full_mask(8));
    EXPECT_EQ(rep.slim_total(), 2 * rep.full_forward + rep.full_backward + 8 * c.model.layers * c.model.d1());
  }
}

TEST(ChunkSchedule, ParsingAndSteps) {
  const auto full = ChunkSchedule::parse("full", 64);
  EXPECT_EQ(full.chunk_at(0, 10), 0u);
  const auto constant = ChunkSchedule::parse("16", 64);
  EXPECT_EQ(constant.chunk_at(9, 10), 16u);
  const auto fine = ChunkSchedule::parse("finetune:16", 64);
  EXPECT_EQ(fine.chunk_at(4, 10), 0u);
  EXPECT_EQ(fine.chunk_at(5, 10), 16u);
  EXPECT_EQ(fine.to_string(), "finetune:16");
  EXPECT_THROW(ChunkSchedule::parse("finetune:", 64), ConfigError);
  EXPECT_THROW(ChunkSchedule::parse("65", 64), ConfigError);
  EXPECT_THROW(ChunkSchedule::parse("half", 64), ConfigError);
}

TEST(Train, ShortRunIsDeterministicAndLogsCurve) {
  RunConfig c = parse_run_config(R"({
    "L": 8, "d_model": 8, "d_ff": 16, "heads": 2, "layers": 1, "feature_dim": 4, "vocab": 5,
    "feature_map": "square", "block_size": 4, "ln_eps": 1e-5, "eval_every": 2, "eval_samples": 4,
    "batch": 2, "lr_switch": 3
  })");
  const auto schedule = ChunkSchedule::parse("finetune:2", 8);
  const TrainResult a = train_copying(c, 5, schedule, 1);
  const TrainResult b = train_copying(c, 5, schedule, 1);
  ASSERT_EQ(a.curve.size(), 3u);
  EXPECT_EQ(a.curve.back().step, 5u);
  EXPECT_EQ(a.curve[0].chunk, 0u);
  EXPECT_EQ(a.curve.back().chunk, 2u);
  EXPECT_EQ(a.curve.back().lr, c.lr_after);
  EXPECT_EQ(a.params.flatten(), b.params.flatten());
  EXPECT_GE(a.final_accuracy, 0.0);
  EXPECT_LE(a.final_accuracy, 1.0);
}

TEST(Train, EvaluationOfPerfectCopier) {
  // A model whose logits ignore the input scores 1/(vocab-1)-ish, never 1.
  ModelConfig m = testing::tiny_config(8);
  m.vocab = 5;
  Params p = Params::init(m, 1);
  p.w_out.fill(0.0);
  Rng rng(9);
  const CopyingEval e = evaluate_copying(p, m, 4, rng);
  EXPECT_NEAR(e.bits_per_char, std::log2(5.0), 1e-12);
}

#ifdef SLIM_CLI_PATH
int run_cli(const std::string& args) {
  const std::string cmd = std::string(SLIM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string write_temp(const std::string& name, const std::string& text) {
  const std::string path = ::testing::TempDir() + name;
  std::ofstream(path) << text;
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TEST(Cli, ExitCodesAndOutputs) {
  const std::string cfg = write_temp("tiny.json", kTinyJson);
  const std::string out1 = ::testing::TempDir() + "g1.csv", out2 = ::testing::TempDir() + "g2.csv";
  EXPECT_EQ(run_cli("gradcheck --config " + cfg + " --chunks 1,3,full --seed 2 --out " + out1), 0);
  EXPECT_EQ(run_cli("gradcheck --config " + cfg + " --chunks 1,3,full --seed 2 --out " + out2), 0);
  EXPECT_EQ(slurp(out1), slurp(out2));
  EXPECT_EQ(slurp(out1).substr(0, run_record_header().size()), run_record_header());
  EXPECT_EQ(run_cli("gradcheck --config " + cfg + " --chunks 1 --tol -1"), 1);
  EXPECT_EQ(run_cli("gradcheck --config " + cfg + " --chunks 0"), 2);
  EXPECT_EQ(run_cli("bench --config " + cfg + " --chunks 2 --repeats 0"), 2);
  EXPECT_EQ(run_cli("bench --config " + cfg + " --chunks 2,full --repeats 1"), 0);
  const std::string bad = write_temp("bad.json", R"({"L": 8})");
  EXPECT_EQ(run_cli("gradcheck --config " + bad), 2);
  EXPECT_EQ(run_cli("gradcheck"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);

  const std::string ckpt = ::testing::TempDir() + "model.bin";
  EXPECT_EQ(run_cli("train --task copying --config " + cfg + " --steps 2 --chunk 4 --seed 1 --checkpoint " + ckpt), 0);
  ModelConfig loaded;
  Params params;
  load_params(ckpt, loaded, params);
  EXPECT_EQ(loaded.seq_len, 8u);
  EXPECT_EQ(run_cli("train --task sorting --config " + cfg), 2);
}
#endif

}  // namespace
}  // namespace slim
