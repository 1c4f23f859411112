#pragma once

// Run configuration, the copying task, Adam, and the three CLI commands.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slim/performer.hpp"
#include "slim/rng.hpp"

namespace slim {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitTolerance = 1;
inline constexpr int kExitConfig = 2;

struct RunConfig {
  std::string name = "run";
  ModelConfig model;
  std::uint64_t seed = 0;
  std::size_t steps = 1000;
  double lr = 1e-2;
  double lr_after = 1e-3;
  std::size_t lr_switch = 500;  // first step using lr_after
  std::size_t batch = 1;
  std::size_t eval_every = 100;
  std::size_t eval_samples = 64;
};

// Model keys are required; the run keys above are optional. Any other key is
// a ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// "1,8,64,full" -> {1, 8, 64, L}.
std::vector<std::size_t> parse_chunk_list(const std::string& text, std::size_t seq_len);

struct RunRecord {
  std::string config_name;
  std::size_t L = 0;
  std::size_t C = 0;
  std::uint64_t seed = 0;
  double wall_time_seconds = 0;
  std::uint64_t peak_activation_bytes = 0;
  std::uint64_t total_flops = 0;
  double rel_grad_discrepancy = 0;
  double final_metric = 0;
};

std::string run_record_header();
std::string to_csv_row(const RunRecord& r);
void write_csv(std::ostream& out, std::span<const RunRecord> records);

struct CopyingSample {
  std::vector<int> tokens;  // 0 w 0 w
  LossMask mask;            // weights the predictions made from the second half
};

CopyingSample gen_copying(std::size_t seq_len, std::size_t vocab, Rng& rng);

struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros(std::size_t n, double lr);
};

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);
void adam_step(AdamState& state, Params& params, const Params& grad);

// Gradient of the loss for one sequence: C = 0 selects whole-sequence
// backpropagation, otherwise slim_grad with that chunk length.
LossAndGrad sequence_gradient(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                              const LossMask& mask, std::size_t chunk);

struct GradcheckReport {
  std::vector<RunRecord> records;
  bool within_tolerance = true;
};

// Random tokens and parameters from `seed`; one record per chunk length.
// Wall time is reported as zero so that the output is reproducible.
GradcheckReport run_gradcheck(const RunConfig& cfg, std::span<const std::size_t> chunks,
                              std::uint64_t seed, double tol);

std::vector<RunRecord> run_bench(const RunConfig& cfg, std::span<const std::size_t> chunks,
                                 std::size_t repeats);

struct ChunkSchedule {
  enum class Kind { kFull, kConstant, kFinetune } kind = Kind::kFull;
  std::size_t chunk = 0;

  // "full", "<C>" or "finetune:<C>".
  static ChunkSchedule parse(const std::string& text, std::size_t seq_len);
  // 0 means whole-sequence backpropagation.
  std::size_t chunk_at(std::size_t step, std::size_t steps) const;
  std::string to_string() const;
};

struct TrainPoint {
  std::size_t step = 0;
  std::size_t chunk = 0;  // 0 for whole-sequence
  double lr = 0;
  double train_loss = 0;
  double eval_accuracy = 0;
  double eval_bits_per_char = 0;
};

struct CopyingEval {
  double accuracy = 0;
  double bits_per_char = 0;
};

// Argmax accuracy and mean cross-entropy in bits over the predictions of the
// copied half, on `samples` fresh sequences.
CopyingEval evaluate_copying(const Params& params, const ModelConfig& cfg, std::size_t samples, Rng& rng);

struct TrainResult {
  std::vector<TrainPoint> curve;
  Params params;
  double final_accuracy = 0;
};

TrainResult train_copying(const RunConfig& cfg, std::size_t steps, const ChunkSchedule& schedule,
                          std::uint64_t seed, std::ostream* progress = nullptr);

std::string train_curve_header();
std::string to_csv_row(const TrainPoint& p);

}  // namespace slim
