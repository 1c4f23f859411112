#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "slim/bench.hpp"
#include "slim/errors.hpp"

namespace {

std::ofstream open_output(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw slim::ConfigError("cannot open '" + path + "' for writing");
  return f;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chunked exact gradients for linear-attention language models"};
  app.require_subcommand(1);

  std::string config_path, chunks = "full", out_path, task = "copying", chunk_schedule = "full",
              checkpoint_path;
  std::uint64_t seed = 0;
  double tol = 1e-10;
  std::size_t repeats = 1, steps = 0;

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare chunked gradients against full backpropagation");
  gradcheck->add_option("--config", config_path, "JSON run configuration")->required();
  gradcheck->add_option("--chunks", chunks, "Comma-separated chunk lengths, 'full' for C = L");
  gradcheck->add_option("--seed", seed, "Seed for tokens and parameters");
  gradcheck->add_option("--tol", tol, "Largest accepted relative discrepancy");
  gradcheck->add_option("--out", out_path, "CSV output (stdout when omitted)");

  auto* bench = app.add_subcommand("bench", "Time, memory and operation counts per chunk length");
  bench->add_option("--config", config_path, "JSON run configuration")->required();
  bench->add_option("--chunks", chunks, "Comma-separated chunk lengths, 'full' for C = L");
  bench->add_option("--repeats", repeats, "Repetitions per chunk length");
  bench->add_option("--out", out_path, "CSV output (stdout when omitted)");

  auto* train = app.add_subcommand("train", "Train on a synthetic task");
  train->add_option("--task", task, "Task name")->check(CLI::IsMember({"copying"}));
  train->add_option("--config", config_path, "JSON run configuration")->required();
  train->add_option("--steps", steps, "Optimizer steps (config value when omitted)");
  train->add_option("--chunk", chunk_schedule, "C, 'full' or 'finetune:C'");
  train->add_option("--seed", seed, "Seed (config value when omitted)");
  train->add_option("--out", out_path, "Learning-curve CSV (stdout when omitted)");
  train->add_option("--checkpoint", checkpoint_path, "Parameter checkpoint to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? slim::kExitOk : slim::kExitConfig;
  }

  try {
    const slim::RunConfig cfg = slim::load_run_config(config_path);
    std::ofstream file;
    if (!out_path.empty()) file = open_output(out_path);
    std::ostream& out = out_path.empty() ? std::cout : file;

    if (*gradcheck) {
      const auto list = slim::parse_chunk_list(chunks, cfg.model.seq_len);
      const auto rep = slim::run_gradcheck(cfg, list, seed, tol);
      slim::write_csv(out, rep.records);
      if (!rep.within_tolerance) {
        std::cerr << "gradcheck: discrepancy above tolerance " << tol << '\n';
        return slim::kExitTolerance;
      }
      return slim::kExitOk;
    }
    if (*bench) {
      const auto list = slim::parse_chunk_list(chunks, cfg.model.seq_len);
      slim::write_csv(out, slim::run_bench(cfg, list, repeats));
      return slim::kExitOk;
    }
    const auto schedule = slim::ChunkSchedule::parse(chunk_schedule, cfg.model.seq_len);
    const std::size_t n_steps = train->count("--steps") ? steps : cfg.steps;
    const std::uint64_t run_seed = train->count("--seed") ? seed : cfg.seed;
    out << slim::train_curve_header() << '\n';
    const auto result = slim::train_copying(cfg, n_steps, schedule, run_seed, &out);
    if (!checkpoint_path.empty()) slim::save_params(checkpoint_path, cfg.model, result.params);
    std::cerr << "final accuracy " << result.final_accuracy << '\n';
    return slim::kExitOk;
  } catch (const slim::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return slim::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return slim::kExitConfig;
  }
}
