#include "slim/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "config_json.hpp"
#include "slim/errors.hpp"
#include "slim/instrument.hpp"
#include "slim/slim.hpp"

namespace slim {

// ---------------------------------------------------------------------------
// Configuration.

RunConfig parse_run_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> run_keys{"name",  "seed",       "steps",      "lr",
                                              "lr_after", "lr_switch", "batch", "eval_every",
                                              "eval_samples"};
  for (const auto& item : j.items()) {
    if (!detail::model_config_keys().count(item.key()) && !run_keys.count(item.key())) {
      throw ConfigError("config: unknown key '" + item.key() + "'");
    }
  }
  RunConfig c;
  c.model = detail::config_from_json(j);
  auto count = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError(std::string("config: '") + key + "' must be a non-negative integer");
    }
    field = v.get<std::remove_reference_t<decltype(field)>>();
  };
  auto real = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number()) throw ConfigError(std::string("config: '") + key + "' must be a number");
    field = j.at(key).get<double>();
    if (!(field > 0) || !std::isfinite(field)) throw ConfigError(std::string("config: '") + key + "' must be positive");
  };
  if (j.contains("name")) {
    if (!j.at("name").is_string()) throw ConfigError("config: 'name' must be a string");
    c.name = j.at("name").get<std::string>();
  }
  count("seed", c.seed);
  count("steps", c.steps);
  count("lr_switch", c.lr_switch);
  count("batch", c.batch);
  count("eval_every", c.eval_every);
  count("eval_samples", c.eval_samples);
  real("lr", c.lr);
  real("lr_after", c.lr_after);
  if (c.batch == 0) throw ConfigError("config: 'batch' must be positive");
  if (c.eval_every == 0) throw ConfigError("config: 'eval_every' must be positive");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::vector<std::size_t> parse_chunk_list(const std::string& text, std::size_t seq_len) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "full") {
      out.push_back(seq_len);
      continue;
    }
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (item.empty() || pos != item.size() || item[0] == '-') {
      throw ConfigError("chunk list: '" + item + "' is neither a positive integer nor 'full'");
    }
    if (v == 0 || v > seq_len) {
      throw ConfigError("chunk list: C = " + item + " outside [1, " + std::to_string(seq_len) + "]");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("chunk list is empty");
  return out;
}

// ---------------------------------------------------------------------------
// CSV.

namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string run_record_header() {
  return "config_name,L,C,seed,wall_time_seconds,peak_activation_bytes,total_flops,"
         "rel_grad_discrepancy,final_metric";
}

std::string to_csv_row(const RunRecord& r) {
  std::ostringstream ss;
  ss << r.config_name << ',' << r.L << ',' << r.C << ',' << r.seed << ',' << fmt_real(r.wall_time_seconds) << ','
     << r.peak_activation_bytes << ',' << r.total_flops << ',' << fmt_real(r.rel_grad_discrepancy) << ','
     << fmt_real(r.final_metric);
  return ss.str();
}

void write_csv(std::ostream& out, std::span<const RunRecord> records) {
  out << run_record_header() << '\n';
  for (const auto& r : records) out << to_csv_row(r) << '\n';
}

std::string train_curve_header() { return "step,chunk,lr,train_loss,eval_accuracy,eval_bits_per_char"; }

std::string to_csv_row(const TrainPoint& p) {
  std::ostringstream ss;
  ss << p.step << ',' << p.chunk << ',' << fmt_real(p.lr) << ',' << fmt_real(p.train_loss) << ','
     << fmt_real(p.eval_accuracy) << ',' << fmt_real(p.eval_bits_per_char);
  return ss.str();
}

// ---------------------------------------------------------------------------
// Copying task.

CopyingSample gen_copying(std::size_t seq_len, std::size_t vocab, Rng& rng) {
  if (seq_len < 4 || seq_len % 2 != 0) {
    throw ConfigError("copying task: L must be even and at least 4, got " + std::to_string(seq_len));
  }
  if (vocab < 2) throw ConfigError("copying task: vocabulary must have at least 2 symbols");
  const std::size_t half = seq_len / 2;
  CopyingSample s;
  s.tokens.assign(seq_len, 0);
  for (std::size_t i = 1; i < half; ++i) {
    const int w = 1 + static_cast<int>(rng.below(vocab - 1));
    s.tokens[i] = w;
    s.tokens[half + i] = w;
  }
  s.mask.assign(seq_len, 0.0);
  for (std::size_t i = half; i < seq_len; ++i) s.mask[i] = 1.0;
  return s;
}

// ---------------------------------------------------------------------------
// Adam.

AdamState AdamState::zeros(std::size_t n, double lr) {
  MemoryCategoryScope persistent(MemoryCategory::kPersistent);
  AdamState s;
  s.m = Tensor({n});
  s.v = Tensor({n});
  s.lr = lr;
  return s;
}

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grad) {
  if (params.size() != s.m.numel() || grad.size() != s.m.numel()) {
    throw DimensionError("adam_step: parameter, gradient and state sizes differ");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grad[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    params[i] -= s.lr * m_hat / (std::sqrt(v_hat) + s.eps);
  }
}

void adam_step(AdamState& state, Params& params, const Params& grad) {
  Tensor flat = params.flatten();
  const Tensor g = grad.flatten();
  adam_step(state, flat.values(), g.values());
  params.assign(flat.values());
}

// ---------------------------------------------------------------------------
// Commands.

LossAndGrad sequence_gradient(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                              const LossMask& mask, std::size_t chunk) {
  if (chunk == 0) return forward_full(tokens, params, cfg, mask, AttentionMode::kBlock);
  SlimResult r = slim_grad(tokens, params, cfg, chunk, mask);
  return LossAndGrad{r.loss, std::move(r.grad)};
}

namespace {

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> t(n);
  for (auto& v : t) v = static_cast<int>(rng.below(vocab));
  return t;
}

struct Measured {
  SlimResult result;
  std::uint64_t peak_bytes = 0;
  std::uint64_t flops = 0;
  double seconds = 0;
};

Measured measured_slim(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                       std::size_t chunk, const LossMask& mask) {
  AllocStats& stats = alloc_stats();
  FlopLedger& ledger = flop_ledger();
  const std::size_t base = stats.live_bytes(MemoryCategory::kActivation);
  stats.reset_peak();
  ledger.reset();
  const auto t0 = std::chrono::steady_clock::now();
  Measured m{slim_grad(tokens, params, cfg, chunk, mask)};
  const auto t1 = std::chrono::steady_clock::now();
  m.peak_bytes = stats.peak_bytes(MemoryCategory::kActivation) - base;
  m.flops = ledger.total();
  m.seconds = std::chrono::duration<double>(t1 - t0).count();
  return m;
}

}  // namespace

GradcheckReport run_gradcheck(const RunConfig& cfg, std::span<const std::size_t> chunks,
                              std::uint64_t seed, double tol) {
  const ModelConfig& model = cfg.model;
  Rng rng(seed);
  const std::vector<int> tokens = random_tokens(model.seq_len, model.vocab, rng);
  const Params params = Params::init(model, rng.next_u64());
  const LossMask mask = full_mask(tokens.size());
  const Tensor reference = forward_full(tokens, params, model, mask, AttentionMode::kPrefixSum).grad.flatten();

  GradcheckReport rep;
  for (std::size_t c : chunks) {
    Measured m = measured_slim(tokens, params, model, c, mask);
    const Tensor g = m.result.grad.flatten();
    RunRecord r;
    r.config_name = cfg.name;
    r.L = model.seq_len;
    r.C = c;
    r.seed = seed;
    r.peak_activation_bytes = m.peak_bytes;
    r.total_flops = m.flops;
    r.rel_grad_discrepancy = relative_l2(g, reference);
    r.final_metric = m.result.loss;
    if (!(r.rel_grad_discrepancy <= tol)) rep.within_tolerance = false;
    rep.records.push_back(r);
  }
  return rep;
}

std::vector<RunRecord> run_bench(const RunConfig& cfg, std::span<const std::size_t> chunks,
                                 std::size_t repeats) {
  if (repeats == 0) throw ConfigError("bench: repeats must be at least 1");
  const ModelConfig& model = cfg.model;
  Rng rng(cfg.seed);
  const std::vector<int> tokens = random_tokens(model.seq_len, model.vocab, rng);
  const Params params = Params::init(model, rng.next_u64());
  const LossMask mask = full_mask(tokens.size());
  const Tensor reference = forward_full(tokens, params, model, mask, AttentionMode::kPrefixSum).grad.flatten();

  std::vector<RunRecord> out;
  for (std::size_t c : chunks) {
    RunRecord r;
    r.config_name = cfg.name;
    r.L = model.seq_len;
    r.C = c;
    r.seed = cfg.seed;
    double seconds = 0;
    for (std::size_t k = 0; k < repeats; ++k) {
      Measured m = measured_slim(tokens, params, model, c, mask);
      seconds += m.seconds;
      r.peak_activation_bytes = std::max<std::uint64_t>(r.peak_activation_bytes, m.peak_bytes);
      r.total_flops = m.flops;
      r.rel_grad_discrepancy = relative_l2(m.result.grad.flatten(), reference);
      r.final_metric = m.result.loss;
    }
    r.wall_time_seconds = seconds / static_cast<double>(repeats);
    out.push_back(r);
  }
  return out;
}

ChunkSchedule ChunkSchedule::parse(const std::string& text, std::size_t seq_len) {
  ChunkSchedule s;
  if (text == "full") return s;
  std::string number = text;
  s.kind = Kind::kConstant;
  const std::string prefix = "finetune:";
  if (text.rfind(prefix, 0) == 0) {
    s.kind = Kind::kFinetune;
    number = text.substr(prefix.size());
  }
  const auto list = parse_chunk_list(number, seq_len);
  if (list.size() != 1) throw ConfigError("chunk schedule: expected one chunk length in '" + text + "'");
  s.chunk = list[0];
  return s;
}

std::size_t ChunkSchedule::chunk_at(std::size_t step, std::size_t steps) const {
  switch (kind) {
    case Kind::kFull: return 0;
    case Kind::kConstant: return chunk;
    case Kind::kFinetune: return step < steps / 2 ? 0 : chunk;
  }
  return 0;
}

std::string ChunkSchedule::to_string() const {
  switch (kind) {
    case Kind::kFull: return "full";
    case Kind::kConstant: return std::to_string(chunk);
    case Kind::kFinetune: return "finetune:" + std::to_string(chunk);
  }
  return "";
}

CopyingEval evaluate_copying(const Params& params, const ModelConfig& cfg, std::size_t samples, Rng& rng) {
  const std::size_t len = cfg.seq_len, half = len / 2;
  std::size_t correct = 0, total = 0;
  double nats = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const CopyingSample sample = gen_copying(len, cfg.vocab, rng);
    const Tensor logits = model_logits(sample.tokens, params, cfg);
    for (std::size_t i = half; i + 1 < len; ++i) {
      const double* row = logits.data() + i * cfg.vocab;
      std::size_t best = 0;
      double mx = row[0];
      for (std::size_t c = 1; c < cfg.vocab; ++c) {
        if (row[c] > mx) {
          mx = row[c];
          best = c;
        }
      }
      double z = 0;
      for (std::size_t c = 0; c < cfg.vocab; ++c) z += std::exp(row[c] - mx);
      const int target = sample.tokens[i + 1];
      nats += std::log(z) - (row[target] - mx);
      correct += best == static_cast<std::size_t>(target);
      ++total;
    }
  }
  CopyingEval e;
  if (total > 0) {
    e.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    e.bits_per_char = nats / static_cast<double>(total) / std::log(2.0);
  }
  return e;
}

TrainResult train_copying(const RunConfig& cfg, std::size_t steps, const ChunkSchedule& schedule,
                          std::uint64_t seed, std::ostream* progress) {
  const ModelConfig& model = cfg.model;
  Rng rng(seed);
  Rng data_rng = rng.split();
  Rng eval_seed_rng = rng.split();
  const std::uint64_t eval_seed = eval_seed_rng.next_u64();

  TrainResult out;
  {
    MemoryCategoryScope persistent(MemoryCategory::kPersistent);
    out.params = Params::init(model, rng.next_u64());
  }
  AdamState adam = AdamState::zeros(out.params.size(), cfg.lr);
  Tensor flat = out.params.flatten();
  Tensor grad_sum({flat.numel()});

  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t chunk = schedule.chunk_at(step, steps);
    adam.lr = step < cfg.lr_switch ? cfg.lr : cfg.lr_after;
    grad_sum.fill(0.0);
    double loss = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const CopyingSample sample = gen_copying(model.seq_len, model.vocab, data_rng);
      const LossAndGrad lg = sequence_gradient(sample.tokens, out.params, model, sample.mask, chunk);
      loss += lg.loss;
      const Tensor g = lg.grad.flatten();
      for (std::size_t i = 0; i < g.numel(); ++i) grad_sum[i] += g[i];
    }
    const double inv = 1.0 / static_cast<double>(cfg.batch);
    for (auto& v : grad_sum.values()) v *= inv;
    adam_step(adam, flat.values(), grad_sum.values());
    out.params.assign(flat.values());

    const bool last = step + 1 == steps;
    if ((step + 1) % cfg.eval_every == 0 || last) {
      Rng eval_rng(eval_seed);
      const CopyingEval e = evaluate_copying(out.params, model, cfg.eval_samples, eval_rng);
      TrainPoint p{step + 1, chunk, adam.lr, loss * inv, e.accuracy, e.bits_per_char};
      out.curve.push_back(p);
      out.final_accuracy = e.accuracy;
      if (progress != nullptr) *progress << to_csv_row(p) << '\n' << std::flush;
    }
  }
  return out;
}

}  // namespace slim
