#include "slim/performer.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "config_json.hpp"
#include "slim/errors.hpp"
#include "slim/instrument.hpp"

namespace slim {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(heads, "heads");
  positive(layers, "layers");
  positive(feature_dim, "feature_dim");
  positive(vocab, "vocab");
  positive(block_size, "block_size");
  if (seq_len < 2) throw ConfigError("model config: L must be at least 2");
  if (d_model % heads != 0) {
    throw ConfigError("model config: heads (" + std::to_string(heads) + ") must divide d_model (" +
                      std::to_string(d_model) + ")");
  }
  if (feature_dim != feature_map.output_dim(head_dim())) {
    throw ConfigError("model config: feature_dim must equal the head dimension " +
                      std::to_string(head_dim()) + " for the square feature map");
  }
  if (!(ln_eps > 0) || !std::isfinite(ln_eps)) throw ConfigError("model config: ln_eps must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

// ---------------------------------------------------------------------------
// Parameters.

Params Params::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t dm = cfg.d_model, d = cfg.head_dim();
  Params p;
  p.token_embedding = Tensor({cfg.vocab, dm});
  p.layers.resize(cfg.layers);
  for (auto& lp : p.layers) {
    for (std::size_t j = 0; j < cfg.heads; ++j) {
      lp.wq.emplace_back(Shape{dm, d});
      lp.wk.emplace_back(Shape{dm, d});
      lp.wv.emplace_back(Shape{dm, d});
    }
    lp.ln1_gain = Tensor({dm});
    lp.ln1_bias = Tensor({dm});
    lp.w1 = Tensor({dm, cfg.d_ff});
    lp.b1 = Tensor({cfg.d_ff});
    lp.w2 = Tensor({cfg.d_ff, dm});
    lp.b2 = Tensor({dm});
    lp.ln2_gain = Tensor({dm});
    lp.ln2_bias = Tensor({dm});
  }
  p.w_out = Tensor({dm, cfg.vocab});
  p.b_out = Tensor({cfg.vocab});
  return p;
}

Params Params::init(const ModelConfig& cfg, std::uint64_t seed) {
  Params p = zeros(cfg);
  Rng rng(seed);
  p.for_each([&](const std::string& name, Tensor& t) {
    if (name.find("gain") != std::string::npos) {
      t.fill(1.0);
    } else if (t.rank() == 2) {
      const double a = 1.0 / std::sqrt(static_cast<double>(t.extent(0)));
      for (auto& v : t.values()) v = rng.uniform(-a, a);
    }
  });
  return p;
}

namespace {

template <typename P, typename F>
void visit_params(P& p, F&& fn) {
  fn(std::string("token_embedding"), p.token_embedding);
  for (std::size_t r = 0; r < p.layers.size(); ++r) {
    auto& lp = p.layers[r];
    const std::string pre = "layer" + std::to_string(r) + ".";
    for (std::size_t j = 0; j < lp.wq.size(); ++j) fn(pre + "wq" + std::to_string(j), lp.wq[j]);
    for (std::size_t j = 0; j < lp.wk.size(); ++j) fn(pre + "wk" + std::to_string(j), lp.wk[j]);
    for (std::size_t j = 0; j < lp.wv.size(); ++j) fn(pre + "wv" + std::to_string(j), lp.wv[j]);
    fn(pre + "ln1_gain", lp.ln1_gain);
    fn(pre + "ln1_bias", lp.ln1_bias);
    fn(pre + "w1", lp.w1);
    fn(pre + "b1", lp.b1);
    fn(pre + "w2", lp.w2);
    fn(pre + "b2", lp.b2);
    fn(pre + "ln2_gain", lp.ln2_gain);
    fn(pre + "ln2_bias", lp.ln2_bias);
  }
  fn(std::string("w_out"), p.w_out);
  fn(std::string("b_out"), p.b_out);
}

}  // namespace

void Params::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_params(*this, fn);
}

void Params::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_params(*this, fn);
}

std::size_t Params::size() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

Tensor Params::flatten() const {
  Tensor flat({size()});
  std::size_t at = 0;
  for_each([&](const std::string&, const Tensor& t) {
    std::copy_n(t.data(), t.numel(), flat.data() + at);
    at += t.numel();
  });
  return flat;
}

void Params::assign(std::span<const double> flat) {
  if (flat.size() != size()) {
    throw DimensionError("Params::assign: got " + std::to_string(flat.size()) + " values, expected " +
                         std::to_string(size()));
  }
  std::size_t at = 0;
  for_each([&](const std::string&, Tensor& t) {
    std::copy_n(flat.data() + at, t.numel(), t.data());
    at += t.numel();
  });
}

std::size_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t dm = cfg.d_model;
  const std::size_t per_layer = 3 * dm * dm + 4 * dm + 2 * dm * cfg.d_ff + cfg.d_ff + dm;
  return cfg.vocab * dm + cfg.layers * per_layer + dm * cfg.vocab + cfg.vocab;
}

// ---------------------------------------------------------------------------
// Serialization.

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::string serialize_params(const ModelConfig& cfg, const Params& params) {
  nlohmann::json header;
  header["config"] = detail::config_to_json(cfg);
  header["fields"] = nlohmann::json::array();
  params.for_each([&](const std::string& name, const Tensor& t) {
    header["fields"].push_back({name, t.shape()});
  });
  header["n_param"] = params.size();
  const std::string text = header.dump();

  std::string out;
  out.reserve(8 + text.size() + 8 * params.size());
  put_u64(out, text.size());
  out += text;
  params.for_each([&](const std::string&, const Tensor& t) {
    for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  return out;
}

void deserialize_params(const std::string& bytes, ModelConfig& cfg, Params& params) {
  if (bytes.size() < 8) throw ConfigError("checkpoint: truncated header");
  const std::uint64_t len = get_u64(bytes, 0);
  if (len > bytes.size() - 8) throw ConfigError("checkpoint: header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("fields") || !header.contains("n_param")) {
    throw ConfigError("checkpoint: header lacks config, fields or n_param");
  }
  ModelConfig c = detail::config_from_json(header.at("config"));
  Params p = Params::zeros(c);
  std::size_t index = 0;
  const auto& fields = header.at("fields");
  p.for_each([&](const std::string& name, Tensor& t) {
    if (index >= fields.size() || fields[index][0].get<std::string>() != name ||
        fields[index][1].get<Shape>() != t.shape()) {
      throw ConfigError("checkpoint: field list does not match the configuration at '" + name + "'");
    }
    ++index;
  });
  if (index != fields.size() || header.at("n_param").get<std::size_t>() != p.size()) {
    throw ConfigError("checkpoint: parameter count does not match the configuration");
  }
  const std::size_t body = 8 + len;
  if (bytes.size() != body + 8 * p.size()) throw ConfigError("checkpoint: payload size mismatch");
  std::size_t at = body;
  p.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.values()) {
      v = std::bit_cast<double>(get_u64(bytes, at));
      at += 8;
    }
  });
  cfg = c;
  params = std::move(p);
}

void save_params(const std::string& path, const ModelConfig& cfg, const Params& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  const std::string bytes = serialize_params(cfg, params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing '" + path + "'");
}

void load_params(const std::string& path, ModelConfig& cfg, Params& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  deserialize_params(ss.str(), cfg, params);
}

// ---------------------------------------------------------------------------
// Graph construction.

namespace {

template <typename Bind>
ParamVars bind_with(const Params& params, Bind&& bind) {
  ParamVars pv;
  pv.token_embedding = bind(params.token_embedding, [](Params& g) -> Tensor& { return g.token_embedding; });
  for (std::size_t r = 0; r < params.layers.size(); ++r) {
    const LayerParams& lp = params.layers[r];
    LayerVars lv;
    for (std::size_t j = 0; j < lp.wq.size(); ++j) {
      lv.wq.push_back(bind(lp.wq[j], [r, j](Params& g) -> Tensor& { return g.layers[r].wq[j]; }));
      lv.wk.push_back(bind(lp.wk[j], [r, j](Params& g) -> Tensor& { return g.layers[r].wk[j]; }));
      lv.wv.push_back(bind(lp.wv[j], [r, j](Params& g) -> Tensor& { return g.layers[r].wv[j]; }));
    }
#define SLIM_BIND(field) lv.field = bind(lp.field, [r](Params& g) -> Tensor& { return g.layers[r].field; })
    SLIM_BIND(ln1_gain);
    SLIM_BIND(ln1_bias);
    SLIM_BIND(w1);
    SLIM_BIND(b1);
    SLIM_BIND(w2);
    SLIM_BIND(b2);
    SLIM_BIND(ln2_gain);
    SLIM_BIND(ln2_bias);
#undef SLIM_BIND
    pv.layers.push_back(std::move(lv));
  }
  pv.w_out = bind(params.w_out, [](Params& g) -> Tensor& { return g.w_out; });
  pv.b_out = bind(params.b_out, [](Params& g) -> Tensor& { return g.b_out; });
  return pv;
}

}  // namespace

ParamVars bind_params(Tape& tape, const Params& params, Params* grads) {
  return bind_with(params, [&](const Tensor& value, auto&& select) {
    return tape.parameter(value, grads != nullptr ? &select(*grads) : nullptr);
  });
}

ParamVars bind_constant_params(Tape& tape, const Params& params) {
  return bind_with(params, [&](const Tensor& value, auto&&) { return tape.external(value); });
}

Tensor positional_encoding(std::size_t offset, std::size_t count, std::size_t d_model) {
  Tensor pe({count, d_model});
  for (std::size_t l = 0; l < count; ++l) {
    const double pos = static_cast<double>(offset + l);
    for (std::size_t c = 0; c < d_model; c += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(c) / static_cast<double>(d_model));
      pe(l, c) = std::sin(angle);
      if (c + 1 < d_model) pe(l, c + 1) = std::cos(angle);
    }
  }
  return pe;
}

Var embed(const ParamVars& p, std::span<const int> tokens, std::size_t offset) {
  Tape& tape = p.token_embedding.tape();
  const std::size_t dm = p.token_embedding.value().row_size();
  const Var tok = embedding(p.token_embedding, tokens);
  return add(tok, tape.constant(positional_encoding(offset, tokens.size(), dm)));
}

namespace {

struct HeadFeatures {
  std::vector<Var> q_feat, k_feat, v;
};

HeadFeatures head_features(const Var& x, const LayerVars& lp, const ModelConfig& cfg) {
  HeadFeatures h;
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    h.q_feat.push_back(feature_map_apply(cfg.feature_map, matmul(x, lp.wq[j])));
    h.k_feat.push_back(feature_map_apply(cfg.feature_map, matmul(x, lp.wk[j])));
    h.v.push_back(matmul(x, lp.wv[j]));
  }
  return h;
}

LayerFOutput assemble_F(const Var& x, const HeadFeatures& h) {
  std::vector<Var> t_parts, g_parts{x};
  for (std::size_t j = 0; j < h.k_feat.size(); ++j) {
    t_parts.push_back(h.k_feat[j]);
    t_parts.push_back(row_outer(h.v[j], h.k_feat[j]));
    g_parts.push_back(h.q_feat[j]);
  }
  return LayerFOutput{concat_cols(t_parts), concat_cols(g_parts)};
}

}  // namespace

LayerFOutput layer_F(const Var& x, const LayerVars& lp, const ModelConfig& cfg) {
  return assemble_F(x, head_features(x, lp, cfg));
}

Var layer_tail(const Var& attn, const Var& x, const LayerVars& lp, const ModelConfig& cfg) {
  const Var h = add(layer_norm(attn, lp.ln1_gain, lp.ln1_bias, cfg.ln_eps), x);
  const Var hidden = gelu(add_row_broadcast(matmul(h, lp.w1), lp.b1));
  const Var ffn = add_row_broadcast(matmul(hidden, lp.w2), lp.b2);
  return add(layer_norm(ffn, lp.ln2_gain, lp.ln2_bias, cfg.ln_eps), h);
}

Var layer_G(const Var& u, const Var& gamma, const LayerVars& lp, const ModelConfig& cfg) {
  const std::size_t m = cfg.feature_dim, d = cfg.head_dim(), w = cfg.front_width();
  if (u.value().row_size() != cfg.d1() || gamma.value().row_size() != cfg.d2() ||
      u.value().rows() != gamma.value().rows()) {
    throw DimensionError("layer_G: expected U with " + std::to_string(cfg.d1()) + " and Gamma with " +
                         std::to_string(cfg.d2()) + " columns and equal rows");
  }
  const Var x = slice_cols(gamma, 0, cfg.d_model);
  std::vector<Var> heads;
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    const Var s = slice_cols(u, j * w, m);
    const Var r = slice_cols(u, j * w + m, d * m);
    const Var q = slice_cols(gamma, cfg.d_model + j * m, m);
    heads.push_back(guarded_row_divide(row_matvec(r, q), row_dot(s, q), kDenominatorFloor));
  }
  return layer_tail(concat_cols(heads), x, lp, cfg);
}

Var output_logits(const Var& x, const ParamVars& p) {
  return add_row_broadcast(matmul(x, p.w_out), p.b_out);
}

LossMask full_mask(std::size_t seq_len) { return LossMask(seq_len, 1.0); }

namespace {

void loss_targets(std::span<const int> tokens, std::size_t offset, std::size_t rows,
                  const LossMask& mask, std::vector<int>& targets, std::vector<double>& weights) {
  const std::size_t len = tokens.size();
  if (len < 2) throw ConfigError("loss: sequence length must be at least 2");
  if (offset + rows > len) throw DimensionError("loss: rows extend past the sequence end");
  if (mask.size() != len) {
    throw DimensionError("loss: mask has " + std::to_string(mask.size()) + " entries for a sequence of " +
                         std::to_string(len));
  }
  const double inv = 1.0 / static_cast<double>(len - 1);
  targets.assign(rows, 0);
  weights.assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t l = offset + i;
    if (l + 1 < len) {
      targets[i] = tokens[l + 1];
      weights[i] = mask[l] * inv;
    }
  }
}

}  // namespace

Var loss_slice(const Var& logits, std::span<const int> tokens, std::size_t offset,
               const LossMask& mask) {
  std::vector<int> targets;
  std::vector<double> weights;
  loss_targets(tokens, offset, logits.value().rows(), mask, targets, weights);
  return cross_entropy(logits, targets, weights);
}

double loss_slice(const Tensor& logits, std::span<const int> tokens, std::size_t offset,
                  const LossMask& mask) {
  Tape tape;
  return loss_slice(tape.external(logits), tokens, offset, mask).value()[0];
}

Var segment_logits(const ParamVars& p, const ModelConfig& cfg, std::span<const int> tokens,
                   std::size_t offset, std::size_t count, AttentionMode mode,
                   const SegmentHooks& hooks) {
  if (offset + count > tokens.size() || count == 0) {
    throw DimensionError("segment: rows [" + std::to_string(offset) + ", " + std::to_string(offset + count) +
                         ") do not fit a sequence of " + std::to_string(tokens.size()));
  }
  Var x = embed(p, tokens.subspan(offset, count), offset);
  const std::size_t w = cfg.front_width();
  for (std::size_t r = 0; r < cfg.layers; ++r) {
    const LayerVars& lp = p.layers[r];
    const HeadFeatures h = head_features(x, lp, cfg);
    Var boundary;
    if (hooks.boundary_in) {
      std::vector<Tensor> kf, vv;
      for (std::size_t j = 0; j < cfg.heads; ++j) {
        kf.push_back(h.k_feat[j].value());
        vv.push_back(h.v[j].value());
      }
      boundary = hooks.boundary_in(r, kf, vv);
    }
    if (mode == AttentionMode::kPrefixSum) {
      const LayerFOutput f = assemble_F(x, h);
      const Var u = boundary.valid() ? prefix_sum(f.t, boundary) : prefix_sum(f.t);
      if (hooks.boundary_out) hooks.boundary_out(r, slice_rows(u, count - 1, 1));
      x = layer_G(u, f.gamma, lp, cfg);
    } else {
      std::vector<Var> ys, fronts;
      for (std::size_t j = 0; j < cfg.heads; ++j) {
        const Var front_in = boundary.valid() ? slice_cols(boundary, j * w, w) : Var{};
        AttentionVars a = causal_linear_attention(h.q_feat[j], h.k_feat[j], h.v[j], front_in,
                                                  cfg.block_size);
        ys.push_back(a.y);
        fronts.push_back(a.front);
      }
      if (hooks.boundary_out) hooks.boundary_out(r, concat_cols(fronts));
      x = layer_tail(concat_cols(ys), x, lp, cfg);
    }
  }
  return output_logits(x, p);
}

Var run_segment(const ParamVars& p, const ModelConfig& cfg, std::span<const int> tokens,
                std::size_t offset, std::size_t count, const LossMask& mask, AttentionMode mode,
                const SegmentHooks& hooks) {
  const Var logits = segment_logits(p, cfg, tokens, offset, count, mode, hooks);
  return loss_slice(logits, tokens, offset, mask);
}

namespace {

void check_tokens(std::span<const int> tokens, const ModelConfig& cfg) {
  if (tokens.size() < 2) throw ConfigError("sequence length must be at least 2");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw DimensionError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab));
    }
  }
}

}  // namespace

LossAndGrad forward_full(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                         const LossMask& mask, AttentionMode mode) {
  check_tokens(tokens, cfg);
  LossAndGrad out;
  {
    MemoryCategoryScope persistent(MemoryCategory::kPersistent);
    out.grad = Params::zeros(cfg);
  }
  Tape tape;
  const ParamVars pv = bind_params(tape, params, &out.grad);
  const Var loss = run_segment(pv, cfg, tokens, 0, tokens.size(), mask, mode);
  out.loss = loss.value()[0];
  tape.backward(loss);
  return out;
}

double model_loss(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                  const LossMask& mask, AttentionMode mode) {
  check_tokens(tokens, cfg);
  Tape tape;
  const ParamVars pv = bind_constant_params(tape, params);
  return run_segment(pv, cfg, tokens, 0, tokens.size(), mask, mode).value()[0];
}

Tensor model_logits(std::span<const int> tokens, const Params& params, const ModelConfig& cfg) {
  check_tokens(tokens, cfg);
  Tape tape;
  const ParamVars pv = bind_constant_params(tape, params);
  return segment_logits(pv, cfg, tokens, 0, tokens.size(), AttentionMode::kBlock).value();
}

}  // namespace slim
