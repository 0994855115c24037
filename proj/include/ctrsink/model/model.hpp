#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctrsink/model/config.hpp"
#include "ctrsink/numerics/attention.hpp"
#include "ctrsink/numerics/ops.hpp"
#include "ctrsink/retrieval/retrieval.hpp"

namespace ctrsink {

template <class T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_shift;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  // Sink-bias projections; present only on bias layers.
  std::optional<Tensor<T>> bias_wq, bias_wk;
  Tensor<T> ln2_gain, ln2_shift;
  Tensor<T> ff1_w, ff1_b, ff2_w, ff2_b;
};

template <class T>
struct Model {
  ModelConfig config;
  Tensor<T> token_embedding;     // vocab_size x d_model
  Tensor<T> position_embedding;  // max_positions x d_model
  Tensor<T> generic_sink;        // 1 x d_model
  Tensor<T> sink_table;          // (d_max + 1) x sink_embed_dim
  Tensor<T> sink_proj_w;         // sink_embed_dim x d_model
  Tensor<T> sink_proj_b;         // 1 x d_model
  std::vector<LayerParams<T>> layers;
  Tensor<T> lnf_gain, lnf_shift;
  Tensor<T> head_w;  // d_model x 1
  Tensor<T> head_b;  // 1 x 1

  // Every trainable tensor exactly once, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{{"token_embedding", token_embedding},
                                                       {"position_embedding", position_embedding},
                                                       {"generic_sink", generic_sink},
                                                       {"sink_table", sink_table},
                                                       {"sink_proj_w", sink_proj_w},
                                                       {"sink_proj_b", sink_proj_b}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& p = layers[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      for (auto& [name, t] : std::vector<std::pair<const char*, const Tensor<T>*>>{
               {"ln1_gain", &p.ln1_gain}, {"ln1_shift", &p.ln1_shift}, {"wq", &p.wq}, {"bq", &p.bq},
               {"wk", &p.wk},             {"bk", &p.bk},               {"wv", &p.wv}, {"bv", &p.bv},
               {"wo", &p.wo},             {"bo", &p.bo}})
        out.emplace_back(pre + name, *t);
      if (p.bias_wq) out.emplace_back(pre + "bias_wq", *p.bias_wq);
      if (p.bias_wk) out.emplace_back(pre + "bias_wk", *p.bias_wk);
      for (auto& [name, t] : std::vector<std::pair<const char*, const Tensor<T>*>>{{"ln2_gain", &p.ln2_gain},
                                                                                  {"ln2_shift", &p.ln2_shift},
                                                                                  {"ff1_w", &p.ff1_w},
                                                                                  {"ff1_b", &p.ff1_b},
                                                                                  {"ff2_w", &p.ff2_w},
                                                                                  {"ff2_b", &p.ff2_b}})
        out.emplace_back(pre + name, *t);
    }
    out.emplace_back("lnf_gain", lnf_gain);
    out.emplace_back("lnf_shift", lnf_shift);
    out.emplace_back("head_w", head_w);
    out.emplace_back("head_b", head_b);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }
};

namespace detail {

template <class T>
Tensor<T> normal_param(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (auto& v : m.data) v = T(normal(rng));
  return Tensor<T>(std::move(m), true);
}

template <class T>
Tensor<T> const_param(std::size_t rows, std::size_t cols, T value) {
  return Tensor<T>(Matrix<T>(rows, cols, value), true);
}

}  // namespace detail

// Weights ~ N(0, 0.02^2), biases 0, normalisation gains 1.
template <class T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  const double sd = 0.02;
  Model<T> m;
  m.config = config;
  m.token_embedding = detail::normal_param<T>(config.vocab_size, d, sd, rng);
  m.position_embedding = detail::normal_param<T>(config.max_positions, d, sd, rng);
  m.generic_sink = detail::normal_param<T>(1, d, sd, rng);
  m.sink_table = detail::normal_param<T>(config.d_max + 1, config.sink_embed_dim, sd, rng);
  m.sink_proj_w = detail::normal_param<T>(config.sink_embed_dim, d, sd, rng);
  m.sink_proj_b = detail::const_param<T>(1, d, T(0));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams<T> p;
    p.ln1_gain = detail::const_param<T>(1, d, T(1));
    p.ln1_shift = detail::const_param<T>(1, d, T(0));
    p.wq = detail::normal_param<T>(d, d, sd, rng);
    p.bq = detail::const_param<T>(1, d, T(0));
    p.wk = detail::normal_param<T>(d, d, sd, rng);
    p.bk = detail::const_param<T>(1, d, T(0));
    p.wv = detail::normal_param<T>(d, d, sd, rng);
    p.bv = detail::const_param<T>(1, d, T(0));
    p.wo = detail::normal_param<T>(d, d, sd, rng);
    p.bo = detail::const_param<T>(1, d, T(0));
    if (config.has_bias(l)) {
      p.bias_wq = detail::normal_param<T>(d, d, sd, rng);
      p.bias_wk = detail::normal_param<T>(d, d, sd, rng);
    }
    p.ln2_gain = detail::const_param<T>(1, d, T(1));
    p.ln2_shift = detail::const_param<T>(1, d, T(0));
    p.ff1_w = detail::normal_param<T>(d, config.d_ff, sd, rng);
    p.ff1_b = detail::const_param<T>(1, config.d_ff, T(0));
    p.ff2_w = detail::normal_param<T>(config.d_ff, d, sd, rng);
    p.ff2_b = detail::const_param<T>(1, d, T(0));
    m.layers.push_back(std::move(p));
  }
  m.lnf_gain = detail::const_param<T>(1, d, T(1));
  m.lnf_shift = detail::const_param<T>(1, d, T(0));
  m.head_w = detail::normal_param<T>(d, 1, sd, rng);
  m.head_b = detail::const_param<T>(1, 1, T(0));
  return m;
}

// Post-softmax attention of one (layer, head) for one sequence.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  Matrix<double> matrix;
  std::vector<std::size_t> sink_positions;
};

// Embedding of one sink slot: the learned generic vector for generic sinks,
// otherwise the signal-table row pushed through the linear map.
template <class T>
Tensor<T> sink_embed(const SinkDescriptor& sink, const Model<T>& model) {
  if (sink.signal_kind == SignalKind::generic) return model.generic_sink;
  if (sink.raw_signal > model.config.d_max) throw InvalidArgument("sink_embed: raw_signal exceeds D_max");
  const std::size_t id = sink.raw_signal;
  return add_row(matmul(embedding(model.sink_table, std::span<const std::size_t>(&id, 1)), model.sink_proj_w),
                 model.sink_proj_b);
}

// Per-head k x k sink-bias scores from the sink rows of `x_layer`:
// (X_L Wq''_h)(X_L Wk''_h)^T / sqrt(d_model / n_heads), no softmax.
template <class T>
std::vector<Tensor<T>> compute_bias(const Tensor<T>& x_layer, std::span<const std::size_t> sink_positions,
                                    const LayerParams<T>& params, std::size_t n_heads) {
  if (!params.bias_wq || !params.bias_wk) throw InvalidArgument("compute_bias: layer has no bias parameters");
  std::vector<Tensor<T>> out;
  const std::size_t d = x_layer.cols();
  const std::size_t dh = d / n_heads;
  const std::size_t k = sink_positions.size();
  if (k == 0) {
    for (std::size_t h = 0; h < n_heads; ++h) out.push_back(Tensor<T>::zeros(0, 0));
    return out;
  }
  auto xl = gather_rows(x_layer, sink_positions);
  auto qb = matmul(xl, *params.bias_wq);
  auto kb = matmul(xl, *params.bias_wk);
  const T inv = T(1) / std::sqrt(T(dh));
  for (std::size_t h = 0; h < n_heads; ++h)
    out.push_back(scale(matmul_nt(slice(qb, 0, k, h * dh, (h + 1) * dh), slice(kb, 0, k, h * dh, (h + 1) * dh)), inv));
  return out;
}

// Plain-matrix form of the scatter: out[p_i][p_j] = b[i][j], zero elsewhere.
template <class T>
Matrix<T> scatter_bias(const Matrix<T>& b, std::span<const std::size_t> positions, std::size_t n) {
  Tensor<T> t(b);
  return scatter_block(t, positions, n).value();
}

// Rows of one sequence inside a packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::vector<std::size_t> sinks;  // local positions
};

struct ForwardOptions {
  bool training = false;
  bool capture = false;
  std::optional<Pooling> pooling;  // overrides config.pooling
  std::uint64_t dropout_seed = 0;
};

template <class T>
struct ForwardResult {
  Tensor<T> logits;  // batch x 1
  Tensor<T> pooled;  // batch x d_model
  Tensor<T> hidden;  // packed final hidden states (after the last normalisation)
  std::vector<Segment> segments;
  std::vector<std::vector<AttentionRecord>> records;  // per sequence, layer-major
};

template <class T>
Tensor<T> pool(const Tensor<T>& hidden, Pooling mode, std::span<const std::size_t> sink_positions, ArchMode arch) {
  if (hidden.rows() == 0) throw InvalidArgument("pool: empty hidden states");
  switch (mode) {
    case Pooling::all_mean:
      return mean_rows(hidden);
    case Pooling::sink_mean:
      if (sink_positions.empty()) throw InvalidArgument("pool: sink_mean needs at least one sink");
      return mean_rows(gather_rows(hidden, sink_positions));
    case Pooling::last_token:
      if (arch != ArchMode::causal) throw InvalidArgument("pool: last_token pooling requires causal mode");
      return slice(hidden, hidden.rows() - 1, hidden.rows(), 0, hidden.cols());
  }
  throw InvalidArgument("pool: unknown mode");
}

namespace detail {

template <class T>
Tensor<T> embed_batch(const Model<T>& model, const std::vector<const TokenSequence*>& seqs,
                      std::vector<Segment>& segments) {
  const auto& cfg = model.config;
  std::vector<std::size_t> token_ids, signals, positions;
  std::size_t generic_count = 0;
  // source row of each packed row inside concat(tokens, info sinks, generic sinks)
  enum class Src { token, info, generic };
  std::vector<std::pair<Src, std::size_t>> source;
  std::size_t offset = 0;
  for (const auto* seq : seqs) {
    const std::size_t n = seq->size();
    if (n == 0) throw InvalidArgument("forward: empty sequence");
    if (n > cfg.max_positions) throw InvalidArgument("forward: sequence longer than max_positions");
    Segment seg{offset, n, {}};
    for (std::size_t i = 0; i < n; ++i) {
      positions.push_back(i);
      if (const auto* id = std::get_if<TokenId>(&seq->entries[i])) {
        if (*id >= cfg.vocab_size) throw InvalidArgument("forward: token id outside vocabulary");
        source.emplace_back(Src::token, token_ids.size());
        token_ids.push_back(*id);
      } else {
        const auto& sink = std::get<SinkDescriptor>(seq->entries[i]);
        seg.sinks.push_back(i);
        if (sink.signal_kind == SignalKind::generic) {
          source.emplace_back(Src::generic, generic_count++);
        } else {
          if (sink.raw_signal > cfg.d_max) throw InvalidArgument("forward: sink signal exceeds D_max");
          source.emplace_back(Src::info, signals.size());
          signals.push_back(sink.raw_signal);
        }
      }
    }
    segments.push_back(std::move(seg));
    offset += n;
  }

  std::vector<Tensor<T>> parts;
  std::size_t token_base = 0, info_base = 0, generic_base = 0, rows = 0;
  if (!token_ids.empty()) {
    token_base = rows;
    parts.push_back(embedding(model.token_embedding, std::span<const std::size_t>(token_ids)));
    rows += token_ids.size();
  }
  if (!signals.empty()) {
    info_base = rows;
    parts.push_back(add_row(matmul(embedding(model.sink_table, std::span<const std::size_t>(signals)), model.sink_proj_w),
                            model.sink_proj_b));
    rows += signals.size();
  }
  if (generic_count > 0) {
    generic_base = rows;
    std::vector<std::size_t> zeros(generic_count, 0);
    parts.push_back(embedding(model.generic_sink, std::span<const std::size_t>(zeros)));
  }
  std::vector<std::size_t> perm;
  perm.reserve(source.size());
  bool identity = true;
  for (auto [src, idx] : source) {
    const std::size_t row = (src == Src::token ? token_base : src == Src::info ? info_base : generic_base) + idx;
    identity = identity && row == perm.size();
    perm.push_back(row);
  }
  Tensor<T> stacked = parts.size() == 1 ? parts.front() : concat_rows(parts);
  Tensor<T> x = identity ? stacked : gather_rows(stacked, std::span<const std::size_t>(perm));
  return add(x, embedding(model.position_embedding, std::span<const std::size_t>(positions)));
}

}  // namespace detail

// Pre-norm attention block over a packed batch: x + Attn(LN(x)). For bias
// layers the scattered sink-bias scores are added to the raw scores before
// the causal mask and the softmax.
//
// Composed from the primitive kernels, one graph node per step; slow but easy
// to audit. attention_block below computes the same thing with a fused kernel.
template <class T>
Tensor<T> attention_block_composed(const Tensor<T>& x, const std::vector<Segment>& segments, std::size_t layer,
                          const Model<T>& model, const ForwardOptions& opt,
                          std::vector<std::vector<AttentionRecord>>* records) {
  const auto& cfg = model.config;
  const auto& p = model.layers.at(layer);
  const std::size_t d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
  const T inv = T(1) / std::sqrt(T(dh));
  const bool causal = cfg.arch_mode == ArchMode::causal;
  const bool biased = cfg.has_bias(layer);

  auto h = layer_norm(x, p.ln1_gain, p.ln1_shift);
  auto q = add_row(matmul(h, p.wq), p.bq);
  auto k = add_row(matmul(h, p.wk), p.bk);
  auto v = add_row(matmul(h, p.wv), p.bv);

  std::map<std::size_t, Mask> masks;
  std::vector<Tensor<T>> seq_out;
  seq_out.reserve(segments.size());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    const std::size_t r0 = seg.offset, r1 = seg.offset + seg.length, n = seg.length;
    const Mask* mask = nullptr;
    if (causal) mask = &masks.try_emplace(n, Mask::causal(n)).first->second;
    std::vector<Tensor<T>> bias;
    if (biased && !seg.sinks.empty())
      bias = compute_bias(slice(h, r0, r1, 0, d), std::span<const std::size_t>(seg.sinks), p, heads);
    std::vector<Tensor<T>> head_out;
    head_out.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      auto scores = scale(matmul_nt(slice(q, r0, r1, c0, c1), slice(k, r0, r1, c0, c1)), inv);
      if (!bias.empty()) scores = add(scores, scatter_block(bias[hd], std::span<const std::size_t>(seg.sinks), n));
      auto probs = softmax_rows(scores, mask);
      if (records) {
        AttentionRecord rec{layer, hd, Matrix<double>(n, n), seg.sinks};
        for (std::size_t i = 0; i < n * n; ++i) rec.matrix.data[i] = double(probs.data()[i]);
        (*records)[s].push_back(std::move(rec));
      }
      if (opt.training && cfg.dropout_p > 0.0)
        probs = dropout(probs, cfg.dropout_p, detail::dropout_stream(opt.dropout_seed, layer, s, hd));
      head_out.push_back(matmul(probs, slice(v, r0, r1, c0, c1)));
    }
    seq_out.push_back(heads == 1 ? head_out.front() : concat_cols(head_out));
  }
  auto merged = seq_out.size() == 1 ? seq_out.front() : concat_rows(seq_out);
  return add(x, add_row(matmul(merged, p.wo), p.bo));
}

template <class T>
Tensor<T> attention_block(const Tensor<T>& x, const std::vector<Segment>& segments, std::size_t layer,
                          const Model<T>& model, const ForwardOptions& opt,
                          std::vector<std::vector<AttentionRecord>>* records) {
  const auto& cfg = model.config;
  const auto& p = model.layers.at(layer);
  const bool biased = cfg.has_bias(layer);

  auto h = layer_norm(x, p.ln1_gain, p.ln1_shift);
  auto q = linear(h, p.wq, p.bq);
  auto k = linear(h, p.wk, p.bk);
  auto v = linear(h, p.wv, p.bv);

  std::vector<AttentionSegment> segs;
  segs.reserve(segments.size());
  std::vector<std::size_t> sink_rows;
  for (const auto& seg : segments) {
    segs.push_back({seg.offset, seg.length, seg.sinks, sink_rows.size()});
    for (auto s : seg.sinks) sink_rows.push_back(seg.offset + s);
  }
  Tensor<T> qb = Tensor<T>::zeros(0, cfg.d_model), kb = qb;
  if (biased && !sink_rows.empty()) {
    if (!p.bias_wq || !p.bias_wk) throw InvalidArgument("attention_block: layer has no bias parameters");
    auto xl = gather_rows(h, std::span<const std::size_t>(sink_rows));
    qb = matmul(xl, *p.bias_wq);
    kb = matmul(xl, *p.bias_wk);
  }
  AttentionSpec spec{cfg.n_heads, cfg.arch_mode == ArchMode::causal, opt.training ? cfg.dropout_p : 0.0,
                     opt.dropout_seed, layer};
  AttentionCapture capture;
  if (records)
    capture = [&](std::size_t s, std::size_t hd, const Matrix<double>& m) {
      (*records)[s].push_back(AttentionRecord{layer, hd, m, segments[s].sinks});
    };
  auto merged = segment_attention(q, k, v, qb, kb, segs, spec, capture);
  return add(x, linear(merged, p.wo, p.bo));
}

// Pre-norm feed-forward block: x + W2 gelu(W1 LN(x)).
template <class T>
Tensor<T> feed_forward_block(const Tensor<T>& x, const LayerParams<T>& p) {
  auto h = layer_norm(x, p.ln2_gain, p.ln2_shift);
  auto f = linear(gelu(linear(h, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b);
  return add(x, f);
}

// Prediction head applied to pooled rows (batch x d_model) -> batch x 1.
template <class T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& pooled) {
  return linear(pooled, model.head_w, model.head_b);
}

template <class T>
ForwardResult<T> forward_batch(const Model<T>& model, const std::vector<const TokenSequence*>& seqs,
                               const ForwardOptions& opt = {}) {
  if (seqs.empty()) throw InvalidArgument("forward: empty batch");
  const auto& cfg = model.config;
  const Pooling mode = opt.pooling.value_or(cfg.pooling);
  ForwardResult<T> res;
  auto x = detail::embed_batch(model, seqs, res.segments);
  if (opt.capture) res.records.resize(seqs.size());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    x = attention_block(x, res.segments, l, model, opt, opt.capture ? &res.records : nullptr);
    x = feed_forward_block(x, model.layers[l]);
  }
  res.hidden = layer_norm(x, model.lnf_gain, model.lnf_shift);
  std::vector<Tensor<T>> pooled;
  pooled.reserve(seqs.size());
  for (const auto& seg : res.segments) {
    auto hs = res.segments.size() == 1 ? res.hidden : slice(res.hidden, seg.offset, seg.offset + seg.length, 0, cfg.d_model);
    pooled.push_back(pool(hs, mode, std::span<const std::size_t>(seg.sinks), cfg.arch_mode));
  }
  res.pooled = pooled.size() == 1 ? pooled.front() : concat_rows(pooled);
  res.logits = predict(model, res.pooled);
  return res;
}

template <class T>
ForwardResult<T> forward(const Model<T>& model, const TokenSequence& seq, const ForwardOptions& opt = {}) {
  return forward_batch(model, std::vector<const TokenSequence*>{&seq}, opt);
}

// Input matrix of one sequence: token or sink embedding plus position row.
template <class T>
Tensor<T> input_embed(const TokenSequence& seq, const Model<T>& model) {
  std::vector<Segment> segments;
  return detail::embed_batch(model, std::vector<const TokenSequence*>{&seq}, segments);
}

// Single-sequence attention block (x is n x d_model).
template <class T>
Tensor<T> attention_layer(const Tensor<T>& x, std::span<const std::size_t> sink_positions, std::size_t layer,
                          const Model<T>& model, bool training, std::vector<AttentionRecord>* capture,
                          std::uint64_t dropout_seed = 0) {
  std::vector<Segment> segs{{0, x.rows(), std::vector<std::size_t>(sink_positions.begin(), sink_positions.end())}};
  for (std::size_t i = 0; i < segs[0].sinks.size(); ++i)
    if (segs[0].sinks[i] >= x.rows() || (i > 0 && segs[0].sinks[i] <= segs[0].sinks[i - 1]))
      throw InvalidArgument("attention_layer: sink positions must be strictly increasing and in range");
  ForwardOptions opt;
  opt.training = training;
  opt.dropout_seed = dropout_seed;
  std::vector<std::vector<AttentionRecord>> recs(1);
  auto y = attention_block(x, segs, layer, model, opt, capture ? &recs : nullptr);
  if (capture) *capture = std::move(recs[0]);
  return y;
}

}  // namespace ctrsink
