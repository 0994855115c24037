#pragma once

// Shared test helpers: finite-difference gradient check, random inputs, and a
// plain transformer written directly against the primitive kernels.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ctrsink/ctrsink.hpp"

namespace ctrsink::testing {

using TensorD = Tensor<double>;

inline TensorD random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0,
                             bool requires_grad = true) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix<double> m(rows, cols);
  for (auto& v : m.data) v = normal(rng);
  return TensorD(std::move(m), requires_grad);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares backward() against central differences for every entry of every
// input. The loss builder must be a pure function of the input values.
inline GradCheckResult gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& loss_fn,
                                 std::vector<TensorD> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  auto loss = loss_fn(inputs);
  backward(loss);
  GradCheckResult res;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      double numeric;
      {
        NoGradGuard guard;
        const double saved = t.data()[i];
        t.mutable_data()[i] = saved + h;
        const double up = loss_fn(inputs).item();
        t.mutable_data()[i] = saved - h;
        const double down = loss_fn(inputs).item();
        t.mutable_data()[i] = saved;
        numeric = (up - down) / (2 * h);
      }
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-3);
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.checked;
    }
  }
  return res;
}

// Weighted sum with fixed pseudo-random weights; turns any tensor into a
// scalar whose gradient exercises every entry.
inline TensorD probe_sum(const TensorD& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix<double> w(t.rows(), t.cols());
  for (auto& v : w.data) v = u(rng);
  return sum(mul(t, TensorD(std::move(w))));
}

// Token/sink sequence with `k` sinks at random distinct positions.
inline TokenSequence random_sequence(std::mt19937_64& rng, std::size_t vocab_size, std::size_t n, std::size_t k,
                                     SignalKind kind = SignalKind::temporal, std::size_t d_max = 16) {
  TokenSequence seq;
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i;
  std::shuffle(pos.begin(), pos.end(), rng);
  std::vector<std::uint8_t> is_sink(n, 0);
  for (std::size_t i = 0; i < std::min(k, n); ++i) is_sink[pos[i]] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_sink[i]) {
      const std::size_t signal = kind == SignalKind::generic ? 0 : std::size_t(rng() % (d_max + 1));
      seq.entries.emplace_back(SinkDescriptor{i, signal, kind});
    } else {
      seq.entries.emplace_back(TokenId(Vocab::kReservedCount + rng() % (vocab_size - Vocab::kReservedCount)));
    }
  }
  seq.prompt_len = 0;
  return seq;
}

// Standard pre-norm transformer over token ids only (no sinks, no sink
// bias), one sequence at a time, built from the primitive kernels.
template <class T>
T plain_transformer_logit(const Model<T>& m, const std::vector<std::size_t>& ids) {
  NoGradGuard guard;
  const auto& cfg = m.config;
  const std::size_t n = ids.size(), d = cfg.d_model, dh = d / cfg.n_heads;
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  auto x = add(embedding(m.token_embedding, std::span<const std::size_t>(ids)),
               embedding(m.position_embedding, std::span<const std::size_t>(positions)));
  const Mask mask = Mask::causal(n);
  const bool causal = cfg.arch_mode == ArchMode::causal;
  for (const auto& p : m.layers) {
    auto h = layer_norm(x, p.ln1_gain, p.ln1_shift);
    auto q = add_row(matmul(h, p.wq), p.bq);
    auto k = add_row(matmul(h, p.wk), p.bk);
    auto v = add_row(matmul(h, p.wv), p.bv);
    std::vector<Tensor<T>> heads;
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      auto s = scale(matmul_nt(slice(q, 0, n, c0, c1), slice(k, 0, n, c0, c1)), T(1) / std::sqrt(T(dh)));
      auto a = softmax_rows(s, causal ? &mask : nullptr);
      heads.push_back(matmul(a, slice(v, 0, n, c0, c1)));
    }
    x = add(x, add_row(matmul(concat_cols(heads), p.wo), p.bo));
    auto h2 = layer_norm(x, p.ln2_gain, p.ln2_shift);
    x = add(x, add_row(matmul(gelu(add_row(matmul(h2, p.ff1_w), p.ff1_b)), p.ff2_w), p.ff2_b));
  }
  auto hf = layer_norm(x, m.lnf_gain, m.lnf_shift);
  Tensor<T> pooled;
  switch (cfg.pooling) {
    case Pooling::all_mean: pooled = mean_rows(hf); break;
    case Pooling::last_token: pooled = slice(hf, n - 1, n, 0, d); break;
    case Pooling::sink_mean: throw InvalidArgument("plain transformer has no sinks");
  }
  return add_row(matmul(pooled, m.head_w), m.head_b).item();
}

}  // namespace ctrsink::testing
