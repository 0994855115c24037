#pragma once

// Fused multi-head attention over a packed batch of variable-length
// sequences, with an optional sink-bias block per sequence and head.
//
// Per sequence s and head h (n = length, d_h = d / heads):
//   S   = Q_h K_h^T / sqrt(d_h)
//   S[p_i][p_j] += (Qb_h Kb_h^T / sqrt(d_h))[i][j]    for sink positions p
//   P   = softmax_rows(S) under the causal mask when requested
//   O_h = dropout(P) V_h

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "ctrsink/numerics/ops.hpp"

namespace ctrsink {

struct AttentionSegment {
  std::size_t offset = 0;       // first packed row
  std::size_t length = 0;       // rows in the sequence
  std::vector<std::size_t> sinks;  // local positions, strictly increasing
  std::size_t sink_offset = 0;  // first row of this sequence's sinks in qb/kb
};

struct AttentionSpec {
  std::size_t n_heads = 1;
  bool causal = false;
  double dropout_p = 0.0;
  std::uint64_t dropout_seed = 0;
  std::size_t layer = 0;  // only feeds the dropout stream
};

// Post-softmax (pre-dropout) probabilities handed to a capture callback.
using AttentionCapture = std::function<void(std::size_t segment, std::size_t head, const Matrix<double>&)>;

namespace detail {

template <class T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MutStridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
StridedMap<T> head_block(const Matrix<T>& m, std::size_t r0, std::size_t rows, std::size_t c0, std::size_t cols) {
  return StridedMap<T>(m.data.data() + r0 * m.cols + c0, Eigen::Index(rows), Eigen::Index(cols),
                       Eigen::OuterStride<>(Eigen::Index(m.cols)));
}

template <class T>
StridedMap<T> head_block(const T* buf, std::size_t ld, std::size_t r0, std::size_t rows, std::size_t c0,
                         std::size_t cols) {
  return StridedMap<T>(buf + r0 * ld + c0, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(ld)));
}

template <class T>
MutStridedMap<T> head_block(std::span<T> buf, std::size_t ld, std::size_t r0, std::size_t rows, std::size_t c0,
                            std::size_t cols) {
  return MutStridedMap<T>(buf.data() + r0 * ld + c0, Eigen::Index(rows), Eigen::Index(cols),
                          Eigen::OuterStride<>(Eigen::Index(ld)));
}

// Dropout seed of one (layer, sequence, head) attention matrix.
inline std::uint64_t dropout_stream(std::uint64_t seed, std::size_t layer, std::size_t seq, std::size_t head) {
  return mix64(seed ^ mix64((layer + 1) * 0x100000001b3ULL + seq * 0x9e3779b1ULL + head));
}

}  // namespace detail

// qb/kb may be empty tensors (0 x d) when no sink bias applies.
template <class T>
Tensor<T> segment_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& qb,
                            const Tensor<T>& kb, const std::vector<AttentionSegment>& segments,
                            const AttentionSpec& spec, const AttentionCapture& capture = {}) {
  const std::size_t rows = q.rows(), d = q.cols();
  detail::require(k.rows() == rows && v.rows() == rows && k.cols() == d && v.cols() == d,
                  "segment_attention: q, k, v shapes differ");
  detail::require(spec.n_heads > 0 && d % spec.n_heads == 0, "segment_attention: d not divisible by heads");
  const bool biased = qb.rows() > 0;
  detail::require(qb.rows() == kb.rows() && (!biased || (qb.cols() == d && kb.cols() == d)),
                  "segment_attention: bias projections malformed");
  if (spec.dropout_p < 0.0 || spec.dropout_p >= 1.0) throw InvalidArgument("segment_attention: dropout outside [0, 1)");
  for (const auto& seg : segments) {
    detail::require(seg.offset + seg.length <= rows, "segment_attention: segment exceeds rows");
    for (std::size_t i = 0; i < seg.sinks.size(); ++i) {
      if (seg.sinks[i] >= seg.length || (i > 0 && seg.sinks[i] <= seg.sinks[i - 1]))
        throw InvalidArgument("segment_attention: sink positions must be strictly increasing and in range");
    }
    if (biased) detail::require(seg.sink_offset + seg.sinks.size() <= qb.rows(), "segment_attention: sink rows exceed bias input");
  }

  const std::size_t heads = spec.n_heads, dh = d / heads;
  const T inv = T(1) / std::sqrt(T(dh));
  const bool drop = spec.dropout_p > 0.0;
  const T keep_scale = drop ? T(1.0 / (1.0 - spec.dropout_p)) : T(1);

  // probs[s * heads + h] = P (pre-dropout); masks likewise when dropping
  std::vector<Buffer<T>> probs(segments.size() * heads);
  std::vector<Buffer<T>> masks(drop ? segments.size() * heads : 0);
  Matrix<T> out(rows, d);
  Buffer<T> scores;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    const std::size_t n = seg.length, ks = seg.sinks.size();
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = detail::head_block(q.value(), seg.offset, n, h * dh, dh);
      auto kh = detail::head_block(k.value(), seg.offset, n, h * dh, dh);
      auto vh = detail::head_block(v.value(), seg.offset, n, h * dh, dh);
      scores.assign(n * n, T(0));
      auto sm = detail::mmap<T>(scores, n, n);
      // scale after the product: Eigen would otherwise fold inv into an operand
      sm.noalias() = qh * kh.transpose();
      sm *= inv;
      if (biased && ks > 0) {
        auto qbh = detail::head_block(qb.value(), seg.sink_offset, ks, h * dh, dh);
        auto kbh = detail::head_block(kb.value(), seg.sink_offset, ks, h * dh, dh);
        detail::RowMat<T> bias = qbh * kbh.transpose();
        bias *= inv;
        for (std::size_t i = 0; i < ks; ++i)
          for (std::size_t j = 0; j < ks; ++j) sm(Eigen::Index(seg.sinks[i]), Eigen::Index(seg.sinks[j])) += bias(i, j);
      }
      auto& p = probs[s * heads + h];
      p.assign(n * n, T(0));
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t limit = spec.causal ? i + 1 : n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, scores[i * n + j]);
        T total = 0;
        for (std::size_t j = 0; j < limit; ++j) {
          p[i * n + j] = std::exp(scores[i * n + j] - mx);
          total += p[i * n + j];
        }
        for (std::size_t j = 0; j < limit; ++j) p[i * n + j] /= total;
      }
      if (capture) {
        Matrix<double> rec(n, n);
        for (std::size_t i = 0; i < n * n; ++i) rec.data[i] = double(p[i]);
        capture(s, h, rec);
      }
      auto oh = detail::head_block<T>(std::span<T>(out.data), d, seg.offset, n, h * dh, dh);
      if (drop) {
        auto& m = masks[s * heads + h];
        m.resize(n * n);
        const std::uint64_t seed = detail::dropout_stream(spec.dropout_seed, spec.layer, s, h);
        scores.resize(n * n);  // reused for the dropped probabilities
        for (std::size_t i = 0; i < n * n; ++i) {
          const double u = double(detail::mix64(seed ^ detail::mix64(i)) >> 11) * 0x1.0p-53;
          m[i] = u >= spec.dropout_p ? keep_scale : T(0);
          scores[i] = p[i] * m[i];
        }
        oh.noalias() = detail::ConstMap<T>(scores.data(), Eigen::Index(n), Eigen::Index(n)) * vh;
      } else {
        oh.noalias() = detail::ConstMap<T>(p.data(), Eigen::Index(n), Eigen::Index(n)) * vh;
      }
    }
  }

  std::vector<Tensor<T>> parents{q, k, v};
  if (biased) {
    parents.push_back(qb);
    parents.push_back(kb);
  }
  return detail::make_result<T>(
      std::move(out), parents,
      [segments, heads, dh, d, inv, biased, probs = std::move(probs), masks = std::move(masks)](detail::Node<T>& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        auto gq = detail::parent_grad(self, 0);
        auto gk = detail::parent_grad(self, 1);
        auto gv = detail::parent_grad(self, 2);
        std::span<T> gqb, gkb;
        if (biased) {
          gqb = detail::parent_grad(self, 3);
          gkb = detail::parent_grad(self, 4);
        }
        Buffer<T> dp, ds;
        for (std::size_t s = 0; s < segments.size(); ++s) {
          const auto& seg = segments[s];
          const std::size_t n = seg.length, ks = seg.sinks.size();
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& p = probs[s * heads + h];
            const T* mask = masks.empty() ? nullptr : masks[s * heads + h].data();
            auto go = detail::head_block(static_cast<const T*>(self.grad.data()), d, seg.offset, n, h * dh, dh);
            auto vh = detail::head_block(vv, seg.offset, n, h * dh, dh);
            // dP_dropped = dO V^T ; dV += P_dropped^T dO
            dp.assign(n * n, T(0));
            auto dpm = detail::mmap<T>(dp, n, n);
            dpm.noalias() = go * vh.transpose();
            if (!gv.empty()) {
              auto gvh = detail::head_block(gv, d, seg.offset, n, h * dh, dh);
              if (mask) {
                detail::RowMat<T> pd(n, n);
                for (std::size_t i = 0; i < n * n; ++i) pd.data()[i] = p[i] * mask[i];
                gvh.noalias() += pd.transpose() * go;
              } else {
                gvh.noalias() += detail::ConstMap<T>(p.data(), Eigen::Index(n), Eigen::Index(n)).transpose() * go;
              }
            }
            if (mask)
              for (std::size_t i = 0; i < n * n; ++i) dp[i] *= mask[i];
            // softmax backward
            ds.assign(n * n, T(0));
            for (std::size_t i = 0; i < n; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
              for (std::size_t j = 0; j < n; ++j) ds[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * inv;
            }
            auto dsm = detail::ConstMap<T>(ds.data(), Eigen::Index(n), Eigen::Index(n));
            auto qh = detail::head_block(qv, seg.offset, n, h * dh, dh);
            auto kh = detail::head_block(kv, seg.offset, n, h * dh, dh);
            if (!gq.empty()) detail::head_block(gq, d, seg.offset, n, h * dh, dh).noalias() += dsm * kh;
            if (!gk.empty()) detail::head_block(gk, d, seg.offset, n, h * dh, dh).noalias() += dsm.transpose() * qh;
            if (biased && ks > 0) {
              detail::RowMat<T> db(ks, ks);
              for (std::size_t i = 0; i < ks; ++i)
                for (std::size_t j = 0; j < ks; ++j) db(i, j) = ds[seg.sinks[i] * n + seg.sinks[j]];
              const auto& qbv = self.parents[3]->value;
              const auto& kbv = self.parents[4]->value;
              auto qbh = detail::head_block(qbv, seg.sink_offset, ks, h * dh, dh);
              auto kbh = detail::head_block(kbv, seg.sink_offset, ks, h * dh, dh);
              if (!gqb.empty()) detail::head_block(gqb, d, seg.sink_offset, ks, h * dh, dh).noalias() += db * kbh;
              if (!gkb.empty())
                detail::head_block(gkb, d, seg.sink_offset, ks, h * dh, dh).noalias() += db.transpose() * qbh;
            }
          }
        }
      });
}

}  // namespace ctrsink
