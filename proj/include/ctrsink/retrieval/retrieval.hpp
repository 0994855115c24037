#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ctrsink/errors.hpp"
#include "ctrsink/numerics/tensor.hpp"
#include "ctrsink/textdata/dataset.hpp"
#include "ctrsink/textdata/vocab.hpp"

namespace ctrsink {

inline constexpr std::size_t kDefaultDMax = 512;

// Fixed representation model: a seeded embedding table over the vocabulary,
// mean-pooled per behavior text.
using RepTable = Matrix<double>;

inline RepTable make_rep_table(const Vocab& vocab, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RepTable table(vocab.size(), dim);
  for (auto& v : table.data) v = normal(rng);
  return table;
}

inline std::vector<double> represent(const BehaviorRecord& record, const Vocab& vocab, const RepTable& table) {
  std::vector<double> out(table.cols, 0.0);
  const auto ids = tokenize(record.text, vocab);
  if (ids.empty()) return out;
  for (TokenId id : ids) {
    if (id >= table.rows) throw InvalidArgument("represent: representation table smaller than vocab");
    for (std::size_t c = 0; c < table.cols; ++c) out[c] += table(id, c);
  }
  for (auto& v : out) v /= double(ids.size());
  return out;
}

// Cosine similarity; 0 when either norm is below 1e-12.
inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine: dimension mismatch");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  return std::clamp(dot / (nu * nv), -1.0, 1.0);
}

struct RetrievedBehavior {
  BehaviorRecord record;
  std::size_t original_index = 0;
  double similarity = 0.0;
};

// Keeps the k behaviors most similar to the target (ties: later time_index,
// then lexicographically smaller text) and returns them in chronological order.
inline std::vector<RetrievedBehavior> retrieve_topk(const BehaviorRecord& target,
                                                    const std::vector<BehaviorRecord>& history, std::size_t k,
                                                    const Vocab& vocab, const RepTable& table) {
  if (k < 1 || k > history.size()) throw InvalidArgument("retrieve_topk: k must lie in [1, |history|]");
  const auto target_rep = represent(target, vocab, table);
  std::vector<RetrievedBehavior> all;
  all.reserve(history.size());
  for (const auto& b : history) all.push_back({b, b.time_index, cosine(target_rep, represent(b, vocab, table))});
  auto better = [](const RetrievedBehavior& a, const RetrievedBehavior& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    if (a.original_index != b.original_index) return a.original_index > b.original_index;
    return a.record.text < b.record.text;
  };
  std::partial_sort(all.begin(), all.begin() + std::ptrdiff_t(k), all.end(), better);
  all.resize(k);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.original_index < b.original_index; });
  return all;
}

enum class SinkMode { none, generic_sink, info_sink };
enum class SignalKind { temporal, similarity, random, generic };

struct SinkDescriptor {
  std::size_t sequence_position = 0;
  std::size_t raw_signal = 0;  // bucket in [0, D_max]
  SignalKind signal_kind = SignalKind::generic;
  bool operator==(const SinkDescriptor&) const = default;
};

using SequenceEntry = std::variant<TokenId, SinkDescriptor>;

struct TokenSequence {
  std::vector<SequenceEntry> entries;
  std::size_t prompt_len = 0;
  std::vector<std::pair<std::size_t, std::size_t>> behavior_spans;  // [start, end)

  std::size_t size() const noexcept { return entries.size(); }
  bool is_sink(std::size_t i) const { return std::holds_alternative<SinkDescriptor>(entries[i]); }

  std::vector<std::size_t> sink_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (is_sink(i)) out.push_back(i);
    return out;
  }

  // The sequence with every sink entry removed.
  std::vector<TokenId> token_ids() const {
    std::vector<TokenId> out;
    for (const auto& e : entries)
      if (auto id = std::get_if<TokenId>(&e)) out.push_back(*id);
    return out;
  }
};

struct SequenceOptions {
  SinkMode mode = SinkMode::info_sink;
  SignalKind signal = SignalKind::temporal;  // ignored unless mode is info_sink
  std::size_t d_max = kDefaultDMax;
  std::size_t n_history = 0;  // full history length, for temporal distances
  std::uint64_t seed = 0;     // random-signal draws
};

inline std::size_t sink_signal(const RetrievedBehavior& b, const SequenceOptions& opt, std::mt19937_64& rng) {
  switch (opt.signal) {
    case SignalKind::temporal: {
      const long long d = (long long)opt.n_history + 1 - (long long)b.original_index;
      return std::size_t(std::clamp<long long>(d, 0, (long long)opt.d_max));
    }
    case SignalKind::similarity: {
      const double s = std::clamp(b.similarity, -1.0, 1.0);
      const auto bucket = std::size_t(std::floor((s + 1.0) / 2.0 * double(opt.d_max - 1)));
      return std::min(bucket, opt.d_max);
    }
    case SignalKind::random:
      return std::size_t(rng() % (opt.d_max + 1));
    case SignalKind::generic:
      return 0;
  }
  return 0;
}

// Layout: [prompt] b1 [SINK1] [SEP] b2 [SINK2] [SEP] ... bk [SINKk].
// Without sinks this is [prompt] b1 [SEP] b2 ... [SEP] bk.
inline TokenSequence build_sequence(const std::string& prompt, const std::vector<RetrievedBehavior>& selected,
                                    const SequenceOptions& opt, const Vocab& vocab) {
  if (selected.empty()) throw InvalidArgument("build_sequence: no behaviors selected");
  if (opt.mode == SinkMode::info_sink && opt.signal == SignalKind::generic)
    throw InvalidArgument("build_sequence: info_sink needs a temporal, similarity or random signal");
  if (opt.d_max < 1) throw InvalidArgument("build_sequence: d_max must be positive");
  std::mt19937_64 rng(opt.seed);
  TokenSequence seq;
  for (TokenId id : tokenize(prompt, vocab)) seq.entries.emplace_back(id);
  seq.prompt_len = seq.entries.size();
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (i > 0) seq.entries.emplace_back(Vocab::kSep);
    const std::size_t start = seq.entries.size();
    for (TokenId id : tokenize(selected[i].record.text, vocab)) seq.entries.emplace_back(id);
    seq.behavior_spans.emplace_back(start, seq.entries.size());
    if (opt.mode == SinkMode::none) continue;
    SinkDescriptor sink;
    sink.sequence_position = seq.entries.size();
    if (opt.mode == SinkMode::generic_sink) {
      sink.signal_kind = SignalKind::generic;
    } else {
      sink.signal_kind = opt.signal;
      sink.raw_signal = sink_signal(selected[i], opt, rng);
    }
    seq.entries.emplace_back(sink);
  }
  return seq;
}

}  // namespace ctrsink
