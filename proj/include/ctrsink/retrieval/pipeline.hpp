#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrsink/model/config.hpp"
#include "ctrsink/numerics/ops.hpp"
#include "ctrsink/retrieval/retrieval.hpp"
#include "ctrsink/textdata/dataset.hpp"
#include "ctrsink/textdata/vocab.hpp"

namespace ctrsink {

// Everything needed to turn a Sample into model input.
struct PipelineConfig {
  std::size_t k = 8;
  SinkMode mode = SinkMode::info_sink;
  SignalKind signal = SignalKind::temporal;
  std::size_t d_max = kDefaultDMax;
  std::size_t rep_dim = 32;
  std::uint64_t rep_seed = 17;
  std::uint64_t signal_seed = 29;
};

inline void to_json(nlohmann::json& j, const PipelineConfig& p) {
  j = {{"k", p.k},           {"mode", p.mode},         {"signal", p.signal},          {"d_max", p.d_max},
       {"rep_dim", p.rep_dim}, {"rep_seed", p.rep_seed}, {"signal_seed", p.signal_seed}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& p) {
  j.at("k").get_to(p.k);
  j.at("mode").get_to(p.mode);
  j.at("signal").get_to(p.signal);
  j.at("d_max").get_to(p.d_max);
  j.at("rep_dim").get_to(p.rep_dim);
  j.at("rep_seed").get_to(p.rep_seed);
  j.at("signal_seed").get_to(p.signal_seed);
}

struct LabeledSequences {
  std::vector<TokenSequence> sequences;
  std::vector<int> labels;
  std::size_t size() const noexcept { return labels.size(); }
};

// Vocabulary over every behavior and target text of the given samples.
inline Vocab vocab_from_samples(const std::vector<Sample>& samples, std::size_t min_count = 1) {
  std::vector<std::string> corpus;
  for (const auto& s : samples) {
    for (const auto& b : s.behaviors) corpus.push_back(b.text);
    corpus.push_back(s.target_text);
  }
  return build_vocab(corpus, min_count);
}

// Retrieval plus sequence assembly. The prompt is the target behavior text.
inline TokenSequence prepare_sequence(const Sample& s, std::size_t index, const PipelineConfig& p, const Vocab& vocab,
                                      const RepTable& rep) {
  const BehaviorRecord target{s.target_text, s.behaviors.size() + 1};
  auto selected = retrieve_topk(target, s.behaviors, p.k, vocab, rep);
  SequenceOptions opt;
  opt.mode = p.mode;
  opt.signal = p.signal;
  opt.d_max = p.d_max;
  opt.n_history = s.behaviors.size();
  opt.seed = detail::mix64(p.signal_seed ^ detail::mix64(index));
  return build_sequence(s.target_text, selected, opt, vocab);
}

inline LabeledSequences prepare_sequences(const std::vector<Sample>& samples, const PipelineConfig& p,
                                          const Vocab& vocab, const RepTable& rep) {
  LabeledSequences out;
  out.sequences.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.sequences.push_back(prepare_sequence(samples[i], i, p, vocab, rep));
    out.labels.push_back(samples[i].label);
  }
  return out;
}

}  // namespace ctrsink
