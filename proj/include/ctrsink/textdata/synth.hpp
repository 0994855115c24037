#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctrsink/errors.hpp"
#include "ctrsink/textdata/dataset.hpp"
#include "ctrsink/textdata/vocab.hpp"

namespace ctrsink {

// Generator for a CTR task whose label depends on recency: the user clicks
// with probability p_hit when some behavior of the target's category sits in
// the last `recency_window` positions, else with probability p_miss.
struct SynthParams {
  std::size_t n_users = 1000;
  std::size_t history_len = 50;
  std::size_t n_categories = 20;
  std::size_t items_per_category = 10;
  std::size_t recency_window = 10;
  double p_hit = 0.9;
  double p_miss = 0.1;
};

inline void validate(const SynthParams& p) {
  if (p.history_len == 0) throw InvalidArgument("synth: history_len must be positive");
  if (p.n_categories == 0 || p.items_per_category == 0)
    throw InvalidArgument("synth: n_categories and items_per_category must be positive");
  if (p.recency_window == 0 || p.recency_window > p.history_len)
    throw InvalidArgument("synth: recency_window must lie in [1, history_len]");
  if (!(0.0 <= p.p_miss && p.p_miss < p.p_hit && p.p_hit <= 1.0))
    throw InvalidArgument("synth: require 0 <= p_miss < p_hit <= 1");
}

// Category token of a behavior text ("cat<c> item<j>" -> "cat<c>").
inline std::string category_of(const std::string& text) {
  auto toks = split_whitespace(text);
  return toks.empty() ? std::string() : toks.front();
}

// True when a behavior sharing the target's category lies within the last
// `window` positions of the history.
inline bool recency_hit(const Sample& s, std::size_t window) {
  const std::size_t n = s.behaviors.size();
  const std::string cat = category_of(s.target_text);
  for (const auto& b : s.behaviors)
    if (b.time_index + window > n && category_of(b.text) == cat) return true;
  return false;
}

namespace detail {

// Portable draws: distributions from <random> are implementation-defined.
inline std::size_t draw_index(std::mt19937_64& rng, std::size_t n) { return std::size_t(rng() % n); }
inline double draw_unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline std::string behavior_text(std::size_t category, std::size_t item) {
  return "cat" + std::to_string(category) + " item" + std::to_string(item);
}

}  // namespace detail

inline std::vector<Sample> synth_dataset(const SynthParams& p, std::uint64_t seed) {
  validate(p);
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(p.n_users);
  auto draw_behavior = [&] {
    const std::size_t c = detail::draw_index(rng, p.n_categories);
    const std::size_t j = detail::draw_index(rng, p.items_per_category);
    // item ids are global so that items never collide across categories
    return detail::behavior_text(c, c * p.items_per_category + j);
  };
  for (std::size_t u = 0; u < p.n_users; ++u) {
    Sample s;
    s.user_id = "u" + std::to_string(u);
    for (std::size_t t = 1; t <= p.history_len; ++t) s.behaviors.push_back({draw_behavior(), t});
    s.target_text = draw_behavior();
    const double prob = recency_hit(s, p.recency_window) ? p.p_hit : p.p_miss;
    s.label = detail::draw_unit(rng) < prob ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ctrsink
