#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctrsink/errors.hpp"
#include "ctrsink/model/model.hpp"
#include "ctrsink/numerics/tensor.hpp"

namespace ctrsink {

namespace detail {

inline std::vector<std::uint8_t> membership(std::span<const std::size_t> set, std::size_t n) {
  std::vector<std::uint8_t> in(n, 0);
  for (auto p : set) {
    if (p >= n) throw InvalidArgument("sink position outside the attention matrix");
    in[p] = 1;
  }
  return in;
}

}  // namespace detail

// Share of total attention mass landing on the columns in `sinks`.
inline double p_focused(const Matrix<double>& a, std::span<const std::size_t> sinks) {
  if (a.rows != a.cols) throw ShapeError("p_focused: attention must be square");
  if (sinks.empty()) return 0.0;
  const auto in = detail::membership(sinks, a.cols);
  double focused = 0, total = 0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) {
      total += a(i, j);
      if (in[j]) focused += a(i, j);
    }
  return total > 0 ? focused / total : 0.0;
}

// Share of total attention mass flowing from sink rows to sink columns.
inline double p_between(const Matrix<double>& a, std::span<const std::size_t> sinks) {
  if (a.rows != a.cols) throw ShapeError("p_between: attention must be square");
  if (sinks.empty()) return 0.0;
  const auto in = detail::membership(sinks, a.cols);
  double between = 0, total = 0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) {
      total += a(i, j);
      if (in[i] && in[j]) between += a(i, j);
    }
  return total > 0 ? between / total : 0.0;
}

struct LayerProfile {
  std::size_t layer = 0;
  double p_f = 0.0;
  double p_b = 0.0;
};

// Head-averaged P_f / P_b per layer of one forward pass, ordered by layer.
inline std::vector<LayerProfile> layerwise_profile(const std::vector<AttentionRecord>& records) {
  std::map<std::size_t, std::pair<LayerProfile, std::size_t>> acc;
  for (const auto& r : records) {
    auto& [prof, count] = acc[r.layer];
    prof.layer = r.layer;
    prof.p_f += p_focused(r.matrix, r.sink_positions);
    prof.p_b += p_between(r.matrix, r.sink_positions);
    ++count;
  }
  std::vector<LayerProfile> out;
  for (auto& [layer, entry] : acc) {
    auto [prof, count] = entry;
    prof.p_f /= double(count);
    prof.p_b /= double(count);
    out.push_back(prof);
  }
  return out;
}

struct LayerSummary {
  std::size_t layer = 0;
  double mean_p_f = 0.0, std_p_f = 0.0;
  double mean_p_b = 0.0, std_p_b = 0.0;
  std::size_t samples = 0;
};

// Per-layer mean and (population) standard deviation over samples of the
// head-averaged profile.
inline std::vector<LayerSummary> summarize_profiles(const std::vector<std::vector<LayerProfile>>& per_sample) {
  std::map<std::size_t, std::vector<const LayerProfile*>> by_layer;
  for (const auto& prof : per_sample)
    for (const auto& lp : prof) by_layer[lp.layer].push_back(&lp);
  std::vector<LayerSummary> out;
  for (const auto& [layer, items] : by_layer) {
    LayerSummary s;
    s.layer = layer;
    s.samples = items.size();
    for (const auto* lp : items) {
      s.mean_p_f += lp->p_f;
      s.mean_p_b += lp->p_b;
    }
    s.mean_p_f /= double(items.size());
    s.mean_p_b /= double(items.size());
    for (const auto* lp : items) {
      s.std_p_f += (lp->p_f - s.mean_p_f) * (lp->p_f - s.mean_p_f);
      s.std_p_b += (lp->p_b - s.mean_p_b) * (lp->p_b - s.mean_p_b);
    }
    s.std_p_f = std::sqrt(s.std_p_f / double(items.size()));
    s.std_p_b = std::sqrt(s.std_p_b / double(items.size()));
    out.push_back(s);
  }
  return out;
}

// Mean P_f over every (sample, layer, head) of an evaluation-mode pass.
template <class T>
double mean_focus(const Model<T>& model, const std::vector<TokenSequence>& seqs, std::size_t batch_size = 128) {
  NoGradGuard no_grad;
  ForwardOptions opt;
  opt.capture = true;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < seqs.size(); b += batch_size) {
    std::vector<const TokenSequence*> batch;
    for (std::size_t i = b; i < std::min(seqs.size(), b + batch_size); ++i) batch.push_back(&seqs[i]);
    auto res = forward_batch(model, batch, opt);
    for (const auto& recs : res.records)
      for (const auto& r : recs) {
        total += p_focused(r.matrix, r.sink_positions);
        ++count;
      }
  }
  return count ? total / double(count) : 0.0;
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8f", v);
  return buf;
}

// Metrics dump row per (sample, layer, head).
inline void write_metrics_header(std::ostream& out) { out << "sample_id,layer,head,p_f,p_b\n"; }

inline void write_metrics_rows(std::ostream& out, const std::string& sample_id,
                               const std::vector<AttentionRecord>& records) {
  for (const auto& r : records)
    out << sample_id << ',' << r.layer << ',' << r.head << ',' << format_value(p_focused(r.matrix, r.sink_positions))
        << ',' << format_value(p_between(r.matrix, r.sink_positions)) << '\n';
}

inline void write_layer_summary(std::ostream& out, const std::vector<LayerSummary>& rows) {
  out << "layer,mean_p_f,std_p_f,mean_p_b,std_p_b,samples\n";
  for (const auto& s : rows)
    out << s.layer << ',' << format_value(s.mean_p_f) << ',' << format_value(s.std_p_f) << ','
        << format_value(s.mean_p_b) << ',' << format_value(s.std_p_b) << ',' << s.samples << '\n';
}

inline std::filesystem::path heatmap_csv_path(const std::filesystem::path& pgm) {
  auto p = pgm;
  p.replace_extension(".csv");
  return p;
}

// Writes `path` as an 8-bit binary PGM (0 -> black, 1 -> white) and the
// matrix as comma-separated text next to it (same stem, .csv). With sink
// markers the image gains a leading marker row and column, white at sinks.
inline void export_heatmap(const Matrix<double>& a, const std::filesystem::path& path,
                           const std::optional<std::vector<std::size_t>>& sink_markers = std::nullopt) {
  for (double v : a.data)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw InvalidArgument("export_heatmap: entries must lie in [0, 1]");
  auto pixel = [](double v) { return static_cast<unsigned char>(std::lround(v * 255.0)); };
  const std::size_t pad = sink_markers ? 1 : 0;
  const std::size_t w = a.cols + pad, h = a.rows + pad;
  std::vector<unsigned char> img(w * h, 0);
  if (sink_markers)
    for (auto p : *sink_markers) {
      if (p < a.cols) img[p + pad] = 255;
      if (p < a.rows) img[(p + pad) * w] = 255;
    }
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) img[(i + pad) * w + j + pad] = pixel(a(i, j));

  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write heatmap " + path.string());
    out << "P5\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data()), std::streamsize(img.size()));
    if (!out) throw IoError("write failed for heatmap " + path.string());
  }
  const auto csv = heatmap_csv_path(path);
  std::ofstream out(csv, std::ios::binary);
  if (!out) throw IoError("cannot write heatmap matrix " + csv.string());
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) out << (j ? "," : "") << format_value(a(i, j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for heatmap matrix " + csv.string());
}

}  // namespace ctrsink
