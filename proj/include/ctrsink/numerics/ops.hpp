#pragma once

// Differentiable kernel set over 2-D tensors. Each op computes its value
// eagerly and, when graph recording is on, attaches a backward rule that
// accumulates into the parents' gradients.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "ctrsink/numerics/tensor.hpp"

namespace ctrsink {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
ConstMap<T> cmap(const Matrix<T>& m) {
  return ConstMap<T>(m.data.data(), Eigen::Index(m.rows), Eigen::Index(m.cols));
}
template <class T>
MutMap<T> mmap(std::span<T> buf, std::size_t rows, std::size_t cols) {
  return MutMap<T>(buf.data(), Eigen::Index(rows), Eigen::Index(cols));
}

inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

// splitmix64 finaliser; the dropout mask is a pure function of (seed, index)
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Boolean permission mask for softmax_rows; true = entry participates.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static Mask causal(std::size_t n) {
    Mask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
    return m;
  }
  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
};

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out(a.rows(), b.cols());
  detail::mmap<T>(out.data, out.rows, out.cols).noalias() = detail::cmap(a.value()) * detail::cmap(b.value());
  return detail::make_result<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    auto g = detail::ConstMap<T>(self.grad.data(), Eigen::Index(av.rows), Eigen::Index(bv.cols));
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      detail::mmap(ga, av.rows, av.cols).noalias() += g * detail::cmap(bv).transpose();
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      detail::mmap(gb, bv.rows, bv.cols).noalias() += detail::cmap(av).transpose() * g;
  });
}

// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix<T> out(a.rows(), b.rows());
  detail::mmap<T>(out.data, out.rows, out.cols).noalias() =
      detail::cmap(a.value()) * detail::cmap(b.value()).transpose();
  return detail::make_result<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    auto g = detail::ConstMap<T>(self.grad.data(), Eigen::Index(av.rows), Eigen::Index(bv.rows));
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      detail::mmap(ga, av.rows, av.cols).noalias() += g * detail::cmap(bv);
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      detail::mmap(gb, bv.rows, bv.cols).noalias() += g.transpose() * detail::cmap(av);
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return detail::make_result<T>(std::move(out), {a}, [](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    const std::size_t rows = self.parents[0]->value.rows, cols = self.parents[0]->value.cols;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += self.grad[c * rows + r];
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto g = detail::parent_grad(self, p); !g.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// a + row broadcast of b (1 x cols)
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(b.rows() == 1 && b.cols() == a.cols(), "add_row: bias must be 1 x cols");
  Matrix<T> out = a.value();
  const std::size_t cols = a.cols();
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += b.data()[c];
  return detail::make_result<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    if (auto gb = detail::parent_grad(self, 1); !gb.empty()) {
      const std::size_t cols = gb.size();
      detail::mmap(gb, 1, cols) += detail::ConstMap<T>(self.grad.data(), Eigen::Index(self.grad.size() / cols),
                                                       Eigen::Index(cols)).colwise().sum();
    }
  });
}

// x w + b with b broadcast over rows; same arithmetic as add_row(matmul(x, w), b).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.cols() == w.rows(), "linear: inner dimensions differ");
  detail::require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias must be 1 x out");
  Matrix<T> out(x.rows(), w.cols());
  auto om = detail::mmap<T>(out.data, out.rows, out.cols);
  om.noalias() = detail::cmap(x.value()) * detail::cmap(w.value());
  om.rowwise() += detail::cmap(b.value()).row(0);
  return detail::make_result<T>(std::move(out), {x, w, b}, [](detail::Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    auto g = detail::ConstMap<T>(self.grad.data(), Eigen::Index(xv.rows), Eigen::Index(wv.cols));
    if (auto gx = detail::parent_grad(self, 0); !gx.empty())
      detail::mmap(gx, xv.rows, xv.cols).noalias() += g * detail::cmap(wv).transpose();
    if (auto gw = detail::parent_grad(self, 1); !gw.empty())
      detail::mmap(gw, wv.rows, wv.cols).noalias() += detail::cmap(xv).transpose() * g;
    if (auto gb = detail::parent_grad(self, 2); !gb.empty()) detail::mmap(gb, 1, wv.cols) += g.colwise().sum();
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shapes differ");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& av = self.parents[0]->value.data;
    const auto& bv = self.parents[1]->value.data;
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Matrix<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return detail::make_result<T>(std::move(out), {a}, [s](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
  });
}

// Row-wise mean-variance normalisation followed by gain and shift (1 x cols each).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(1e-5)) {
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(gain.rows() == 1 && gain.cols() == cols && shift.rows() == 1 && shift.cols() == cols,
                  "layer_norm: gain/shift must be 1 x cols");
  Matrix<T> out(rows, cols);
  Buffer<T> xhat(rows * cols), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = x.value().row(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= T(cols);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(cols);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (row[c] - mean) * inv;
      xhat[r * cols + c] = h;
      out(r, c) = h * gain.data()[c] + shift.data()[c];
    }
  }
  return detail::make_result<T>(
      std::move(out), {x, gain, shift},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](detail::Node<T>& self) {
        const auto& g = self.parents[1]->value.data;
        auto gm = detail::ConstMap<T>(self.grad.data(), Eigen::Index(rows), Eigen::Index(cols));
        if (auto gg = detail::parent_grad(self, 1); !gg.empty())
          detail::mmap(gg, 1, cols) +=
              gm.cwiseProduct(detail::ConstMap<T>(xhat.data(), Eigen::Index(rows), Eigen::Index(cols))).colwise().sum();
        if (auto gs = detail::parent_grad(self, 2); !gs.empty()) detail::mmap(gs, 1, cols) += gm.colwise().sum();
        auto gx = detail::parent_grad(self, 0);
        if (gx.empty()) return;
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            const T d = self.grad[r * cols + c] * g[c];
            mean_d += d;
            mean_dx += d * xhat[r * cols + c];
          }
          mean_d /= T(cols);
          mean_dx /= T(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const T d = self.grad[r * cols + c] * g[c];
            gx[r * cols + c] += inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
          }
        }
      });
}

// tanh approximation of GELU
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  Matrix<T> out = x.value();
  Buffer<T> th(out.size());
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Eigen::Map<Arr> v(out.data.data(), Eigen::Index(out.size()));
  Eigen::Map<Arr> t(th.data(), Eigen::Index(th.size()));
  t = (k0 * (v + k1 * v.cube())).tanh();
  v = T(0.5) * v * (T(1) + t);
  return detail::make_result<T>(std::move(out), {x}, [th = std::move(th)](detail::Node<T>& self) {
    auto gx = detail::parent_grad(self, 0);
    const auto& xv = self.parents[0]->value.data;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xv[i];
      const T t = th[i];
      const T du = k0 * (T(1) + T(3) * k1 * v * v);
      gx[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
    }
  });
}

// Inverted dropout. The keep-mask is a pure function of `seed`, so the same
// seed reproduces the same mask; the mask is stored for the backward pass.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw InvalidArgument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  Buffer<T> mask(x.size());
  Matrix<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = double(detail::mix64(seed ^ detail::mix64(i)) >> 11) * 0x1.0p-53;
    mask[i] = u >= p ? keep_scale : T(0);
    out.data[i] *= mask[i];
  }
  return detail::make_result<T>(std::move(out), {x}, [mask = std::move(mask)](detail::Node<T>& self) {
    auto gx = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

// Row lookup: out[i] = table[ids[i]]
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids) {
  const std::size_t cols = table.cols();
  Matrix<T> out(ids.size(), cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) throw InvalidArgument("embedding: id out of range");
    std::copy_n(table.value().row(ids[i]).begin(), cols, out.row(i).begin());
  }
  return detail::make_result<T>(std::move(out), {table},
                                [idx = std::vector<std::size_t>(ids.begin(), ids.end()), cols](detail::Node<T>& self) {
                                  auto gt = detail::parent_grad(self, 0);
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t c = 0; c < cols; ++c)
                                      gt[idx[i] * cols + c] += self.grad[i * cols + c];
                                });
}

// Same contract as embedding, for arbitrary tensors (indices may repeat).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  return embedding(a, rows);
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  auto dst = out.data.begin();
  for (const auto& p : parts) dst = std::copy(p.data().begin(), p.data().end(), dst);
  return detail::make_result<T>(std::move(out), parts, [](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t n = self.parents[p]->value.size();
      if (auto g = detail::parent_grad(self, p); !g.empty())
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      offset += n;
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.value().row(r).begin(), p.cols(), out.row(r).begin() + c0);
    c0 += p.cols();
  }
  return detail::make_result<T>(std::move(out), parts, [rows, cols](detail::Node<T>& self) {
    std::size_t c0 = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t pc = self.parents[p]->value.cols;
      if (auto g = detail::parent_grad(self, p); !g.empty())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad[r * cols + c0 + c];
      c0 += pc;
    }
  });
}

// Sub-block [r0, r1) x [c0, c1)
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  detail::require(r0 <= r1 && r1 <= a.rows() && c0 <= c1 && c1 <= a.cols(), "slice: range out of bounds");
  const std::size_t rows = r1 - r0, cols = c1 - c0, src_cols = a.cols();
  Matrix<T> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.value().row(r0 + r).begin() + c0, cols, out.row(r).begin());
  return detail::make_result<T>(std::move(out), {a}, [=](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[(r0 + r) * src_cols + c0 + c] += self.grad[r * cols + c];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return detail::make_result<T>(Matrix<T>(1, 1, s), {a}, [](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    for (auto& g : ga) g += self.grad[0];
  });
}

// Column-wise mean over rows: (rows x cols) -> (1 x cols)
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  detail::require(a.rows() > 0, "mean_rows: empty input");
  const std::size_t rows = a.rows(), cols = a.cols();
  Matrix<T> out(1, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[c] += a(r, c);
  for (auto& v : out.data) v /= T(rows);
  return detail::make_result<T>(std::move(out), {a}, [rows, cols](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += self.grad[c] / T(rows);
  });
}

// Row-wise softmax with per-row max subtraction. Masked entries come out
// exactly 0; a row with no permitted entry raises DegenerateRowError.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Mask* mask = nullptr) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (mask && (mask->rows != rows || mask->cols != cols)) throw ShapeError("softmax_rows: mask shape differs");
  Matrix<T> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().row(r);
    auto o = out.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c)
      if (!mask || (*mask)(r, c)) {
        mx = std::max(mx, in[c]);
        any = true;
      }
    if (!any) throw DegenerateRowError(r);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask && !(*mask)(r, c)) continue;
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (auto& v : o) v /= total;
  }
  return detail::make_result<T>(std::move(out), {x}, [rows, cols](detail::Node<T>& self) {
    auto gx = detail::parent_grad(self, 0);
    const auto& y = self.value.data;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        gx[r * cols + c] += y[r * cols + c] * (self.grad[r * cols + c] - dot);
    }
  });
}

// Places a k x k block into a zero n x n matrix: out[p_i][p_j] = b[i][j].
// Positions must be strictly increasing and below n.
template <class T>
Tensor<T> scatter_block(const Tensor<T>& b, std::span<const std::size_t> positions, std::size_t n) {
  const std::size_t k = positions.size();
  if (b.rows() != k || b.cols() != k) throw ShapeError("scatter_block: block must be k x k");
  for (std::size_t i = 0; i < k; ++i) {
    if (positions[i] >= n) throw InvalidArgument("scatter_block: position out of range");
    if (i > 0 && positions[i] <= positions[i - 1])
      throw InvalidArgument("scatter_block: positions must be strictly increasing");
  }
  Matrix<T> out(n, n);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) out(positions[i], positions[j]) = b(i, j);
  return detail::make_result<T>(std::move(out), {b},
                                [pos = std::vector<std::size_t>(positions.begin(), positions.end()), n](detail::Node<T>& self) {
                                  auto gb = detail::parent_grad(self, 0);
                                  const std::size_t k = pos.size();
                                  for (std::size_t i = 0; i < k; ++i)
                                    for (std::size_t j = 0; j < k; ++j) gb[i * k + j] += self.grad[pos[i] * n + pos[j]];
                                });
}

// Mean binary cross-entropy over a column of logits, in the stable form
// max(z,0) - z*y + log(1 + exp(-|z|)).
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require(logits.cols() == 1 && logits.rows() == labels.size(), "bce_with_logits: expects m x 1 logits");
  const std::size_t m = labels.size();
  if (m == 0) throw InvalidArgument("bce_with_logits: empty batch");
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T z = logits.data()[i];
    const T y = T(labels[i]);
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<int> y(labels.begin(), labels.end());
  return detail::make_result<T>(Matrix<T>(1, 1, total / T(m)), {logits}, [y = std::move(y)](detail::Node<T>& self) {
    auto gz = detail::parent_grad(self, 0);
    const auto& z = self.parents[0]->value.data;
    const T m = T(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const T sig = z[i] >= 0 ? T(1) / (T(1) + std::exp(-z[i])) : std::exp(z[i]) / (T(1) + std::exp(z[i]));
      gz[i] += self.grad[0] * (sig - T(y[i])) / m;
    }
  });
}

}  // namespace ctrsink
