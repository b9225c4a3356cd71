// Core types for cross-attention map guidance: attention maps, stacks,
// token specs, and the shared spatial primitives (softmax over tokens,
// weighted centroid, max activation).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace attnguide {

// ---------------------------------------------------------------------------
// Errors

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};

// A cell set whose total value is exactly zero has no defined centroid.
struct ZeroMassError : std::domain_error {
  using std::domain_error::domain_error;
};

// Cosine of a zero vector is undefined.
struct ZeroVectorError : std::domain_error {
  using std::domain_error::domain_error;
};

// Statistic undefined on the given input (e.g. Moran's I of a constant map).
struct UndefinedMetricError : std::domain_error {
  using std::domain_error::domain_error;
};

// ---------------------------------------------------------------------------
// Coordinates

// Continuous (row, column) position in map-cell units. Origin is the center
// of the top-left cell; integer grid cells sit at integer coordinates.
struct Coord {
  double h = 0.0;
  double w = 0.0;
};

inline double distance(Coord a, Coord b) {
  const double dh = a.h - b.h;
  const double dw = a.w - b.w;
  return std::sqrt(dh * dh + dw * dw);
}

// Integer grid cell, (row, column).
struct Cell {
  int h = 0;
  int w = 0;
  friend bool operator==(Cell a, Cell b) { return a.h == b.h && a.w == b.w; }
};

struct CellValue {
  Cell cell;
  double value = 0.0;
};

// ---------------------------------------------------------------------------
// Tokens

enum class TokenKind { subject, attribute };

// A prompt token taking part in the losses. Attributes are bound to exactly
// one subject token of the same prompt.
struct TokenSpec {
  std::string id;
  TokenKind kind = TokenKind::subject;
  std::string bound_subject;  // attributes only
};

// ---------------------------------------------------------------------------
// AttentionMap

// One token's H x W grid of non-negative attention scores at a timestep.
class AttentionMap {
 public:
  AttentionMap(int height, int width, std::vector<double> values,
               std::string token = {}, int timestep = 0)
      : height_(height),
        width_(width),
        values_(std::move(values)),
        token_(std::move(token)),
        timestep_(timestep) {
    if (height_ < 1 || width_ < 1)
      throw ValidationError("AttentionMap: height and width must be >= 1");
    if (values_.size() != static_cast<size_t>(height_) * width_)
      throw ShapeError("AttentionMap: value count does not match H*W");
    for (double v : values_) {
      if (!std::isfinite(v))
        throw ValidationError("AttentionMap: non-finite value");
      if (v < 0.0) throw ValidationError("AttentionMap: negative value");
    }
  }

  AttentionMap(int height, int width, std::string token = {}, int timestep = 0)
      : AttentionMap(height, width,
                     std::vector<double>(
                         static_cast<size_t>(std::max(height, 1)) *
                         static_cast<size_t>(std::max(width, 1)),
                         0.0),
                     std::move(token), timestep) {}

  // Bypasses the non-negativity check (dimension and finiteness checks
  // remain). Used by numeric differentiation, which probes the losses'
  // smooth extension a half-step outside the non-negative domain.
  static AttentionMap unchecked(int height, int width,
                                std::vector<double> values, std::string token,
                                int timestep) {
    AttentionMap m(height, width, std::move(token), timestep);
    if (values.size() != m.values_.size())
      throw ShapeError("AttentionMap: value count does not match H*W");
    for (double v : values)
      if (!std::isfinite(v))
        throw ValidationError("AttentionMap: non-finite value");
    m.values_ = std::move(values);
    return m;
  }

  int height() const { return height_; }
  int width() const { return width_; }
  const std::string& token() const { return token_; }
  int timestep() const { return timestep_; }

  double at(int i, int j) const {
    return values_[static_cast<size_t>(i) * width_ + j];
  }
  bool in_bounds(int i, int j) const {
    return i >= 0 && i < height_ && j >= 0 && j < width_;
  }
  const std::vector<double>& values() const { return values_; }

  double total() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }

 private:
  int height_;
  int width_;
  std::vector<double> values_;
  std::string token_;
  int timestep_;
};

// ---------------------------------------------------------------------------
// AttentionStack

// Per-position softmax-coupled set of maps, one per token. When `normalized`
// the values across tokens sum to 1 at every spatial position (within 1e-6).
struct AttentionStack {
  std::vector<AttentionMap> maps;
  bool normalized = false;

  static constexpr double kNormalizationTol = 1e-6;

  AttentionStack(std::vector<AttentionMap> maps_in, bool normalized_in)
      : maps(std::move(maps_in)), normalized(normalized_in) {
    if (maps.empty()) throw ValidationError("AttentionStack: no maps");
    for (const auto& m : maps) {
      if (m.height() != maps.front().height() ||
          m.width() != maps.front().width())
        throw ShapeError("AttentionStack: maps must share dimensions");
      if (m.timestep() != maps.front().timestep())
        throw ValidationError("AttentionStack: maps must share timestep");
    }
    if (normalized && !check_normalized())
      throw ValidationError(
          "AttentionStack: normalized flag set but per-position sums differ "
          "from 1 beyond tolerance");
  }

  int height() const { return maps.front().height(); }
  int width() const { return maps.front().width(); }
  int token_count() const { return static_cast<int>(maps.size()); }
  int timestep() const { return maps.front().timestep(); }

  // Index of the map belonging to `token_id`, or throws.
  int index_of(const std::string& token_id) const {
    for (size_t k = 0; k < maps.size(); ++k)
      if (maps[k].token() == token_id) return static_cast<int>(k);
    throw ValidationError("AttentionStack: unknown token '" + token_id + "'");
  }
  const AttentionMap& map_for(const std::string& token_id) const {
    return maps[static_cast<size_t>(index_of(token_id))];
  }

  bool check_normalized(double tol = kNormalizationTol) const {
    const int n = height() * width();
    for (int p = 0; p < n; ++p) {
      double s = 0.0;
      for (const auto& m : maps) s += m.values()[static_cast<size_t>(p)];
      if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// Dense row-major matrix, just enough for Q/K score computation.

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c) {}
  Matrix(int r, int c, std::vector<double> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(r) * c)
      throw ShapeError("Matrix: data size does not match rows*cols");
  }
  double at(int r, int c) const {
    return data[static_cast<size_t>(r) * cols + c];
  }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
};

// ---------------------------------------------------------------------------
// Latent logits (the simulator's stand-in for the diffusion latent): an
// H x W x T logit tensor from which the stack is produced by per-position
// softmax over the token axis.

struct Latent {
  int height = 0;
  int width = 0;
  std::vector<std::string> tokens;
  std::vector<double> logits;  // token-major: [token][row][col]
  int step = 0;

  Latent(int h, int w, std::vector<std::string> token_ids)
      : height(h),
        width(w),
        tokens(std::move(token_ids)),
        logits(static_cast<size_t>(h) * w * tokens.size(), 0.0) {
    if (h < 1 || w < 1) throw ValidationError("Latent: bad dimensions");
    if (tokens.empty()) throw ValidationError("Latent: no tokens");
  }

  size_t idx(int t, int i, int j) const {
    return (static_cast<size_t>(t) * height + i) * width + j;
  }
  double at(int t, int i, int j) const { return logits[idx(t, i, j)]; }
  double& at(int t, int i, int j) { return logits[idx(t, i, j)]; }

  bool all_finite() const {
    for (double v : logits)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {

// Softmax over `n` contiguous scores, numerically shifted by the row max.
inline void softmax_inplace(double* x, int n) {
  double m = x[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - m);
    s += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= s;
}

}  // namespace detail

// Per-position softmax over the token axis of a logit tensor. This is the
// only route from latent logits to an attention stack, so every stack the
// simulator sees is normalized by construction.
inline AttentionStack stack_from_latent(const Latent& z) {
  if (!z.all_finite()) throw ValidationError("stack_from_latent: non-finite logits");
  const int T = static_cast<int>(z.tokens.size());
  const int n = z.height * z.width;
  std::vector<std::vector<double>> vals(
      static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(n)));
  std::vector<double> row(static_cast<size_t>(T));
  for (int p = 0; p < n; ++p) {
    const int i = p / z.width;
    const int j = p % z.width;
    for (int t = 0; t < T; ++t) row[static_cast<size_t>(t)] = z.at(t, i, j);
    detail::softmax_inplace(row.data(), T);
    for (int t = 0; t < T; ++t)
      vals[static_cast<size_t>(t)][static_cast<size_t>(p)] =
          row[static_cast<size_t>(t)];
  }
  std::vector<AttentionMap> maps;
  maps.reserve(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t)
    maps.emplace_back(z.height, z.width, std::move(vals[static_cast<size_t>(t)]),
                      z.tokens[static_cast<size_t>(t)], z.step);
  return AttentionStack(std::move(maps), true);
}

// Cross-attention softmax: scores = Q*K^T / sqrt(d_k), softmax taken over the
// token dimension independently at each of the N = H*W spatial positions.
// Row n, column m of the score matrix lands in map m's cell n (row-major).
inline AttentionStack compute_attention(const Matrix& q, const Matrix& k,
                                        int d_k, int height, int width,
                                        std::vector<std::string> tokens,
                                        int timestep = 0) {
  if (d_k <= 0) throw ValidationError("compute_attention: d_k must be > 0");
  if (q.cols != d_k || k.cols != d_k)
    throw ShapeError("compute_attention: Q/K inner dimension must equal d_k");
  if (q.rows != height * width)
    throw ShapeError("compute_attention: Q rows must equal H*W");
  if (static_cast<int>(tokens.size()) != k.rows)
    throw ShapeError("compute_attention: token count must equal K rows");
  for (double v : q.data)
    if (!std::isfinite(v)) throw ValidationError("compute_attention: non-finite Q");
  for (double v : k.data)
    if (!std::isfinite(v)) throw ValidationError("compute_attention: non-finite K");

  const int n = q.rows;
  const int t_count = k.rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));

  Latent z(height, width, std::move(tokens));
  z.step = timestep;
  for (int p = 0; p < n; ++p) {
    const int i = p / width;
    const int j = p % width;
    for (int m = 0; m < t_count; ++m) {
      double dot = 0.0;
      for (int c = 0; c < d_k; ++c) dot += q.at(p, c) * k.at(m, c);
      z.at(m, i, j) = dot * scale;
    }
  }
  return stack_from_latent(z);
}

// Value-weighted mean coordinate of a cell set (the grouping-region center).
// Callers supply non-negative values; only the zero-mass case is rejected.
// The result is projected onto the cells' bounding box, where it always lies
// mathematically but can fall an ulp outside after rounding.
inline Coord weighted_centroid(std::span<const CellValue> cells) {
  if (cells.empty())
    throw ValidationError("weighted_centroid: empty cell list");
  double mass = 0.0, sh = 0.0, sw = 0.0;
  double min_h = cells.front().cell.h, max_h = min_h;
  double min_w = cells.front().cell.w, max_w = min_w;
  for (const auto& cv : cells) {
    mass += cv.value;
    sh += cv.cell.h * cv.value;
    sw += cv.cell.w * cv.value;
    min_h = std::min(min_h, static_cast<double>(cv.cell.h));
    max_h = std::max(max_h, static_cast<double>(cv.cell.h));
    min_w = std::min(min_w, static_cast<double>(cv.cell.w));
    max_w = std::max(max_w, static_cast<double>(cv.cell.w));
  }
  if (mass <= 0.0)
    throw ZeroMassError("weighted_centroid: total value is zero");
  return Coord{std::clamp(sh / mass, min_h, max_h),
               std::clamp(sw / mass, min_w, max_w)};
}

// Location and value of the maximum cell; ties resolve to the first cell in
// row-major scan order.
inline CellValue max_activation(const AttentionMap& map) {
  CellValue best{{0, 0}, map.at(0, 0)};
  for (int i = 0; i < map.height(); ++i)
    for (int j = 0; j < map.width(); ++j)
      if (map.at(i, j) > best.value) best = CellValue{{i, j}, map.at(i, j)};
  return best;
}

}  // namespace attnguide
