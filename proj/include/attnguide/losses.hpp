// Aggregation, isolation, and max-activation losses (Euclidean and cosine
// forms), their lambda-weighted total, and the two-encoder weight split.
//
// Discrete selections (mask placement, argmax location) are recomputed by
// total_loss but can also be frozen and re-applied, which is what makes the
// analytic gradients finite-difference checkable: the frozen evaluation is a
// smooth function of the map values.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "attnguide/core.hpp"
#include "attnguide/regions.hpp"

namespace attnguide {

// ---------------------------------------------------------------------------
// Configuration types

// Balancing parameters of the total loss.
struct LossWeights {
  double agg_sub = 1.25;
  double iso = 2.0;
  double max = 0.25;
  double agg_attr = 0.75;

  void validate() const {
    for (double v : {agg_sub, iso, max, agg_attr})
      if (!std::isfinite(v) || v < 0.0)
        throw ValidationError("LossWeights: weights must be finite and >= 0");
  }
};

enum class Metric { euclidean, cosine };

// Aggregation and isolation each carry exactly one distance metric.
struct MetricChoice {
  Metric aggregation = Metric::euclidean;
  Metric isolation = Metric::euclidean;
};

// Region configuration per token kind, with optional per-token overrides
// (the simulator uses overrides to apply the animal-style radius schedule).
struct RegionConfigSet {
  RegionConfig subject{3, 5.0};
  RegionConfig attribute{3, 6.0};
  std::map<std::string, RegionConfig> per_token;

  const RegionConfig& for_token(const TokenSpec& t) const {
    auto it = per_token.find(t.id);
    if (it != per_token.end()) return it->second;
    return t.kind == TokenKind::attribute ? attribute : subject;
  }
};

struct TokenTerms {
  double agg = 0.0;  // the token's own aggregation loss
  double iso = 0.0;  // mean isolation over pairs involving the token
  double max = 0.0;  // the token's max-activation loss
};

struct LossBreakdown {
  double agg_sub = 0.0;
  double iso = 0.0;
  double max = 0.0;
  double agg_attr = 0.0;
  double total = 0.0;
  std::map<std::string, TokenTerms> per_token;
};

// ---------------------------------------------------------------------------
// Token validation

inline void validate_tokens(const std::vector<TokenSpec>& tokens) {
  std::map<std::string, int> subject_count;
  for (const auto& t : tokens) {
    if (t.id.empty()) throw ValidationError("TokenSpec: empty id");
    if (t.kind == TokenKind::subject) {
      if (++subject_count[t.id] > 1)
        throw ValidationError("TokenSpec: duplicate subject id '" + t.id + "'");
    }
  }
  for (const auto& t : tokens) {
    if (t.kind == TokenKind::attribute &&
        subject_count.find(t.bound_subject) == subject_count.end())
      throw ValidationError("TokenSpec: attribute '" + t.id +
                            "' references unknown subject '" +
                            t.bound_subject + "'");
  }
}

// ---------------------------------------------------------------------------
// Elementary losses

// Value-weighted centroid of the whole map, projected into the map bounds.
inline Coord map_centroid(const AttentionMap& map) {
  double mass = 0.0, sh = 0.0, sw = 0.0;
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) {
      const double v = map.at(i, j);
      mass += v;
      sh += i * v;
      sw += j * v;
    }
  }
  if (mass <= 0.0) throw ZeroMassError("map_centroid: all-zero map");
  return Coord{std::clamp(sh / mass, 0.0, map.height() - 1.0),
               std::clamp(sw / mass, 0.0, map.width() - 1.0)};
}

// Sum of centroid distances over ordered region pairs (each unordered pair
// counted twice, matching the double sum of the aggregation loss). Fewer
// than two regions contribute nothing.
inline double agg_sub_loss(const std::vector<GroupingRegion>& regions) {
  const size_t n = regions.size();
  if (n < 2) return 0.0;
  std::vector<Coord> centers;
  centers.reserve(n);
  for (const auto& r : regions) centers.push_back(r.centroid());
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i)
    for (size_t k = 0; k < n; ++k)
      if (i != k) sum += distance(centers[i], centers[k]);
  return sum;
}

// Attribute maps reuse the aggregation formula with their own region config.
inline double agg_attr_loss(const std::vector<GroupingRegion>& regions) {
  return agg_sub_loss(regions);
}

namespace detail {

inline double cosine_similarity(const std::vector<double>& a,
                                const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw ZeroVectorError("cosine_similarity: zero vector");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::min(1.0, std::max(-1.0, c));
}

// Region vectors for the cosine losses: each region's full disk flattened in
// the shared offset order, with clipped (out-of-bounds) slots zero-filled so
// all vectors share one length. Region cell lists are already stored in
// offset order, which lets the in-bounds slots be matched back positionally.
inline std::vector<std::vector<double>> region_vectors(
    const std::vector<GroupingRegion>& regions) {
  const double radius = regions.front().mask.radius;
  for (const auto& r : regions)
    if (r.mask.radius != radius)
      throw ValidationError("region_vectors: regions must share one radius");
  const std::vector<Cell> offs = disk_offsets(radius);
  std::vector<std::vector<double>> out;
  out.reserve(regions.size());
  for (const auto& r : regions) {
    std::vector<double> v(offs.size(), 0.0);
    size_t cell_idx = 0;
    for (size_t p = 0; p < offs.size(); ++p) {
      const Cell abs{r.mask.center.h + offs[p].h, r.mask.center.w + offs[p].w};
      if (cell_idx < r.cells.size() && r.cells[cell_idx].cell == abs)
        v[p] = r.cells[cell_idx++].value;
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace detail

// Cosine form of the aggregation loss: sum over ordered pairs of
// 1 - cos(v_i, v_k) on the shared-length region vectors.
inline double agg_sub_loss_cos(const std::vector<GroupingRegion>& regions) {
  const size_t n = regions.size();
  if (n < 2) return 0.0;
  const auto vecs = detail::region_vectors(regions);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i)
    for (size_t k = 0; k < n; ++k)
      if (i != k) sum += 1.0 - detail::cosine_similarity(vecs[i], vecs[k]);
  return sum;
}

// Isolation loss for one subject pair: 1 - d/d_max with d the distance
// between whole-map centroids and d_max = sqrt(W^2 + H^2).
inline double iso_loss(const AttentionMap& map_m, const AttentionMap& map_n) {
  if (map_m.height() != map_n.height() || map_m.width() != map_n.width())
    throw ShapeError("iso_loss: maps must share dimensions");
  const double d = distance(map_centroid(map_m), map_centroid(map_n));
  const double d_max = std::sqrt(
      static_cast<double>(map_m.width()) * map_m.width() +
      static_cast<double>(map_m.height()) * map_m.height());
  return 1.0 - d / d_max;
}

// Cosine form of the isolation loss: cosine similarity of the flattened maps.
inline double iso_loss_cos(const AttentionMap& map_m,
                           const AttentionMap& map_n) {
  if (map_m.height() != map_n.height() || map_m.width() != map_n.width())
    throw ShapeError("iso_loss_cos: maps must share dimensions");
  return detail::cosine_similarity(map_m.values(), map_n.values());
}

// Mean pairwise isolation over all unordered subject pairs; 0 when fewer
// than two subjects.
inline double iso_loss_all(const AttentionStack& stack,
                           const std::vector<TokenSpec>& tokens,
                           Metric metric = Metric::euclidean) {
  validate_tokens(tokens);
  std::vector<const AttentionMap*> subjects;
  for (const auto& t : tokens)
    if (t.kind == TokenKind::subject)
      subjects.push_back(&stack.map_for(t.id));
  if (subjects.size() < 2) return 0.0;
  double sum = 0.0;
  int pairs = 0;
  for (size_t m = 0; m < subjects.size(); ++m) {
    for (size_t n = m + 1; n < subjects.size(); ++n) {
      sum += metric == Metric::euclidean
                 ? iso_loss(*subjects[m], *subjects[n])
                 : iso_loss_cos(*subjects[m], *subjects[n]);
      ++pairs;
    }
  }
  return sum / pairs;
}

// Max-activation loss: 1 - v(max cell).
inline double max_loss(const AttentionMap& map) {
  return 1.0 - max_activation(map).value;
}

// ---------------------------------------------------------------------------
// Frozen discrete selections

// Mask placements and argmax cells captured at one evaluation point. Values
// under the masks stay live; only the discrete choices are pinned.
struct FrozenToken {
  std::vector<CircularMask> masks;
  Cell argmax{0, 0};
};

struct FrozenSelection {
  std::map<std::string, FrozenToken> by_token;
};

inline FrozenSelection freeze_selection(const AttentionStack& stack,
                                        const std::vector<TokenSpec>& tokens,
                                        const RegionConfigSet& cfgs) {
  validate_tokens(tokens);
  FrozenSelection fs;
  for (const auto& t : tokens) {
    const AttentionMap& map = stack.map_for(t.id);
    FrozenToken ft;
    for (const auto& region : identify_regions(map, cfgs.for_token(t)))
      ft.masks.push_back(region.mask);
    ft.argmax = max_activation(map).cell;
    fs.by_token[t.id] = std::move(ft);
  }
  return fs;
}

inline std::vector<GroupingRegion> rebuild_regions(
    const AttentionMap& map, const std::vector<CircularMask>& masks) {
  std::vector<GroupingRegion> regions;
  regions.reserve(masks.size());
  for (const auto& m : masks) regions.push_back(build_region(map, m));
  return regions;
}

// ---------------------------------------------------------------------------
// Total loss

// Evaluates the weighted total with the given frozen selections. Per-kind
// terms are means across tokens of that kind so the scale is stable across
// prompt sizes; isolation averages over unordered subject pairs.
inline LossBreakdown total_loss_frozen(const AttentionStack& stack,
                                       const std::vector<TokenSpec>& tokens,
                                       const LossWeights& weights,
                                       const FrozenSelection& frozen,
                                       const MetricChoice& metrics = {}) {
  validate_tokens(tokens);
  weights.validate();

  std::vector<const TokenSpec*> subjects, attributes;
  for (const auto& t : tokens)
    (t.kind == TokenKind::subject ? subjects : attributes).push_back(&t);

  LossBreakdown b;

  auto agg_for = [&](const TokenSpec& t) {
    const AttentionMap& map = stack.map_for(t.id);
    const auto regions = rebuild_regions(map, frozen.by_token.at(t.id).masks);
    return metrics.aggregation == Metric::euclidean ? agg_sub_loss(regions)
                                                    : agg_sub_loss_cos(regions);
  };

  if (!subjects.empty()) {
    double agg_sum = 0.0, max_sum = 0.0;
    for (const auto* s : subjects) {
      const double a = agg_for(*s);
      const AttentionMap& map = stack.map_for(s->id);
      const Cell mx = frozen.by_token.at(s->id).argmax;
      const double m = 1.0 - map.at(mx.h, mx.w);
      b.per_token[s->id].agg = a;
      b.per_token[s->id].max = m;
      agg_sum += a;
      max_sum += m;
    }
    b.agg_sub = agg_sum / static_cast<double>(subjects.size());
    b.max = max_sum / static_cast<double>(subjects.size());
  }

  if (!attributes.empty()) {
    double attr_sum = 0.0;
    for (const auto* a : attributes) {
      const double v = agg_for(*a);
      b.per_token[a->id].agg = v;
      attr_sum += v;
    }
    b.agg_attr = attr_sum / static_cast<double>(attributes.size());
  }

  if (subjects.size() >= 2) {
    double sum = 0.0;
    int pairs = 0;
    for (size_t m = 0; m < subjects.size(); ++m) {
      for (size_t n = m + 1; n < subjects.size(); ++n) {
        const AttentionMap& mm = stack.map_for(subjects[m]->id);
        const AttentionMap& mn = stack.map_for(subjects[n]->id);
        const double v = metrics.isolation == Metric::euclidean
                             ? iso_loss(mm, mn)
                             : iso_loss_cos(mm, mn);
        b.per_token[subjects[m]->id].iso += v;
        b.per_token[subjects[n]->id].iso += v;
        sum += v;
        ++pairs;
      }
    }
    b.iso = sum / pairs;
    for (const auto* s : subjects)
      b.per_token[s->id].iso /= static_cast<double>(subjects.size() - 1);
  }

  b.total = weights.agg_sub * b.agg_sub + weights.iso * b.iso +
            weights.max * b.max + weights.agg_attr * b.agg_attr;
  return b;
}

// Total loss with discrete selections recomputed at the evaluation point.
inline LossBreakdown total_loss(const AttentionStack& stack,
                                const std::vector<TokenSpec>& tokens,
                                const LossWeights& weights,
                                const RegionConfigSet& cfgs = {},
                                const MetricChoice& metrics = {}) {
  return total_loss_frozen(stack, tokens, weights,
                           freeze_selection(stack, tokens, cfgs), metrics);
}

// ---------------------------------------------------------------------------
// Two-encoder weight split

// Normalizes the two encoders' peak activations into loss weights. The
// smaller ratio is evaluated by division and the larger as its complement,
// so the pair sums to 1 exactly.
inline std::pair<double, double> multi_encoder_weights(double max_clip,
                                                       double max_t5) {
  if (!std::isfinite(max_clip) || !std::isfinite(max_t5) || max_clip < 0.0 ||
      max_t5 < 0.0)
    throw ValidationError("multi_encoder_weights: inputs must be finite and >= 0");
  const double tau = max_clip + max_t5;
  if (tau <= 0.0)
    throw ValidationError(
        "multi_encoder_weights: max_clip + max_t5 must be > 0");
  if (max_clip <= max_t5) {
    const double lc = max_clip / tau;
    return {lc, 1.0 - lc};
  }
  const double lt = max_t5 / tau;
  return {1.0 - lt, lt};
}

}  // namespace attnguide
