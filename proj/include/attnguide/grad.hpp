// Analytic gradients of the total loss with respect to attention-map values
// and, through the per-position softmax Jacobian, latent logits. Discrete
// selections (mask placement, argmax) are frozen before differentiation and
// treated as constants, so the differentiated function is smooth and can be
// verified against the central-finite-difference oracle that lives here too.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "attnguide/core.hpp"
#include "attnguide/losses.hpp"
#include "attnguide/regions.hpp"

namespace attnguide {

enum class GradWrt { attention_values, latent_logits };

// H x W x T field matching the shape of its stack, token-major.
struct GradientField {
  int height = 0;
  int width = 0;
  std::vector<std::string> tokens;
  GradWrt wrt = GradWrt::attention_values;
  std::vector<double> values;

  GradientField(int h, int w, std::vector<std::string> token_ids, GradWrt kind)
      : height(h),
        width(w),
        tokens(std::move(token_ids)),
        wrt(kind),
        values(static_cast<size_t>(h) * w * tokens.size(), 0.0) {}

  size_t idx(int t, int i, int j) const {
    return (static_cast<size_t>(t) * height + i) * width + j;
  }
  double at(int t, int i, int j) const { return values[idx(t, i, j)]; }
  double& at(int t, int i, int j) { return values[idx(t, i, j)]; }

  int token_index(const std::string& id) const {
    for (size_t k = 0; k < tokens.size(); ++k)
      if (tokens[k] == id) return static_cast<int>(k);
    throw ValidationError("GradientField: unknown token '" + id + "'");
  }

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }
  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace detail {

// Distance guard used inside gradients only: the derivative of a Euclidean
// distance is singular where the distance vanishes, so denominators use
// sqrt(dh^2 + dw^2 + eps_d^2). Loss values themselves stay exact.
constexpr double kDistanceEps = 1e-8;

inline double guarded_distance(Coord a, Coord b) {
  const double dh = a.h - b.h;
  const double dw = a.w - b.w;
  return std::sqrt(dh * dh + dw * dw + kDistanceEps * kDistanceEps);
}

// Distributes a gradient on a region centroid onto the region's cells:
// d(centroid_h)/d(v_c) = (h_c - centroid_h) / mass, likewise for w.
inline void spread_centroid_grad(const GroupingRegion& region, double g_h,
                                 double g_w, int token, GradientField& out) {
  const Coord b = region.centroid();
  for (const auto& cv : region.cells) {
    out.at(token, cv.cell.h, cv.cell.w) +=
        (g_h * (cv.cell.h - b.h) + g_w * (cv.cell.w - b.w)) / region.mass;
  }
}

// Gradient of the Euclidean aggregation loss (sum over ordered pairs of
// centroid distances), scaled by `weight`.
inline void grad_agg_euclidean(const std::vector<GroupingRegion>& regions,
                               double weight, int token, GradientField& out) {
  const size_t n = regions.size();
  if (n < 2) return;
  std::vector<Coord> centers;
  centers.reserve(n);
  for (const auto& r : regions) centers.push_back(r.centroid());
  for (size_t i = 0; i < n; ++i) {
    double g_h = 0.0, g_w = 0.0;
    for (size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const double d = guarded_distance(centers[i], centers[k]);
      g_h += 2.0 * (centers[i].h - centers[k].h) / d;
      g_w += 2.0 * (centers[i].w - centers[k].w) / d;
    }
    spread_centroid_grad(regions[i], weight * g_h, weight * g_w, token, out);
  }
}

// Gradient of the cosine aggregation loss on the shared-length region
// vectors; vector slots map back to in-bounds disk cells.
inline void grad_agg_cosine(const std::vector<GroupingRegion>& regions,
                            double weight, int token, GradientField& out) {
  const size_t n = regions.size();
  if (n < 2) return;
  const auto vecs = region_vectors(regions);
  const size_t len = vecs.front().size();

  std::vector<double> norms(n);
  for (size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : vecs[i]) s += v * v;
    if (s == 0.0)
      throw ZeroVectorError("grad_agg_cosine: zero region vector");
    norms[i] = std::sqrt(s);
  }

  const std::vector<Cell> offs = disk_offsets(regions.front().mask.radius);
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> g(len, 0.0);
    for (size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      double dot = 0.0;
      for (size_t p = 0; p < len; ++p) dot += vecs[i][p] * vecs[k][p];
      const double cos_ik = dot / (norms[i] * norms[k]);
      // d/dv_i of 2*(1 - cos_ik): the pair appears twice in the ordered sum.
      for (size_t p = 0; p < len; ++p) {
        g[p] += 2.0 * (cos_ik * vecs[i][p] / (norms[i] * norms[i]) -
                       vecs[k][p] / (norms[i] * norms[k]));
      }
    }
    size_t cell_idx = 0;
    const auto& region = regions[i];
    for (size_t p = 0; p < len; ++p) {
      const Cell abs{region.mask.center.h + offs[p].h,
                     region.mask.center.w + offs[p].w};
      if (cell_idx < region.cells.size() &&
          region.cells[cell_idx].cell == abs) {
        out.at(token, abs.h, abs.w) += weight * g[p];
        ++cell_idx;
      }
    }
  }
}

// Gradient of 1 - d/d_max on whole-map centroids, for one subject pair.
inline void grad_iso_euclidean(const AttentionMap& map_m,
                               const AttentionMap& map_n, double weight,
                               int tok_m, int tok_n, GradientField& out) {
  const Coord bm = map_centroid(map_m);
  const Coord bn = map_centroid(map_n);
  const double d_max =
      std::sqrt(static_cast<double>(map_m.width()) * map_m.width() +
                static_cast<double>(map_m.height()) * map_m.height());
  const double d = guarded_distance(bm, bn);
  const double g_hm = -weight * (bm.h - bn.h) / (d * d_max);
  const double g_wm = -weight * (bm.w - bn.w) / (d * d_max);

  auto spread_whole_map = [&](const AttentionMap& map, Coord b, double g_h,
                              double g_w, int token) {
    const double mass = map.total();
    for (int i = 0; i < map.height(); ++i)
      for (int j = 0; j < map.width(); ++j)
        out.at(token, i, j) += (g_h * (i - b.h) + g_w * (j - b.w)) / mass;
  };
  spread_whole_map(map_m, bm, g_hm, g_wm, tok_m);
  spread_whole_map(map_n, bn, -g_hm, -g_wm, tok_n);
}

// Gradient of cos(A_m, A_n) on the flattened maps.
inline void grad_iso_cosine(const AttentionMap& map_m,
                            const AttentionMap& map_n, double weight,
                            int tok_m, int tok_n, GradientField& out) {
  const auto& a = map_m.values();
  const auto& b = map_n.values();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t p = 0; p < a.size(); ++p) {
    dot += a[p] * b[p];
    na += a[p] * a[p];
    nb += b[p] * b[p];
  }
  if (na == 0.0 || nb == 0.0)
    throw ZeroVectorError("grad_iso_cosine: zero map");
  const double norm_a = std::sqrt(na);
  const double norm_b = std::sqrt(nb);
  const double cos_mn = dot / (norm_a * norm_b);
  const int w = map_m.width();
  for (size_t p = 0; p < a.size(); ++p) {
    const int i = static_cast<int>(p) / w;
    const int j = static_cast<int>(p) % w;
    out.at(tok_m, i, j) +=
        weight * (b[p] / (norm_a * norm_b) - cos_mn * a[p] / na);
    out.at(tok_n, i, j) +=
        weight * (a[p] / (norm_a * norm_b) - cos_mn * b[p] / nb);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Analytic gradient w.r.t. attention values

inline GradientField loss_gradient_frozen(const AttentionStack& stack,
                                          const std::vector<TokenSpec>& tokens,
                                          const LossWeights& weights,
                                          const FrozenSelection& frozen,
                                          const MetricChoice& metrics = {}) {
  validate_tokens(tokens);
  weights.validate();

  std::vector<std::string> stack_tokens;
  stack_tokens.reserve(stack.maps.size());
  for (const auto& m : stack.maps) stack_tokens.push_back(m.token());
  GradientField out(stack.height(), stack.width(), stack_tokens,
                    GradWrt::attention_values);

  std::vector<const TokenSpec*> subjects, attributes;
  for (const auto& t : tokens)
    (t.kind == TokenKind::subject ? subjects : attributes).push_back(&t);
  const double ns = static_cast<double>(subjects.size());
  const double na = static_cast<double>(attributes.size());

  auto agg_grad_for = [&](const TokenSpec& t, double weight) {
    if (weight <= 0.0) return;
    const AttentionMap& map = stack.map_for(t.id);
    const auto regions = rebuild_regions(map, frozen.by_token.at(t.id).masks);
    const int tok = out.token_index(t.id);
    if (metrics.aggregation == Metric::euclidean)
      detail::grad_agg_euclidean(regions, weight, tok, out);
    else
      detail::grad_agg_cosine(regions, weight, tok, out);
  };

  for (const auto* s : subjects) {
    agg_grad_for(*s, weights.agg_sub / ns);
    if (weights.max > 0.0) {
      const Cell mx = frozen.by_token.at(s->id).argmax;
      out.at(out.token_index(s->id), mx.h, mx.w) -= weights.max / ns;
    }
  }
  for (const auto* a : attributes) agg_grad_for(*a, weights.agg_attr / na);

  if (weights.iso > 0.0 && subjects.size() >= 2) {
    const double pairs = ns * (ns - 1.0) / 2.0;
    for (size_t m = 0; m < subjects.size(); ++m) {
      for (size_t n = m + 1; n < subjects.size(); ++n) {
        const AttentionMap& mm = stack.map_for(subjects[m]->id);
        const AttentionMap& mn = stack.map_for(subjects[n]->id);
        const int tm = out.token_index(subjects[m]->id);
        const int tn = out.token_index(subjects[n]->id);
        if (metrics.isolation == Metric::euclidean)
          detail::grad_iso_euclidean(mm, mn, weights.iso / pairs, tm, tn, out);
        else
          detail::grad_iso_cosine(mm, mn, weights.iso / pairs, tm, tn, out);
      }
    }
  }
  return out;
}

inline GradientField loss_gradient(const AttentionStack& stack,
                                   const std::vector<TokenSpec>& tokens,
                                   const LossWeights& weights,
                                   const RegionConfigSet& cfgs = {},
                                   const MetricChoice& metrics = {}) {
  return loss_gradient_frozen(stack, tokens, weights,
                              freeze_selection(stack, tokens, cfgs), metrics);
}

// ---------------------------------------------------------------------------
// Chain rule through the per-position softmax

// dL/dz[p,t] = sum_t' dL/dA[p,t'] * A[p,t'] * (delta_tt' - A[p,t]).
inline GradientField chain_through_softmax(const GradientField& grad_values,
                                           const AttentionStack& stack) {
  GradientField out(grad_values.height, grad_values.width, grad_values.tokens,
                    GradWrt::latent_logits);
  const int t_count = static_cast<int>(grad_values.tokens.size());
  for (int i = 0; i < grad_values.height; ++i) {
    for (int j = 0; j < grad_values.width; ++j) {
      double weighted_sum = 0.0;  // sum_t' dL/dA[t'] * A[t']
      for (int t = 0; t < t_count; ++t)
        weighted_sum += grad_values.at(t, i, j) * stack.maps[t].at(i, j);
      for (int t = 0; t < t_count; ++t) {
        const double a = stack.maps[t].at(i, j);
        out.at(t, i, j) = a * (grad_values.at(t, i, j) - weighted_sum);
      }
    }
  }
  return out;
}

inline GradientField latent_gradient_frozen(const Latent& latent,
                                            const std::vector<TokenSpec>& tokens,
                                            const LossWeights& weights,
                                            const FrozenSelection& frozen,
                                            const MetricChoice& metrics = {}) {
  const AttentionStack stack = stack_from_latent(latent);
  const GradientField g =
      loss_gradient_frozen(stack, tokens, weights, frozen, metrics);
  return chain_through_softmax(g, stack);
}

inline GradientField latent_gradient(const Latent& latent,
                                     const std::vector<TokenSpec>& tokens,
                                     const LossWeights& weights,
                                     const RegionConfigSet& cfgs = {},
                                     const MetricChoice& metrics = {}) {
  const AttentionStack stack = stack_from_latent(latent);
  const FrozenSelection frozen = freeze_selection(stack, tokens, cfgs);
  const GradientField g =
      loss_gradient_frozen(stack, tokens, weights, frozen, metrics);
  return chain_through_softmax(g, stack);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

// Central differences per attention-value cell: (L(x+eps) - L(x-eps))/(2 eps).
// The evaluator must be deterministic and carry its own frozen selections.
template <typename LossFn>
GradientField finite_diff_gradient(LossFn&& loss, const AttentionStack& point,
                                   double eps = 1e-6) {
  if (!(eps > 0.0)) throw ValidationError("finite_diff_gradient: eps must be > 0");
  std::vector<std::string> token_ids;
  for (const auto& m : point.maps) token_ids.push_back(m.token());
  GradientField out(point.height(), point.width(), token_ids,
                    GradWrt::attention_values);

  const int t_count = point.token_count();
  for (int t = 0; t < t_count; ++t) {
    std::vector<double> vals = point.maps[static_cast<size_t>(t)].values();
    for (size_t p = 0; p < vals.size(); ++p) {
      const double saved = vals[p];
      auto eval_at = [&](double v) {
        vals[p] = v;
        std::vector<AttentionMap> maps;
        maps.reserve(point.maps.size());
        for (int k = 0; k < t_count; ++k) {
          if (k == t)
            maps.push_back(AttentionMap::unchecked(
                point.height(), point.width(), vals,
                point.maps[static_cast<size_t>(k)].token(), point.timestep()));
          else
            maps.push_back(point.maps[static_cast<size_t>(k)]);
        }
        const double result =
            loss(AttentionStack(std::move(maps), /*normalized=*/false));
        vals[p] = saved;
        if (!std::isfinite(result))
          throw ValidationError("finite_diff_gradient: non-finite evaluation");
        return result;
      };
      const double plus = eval_at(saved + eps);
      const double minus = eval_at(saved - eps);
      out.values[out.idx(t, static_cast<int>(p) / point.width(),
                         static_cast<int>(p) % point.width())] =
          (plus - minus) / (2.0 * eps);
    }
  }
  return out;
}

// Central differences per logit; the stack is re-softmaxed per probe.
template <typename LossFn>
GradientField finite_diff_gradient_latent(LossFn&& loss, const Latent& point,
                                          double eps = 1e-6) {
  if (!(eps > 0.0)) throw ValidationError("finite_diff_gradient: eps must be > 0");
  GradientField out(point.height, point.width, point.tokens,
                    GradWrt::latent_logits);
  Latent probe = point;
  for (size_t p = 0; p < probe.logits.size(); ++p) {
    const double saved = probe.logits[p];
    probe.logits[p] = saved + eps;
    const double plus = loss(stack_from_latent(probe));
    probe.logits[p] = saved - eps;
    const double minus = loss(stack_from_latent(probe));
    probe.logits[p] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus))
      throw ValidationError("finite_diff_gradient: non-finite evaluation");
    out.values[p] = (plus - minus) / (2.0 * eps);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckConfig {
  double eps = 1e-6;
  double rel_tol = 1e-5;
  // Cells where both gradients are below abs_tol/rel_tol in magnitude are
  // compared on that floor instead, so finite-difference round-off on
  // near-zero entries cannot dominate the relative error.
  double abs_tol = 1e-7;
};

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  Cell worst_cell{0, 0};
  std::string worst_token;
  bool pass = false;
};

inline GradCheckReport compare_gradient_fields(const GradientField& analytic,
                                               const GradientField& numeric,
                                               const GradCheckConfig& cfg = {}) {
  if (analytic.values.size() != numeric.values.size())
    throw ShapeError("compare_gradient_fields: shape mismatch");
  GradCheckReport report;
  const double floor = cfg.abs_tol / cfg.rel_tol;
  for (size_t t = 0; t < analytic.tokens.size(); ++t) {
    for (int i = 0; i < analytic.height; ++i) {
      for (int j = 0; j < analytic.width; ++j) {
        const double a = analytic.at(static_cast<int>(t), i, j);
        const double n = numeric.at(static_cast<int>(t), i, j);
        const double abs_err = std::abs(a - n);
        const double rel_err =
            abs_err / std::max({std::abs(a), std::abs(n), floor});
        report.max_abs_err = std::max(report.max_abs_err, abs_err);
        if (rel_err > report.max_rel_err) {
          report.max_rel_err = rel_err;
          report.worst_cell = Cell{i, j};
          report.worst_token = analytic.tokens[t];
        }
      }
    }
  }
  report.pass = report.max_rel_err <= cfg.rel_tol;
  return report;
}

// Checks the analytic value-space gradient against central differences, both
// under one frozen selection taken at the unperturbed point.
inline GradCheckReport gradcheck(const AttentionStack& stack,
                                 const std::vector<TokenSpec>& tokens,
                                 const LossWeights& weights,
                                 const RegionConfigSet& cfgs = {},
                                 const MetricChoice& metrics = {},
                                 const GradCheckConfig& cfg = {}) {
  const FrozenSelection frozen = freeze_selection(stack, tokens, cfgs);
  const GradientField analytic =
      loss_gradient_frozen(stack, tokens, weights, frozen, metrics);
  const GradientField numeric = finite_diff_gradient(
      [&](const AttentionStack& s) {
        return total_loss_frozen(s, tokens, weights, frozen, metrics).total;
      },
      stack, cfg.eps);
  return compare_gradient_fields(analytic, numeric, cfg);
}

inline GradCheckReport gradcheck_latent(const Latent& latent,
                                        const std::vector<TokenSpec>& tokens,
                                        const LossWeights& weights,
                                        const RegionConfigSet& cfgs = {},
                                        const MetricChoice& metrics = {},
                                        const GradCheckConfig& cfg = {}) {
  const AttentionStack stack = stack_from_latent(latent);
  const FrozenSelection frozen = freeze_selection(stack, tokens, cfgs);
  const GradientField analytic =
      latent_gradient_frozen(latent, tokens, weights, frozen, metrics);
  const GradientField numeric = finite_diff_gradient_latent(
      [&](const AttentionStack& s) {
        return total_loss_frozen(s, tokens, weights, frozen, metrics).total;
      },
      latent, cfg.eps);
  return compare_gradient_fields(analytic, numeric, cfg);
}

}  // namespace attnguide
