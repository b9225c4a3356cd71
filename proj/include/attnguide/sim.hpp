// Desk-scale stand-in for the denoising loop: evolves a latent logit tensor
// by z' = z - alpha * grad(L) over a configurable schedule, with a halving
// line search as the step-size safeguard, recording a full trajectory of
// losses, centroids, and spatial metrics.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "attnguide/core.hpp"
#include "attnguide/grad.hpp"
#include "attnguide/losses.hpp"
#include "attnguide/metrics.hpp"
#include "attnguide/regions.hpp"

namespace attnguide {

struct SimulationError : std::runtime_error {
  int step;
  SimulationError(int step_in, const std::string& msg)
      : std::runtime_error("step " + std::to_string(step_in) + ": " + msg),
        step(step_in) {}
};

// ---------------------------------------------------------------------------
// Deterministic Gaussian source: std::mt19937_64 (bit-exact by standard)
// feeding Box-Muller. All simulator randomness flows from one config seed
// through this stream, so runs replay exactly.
class GaussianRng {
 public:
  explicit GaussianRng(std::uint64_t seed) : engine_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0,1], u2 in [0,1): 53-bit mantissas from the raw stream.
    const double u1 =
        (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Configuration

struct GaussianBump {
  Coord center;
  double amplitude = 1.0;
  double stddev = 1.0;
};

// Synthetic scattered initializations: per token, a list of Gaussian bumps
// summed into the initial logits.
struct BlobSpec {
  std::map<std::string, std::vector<GaussianBump>> bumps;
};

enum class SubjectStyle { object, animal };

struct SimConfig {
  int height = 16;
  int width = 16;
  int total_steps = 50;
  int optimize_steps = 25;

  // Step size on logits. The halving safeguard retries a step at alpha/2
  // (up to max_halvings times) whenever it would increase the total loss,
  // and leaves the latent unchanged if every retry fails. A non-empty
  // alpha_schedule supplies the starting step size per optimization step
  // instead (the last entry carries past its end).
  double alpha = 50.0;
  std::vector<double> alpha_schedule;
  int max_halvings = 10;

  double init_noise = 0.0;  // stddev of Gaussian noise added to initial logits
  double step_noise = 0.0;  // stddev of per-step noise, decaying linearly to 0
  std::uint64_t seed = 0;

  LossWeights weights;
  MetricChoice metrics;

  // Region configs per token kind; animal-style subjects ramp their radius
  // across the optimization window.
  RegionConfig object_regions{3, 5.0};
  int animal_region_count = 2;
  double animal_radius_start = 2.0;
  double animal_radius_end = 8.0;
  RegionConfig attribute_regions{3, 6.0};
  std::map<std::string, SubjectStyle> subject_styles;  // default: object

  std::vector<TokenSpec> tokens;               // loss-bearing tokens
  std::vector<std::string> background_tokens;  // extra maps, carry no loss

  double overlap_quantile = 0.7;
  MoranConfig moran;

  void validate() const {
    if (height < 1 || width < 1) throw ValidationError("SimConfig: bad dimensions");
    if (total_steps < 1) throw ValidationError("SimConfig: total_steps must be >= 1");
    if (optimize_steps < 0 || optimize_steps > total_steps)
      throw ValidationError("SimConfig: optimize_steps must lie in [0, total_steps]");
    if (!(alpha > 0.0)) throw ValidationError("SimConfig: alpha must be > 0");
    for (double a : alpha_schedule)
      if (!(a > 0.0))
        throw ValidationError("SimConfig: alpha_schedule values must be > 0");
    if (max_halvings < 0) throw ValidationError("SimConfig: max_halvings must be >= 0");
    if (init_noise < 0.0 || step_noise < 0.0)
      throw ValidationError("SimConfig: noise scales must be >= 0");
    weights.validate();
    object_regions.validate();
    attribute_regions.validate();
    if (animal_region_count < 1)
      throw ValidationError("SimConfig: animal_region_count must be >= 1");
    if (!(animal_radius_start > 0.0) || !(animal_radius_end > 0.0))
      throw ValidationError("SimConfig: animal radii must be > 0");
    validate_tokens(tokens);
    if (tokens.empty()) throw ValidationError("SimConfig: no tokens");
  }

  std::vector<std::string> all_token_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : tokens) ids.push_back(t.id);
    for (const auto& b : background_tokens) ids.push_back(b);
    return ids;
  }

  SubjectStyle style_of(const std::string& id) const {
    auto it = subject_styles.find(id);
    return it == subject_styles.end() ? SubjectStyle::object : it->second;
  }

  double alpha_at(int step) const {
    if (alpha_schedule.empty()) return alpha;
    const size_t idx = std::min(static_cast<size_t>(step),
                                alpha_schedule.size() - 1);
    return alpha_schedule[idx];
  }

  // Region configs resolved at one step: animal-style subjects take the
  // scheduled radius (pinned to its end value after the optimization window).
  RegionConfigSet region_set_at(int step) const {
    RegionConfigSet set;
    set.subject = object_regions;
    set.attribute = attribute_regions;
    if (optimize_steps > 0) {
      const int sched_step = std::min(step, optimize_steps - 1);
      for (const auto& t : tokens) {
        if (t.kind == TokenKind::subject &&
            style_of(t.id) == SubjectStyle::animal) {
          set.per_token[t.id] = RegionConfig{
              animal_region_count,
              radius_schedule(sched_step, optimize_steps, animal_radius_start,
                              animal_radius_end)};
        }
      }
    }
    return set;
  }
};

// ---------------------------------------------------------------------------
// Trajectory

struct StepRecord {
  int step = 0;
  LossBreakdown losses;
  double grad_norm = 0.0;
  double alpha_used = 0.0;  // 0 when the step left the latent unchanged
  std::map<std::string, std::vector<Coord>> region_centroids;
  std::map<std::string, double> region_spread;
  std::map<std::string, Coord> map_centroids;
  std::map<std::string, double> morans;  // subjects only; 0 on constant maps
  double d_over_dmax = 0.0;              // mean over subject pairs
  double overlap = 0.0;                  // mean over subject pairs
};

struct Trajectory {
  std::vector<StepRecord> steps;
  std::vector<TokenSpec> tokens;
  std::optional<AttentionStack> final_stack;
};

// ---------------------------------------------------------------------------
// Operations

// Initial logits: sum of Gaussian bumps per token plus seeded Gaussian noise.
// Noise is drawn token-major, row-major, one value per logit, only when
// noise_scale > 0.
inline Latent init_latent(int height, int width,
                          const std::vector<std::string>& token_ids,
                          const BlobSpec& blobs, double noise_scale,
                          GaussianRng& rng) {
  for (const auto& [id, _] : blobs.bumps) {
    bool known = false;
    for (const auto& t : token_ids) known = known || t == id;
    if (!known)
      throw ValidationError("init_latent: blob for unknown token '" + id + "'");
  }
  Latent z(height, width, token_ids);
  for (size_t t = 0; t < token_ids.size(); ++t) {
    const auto it = blobs.bumps.find(token_ids[t]);
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        double v = 0.0;
        if (it != blobs.bumps.end()) {
          for (const auto& bump : it->second) {
            if (!(bump.stddev > 0.0))
              throw ValidationError("init_latent: bump stddev must be > 0");
            const double dh = i - bump.center.h;
            const double dw = j - bump.center.w;
            v += bump.amplitude *
                 std::exp(-(dh * dh + dw * dw) / (2.0 * bump.stddev * bump.stddev));
          }
        }
        if (noise_scale > 0.0) v += noise_scale * rng.next();
        z.at(static_cast<int>(t), i, j) = v;
      }
    }
  }
  return z;
}

inline Latent init_latent(int height, int width,
                          const std::vector<std::string>& token_ids,
                          const BlobSpec& blobs, double noise_scale,
                          std::uint64_t seed) {
  GaussianRng rng(seed);
  return init_latent(height, width, token_ids, blobs, noise_scale, rng);
}

namespace detail {

inline StepRecord make_record(const AttentionStack& stack,
                              const SimConfig& cfg,
                              const RegionConfigSet& region_set, int step) {
  StepRecord rec;
  rec.step = step;
  const FrozenSelection frozen =
      freeze_selection(stack, cfg.tokens, region_set);
  rec.losses = total_loss_frozen(stack, cfg.tokens, cfg.weights, frozen,
                                 cfg.metrics);

  std::vector<const TokenSpec*> subjects;
  for (const auto& t : cfg.tokens) {
    const AttentionMap& map = stack.map_for(t.id);
    const auto regions = rebuild_regions(map, frozen.by_token.at(t.id).masks);
    auto& centroids = rec.region_centroids[t.id];
    for (const auto& r : regions) centroids.push_back(r.centroid());
    rec.region_spread[t.id] = regions.empty() ? 0.0 : centroid_spread(regions);
    rec.map_centroids[t.id] = map_centroid(map);
    if (t.kind == TokenKind::subject) {
      subjects.push_back(&t);
      double lo = map.values().front(), hi = lo;
      for (double v : map.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      // constant map: no variance, record 0 so trajectories stay finite
      rec.morans[t.id] = lo < hi ? morans_i(map, cfg.moran) : 0.0;
    }
  }

  if (subjects.size() >= 2) {
    const double d_max =
        std::sqrt(static_cast<double>(stack.width()) * stack.width() +
                  static_cast<double>(stack.height()) * stack.height());
    double d_sum = 0.0, ov_sum = 0.0;
    int pairs = 0;
    for (size_t m = 0; m < subjects.size(); ++m) {
      for (size_t n = m + 1; n < subjects.size(); ++n) {
        const AttentionMap& mm = stack.map_for(subjects[m]->id);
        const AttentionMap& mn = stack.map_for(subjects[n]->id);
        d_sum += distance(map_centroid(mm), map_centroid(mn)) / d_max;
        ov_sum += overlap_ratio(mm, mn, cfg.overlap_quantile);
        ++pairs;
      }
    }
    rec.d_over_dmax = d_sum / pairs;
    rec.overlap = ov_sum / pairs;
  }
  return rec;
}

}  // namespace detail

// One simulator step: softmax the latent, record metrics, and if the step
// lies in the optimization window apply one safeguarded gradient update.
// Optional per-step noise lands after the update with scale decaying
// linearly to zero across the run.
inline std::pair<Latent, StepRecord> sim_step(const Latent& latent, int step,
                                              const SimConfig& cfg,
                                              GaussianRng& rng) {
  if (step < 0 || step >= cfg.total_steps)
    throw ValidationError("sim_step: step out of range");

  const RegionConfigSet region_set = cfg.region_set_at(step);
  const AttentionStack stack = stack_from_latent(latent);
  StepRecord rec = detail::make_record(stack, cfg, region_set, step);

  Latent next = latent;
  const bool any_weight = cfg.weights.agg_sub > 0.0 || cfg.weights.iso > 0.0 ||
                          cfg.weights.max > 0.0 || cfg.weights.agg_attr > 0.0;
  if (step < cfg.optimize_steps && any_weight) {
    const GradientField grad = latent_gradient(latent, cfg.tokens, cfg.weights,
                                               region_set, cfg.metrics);
    if (!grad.all_finite())
      throw SimulationError(step, "non-finite gradient; aborting run");
    rec.grad_norm = grad.norm();

    double alpha = cfg.alpha_at(step);
    for (int attempt = 0; attempt <= cfg.max_halvings; ++attempt) {
      Latent candidate = latent;
      for (size_t p = 0; p < candidate.logits.size(); ++p)
        candidate.logits[p] -= alpha * grad.values[p];
      const double cand_total =
          total_loss(stack_from_latent(candidate), cfg.tokens, cfg.weights,
                     region_set, cfg.metrics)
              .total;
      if (cand_total <= rec.losses.total) {
        next = std::move(candidate);
        rec.alpha_used = alpha;
        break;
      }
      alpha *= 0.5;
    }
  }

  if (cfg.step_noise > 0.0) {
    const double scale =
        cfg.total_steps > 1
            ? cfg.step_noise *
                  (1.0 - static_cast<double>(step) / (cfg.total_steps - 1))
            : cfg.step_noise;
    for (double& v : next.logits) v += scale * rng.next();
  }
  next.step = step + 1;
  return {std::move(next), std::move(rec)};
}

// Full run: init from blobs, then sim_step for every step.
inline Trajectory run(const SimConfig& cfg, const BlobSpec& blobs) {
  cfg.validate();
  GaussianRng rng(cfg.seed);
  Latent latent = init_latent(cfg.height, cfg.width, cfg.all_token_ids(), blobs,
                              cfg.init_noise, rng);
  Trajectory traj;
  traj.tokens = cfg.tokens;
  traj.steps.reserve(static_cast<size_t>(cfg.total_steps));
  for (int t = 0; t < cfg.total_steps; ++t) {
    auto [next, rec] = sim_step(latent, t, cfg, rng);
    traj.steps.push_back(std::move(rec));
    latent = std::move(next);
  }
  traj.final_stack = stack_from_latent(latent);
  return traj;
}

}  // namespace attnguide
