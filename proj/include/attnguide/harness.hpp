// Seeded experiment-case builders shared by the CLI sweeps and the
// verification suites: scattered-bump random latents and gradcheck cases
// that stay away from guarded degeneracies (coinciding centroids, zero
// region masses, argmax ties).
#pragma once

#include <cstdint>
#include <random>

#include "attnguide/grad.hpp"
#include "attnguide/sim.hpp"

namespace attnguide {

namespace harness {

inline double uniform01(std::mt19937_64& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(eng);
}

// Per-token scattered Gaussian bumps at random in-map centers.
inline BlobSpec random_blobs(const std::vector<std::string>& token_ids,
                             int height, int width, std::mt19937_64& eng,
                             int min_bumps = 2, int max_bumps = 3) {
  BlobSpec blobs;
  for (const auto& id : token_ids) {
    const int n =
        min_bumps + static_cast<int>(eng() % static_cast<std::uint64_t>(
                                                 max_bumps - min_bumps + 1));
    for (int b = 0; b < n; ++b) {
      GaussianBump bump;
      bump.center = Coord{uniform(eng, 1.5, height - 2.5),
                          uniform(eng, 1.5, width - 2.5)};
      bump.amplitude = uniform(eng, 1.5, 3.0);
      bump.stddev = uniform(eng, 0.9, 1.8);
      blobs.bumps[id].push_back(bump);
    }
  }
  return blobs;
}

struct DegeneracyGuards {
  double min_pair_distance = 0.1;
  double min_region_mass = 1e-6;
  double min_argmax_margin = 1e-6;
};

// True when the stack sits safely away from the loss gradients' guarded
// degeneracies for every loss-bearing token.
inline bool guards_ok(const AttentionStack& stack,
                      const std::vector<TokenSpec>& tokens,
                      const RegionConfigSet& cfgs,
                      const DegeneracyGuards& g = {}) {
  std::vector<Coord> subject_centroids;
  for (const auto& t : tokens) {
    const AttentionMap& map = stack.map_for(t.id);
    for (const auto& region : identify_regions(map, cfgs.for_token(t)))
      if (!(region.mass > g.min_region_mass)) return false;
    double top1 = -1.0, top2 = -1.0;
    for (double v : map.values()) {
      if (v > top1) {
        top2 = top1;
        top1 = v;
      } else if (v > top2) {
        top2 = v;
      }
    }
    if (!(top1 - top2 > g.min_argmax_margin)) return false;
    if (t.kind == TokenKind::subject)
      subject_centroids.push_back(map_centroid(map));
  }
  for (size_t m = 0; m < subject_centroids.size(); ++m)
    for (size_t n = m + 1; n < subject_centroids.size(); ++n)
      if (!(distance(subject_centroids[m], subject_centroids[n]) >
            g.min_pair_distance))
        return false;
  return true;
}

// A seeded 3-token (two subjects, one attribute) random stack exercising the
// full total loss, regenerated until the degeneracy guards hold.
struct GradcheckCase {
  Latent latent;
  AttentionStack stack;
  std::vector<TokenSpec> tokens;
  RegionConfigSet cfgs;
};

inline GradcheckCase make_gradcheck_case(std::uint64_t seed, int height = 16,
                                         int width = 16) {
  const std::vector<std::string> ids{"s1", "s2", "attr"};
  const std::vector<TokenSpec> tokens{
      {"s1", TokenKind::subject, {}},
      {"s2", TokenKind::subject, {}},
      {"attr", TokenKind::attribute, "s1"},
  };
  const RegionConfigSet cfgs;  // defaults: subjects 3/r5, attributes 3/r6

  std::mt19937_64 eng(seed);
  GaussianRng noise(seed ^ 0x9e3779b97f4a7c15ULL);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const BlobSpec blobs = random_blobs(ids, height, width, eng);
    Latent latent = init_latent(height, width, ids, blobs, 0.1, noise);
    AttentionStack stack = stack_from_latent(latent);
    if (guards_ok(stack, tokens, cfgs))
      return GradcheckCase{std::move(latent), std::move(stack), tokens, cfgs};
  }
  throw ValidationError(
      "make_gradcheck_case: no guarded case found for seed " +
      std::to_string(seed));
}

}  // namespace harness

}  // namespace attnguide
