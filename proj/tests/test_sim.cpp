#include <catch2/catch_amalgamated.hpp>

#include "attnguide/io.hpp"
#include "attnguide/sim.hpp"
#include "oracles.hpp"

using namespace attnguide;
using Catch::Approx;

namespace {

SimConfig scattered_subject_cfg(std::uint64_t seed) {
  SimConfig cfg;
  cfg.seed = seed;
  cfg.init_noise = 0.05;
  cfg.tokens = {{"obj", TokenKind::subject, {}}};
  cfg.background_tokens = {"bg"};
  cfg.weights = LossWeights{1.25, 0.0, 0.25, 0.0};
  return cfg;
}

BlobSpec scattered_blobs() {
  BlobSpec blobs;
  blobs.bumps["obj"] = {{{4, 4}, 3.0, 0.8}, {{4, 12}, 3.0, 0.8}, {{12, 8}, 3.0, 0.8}};
  return blobs;
}

}  // namespace

TEST_CASE("init_latent: no blobs and zero noise give a uniform stack") {
  GaussianRng rng(1);
  const Latent z = init_latent(8, 8, {"a", "b", "c", "d"}, {}, 0.0, rng);
  for (double v : z.logits) REQUIRE(v == 0.0);
  const auto stack = stack_from_latent(z);
  for (const auto& m : stack.maps)
    for (double v : m.values()) REQUIRE(v == Approx(0.25).margin(1e-12));
}

TEST_CASE("init_latent: bump centers become map argmaxes") {
  BlobSpec blobs;
  blobs.bumps["a"] = {{{3, 3}, 4.0, 1.2}};
  blobs.bumps["b"] = {{{12, 12}, 4.0, 1.2}};
  GaussianRng rng(1);
  const Latent z = init_latent(16, 16, {"a", "b"}, blobs, 0.0, rng);
  const auto stack = stack_from_latent(z);
  REQUIRE(max_activation(stack.map_for("a")).cell == Cell{3, 3});
  REQUIRE(max_activation(stack.map_for("b")).cell == Cell{12, 12});
}

TEST_CASE("init_latent: unknown blob token raises") {
  BlobSpec blobs;
  blobs.bumps["nope"] = {{{3, 3}, 1.0, 1.0}};
  GaussianRng rng(1);
  REQUIRE_THROWS_AS(init_latent(8, 8, {"a"}, blobs, 0.0, rng), ValidationError);
  BlobSpec bad;
  bad.bumps["a"] = {{{3, 3}, 1.0, 0.0}};
  REQUIRE_THROWS_AS(init_latent(8, 8, {"a"}, bad, 0.0, rng), ValidationError);
}

TEST_CASE("sim_step: all-zero weights leave the latent bit-identical") {
  SimConfig cfg = scattered_subject_cfg(3);
  cfg.weights = LossWeights{0.0, 0.0, 0.0, 0.0};
  GaussianRng rng(cfg.seed);
  const Latent z0 = init_latent(cfg.height, cfg.width, cfg.all_token_ids(),
                                scattered_blobs(), cfg.init_noise, rng);
  auto [z1, rec] = sim_step(z0, 0, cfg, rng);
  REQUIRE(z1.logits == z0.logits);
  REQUIRE(rec.grad_norm == 0.0);
  REQUIRE(rec.alpha_used == 0.0);
}

TEST_CASE("sim_step: max-only optimization never lowers the max activation") {
  SimConfig cfg = scattered_subject_cfg(5);
  cfg.weights = LossWeights{0.0, 0.0, 0.25, 0.0};
  cfg.alpha = 2.0;
  GaussianRng rng(cfg.seed);
  Latent z = init_latent(cfg.height, cfg.width, cfg.all_token_ids(),
                         scattered_blobs(), cfg.init_noise, rng);
  double previous = max_activation(stack_from_latent(z).map_for("obj")).value;
  for (int t = 0; t < cfg.optimize_steps; ++t) {
    auto [next, rec] = sim_step(z, t, cfg, rng);
    z = std::move(next);
    const double now = max_activation(stack_from_latent(z).map_for("obj")).value;
    REQUIRE(now >= previous - 1e-12);
    previous = now;
  }
  REQUIRE(previous > 0.5);
}

TEST_CASE("sim_step: isolation pushes coincident subjects apart") {
  SimConfig cfg;
  cfg.seed = 11;
  cfg.init_noise = 0.05;
  cfg.tokens = {{"s1", TokenKind::subject, {}}, {"s2", TokenKind::subject, {}}};
  cfg.background_tokens = {"bg"};
  cfg.weights = LossWeights{0.0, 2.0, 0.0, 0.0};
  BlobSpec blobs;
  blobs.bumps["s1"] = {{{7.5, 7.5}, 3.0, 2.0}};
  blobs.bumps["s2"] = {{{7.5, 7.5}, 3.0, 2.0}};

  GaussianRng rng(cfg.seed);
  Latent z = init_latent(cfg.height, cfg.width, cfg.all_token_ids(), blobs,
                         cfg.init_noise, rng);
  double previous = -1.0;
  for (int t = 0; t < 10; ++t) {
    auto [next, rec] = sim_step(z, t, cfg, rng);
    REQUIRE(rec.d_over_dmax > previous);
    previous = rec.d_over_dmax;
    z = std::move(next);
  }
}

TEST_CASE("run: default schedule yields a full-length trajectory") {
  SimConfig cfg = scattered_subject_cfg(2);
  const auto traj = run(cfg, scattered_blobs());
  REQUIRE(traj.steps.size() == 50);
  REQUIRE(traj.final_stack.has_value());
  REQUIRE(traj.tokens.size() == 1);
  for (const auto& rec : traj.steps) {
    REQUIRE(std::isfinite(rec.losses.total));
    REQUIRE(std::isfinite(rec.grad_norm));
    REQUIRE(std::isfinite(rec.morans.at("obj")));
    REQUIRE(std::isfinite(rec.region_spread.at("obj")));
  }
}

TEST_CASE("run: total loss is non-increasing over optimized steps with noise off") {
  SimConfig cfg = scattered_subject_cfg(7);
  const auto traj = run(cfg, scattered_blobs());
  for (int t = 1; t < cfg.optimize_steps; ++t)
    REQUIRE(traj.steps[static_cast<size_t>(t)].losses.total <=
            traj.steps[static_cast<size_t>(t - 1)].losses.total);
  // past the window the latent passes through unchanged
  for (size_t t = static_cast<size_t>(cfg.optimize_steps) + 1;
       t < traj.steps.size(); ++t)
    REQUIRE(traj.steps[t].losses.total == traj.steps[t - 1].losses.total);
}

TEST_CASE("run: identical config and seed replay bit-exactly") {
  SimConfig cfg = scattered_subject_cfg(13);
  cfg.step_noise = 0.02;  // exercise the seeded noise path too
  const auto a = run(cfg, scattered_blobs());
  const auto b = run(cfg, scattered_blobs());
  REQUIRE(trajectory_csv(a, cfg) == trajectory_csv(b, cfg));
  REQUIRE(a.final_stack->maps[0].values() == b.final_stack->maps[0].values());

  SimConfig other = cfg;
  other.seed = 14;
  const auto c = run(other, scattered_blobs());
  REQUIRE(trajectory_csv(a, cfg) != trajectory_csv(c, other));
}

TEST_CASE("run: stack stays softmax-normalized at every step") {
  SimConfig cfg = scattered_subject_cfg(4);
  cfg.total_steps = 12;
  cfg.optimize_steps = 6;
  GaussianRng rng(cfg.seed);
  Latent z = init_latent(cfg.height, cfg.width, cfg.all_token_ids(),
                         scattered_blobs(), cfg.init_noise, rng);
  for (int t = 0; t < cfg.total_steps; ++t) {
    REQUIRE(stack_from_latent(z).check_normalized(1e-6));
    auto [next, rec] = sim_step(z, t, cfg, rng);
    z = std::move(next);
  }
}

TEST_CASE("run: Euclidean aggregation collapses spread harder than cosine") {
  for (std::uint64_t seed : {21, 22}) {
    double finals[2];
    for (int v = 0; v < 2; ++v) {
      SimConfig cfg = scattered_subject_cfg(seed);
      cfg.metrics.aggregation = v == 0 ? Metric::euclidean : Metric::cosine;
      const auto traj = run(cfg, scattered_blobs());
      finals[v] = traj.steps.back().region_spread.at("obj");
    }
    REQUIRE(finals[0] < finals[1]);
  }
}

TEST_CASE("SimConfig: validation and the animal radius schedule") {
  SimConfig cfg = scattered_subject_cfg(1);
  cfg.optimize_steps = 60;
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg.optimize_steps = 25;
  cfg.alpha = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg.alpha = 50.0;
  cfg.tokens.clear();
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);

  SimConfig animal = scattered_subject_cfg(1);
  animal.subject_styles["obj"] = SubjectStyle::animal;
  const auto at0 = animal.region_set_at(0);
  const auto& spec = animal.tokens.front();
  REQUIRE(at0.for_token(spec).radius == 2.0);
  REQUIRE(at0.for_token(spec).count == 2);
  const auto at24 = animal.region_set_at(24);
  REQUIRE(at24.for_token(spec).radius == 8.0);
  const auto at40 = animal.region_set_at(40);  // pinned after the window
  REQUIRE(at40.for_token(spec).radius == 8.0);

  // object-style tokens keep the fixed config
  const auto plain = scattered_subject_cfg(1).region_set_at(10);
  REQUIRE(plain.for_token(spec).radius == 5.0);
  REQUIRE(plain.for_token(spec).count == 3);
}

TEST_CASE("sim_step: alpha schedule supplies the per-step starting step size") {
  SimConfig cfg = scattered_subject_cfg(6);
  cfg.alpha_schedule = {4.0, 1.0, 0.5};
  GaussianRng rng(cfg.seed);
  Latent z = init_latent(cfg.height, cfg.width, cfg.all_token_ids(),
                         scattered_blobs(), cfg.init_noise, rng);
  for (int t = 0; t < 5; ++t) {
    auto [next, rec] = sim_step(z, t, cfg, rng);
    const double start = cfg.alpha_at(t);
    REQUIRE(start == (t == 0 ? 4.0 : t == 1 ? 1.0 : 0.5));
    if (rec.alpha_used > 0.0) REQUIRE(rec.alpha_used <= start);
    z = std::move(next);
  }

  SimConfig bad = scattered_subject_cfg(6);
  bad.alpha_schedule = {1.0, 0.0};
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("GaussianRng: deterministic stream with sane moments") {
  GaussianRng a(99), b(99);
  double mean = 0.0, var = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = a.next();
    REQUIRE(x == b.next());
    mean += x;
    var += x * x;
  }
  mean /= n;
  var = var / n - mean * mean;
  REQUIRE(mean == Approx(0.0).margin(0.05));
  REQUIRE(var == Approx(1.0).margin(0.05));
}
