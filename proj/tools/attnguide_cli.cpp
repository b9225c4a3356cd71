// attnguide command-line tool.
//
// Subcommands:
//   analyze    losses, Moran's I, pairwise distances, and region table for a
//              map file
//   regions    dump the grouping-region table for a map file
//   simulate   run the guidance simulator from a JSON experiment config,
//              emitting trajectory.csv and per-step PGM heatmaps
//   gradcheck  analytic-vs-finite-difference sweep over seeded random stacks
//   compare    metric-variant comparison table across seeds
//
// Exit codes: 0 ok, 1 check failure, 2 usage/parse error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "attnguide/attnguide.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attnguide;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(0, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(0, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

int sweep_threads() {
  if (const char* env = std::getenv("ATTNGUIDE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

Metric metric_from_name(const std::string& s) {
  if (s == "euc" || s == "euclidean") return Metric::euclidean;
  if (s == "cos" || s == "cosine") return Metric::cosine;
  throw ValidationError("unknown metric '" + s + "' (expected euc or cos)");
}

// ---------------------------------------------------------------------------
// analyze / regions

struct AnalyzeOptions {
  std::string map_path;
  std::string config_path;
  bool as_json = false;
  std::string csv_path;
};

json region_table_json(const AttentionStack& stack,
                       const std::vector<TokenSpec>& tokens,
                       const RegionConfigSet& cfgs) {
  json rows = json::array();
  for (const auto& t : tokens) {
    const AttentionMap& map = stack.map_for(t.id);
    const auto regions = identify_regions(map, cfgs.for_token(t));
    for (size_t i = 0; i < regions.size(); ++i) {
      const auto& r = regions[i];
      const Coord c = r.centroid();
      rows.push_back({{"token", t.id},
                      {"region", i},
                      {"center_h", r.mask.center.h},
                      {"center_w", r.mask.center.w},
                      {"radius", r.mask.radius},
                      {"count", r.count},
                      {"mass", r.mass},
                      {"centroid_h", c.h},
                      {"centroid_w", c.w}});
    }
  }
  return rows;
}

json build_analysis(const AttentionStack& stack,
                    const std::vector<TokenSpec>& tokens, const SimConfig& cfg) {
  const RegionConfigSet cfgs = cfg.region_set_at(0);
  const LossBreakdown breakdown =
      total_loss(stack, tokens, cfg.weights, cfgs, cfg.metrics);

  json report;
  report["losses"] = {{"agg_sub", breakdown.agg_sub}, {"iso", breakdown.iso},
                      {"max", breakdown.max},         {"agg_attr", breakdown.agg_attr},
                      {"total", breakdown.total}};

  json morans = json::object();
  std::vector<const TokenSpec*> subjects;
  for (const auto& t : tokens) {
    if (t.kind != TokenKind::subject) continue;
    subjects.push_back(&t);
    try {
      morans[t.id] = morans_i(stack.map_for(t.id), cfg.moran);
    } catch (const UndefinedMetricError&) {
      morans[t.id] = nullptr;  // constant map
    }
  }
  report["morans_i"] = morans;

  json pairs = json::array();
  const double d_max = std::sqrt(static_cast<double>(stack.width()) * stack.width() +
                                 static_cast<double>(stack.height()) * stack.height());
  for (size_t m = 0; m < subjects.size(); ++m) {
    for (size_t n = m + 1; n < subjects.size(); ++n) {
      const AttentionMap& mm = stack.map_for(subjects[m]->id);
      const AttentionMap& mn = stack.map_for(subjects[n]->id);
      const double d = distance(map_centroid(mm), map_centroid(mn));
      pairs.push_back({{"subject_m", subjects[m]->id},
                       {"subject_n", subjects[n]->id},
                       {"d", d},
                       {"d_over_dmax", d / d_max},
                       {"iso", iso_loss(mm, mn)},
                       {"overlap_ratio", overlap_ratio(mm, mn, cfg.overlap_quantile)}});
    }
  }
  report["pairs"] = pairs;
  report["regions"] = region_table_json(stack, tokens, cfgs);
  return report;
}

void print_analysis_text(const json& report, std::ostream& out) {
  const auto& losses = report["losses"];
  out << "losses:\n";
  for (const char* key : {"agg_sub", "iso", "max", "agg_attr", "total"})
    out << "  " << key << " = " << format_double(losses[key].get<double>())
        << '\n';
  out << "morans_i:\n";
  for (auto it = report["morans_i"].begin(); it != report["morans_i"].end(); ++it) {
    out << "  " << it.key() << " = "
        << (it.value().is_null() ? std::string("undefined (constant map)")
                                 : format_double(it.value().get<double>()))
        << '\n';
  }
  if (!report["pairs"].empty()) {
    out << "subject pairs:\n";
    for (const auto& p : report["pairs"]) {
      out << "  " << p["subject_m"].get<std::string>() << " | "
          << p["subject_n"].get<std::string>()
          << "  d=" << format_double(p["d"].get<double>())
          << "  d/dmax=" << format_double(p["d_over_dmax"].get<double>())
          << "  iso=" << format_double(p["iso"].get<double>())
          << "  overlap=" << format_double(p["overlap_ratio"].get<double>())
          << '\n';
    }
  }
  out << "regions (token, idx, center, radius, count, mass, centroid):\n";
  for (const auto& r : report["regions"]) {
    out << "  " << r["token"].get<std::string>() << "  #" << r["region"]
        << "  (" << r["center_h"] << "," << r["center_w"] << ")  r="
        << format_double(r["radius"].get<double>()) << "  N=" << r["count"]
        << "  mass=" << format_double(r["mass"].get<double>()) << "  ("
        << format_double(r["centroid_h"].get<double>()) << ","
        << format_double(r["centroid_w"].get<double>()) << ")\n";
  }
}

std::string region_table_csv(const json& rows) {
  std::ostringstream out;
  out << "token,region,center_h,center_w,radius,count,mass,centroid_h,centroid_w\n";
  for (const auto& r : rows) {
    out << r["token"].get<std::string>() << ',' << r["region"] << ','
        << r["center_h"] << ',' << r["center_w"] << ','
        << format_double(r["radius"].get<double>()) << ',' << r["count"] << ','
        << format_double(r["mass"].get<double>()) << ','
        << format_double(r["centroid_h"].get<double>()) << ','
        << format_double(r["centroid_w"].get<double>()) << '\n';
  }
  return out.str();
}

int run_analyze(const AnalyzeOptions& opt) {
  const AttentionStack stack = parse_map_file(read_file(opt.map_path));

  SimConfig cfg;
  if (!opt.config_path.empty()) {
    cfg = parse_experiment_config(read_file(opt.config_path)).sim;
  } else {
    for (const auto& m : stack.maps)
      cfg.tokens.push_back(TokenSpec{m.token(), TokenKind::subject, {}});
  }
  for (const auto& t : cfg.tokens)
    stack.index_of(t.id);  // every configured token must exist in the map file

  const json report = build_analysis(stack, cfg.tokens, cfg);
  if (opt.as_json)
    std::cout << report.dump(2) << '\n';
  else
    print_analysis_text(report, std::cout);
  if (!opt.csv_path.empty())
    write_file(opt.csv_path, region_table_csv(report["regions"]));
  return 0;
}

struct RegionsOptions {
  std::string map_path;
  std::string token;
  int count = 3;
  double radius = 5.0;
  bool as_json = false;
};

int run_regions(const RegionsOptions& opt) {
  const AttentionStack stack = parse_map_file(read_file(opt.map_path));
  std::vector<TokenSpec> tokens;
  for (const auto& m : stack.maps) {
    if (!opt.token.empty() && m.token() != opt.token) continue;
    tokens.push_back(TokenSpec{m.token(), TokenKind::subject, {}});
  }
  if (tokens.empty())
    throw ValidationError("regions: no matching token in map file");
  RegionConfigSet cfgs;
  cfgs.subject = RegionConfig{opt.count, opt.radius};
  const json rows = region_table_json(stack, tokens, cfgs);
  if (opt.as_json)
    std::cout << rows.dump(2) << '\n';
  else
    std::cout << region_table_csv(rows);
  return 0;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
  std::string config_path;
  std::string out_dir;
  std::string metric;  // optional override: euc | cos
  bool no_pgm = false;
};

int run_simulate(const SimulateOptions& opt) {
  ExperimentConfig cfg = parse_experiment_config(read_file(opt.config_path));
  if (!opt.metric.empty()) {
    const Metric m = metric_from_name(opt.metric);
    cfg.sim.metrics.aggregation = m;
    cfg.sim.metrics.isolation = m;
  }
  cfg.sim.validate();

  fs::create_directories(opt.out_dir);

  // Same update sequence as run(), with per-step stacks kept for heatmaps.
  GaussianRng rng(cfg.sim.seed);
  Latent latent = init_latent(cfg.sim.height, cfg.sim.width,
                              cfg.sim.all_token_ids(), cfg.blobs,
                              cfg.sim.init_noise, rng);
  Trajectory traj;
  traj.tokens = cfg.sim.tokens;
  for (int t = 0; t < cfg.sim.total_steps; ++t) {
    if (!opt.no_pgm) {
      const AttentionStack stack = stack_from_latent(latent);
      char prefix[32];
      std::snprintf(prefix, sizeof(prefix), "step%03d_", t);
      for (const auto& map : stack.maps)
        write_file(fs::path(opt.out_dir) / (prefix + map.token() + ".pgm"),
                   write_pgm(map));
    }
    auto [next, rec] = sim_step(latent, t, cfg.sim, rng);
    traj.steps.push_back(std::move(rec));
    latent = std::move(next);
  }
  traj.final_stack = stack_from_latent(latent);

  write_file(fs::path(opt.out_dir) / "trajectory.csv",
             trajectory_csv(traj, cfg.sim));
  write_file(fs::path(opt.out_dir) / "final.amap",
             write_map_file(*traj.final_stack));
  std::cout << "wrote " << (fs::path(opt.out_dir) / "trajectory.csv").string()
            << " (" << traj.steps.size() << " steps)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  int seeds = 100;
  double eps = 1e-6;
  double tol = 1e-5;
  bool corrupt = false;  // fault-injection debug flag: must make the run fail
  bool check_latent = true;
};

int run_gradcheck(const GradcheckOptions& opt) {
  GradCheckConfig check;
  check.eps = opt.eps;
  check.rel_tol = opt.tol;
  int failures = 0;
  double worst = 0.0;
  for (int seed = 1; seed <= opt.seeds; ++seed) {
    const auto c = harness::make_gradcheck_case(static_cast<std::uint64_t>(seed));
    const LossWeights weights;  // default balancing weights

    GradCheckReport report;
    if (opt.corrupt) {
      const FrozenSelection frozen = freeze_selection(c.stack, c.tokens, c.cfgs);
      GradientField analytic =
          loss_gradient_frozen(c.stack, c.tokens, weights, frozen, {});
      analytic.at(0, c.stack.height() / 2, c.stack.width() / 2) += 1e-3;
      const GradientField numeric = finite_diff_gradient(
          [&](const AttentionStack& s) {
            return total_loss_frozen(s, c.tokens, weights, frozen, {}).total;
          },
          c.stack, check.eps);
      report = compare_gradient_fields(analytic, numeric, check);
    } else {
      report = gradcheck(c.stack, c.tokens, weights, c.cfgs, {}, check);
      if (report.pass && opt.check_latent) {
        const GradCheckReport lat = gradcheck_latent(c.latent, c.tokens,
                                                     weights, c.cfgs, {}, check);
        if (lat.max_rel_err > report.max_rel_err) report = lat;
      }
    }

    worst = std::max(worst, report.max_rel_err);
    if (!report.pass) {
      ++failures;
      std::cout << "seed " << seed << ": FAIL max_rel_err="
                << format_double(report.max_rel_err) << " at token '"
                << report.worst_token << "' cell (" << report.worst_cell.h
                << "," << report.worst_cell.w << ")\n";
    }
  }
  char summary[160];
  std::snprintf(summary, sizeof(summary),
                "%s: %d/%d seeds within rel tol %g (worst %.3g, eps %g)\n",
                failures == 0 ? "PASS" : "FAIL", opt.seeds - failures,
                opt.seeds, opt.tol, worst, opt.eps);
  std::cout << summary;
  return failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// compare

struct CompareOptions {
  std::string metrics = "euc,cos";
  int seeds = 16;
  std::string config_path;
  std::string out_path;
};

struct VariantChoice {
  std::string name;
  MetricChoice metrics;
};

std::vector<VariantChoice> parse_variants(const std::string& names) {
  std::vector<VariantChoice> out;
  std::istringstream in(names);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    VariantChoice v;
    v.name = item;
    const auto plus = item.find('+');
    if (plus == std::string::npos) {
      const Metric m = metric_from_name(item);
      v.metrics = MetricChoice{m, m};
    } else {
      v.metrics = MetricChoice{metric_from_name(item.substr(0, plus)),
                               metric_from_name(item.substr(plus + 1))};
    }
    out.push_back(std::move(v));
  }
  if (out.empty()) throw ValidationError("compare: no metric variants given");
  return out;
}

// Built-in scenario when no config is given: two subjects with scattered
// bumps plus a background token, full default weights.
ExperimentConfig default_compare_config() {
  ExperimentConfig cfg;
  cfg.sim.tokens = {{"s1", TokenKind::subject, {}},
                    {"s2", TokenKind::subject, {}}};
  cfg.sim.background_tokens = {"bg"};
  cfg.sim.init_noise = 0.05;
  cfg.blobs.bumps["s1"] = {{{3, 3}, 3.0, 1.2}, {{12, 12}, 3.0, 1.2}};
  cfg.blobs.bumps["s2"] = {{{3, 12}, 3.0, 1.2}, {{12, 3}, 3.0, 1.2}};
  return cfg;
}

int run_compare(const CompareOptions& opt) {
  const std::vector<VariantChoice> variants = parse_variants(opt.metrics);
  ExperimentConfig base = opt.config_path.empty()
                              ? default_compare_config()
                              : parse_experiment_config(read_file(opt.config_path));

  struct Job {
    size_t variant;
    int seed;
  };
  std::vector<Job> jobs;
  for (size_t v = 0; v < variants.size(); ++v)
    for (int seed = 1; seed <= opt.seeds; ++seed)
      jobs.push_back(Job{v, seed});

  struct Row {
    std::string csv;
  };
  std::vector<Row> rows(jobs.size());

  auto run_job = [&](size_t j) {
    const Job& job = jobs[j];
    SimConfig cfg = base.sim;
    cfg.metrics = variants[job.variant].metrics;
    cfg.seed = static_cast<std::uint64_t>(job.seed);
    const Trajectory traj = run(cfg, base.blobs);
    const StepRecord& last = traj.steps.back();

    double spread_sum = 0.0, moran_sum = 0.0;
    int subject_count = 0;
    for (const auto& t : cfg.tokens) {
      if (t.kind != TokenKind::subject) continue;
      spread_sum += last.region_spread.at(t.id);
      moran_sum += last.morans.at(t.id);
      ++subject_count;
    }
    std::ostringstream row;
    row << variants[job.variant].name << ',' << job.seed << ','
        << format_double(last.losses.total) << ','
        << format_double(last.losses.agg_sub) << ','
        << format_double(last.losses.iso) << ','
        << format_double(last.losses.max) << ','
        << format_double(spread_sum / std::max(subject_count, 1)) << ','
        << format_double(moran_sum / std::max(subject_count, 1)) << ','
        << format_double(last.d_over_dmax) << ','
        << format_double(last.overlap) << '\n';
    rows[j].csv = row.str();
  };

  const int workers = std::min<int>(sweep_threads(), static_cast<int>(jobs.size()));
  std::vector<std::thread> pool;
  std::atomic<size_t> next_job{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t j = next_job.fetch_add(1); j < jobs.size();
           j = next_job.fetch_add(1))
        run_job(j);
    });
  }
  for (auto& th : pool) th.join();

  std::ostringstream out;
  out << "variant,seed,final_total,final_agg_sub,final_iso,final_max,"
         "final_region_spread,final_morans_i,final_d_over_dmax,final_overlap\n";
  for (const auto& r : rows) out << r.csv;

  if (opt.out_path.empty())
    std::cout << out.str();
  else {
    write_file(opt.out_path, out.str());
    std::cout << "wrote " << opt.out_path << " (" << jobs.size() << " rows)\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aggregation-and-isolation cross-attention guidance toolkit"};
  app.require_subcommand(1);

  AnalyzeOptions analyze_opt;
  CLI::App* analyze = app.add_subcommand(
      "analyze", "losses, Moran's I, pair distances, and regions for a map file");
  analyze->add_option("map", analyze_opt.map_path, "AMAP map file")->required();
  analyze->add_option("--config", analyze_opt.config_path,
                      "experiment config naming token kinds and region configs");
  analyze->add_flag("--json", analyze_opt.as_json, "emit the report as JSON");
  analyze->add_option("--csv", analyze_opt.csv_path,
                      "also write the region table as CSV to this path");

  RegionsOptions regions_opt;
  CLI::App* regions_cmd =
      app.add_subcommand("regions", "dump the grouping-region table");
  regions_cmd->add_option("map", regions_opt.map_path, "AMAP map file")->required();
  regions_cmd->add_option("--token", regions_opt.token, "only this token");
  regions_cmd->add_option("--count", regions_opt.count, "regions per token");
  regions_cmd->add_option("--radius", regions_opt.radius, "mask radius");
  regions_cmd->add_flag("--json", regions_opt.as_json, "emit JSON");

  SimulateOptions sim_opt;
  CLI::App* simulate =
      app.add_subcommand("simulate", "run the guidance simulator");
  simulate->add_option("config", sim_opt.config_path, "experiment config JSON")
      ->required();
  simulate->add_option("--out", sim_opt.out_dir, "output directory")->required();
  simulate->add_option("--metric", sim_opt.metric,
                       "override both loss metrics: euc | cos");
  simulate->add_flag("--no-pgm", sim_opt.no_pgm, "skip heatmap output");

  GradcheckOptions grad_opt;
  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "verify analytic gradients against finite differences");
  gradcheck_cmd->add_option("--seeds", grad_opt.seeds, "number of seeded stacks");
  gradcheck_cmd->add_option("--eps", grad_opt.eps, "finite-difference step");
  gradcheck_cmd->add_option("--tol", grad_opt.tol, "relative tolerance");
  gradcheck_cmd->add_flag("--corrupt", grad_opt.corrupt,
                          "inject a gradient fault (debug; forces failure)");

  CompareOptions cmp_opt;
  CLI::App* compare = app.add_subcommand(
      "compare", "final-metric table across seeds for metric variants");
  compare->add_option("--metrics", cmp_opt.metrics,
                      "comma list: euc, cos, or agg+iso pairs like euc+cos");
  compare->add_option("--seeds", cmp_opt.seeds, "seeds per variant");
  compare->add_option("--config", cmp_opt.config_path, "base experiment config");
  compare->add_option("--out", cmp_opt.out_path, "write the CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (analyze->parsed()) return run_analyze(analyze_opt);
    if (regions_cmd->parsed()) return run_regions(regions_opt);
    if (simulate->parsed()) return run_simulate(sim_opt);
    if (gradcheck_cmd->parsed()) return run_gradcheck(grad_opt);
    if (compare->parsed()) return run_compare(cmp_opt);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: config JSON: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
