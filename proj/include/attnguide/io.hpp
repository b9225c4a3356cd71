// File formats and configuration: the AMAP plain-text stack format, the
// JSON experiment schema (strict, unknown keys rejected), trajectory CSV
// emission, and P5 PGM heatmaps.
#pragma once

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnguide/core.hpp"
#include "attnguide/sim.hpp"

namespace attnguide {

// Parse/format error carrying a 1-based line number (0 when not line-bound).
struct ParseError : std::runtime_error {
  int line;
  ParseError(int line_in, const std::string& msg)
      : std::runtime_error(line_in > 0
                               ? "line " + std::to_string(line_in) + ": " + msg
                               : msg),
        line(line_in) {}
};

// 17 significant digits: enough to round-trip an IEEE double exactly.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// AMAP map file format
//
//   line 1:  AMAP 1 H W T
//   line 2:  T token ids, space-separated
//   then:    T blocks of H lines, each W space-separated decimal values

inline std::string write_map_file(const AttentionStack& stack) {
  for (const auto& m : stack.maps) {
    if (m.token().empty() ||
        m.token().find_first_of(" \t\n") != std::string::npos)
      throw ValidationError(
          "write_map_file: token ids must be non-empty and contain no "
          "whitespace");
  }
  std::ostringstream out;
  out << "AMAP 1 " << stack.height() << ' ' << stack.width() << ' '
      << stack.token_count() << '\n';
  for (int t = 0; t < stack.token_count(); ++t)
    out << (t ? " " : "") << stack.maps[static_cast<size_t>(t)].token();
  out << '\n';
  for (const auto& m : stack.maps) {
    for (int i = 0; i < m.height(); ++i) {
      for (int j = 0; j < m.width(); ++j)
        out << (j ? " " : "") << format_double(m.at(i, j));
      out << '\n';
    }
  }
  return out.str();
}

inline AttentionStack parse_map_file(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;

  auto next_line = [&](const std::string& what) {
    if (!std::getline(in, line))
      throw ParseError(line_no, "unexpected end of input: missing " + what);
    ++line_no;
    return line;
  };

  {
    std::istringstream hdr(next_line("header"));
    std::string magic;
    int version = 0, h = 0, w = 0, t = 0;
    if (!(hdr >> magic >> version >> h >> w >> t) || magic != "AMAP")
      throw ParseError(line_no, "malformed header, expected 'AMAP 1 H W T'");
    if (version != 1)
      throw ParseError(line_no, "unsupported AMAP version " + std::to_string(version));
    if (h < 1 || w < 1 || t < 1)
      throw ParseError(line_no, "header dimensions must be >= 1");

    std::istringstream toks(next_line("token id line"));
    std::vector<std::string> tokens;
    std::string tok;
    while (toks >> tok) tokens.push_back(tok);
    if (static_cast<int>(tokens.size()) != t)
      throw ParseError(line_no, "expected " + std::to_string(t) +
                                    " token ids, found " +
                                    std::to_string(tokens.size()));

    std::vector<AttentionMap> maps;
    for (int m = 0; m < t; ++m) {
      std::vector<double> values;
      values.reserve(static_cast<size_t>(h) * w);
      for (int i = 0; i < h; ++i) {
        std::istringstream row(next_line("row " + std::to_string(i + 1) +
                                         " of map for token '" + tokens[m] +
                                         "'"));
        for (int j = 0; j < w; ++j) {
          double v = 0.0;
          if (!(row >> v))
            throw ParseError(line_no,
                             "expected " + std::to_string(w) +
                                 " values in row for token '" + tokens[m] + "'");
          if (!std::isfinite(v))
            throw ParseError(line_no, "non-finite value for token '" + tokens[m] + "'");
          if (v < 0.0)
            throw ParseError(line_no, "negative value for token '" + tokens[m] + "'");
          values.push_back(v);
        }
        double extra;
        if (row >> extra)
          throw ParseError(line_no, "too many values in row for token '" +
                                        tokens[m] + "'");
      }
      maps.emplace_back(h, w, std::move(values), tokens[m], 0);
    }
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw ParseError(line_no, "trailing content after final map block");
    }
    AttentionStack stack(std::move(maps), false);
    stack.normalized = stack.check_normalized();
    return stack;
  }
}

// ---------------------------------------------------------------------------
// Experiment configuration (JSON)

struct ExperimentConfig {
  SimConfig sim;
  BlobSpec blobs;
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown_keys(const json& obj,
                                std::initializer_list<const char*> allowed,
                                const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* key : allowed) ok = ok || it.key() == key;
    if (!ok)
      throw ValidationError("config: unknown key '" + it.key() + "' in " +
                            context);
  }
}

inline Metric parse_metric(const std::string& name, const std::string& context) {
  if (name == "euclidean" || name == "euc") return Metric::euclidean;
  if (name == "cosine" || name == "cos") return Metric::cosine;
  throw ValidationError("config: " + context +
                        " must be 'euclidean' or 'cosine', got '" + name + "'");
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  using detail::json;
  json root = json::parse(text);
  if (!root.is_object()) throw ValidationError("config: root must be an object");
  detail::reject_unknown_keys(
      root,
      {"height", "width", "total_steps", "optimize_steps", "alpha",
       "max_halvings", "seed", "init_noise", "step_noise", "weights",
       "metrics", "regions", "tokens", "overlap_quantile", "moran_adjacency"},
      "root");

  ExperimentConfig cfg;
  SimConfig& sim = cfg.sim;
  sim.height = root.value("height", sim.height);
  sim.width = root.value("width", sim.width);
  sim.total_steps = root.value("total_steps", sim.total_steps);
  sim.optimize_steps = root.value("optimize_steps", sim.optimize_steps);
  if (root.contains("alpha")) {
    const json& a = root["alpha"];
    if (a.is_array())
      sim.alpha_schedule = a.get<std::vector<double>>();
    else
      sim.alpha = a.get<double>();
  }
  sim.max_halvings = root.value("max_halvings", sim.max_halvings);
  sim.seed = root.value("seed", sim.seed);
  sim.init_noise = root.value("init_noise", sim.init_noise);
  sim.step_noise = root.value("step_noise", sim.step_noise);
  sim.overlap_quantile = root.value("overlap_quantile", sim.overlap_quantile);

  if (root.contains("moran_adjacency")) {
    const std::string adj = root["moran_adjacency"].get<std::string>();
    if (adj == "rook")
      sim.moran.adjacency = MoranConfig::Adjacency::rook;
    else if (adj == "queen")
      sim.moran.adjacency = MoranConfig::Adjacency::queen;
    else
      throw ValidationError("config: moran_adjacency must be 'rook' or 'queen'");
  }

  if (root.contains("weights")) {
    const json& w = root["weights"];
    detail::reject_unknown_keys(w, {"agg_sub", "iso", "max", "agg_attr"},
                                "weights");
    sim.weights.agg_sub = w.value("agg_sub", sim.weights.agg_sub);
    sim.weights.iso = w.value("iso", sim.weights.iso);
    sim.weights.max = w.value("max", sim.weights.max);
    sim.weights.agg_attr = w.value("agg_attr", sim.weights.agg_attr);
  }

  if (root.contains("metrics")) {
    const json& m = root["metrics"];
    detail::reject_unknown_keys(m, {"aggregation", "isolation"}, "metrics");
    if (m.contains("aggregation"))
      sim.metrics.aggregation = detail::parse_metric(
          m["aggregation"].get<std::string>(), "metrics.aggregation");
    if (m.contains("isolation"))
      sim.metrics.isolation = detail::parse_metric(
          m["isolation"].get<std::string>(), "metrics.isolation");
  }

  if (root.contains("regions")) {
    const json& r = root["regions"];
    detail::reject_unknown_keys(r, {"object", "animal", "attribute"}, "regions");
    if (r.contains("object")) {
      detail::reject_unknown_keys(r["object"], {"count", "radius"},
                                  "regions.object");
      sim.object_regions.count = r["object"].value("count", sim.object_regions.count);
      sim.object_regions.radius = r["object"].value("radius", sim.object_regions.radius);
    }
    if (r.contains("animal")) {
      detail::reject_unknown_keys(r["animal"],
                                  {"count", "radius_start", "radius_end"},
                                  "regions.animal");
      sim.animal_region_count = r["animal"].value("count", sim.animal_region_count);
      sim.animal_radius_start =
          r["animal"].value("radius_start", sim.animal_radius_start);
      sim.animal_radius_end = r["animal"].value("radius_end", sim.animal_radius_end);
    }
    if (r.contains("attribute")) {
      detail::reject_unknown_keys(r["attribute"], {"count", "radius"},
                                  "regions.attribute");
      sim.attribute_regions.count =
          r["attribute"].value("count", sim.attribute_regions.count);
      sim.attribute_regions.radius =
          r["attribute"].value("radius", sim.attribute_regions.radius);
    }
  }

  if (!root.contains("tokens") || !root["tokens"].is_array() ||
      root["tokens"].empty())
    throw ValidationError("config: 'tokens' must be a non-empty array");
  for (const json& t : root["tokens"]) {
    detail::reject_unknown_keys(t, {"id", "kind", "subject", "style", "blobs"},
                                "tokens[]");
    if (!t.contains("id")) throw ValidationError("config: token entry missing 'id'");
    const std::string id = t["id"].get<std::string>();
    const std::string kind = t.value("kind", std::string("subject"));

    if (kind == "background") {
      if (t.contains("subject") || t.contains("style"))
        throw ValidationError("config: background token '" + id +
                              "' takes neither 'subject' nor 'style'");
      sim.background_tokens.push_back(id);
    } else if (kind == "subject") {
      if (t.contains("subject"))
        throw ValidationError("config: subject token '" + id +
                              "' must not carry a 'subject' binding");
      sim.tokens.push_back(TokenSpec{id, TokenKind::subject, {}});
      const std::string style = t.value("style", std::string("object"));
      if (style == "animal")
        sim.subject_styles[id] = SubjectStyle::animal;
      else if (style != "object")
        throw ValidationError("config: token style must be 'object' or 'animal'");
    } else if (kind == "attribute") {
      if (!t.contains("subject"))
        throw ValidationError("config: attribute token '" + id +
                              "' must name its 'subject'");
      if (t.contains("style"))
        throw ValidationError("config: attribute token '" + id +
                              "' takes no 'style'");
      sim.tokens.push_back(
          TokenSpec{id, TokenKind::attribute, t["subject"].get<std::string>()});
    } else {
      throw ValidationError(
          "config: token kind must be 'subject', 'attribute', or 'background'");
    }

    if (t.contains("blobs")) {
      if (!t["blobs"].is_array())
        throw ValidationError("config: 'blobs' must be an array");
      for (const json& b : t["blobs"]) {
        detail::reject_unknown_keys(b, {"center", "amplitude", "stddev"},
                                    "blobs[]");
        if (!b.contains("center") || !b["center"].is_array() ||
            b["center"].size() != 2)
          throw ValidationError("config: blob center must be [h, w]");
        GaussianBump bump;
        bump.center = Coord{b["center"][0].get<double>(),
                            b["center"][1].get<double>()};
        bump.amplitude = b.value("amplitude", 1.0);
        bump.stddev = b.value("stddev", 1.0);
        cfg.blobs.bumps[id].push_back(bump);
      }
    }
  }

  sim.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Trajectory CSV

// First line is a '#' metadata comment naming the run parameters (including
// the metric variants), then the column header, then one row per step.
inline std::string trajectory_csv(const Trajectory& traj, const SimConfig& cfg) {
  std::ostringstream out;
  auto metric_name = [](Metric m) {
    return m == Metric::euclidean ? "euclidean" : "cosine";
  };
  out << "# attnguide simulate seed=" << cfg.seed << " alpha=";
  if (cfg.alpha_schedule.empty())
    out << cfg.alpha;
  else
    out << "schedule[" << cfg.alpha_schedule.size() << "]";
  out << " steps=" << cfg.total_steps << "/" << cfg.optimize_steps
      << " aggregation=" << metric_name(cfg.metrics.aggregation)
      << " isolation=" << metric_name(cfg.metrics.isolation)
      << " init_noise=" << cfg.init_noise << " step_noise=" << cfg.step_noise
      << '\n';

  std::vector<std::string> subjects;
  for (const auto& t : traj.tokens)
    if (t.kind == TokenKind::subject) subjects.push_back(t.id);

  out << "step,total,agg_sub,iso,max,agg_attr,grad_norm";
  for (const auto& s : subjects) out << ",morans_i_" << s;
  out << ",d_over_dmax,overlap_ratio\n";

  for (const auto& rec : traj.steps) {
    out << rec.step << ',' << format_double(rec.losses.total) << ','
        << format_double(rec.losses.agg_sub) << ','
        << format_double(rec.losses.iso) << ','
        << format_double(rec.losses.max) << ','
        << format_double(rec.losses.agg_attr) << ','
        << format_double(rec.grad_norm);
    for (const auto& s : subjects) out << ',' << format_double(rec.morans.at(s));
    out << ',' << format_double(rec.d_over_dmax) << ','
        << format_double(rec.overlap) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// PGM heatmaps (P5, 8-bit, min-max scaled per map)

inline std::string write_pgm(const AttentionMap& map) {
  double lo = map.values().front(), hi = lo;
  for (double v : map.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  std::string out = "P5\n" + std::to_string(map.width()) + " " +
                    std::to_string(map.height()) + "\n255\n";
  out.reserve(out.size() + map.values().size());
  for (double v : map.values()) {
    const int level =
        span > 0.0 ? static_cast<int>(std::lround((v - lo) / span * 255.0)) : 0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(level)));
  }
  return out;
}

}  // namespace attnguide
