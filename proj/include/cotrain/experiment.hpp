#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cotrain/binio.hpp"
#include "cotrain/core.hpp"
#include "cotrain/dataio.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/textknow.hpp"
#include "cotrain/trainer.hpp"

namespace cotrain {

// ---------------------------------------------------------------------------
// Pipeline stages shared by the experiment runner and the CLI
// ---------------------------------------------------------------------------

struct DatasetSpec {
  int n_volumes = 24;
  Shape3 shape{32, 32, 32};
  double difficulty = 0.3;
  double labeled_ratio = 0.1;
  int n_validation = 8;

  void validate() const {
    COTRAIN_REQUIRE(n_volumes >= 2, "dataset needs at least two volumes");
    COTRAIN_REQUIRE(labeled_ratio > 0.0 && labeled_ratio < 1.0, "labeled_ratio must lie in (0, 1)");
    COTRAIN_REQUIRE(n_validation >= 1, "dataset needs at least one validation volume");
    COTRAIN_REQUIRE(difficulty >= 0.0 && difficulty <= 1.0, "difficulty must lie in [0, 1]");
  }
};

struct GeneratedData {
  DatasetSplit split;
  std::vector<Sample> validation;
};

/// Training volumes 0..n-1 are split by `seed`; validation volumes use the
/// following indices, so they never overlap the training pool.
inline GeneratedData generate_data(const DatasetSpec& d, std::uint64_t seed) {
  d.validate();
  GeneratedData g;
  g.split = split_dataset(generate_synthetic_dataset(seed, d.n_volumes, d.shape, d.difficulty), d.labeled_ratio, seed);
  for (int i = 0; i < d.n_validation; ++i)
    g.validation.push_back(generate_synthetic_sample(seed, d.n_volumes + i, d.shape, d.difficulty));
  return g;
}

/// Writes VOL1 images (and labels where known) plus manifest.json into `dir`.
inline std::filesystem::path write_dataset(const GeneratedData& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.seed = g.split.seed;
  auto put = [&](const Sample& s, std::vector<std::string>& list) {
    const std::string img = s.id + ".img.vol1";
    write_volume(s.image, dir / img);
    if (s.label) write_volume(*s.label, dir / (s.id + ".lbl.vol1"));
    list.push_back(img);
  };
  for (const auto& s : g.split.labeled) put(s, m.labeled);
  for (const auto& s : g.split.unlabeled) put(s, m.unlabeled);
  for (const auto& s : g.validation) put(s, m.validation);
  const auto path = dir / "manifest.json";
  write_manifest(m, path);
  return path;
}

/// Pooled text vector from an EMB1 file.
inline std::vector<double> load_pooled_text(const std::filesystem::path& emb) {
  return pool_embeddings(read_embeddings(emb));
}

/// Predicted labels per sample, written as <id>.pred.vol1 when `dir` is set.
inline std::vector<LabelVolume> predict_samples(const TrainState& s, const TrainConfig& cfg,
                                                const std::vector<Sample>& samples,
                                                const std::filesystem::path& dir = {}) {
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::vector<LabelVolume> out;
  for (const auto& smp : samples) {
    out.push_back(argmax_labels(predict_volume(s, smp.image, cfg)));
    if (!dir.empty()) write_volume(out.back(), dir / (smp.id + ".pred.vol1"));
  }
  return out;
}

inline EvalReport evaluate_samples(const std::vector<LabelVolume>& preds, const std::vector<Sample>& truth) {
  COTRAIN_REQUIRE(preds.size() == truth.size(), "have ", preds.size(), " predictions for ", truth.size(), " volumes");
  std::vector<VolumeMetrics> rows;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    COTRAIN_REQUIRE(truth[i].label.has_value(), "volume ", truth[i].id, " has no ground truth");
    rows.push_back(evaluate(preds[i], *truth[i].label, truth[i].id));
  }
  return aggregate(std::move(rows));
}

// ---------------------------------------------------------------------------
// Experiment spec
// ---------------------------------------------------------------------------

enum class AblationAxis { None, BetaText, UnsupMode, SupMode, UslThresholds };

inline AblationAxis parse_ablation_axis(std::string_view s) {
  if (s == "none") return AblationAxis::None;
  if (s == "beta_text") return AblationAxis::BetaText;
  if (s == "unsup_mode") return AblationAxis::UnsupMode;
  if (s == "sup_mode") return AblationAxis::SupMode;
  if (s == "usl_thresholds") return AblationAxis::UslThresholds;
  throw Error(detail::concat("unknown ablation axis \"", s,
                             "\" (expected none, beta_text, unsup_mode, sup_mode or usl_thresholds)"));
}

inline std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::None: return "none";
    case AblationAxis::BetaText: return "beta_text";
    case AblationAxis::UnsupMode: return "unsup_mode";
    case AblationAxis::SupMode: return "sup_mode";
    case AblationAxis::UslThresholds: return "usl_thresholds";
  }
  return "?";
}

/// Grid used when a spec names an axis without values.
inline std::vector<std::string> default_axis_values(AblationAxis a) {
  switch (a) {
    case AblationAxis::None: return {"-"};
    case AblationAxis::BetaText: return {"0", "0.1", "1", "2"};
    case AblationAxis::UnsupMode: return {"mse", "nll", "usl"};
    case AblationAxis::SupMode: return {"ce", "dice", "ce+dice"};
    case AblationAxis::UslThresholds: return {"0.8/0.2", "0.9/0.1", "0.95/0.05"};
  }
  return {};
}

/// Config assignments one axis value stands for.
inline std::vector<std::pair<std::string, std::string>> axis_assignments(AblationAxis a, const std::string& value) {
  switch (a) {
    case AblationAxis::None: return {};
    case AblationAxis::BetaText: return {{"beta_text", value}};
    case AblationAxis::UnsupMode: return {{"loss.unsup_mode", value}};
    case AblationAxis::SupMode: return {{"loss.sup_mode", value}};
    case AblationAxis::UslThresholds: {
      const auto slash = value.find('/');
      COTRAIN_REQUIRE(slash != std::string::npos, "usl_thresholds value \"", value, "\" is not of the form t1/t2");
      return {{"usl.t1", value.substr(0, slash)}, {"usl.t2", value.substr(slash + 1)}};
    }
  }
  return {};
}

struct ExperimentSpec {
  std::string name = "experiment";
  DatasetSpec dataset;
  std::vector<std::pair<std::string, std::string>> overrides;  // TrainConfig keys, applied in order
  std::vector<std::uint64_t> seeds{1, 2, 3};
  AblationAxis axis = AblationAxis::None;
  std::vector<std::string> values;       // empty: default grid for the axis
  std::filesystem::path embeddings;      // EMB1; empty: text-free training

  std::vector<std::string> axis_values() const { return values.empty() ? default_axis_values(axis) : values; }

  /// Training config of one cell: defaults, then overrides, then the axis value, then the seed.
  TrainConfig cell_config(const std::string& value, std::uint64_t seed) const {
    TrainConfig c;
    for (const auto& [k, v] : overrides) set_config_value(c, k, v);
    for (const auto& [k, v] : axis_assignments(axis, value)) set_config_value(c, k, v);
    c.seed = seed;
    return c;
  }

  void validate() const {
    COTRAIN_REQUIRE(!name.empty(), "experiment name is empty");
    dataset.validate();
    COTRAIN_REQUIRE(!seeds.empty(), "experiment has no seeds");
    COTRAIN_REQUIRE(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(),
                    "experiment seeds must be distinct");
    const auto vals = axis_values();
    COTRAIN_REQUIRE(!vals.empty(), "ablation axis ", to_string(axis), " has no values");
    COTRAIN_REQUIRE(std::set<std::string>(vals.begin(), vals.end()).size() == vals.size(),
                    "ablation values must be distinct");
    for (const auto& v : vals) {
      try {
        cell_config(v, seeds.front()).validate();
      } catch (const Error& e) {
        throw Error(detail::concat("axis value \"", v, "\": ", e.what()));
      }
    }
  }
};

namespace detail {

inline std::string json_scalar_text(const binio::Json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number()) return v.dump();  // shortest round-trip form
  if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number())
    return json_scalar_text(v[0]) + "/" + json_scalar_text(v[1]);
  throw Error(concat("unsupported value ", v.dump()));
}

}  // namespace detail

/// JSON form:
///   {"name": ..., "dataset": {"n_volumes", "shape": [d,h,w], "difficulty", "labeled_ratio", "n_validation"},
///    "overrides": {"key": value, ...}, "seeds": [...], "axis": "...", "values": [...], "embeddings": "path"}
/// Every field is optional. A relative embeddings path resolves against `base_dir`.
inline ExperimentSpec parse_experiment_spec(std::string_view text, const std::filesystem::path& base_dir = {}) {
  ExperimentSpec s;
  try {
    const auto j = binio::Json::parse(text);
    COTRAIN_REQUIRE(j.is_object(), "experiment spec must be a JSON object");
    for (const auto& [k, v] : j.items())
      COTRAIN_REQUIRE(k == "name" || k == "dataset" || k == "overrides" || k == "seeds" || k == "axis" ||
                          k == "values" || k == "embeddings",
                      "unknown experiment spec field \"", k, "\"");
    if (j.contains("name")) s.name = j["name"].get<std::string>();
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      for (const auto& [k, v] : d.items())
        COTRAIN_REQUIRE(k == "n_volumes" || k == "shape" || k == "difficulty" || k == "labeled_ratio" ||
                            k == "n_validation",
                        "unknown dataset field \"", k, "\"");
      if (d.contains("n_volumes")) s.dataset.n_volumes = d["n_volumes"].get<int>();
      if (d.contains("shape")) {
        const auto sh = d["shape"].get<std::vector<int>>();
        COTRAIN_REQUIRE(sh.size() == 3, "dataset shape needs three entries");
        s.dataset.shape = {sh[0], sh[1], sh[2]};
      }
      if (d.contains("difficulty")) s.dataset.difficulty = d["difficulty"].get<double>();
      if (d.contains("labeled_ratio")) s.dataset.labeled_ratio = d["labeled_ratio"].get<double>();
      if (d.contains("n_validation")) s.dataset.n_validation = d["n_validation"].get<int>();
    }
    if (j.contains("overrides"))
      for (const auto& [k, v] : j["overrides"].items()) s.overrides.emplace_back(k, detail::json_scalar_text(v));
    if (j.contains("seeds")) s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("axis")) s.axis = parse_ablation_axis(j["axis"].get<std::string>());
    if (j.contains("values"))
      for (const auto& v : j["values"]) s.values.push_back(detail::json_scalar_text(v));
    if (j.contains("embeddings")) {
      const std::filesystem::path p = j["embeddings"].get<std::string>();
      s.embeddings = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::concat("malformed experiment spec: ", e.what()));
  }
  s.validate();
  return s;
}

inline ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  try {
    return parse_experiment_spec(binio::read_file(path), path.parent_path());
  } catch (const Error& e) {
    throw Error(detail::concat(path.string(), ": ", e.what()));
  }
}

// ---------------------------------------------------------------------------
// Running cells
// ---------------------------------------------------------------------------

struct CellResult {
  std::string value;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "failed:<stage>"
  std::string error;
  VolumeMetrics metrics;      // means over the validation volumes
  std::string checkpoint;     // paths relative to the experiment directory
  std::string checkpoint_hash;
  std::string eval_report;

  bool ok() const noexcept { return status == "ok"; }
};

struct MetricSummary {
  double median = 0.0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

struct SummaryRow {
  std::string value;
  int n_ok = 0;
  int n_failed = 0;
  MetricSummary dice, jaccard, hd95, asd;
};

struct ExperimentResult {
  ExperimentSpec spec;
  std::vector<CellResult> cells;
  std::vector<SummaryRow> summary;
  std::filesystem::path cells_csv, summary_csv;
  std::vector<std::filesystem::path> plots;

  /// Cells that hold a given axis value, in seed order.
  std::vector<const CellResult*> cells_for(const std::string& value) const {
    std::vector<const CellResult*> out;
    for (const auto& c : cells)
      if (c.value == value) out.push_back(&c);
    return out;
  }
  const SummaryRow* summary_for(const std::string& value) const {
    for (const auto& r : summary)
      if (r.value == value) return &r;
    return nullptr;
  }
};

/// Median with the two middle values averaged for even counts.
inline double median_of(std::vector<double> v) {
  COTRAIN_REQUIRE(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  if (v.empty()) return s;
  s.median = median_of(v);
  for (double x : v) s.mean += x;
  s.mean /= double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / double(v.size() - 1));
  }
  return s;
}

/// Directory-safe form of an axis value.
inline std::string cell_label(const std::string& value) {
  std::string out;
  for (char ch : value) out += std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' ? ch : '_';
  return out.empty() ? "_" : out;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string cells_csv_text(const ExperimentResult& r) {
  std::string out =
      "experiment,axis,value,seed,status,dice,jaccard,hd95,asd,empty_flag,checkpoint,checkpoint_fnv1a64,eval_report,"
      "error\n";
  for (const auto& c : r.cells) {
    const bool ok = c.ok();
    auto num = [&](double v) { return ok ? format_metric(v) : std::string(); };
    out += detail::csv_field(r.spec.name) + "," + to_string(r.spec.axis) + "," + detail::csv_field(c.value) + "," +
           std::to_string(c.seed) + "," + c.status + "," + num(c.metrics.dice) + "," + num(c.metrics.jaccard) + "," +
           num(c.metrics.hd95) + "," + num(c.metrics.asd) + "," + (ok ? (c.metrics.empty_flag ? "1" : "0") : "") +
           "," + detail::csv_field(c.checkpoint) + "," + c.checkpoint_hash + "," + detail::csv_field(c.eval_report) +
           "," + detail::csv_field(c.error) + "\n";
  }
  return out;
}

inline std::string summary_csv_text(const ExperimentResult& r) {
  std::string out = "axis,value,n_ok,n_failed";
  for (const char* m : {"dice", "jaccard", "hd95", "asd"})
    for (const char* s : {"median", "mean", "std"}) out += std::string(",") + m + "_" + s;
  out += "\n";
  for (const auto& row : r.summary) {
    out += to_string(r.spec.axis) + "," + detail::csv_field(row.value) + "," + std::to_string(row.n_ok) + "," +
           std::to_string(row.n_failed);
    for (const MetricSummary* m : {&row.dice, &row.jaccard, &row.hd95, &row.asd}) {
      if (row.n_ok == 0) {
        out += ",,,";
        continue;
      }
      out += "," + format_metric(m->median) + "," + format_metric(m->mean) + "," + format_metric(m->std);
    }
    out += "\n";
  }
  return out;
}

/// Bar chart of per-value medians with every seed's value as a dot.
inline std::string metric_plot_svg(const ExperimentResult& r, const std::string& metric) {
  auto pick = [&](const VolumeMetrics& m) {
    if (metric == "dice") return m.dice;
    if (metric == "jaccard") return m.jaccard;
    if (metric == "hd95") return m.hd95;
    return m.asd;
  };
  const auto values = r.spec.axis_values();
  double top = (metric == "dice" || metric == "jaccard") ? 1.0 : 0.0;
  for (const auto& c : r.cells)
    if (c.ok()) top = std::max(top, pick(c.metrics));
  if (top <= 0.0) top = 1.0;
  const int width = 120 + 110 * int(values.size()), height = 320, plot_h = 220, base_y = 260, left = 70;
  char buf[256];
  std::string svg;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"sans-serif\" "
                "font-size=\"12\">\n",
                width, height);
  svg += buf;
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"20\" font-size=\"14\">%s: %s by %s (median, seeds as dots)</text>\n",
                left, r.spec.name.c_str(), metric.c_str(), to_string(r.spec.axis).c_str());
  svg += buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", left,
                base_y - plot_h, left, base_y);
  svg += buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", left, base_y,
                width - 20, base_y);
  svg += buf;
  for (int t = 0; t <= 4; ++t) {
    const double v = top * t / 4.0;
    const int y = base_y - int(std::lround(plot_h * t / 4.0));
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%.3g</text>\n", left - 6, y + 4, v);
    svg += buf;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int x0 = left + 30 + 110 * int(i);
    const auto* row = r.summary_for(values[i]);
    if (row && row->n_ok > 0) {
      const MetricSummary& m = metric == "dice"      ? row->dice
                               : metric == "jaccard" ? row->jaccard
                               : metric == "hd95"    ? row->hd95
                                                     : row->asd;
      const double h = plot_h * m.median / top;
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%d\" y=\"%.2f\" width=\"60\" height=\"%.2f\" fill=\"#4a7ab5\"/>\n"
                    "<text x=\"%d\" y=\"%.2f\" text-anchor=\"middle\">%.4f</text>\n",
                    x0, base_y - h, h, x0 + 30, base_y - h - 4, m.median);
      svg += buf;
    }
    for (const auto* c : r.cells_for(values[i])) {
      if (!c->ok()) continue;
      std::snprintf(buf, sizeof buf, "<circle cx=\"%d\" cy=\"%.2f\" r=\"3\" fill=\"#d9822b\"/>\n", x0 + 30,
                    base_y - plot_h * pick(c->metrics) / top);
      svg += buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>\n", x0 + 30, base_y + 18,
                  values[i].c_str());
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

struct ExperimentOptions {
  /// Progress callback: (cell value, seed, stage).
  std::function<void(const std::string&, std::uint64_t, const std::string&)> on_stage;
};

/// Runs gen-data, embed, train, predict and eval for every (axis value, seed)
/// cell under `out_dir`, then writes cells.csv, summary.csv and one SVG per
/// metric. A failing stage marks its cell and the run moves on.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                                       const ExperimentOptions& opt = {}) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ExperimentResult res;
  res.spec = spec;
  binio::write_text_atomic(out_dir / "spec.txt", [&] {
    std::string s = "name=" + spec.name + "\naxis=" + to_string(spec.axis) + "\n";
    for (const auto& [k, v] : spec.overrides) s += "override " + k + "=" + v + "\n";
    return s;
  }());

  std::map<std::uint64_t, GeneratedData> data;
  std::map<std::uint64_t, std::string> data_error;
  std::optional<std::vector<double>> pooled;
  std::string embed_error;

  for (const auto& value : spec.axis_values()) {
    for (const std::uint64_t seed : spec.seeds) {
      CellResult cell;
      cell.value = value;
      cell.seed = seed;
      const fs::path rel = fs::path("cells") / cell_label(value) / ("seed" + std::to_string(seed));
      const fs::path dir = out_dir / rel;
      std::string stage;
      auto enter = [&](const char* s) {
        stage = s;
        if (opt.on_stage) opt.on_stage(value, seed, stage);
      };
      try {
        enter("gen-data");
        if (data_error.count(seed)) throw Error(data_error[seed]);
        if (!data.count(seed)) {
          try {
            auto g = generate_data(spec.dataset, seed);
            write_dataset(g, out_dir / "data" / ("seed" + std::to_string(seed)));
            data.emplace(seed, std::move(g));
          } catch (const std::exception& e) {
            data_error[seed] = e.what();
            throw;
          }
        }
        const GeneratedData& g = data.at(seed);

        enter("embed");
        if (!embed_error.empty()) throw Error(embed_error);
        if (!pooled) {
          try {
            pooled = spec.embeddings.empty() ? std::vector<double>{} : load_pooled_text(spec.embeddings);
          } catch (const std::exception& e) {
            embed_error = e.what();
            throw;
          }
        }

        enter("train");
        const TrainConfig cfg = spec.cell_config(value, seed);
        fs::create_directories(dir);
        binio::write_text_atomic(dir / "config.txt", config_to_text(cfg));
        TrainOptions topt;
        topt.out_dir = dir;
        const TrainResult tr = train(cfg, g.split, g.validation, *pooled, topt);
        const fs::path ckpt = checkpoint_path(dir, tr.state.iteration);
        cell.checkpoint = (rel / ckpt.filename()).generic_string();
        cell.checkpoint_hash = binio::hex64(binio::fnv1a64(binio::read_file(ckpt)));

        enter("predict");
        const auto preds = predict_samples(tr.state, cfg, g.validation, dir / "pred");

        enter("eval");
        const EvalReport report = evaluate_samples(preds, g.validation);
        write_eval_report(report, dir / "eval.csv");
        cell.eval_report = (rel / "eval.csv").generic_string();
        cell.metrics = report.mean;
      } catch (const std::exception& e) {
        cell.status = "failed:" + stage;
        cell.error = e.what();
      }
      res.cells.push_back(std::move(cell));
    }
  }

  for (const auto& value : spec.axis_values()) {
    SummaryRow row;
    row.value = value;
    std::vector<double> d, j, h, a;
    for (const auto* c : res.cells_for(value)) {
      if (!c->ok()) {
        ++row.n_failed;
        continue;
      }
      ++row.n_ok;
      d.push_back(c->metrics.dice);
      j.push_back(c->metrics.jaccard);
      h.push_back(c->metrics.hd95);
      a.push_back(c->metrics.asd);
    }
    row.dice = summarize(d);
    row.jaccard = summarize(j);
    row.hd95 = summarize(h);
    row.asd = summarize(a);
    res.summary.push_back(row);
  }

  res.cells_csv = out_dir / "cells.csv";
  res.summary_csv = out_dir / "summary.csv";
  binio::write_text_atomic(res.cells_csv, cells_csv_text(res));
  binio::write_text_atomic(res.summary_csv, summary_csv_text(res));
  fs::create_directories(out_dir / "plots");
  for (const char* m : {"dice", "jaccard", "hd95", "asd"}) {
    const auto p = out_dir / "plots" / (std::string(m) + ".svg");
    binio::write_text_atomic(p, metric_plot_svg(res, m));
    res.plots.push_back(p);
  }
  return res;
}

// ---------------------------------------------------------------------------
// report_compare
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  }
};

/// Comma-separated text with optional double-quoted fields; blank lines are skipped.
inline CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, started = false;
  auto end_row = [&] {
    row.push_back(std::move(field));
    field.clear();
    if (t.header.empty()) t.header = std::move(row);
    else t.rows.push_back(std::move(row));
    row.clear();
    started = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '\n') {
      if (started) end_row();
      continue;
    }
    if (ch == '\r') continue;
    started = true;
    if (ch == '"') quoted = true;
    else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else field += ch;
  }
  COTRAIN_REQUIRE(!quoted, "unterminated quoted CSV field");
  if (started) end_row();
  for (const auto& r : t.rows)
    COTRAIN_REQUIRE(r.size() == t.header.size(), "CSV row has ", r.size(), " fields, header has ", t.header.size());
  return t;
}

/// Which metric a column reports ("dice", "dice_median", ...), if any.
inline std::optional<std::string> metric_of_column(const std::string& col) {
  for (const char* m : {"dice", "jaccard", "hd95", "asd"}) {
    const std::string ms = m;
    if (col == ms || col == ms + "_median" || col == ms + "_mean") return ms;
  }
  return std::nullopt;
}

inline bool higher_is_better(const std::string& metric) { return metric == "dice" || metric == "jaccard"; }

struct CompareRow {
  std::string key;
  std::string column;
  double baseline = 0.0;
  double method = 0.0;
  double delta = 0.0;
  std::string direction;  // the good direction for this metric: "↑" or "↓"
  std::string verdict;    // "better", "worse" or "same"
};

/// Per-metric deltas (method - baseline) for every row shared by both tables.
/// Rows are matched on the id/axis/value/seed columns present.
inline std::vector<CompareRow> report_compare(const CsvTable& baseline, const CsvTable& method) {
  COTRAIN_REQUIRE(baseline.header == method.header, "column mismatch between baseline and method tables");
  std::vector<int> key_cols, metric_cols;
  for (std::size_t i = 0; i < baseline.header.size(); ++i) {
    const auto& h = baseline.header[i];
    if (h == "id" || h == "axis" || h == "value" || h == "seed") key_cols.push_back(int(i));
    if (metric_of_column(h)) metric_cols.push_back(int(i));
  }
  COTRAIN_REQUIRE(!metric_cols.empty(), "tables have no metric columns (dice, jaccard, hd95, asd)");
  COTRAIN_REQUIRE(baseline.rows.size() == method.rows.size(), "baseline has ", baseline.rows.size(),
                  " rows, method has ", method.rows.size());
  auto key_of = [&](const std::vector<std::string>& r) {
    std::string k;
    for (int c : key_cols) k += (k.empty() ? "" : "/") + r[c];
    return k.empty() ? std::string("-") : k;
  };
  auto number = [](const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    COTRAIN_REQUIRE(used == s.size() && used > 0, "non-numeric value \"", s, "\" in column ", what);
    return v;
  };
  std::vector<CompareRow> out;
  for (std::size_t r = 0; r < baseline.rows.size(); ++r) {
    const auto& b = baseline.rows[r];
    const auto& m = method.rows[r];
    const std::string key = key_of(b);
    COTRAIN_REQUIRE(key == key_of(m), "row ", r + 1, " keys differ: ", key, " vs ", key_of(m));
    for (int c : metric_cols) {
      const auto& col = baseline.header[c];
      if (b[c].empty() || m[c].empty()) continue;  // failed cells carry no metrics
      CompareRow row;
      row.key = key;
      row.column = col;
      row.baseline = number(b[c], col);
      row.method = number(m[c], col);
      row.delta = row.method - row.baseline;
      const bool up = higher_is_better(*metric_of_column(col));
      row.direction = up ? "↑" : "↓";
      const double tol = 1e-12;
      row.verdict = std::abs(row.delta) <= tol ? "same" : ((row.delta > 0) == up ? "better" : "worse");
      out.push_back(row);
    }
  }
  return out;
}

inline std::vector<CompareRow> report_compare(const std::filesystem::path& baseline_csv,
                                              const std::filesystem::path& method_csv) {
  return report_compare(parse_csv(binio::read_file(baseline_csv)), parse_csv(binio::read_file(method_csv)));
}

inline std::string compare_csv_text(const std::vector<CompareRow>& rows) {
  std::string out = "key,metric,baseline,method,delta,direction,verdict\n";
  char buf[48];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%+.6f", r.delta);
    out += detail::csv_field(r.key) + "," + r.column + "," + format_metric(r.baseline) + "," +
           format_metric(r.method) + "," + buf + "," + r.direction + "," + r.verdict + "\n";
  }
  return out;
}

}  // namespace cotrain
