#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cotrain/cotrain.hpp"

namespace fs = std::filesystem;
using namespace cotrain;

namespace {

struct GenDataArgs {
  std::string out;
  int n_volumes = 24;
  std::vector<int> shape{32, 32, 32};
  double difficulty = DatasetSpec{}.difficulty;
  double labeled_ratio = 0.1;
  int n_validation = 8;
  std::uint64_t seed = 0;
};

struct EmbedArgs {
  std::string descriptions;
  std::string provider = "test";
  std::string input;
  int dim = 768;
  std::string out;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string config;
  std::string data;
  std::string embeddings;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

struct PredictArgs {
  std::string checkpoint;
  std::string data;
  std::string image;
  std::string out;
  std::string model;
  bool probs = false;
  std::uint64_t seed = 0;
};

struct EvalArgs {
  std::string pred;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
};

struct ExperimentArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct ReportArgs {
  std::string baseline;
  std::string method;
  std::string out;
  std::uint64_t seed = 0;
};

Shape3 shape_from(const std::vector<int>& v) {
  COTRAIN_REQUIRE(v.size() == 1 || v.size() == 3, "--shape takes one or three sizes");
  return v.size() == 1 ? Shape3{v[0], v[0], v[0]} : Shape3{v[0], v[1], v[2]};
}

int run_gen_data(const GenDataArgs& a) {
  DatasetSpec d;
  d.n_volumes = a.n_volumes;
  d.shape = shape_from(a.shape);
  d.difficulty = a.difficulty;
  d.labeled_ratio = a.labeled_ratio;
  d.n_validation = a.n_validation;
  const auto g = generate_data(d, a.seed);
  const auto manifest = write_dataset(g, a.out);
  std::printf("wrote %zu labeled, %zu unlabeled, %zu validation volumes; manifest %s\n", g.split.labeled.size(),
              g.split.unlabeled.size(), g.validation.size(), manifest.string().c_str());
  return 0;
}

int run_embed(const EmbedArgs& a) {
  const auto ds = load_descriptions(a.descriptions);
  std::unique_ptr<EmbeddingProvider> provider;
  if (a.provider == "test") provider = std::make_unique<HashEmbeddingProvider>(a.dim);
  else if (a.provider == "file") {
    COTRAIN_REQUIRE(!a.input.empty(), "--provider file needs --input <precomputed.emb1>");
    provider = std::make_unique<FileEmbeddingProvider>(fs::path(a.input));
  } else {
    throw Error(detail::concat("unknown provider \"", a.provider, "\" (expected test or file)"));
  }
  const auto m = embed_descriptions(*provider, ds);
  write_embeddings(m, a.out);
  std::printf("embedded %zu responses with %s into %s (dim %d)\n", m.size(), provider->id().c_str(), a.out.c_str(),
              m.dim);
  return 0;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const auto [split, validation] = load_manifest(a.data);
  const std::vector<double> pooled = a.embeddings.empty() ? std::vector<double>{} : load_pooled_text(a.embeddings);
  fs::create_directories(a.out);
  binio::write_text_atomic(fs::path(a.out) / "config.txt", config_to_text(cfg));
  TrainOptions opt;
  opt.out_dir = a.out;
  if (!a.resume.empty()) opt.resume = fs::path(a.resume);
  if (!a.quiet)
    opt.on_log = [](const LogRow& r) {
      if (r.iter == 0 || r.val_dice)
        std::printf("iter %d lr %.5f sup %.4f unsup %.4f val_dice %s\n", r.iter, r.lr, r.loss_sup, r.loss_unsup,
                    format_log_value(r.val_dice).c_str());
      std::fflush(stdout);
    };
  const auto res = train(cfg, split, validation, pooled, opt);
  std::printf("finished at iteration %d; checkpoint %s\n", res.state.iteration,
              res.checkpoints.empty() ? "-" : res.checkpoints.back().string().c_str());
  return 0;
}

int run_predict(const PredictArgs& a) {
  COTRAIN_REQUIRE(a.data.empty() != a.image.empty(), "give exactly one of --data and --image");
  auto loaded = read_checkpoint(a.checkpoint);
  if (!a.model.empty()) loaded.config.eval_model = parse_ensemble_mode(a.model);
  std::vector<Sample> samples;
  if (!a.image.empty()) {
    samples.push_back({sample_id_from_path(a.image), read_image(a.image), std::nullopt});
  } else {
    const auto [split, validation] = load_manifest(a.data);
    COTRAIN_REQUIRE(!validation.empty(), a.data, ": manifest lists no validation volumes");
    samples = validation;
  }
  fs::create_directories(a.out);
  for (const auto& s : samples) {
    const auto probs = predict_volume(loaded.state, s.image, loaded.config);
    write_volume(argmax_labels(probs), fs::path(a.out) / (s.id + ".pred.vol1"));
    if (a.probs) write_prob_volume(probs, fs::path(a.out) / (s.id + ".prob.vol1"));
  }
  std::printf("predicted %zu volumes with model %s into %s\n", samples.size(),
              to_string(loaded.config.eval_model).c_str(), a.out.c_str());
  return 0;
}

int run_eval(const EvalArgs& a) {
  const auto [split, validation] = load_manifest(a.data);
  COTRAIN_REQUIRE(!validation.empty(), a.data, ": manifest lists no validation volumes");
  std::vector<LabelVolume> preds;
  for (const auto& s : validation) preds.push_back(read_label(fs::path(a.pred) / (s.id + ".pred.vol1")));
  const auto report = evaluate_samples(preds, validation);
  const auto csv = eval_report_csv(report);
  if (!a.out.empty()) write_eval_report(report, a.out);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int run_experiment_cmd(const ExperimentArgs& a) {
  auto spec = load_experiment_spec(a.spec);
  if (a.seed) spec.seeds = {*a.seed};
  ExperimentOptions opt;
  opt.on_stage = [](const std::string& value, std::uint64_t seed, const std::string& stage) {
    std::printf("[%s seed %llu] %s\n", value.c_str(), static_cast<unsigned long long>(seed), stage.c_str());
    std::fflush(stdout);
  };
  const auto res = run_experiment(spec, a.out, opt);
  int failed = 0;
  for (const auto& c : res.cells)
    if (!c.ok()) {
      ++failed;
      std::fprintf(stderr, "cell %s seed %llu %s: %s\n", c.value.c_str(), static_cast<unsigned long long>(c.seed),
                   c.status.c_str(), c.error.c_str());
    }
  std::fputs(binio::read_file(res.summary_csv).c_str(), stdout);
  std::printf("%zu cells, %d failed; results in %s\n", res.cells.size(), failed, a.out.c_str());
  return failed == 0 ? 0 : 3;
}

int run_report(const ReportArgs& a) {
  const auto rows = report_compare(fs::path(a.baseline), fs::path(a.method));
  const auto text = compare_csv_text(rows);
  if (!a.out.empty()) binio::write_text_atomic(a.out, text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided co-training for semi-supervised 3D segmentation"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and its manifest");
  cmd_gen->add_option("--out", gd.out, "Output directory")->required();
  cmd_gen->add_option("--n-volumes", gd.n_volumes, "Training pool size")->capture_default_str();
  cmd_gen->add_option("--shape", gd.shape, "Volume size: one value or d h w")->expected(1, 3)->capture_default_str();
  cmd_gen->add_option("--difficulty", gd.difficulty, "Contrast/noise level in [0, 1]")->capture_default_str();
  cmd_gen->add_option("--labeled-ratio", gd.labeled_ratio, "Fraction of the pool keeping labels")
      ->capture_default_str();
  cmd_gen->add_option("--n-validation", gd.n_validation, "Held-out labeled volumes")->capture_default_str();
  cmd_gen->add_option("--seed", gd.seed, "Random seed")->capture_default_str();

  EmbedArgs em;
  auto* cmd_embed = app.add_subcommand("embed", "Embed description responses into an EMB1 file");
  cmd_embed->add_option("--descriptions", em.descriptions, "Description text file")->required();
  cmd_embed->add_option("--provider", em.provider, "test (hash encoder) or file (precomputed EMB1)")
      ->capture_default_str();
  cmd_embed->add_option("--input", em.input, "Precomputed EMB1 for --provider file");
  cmd_embed->add_option("--dim", em.dim, "Embedding width for the test provider")->capture_default_str();
  cmd_embed->add_option("--out", em.out, "Output EMB1 path")->required();
  cmd_embed->add_option("--seed", em.seed, "Accepted for uniformity; embedding is deterministic");

  TrainArgs tr;
  auto* cmd_train = app.add_subcommand("train", "Co-train two models");
  cmd_train->add_option("--config", tr.config, "key=value config file");
  cmd_train->add_option("--data", tr.data, "Dataset manifest")->required();
  cmd_train->add_option("--embeddings", tr.embeddings, "EMB1 file; omit for text-free training");
  cmd_train->add_option("--out", tr.out, "Output directory")->required();
  cmd_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  cmd_train->add_option("--seed", tr.seed, "Overrides the config seed");
  cmd_train->add_flag("--quiet", tr.quiet, "Do not print progress");

  PredictArgs pr;
  auto* cmd_pred = app.add_subcommand("predict", "Sliding-window prediction from a checkpoint");
  cmd_pred->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  cmd_pred->add_option("--data", pr.data, "Manifest; its validation volumes are predicted");
  cmd_pred->add_option("--image", pr.image, "Single VOL1 image");
  cmd_pred->add_option("--out", pr.out, "Output directory")->required();
  cmd_pred->add_option("--model", pr.model, "a, b or ensemble (default: the checkpoint's eval.model)");
  cmd_pred->add_flag("--probs", pr.probs, "Also write probability volumes");
  cmd_pred->add_option("--seed", pr.seed, "Accepted for uniformity; prediction is deterministic");

  EvalArgs ev;
  auto* cmd_eval = app.add_subcommand("eval", "Score predictions against the manifest's validation labels");
  cmd_eval->add_option("--pred", ev.pred, "Directory of <id>.pred.vol1 files")->required();
  cmd_eval->add_option("--data", ev.data, "Dataset manifest")->required();
  cmd_eval->add_option("--out", ev.out, "Metrics CSV path");
  cmd_eval->add_option("--seed", ev.seed, "Accepted for uniformity; evaluation is deterministic");

  ExperimentArgs ex;
  auto* cmd_exp = app.add_subcommand("experiment", "Run an ablation grid end to end");
  cmd_exp->add_option("--spec", ex.spec, "Experiment spec JSON")->required();
  cmd_exp->add_option("--out", ex.out, "Output directory")->required();
  cmd_exp->add_option("--seed", ex.seed, "Run this single seed instead of the file's seed list");

  ReportArgs rp;
  auto* cmd_report = app.add_subcommand("report", "Per-metric deltas between two result tables");
  cmd_report->add_option("--baseline", rp.baseline, "Baseline CSV")->required();
  cmd_report->add_option("--method", rp.method, "Method CSV")->required();
  cmd_report->add_option("--out", rp.out, "Delta CSV path");
  cmd_report->add_option("--seed", rp.seed, "Accepted for uniformity");

  CLI11_PARSE(app, argc, argv);

  const CLI::App* chosen = app.get_subcommands().front();
  const std::string stage = chosen->get_name();
  try {
    if (chosen == cmd_gen) return run_gen_data(gd);
    if (chosen == cmd_embed) return run_embed(em);
    if (chosen == cmd_train) return run_train(tr);
    if (chosen == cmd_pred) return run_predict(pr);
    if (chosen == cmd_eval) return run_eval(ev);
    if (chosen == cmd_exp) return run_experiment_cmd(ex);
    if (chosen == cmd_report) return run_report(rp);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cotrain %s: error: %s\n", stage.c_str(), e.what());
    return 2;
  }
  return 1;
}
