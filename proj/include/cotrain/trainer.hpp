#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cotrain/augment.hpp"
#include "cotrain/binio.hpp"
#include "cotrain/core.hpp"
#include "cotrain/dataio.hpp"
#include "cotrain/inference.hpp"
#include "cotrain/losses.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/nn.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/segmodel.hpp"
#include "cotrain/textknow.hpp"

namespace cotrain {

enum class LrSchedule { Constant, Poly };

/// Where the pseudo-label that supervises model A comes from.
///   original: B's forward on the unmixed unlabeled patch
///   mixed:    B's forward on the CutMix patch; A's logits are mixed with the same mask
enum class PseudoSource { Original, Mixed };

struct TrainConfig {
  double lr0 = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int max_iters = 2000;
  int batch_size = 4;
  int patch_size = 32;
  LrSchedule lr_schedule = LrSchedule::Poly;
  double lr_power = 0.9;
  std::uint64_t seed = 0;

  double noise_amplitude = 0.2;
  double cutmix_ratio_min = 0.25;
  double cutmix_ratio_max = 0.5;  // 0 disables CutMix
  PseudoSource pseudo_source = PseudoSource::Original;

  double beta_text = 1.0;
  USLConfig usl;
  UnsupMode unsup_mode = UnsupMode::Usl;
  SupMode sup_mode = SupMode::CeDice;
  double unsup_weight = 1.0;

  int checkpoint_every = 500;  // 0: final checkpoint only
  int val_every = 100;         // 0: no periodic validation
  int patches_per_volume = 0;  // 0: independent draws with replacement
  double foreground_force = 0.5;

  int base_channels = 8;
  int levels = 3;
  int norm_groups = 4;
  int text_hidden = 256;

  EnsembleMode eval_model = EnsembleMode::AOnly;
  int eval_patch = 0;   // 0: patch_size
  int eval_stride = 0;  // 0: half the evaluation patch

  SegArch arch() const {
    SegArch a;
    a.base_channels = base_channels;
    a.levels = levels;
    a.norm_groups = norm_groups;
    return a;
  }

  Shape3 patch() const { return {patch_size, patch_size, patch_size}; }

  SlidingWindowSpec eval_spec() const {
    const int p = eval_patch > 0 ? eval_patch : patch_size;
    const int s = eval_stride > 0 ? eval_stride : std::max(1, p / 2);
    return {{p, p, p}, {s, s, s}};
  }

  void validate() const {
    COTRAIN_REQUIRE(lr0 > 0.0, "lr0 must be positive");
    COTRAIN_REQUIRE(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
    COTRAIN_REQUIRE(weight_decay >= 0.0, "weight_decay must be non-negative");
    COTRAIN_REQUIRE(max_iters > 0, "max_iters must be positive");
    COTRAIN_REQUIRE(batch_size > 0 && batch_size % 2 == 0, "batch_size must be positive and even, got ", batch_size);
    COTRAIN_REQUIRE(patch_size > 0, "patch_size must be positive");
    COTRAIN_REQUIRE(patch_size % (1 << (levels - 1)) == 0, "patch_size ", patch_size, " is not divisible by ",
                    1 << (levels - 1));
    COTRAIN_REQUIRE(lr_power > 0.0, "lr_power must be positive");
    COTRAIN_REQUIRE(noise_amplitude >= 0.0, "noise amplitude must be non-negative");
    COTRAIN_REQUIRE(cutmix_ratio_max == 0.0 || (cutmix_ratio_min > 0.0 && cutmix_ratio_min <= cutmix_ratio_max &&
                                                cutmix_ratio_max < 1.0),
                    "cutmix ratios must satisfy 0 < min <= max < 1 (or max = 0 to disable)");
    COTRAIN_REQUIRE(beta_text >= 0.0, "beta_text must be non-negative");
    usl.validate();
    COTRAIN_REQUIRE(unsup_weight >= 0.0, "unsup_weight must be non-negative");
    COTRAIN_REQUIRE(checkpoint_every >= 0 && val_every >= 0 && patches_per_volume >= 0,
                    "checkpoint_every, val_every and patches_per_volume must be non-negative");
    COTRAIN_REQUIRE(foreground_force >= 0.0 && foreground_force <= 1.0, "foreground_force must lie in [0, 1]");
    COTRAIN_REQUIRE(base_channels > 0 && levels >= 1 && norm_groups > 0 && text_hidden > 0,
                    "model sizes must be positive");
    eval_spec().validate();
  }
};

inline std::string to_string(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "poly"; }
inline std::string to_string(PseudoSource s) { return s == PseudoSource::Original ? "original" : "mixed"; }

namespace detail {

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename N> N parse_number(std::string_view key, std::string_view text) {
  N v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  COTRAIN_REQUIRE(r.ec == std::errc() && r.ptr == end, "config key ", key, ": cannot parse \"", text, "\"");
  return v;
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Sets one key; throws on unknown keys or unparsable values.
inline void set_config_value(TrainConfig& c, std::string_view key, std::string_view value) {
  using detail::parse_number;
  auto real = [&](double& f) { f = parse_number<double>(key, value); };
  auto integer = [&](int& f) { f = parse_number<int>(key, value); };
  if (key == "lr0") real(c.lr0);
  else if (key == "momentum") real(c.momentum);
  else if (key == "weight_decay") real(c.weight_decay);
  else if (key == "max_iters") integer(c.max_iters);
  else if (key == "batch_size") integer(c.batch_size);
  else if (key == "patch_size") integer(c.patch_size);
  else if (key == "lr_schedule") {
    if (value == "constant") c.lr_schedule = LrSchedule::Constant;
    else if (value == "poly") c.lr_schedule = LrSchedule::Poly;
    else throw Error(detail::concat("lr_schedule must be constant or poly, got \"", value, "\""));
  } else if (key == "lr_power") real(c.lr_power);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "noise.amplitude" || key == "noise_amplitude") real(c.noise_amplitude);
  else if (key == "cutmix.ratio_min") real(c.cutmix_ratio_min);
  else if (key == "cutmix.ratio_max") real(c.cutmix_ratio_max);
  else if (key == "cutmix.pseudo_source") {
    if (value == "original") c.pseudo_source = PseudoSource::Original;
    else if (value == "mixed") c.pseudo_source = PseudoSource::Mixed;
    else throw Error(detail::concat("cutmix.pseudo_source must be original or mixed, got \"", value, "\""));
  } else if (key == "beta_text") real(c.beta_text);
  else if (key == "usl.t1") real(c.usl.t1);
  else if (key == "usl.t2") real(c.usl.t2);
  else if (key == "usl.multiclass") c.usl.multiclass = parse_number<int>(key, value) != 0;
  else if (key == "loss.unsup_mode" || key == "unsup_mode") c.unsup_mode = parse_unsup_mode(value);
  else if (key == "loss.sup_mode" || key == "sup_mode") c.sup_mode = parse_sup_mode(value);
  else if (key == "unsup_weight") real(c.unsup_weight);
  else if (key == "checkpoint_every") integer(c.checkpoint_every);
  else if (key == "val_every") integer(c.val_every);
  else if (key == "patches_per_volume") integer(c.patches_per_volume);
  else if (key == "foreground_force") real(c.foreground_force);
  else if (key == "model.base_channels") integer(c.base_channels);
  else if (key == "model.levels") integer(c.levels);
  else if (key == "model.norm_groups") integer(c.norm_groups);
  else if (key == "text.hidden") integer(c.text_hidden);
  else if (key == "eval.model") c.eval_model = parse_ensemble_mode(value);
  else if (key == "eval.patch") integer(c.eval_patch);
  else if (key == "eval.stride") integer(c.eval_stride);
  else throw Error(detail::concat("unknown config key \"", key, "\""));
}

/// Canonical key/value pairs; parse_config(config_to_text(c)) reproduces c.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  using detail::format_real;
  return {
      {"lr0", format_real(c.lr0)},
      {"momentum", format_real(c.momentum)},
      {"weight_decay", format_real(c.weight_decay)},
      {"max_iters", std::to_string(c.max_iters)},
      {"batch_size", std::to_string(c.batch_size)},
      {"patch_size", std::to_string(c.patch_size)},
      {"lr_schedule", to_string(c.lr_schedule)},
      {"lr_power", format_real(c.lr_power)},
      {"seed", std::to_string(c.seed)},
      {"noise.amplitude", format_real(c.noise_amplitude)},
      {"cutmix.ratio_min", format_real(c.cutmix_ratio_min)},
      {"cutmix.ratio_max", format_real(c.cutmix_ratio_max)},
      {"cutmix.pseudo_source", to_string(c.pseudo_source)},
      {"beta_text", format_real(c.beta_text)},
      {"usl.t1", format_real(c.usl.t1)},
      {"usl.t2", format_real(c.usl.t2)},
      {"usl.multiclass", c.usl.multiclass ? "1" : "0"},
      {"loss.unsup_mode", to_string(c.unsup_mode)},
      {"loss.sup_mode", to_string(c.sup_mode)},
      {"unsup_weight", format_real(c.unsup_weight)},
      {"checkpoint_every", std::to_string(c.checkpoint_every)},
      {"val_every", std::to_string(c.val_every)},
      {"patches_per_volume", std::to_string(c.patches_per_volume)},
      {"foreground_force", format_real(c.foreground_force)},
      {"model.base_channels", std::to_string(c.base_channels)},
      {"model.levels", std::to_string(c.levels)},
      {"model.norm_groups", std::to_string(c.norm_groups)},
      {"text.hidden", std::to_string(c.text_hidden)},
      {"eval.model", to_string(c.eval_model)},
      {"eval.patch", std::to_string(c.eval_patch)},
      {"eval.stride", std::to_string(c.eval_stride)},
  };
}

inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) out += k + "=" + v + "\n";
  return out;
}

/// Flat key=value lines; '#' starts a comment. Keys not given keep `base` values.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    COTRAIN_REQUIRE(eq != std::string_view::npos, "config line ", line_no, ": expected key=value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  try {
    return parse_config(binio::read_file(path), base);
  } catch (const Error& e) {
    throw Error(detail::concat(path.string(), ": ", e.what()));
  }
}

/// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v.
template <typename T>
void sgd_update(nn::ParamSet<T>& params, const nn::ParamSet<T>& grads, nn::ParamSet<T>& velocity, double lr,
                double momentum, double weight_decay) {
  COTRAIN_REQUIRE(params.same_layout(grads) && params.same_layout(velocity), "sgd_update: layout mismatch");
  for (std::size_t b = 0; b < grads.count(); ++b)
    for (std::size_t i = 0; i < grads[b].values.size(); ++i)
      COTRAIN_REQUIRE(std::isfinite(double(grads[b].values[i])), "non-finite gradient in ", grads[b].name, "[", i,
                      "]");
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t b = 0; b < params.count(); ++b) {
    auto w = params.values(b);
    auto g = grads.values(b);
    auto v = velocity.values(b);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * w[i];
      w[i] -= step * v[i];
    }
  }
}

inline double lr_schedule(const TrainConfig& cfg, int iteration) {
  COTRAIN_REQUIRE(iteration >= 0 && iteration <= cfg.max_iters, "iteration ", iteration, " outside [0, ",
                  cfg.max_iters, "]");
  if (cfg.lr_schedule == LrSchedule::Constant) return cfg.lr0;
  return cfg.lr0 * std::pow(1.0 - double(iteration) / double(cfg.max_iters), cfg.lr_power);
}

struct LogRow {
  int iter = 0;
  double lr = 0.0;
  double loss_sup = 0.0;
  double loss_unsup = 0.0;
  double loss_total = 0.0;
  std::optional<double> val_dice;
};

/// Both models, the shared text projection, their momentum buffers and the loop position.
struct TrainState {
  SegModelParams<float> a;
  SegModelParams<float> b;
  ProjectionParams<float> proj;
  nn::ParamSet<float> vel_a, vel_b, vel_proj;
  int iteration = 0;
  Rng rng;
  std::vector<LogRow> history;
  std::vector<double> pooled_text;  // empty: text-free training

  bool has_text() const noexcept { return !pooled_text.empty(); }
  bool all_finite() const noexcept {
    return a.weights.all_finite() && b.weights.all_finite() && proj.weights.all_finite();
  }
};

/// Deterministic initial state. The two models get independent initialisations.
inline TrainState init_train_state(const TrainConfig& cfg, std::vector<double> pooled_text, int num_classes = 2) {
  cfg.validate();
  TrainState s;
  Rng root(Rng::mix(cfg.seed));
  Rng rng_a = root.fork(1), rng_b = root.fork(2), rng_p = root.fork(3);
  SegArch arch = cfg.arch();
  arch.num_classes = num_classes;
  s.a = init_seg_params<float>(arch, rng_a);
  s.b = init_seg_params<float>(arch, rng_b);
  const int in_dim = pooled_text.empty() ? 768 : int(pooled_text.size());
  s.proj = init_projection<float>({in_dim, cfg.text_hidden, arch.bottleneck_channels()}, rng_p);
  s.vel_a = s.a.weights.zeros_like();
  s.vel_b = s.b.weights.zeros_like();
  s.vel_proj = s.proj.weights.zeros_like();
  s.rng = root.fork(4);
  s.pooled_text = std::move(pooled_text);
  return s;
}

/// Text feature for the current projection weights; empty without text.
inline std::vector<float> text_feature(const TrainState& s, ProjectionCache<float>* cache = nullptr) {
  if (!s.has_text()) return {};
  std::vector<float> x(s.pooled_text.begin(), s.pooled_text.end());
  return projection_forward<float>(s.proj, x, cache);
}

/// Everything one step saw, for recomputation in tests.
struct StepCapture {
  std::vector<Volume> labeled_inputs;
  std::vector<LabelVolume> labeled_targets;
  std::vector<LogitVolume<float>> labeled_a, labeled_b;
  std::vector<Volume> unlabeled_inputs;  // after noise
  std::vector<Volume> mixed_inputs;
  std::vector<CutMixMask> masks;
  std::vector<LogitVolume<float>> unl_a, unl_b, mix_b;
  std::vector<ProbVolume<float>> target_a, target_b;  // pseudo-labels supervising A and B
  std::vector<float> z;
};

struct StepResult {
  double lr = 0.0;
  double loss_sup = 0.0;
  double loss_unsup = 0.0;
  double loss_total = 0.0;
};

namespace detail {

inline void scaled_copy(LogitVolume<float>& dst, const LogitVolume<float>& src, double scale) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(double(s[i]) * scale);
}

inline void add_scaled(LogitVolume<float>& dst, const LogitVolume<float>& src, double scale) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<float>(double(s[i]) * scale);
}

inline void require_finite_loss(double v, const char* what, int iteration) {
  COTRAIN_REQUIRE(std::isfinite(v), "non-finite ", what, " loss (", v, ") at iteration ", iteration);
}

}  // namespace detail

/// One co-training step on a drawn batch:
///  1. uniform noise on every image;
///  2. labeled patches through both models, supervised loss;
///  3. unlabeled patches through A (taped) and B (pseudo-label source for A);
///  4. patch i CutMixed with patch i+1 (mod n) under mask M_i, through B (taped);
///  5. A is supervised by softmax(B(original)), B by CutMix of A's softmax with the same M_i;
///  6. total = sup + unsup_weight * unsup, one SGD update of A, B and the projection.
/// Both terms are sums over their sub-batch.
inline StepResult train_step(TrainState& s, const Batch& batch, const TrainConfig& cfg,
                             StepCapture* capture = nullptr) {
  COTRAIN_REQUIRE(s.iteration < cfg.max_iters, "train_step past max_iters");
  COTRAIN_REQUIRE(!batch.labeled_images.empty(), "batch has no labeled patches");
  StepResult r;
  r.lr = lr_schedule(cfg, s.iteration);
  const double beta = cfg.beta_text;

  std::vector<Volume> lab, unl;
  for (const auto& v : batch.labeled_images) lab.push_back(add_uniform_noise(v, cfg.noise_amplitude, s.rng));
  for (const auto& v : batch.unlabeled_images) unl.push_back(add_uniform_noise(v, cfg.noise_amplitude, s.rng));

  ProjectionCache<float> pcache;
  const std::vector<float> z = text_feature(s, &pcache);
  const std::span<const float> zs(z);

  auto ga = s.a.weights.zeros_like();
  auto gb = s.b.weights.zeros_like();
  std::vector<float> dz(z.size(), 0.0f);

  if (capture) {
    *capture = {};
    capture->labeled_inputs = lab;
    capture->labeled_targets = batch.labeled_targets;
    capture->unlabeled_inputs = unl;
    capture->z = z;
  }

  // Supervised term.
  for (std::size_t i = 0; i < lab.size(); ++i) {
    ForwardTape<float> ta, tb;
    auto la = forward<float>(s.a, lab[i], zs, beta, &ta);
    auto lb = forward<float>(s.b, lab[i], zs, beta, &tb);
    auto pl = supervised_loss(la, lb, batch.labeled_targets[i], cfg.sup_mode);
    r.loss_sup += pl.value;
    backward<float>(s.a, ta, pl.grad_a, ga, dz);
    backward<float>(s.b, tb, pl.grad_b, gb, dz);
    if (capture) {
      capture->labeled_a.push_back(std::move(la));
      capture->labeled_b.push_back(std::move(lb));
    }
  }

  // Unsupervised cross term. The batch is drawn even when the term is off so
  // that the rng sequence does not depend on unsup_weight.
  const bool cutmix_on = cfg.cutmix_ratio_max > 0.0;
  const std::size_t n = unl.size();
  std::vector<CutMixMask> masks;
  if (cutmix_on)
    for (std::size_t i = 0; i < n; ++i)
      masks.push_back(sample_cutmix_mask(batch.patch_size, {cfg.cutmix_ratio_min, cfg.cutmix_ratio_max}, s.rng));

  if (cfg.unsup_weight > 0.0 && n > 0) {
    const double w = cfg.unsup_weight;
    std::vector<ForwardTape<float>> tape_a(n), tape_b(n);
    std::vector<LogitVolume<float>> la(n), lb_orig, lb_mix(n);
    std::vector<ProbVolume<float>> pa(n);
    std::vector<Volume> mixed;
    for (std::size_t i = 0; i < n; ++i) {
      la[i] = forward<float>(s.a, unl[i], zs, beta, &tape_a[i]);
      pa[i] = softmax_probs(la[i]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = (i + 1) % n;
      mixed.push_back(cutmix_on ? cutmix(unl[i], unl[j], masks[i]) : unl[i]);
      lb_mix[i] = forward<float>(s.b, mixed[i], zs, beta, &tape_b[i]);
    }
    if (cfg.pseudo_source == PseudoSource::Original)
      for (std::size_t i = 0; i < n; ++i) lb_orig.push_back(forward<float>(s.b, unl[i], zs, beta));

    std::vector<LogitVolume<float>> da(n);
    for (std::size_t i = 0; i < n; ++i) da[i] = LogitVolume<float>(la[i].channels(), la[i].shape());

    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = (i + 1) % n;
      // B is supervised by A's pseudo-label mixed with the same mask as B's input.
      ProbVolume<float> target_b = cutmix_on ? cutmix(pa[i], pa[j], masks[i]) : pa[i];
      auto lossb = unsup_voxel_loss(lb_mix[i], target_b, cfg.usl, cfg.unsup_mode);
      ProbVolume<float> target_a;
      LossGrad<float> lossa;
      if (cfg.pseudo_source == PseudoSource::Original) {
        target_a = softmax_probs(lb_orig[i]);
        lossa = unsup_voxel_loss(la[i], target_a, cfg.usl, cfg.unsup_mode);
        detail::add_scaled(da[i], lossa.grad, w);
      } else {
        target_a = softmax_probs(lb_mix[i]);
        const auto la_mix = cutmix_on ? cutmix(la[i], la[j], masks[i]) : la[i];
        lossa = unsup_voxel_loss(la_mix, target_a, cfg.usl, cfg.unsup_mode);
        if (cutmix_on) {
          // Route the mixed-logit gradient back to the patch that owns each voxel.
          const auto& m = masks[i];
          const std::size_t vox = la_mix.voxels();
          for (int c = 0; c < la_mix.channels(); ++c)
            for (std::size_t v = 0; v < vox; ++v) {
              const float g = static_cast<float>(double(lossa.grad(c, v)) * w);
              if (m.inside(v)) da[i](c, v) += g;
              else da[j](c, v) += g;
            }
        } else {
          detail::add_scaled(da[i], lossa.grad, w);
        }
      }
      r.loss_unsup += lossa.value + lossb.value;
      detail::scaled_copy(lossb.grad, lossb.grad, w);
      backward<float>(s.b, tape_b[i], lossb.grad, gb, dz);
      if (capture) {
        capture->target_a.push_back(std::move(target_a));
        capture->target_b.push_back(std::move(target_b));
      }
    }
    for (std::size_t i = 0; i < n; ++i) backward<float>(s.a, tape_a[i], da[i], ga, dz);
    if (capture) {
      capture->mixed_inputs = std::move(mixed);
      capture->unl_a = std::move(la);
      capture->unl_b = std::move(lb_orig);
      capture->mix_b = std::move(lb_mix);
    }
  }
  if (capture) capture->masks = masks;

  r.loss_total = r.loss_sup + cfg.unsup_weight * r.loss_unsup;
  detail::require_finite_loss(r.loss_sup, "supervised", s.iteration);
  detail::require_finite_loss(r.loss_unsup, "unsupervised", s.iteration);

  auto gp = s.proj.weights.zeros_like();
  if (s.has_text() && beta != 0.0) projection_backward<float>(s.proj, pcache, dz, gp);

  try {
    sgd_update(s.a.weights, ga, s.vel_a, r.lr, cfg.momentum, cfg.weight_decay);
    sgd_update(s.b.weights, gb, s.vel_b, r.lr, cfg.momentum, cfg.weight_decay);
    sgd_update(s.proj.weights, gp, s.vel_proj, r.lr, cfg.momentum, cfg.weight_decay);
  } catch (const Error& e) {
    throw Error(detail::concat("iteration ", s.iteration, ": ", e.what()));
  }
  ++s.iteration;
  return r;
}

/// Sliding-window forward of one model of the state, as used for validation and prediction.
inline ModelForward model_forward(const SegModelParams<float>& p, std::vector<float> z, double beta_text) {
  return [&p, z = std::move(z), beta_text](const Volume& v) {
    return forward<float>(p, v, std::span<const float>(z), beta_text);
  };
}

inline ProbVolume<float> predict_volume(const TrainState& s, const Volume& v, const TrainConfig& cfg) {
  const auto z = text_feature(s);
  return ensemble_predict(model_forward(s.a, z, cfg.beta_text), model_forward(s.b, z, cfg.beta_text), v,
                          cfg.eval_spec(), cfg.eval_model);
}

/// Mean Dice of the evaluation model over labeled validation volumes.
inline double validation_dice(const TrainState& s, const std::vector<Sample>& validation, const TrainConfig& cfg) {
  COTRAIN_REQUIRE(!validation.empty(), "validation set is empty");
  double sum = 0.0;
  for (const auto& smp : validation) {
    COTRAIN_REQUIRE(smp.label.has_value(), "validation sample ", smp.id, " has no label");
    sum += dice_coeff(argmax_labels(predict_volume(s, smp.image, cfg)), *smp.label);
  }
  return sum / double(validation.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: CKPT magic, JSON header line, little-endian f32 blobs.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int iteration) {
  return dir / ("ckpt_" + std::to_string(iteration) + ".ckpt");
}

namespace detail {

inline binio::Json arch_json(const SegArch& a) {
  return {{"in_channels", a.in_channels}, {"num_classes", a.num_classes}, {"base_channels", a.base_channels},
          {"levels", a.levels},           {"norm_groups", a.norm_groups}, {"linear_mode", a.linear_mode}};
}

inline SegArch arch_from_json(const binio::Json& j) {
  SegArch a;
  a.in_channels = j.at("in_channels").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.base_channels = j.at("base_channels").get<int>();
  a.levels = j.at("levels").get<int>();
  a.norm_groups = j.at("norm_groups").get<int>();
  a.linear_mode = j.at("linear_mode").get<bool>();
  return a;
}

inline binio::Json opt_json(const std::optional<double>& v) { return v ? binio::Json(*v) : binio::Json(nullptr); }

}  // namespace detail

inline std::vector<char> encode_checkpoint(const TrainState& s, const TrainConfig& cfg) {
  binio::Json h;
  h["version"] = kCheckpointVersion;
  h["arch"] = detail::arch_json(s.a.arch);
  h["projection"] = {{"input_dim", s.proj.arch.input_dim},
                     {"hidden", s.proj.arch.hidden},
                     {"output_dim", s.proj.arch.output_dim},
                     {"version", kProjectionVersion}};
  binio::Json c = binio::Json::object();
  for (const auto& [k, v] : config_entries(cfg)) c[k] = v;
  h["config"] = c;
  h["iteration"] = s.iteration;
  h["rng"] = s.rng.state();
  binio::Json hist = binio::Json::array();
  for (const auto& row : s.history)
    hist.push_back({row.iter, row.lr, row.loss_sup, row.loss_unsup, row.loss_total, detail::opt_json(row.val_dice)});
  h["history"] = hist;

  std::vector<char> payload;
  binio::Json blobs = binio::Json::array();
  auto add_set = [&](const std::string& prefix, const nn::ParamSet<float>& ps) {
    for (const auto& b : ps) {
      blobs.push_back({{"name", prefix + b.name}, {"offset", payload.size()}, {"count", b.values.size()}});
      binio::append_le<float>(payload, b.values);
    }
  };
  add_set("a/", s.a.weights);
  add_set("b/", s.b.weights);
  add_set("proj/", s.proj.weights);
  add_set("vel_a/", s.vel_a);
  add_set("vel_b/", s.vel_b);
  add_set("vel_proj/", s.vel_proj);
  {
    const std::size_t off = payload.size();
    binio::append_le<double>(payload, s.pooled_text);
    blobs.push_back({{"name", "text/pooled"}, {"offset", off}, {"count", s.pooled_text.size()}, {"dtype", "f64"}});
  }
  h["blobs"] = blobs;
  return binio::encode("CKPT", h, payload);
}

inline void write_checkpoint(const TrainState& s, const TrainConfig& cfg, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_checkpoint(s, cfg));
}

struct LoadedCheckpoint {
  TrainState state;
  TrainConfig config;
};

inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  const auto c = binio::read_container(path, "CKPT");
  const auto& h = c.header;
  const std::string what = path.string();
  try {
    COTRAIN_REQUIRE(h.at("version").get<int>() == kCheckpointVersion, what, ": unsupported checkpoint version");
    LoadedCheckpoint out;
    for (const auto& [k, v] : h.at("config").items()) set_config_value(out.config, k, v.get<std::string>());
    TrainState& s = out.state;
    const SegArch arch = detail::arch_from_json(h.at("arch"));
    s.a = make_seg_params<float>(arch);
    s.b = make_seg_params<float>(arch);
    const auto& pj = h.at("projection");
    COTRAIN_REQUIRE(pj.at("version").get<int>() == kProjectionVersion, what, ": projection version mismatch");
    s.proj = make_projection<float>({pj.at("input_dim").get<int>(), pj.at("hidden").get<int>(),
                                     pj.at("output_dim").get<int>()});
    s.vel_a = s.a.weights.zeros_like();
    s.vel_b = s.b.weights.zeros_like();
    s.vel_proj = s.proj.weights.zeros_like();
    s.iteration = h.at("iteration").get<int>();
    s.rng.set_state(h.at("rng").get<std::string>());
    for (const auto& row : h.at("history")) {
      LogRow r{row.at(0).get<int>(),    row.at(1).get<double>(), row.at(2).get<double>(),
               row.at(3).get<double>(), row.at(4).get<double>(), std::nullopt};
      if (!row.at(5).is_null()) r.val_dice = row.at(5).get<double>();
      s.history.push_back(r);
    }

    std::map<std::string, std::pair<std::size_t, std::size_t>> table;
    for (const auto& b : h.at("blobs"))
      table[b.at("name").get<std::string>()] = {b.at("offset").get<std::size_t>(), b.at("count").get<std::size_t>()};
    auto fill_set = [&](const std::string& prefix, nn::ParamSet<float>& ps) {
      for (auto& b : ps) {
        const auto it = table.find(prefix + b.name);
        COTRAIN_REQUIRE(it != table.end(), what, ": missing blob ", prefix, b.name);
        const auto [off, count] = it->second;
        COTRAIN_REQUIRE(count == b.values.size(), what, ": blob ", prefix, b.name, " has ", count,
                        " values, expected ", b.values.size());
        COTRAIN_REQUIRE(off + count * 4 <= c.payload.size(), what, ": blob ", prefix, b.name, " is truncated");
        const auto vals = binio::decode_le<float>(std::string_view(c.payload).substr(off, count * 4));
        std::copy(vals.begin(), vals.end(), b.values.begin());
      }
    };
    fill_set("a/", s.a.weights);
    fill_set("b/", s.b.weights);
    fill_set("proj/", s.proj.weights);
    fill_set("vel_a/", s.vel_a);
    fill_set("vel_b/", s.vel_b);
    fill_set("vel_proj/", s.vel_proj);
    const auto it = table.find("text/pooled");
    COTRAIN_REQUIRE(it != table.end(), what, ": missing blob text/pooled");
    COTRAIN_REQUIRE(it->second.first + it->second.second * 8 <= c.payload.size(), what, ": text blob truncated");
    s.pooled_text =
        binio::decode_le<double>(std::string_view(c.payload).substr(it->second.first, it->second.second * 8));
    COTRAIN_REQUIRE(s.all_finite(), what, ": checkpoint holds non-finite parameters");
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::concat(what, ": malformed checkpoint header: ", e.what()));
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline std::string format_log_value(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", *v);
  return buf;
}

/// Columns iter,lr,loss_sup,loss_unsup,loss_total,val_dice. Row 0 carries only
/// the initial validation Dice; val_dice is empty when not evaluated.
inline std::string training_log_csv(const std::vector<LogRow>& rows) {
  std::string out = "iter,lr,loss_sup,loss_unsup,loss_total,val_dice\n";
  for (const auto& r : rows) {
    if (r.iter == 0) {
      out += "0,,,,," + format_log_value(r.val_dice) + "\n";
      continue;
    }
    out += std::to_string(r.iter) + "," + format_log_value(r.lr) + "," + format_log_value(r.loss_sup) + "," +
           format_log_value(r.loss_unsup) + "," + format_log_value(r.loss_total) + "," +
           format_log_value(r.val_dice) + "\n";
  }
  return out;
}

struct TrainOptions {
  std::filesystem::path out_dir;                  // empty: no files written
  std::optional<std::filesystem::path> resume;    // checkpoint to continue from
  std::function<void(const LogRow&)> on_log;      // called after every logged row
  std::function<void(const TrainState&)> on_step; // called after every step
};

struct TrainResult {
  TrainState state;
  std::vector<std::filesystem::path> checkpoints;
};

/// Runs until cfg.max_iters. Validation (model per eval.model) runs before the
/// first step and every val_every iterations; checkpoints every checkpoint_every
/// iterations and at the last one.
inline TrainResult train(const TrainConfig& cfg, const DatasetSplit& split, const std::vector<Sample>& validation,
                         std::vector<double> pooled_text, const TrainOptions& opt = {}) {
  cfg.validate();
  COTRAIN_REQUIRE(!split.labeled.empty(), "training split has no labeled samples");
  COTRAIN_REQUIRE(!split.unlabeled.empty(), "training split has no unlabeled samples");
  const int num_classes = split.labeled.front().label->num_classes();
  TrainResult res;
  TrainState& s = res.state;
  if (opt.resume) {
    auto loaded = read_checkpoint(*opt.resume);
    s = std::move(loaded.state);
    COTRAIN_REQUIRE(s.pooled_text == pooled_text, "resume: text embedding differs from the checkpoint's");
    COTRAIN_REQUIRE(s.iteration <= cfg.max_iters, "resume: checkpoint iteration ", s.iteration, " exceeds max_iters");
  } else {
    s = init_train_state(cfg, std::move(pooled_text), num_classes);
  }

  const bool do_val = !validation.empty() && cfg.val_every > 0;
  if (s.iteration == 0 && s.history.empty()) {
    LogRow row;
    if (do_val) row.val_dice = validation_dice(s, validation, cfg);
    s.history.push_back(row);
    if (opt.on_log) opt.on_log(row);
  }

  const int half = cfg.batch_size / 2;
  PoolSchedule lab_sched, unl_sched;
  if (cfg.patches_per_volume > 0) {
    lab_sched = PoolSchedule(split.labeled.size(), cfg.patches_per_volume, Rng::mix(cfg.seed ^ 0x4c4142ULL));
    unl_sched = PoolSchedule(split.unlabeled.size(), cfg.patches_per_volume, Rng::mix(cfg.seed ^ 0x554e4cULL));
  }
  auto write_outputs = [&](int iter) {
    if (opt.out_dir.empty()) return;
    const auto p = checkpoint_path(opt.out_dir, iter);
    write_checkpoint(s, cfg, p);
    res.checkpoints.push_back(p);
    binio::write_text_atomic(opt.out_dir / "train_log.csv", training_log_csv(s.history));
  };

  while (s.iteration < cfg.max_iters) {
    BatchOptions bo;
    bo.foreground_force = cfg.foreground_force;
    if (cfg.patches_per_volume > 0) {
      bo.labeled_schedule = &lab_sched;
      bo.unlabeled_schedule = &unl_sched;
      bo.draw_offset = std::uint64_t(s.iteration) * std::uint64_t(half);
    }
    const Batch batch = make_batch(split, cfg.batch_size, cfg.patch(), s.rng, bo);
    const StepResult r = train_step(s, batch, cfg);
    COTRAIN_REQUIRE(s.all_finite(), "non-finite parameters after iteration ", s.iteration);
    LogRow row{s.iteration, r.lr, r.loss_sup, r.loss_unsup, r.loss_total, std::nullopt};
    if (do_val && (s.iteration % cfg.val_every == 0 || s.iteration == cfg.max_iters))
      row.val_dice = validation_dice(s, validation, cfg);
    s.history.push_back(row);
    if (opt.on_log) opt.on_log(row);
    if (opt.on_step) opt.on_step(s);
    const bool periodic = cfg.checkpoint_every > 0 && s.iteration % cfg.checkpoint_every == 0;
    if (periodic || s.iteration == cfg.max_iters) write_outputs(s.iteration);
  }
  return res;
}

/// Last logged validation Dice, if any.
inline std::optional<double> final_validation_dice(const TrainState& s) {
  for (auto it = s.history.rbegin(); it != s.history.rend(); ++it)
    if (it->val_dice) return it->val_dice;
  return std::nullopt;
}

}  // namespace cotrain
