#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cotrain/core.hpp"

namespace cotrain {

/// Loss value plus its gradient with respect to the logits it was computed from.
template <typename T> struct LossGrad {
  double value = 0.0;
  LogitVolume<T> grad;
};

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kLogClamp = 1e-7;

template <typename T> ProbVolume<T> softmax_probs(const LogitVolume<T>& logits) {
  const int k = logits.channels();
  const std::size_t n = logits.voxels();
  ProbVolume<T> p(k, logits.shape());
  std::vector<double> e(k);
  for (std::size_t v = 0; v < n; ++v) {
    double mx = -INFINITY;
    for (int c = 0; c < k; ++c) mx = std::max(mx, double(logits(c, v)));
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += (e[c] = std::exp(double(logits(c, v)) - mx));
    for (int c = 0; c < k; ++c) p(c, v) = static_cast<T>(e[c] / sum);
  }
  return p;
}

namespace detail {

template <typename T, typename Tag>
void require_same(const Field<T, Tag>& a, const LabelVolume& y, const char* what) {
  COTRAIN_REQUIRE(a.shape() == y.shape(), what, ": shape ", to_string(a.shape()), " vs label ",
                  to_string(y.shape()));
  COTRAIN_REQUIRE(a.channels() == y.num_classes(), what, ": ", a.channels(), " channels vs ", y.num_classes(),
                  " classes");
}

/// Chain rule through softmax: dL/dz_c = p_c (g_c - sum_j p_j g_j), per voxel.
template <typename T>
LogitVolume<T> softmax_backward(const ProbVolume<T>& p, const std::vector<double>& dprob) {
  const int k = p.channels();
  const std::size_t n = p.voxels();
  LogitVolume<T> g(k, p.shape());
  for (std::size_t v = 0; v < n; ++v) {
    double dot = 0.0;
    for (int c = 0; c < k; ++c) dot += double(p(c, v)) * dprob[c * n + v];
    for (int c = 0; c < k; ++c) g(c, v) = static_cast<T>(double(p(c, v)) * (dprob[c * n + v] - dot));
  }
  return g;
}

}  // namespace detail

/// Soft Dice loss averaged over foreground classes 1..K-1:
/// 1 - (2 sum p y + eps) / (sum p + sum y + eps).
template <typename T> double dice_loss(const ProbVolume<T>& probs, const LabelVolume& y) {
  detail::require_same(probs, y, "dice_loss");
  const int k = probs.channels();
  const std::size_t n = probs.voxels();
  double total = 0.0;
  for (int c = 1; c < k; ++c) {
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double pv = double(probs(c, v));
      const double yv = y.classes()[v] == c ? 1.0 : 0.0;
      inter += pv * yv;
      psum += pv;
      ysum += yv;
    }
    total += 1.0 - (2.0 * inter + kDiceEps) / (psum + ysum + kDiceEps);
  }
  return total / double(k - 1);
}

/// Dice loss evaluated on softmax(logits), with its logit gradient.
template <typename T> LossGrad<T> dice_loss_grad(const LogitVolume<T>& logits, const LabelVolume& y) {
  detail::require_same(logits, y, "dice_loss");
  const auto probs = softmax_probs(logits);
  const int k = probs.channels();
  const std::size_t n = probs.voxels();
  std::vector<double> dprob(std::size_t(k) * n, 0.0);
  double total = 0.0;
  for (int c = 1; c < k; ++c) {
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double pv = double(probs(c, v));
      const double yv = y.classes()[v] == c ? 1.0 : 0.0;
      inter += pv * yv;
      psum += pv;
      ysum += yv;
    }
    const double num = 2.0 * inter + kDiceEps, den = psum + ysum + kDiceEps;
    total += 1.0 - num / den;
    for (std::size_t v = 0; v < n; ++v) {
      const double yv = y.classes()[v] == c ? 1.0 : 0.0;
      dprob[c * n + v] = -(2.0 * yv * den - num) / (den * den) / double(k - 1);
    }
  }
  return {total / double(k - 1), detail::softmax_backward(probs, dprob)};
}

/// Mean over voxels of -log softmax(logits)[y], with its logit gradient.
template <typename T> LossGrad<T> ce_loss_grad(const LogitVolume<T>& logits, const LabelVolume& y) {
  detail::require_same(logits, y, "ce_loss");
  const int k = logits.channels();
  const std::size_t n = logits.voxels();
  LogitVolume<T> grad(k, logits.shape());
  double total = 0.0;
  std::vector<double> e(k);
  for (std::size_t v = 0; v < n; ++v) {
    double mx = -INFINITY;
    for (int c = 0; c < k; ++c) mx = std::max(mx, double(logits(c, v)));
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += (e[c] = std::exp(double(logits(c, v)) - mx));
    const int target = y.classes()[v];
    total += -(double(logits(target, v)) - mx - std::log(sum));
    for (int c = 0; c < k; ++c) grad(c, v) = static_cast<T>((e[c] / sum - (c == target ? 1.0 : 0.0)) / double(n));
  }
  return {total / double(n), std::move(grad)};
}

template <typename T> double ce_loss(const LogitVolume<T>& logits, const LabelVolume& y) {
  return ce_loss_grad(logits, y).value;
}

enum class SupMode { CeDice, Ce, Dice };

inline SupMode parse_sup_mode(std::string_view s) {
  if (s == "ce+dice" || s == "dice+ce") return SupMode::CeDice;
  if (s == "ce") return SupMode::Ce;
  if (s == "dice") return SupMode::Dice;
  throw Error(detail::concat("unknown supervised loss mode \"", s, "\" (expected ce, dice or ce+dice)"));
}

inline std::string to_string(SupMode m) {
  switch (m) {
    case SupMode::CeDice: return "ce+dice";
    case SupMode::Ce: return "ce";
    case SupMode::Dice: return "dice";
  }
  return "?";
}

/// Single-model supervised term for one labeled sample.
template <typename T> LossGrad<T> supervised_term(const LogitVolume<T>& logits, const LabelVolume& y, SupMode mode) {
  if (mode == SupMode::Ce) return ce_loss_grad(logits, y);
  if (mode == SupMode::Dice) return dice_loss_grad(logits, y);
  auto ce = ce_loss_grad(logits, y);
  auto dc = dice_loss_grad(logits, y);
  auto g = ce.grad.values();
  auto d = dc.grad.values();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  return {ce.value + dc.value, std::move(ce.grad)};
}

template <typename T> struct PairLoss {
  double value = 0.0;
  LogitVolume<T> grad_a;
  LogitVolume<T> grad_b;
};

/// dice(A, y) + dice(B, y) + ce(A, y) + ce(B, y) for one labeled sample; the
/// trainer sums this over the labeled sub-batch.
template <typename T>
PairLoss<T> supervised_loss(const LogitVolume<T>& logits_a, const LogitVolume<T>& logits_b, const LabelVolume& y,
                            SupMode mode = SupMode::CeDice) {
  auto a = supervised_term(logits_a, y, mode);
  auto b = supervised_term(logits_b, y, mode);
  return {a.value + b.value, std::move(a.grad), std::move(b.grad)};
}

// ---------------------------------------------------------------------------
// Pseudo-labels
// ---------------------------------------------------------------------------

enum class PseudoMode { Soft, Hard };

template <typename T> struct PseudoLabel {
  std::variant<ProbVolume<T>, LabelVolume> payload;
  PseudoMode mode() const noexcept { return payload.index() == 0 ? PseudoMode::Soft : PseudoMode::Hard; }
  const ProbVolume<T>& soft() const { return std::get<0>(payload); }
  const LabelVolume& hard() const { return std::get<1>(payload); }
};

/// Per-voxel argmax; ties go to the lowest class index.
template <typename T, typename Tag> LabelVolume argmax_labels(const Field<T, Tag>& f) {
  const int k = f.channels();
  COTRAIN_REQUIRE(k <= 256, "too many classes for a label volume");
  std::vector<std::uint8_t> out(f.voxels());
  for (std::size_t v = 0; v < f.voxels(); ++v) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (f(c, v) > f(best, v)) best = c;
    out[v] = static_cast<std::uint8_t>(best);
  }
  return {f.shape(), k, std::move(out)};
}

template <typename T> PseudoLabel<T> make_pseudo_label(const LogitVolume<T>& logits, PseudoMode mode) {
  if (mode == PseudoMode::Soft) return {softmax_probs(logits)};
  return {argmax_labels(logits)};
}

// ---------------------------------------------------------------------------
// Unified segmentation loss and its single-branch variants
// ---------------------------------------------------------------------------

/// Gate thresholds: confident foreground above t1, confident background below t2.
struct USLConfig {
  double t1 = 0.9;
  double t2 = 0.1;
  /// Enables the provisional K > 2 gating (confidence = max-class probability).
  bool multiclass = false;

  void validate() const {
    COTRAIN_REQUIRE(t1 > 0.0 && t1 < 1.0 && t2 > 0.0 && t2 < 1.0, "usl thresholds must lie in (0, 1)");
    COTRAIN_REQUIRE(t2 < t1, "usl requires t2 < t1");
  }
};

enum class UnsupMode { Usl, NllOnly, MseOnly };

inline UnsupMode parse_unsup_mode(std::string_view s) {
  if (s == "usl") return UnsupMode::Usl;
  if (s == "nll" || s == "nll_only") return UnsupMode::NllOnly;
  if (s == "mse" || s == "mse_only") return UnsupMode::MseOnly;
  throw Error(detail::concat("unknown unsupervised loss mode \"", s, "\" (expected usl, nll_only or mse_only)"));
}

inline std::string to_string(UnsupMode m) {
  switch (m) {
    case UnsupMode::Usl: return "usl";
    case UnsupMode::NllOnly: return "nll_only";
    case UnsupMode::MseOnly: return "mse_only";
  }
  return "?";
}

enum class Gate { ConfidentForeground, ConfidentBackground, Uncertain };

/// Which branch a voxel takes for partner foreground probability p. Values
/// exactly at a threshold go to the uncertain (MSE) branch.
inline Gate usl_gate(double p, const USLConfig& cfg) noexcept {
  if (p > cfg.t1) return Gate::ConfidentForeground;
  if (p < cfg.t2) return Gate::ConfidentBackground;
  return Gate::Uncertain;
}

namespace detail {

inline double clamped_nll(double q, double& dq, double weight) {
  if (q > kLogClamp) {
    dq = -weight / q;
    return -weight * std::log(q);
  }
  dq = 0.0;
  return -weight * std::log(kLogClamp);
}

/// Binary branch evaluation. p0/p1 = partner probs, q0/q1 = student probs.
/// Writes dL/dq0, dL/dq1.
inline double binary_voxel(Gate gate, double p0, double p1, double q0, double q1, double& dq0, double& dq1) {
  dq0 = dq1 = 0.0;
  switch (gate) {
    case Gate::ConfidentForeground: return clamped_nll(q1, dq1, p1);
    case Gate::ConfidentBackground: return clamped_nll(q0, dq0, 1.0 - p1);
    case Gate::Uncertain: {
      const double e0 = q0 - p0, e1 = q1 - p1;
      dq0 = e0;  // d/dq of (e0^2 + e1^2) / 2
      dq1 = e1;
      return 0.5 * (e0 * e0 + e1 * e1);
    }
  }
  return 0.0;
}

}  // namespace detail

/// Unsupervised loss of a student (logits) against detached partner
/// probabilities, in any of the three modes; mean over voxels.
///   usl:      gate 1 (p > t1)  p * -log q
///             gate 2 (p < t2)  (1 - p) * -log(1 - q)
///             gate 3 otherwise mean over classes of (softmax(student) - partner)^2
///   nll_only: gates 1-2 at every voxel, chosen by the hard (argmax) pseudo-label
///   mse_only: gate 3 at every voxel
template <typename T>
LossGrad<T> unsup_voxel_loss(const LogitVolume<T>& student, const ProbVolume<T>& partner, const USLConfig& cfg,
                             UnsupMode mode) {
  COTRAIN_REQUIRE(student.shape() == partner.shape() && student.channels() == partner.channels(),
                  "unsupervised loss shape mismatch");
  const int k = student.channels();
  const std::size_t n = student.voxels();
  const auto q = softmax_probs(student);
  std::vector<double> dprob(std::size_t(k) * n, 0.0);
  double total = 0.0;

  if (mode == UnsupMode::MseOnly) {
    for (std::size_t v = 0; v < n; ++v)
      for (int c = 0; c < k; ++c) {
        const double e = double(q(c, v)) - double(partner(c, v));
        total += e * e / k;
        dprob[c * n + v] = 2.0 * e / k / double(n);
      }
    return {total / double(n), detail::softmax_backward(q, dprob)};
  }

  if (k == 2) {
    for (std::size_t v = 0; v < n; ++v) {
      const double p = double(partner(1, v));
      Gate gate;
      if (mode == UnsupMode::Usl) gate = usl_gate(p, cfg);
      else gate = partner(1, v) > partner(0, v) ? Gate::ConfidentForeground : Gate::ConfidentBackground;
      double d0, d1;
      total += detail::binary_voxel(gate, double(partner(0, v)), p, double(q(0, v)), double(q(1, v)), d0, d1);
      dprob[v] = d0 / double(n);
      dprob[n + v] = d1 / double(n);
    }
    return {total / double(n), detail::softmax_backward(q, dprob)};
  }

  // Provisional K > 2 rule: confident when the partner's max-class probability
  // exceeds t1 (NLL toward that class, weighted by it); MSE otherwise.
  COTRAIN_REQUIRE(cfg.multiclass, "gated unsupervised loss is defined for K = 2; enable the multiclass flag for K = ",
                  k);
  for (std::size_t v = 0; v < n; ++v) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (partner(c, v) > partner(best, v)) best = c;
    const double pmax = double(partner(best, v));
    if (mode == UnsupMode::NllOnly || pmax > cfg.t1) {
      double dq;
      total += detail::clamped_nll(double(q(best, v)), dq, pmax);
      dprob[best * n + v] = dq / double(n);
    } else {
      for (int c = 0; c < k; ++c) {
        const double e = double(q(c, v)) - double(partner(c, v));
        total += e * e / k;
        dprob[c * n + v] = 2.0 * e / k / double(n);
      }
    }
  }
  return {total / double(n), detail::softmax_backward(q, dprob)};
}

template <typename T>
LossGrad<T> usl(const LogitVolume<T>& logits_a, const ProbVolume<T>& probs_b, const USLConfig& cfg) {
  return unsup_voxel_loss(logits_a, probs_b, cfg, UnsupMode::Usl);
}

/// Per-mode loss function, for the unsupervised-loss ablation.
template <typename T> auto loss_mode_select(UnsupMode mode) {
  return [mode](const LogitVolume<T>& student, const ProbVolume<T>& partner, const USLConfig& cfg) {
    return unsup_voxel_loss(student, partner, cfg, mode);
  };
}

template <typename T> auto loss_mode_select(std::string_view mode) { return loss_mode_select<T>(parse_unsup_mode(mode)); }

/// usl(A, stopgrad(softmax B)) + usl(B, stopgrad(softmax A)); pseudo-labels carry no gradient.
template <typename T>
PairLoss<T> unsupervised_loss(const LogitVolume<T>& logits_a, const LogitVolume<T>& logits_b, const USLConfig& cfg,
                              UnsupMode mode = UnsupMode::Usl) {
  COTRAIN_REQUIRE(logits_a.shape() == logits_b.shape() && logits_a.channels() == logits_b.channels(),
                  "unsupervised loss shape mismatch");
  const auto pa = softmax_probs(logits_a);
  const auto pb = softmax_probs(logits_b);
  auto a = unsup_voxel_loss(logits_a, pb, cfg, mode);
  auto b = unsup_voxel_loss(logits_b, pa, cfg, mode);
  return {a.value + b.value, std::move(a.grad), std::move(b.grad)};
}

}  // namespace cotrain
