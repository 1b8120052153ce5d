#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/nn.hpp"
#include "cotrain/rng.hpp"

namespace cotrain {

/// Encoder-decoder topology. Level l has base_channels * 2^l channels; the
/// bottleneck sits at level levels-1 with spatial size input / 2^(levels-1).
struct SegArch {
  int in_channels = 1;
  int num_classes = 2;
  int base_channels = 8;
  int levels = 3;
  int norm_groups = 4;
  /// Replaces ReLU by identity and group norm by its affine part.
  bool linear_mode = false;

  int channels_at(int level) const noexcept { return base_channels << level; }
  int bottleneck_channels() const noexcept { return channels_at(levels - 1); }
  int divisor() const noexcept { return 1 << (levels - 1); }
  int groups_for(int channels) const noexcept { return channels % norm_groups == 0 ? norm_groups : 1; }

  void validate() const {
    COTRAIN_REQUIRE(in_channels > 0 && num_classes >= 2 && base_channels > 0 && levels >= 1 && norm_groups > 0,
                    "invalid segmentation architecture");
  }
  friend bool operator==(const SegArch&, const SegArch&) = default;
};

/// Text/image balance weight for bottleneck fusion.
struct FusionConfig {
  double beta_text = 1.0;
  void validate() const { COTRAIN_REQUIRE(beta_text >= 0.0, "beta_text must be non-negative"); }
};

enum class BlockKind { Conv3, Down, Up, Head };

struct BlockSpec {
  BlockKind kind;
  int cin;
  int cout;
  std::size_t weight;
  std::size_t gamma;  // also the head bias for BlockKind::Head
  std::size_t beta;
};

template <typename T> struct SegModelParams {
  SegArch arch;
  nn::ParamSet<T> weights;
  std::vector<BlockSpec> encoder;  // 2 blocks per level
  std::vector<BlockSpec> decoder;  // (up, conv) per level from levels-2 down to 0
  BlockSpec head{};

  std::size_t param_count() const noexcept { return weights.total_size(); }
};

/// Allocates the parameter layout with zero weights and unit norm gains.
template <typename T> SegModelParams<T> make_seg_params(const SegArch& arch) {
  arch.validate();
  SegModelParams<T> p;
  p.arch = arch;
  auto add_block = [&](const std::string& name, BlockKind kind, int cin, int cout) {
    const int taps = kind == BlockKind::Conv3 ? 27 : kind == BlockKind::Head ? 1 : 8;
    BlockSpec b{kind, cin, cout, 0, 0, 0};
    if (kind == BlockKind::Up) b.weight = p.weights.add(name + ".w", {cin, cout, taps});
    else b.weight = p.weights.add(name + ".w", {cout, cin, taps});
    if (kind == BlockKind::Head) {
      b.gamma = p.weights.add(name + ".b", {cout});
    } else {
      b.gamma = p.weights.add(name + ".gn.gamma", {cout}, T(1));
      b.beta = p.weights.add(name + ".gn.beta", {cout});
    }
    return b;
  };
  for (int l = 0; l < arch.levels; ++l) {
    const std::string lv = "enc" + std::to_string(l);
    if (l == 0) p.encoder.push_back(add_block(lv + ".conv0", BlockKind::Conv3, arch.in_channels, arch.channels_at(0)));
    else p.encoder.push_back(add_block(lv + ".down", BlockKind::Down, arch.channels_at(l - 1), arch.channels_at(l)));
    p.encoder.push_back(add_block(lv + ".conv1", BlockKind::Conv3, arch.channels_at(l), arch.channels_at(l)));
  }
  for (int l = arch.levels - 2; l >= 0; --l) {
    const std::string lv = "dec" + std::to_string(l);
    p.decoder.push_back(add_block(lv + ".up", BlockKind::Up, arch.channels_at(l + 1), arch.channels_at(l)));
    p.decoder.push_back(add_block(lv + ".conv", BlockKind::Conv3, 2 * arch.channels_at(l), arch.channels_at(l)));
  }
  p.head = add_block("head", BlockKind::Head, arch.channels_at(0), arch.num_classes);
  return p;
}

/// He-normal convolutions; transposed convolutions start as channel-pair
/// averaging nearest-neighbour upsampling (the trilinear kernel for k=2, s=2)
/// plus a small random perturbation.
template <typename T> SegModelParams<T> init_seg_params(const SegArch& arch, Rng& rng) {
  auto p = make_seg_params<T>(arch);
  auto init = [&](const BlockSpec& b) {
    auto w = p.weights.values(b.weight);
    switch (b.kind) {
      case BlockKind::Conv3: nn::fill_normal(w, std::sqrt(2.0 / (b.cin * 27.0)), rng); break;
      case BlockKind::Down: nn::fill_normal(w, std::sqrt(2.0 / (b.cin * 8.0)), rng); break;
      case BlockKind::Head: nn::fill_normal(w, std::sqrt(1.0 / b.cin), rng); break;
      case BlockKind::Up: {
        nn::fill_normal(w, 0.1 * std::sqrt(2.0 / b.cin), rng);
        const int ratio = std::max(1, b.cin / b.cout);
        for (int c = 0; c < b.cin; ++c)
          for (int o = 0; o < b.cout; ++o)
            if (c / ratio == o)
              for (int k = 0; k < 8; ++k) w[(std::size_t(c) * b.cout + o) * 8 + k] += T(1.0 / ratio);
        break;
      }
    }
  };
  for (const auto& b : p.encoder) init(b);
  for (const auto& b : p.decoder) init(b);
  init(p.head);
  return p;
}

template <typename T> struct BlockTape {
  Tensor<T> input;
  Tensor<T> conv_out;
  nn::GroupStats<T> stats;
  Tensor<T> pre_act;
};

template <typename T> struct Encoded {
  Tensor<T> bottleneck;
  std::vector<Tensor<T>> skips;  // level outputs 0 .. levels-2
  std::vector<BlockTape<T>> tape;
};

/// Everything backward() needs from one forward pass.
template <typename T> struct ForwardTape {
  std::vector<BlockTape<T>> encoder;
  std::vector<BlockTape<T>> decoder;
  BlockTape<T> head;
  std::vector<int> skip_channels;
  double beta_text = 0.0;
  bool text_injected = false;
};

namespace detail {

template <typename T>
Tensor<T> block_forward(const SegModelParams<T>& p, const BlockSpec& b, const Tensor<T>& in, BlockTape<T>* tape) {
  const auto w = p.weights.values(b.weight);
  Tensor<T> conv;
  switch (b.kind) {
    case BlockKind::Conv3: conv = nn::conv3_forward<T>(in, w, b.cout); break;
    case BlockKind::Down: conv = nn::down2_forward<T>(in, w, b.cout); break;
    case BlockKind::Up: conv = nn::up2_forward<T>(in, w, b.cout); break;
    case BlockKind::Head: {
      auto out = nn::conv1_forward<T>(in, w, p.weights.values(b.gamma), b.cout);
      if (tape) tape->input = in;
      return out;
    }
  }
  nn::GroupStats<T> stats;
  auto pre = nn::group_norm_forward<T>(conv, p.weights.values(b.gamma), p.weights.values(b.beta),
                                       p.arch.groups_for(b.cout), p.arch.linear_mode, &stats);
  Tensor<T> out = pre;
  if (!p.arch.linear_mode) nn::relu_inplace(out);
  if (tape) *tape = {in, std::move(conv), std::move(stats), std::move(pre)};
  return out;
}

template <typename T>
Tensor<T> block_backward(const SegModelParams<T>& p, const BlockSpec& b, const BlockTape<T>& t, Tensor<T> dout,
                         nn::ParamSet<T>& grads, bool need_input_grad) {
  const auto w = p.weights.values(b.weight);
  Tensor<T> din;
  Tensor<T>* din_ptr = need_input_grad ? &din : nullptr;
  if (b.kind == BlockKind::Head) {
    nn::conv1_backward<T>(t.input, w, dout, grads.values(b.weight), grads.values(b.gamma), din_ptr);
    return din;
  }
  if (!p.arch.linear_mode) nn::relu_backward_inplace(t.pre_act, dout);
  auto dconv = nn::group_norm_backward<T>(t.conv_out, p.weights.values(b.gamma), t.stats, dout,
                                          p.arch.groups_for(b.cout), p.arch.linear_mode, grads.values(b.gamma),
                                          grads.values(b.beta));
  switch (b.kind) {
    case BlockKind::Conv3: nn::conv3_backward<T>(t.input, w, dconv, grads.values(b.weight), din_ptr); break;
    case BlockKind::Down: nn::down2_backward<T>(t.input, w, dconv, grads.values(b.weight), din_ptr); break;
    case BlockKind::Up: nn::up2_backward<T>(t.input, w, dconv, grads.values(b.weight), din_ptr); break;
    case BlockKind::Head: break;
  }
  return din;
}

}  // namespace detail

/// Runs the encoder; fails when spatial dims are not divisible by 2^(levels-1).
template <typename T> Encoded<T> encode(const SegModelParams<T>& p, const Tensor<T>& x, bool keep_tape = false) {
  const int div = p.arch.divisor();
  const Shape3 s = x.shape();
  COTRAIN_REQUIRE(s.d % div == 0 && s.h % div == 0 && s.w % div == 0, "input shape ", to_string(s),
                  " is not divisible by ", div);
  COTRAIN_REQUIRE(x.channels() == p.arch.in_channels, "input has ", x.channels(), " channels, model expects ",
                  p.arch.in_channels);
  Encoded<T> e;
  if (keep_tape) e.tape.resize(p.encoder.size());
  Tensor<T> h = x;
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    h = detail::block_forward(p, p.encoder[i], h, keep_tape ? &e.tape[i] : nullptr);
    const bool level_end = i % 2 == 1;
    if (level_end && i + 1 < p.encoder.size()) e.skips.push_back(h);
  }
  e.bottleneck = std::move(h);
  return e;
}

/// fused[c, v] = bottleneck[c, v] + beta_text * z[c] for every spatial position v.
template <typename T> Tensor<T> inject_text(const Tensor<T>& bottleneck, std::span<const T> z, double beta_text) {
  COTRAIN_REQUIRE(beta_text >= 0.0, "beta_text must be non-negative");
  COTRAIN_REQUIRE(int(z.size()) == bottleneck.channels(), "text feature length ", z.size(),
                  " does not match bottleneck channels ", bottleneck.channels());
  Tensor<T> fused = bottleneck;
  if (beta_text == 0.0) return fused;
  const T beta = static_cast<T>(beta_text);
  for (int c = 0; c < fused.channels(); ++c) {
    const T add = beta * z[c];
    for (auto& v : fused.channel(c)) v += add;
  }
  return fused;
}

template <typename T>
LogitVolume<T> decode(const SegModelParams<T>& p, const Tensor<T>& fused, const std::vector<Tensor<T>>& skips,
                      ForwardTape<T>* tape = nullptr) {
  COTRAIN_REQUIRE(int(skips.size()) == p.arch.levels - 1, "decoder expects ", p.arch.levels - 1, " skips, got ",
                  skips.size());
  COTRAIN_REQUIRE(fused.channels() == p.arch.bottleneck_channels(), "bottleneck has ", fused.channels(),
                  " channels, expected ", p.arch.bottleneck_channels());
  if (tape) tape->decoder.resize(p.decoder.size());
  Tensor<T> h = fused;
  for (std::size_t i = 0; i < p.decoder.size(); i += 2) {
    const int level = p.arch.levels - 2 - int(i / 2);
    const Tensor<T>& skip = skips[level];
    COTRAIN_REQUIRE(skip.channels() == p.arch.channels_at(level), "skip ", level, " channel mismatch");
    auto up = detail::block_forward(p, p.decoder[i], h, tape ? &tape->decoder[i] : nullptr);
    COTRAIN_REQUIRE(up.shape() == skip.shape(), "skip ", level, " shape ", to_string(skip.shape()),
                    " does not match upsampled ", to_string(up.shape()));
    h = detail::block_forward(p, p.decoder[i + 1], nn::concat_channels(up, skip), tape ? &tape->decoder[i + 1] : nullptr);
  }
  auto logits = detail::block_forward(p, p.head, h, tape ? &tape->head : nullptr);
  return std::move(logits).template retag<LogitTag>();
}

/// decode(inject_text(encode(x), z, beta)). An empty z means a text-free forward.
template <typename T>
LogitVolume<T> forward(const SegModelParams<T>& p, const Tensor<T>& x, std::span<const T> z, double beta_text,
                       ForwardTape<T>* tape = nullptr) {
  auto enc = encode(p, x, tape != nullptr);
  Tensor<T> fused = z.empty() ? std::move(enc.bottleneck) : inject_text<T>(enc.bottleneck, z, beta_text);
  if (tape) {
    tape->encoder = std::move(enc.tape);
    tape->beta_text = beta_text;
    tape->text_injected = !z.empty();
  }
  return decode(p, fused, enc.skips, tape);
}

template <typename T>
LogitVolume<T> forward(const SegModelParams<T>& p, const Volume& x, std::span<const T> z, double beta_text,
                       ForwardTape<T>* tape = nullptr) {
  return forward(p, as_field<T>(x), z, beta_text, tape);
}

/// Accumulates dL/dweights into grads and beta * sum_v dL/dfused[c, v] into dz.
template <typename T>
void backward(const SegModelParams<T>& p, const ForwardTape<T>& tape, const LogitVolume<T>& dlogits,
              nn::ParamSet<T>& grads, std::span<T> dz) {
  COTRAIN_REQUIRE(grads.same_layout(p.weights), "gradient layout does not match parameters");
  Tensor<T> g = detail::block_backward(p, p.head, tape.head, dlogits.template retag<FeatureTag>(), grads, true);
  std::vector<Tensor<T>> dskips(p.arch.levels - 1);
  for (std::size_t i = p.decoder.size(); i >= 2; i -= 2) {
    const int level = p.arch.levels - 2 - int((i - 2) / 2);
    auto dcat = detail::block_backward(p, p.decoder[i - 1], tape.decoder[i - 1], std::move(g), grads, true);
    auto [dup, dskip] = nn::split_channels(dcat, p.arch.channels_at(level));
    dskips[level] = std::move(dskip);
    g = detail::block_backward(p, p.decoder[i - 2], tape.decoder[i - 2], std::move(dup), grads, true);
  }
  // g is now dL/dfused.
  if (tape.text_injected && tape.beta_text != 0.0) {
    COTRAIN_REQUIRE(int(dz.size()) == g.channels(), "dz length mismatch");
    for (int c = 0; c < g.channels(); ++c) {
      double s = 0.0;
      for (T v : g.channel(c)) s += double(v);
      dz[c] += static_cast<T>(tape.beta_text * s);
    }
  }
  for (std::size_t i = p.encoder.size(); i-- > 0;) {
    const bool level_end = i % 2 == 1;
    const int level = int(i / 2);
    if (level_end && level < p.arch.levels - 1) nn::add_inplace(g, dskips[level]);
    g = detail::block_backward(p, p.encoder[i], tape.encoder[i], std::move(g), grads, i > 0);
  }
}

/// Signs of every pre-activation in a taped forward; changes between two
/// forwards show that a finite-difference step crossed a ReLU kink.
template <typename T> std::vector<bool> activation_pattern(const ForwardTape<T>& tape) {
  std::vector<bool> bits;
  auto add = [&](const BlockTape<T>& t) {
    for (T v : t.pre_act.values()) bits.push_back(v > T(0));
  };
  for (const auto& t : tape.encoder) add(t);
  for (const auto& t : tape.decoder) add(t);
  return bits;
}

}  // namespace cotrain
