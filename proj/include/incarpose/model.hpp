#pragma once

// Two-view relative pose network: a frozen patch-embedding backbone, a
// stack of decoder blocks (self-attention, cross-attention, MLP, all with
// 2D rotary position encoding on queries and keys), a residual 1×1
// bottleneck with global average pooling, and a head that regresses the
// relative pose and, optionally, its inverse. Also the training loop and
// evaluation helpers.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "incarpose/checkpoint.hpp"
#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"
#include "incarpose/imageproc.hpp"
#include "incarpose/losses.hpp"
#include "incarpose/postprocess.hpp"
#include "incarpose/tensor.hpp"

namespace incarpose {

struct ModelConfig {
  int image_size = 32;
  int in_channels = 1;
  int patch_size = 8;
  int embed_dim = 64;
  int decoder_dim = 32;
  int depth = 2;
  int heads = 0;  // 0: 12 when decoder_dim >= 128, otherwise 4
  double mlp_ratio = 4.0;
  double dropout_p = 0.1;
  int bottleneck_dim = 32;
  ReprTag repr_tag = ReprTag::quat;
  bool bidirectional = true;
  double rope_base = 10000.0;
  std::uint64_t backbone_seed = 7;
  std::uint64_t init_seed = 0;
  std::vector<double> input_mean{0.5};
  std::vector<double> input_std{0.25};

  static ModelConfig toy() { return {}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.image_size = 224;
    c.in_channels = 3;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.decoder_dim = 768;
    c.heads = 12;
    c.bottleneck_dim = 256;
    c.input_mean = {0.485, 0.456, 0.406};
    c.input_std = {0.229, 0.224, 0.225};
    return c;
  }

  int num_heads() const { return heads > 0 ? heads : (decoder_dim >= 128 ? 12 : 4); }
  int head_dim() const { return decoder_dim / num_heads(); }
  int grid() const { return image_size / patch_size; }
  int num_tokens() const { return grid() * grid(); }
  int mlp_dim() const { return static_cast<int>(std::lround(decoder_dim * mlp_ratio)); }
  std::size_t repr_dim() const { return pose_dim(repr_tag); }
  std::size_t output_dim() const { return (bidirectional ? 2 : 1) * repr_dim(); }

  void validate() const {
    const auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw InvalidArgument("model config: " + msg);
    };
    need(image_size > 0 && patch_size > 0, "image_size and patch_size must be > 0");
    need(in_channels == 1 || in_channels == 3, "in_channels must be 1 or 3");
    need(embed_dim > 0 && decoder_dim > 0 && bottleneck_dim > 0, "dimensions must be > 0");
    need(depth >= 1, "depth must be >= 1");
    need(heads >= 0, "heads must be >= 0");
    need(decoder_dim % num_heads() == 0, "decoder_dim must be divisible by heads");
    need(head_dim() % 4 == 0, "head_dim must be divisible by 4");
    need(mlp_ratio > 0.0 && mlp_dim() >= 1, "mlp_ratio must be > 0");
    need(dropout_p >= 0.0 && dropout_p < 1.0, "dropout_p must be in [0, 1)");
    need(rope_base > 1.0, "rope_base must be > 1");
    need(input_mean.size() == static_cast<std::size_t>(in_channels) && input_std.size() == input_mean.size(),
         "input_mean/input_std need one value per channel");
    if (image_size % patch_size != 0) {
      throw ShapeError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                       std::to_string(patch_size));
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_size", c.image_size},       {"in_channels", c.in_channels},
       {"patch_size", c.patch_size},       {"embed_dim", c.embed_dim},
       {"decoder_dim", c.decoder_dim},     {"depth", c.depth},
       {"heads", c.heads},                 {"mlp_ratio", c.mlp_ratio},
       {"dropout_p", c.dropout_p},         {"bottleneck_dim", c.bottleneck_dim},
       {"repr", std::string(to_string(c.repr_tag))}, {"bidirectional", c.bidirectional},
       {"rope_base", c.rope_base},         {"backbone_seed", c.backbone_seed},
       {"init_seed", c.init_seed},         {"input_mean", c.input_mean},
       {"input_std", c.input_std}};
}

/// Fields absent from j keep their values in c.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("image_size", c.image_size);
  get("in_channels", c.in_channels);
  get("patch_size", c.patch_size);
  get("embed_dim", c.embed_dim);
  get("decoder_dim", c.decoder_dim);
  get("depth", c.depth);
  get("heads", c.heads);
  get("mlp_ratio", c.mlp_ratio);
  get("dropout_p", c.dropout_p);
  get("bottleneck_dim", c.bottleneck_dim);
  if (j.contains("repr")) c.repr_tag = parse_repr_tag(j.at("repr").get<std::string>());
  get("bidirectional", c.bidirectional);
  get("rope_base", c.rope_base);
  get("backbone_seed", c.backbone_seed);
  get("init_seed", c.init_seed);
  get("input_mean", c.input_mean);
  get("input_std", c.input_std);
}

// ---------------------------------------------------------------------------
// Seeded initialization

namespace detail {

// 53-bit uniform in [0, 1) from a mt19937_64 draw.
inline double unit_uniform(std::mt19937_64& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

inline double box_muller(std::mt19937_64& g) {
  const double u1 = 1.0 - unit_uniform(g), u2 = unit_uniform(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

inline Tensor uniform_param(const Shape& s, double bound, std::mt19937_64& g) {
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = bound * (2.0 * unit_uniform(g) - 1.0);
  Tensor t = Tensor::from_data(s, std::move(v));
  t.set_requires_grad();
  return t;
}

inline Tensor const_param(const Shape& s, double value) {
  Tensor t = Tensor::full(s, value);
  t.set_requires_grad();
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backbone stub

struct TokenGrid {
  Tensor tokens;  // (N, D)
  std::vector<std::array<double, 2>> positions;  // (u, v) = (column, row) in patch units
  int grid_h = 0;
  int grid_w = 0;
};

/// Row-major patch grid coordinates (u = column, v = row).
inline std::vector<std::array<double, 2>> grid_positions(int grid_h, int grid_w) {
  std::vector<std::array<double, 2>> p;
  for (int v = 0; v < grid_h; ++v)
    for (int u = 0; u < grid_w; ++u) p.push_back({static_cast<double>(u), static_cast<double>(v)});
  return p;
}

/// Fixed random linear patch projection followed by GELU. Never trained.
struct StubBackbone {
  Tensor weight;  // (patch²·C, embed_dim)
  Tensor bias;    // (embed_dim)

  static StubBackbone make(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 g(cfg.backbone_seed);
    const std::size_t in = static_cast<std::size_t>(cfg.patch_size) * cfg.patch_size * cfg.in_channels;
    const std::size_t e = static_cast<std::size_t>(cfg.embed_dim);
    std::vector<double> w(in * e), b(e);
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& x : w) x = s * detail::box_muller(g);
    for (double& x : b) x = 0.1 * detail::box_muller(g);
    return {Tensor::from_data({in, e}, std::move(w)), Tensor::from_data({e}, std::move(b))};
  }

  /// Tokens (B, N, embed_dim) for a batch of preprocessed images.
  Tensor forward_batch(const std::vector<const ImageF*>& imgs, const ModelConfig& cfg) const {
    const int p = cfg.patch_size, c = cfg.in_channels;
    if (imgs.empty()) throw InvalidArgument("empty image batch");
    for (const ImageF* img : imgs) {
      if (img->channels != c) throw ShapeError("backbone expects " + std::to_string(c) + " channels");
      if (img->height != img->width || img->height % p != 0) {
        throw ShapeError("image " + std::to_string(img->height) + "x" + std::to_string(img->width) +
                         " is not square with side divisible by patch size " + std::to_string(p));
      }
      if (img->height != imgs[0]->height) throw ShapeError("images in a batch must share a size");
    }
    const int g = imgs[0]->height / p;
    const std::size_t n = static_cast<std::size_t>(g) * g, pd = static_cast<std::size_t>(p) * p * c;
    std::vector<double> patches(imgs.size() * n * pd);
    std::size_t k = 0;
    for (const ImageF* img : imgs)
      for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
          for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
              for (int ch = 0; ch < c; ++ch) patches[k++] = img->at(gy * p + y, gx * p + x, ch);
    const Tensor pt = Tensor::from_data({imgs.size(), n, pd}, std::move(patches));
    if (weight.shape()[0] != pd) throw ShapeError("backbone weight " + shape_str(weight.shape()) + " vs patch size");
    return gelu(add(matmul(pt, weight), bias));
  }

  TokenGrid forward(const ImageF& img, const ModelConfig& cfg) const {
    const Tensor t = forward_batch({&img}, cfg);
    const int g = img.height / cfg.patch_size;
    return {reshape(t, {t.dim(1), t.dim(2)}), grid_positions(g, g), g, g};
  }
};

inline TokenGrid stub_backbone_forward(const ImageF& img, const ModelConfig& cfg, const StubBackbone& bb) {
  return bb.forward(img, cfg);
}

// ---------------------------------------------------------------------------
// 2D rotary position encoding

/// x has shape (..., N, heads, head_dim). In each head, channel pairs
/// (2i, 2i+1) of the first half rotate by u·θ_i and those of the second
/// half by v·θ_i, with θ_i = base^(-2i / (head_dim / 2)).
inline Tensor rope2d_apply(const Tensor& x, const std::vector<std::array<double, 2>>& positions, double base) {
  if (x.rank() < 3) throw ShapeError("rope2d_apply expects (..., N, heads, head_dim), got " + shape_str(x.shape()));
  const std::size_t hd = x.dim(-1), h = x.dim(-2), n = x.dim(-3);
  if (hd % 4 != 0) throw ShapeError("rope2d_apply: head_dim " + std::to_string(hd) + " is not divisible by 4");
  if (positions.size() != n) {
    throw ShapeError("rope2d_apply: " + std::to_string(positions.size()) + " positions for " + std::to_string(n) +
                     " tokens");
  }
  const std::size_t q = hd / 4;
  // cos/sin per (token, axis, pair).
  auto cs = std::make_shared<std::vector<double>>(n * 2 * q * 2);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t ax = 0; ax < 2; ++ax)
      for (std::size_t i = 0; i < q; ++i) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd / 2));
        const double ang = positions[t][ax] * theta;
        (*cs)[((t * 2 + ax) * q + i) * 2] = std::cos(ang);
        (*cs)[((t * 2 + ax) * q + i) * 2 + 1] = std::sin(ang);
      }
  const std::size_t outer = x.numel() / (n * h * hd);
  const auto rotate = [=](const double* in, double* out, double sign) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t hh = 0; hh < h; ++hh) {
          const std::size_t base_idx = ((o * n + t) * h + hh) * hd;
          for (std::size_t ax = 0; ax < 2; ++ax)
            for (std::size_t i = 0; i < q; ++i) {
              const double c = (*cs)[((t * 2 + ax) * q + i) * 2];
              const double s = sign * (*cs)[((t * 2 + ax) * q + i) * 2 + 1];
              const std::size_t j = base_idx + ax * (hd / 2) + 2 * i;
              const double a = in[j], b = in[j + 1];
              out[j] = a * c - b * s;
              out[j + 1] = a * s + b * c;
            }
        }
  };
  std::vector<double> out(x.numel());
  rotate(x.data().data(), out.data(), 1.0);
  return custom_op({x}, x.shape(), std::move(out), [rotate](std::span<const double> go, const auto& gi) {
    if (!gi[0]) return;
    std::vector<double> back(go.size());
    rotate(go.data(), back.data(), -1.0);
    for (std::size_t i = 0; i < back.size(); ++i) (*gi[0])[i] += back[i];
  });
}

// ---------------------------------------------------------------------------
// Weights

struct LinearWeights {
  Tensor w;  // (in, out)
  Tensor b;  // (out)
};

struct NormWeights {
  Tensor gain;
  Tensor bias;
};

struct AttentionWeights {
  LinearWeights q, k, v, o;
};

struct BlockWeights {
  NormWeights ln_self;
  AttentionWeights self_attn;
  NormWeights ln_cross;
  NormWeights ln_ctx;
  AttentionWeights cross_attn;
  NormWeights ln_mlp;
  LinearWeights mlp_in;
  LinearWeights mlp_out;
};

struct ModelWeights {
  ModelConfig cfg;
  StubBackbone backbone;
  LinearWeights embed;
  std::vector<BlockWeights> blocks;
  LinearWeights fuse_in;
  LinearWeights fuse_out;
  LinearWeights fuse_skip;
  NormWeights head_norm;
  LinearWeights head_hidden;
  LinearWeights head_forward;
  LinearWeights head_inverse;  // unused when unidirectional

  /// Trainable tensors in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> p;
    const auto lin = [&p](const std::string& n, const LinearWeights& l) {
      p.push_back({n + ".weight", l.w});
      p.push_back({n + ".bias", l.b});
    };
    const auto norm = [&p](const std::string& n, const NormWeights& l) {
      p.push_back({n + ".gain", l.gain});
      p.push_back({n + ".bias", l.bias});
    };
    const auto attn = [&lin](const std::string& n, const AttentionWeights& a) {
      lin(n + ".q", a.q);
      lin(n + ".k", a.k);
      lin(n + ".v", a.v);
      lin(n + ".o", a.o);
    };
    lin("embed", embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string b = "blocks." + std::to_string(i);
      const BlockWeights& bw = blocks[i];
      norm(b + ".ln_self", bw.ln_self);
      attn(b + ".self_attn", bw.self_attn);
      norm(b + ".ln_cross", bw.ln_cross);
      norm(b + ".ln_ctx", bw.ln_ctx);
      attn(b + ".cross_attn", bw.cross_attn);
      norm(b + ".ln_mlp", bw.ln_mlp);
      lin(b + ".mlp_in", bw.mlp_in);
      lin(b + ".mlp_out", bw.mlp_out);
    }
    lin("fuse_in", fuse_in);
    lin("fuse_out", fuse_out);
    lin("fuse_skip", fuse_skip);
    norm("head_norm", head_norm);
    lin("head_hidden", head_hidden);
    lin("head_forward", head_forward);
    if (cfg.bidirectional) lin("head_inverse", head_inverse);
    return p;
  }

  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : parameters()) n += t.numel();
    return n;
  }
};

/// Seeded initialization: linear layers uniform in ±1/sqrt(fan_in) (weights
/// and biases), LayerNorm gain 1 and bias 0.
inline ModelWeights init_model(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 g(cfg.init_seed);
  const auto lin = [&g](std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    LinearWeights l;
    l.w = detail::uniform_param({in, out}, bound, g);
    l.b = detail::uniform_param({out}, bound, g);
    return l;
  };
  const auto norm = [](std::size_t d) { return NormWeights{detail::const_param({d}, 1.0), detail::const_param({d}, 0.0)}; };
  const std::size_t e = cfg.embed_dim, d = cfg.decoder_dim, m = cfg.mlp_dim(), b = cfg.bottleneck_dim;
  const std::size_t r = cfg.repr_dim();

  ModelWeights w;
  w.cfg = cfg;
  w.backbone = StubBackbone::make(cfg);
  w.embed = lin(e, d);
  for (int i = 0; i < cfg.depth; ++i) {
    BlockWeights bw;
    bw.ln_self = norm(d);
    bw.self_attn = {lin(d, d), lin(d, d), lin(d, d), lin(d, d)};
    bw.ln_cross = norm(d);
    bw.ln_ctx = norm(d);
    bw.cross_attn = {lin(d, d), lin(d, d), lin(d, d), lin(d, d)};
    bw.ln_mlp = norm(d);
    bw.mlp_in = lin(d, m);
    bw.mlp_out = lin(m, d);
    w.blocks.push_back(std::move(bw));
  }
  w.fuse_in = lin(2 * d, b);
  w.fuse_out = lin(b, b);
  w.fuse_skip = lin(2 * d, b);
  w.head_norm = norm(b);
  w.head_hidden = lin(b, b);
  w.head_forward = lin(b, r);
  if (cfg.bidirectional) w.head_inverse = lin(b, r);
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Runtime switches for one forward pass.
struct ForwardMode {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  std::uint64_t step = 0;
};

inline Tensor apply_linear(const Tensor& x, const LinearWeights& l) { return linear(x, l.w, l.b); }
inline Tensor apply_norm(const Tensor& x, const NormWeights& n) { return layer_norm(x, n.gain, n.bias); }

/// Multi-head attention of queries xq (B, N, D) over keys/values xkv
/// (B, M, D), with RoPE on queries and keys.
inline Tensor attention(const Tensor& xq, const Tensor& xkv, const AttentionWeights& w,
                        const std::vector<std::array<double, 2>>& pos_q,
                        const std::vector<std::array<double, 2>>& pos_k, int heads, double rope_base) {
  if (xq.rank() != 3 || xkv.rank() != 3 || xq.dim(0) != xkv.dim(0) || xq.dim(2) != xkv.dim(2)) {
    throw ShapeError("attention: query " + shape_str(xq.shape()) + " and context " + shape_str(xkv.shape()));
  }
  const std::size_t bsz = xq.dim(0), n = xq.dim(1), m = xkv.dim(1), d = xq.dim(2);
  const std::size_t h = static_cast<std::size_t>(heads), hd = d / h;
  const Tensor q = rope2d_apply(reshape(apply_linear(xq, w.q), {bsz, n, h, hd}), pos_q, rope_base);
  const Tensor k = rope2d_apply(reshape(apply_linear(xkv, w.k), {bsz, m, h, hd}), pos_k, rope_base);
  const Tensor v = reshape(apply_linear(xkv, w.v), {bsz, m, h, hd});
  const Tensor qh = permute(q, {0, 2, 1, 3});  // (B, H, N, hd)
  const Tensor kt = permute(k, {0, 2, 3, 1});  // (B, H, hd, M)
  const Tensor vh = permute(v, {0, 2, 1, 3});  // (B, H, M, hd)
  const Tensor a = softmax(scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(hd))), -1);
  const Tensor ctx = reshape(permute(matmul(a, vh), {0, 2, 1, 3}), {bsz, n, d});
  return apply_linear(ctx, w.o);
}

/// Pre-norm block refining view tokens x (B, N, D) with context tokens
/// ctx (B, M, D) from the other view.
inline Tensor decoder_block_forward(const Tensor& x, const Tensor& ctx, const BlockWeights& w,
                                    const std::vector<std::array<double, 2>>& pos_x,
                                    const std::vector<std::array<double, 2>>& pos_ctx, const ModelConfig& cfg) {
  if (x.rank() != 3 || ctx.rank() != 3 || x.dim(2) != ctx.dim(2) ||
      x.dim(2) != static_cast<std::size_t>(cfg.decoder_dim)) {
    throw ShapeError("decoder block: tokens " + shape_str(x.shape()) + " and context " + shape_str(ctx.shape()) +
                     " for decoder_dim " + std::to_string(cfg.decoder_dim));
  }
  const int h = cfg.num_heads();
  const Tensor hs = apply_norm(x, w.ln_self);
  Tensor y = add(x, attention(hs, hs, w.self_attn, pos_x, pos_x, h, cfg.rope_base));
  y = add(y, attention(apply_norm(y, w.ln_cross), apply_norm(ctx, w.ln_ctx), w.cross_attn, pos_x, pos_ctx, h,
                       cfg.rope_base));
  const Tensor mlp = apply_linear(gelu(apply_linear(apply_norm(y, w.ln_mlp), w.mlp_in)), w.mlp_out);
  return add(y, mlp);
}

/// Channel concat, 1×1 fusion (in → GELU → out) plus a 1×1 skip
/// projection, then the mean over tokens: (B, N, D) × 2 → (B, bottleneck).
inline Tensor fuse_and_pool(const Tensor& ta, const Tensor& tb, const ModelWeights& w) {
  if (ta.shape() != tb.shape() || ta.rank() != 3) {
    throw ShapeError("fuse_and_pool: token shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
  }
  const Tensor x = concat({ta, tb}, -1);
  const Tensor fused = conv2d_1x1(gelu(conv2d_1x1(x, w.fuse_in.w, w.fuse_in.b)), w.fuse_out.w, w.fuse_out.b);
  const Tensor y = add(fused, conv2d_1x1(x, w.fuse_skip.w, w.fuse_skip.b));
  return mean(y, 1);
}

inline constexpr std::uint64_t kHeadDropoutLayer = 1;

/// feat (B, bottleneck) → raw (B, d) or (B, 2d): [forward | inverse].
inline Tensor head_forward(const Tensor& feat, const ModelWeights& w, const ForwardMode& mode) {
  if (feat.rank() != 2 || feat.dim(1) != static_cast<std::size_t>(w.cfg.bottleneck_dim)) {
    throw ShapeError("head: feature " + shape_str(feat.shape()) + " for bottleneck " +
                     std::to_string(w.cfg.bottleneck_dim));
  }
  Tensor h = gelu(apply_linear(apply_norm(feat, w.head_norm), w.head_hidden));
  h = dropout(h, w.cfg.dropout_p, {mode.dropout_seed, kHeadDropoutLayer, mode.step}, mode.training);
  const Tensor fwd = apply_linear(h, w.head_forward);
  if (!w.cfg.bidirectional) return fwd;
  return concat({fwd, apply_linear(h, w.head_inverse)}, 1);
}

/// Normalizes to the network input canvas (zero-pad resize to image_size,
/// then per-channel normalization).
inline ImageF prepare_input(const ImageF& img, const ModelConfig& cfg) {
  const ImageF r = (img.height == cfg.image_size && img.width == cfg.image_size)
                       ? img
                       : zero_pad_resize(img, cfg.image_size);
  return normalize(r, cfg.input_mean, cfg.input_std);
}

/// Decoder, fusion and head on precomputed backbone tokens (B, N, E).
inline Tensor forward_from_tokens(const Tensor& tok_ref, const Tensor& tok_2, const ModelWeights& w,
                                  const ForwardMode& mode) {
  if (tok_ref.shape() != tok_2.shape() || tok_ref.rank() != 3) {
    throw ShapeError("token batches " + shape_str(tok_ref.shape()) + " and " + shape_str(tok_2.shape()));
  }
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tok_ref.dim(1)))));
  if (static_cast<std::size_t>(g * g) != tok_ref.dim(1)) throw ShapeError("token count is not a square grid");
  const auto pos = grid_positions(g, g);
  Tensor xa = apply_linear(tok_ref, w.embed);
  Tensor xb = apply_linear(tok_2, w.embed);
  for (const BlockWeights& blk : w.blocks) {
    Tensor na = decoder_block_forward(xa, xb, blk, pos, pos, w.cfg);
    Tensor nb = decoder_block_forward(xb, xa, blk, pos, pos, w.cfg);
    xa = std::move(na);
    xb = std::move(nb);
  }
  return head_forward(fuse_and_pool(xa, xb, w), w, mode);
}

/// Raw outputs (B, output_dim) for batches of already-prepared images.
inline Tensor forward_raw(const std::vector<const ImageF*>& refs, const std::vector<const ImageF*>& seconds,
                          const ModelWeights& w, const ForwardMode& mode) {
  if (refs.size() != seconds.size()) throw ShapeError("reference and second-view batches differ in size");
  return forward_from_tokens(w.backbone.forward_batch(refs, w.cfg), w.backbone.forward_batch(seconds, w.cfg), w,
                             mode);
}

struct PosePrediction {
  PoseSE3 forward;
  std::optional<PoseSE3> inverse;
  std::vector<double> raw;
};

inline PosePrediction decode_prediction(std::span<const double> raw, const ModelConfig& cfg) {
  const std::size_t d = cfg.repr_dim();
  PosePrediction p;
  p.raw.assign(raw.begin(), raw.end());
  p.forward = postprocess_output(raw.first(d), cfg.repr_tag);
  if (cfg.bidirectional) p.inverse = postprocess_output(raw.subspan(d, d), cfg.repr_tag);
  return p;
}

/// Eval-mode prediction for one pair of raw [0, 1] images.
inline PosePrediction model_forward(const ImageF& img_ref, const ImageF& img_2, const ModelWeights& w) {
  const ImageF a = prepare_input(img_ref, w.cfg), b = prepare_input(img_2, w.cfg);
  const Tensor raw = forward_raw({&a}, {&b}, w, {});
  return decode_prediction(raw.data(), w.cfg);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Checkpoint weights_to_checkpoint(const ModelWeights& w, nlohmann::json extra_meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.tensors.push_back({"backbone.weight", w.backbone.weight.shape(), w.backbone.weight.data()});
  ck.tensors.push_back({"backbone.bias", w.backbone.bias.shape(), w.backbone.bias.data()});
  for (const auto& [name, t] : w.parameters()) ck.tensors.push_back({name, t.shape(), t.data()});
  ck.meta = std::move(extra_meta);
  ck.meta["model"] = w.cfg;
  return ck;
}

inline ModelWeights weights_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("model")) throw DataError("checkpoint lacks model config");
  ModelConfig cfg;
  try {
    from_json(ck.meta.at("model"), cfg);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint model config: ") + e.what());
  }
  ModelWeights w = init_model(cfg);
  const auto load = [&ck](const std::string& name, Tensor& t) {
    const NamedArray& a = ck.at(name);
    if (a.shape != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(a.shape) + ", expected " +
                      shape_str(t.shape()));
    }
    t.mutable_data() = a.values;
  };
  load("backbone.weight", w.backbone.weight);
  load("backbone.bias", w.backbone.bias);
  for (auto& [name, t] : w.parameters()) load(name, t);
  return w;
}

// ---------------------------------------------------------------------------
// Training

struct PairSample {
  ImageF img_ref;
  ImageF img_2;
  PoseSE3 target;  // second view in the reference frame
};

struct TrainConfig {
  int epochs = 15;
  std::size_t batch_size = 8;
  AdamWConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 1e-5};
  LossId loss = LossId::quat_pose_metric;
  LossConfig loss_cfg;
  BidirectionalReduction reduction = BidirectionalReduction::sum;
  std::uint64_t seed = 0;

  static TrainConfig toy() { return {}; }
  static TrainConfig paper() {
    TrainConfig c;
    c.optimizer.lr = 1e-6;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.optimizer.lr},
       {"beta1", c.optimizer.beta1},
       {"beta2", c.optimizer.beta2},
       {"eps", c.optimizer.eps},
       {"weight_decay", c.optimizer.weight_decay},
       {"loss", std::string(to_string(c.loss))},
       {"alpha", c.loss_cfg.alpha},
       {"translation_mode", c.loss_cfg.translation_mode == TranslationMode::euclidean_m ? "euclidean_m" : "direction_rad"},
       {"reduction", c.reduction == BidirectionalReduction::sum ? "sum" : "mean"},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("lr", c.optimizer.lr);
  get("beta1", c.optimizer.beta1);
  get("beta2", c.optimizer.beta2);
  get("eps", c.optimizer.eps);
  get("weight_decay", c.optimizer.weight_decay);
  if (j.contains("loss")) c.loss = parse_loss_id(j.at("loss").get<std::string>());
  get("alpha", c.loss_cfg.alpha);
  if (j.contains("translation_mode")) {
    const std::string m = j.at("translation_mode").get<std::string>();
    if (m == "euclidean_m")
      c.loss_cfg.translation_mode = TranslationMode::euclidean_m;
    else if (m == "direction_rad")
      c.loss_cfg.translation_mode = TranslationMode::direction_rad;
    else
      throw InvalidArgument("unknown translation_mode '" + m + "'");
  }
  if (j.contains("reduction")) {
    const std::string r = j.at("reduction").get<std::string>();
    if (r != "sum" && r != "mean") throw InvalidArgument("unknown reduction '" + r + "'");
    c.reduction = r == "sum" ? BidirectionalReduction::sum : BidirectionalReduction::mean;
  }
  get("seed", c.seed);
}

/// Mean over the batch of the pose loss on raw outputs (B, output_dim).
/// With a bidirectional head the inverse slot is supervised with the
/// inverse target and the two directions are reduced per `reduction`.
inline Tensor pose_loss(const Tensor& raw, const std::vector<PoseSE3>& targets, const ModelConfig& cfg,
                        LossId id, const LossConfig& loss_cfg, BidirectionalReduction reduction) {
  const std::size_t bsz = targets.size(), d = cfg.repr_dim(), out = cfg.output_dim();
  if (raw.shape() != Shape{bsz, out}) {
    throw ShapeError("pose_loss: raw " + shape_str(raw.shape()) + " for " + std::to_string(bsz) + " targets of width " +
                     std::to_string(out));
  }
  const double w_dir = cfg.bidirectional && reduction == BidirectionalReduction::mean ? 0.5 : 1.0;
  auto grad = std::make_shared<std::vector<double>>(raw.numel(), 0.0);
  double total = 0.0;
  const std::span<const double> v(raw.data());
  for (std::size_t b = 0; b < bsz; ++b) {
    const LossEvaluation f = loss_gradient(id, cfg.repr_tag, v.subspan(b * out, d), targets[b], loss_cfg);
    total += w_dir * f.value;
    for (std::size_t i = 0; i < d; ++i) (*grad)[b * out + i] = w_dir * f.gradient[i] / static_cast<double>(bsz);
    if (cfg.bidirectional) {
      const LossEvaluation r = loss_gradient(id, cfg.repr_tag, v.subspan(b * out + d, d), inverse(targets[b]), loss_cfg);
      total += w_dir * r.value;
      for (std::size_t i = 0; i < d; ++i) (*grad)[b * out + d + i] = w_dir * r.gradient[i] / static_cast<double>(bsz);
    }
  }
  return custom_op({raw}, {}, {total / static_cast<double>(bsz)}, [grad](std::span<const double> go, const auto& gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < grad->size(); ++i) (*gi[0])[i] += go[0] * (*grad)[i];
  });
}

struct EvalMetrics {
  std::vector<double> rotation_deg;
  std::vector<double> translation_m;
  std::vector<double> consistency_deg;  // geodesic of forward ∘ inverse; empty when unidirectional
  double median_rotation_deg = 0.0;
  double median_translation_m = 0.0;
  double median_consistency_deg = 0.0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<EvalMetrics> validation;
  double seconds = 0.0;
};

namespace detail {

// Backbone tokens (N, E) for every image in a sample list, computed once.
struct TokenCache {
  std::vector<double> ref, second;
  std::size_t n = 0, e = 0;

  TokenCache(std::span<const PairSample> samples, const ModelWeights& w) {
    std::vector<ImageF> a, b;
    for (const PairSample& s : samples) {
      a.push_back(prepare_input(s.img_ref, w.cfg));
      b.push_back(prepare_input(s.img_2, w.cfg));
    }
    n = static_cast<std::size_t>(w.cfg.num_tokens());
    e = static_cast<std::size_t>(w.cfg.embed_dim);
    constexpr std::size_t chunk = 64;
    for (std::size_t s = 0; s < samples.size(); s += chunk) {
      std::vector<const ImageF*> pa, pb;
      for (std::size_t i = s; i < std::min(samples.size(), s + chunk); ++i) {
        pa.push_back(&a[i]);
        pb.push_back(&b[i]);
      }
      const Tensor ta = w.backbone.forward_batch(pa, w.cfg), tb = w.backbone.forward_batch(pb, w.cfg);
      ref.insert(ref.end(), ta.data().begin(), ta.data().end());
      second.insert(second.end(), tb.data().begin(), tb.data().end());
    }
  }

  std::pair<Tensor, Tensor> gather(const std::vector<std::size_t>& idx) const {
    const std::size_t block = n * e;
    std::vector<double> a(idx.size() * block), b(idx.size() * block);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(ref.begin() + idx[k] * block, block, a.begin() + k * block);
      std::copy_n(second.begin() + idx[k] * block, block, b.begin() + k * block);
    }
    return {Tensor::from_data({idx.size(), n, e}, std::move(a)), Tensor::from_data({idx.size(), n, e}, std::move(b))};
  }
};

inline EvalMetrics evaluate_cached(const TokenCache& cache, std::span<const PairSample> samples, const ModelWeights& w) {
  EvalMetrics m;
  constexpr std::size_t chunk = 64;
  for (std::size_t s = 0; s < samples.size(); s += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, samples.size() - s));
    std::iota(idx.begin(), idx.end(), s);
    const auto [ta, tb] = cache.gather(idx);
    const Tensor raw = forward_from_tokens(ta, tb, w, {});
    const std::size_t out = w.cfg.output_dim();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const PosePrediction p = decode_prediction(std::span<const double>(raw.data()).subspan(k * out, out), w.cfg);
      const PoseSE3& gt = samples[idx[k]].target;
      m.rotation_deg.push_back(rad2deg(geodesic_distance(p.forward.rotation, gt.rotation)));
      m.translation_m.push_back(euclidean_translation_error(p.forward.translation, gt.translation));
      if (p.inverse) {
        const PoseSE3 c = compose(p.forward, *p.inverse);
        m.consistency_deg.push_back(rad2deg(geodesic_distance(c.rotation, RotationMatrix::identity())));
      }
    }
  }
  m.median_rotation_deg = median_of(m.rotation_deg);
  m.median_translation_m = median_of(m.translation_m);
  m.median_consistency_deg = median_of(m.consistency_deg);
  return m;
}

inline std::vector<unsigned char> tensor_bytes(const Tensor& t) {
  std::vector<unsigned char> b(t.numel() * sizeof(double));
  std::memcpy(b.data(), t.data().data(), b.size());
  return b;
}

}  // namespace detail

/// Eval-mode errors of the forward prediction against each target, plus
/// the rotation consistency of forward and inverse predictions.
inline EvalMetrics evaluate(std::span<const PairSample> samples, const ModelWeights& w) {
  if (samples.empty()) throw InvalidArgument("evaluate: empty dataset");
  const detail::TokenCache cache(samples, w);
  return detail::evaluate_cached(cache, samples, w);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains the decoder, bottleneck and head with AdamW; the backbone stays
/// frozen (checked byte for byte after every epoch). Returns one record per
/// epoch, with validation metrics when a validation set is given.
inline std::vector<EpochRecord> train(ModelWeights& w, std::span<const PairSample> train_set,
                                      std::span<const PairSample> val_set, const TrainConfig& cfg,
                                      const EpochCallback& on_epoch = {}) {
  if (train_set.empty()) throw InvalidArgument("train: empty dataset");
  if (cfg.batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (cfg.epochs < 0) throw InvalidArgument("train: epochs must be >= 0");
  cfg.loss_cfg.validate();
  std::vector<EpochRecord> history;
  if (cfg.epochs == 0) return history;

  const auto bb_w = detail::tensor_bytes(w.backbone.weight), bb_b = detail::tensor_bytes(w.backbone.bias);
  const detail::TokenCache train_cache(train_set, w);
  std::optional<detail::TokenCache> val_cache;
  if (!val_set.empty()) val_cache.emplace(val_set, w);

  std::vector<Tensor> params = w.parameter_tensors();
  AdamWState opt = make_adamw_state(params, cfg.optimizer);
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fisher-Yates with explicit draws so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(order.size(), s + cfg.batch_size));
      const auto [ta, tb] = train_cache.gather(idx);
      std::vector<PoseSE3> targets;
      for (std::size_t i : idx) targets.push_back(train_set[i].target);
      for (Tensor& p : params) p.zero_grad();
      const Tensor raw = forward_from_tokens(ta, tb, w, {true, cfg.seed, step});
      const Tensor loss = pose_loss(raw, targets, w.cfg, cfg.loss, cfg.loss_cfg, cfg.reduction);
      backward(loss);
      adamw_step(params, opt);
      loss_sum += loss.item();
      ++batches;
      ++step;
    }
    if (detail::tensor_bytes(w.backbone.weight) != bb_w || detail::tensor_bytes(w.backbone.bias) != bb_b) {
      throw Error("backbone weights changed during training");
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    if (val_cache) rec.validation = detail::evaluate_cached(*val_cache, val_set, w);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(rec);
    history.push_back(std::move(rec));
  }
  return history;
}

}  // namespace incarpose
