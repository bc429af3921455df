#pragma once

// Float images, the zero-pad and center-crop resize pipelines,
// per-channel normalization, color jitter and 8-bit PGM/PPM I/O.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "incarpose/errors.hpp"

namespace incarpose {

/// Row-major, channel-interleaved image with values in [0, 1].
struct ImageF {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> data;

  ImageF() = default;
  ImageF(int h, int w, int c, double fill = 0.0) : height(h), width(w), channels(c) {
    if (h < 0 || w < 0 || (c != 1 && c != 3)) throw InvalidArgument("invalid image shape");
    data.assign(static_cast<std::size_t>(h) * w * c, fill);
  }

  bool empty() const { return height == 0 || width == 0; }
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int y, int x, int c = 0) { return data[index(y, x, c)]; }
  double at(int y, int x, int c = 0) const { return data[index(y, x, c)]; }
  bool operator==(const ImageF&) const = default;
};

/// Location of the resized content inside a padded canvas.
struct ContentBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

namespace detail {

inline void require_image(const ImageF& img) {
  if (img.empty()) throw InvalidArgument("empty image");
  if (img.data.size() != static_cast<std::size_t>(img.height) * img.width * img.channels) {
    throw ShapeError("image data length does not match its shape");
  }
}

inline void require_target(int target) {
  if (target < 1) throw InvalidArgument("target size must be >= 1");
}

// Scaled length, round half to even.
inline int scaled_dim(int len, int num, int den) {
  return std::max(1, static_cast<int>(std::nearbyint(static_cast<double>(len) * num / den)));
}

}  // namespace detail

/// Bilinear resize with half-pixel-center alignment.
inline ImageF resize_bilinear(const ImageF& img, int out_h, int out_w) {
  detail::require_image(img);
  if (out_h < 1 || out_w < 1) throw InvalidArgument("resize target must be >= 1");
  ImageF out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = (1 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

/// Where zero_pad_resize puts the content of an h×w image.
inline ContentBox zero_pad_content_box(int h, int w, int target) {
  detail::require_target(target);
  if (h < 1 || w < 1) throw InvalidArgument("empty image");
  ContentBox b;
  if (w >= h) {
    b.width = target;
    b.height = std::min(target, detail::scaled_dim(h, target, w));
  } else {
    b.height = target;
    b.width = std::min(target, detail::scaled_dim(w, target, h));
  }
  b.top = (target - b.height) / 2;
  b.left = (target - b.width) / 2;
  return b;
}

/// Scales the longer side to `target` and pads the shorter one
/// symmetrically with zeros (odd remainder at the bottom/right).
inline ImageF zero_pad_resize(const ImageF& img, int target) {
  detail::require_image(img);
  const ContentBox b = zero_pad_content_box(img.height, img.width, target);
  const ImageF scaled = resize_bilinear(img, b.height, b.width);
  ImageF out(target, target, img.channels, 0.0);
  for (int y = 0; y < b.height; ++y)
    for (int x = 0; x < b.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y + b.top, x + b.left, c) = scaled.at(y, x, c);
  return out;
}

/// Scales the shorter side to `target` and crops a centered square
/// (odd remainder dropped from the bottom/right).
inline ImageF center_crop_resize(const ImageF& img, int target) {
  detail::require_image(img);
  detail::require_target(target);
  int sh, sw;
  if (img.width >= img.height) {
    sh = target;
    sw = std::max(target, detail::scaled_dim(img.width, target, img.height));
  } else {
    sw = target;
    sh = std::max(target, detail::scaled_dim(img.height, target, img.width));
  }
  const ImageF scaled = resize_bilinear(img, sh, sw);
  const int top = (sh - target) / 2, left = (sw - target) / 2;
  ImageF out(target, target, img.channels);
  for (int y = 0; y < target; ++y)
    for (int x = 0; x < target; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = scaled.at(y + top, x + left, c);
  return out;
}

namespace detail {

inline void require_channel_params(const ImageF& img, const std::vector<double>& mean,
                                   const std::vector<double>& stdv) {
  if (mean.size() != static_cast<std::size_t>(img.channels) || stdv.size() != mean.size()) {
    throw ShapeError("mean/std need " + std::to_string(img.channels) + " channel values");
  }
  for (double s : stdv)
    if (!(s > 0.0)) throw InvalidArgument("std components must be > 0");
}

}  // namespace detail

/// (x - mean[c]) / std[c]. Result values are no longer confined to [0, 1].
inline ImageF normalize(const ImageF& img, const std::vector<double>& mean, const std::vector<double>& stdv) {
  detail::require_channel_params(img, mean, stdv);
  ImageF out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t c = i % img.channels;
    out.data[i] = (img.data[i] - mean[c]) / stdv[c];
  }
  return out;
}

inline ImageF denormalize(const ImageF& img, const std::vector<double>& mean, const std::vector<double>& stdv) {
  detail::require_channel_params(img, mean, stdv);
  ImageF out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t c = i % img.channels;
    out.data[i] = img.data[i] * stdv[c] + mean[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Color jitter

/// Maximum deltas. Brightness, contrast and saturation factors are drawn
/// from [1 - d, 1 + d]; the hue shift from [-d, d] turns.
struct JitterConfig {
  double brightness = 0.0;
  double contrast = 0.0;
  double saturation = 0.0;
  double hue = 0.0;

  bool active() const { return brightness != 0.0 || contrast != 0.0 || saturation != 0.0 || hue != 0.0; }

  void validate() const {
    for (double d : {brightness, contrast, saturation})
      if (!(d >= 0.0 && d < 1.0)) throw InvalidArgument("jitter delta must be in [0, 1)");
    if (!(hue >= 0.0 && hue <= 0.5)) throw InvalidArgument("hue delta must be in [0, 0.5]");
  }
};

struct JitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
};

/// Draws the four factors, always in the order brightness, contrast,
/// saturation, hue, from a mt19937_64 seeded with `seed` (53-bit uniforms).
inline JitterFactors sample_jitter_factors(const JitterConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 g(seed);
  const auto u = [&g] { return static_cast<double>(g() >> 11) * 0x1.0p-53; };
  JitterFactors f;
  const double ub = u(), uc = u(), us = u(), uh = u();
  f.brightness = 1.0 - cfg.brightness + 2.0 * cfg.brightness * ub;
  f.contrast = 1.0 - cfg.contrast + 2.0 * cfg.contrast * uc;
  f.saturation = 1.0 - cfg.saturation + 2.0 * cfg.saturation * us;
  f.hue = -cfg.hue + 2.0 * cfg.hue * uh;
  return f;
}

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline double luma(const ImageF& img, int y, int x) {
  if (img.channels == 1) return img.at(y, x, 0);
  return 0.2989 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r)
      h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
      h = (b - r) / d + 2.0;
    else
      h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const double s = mx > 0.0 ? d / mx : 0.0;
  return {h, s, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double h6 = h * 6.0;
  const int i = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace detail

/// Applies given factors in the order brightness, contrast, saturation,
/// hue, clamping to [0, 1] after each stage. Neutral stages are skipped;
/// 1-channel images skip saturation and hue.
inline ImageF apply_jitter_factors(const ImageF& img, const JitterFactors& f) {
  detail::require_image(img);
  ImageF out = img;
  if (f.brightness != 1.0)
    for (double& v : out.data) v = detail::clamp01(v * f.brightness);
  if (f.contrast != 1.0) {
    double m = 0.0;
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) m += detail::luma(out, y, x);
    m /= static_cast<double>(out.height) * out.width;
    for (double& v : out.data) v = detail::clamp01(f.contrast * v + (1.0 - f.contrast) * m);
  }
  if (out.channels == 3 && f.saturation != 1.0) {
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        const double l = detail::luma(out, y, x);
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = detail::clamp01(f.saturation * out.at(y, x, c) + (1.0 - f.saturation) * l);
      }
  }
  if (out.channels == 3 && f.hue != 0.0) {
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        auto [h, s, v] = detail::rgb_to_hsv(out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2));
        h = std::fmod(h + f.hue, 1.0);
        if (h < 0.0) h += 1.0;
        const auto rgb = detail::hsv_to_rgb(h, s, v);
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = detail::clamp01(rgb[c]);
      }
  }
  return out;
}

inline ImageF color_jitter(const ImageF& img, const JitterConfig& cfg, std::uint64_t seed) {
  return apply_jitter_factors(img, sample_jitter_factors(cfg, seed));
}

// ---------------------------------------------------------------------------
// Full pipeline

enum class ResizeMode { zero_pad, center_crop };

struct PreprocessConfig {
  int target_size = 32;
  ResizeMode mode = ResizeMode::zero_pad;
  std::vector<double> mean{0.5};
  std::vector<double> stdv{0.25};
  JitterConfig jitter;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require_target(target_size);
    if (mean.empty() || mean.size() != stdv.size()) throw ShapeError("mean/std length mismatch");
    for (double s : stdv)
      if (!(s > 0.0)) throw InvalidArgument("std components must be > 0");
    jitter.validate();
  }
};

/// Jitter (when enabled) on the source image, then resize, then normalize;
/// pad pixels therefore end up at -mean/std.
inline ImageF preprocess(const ImageF& img, const PreprocessConfig& cfg) {
  cfg.validate();
  const ImageF j = cfg.jitter.active() ? color_jitter(img, cfg.jitter, cfg.seed) : img;
  const ImageF r = cfg.mode == ResizeMode::zero_pad ? zero_pad_resize(j, cfg.target_size)
                                                    : center_crop_resize(j, cfg.target_size);
  return normalize(r, cfg.mean, cfg.stdv);
}

// ---------------------------------------------------------------------------
// 8-bit PGM (P5) / PPM (P6)

namespace detail {

inline int read_pnm_int(std::istream& in) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) throw DataError("malformed PNM header");
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1'000'000) throw DataError("PNM header value too large");
    c = in.get();
  }
  return static_cast<int>(v);
}

}  // namespace detail

inline ImageF read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) throw DataError(path + ": not a binary PGM/PPM");
  const int channels = magic[1] == '5' ? 1 : 3;
  const int w = detail::read_pnm_int(in);
  const int h = detail::read_pnm_int(in);
  const int maxval = detail::read_pnm_int(in);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) throw DataError(path + ": unsupported PNM header");
  ImageF img(h, w, channels);
  std::vector<unsigned char> buf(img.data.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError(path + ": truncated pixel data");
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / static_cast<double>(maxval);
  return img;
}

inline void write_pnm(const std::string& path, const ImageF& img) {
  detail::require_image(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace incarpose
