// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic motif classification tasks and the "HLDS" raw dataset format.
//
// HLDS layout (little-endian):
//   "HLDS" | version u16 | count u32 | height u16 | width u16 | channels u8 |
//   label_width u8 (1 or 2) | images u8[count*channels*height*width] (CHW per
//   image, images back to back) | labels (label_width bytes each)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "heartlora/binary.hpp"
#include "heartlora/error.hpp"
#include "heartlora/tensor.hpp"

namespace heartlora {

inline constexpr std::uint16_t kHldsVersion = 1;
inline constexpr std::size_t kHldsHeaderBytes = 16;

struct RawDataset {
  std::uint32_t count = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint8_t channels = 0;
  std::uint8_t label_width = 1;
  std::vector<std::uint8_t> images;
  std::vector<std::uint16_t> labels;

  std::size_t image_bytes() const { return std::size_t{channels} * height * width; }
  std::size_t size() const { return count; }
  bool operator==(const RawDataset&) const = default;
};

struct DatasetSplits {
  RawDataset train, val, test;

  const RawDataset& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
  }
};

enum class MotifFamily { stripes, blobs, checker, frequency };

inline std::string to_string(MotifFamily f) {
  switch (f) {
    case MotifFamily::stripes: return "stripes";
    case MotifFamily::blobs: return "blobs";
    case MotifFamily::checker: return "checker";
    default: return "frequency";
  }
}

inline MotifFamily parse_family(const std::string& s) {
  if (s == "stripes") return MotifFamily::stripes;
  if (s == "blobs") return MotifFamily::blobs;
  if (s == "checker") return MotifFamily::checker;
  if (s == "frequency") return MotifFamily::frequency;
  throw ConfigError("unknown motif family '" + s + "'");
}

struct SyntheticTaskSpec {
  std::size_t num_classes = 10;
  std::size_t train = 800;
  std::size_t val = 200;
  std::size_t test = 1000;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double noise_std = 0.35;
  std::uint64_t seed = 0;
  MotifFamily family = MotifFamily::stripes;
};

// Noise-free intensity in [0, 1] of class c's motif at pixel (x, y), channel ch.
inline double motif_value(MotifFamily family, std::size_t c, std::size_t num_classes, std::size_t size,
                          double x, double y, std::size_t ch) {
  using std::numbers::pi;
  const double s = static_cast<double>(size);
  const double tint = 0.85 + 0.15 * static_cast<double>(ch % 3) / 2.0;
  switch (family) {
    case MotifFamily::stripes: {
      const double angle = static_cast<double>(c) * pi / static_cast<double>(num_classes);
      const double u = x * std::cos(angle) + y * std::sin(angle);
      return tint * (0.5 + 0.5 * std::sin(2.0 * pi * 3.0 * u / s));
    }
    case MotifFamily::frequency: {
      const double r = std::hypot(x - s / 2.0, y - s / 2.0);
      const double f = 1.0 + 0.75 * static_cast<double>(c);
      return tint * (0.5 + 0.5 * std::cos(2.0 * pi * f * r / s));
    }
    case MotifFamily::checker: {
      const double cells = 2.0 + static_cast<double>(c % 6);
      const auto ix = static_cast<long>(std::floor(x * cells / s));
      const auto iy = static_cast<long>(std::floor(y * cells / s));
      const bool on = ((ix + iy) % 2) == 0;
      // Classes beyond six cell counts differ in which parity is lit.
      const bool flip = (c / 6) % 2 == 1;
      return tint * ((on != flip) ? 0.9 : 0.1);
    }
    default: {
      // c + 1 blobs on a golden-angle spiral.
      const double sigma = s / 10.0;
      double v = 0;
      for (std::size_t b = 0; b <= c; ++b) {
        const double a = static_cast<double>(b) * 2.399963229728653;
        const double rad = 0.32 * s * std::sqrt((static_cast<double>(b) + 0.5) / static_cast<double>(num_classes));
        const double bx = s / 2.0 + rad * std::cos(a), by = s / 2.0 + rad * std::sin(a);
        const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        v += std::exp(-d2 / (2 * sigma * sigma));
      }
      return tint * std::min(1.0, v);
    }
  }
}

namespace detail {

inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t{words[0]} << 32) | words[1];
}

inline RawDataset generate_split(const SyntheticTaskSpec& spec, std::size_t count, std::uint64_t split_id) {
  if (spec.image_size == 0 || spec.image_size > 65535 || spec.channels == 0 || spec.channels > 255)
    throw ConfigError("synthetic image geometry out of range");
  if (spec.num_classes > 65535) throw ConfigError("too many classes");
  RawDataset d;
  d.count = static_cast<std::uint32_t>(count);
  d.height = d.width = static_cast<std::uint16_t>(spec.image_size);
  d.channels = static_cast<std::uint8_t>(spec.channels);
  d.label_width = spec.num_classes > 255 ? 2 : 1;
  const auto s = spec.image_size, per = d.image_bytes();
  std::vector<std::vector<double>> templates(spec.num_classes, std::vector<double>(per));
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t ch = 0; ch < spec.channels; ++ch)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          templates[c][(ch * s + y) * s + x] =
              motif_value(spec.family, c, spec.num_classes, s, static_cast<double>(x) + 0.5,
                          static_cast<double>(y) + 0.5, ch);
  std::mt19937_64 rng(split_seed(spec.seed, split_id));
  std::normal_distribution<double> noise(0.0, 1.0);
  d.images.resize(count * per);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = i % spec.num_classes;
    d.labels[i] = static_cast<std::uint16_t>(c);
    for (std::size_t j = 0; j < per; ++j) {
      double v = templates[c][j];
      if (spec.noise_std > 0) v += spec.noise_std * noise(rng);
      d.images[i * per + j] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return d;
}

}  // namespace detail

// Class-balanced splits (labels cycle 0..K-1); each split draws its noise from
// its own seed stream.
inline DatasetSplits generate(const SyntheticTaskSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic task needs at least two classes");
  if (spec.noise_std < 0) throw ConfigError("noise_std must be non-negative");
  return DatasetSplits{detail::generate_split(spec, spec.train, 1), detail::generate_split(spec, spec.val, 2),
                       detail::generate_split(spec, spec.test, 3)};
}

inline std::vector<std::uint8_t> encode_raw(const RawDataset& d) {
  if (d.label_width != 1 && d.label_width != 2) throw ConfigError("label_width must be 1 or 2");
  if (d.images.size() != std::size_t{d.count} * d.image_bytes() || d.labels.size() != d.count)
    throw DimensionError("dataset payload does not match its header counts");
  ByteWriter w;
  w.put_bytes("HLDS");
  w.put(kHldsVersion);
  w.put(d.count);
  w.put(d.height);
  w.put(d.width);
  w.put(d.channels);
  w.put(d.label_width);
  w.put_array(d.images.data(), d.images.size());
  for (auto l : d.labels) {
    if (d.label_width == 1) {
      if (l > 255) throw ConfigError("label does not fit label_width 1");
      w.put(static_cast<std::uint8_t>(l));
    } else {
      w.put(l);
    }
  }
  return std::move(w.bytes());
}

inline RawDataset decode_raw(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != "HLDS") throw ParseError("bad HLDS magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kHldsVersion) throw ParseError("unsupported HLDS version " + std::to_string(version), 4);
  RawDataset d;
  d.count = r.get<std::uint32_t>("count");
  d.height = r.get<std::uint16_t>("height");
  d.width = r.get<std::uint16_t>("width");
  d.channels = r.get<std::uint8_t>("channels");
  const auto lw_offset = r.offset();
  d.label_width = r.get<std::uint8_t>("label_width");
  if (d.label_width != 1 && d.label_width != 2)
    throw ParseError("label_width must be 1 or 2", lw_offset);
  d.images.resize(std::size_t{d.count} * d.image_bytes());
  r.get_array(d.images.data(), d.images.size(), "image payload");
  d.labels.resize(d.count);
  for (auto& l : d.labels)
    l = d.label_width == 1 ? r.get<std::uint8_t>("labels") : r.get<std::uint16_t>("labels");
  if (r.remaining() != 0) throw ParseError("trailing bytes after labels", r.offset());
  return d;
}

inline void save_raw(const RawDataset& d, const std::string& path) { write_file(path, encode_raw(d)); }
inline RawDataset load_raw(const std::string& path) { return decode_raw(read_file(path)); }

// Images indexed by `idx` as a [b x C x H x W] tensor scaled to [0, 1], plus labels.
// This is the only place pixel bytes are normalised.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const RawDataset& d, std::span<const std::size_t> idx) {
  const auto per = d.image_bytes();
  std::vector<T> v(idx.size() * per);
  std::vector<int> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= d.count) throw IndexError("sample index " + std::to_string(idx[i]) + " out of range");
    for (std::size_t j = 0; j < per; ++j) v[i * per + j] = static_cast<T>(d.images[idx[i] * per + j]) / T(255);
    labels[i] = d.labels[idx[i]];
  }
  return {Tensor<T>({idx.size(), std::size_t{d.channels}, std::size_t{d.height}, std::size_t{d.width}}, std::move(v)),
          std::move(labels)};
}

}  // namespace heartlora
