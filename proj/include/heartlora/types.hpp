// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "heartlora/error.hpp"

namespace heartlora {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 8;
  std::size_t num_layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  bool attn_bias = false;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t mlp_dim() const { return embed_dim * mlp_ratio; }

  void validate() const {
    if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (channels == 0 || num_layers == 0 || mlp_ratio == 0 || num_classes < 2)
      throw ConfigError("model config has a zero extent or fewer than two classes");
  }

  // Canonical single-line form; also the identity checked when loading checkpoints.
  std::string to_string() const {
    std::ostringstream os;
    os << "image_size=" << image_size << ";patch_size=" << patch_size << ";channels=" << channels
       << ";embed_dim=" << embed_dim << ";num_heads=" << num_heads << ";num_layers=" << num_layers
       << ";mlp_ratio=" << mlp_ratio << ";num_classes=" << num_classes
       << ";attn_bias=" << (attn_bias ? 1 : 0);
    return os.str();
  }

  static ModelConfig from_string(const std::string& text) {
    std::map<std::string, std::size_t> kv;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ';')) {
      auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("bad model config item '" + item + "'");
      kv[item.substr(0, eq)] = std::stoul(item.substr(eq + 1));
    }
    ModelConfig c;
    auto take = [&](const char* key, std::size_t& dst) {
      auto it = kv.find(key);
      if (it == kv.end()) throw ConfigError(std::string("model config missing ") + key);
      dst = it->second;
      kv.erase(it);
    };
    take("image_size", c.image_size);
    take("patch_size", c.patch_size);
    take("channels", c.channels);
    take("embed_dim", c.embed_dim);
    take("num_heads", c.num_heads);
    take("num_layers", c.num_layers);
    take("mlp_ratio", c.mlp_ratio);
    take("num_classes", c.num_classes);
    std::size_t bias = 0;
    take("attn_bias", bias);
    c.attn_bias = bias != 0;
    if (!kv.empty()) throw ConfigError("unknown model config key '" + kv.begin()->first + "'");
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Per-layer head activation: layers[l][h] == 1 keeps head h of layer l.
struct HeadPattern {
  std::vector<std::vector<std::uint8_t>> layers;

  static HeadPattern all_ones(std::size_t num_layers, std::size_t num_heads) {
    return HeadPattern{std::vector<std::vector<std::uint8_t>>(num_layers,
                                                             std::vector<std::uint8_t>(num_heads, 1))};
  }

  std::size_t num_layers() const { return layers.size(); }
  std::size_t zeros_in(std::size_t layer) const {
    std::size_t n = 0;
    for (auto p : layers.at(layer)) n += p == 0;
    return n;
  }
  std::size_t total_zeros() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) n += zeros_in(l);
    return n;
  }
  bool all_active() const { return total_zeros() == 0; }

  // FNV-1a over the layout and bits.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](std::uint64_t v) {
      h ^= v;
      h *= 1099511628211ULL;
    };
    mix(layers.size());
    for (const auto& row : layers) {
      mix(row.size());
      for (auto p : row) mix(p);
    }
    return h;
  }

  void check(std::size_t num_layers, std::size_t num_heads) const {
    if (layers.size() != num_layers)
      throw ConfigError("pattern has " + std::to_string(layers.size()) + " layers, model has " +
                        std::to_string(num_layers));
    for (const auto& row : layers) {
      if (row.size() != num_heads)
        throw ConfigError("pattern row has " + std::to_string(row.size()) + " entries, expected " +
                          std::to_string(num_heads));
      for (auto p : row)
        if (p > 1) throw ConfigError("pattern entries must be 0 or 1");
    }
  }

  bool operator==(const HeadPattern&) const = default;
};

}  // namespace heartlora
