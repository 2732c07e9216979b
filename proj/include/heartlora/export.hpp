// SPDX-License-Identifier: Apache-2.0
#pragma once

// Text and image exports: responsiveness CSV, head-pattern JSON, per-epoch
// run records, and CLS attention maps as CSV grids and binary PGM images.

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "heartlora/binary.hpp"
#include "heartlora/model.hpp"
#include "heartlora/responsiveness.hpp"
#include "heartlora/training.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

inline std::string format_g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// One row per (layer, head), layer-major. A globally accumulated report has a
// single row whose layer column reads "global".
inline std::string responsiveness_csv(const ResponsivenessReport& r) {
  std::string out = "layer,head,score,criterion,mode\n";
  const auto crit = to_string(r.criterion), mode = to_string(r.mode);
  for (std::size_t l = 0; l < r.scores.size(); ++l)
    for (std::size_t h = 0; h < r.scores[l].size(); ++h) {
      out += r.mode == Accumulation::global ? std::string("global") : std::to_string(l);
      out += "," + std::to_string(h) + "," + format_g9(r.scores[l][h]) + "," + crit + "," + mode + "\n";
    }
  return out;
}

inline void export_responsiveness_csv(const ResponsivenessReport& r, const std::string& path) {
  write_text(path, responsiveness_csv(r));
}

// Score matrix back from responsiveness_csv output.
inline std::vector<std::vector<double>> parse_responsiveness_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "layer,head,score,criterion,mode")
    throw ParseError("responsiveness CSV header missing", 0);
  std::vector<std::vector<double>> scores;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw ParseError("responsiveness CSV row needs 5 fields", offset);
    const std::size_t layer = f[0] == "global" ? 0 : std::stoul(f[0]);
    const std::size_t head = std::stoul(f[1]);
    if (layer >= scores.size()) scores.resize(layer + 1);
    if (head != scores[layer].size()) throw ParseError("responsiveness CSV rows out of order", offset);
    scores[layer].push_back(std::stod(f[2]));
    offset += line.size() + 1;
  }
  return scores;
}

// {"0":[1,0,...],"1":[...]}
inline std::string pattern_json(const HeadPattern& p) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& row = j[std::to_string(l)] = nlohmann::ordered_json::array();
    for (auto v : p.layers[l]) row.push_back(static_cast<int>(v));
  }
  return j.dump() + "\n";
}

inline HeadPattern parse_pattern_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("pattern JSON: ") + e.what(), e.byte);
  }
  if (!j.is_object()) throw ParseError("pattern JSON must be an object", 0);
  HeadPattern p;
  p.layers.resize(j.size());
  for (auto& [key, row] : j.items()) {
    const auto l = std::stoul(key);
    if (l >= p.layers.size() || !row.is_array()) throw ParseError("pattern JSON layer keys must be 0..n-1", 0);
    for (auto& v : row) {
      const int x = v.get<int>();
      if (x != 0 && x != 1) throw ParseError("pattern entries must be 0 or 1", 0);
      p.layers[l].push_back(static_cast<std::uint8_t>(x));
    }
  }
  return p;
}

inline std::string epoch_record_json(const EpochRecord& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["phase"] = e.phase;
  j["train_loss"] = e.train_loss;
  j["val_accuracy"] = e.val_accuracy;
  j["pattern_hash"] = e.pattern_hash;
  j["active_heads"] = e.active_heads;
  j["trainable_params"] = e.trainable_params;
  j["value_path_flops"] = e.value_path_flops;
  j["wall_ms"] = e.wall_ms;
  return j.dump();
}

// Line-delimited: one JSON object per epoch.
inline std::string run_record_jsonl(const RunRecord& r) {
  std::string out;
  for (const auto& e : r.epochs) out += epoch_record_json(e) + "\n";
  return out;
}

struct AttentionMaps {
  std::size_t grid = 0;
  std::vector<std::vector<double>> maps;   // per layer, grid*grid, row-major
  std::vector<std::uint8_t> all_masked;    // per layer: 1 when every head was off
};

// CLS-query attention over the patch tokens of a single image, averaged over
// the heads that are active in each layer.
template <typename T>
AttentionMaps attention_maps(const ModelConfig& cfg, const BackboneWeights<T>& w, const AdapterSet<T>* adapters,
                             const HeadPattern* pattern, const Tensor<T>& image) {
  if (image.ndim() != 4 || image.shape[0] != 1) throw DimensionError("attention maps need exactly one image");
  AttentionCapture<T> cap;
  ForwardOptions<T> opt;
  opt.adapters = adapters;
  opt.pattern = pattern;
  opt.capture = &cap;
  Graph<T> g(GradMode::off);
  model_forward(g, cfg, w, image, opt);
  const auto t = cfg.tokens(), nh = cfg.num_heads, np = cfg.num_patches();
  AttentionMaps out;
  out.grid = cfg.grid();
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    std::vector<double> m(np, 0.0);
    std::size_t active = 0;
    for (std::size_t h = 0; h < nh; ++h) {
      if (pattern && !pattern->layers[l][h]) continue;
      ++active;
      const T* row = cap.probs[l].data() + h * t * t;  // query row 0 is the CLS token
      for (std::size_t j = 0; j < np; ++j) m[j] += static_cast<double>(row[1 + j]);
    }
    if (active)
      for (auto& v : m) v /= static_cast<double>(active);
    out.maps.push_back(std::move(m));
    out.all_masked.push_back(active == 0);
  }
  return out;
}

inline std::string attention_csv(const std::vector<double>& map, std::size_t grid) {
  std::string out;
  for (std::size_t y = 0; y < grid; ++y) {
    for (std::size_t x = 0; x < grid; ++x) {
      if (x) out += ",";
      out += format_g9(map.at(y * grid + x));
    }
    out += "\n";
  }
  return out;
}

// Binary greyscale image scaled so the largest weight maps to 255.
inline std::vector<std::uint8_t> attention_pgm(const std::vector<double>& map, std::size_t grid) {
  const std::string header = "P5 " + std::to_string(grid) + " " + std::to_string(grid) + " 255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  double peak = 0;
  for (auto v : map) peak = std::max(peak, v);
  for (std::size_t i = 0; i < grid * grid; ++i)
    out.push_back(peak > 0 ? static_cast<std::uint8_t>(std::lround(std::clamp(map.at(i) / peak, 0.0, 1.0) * 255.0))
                           : std::uint8_t{0});
  return out;
}

// Writes <prefix>layer<l>.csv / .pgm for every layer plus <prefix>meta.json.
inline void export_attention_maps(const AttentionMaps& maps, const std::string& prefix) {
  nlohmann::ordered_json meta;
  meta["grid"] = maps.grid;
  meta["layers"] = maps.maps.size();
  meta["all_masked_layers"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < maps.maps.size(); ++l) {
    write_text(prefix + "layer" + std::to_string(l) + ".csv", attention_csv(maps.maps[l], maps.grid));
    write_file(prefix + "layer" + std::to_string(l) + ".pgm", attention_pgm(maps.maps[l], maps.grid));
    if (maps.all_masked[l]) meta["all_masked_layers"].push_back(l);
  }
  meta["warning"] = !meta["all_masked_layers"].empty();
  write_text(prefix + "meta.json", meta.dump(2) + "\n");
}

// 0 when either vector is all zeros.
inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0;
}

inline std::vector<double> attention_similarity(const AttentionMaps& a, const AttentionMaps& b) {
  if (a.maps.size() != b.maps.size()) throw DimensionError("attention maps differ in layer count");
  std::vector<double> out;
  for (std::size_t l = 0; l < a.maps.size(); ++l) out.push_back(cosine_similarity(a.maps[l], b.maps[l]));
  return out;
}

}  // namespace heartlora
