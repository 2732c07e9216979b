// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration text format.
//
//   file    := { line "\n" }
//   line    := blank | comment | section | setting
//   comment := "#" any
//   section := "[" name "]"
//   setting := key "=" value          (surrounding whitespace ignored)
//
// Keys are addressed as "section.key". Unknown sections or keys are errors.
// to_text() writes every field back in canonical form; parsing that text gives
// an equal configuration.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "heartlora/data.hpp"
#include "heartlora/error.hpp"
#include "heartlora/lora.hpp"
#include "heartlora/responsiveness.hpp"
#include "heartlora/training.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename U>
U parse_number(const std::string& key, const std::string& v) {
  U out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end || v.empty())
    throw ConfigError("value '" + v + "' for " + key + " is not a valid number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("value '" + v + "' for " + key + " is not a boolean");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

struct RunConfig {
  ModelConfig model;
  TrainPlan train = TrainPlan::desk_preset();
  SyntheticTaskSpec data;  // adaptation task
  SyntheticTaskSpec pretrain_data = [] {
    SyntheticTaskSpec s;
    s.family = MotifFamily::frequency;
    s.num_classes = 8;
    s.train = 1600;
    s.val = 200;
    s.test = 200;
    s.seed = 101;
    return s;
  }();
  PretrainPlan pretrain;
  std::string backbone_path;  // empty: <run_dir>/backbone.hlra
  std::string run_name = "run";

  struct Field {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  std::vector<Field> fields() {
    std::vector<Field> f;
    auto size = [&](std::string key, std::size_t& ref) {
      f.push_back({key, [&ref, key](const std::string& v) { ref = detail::parse_number<std::size_t>(key, v); },
                   [&ref] { return std::to_string(ref); }});
    };
    auto u64 = [&](std::string key, std::uint64_t& ref) {
      f.push_back({key, [&ref, key](const std::string& v) { ref = detail::parse_number<std::uint64_t>(key, v); },
                   [&ref] { return std::to_string(ref); }});
    };
    auto real = [&](std::string key, double& ref) {
      f.push_back({key, [&ref, key](const std::string& v) { ref = detail::parse_number<double>(key, v); },
                   [&ref] { return detail::fmt_double(ref); }});
    };
    auto flag = [&](std::string key, bool& ref) {
      f.push_back({key, [&ref, key](const std::string& v) { ref = detail::parse_bool(key, v); },
                   [&ref] { return std::string(ref ? "true" : "false"); }});
    };
    auto text = [&](std::string key, std::string& ref) {
      f.push_back({key, [&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }});
    };
    auto family = [&](std::string key, MotifFamily& ref) {
      f.push_back({key, [&ref](const std::string& v) { ref = parse_family(v); }, [&ref] { return to_string(ref); }});
    };

    size("model.image_size", model.image_size);
    size("model.patch_size", model.patch_size);
    size("model.channels", model.channels);
    size("model.embed_dim", model.embed_dim);
    size("model.num_heads", model.num_heads);
    size("model.num_layers", model.num_layers);
    size("model.mlp_ratio", model.mlp_ratio);
    flag("model.attn_bias", model.attn_bias);

    size("train.epochs", train.epochs);
    size("train.warmup_epochs", train.warmup_epochs);
    size("train.batch_size", train.batch_size);
    real("train.learning_rate", train.learning_rate);
    real("train.weight_decay", train.weight_decay);
    size("train.ne", train.ne);
    real("train.ratio", train.ratio);
    text("train.criterion", train.criterion);
    f.push_back({"train.accumulation", [this](const std::string& v) { train.accumulation = parse_accumulation(v); },
                 [this] { return to_string(train.accumulation); }});
    f.push_back({"train.reduction", [this](const std::string& v) { train.reduction = parse_reduction(v); },
                 [this] { return to_string(train.reduction); }});
    f.push_back({"train.targets", [this](const std::string& v) { train.targets = parse_targets(v); },
                 [this] { return targets_string(train.targets); }});
    real("train.scale", train.scale);
    size("train.rank", train.rank);
    flag("train.quantize", train.quantize);
    u64("train.seed", train.seed);
    f.push_back({"train.baseline", [this](const std::string& v) { train.baseline = parse_baseline(v); },
                 [this] { return to_string(train.baseline); }});
    flag("train.auto_fallback", train.auto_fallback);

    for (auto [prefix, spec] : {std::pair<const char*, SyntheticTaskSpec*>{"data", &data},
                                std::pair<const char*, SyntheticTaskSpec*>{"pretrain_data", &pretrain_data}}) {
      const std::string p = prefix;
      size(p + ".num_classes", spec->num_classes);
      size(p + ".train", spec->train);
      size(p + ".val", spec->val);
      size(p + ".test", spec->test);
      real(p + ".noise_std", spec->noise_std);
      u64(p + ".seed", spec->seed);
      family(p + ".family", spec->family);
    }

    size("pretrain.epochs", pretrain.epochs);
    size("pretrain.batch_size", pretrain.batch_size);
    real("pretrain.learning_rate", pretrain.learning_rate);
    real("pretrain.weight_decay", pretrain.weight_decay);
    u64("pretrain.seed", pretrain.seed);

    text("paths.backbone", backbone_path);
    text("paths.run_name", run_name);
    return f;
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& f : fields())
      if (f.key == key) return f.set(value);
    throw ConfigError("unknown config key '" + key + "'");
  }

  std::string get(const std::string& key) {
    for (auto& f : fields())
      if (f.key == key) return f.get();
    throw ConfigError("unknown config key '" + key + "'");
  }

  // "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
    set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
  }

  void parse_text(const std::string& text) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
        section = detail::trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": setting outside any section");
      try {
        set(section + "." + detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  static RunConfig from_text(const std::string& text) {
    RunConfig c;
    c.parse_text(text);
    return c;
  }

  std::string to_text() {
    std::string out, section;
    for (auto& f : fields()) {
      const auto dot = f.key.find('.');
      const auto s = f.key.substr(0, dot);
      if (s != section) {
        out += (section.empty() ? "[" : "\n[") + s + "]\n";
        section = s;
      }
      out += f.key.substr(dot + 1) + " = " + f.get() + "\n";
    }
    return out;
  }

  // Model config of the adaptation model (classifier sized for the adaptation task).
  ModelConfig adapt_model() const {
    auto m = model;
    m.num_classes = data.num_classes;
    return m;
  }

  // Same backbone, classifier sized for the pre-task.
  ModelConfig pretrain_model() const {
    auto m = model;
    m.num_classes = pretrain_data.num_classes;
    return m;
  }

  SyntheticTaskSpec data_spec() const {
    auto s = data;
    s.image_size = model.image_size;
    s.channels = model.channels;
    return s;
  }

  SyntheticTaskSpec pretrain_spec() const {
    auto s = pretrain_data;
    s.image_size = model.image_size;
    s.channels = model.channels;
    return s;
  }

  void validate() const {
    adapt_model().validate();
    train.validate();
    if (data.family == pretrain_data.family)
      throw ConfigError("pre-task and adaptation task must use different motif families");
  }
};

}  // namespace heartlora
