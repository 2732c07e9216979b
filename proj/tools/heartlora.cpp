// SPDX-License-Identifier: Apache-2.0
// heartlora: pretrain a tiny ViT backbone, adapt it with head-masked LoRA,
// score, evaluate, sweep, compare and export.
//
// Every invocation writes a fresh run directory
//   $HEARTLORA_RUN_DIR/<run_name>/<subcommand>/
// holding config.txt, record.jsonl (training commands) and its outputs.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "heartlora/checkpoint.hpp"
#include "heartlora/config.hpp"
#include "heartlora/export.hpp"
#include "heartlora/training.hpp"

namespace fs = std::filesystem;
using namespace heartlora;

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<bool> quantize;
  std::string criterion;
  std::string mode;
  std::string variant;
  std::string run_name;
  bool force = false;

  // subcommand specific
  std::string checkpoint;
  std::string split = "test";
  std::vector<std::size_t> ne_list{0, 1, 3, 5, 7, 9, 11};
  bool heatmap = false, attention = false, pattern = false;
  std::size_t sample = 0;
};

std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

fs::path run_root() {
  const char* env = std::getenv("HEARTLORA_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

RunConfig load_config(const Options& o) {
  RunConfig rc;
  if (!o.config_path.empty()) rc.parse_text(read_text(o.config_path));
  for (const auto& s : o.overrides) rc.apply_override(s);
  if (o.seed) rc.train.seed = *o.seed;
  if (o.quantize) rc.train.quantize = *o.quantize;
  if (!o.criterion.empty()) rc.train.criterion = o.criterion;
  if (!o.variant.empty()) {
    if (o.variant != "raw" && o.variant != "neg" && o.variant != "abs")
      throw ConfigError("--variant must be raw, neg or abs");
    rc.train.criterion = to_string(parse_criterion(o.variant));
  }
  if (!o.mode.empty()) rc.train.accumulation = parse_accumulation(o.mode);
  if (!o.run_name.empty()) rc.run_name = o.run_name;
  rc.validate();
  return rc;
}

fs::path command_dir(const RunConfig& rc, const std::string& command) {
  return run_root() / rc.run_name / command;
}

fs::path make_run_dir(RunConfig& rc, const std::string& command, bool force) {
  const auto dir = command_dir(rc, command);
  if (fs::exists(dir)) {
    if (!force) throw IoError("run directory '" + dir.string() + "' already exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  write_text((dir / "config.txt").string(), rc.to_text());
  return dir;
}

std::string backbone_path(const RunConfig& rc) {
  return rc.backbone_path.empty() ? (command_dir(rc, "pretrain") / "backbone.hlra").string() : rc.backbone_path;
}

BackboneWeights<float> load_backbone(const RunConfig& rc) {
  const auto ck = Checkpoint::load(backbone_path(rc));
  const auto pre = rc.pretrain_model();
  check_model_config(ck, pre);
  return get_backbone<float>(ck, pre);
}

std::string default_checkpoint(const RunConfig& rc) { return (command_dir(rc, "adapt") / "checkpoint.hlra").string(); }

void report(const std::string& line) { std::cout << line << std::endl; }

int cmd_pretrain(Options& o) {
  auto rc = load_config(o);
  const auto dir = make_run_dir(rc, "pretrain", o.force);
  const auto cfg = rc.pretrain_model();
  auto r = pretrain_backbone<float>(cfg, rc.pretrain, generate(rc.pretrain_spec()));
  Checkpoint ck;
  put_model_config(ck, cfg);
  put_backbone(ck, r.weights);
  ck.save((dir / "backbone.hlra").string());
  std::ofstream rec(dir / "record.jsonl");
  for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
    nlohmann::ordered_json j;
    j["epoch"] = e;
    j["phase"] = "pretrain";
    j["train_loss"] = r.train_loss[e];
    j["val_accuracy"] = r.val_accuracy[e];
    rec << j.dump() << "\n";
  }
  report("pretrain: val_accuracy=" + format_g9(r.val_accuracy.back()) + " backbone=" +
         (dir / "backbone.hlra").string());
  return 0;
}

void save_adaptation(const fs::path& dir, RunConfig rc, const ModelConfig& cfg,
                     const AdaptationResult<float>& r) {
  Checkpoint ck;
  put_model_config(ck, cfg);
  ck.put_text("meta/run_config", rc.to_text());
  ck.put_text("meta/criterion", r.criterion);
  put_trainer_state(ck, r.state);
  put_pattern(ck, r.pattern);
  ck.save((dir / "checkpoint.hlra").string());
  Checkpoint merged;
  put_model_config(merged, cfg);
  put_stored_adapters(merged, merge_for_storage(r.state.adapters, r.pattern, cfg.num_heads));
  merged.save((dir / "adapters_merged.hlra").string());
  write_text((dir / "record.jsonl").string(), run_record_jsonl(r.state.record));
  write_text((dir / "pattern.json").string(), pattern_json(r.pattern));
  export_responsiveness_csv(r.report, (dir / "responsiveness.csv").string());
}

int cmd_adapt(Options& o) {
  auto rc = load_config(o);
  auto backbone = load_backbone(rc);
  const auto dir = make_run_dir(rc, "adapt", o.force);
  const auto cfg = rc.adapt_model();
  DivergenceHook<float> hook = [&](const TrainerState<float>& good) {
    Checkpoint ck;
    put_model_config(ck, cfg);
    put_trainer_state(ck, good);
    ck.save((dir / "last_good.hlra").string());
  };
  auto r = run_adaptation(cfg, rc.train, backbone, generate(rc.data_spec()), hook);
  save_adaptation(dir, rc, cfg, r);
  std::ostringstream os;
  os << "adapt: criterion=" << r.criterion << " deactivated=" << r.pattern.total_zeros()
     << " fell_back=" << (r.fell_back ? "true" : "false") << " val_accuracy=" << format_g9(r.val.accuracy)
     << " test_accuracy=" << format_g9(r.test.accuracy);
  report(os.str());
  return 0;
}

struct Loaded {
  RunConfig rc;
  ModelConfig cfg;
  TrainerState<float> state;
  HeadPattern pattern;
};

Loaded load_adapted(const Options& o) {
  Loaded l;
  l.rc = load_config(o);
  const auto path = o.checkpoint.empty() ? default_checkpoint(l.rc) : o.checkpoint;
  const auto ck = Checkpoint::load(path);
  // The checkpoint's own run config decides model and data; flags still apply on top.
  auto saved = RunConfig::from_text(ck.get_text("meta/run_config"));
  for (const auto& s : o.overrides) saved.apply_override(s);
  saved.run_name = l.rc.run_name;
  l.rc = saved;
  l.cfg = l.rc.adapt_model();
  check_model_config(ck, l.cfg);
  l.state = get_trainer_state<float>(ck, l.cfg);
  l.pattern = get_pattern(ck, l.cfg);
  return l;
}

int cmd_score(Options& o) {
  auto l = load_adapted(o);
  const auto crit = parse_criterion(!o.variant.empty() ? o.variant
                                    : !o.criterion.empty() ? o.criterion
                                                           : std::string("taylor_raw"));
  const auto mode = o.mode.empty() ? l.rc.train.accumulation : parse_accumulation(o.mode);
  const auto dir = make_run_dir(l.rc, "score", o.force);
  auto rep = responsiveness_report(l.state, l.cfg, crit, mode, l.rc.train.reduction);
  export_responsiveness_csv(rep, (dir / "responsiveness.csv").string());
  const auto sel = select_deactivation_set(rep, {l.rc.train.ne, l.rc.train.ratio});
  write_text((dir / "pattern.json").string(), pattern_json(sel));
  report("score: criterion=" + to_string(crit) + " mode=" + to_string(mode) + " rows=" +
         std::to_string(rep.scores.size()) + " csv=" + (dir / "responsiveness.csv").string());
  return 0;
}

int cmd_eval(Options& o) {
  auto l = load_adapted(o);
  const auto data = generate(l.rc.data_spec());
  const auto r = evaluate(l.cfg, l.state.model, &l.state.adapters, &l.pattern, data.split(o.split));
  const auto dir = make_run_dir(l.rc, "eval", o.force);
  nlohmann::ordered_json j;
  j["split"] = o.split;
  j["accuracy"] = r.accuracy;
  j["loss"] = r.loss;
  j["count"] = r.count;
  write_text((dir / "eval.json").string(), j.dump(2) + "\n");
  report("eval: split=" + o.split + " accuracy=" + format_g9(r.accuracy) + " loss=" + format_g9(r.loss));
  return 0;
}

int cmd_sweep(Options& o) {
  auto rc = load_config(o);
  auto backbone = load_backbone(rc);
  const auto dir = make_run_dir(rc, "sweep", o.force);
  const auto cfg = rc.adapt_model();
  std::vector<AdaptationResult<float>> results;
  const auto rows = sweep_ne(cfg, rc.train, backbone, generate(rc.data_spec()), o.ne_list, &results);
  std::string csv = "method,ne,criterion,warmup_loss,val_accuracy,test_accuracy,deactivated,value_path_flops\n";
  for (const auto& r : rows)
    csv += r.method + "," + std::to_string(r.ne) + "," + r.criterion + "," + format_g9(r.warmup_loss) + "," +
           format_g9(r.val_accuracy) + "," + format_g9(r.test_accuracy) + "," + std::to_string(r.deactivated) +
           "," + std::to_string(r.value_path_flops) + "\n";
  write_text((dir / "sweep.csv").string(), csv);
  std::string jsonl;
  for (std::size_t i = 0; i < results.size(); ++i)
    for (const auto& e : results[i].state.record.epochs) {
      auto j = nlohmann::ordered_json::parse(epoch_record_json(e));
      j["ne"] = rows[i].ne;
      jsonl += j.dump() + "\n";
    }
  write_text((dir / "record.jsonl").string(), jsonl);
  std::cout << csv;
  return 0;
}

int cmd_compare(Options& o) {
  auto rc = load_config(o);
  auto backbone = load_backbone(rc);
  const auto dir = make_run_dir(rc, "compare", o.force);
  const auto rows = compare_methods(rc.adapt_model(), rc.train, backbone, generate(rc.data_spec()));
  std::string csv = "method,ne,warmup_loss_int8,test_accuracy_int8,warmup_loss_fp32,test_accuracy_fp32\n";
  for (const auto& r : rows)
    csv += r.method + "," + std::to_string(r.ne) + "," + format_g9(r.warmup_loss_int8) + "," +
           format_g9(r.test_accuracy_int8) + "," + format_g9(r.warmup_loss_fp32) + "," +
           format_g9(r.test_accuracy_fp32) + "\n";
  write_text((dir / "compare.csv").string(), csv);
  std::cout << csv;
  return 0;
}

// Layer x head score grid as a greyscale image, min -> 0, max -> 255.
std::vector<std::uint8_t> heatmap_pgm(const std::vector<std::vector<double>>& s) {
  const auto rows = s.size(), cols = s.at(0).size();
  const std::string header = "P5 " + std::to_string(cols) + " " + std::to_string(rows) + " 255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  double lo = s[0][0], hi = s[0][0];
  for (const auto& r : s)
    for (auto v : r) lo = std::min(lo, v), hi = std::max(hi, v);
  for (const auto& r : s)
    for (auto v : r)
      out.push_back(hi > lo ? static_cast<std::uint8_t>(std::lround((v - lo) / (hi - lo) * 255.0)) : 0);
  return out;
}

int cmd_export(Options& o) {
  if (!o.heatmap && !o.attention && !o.pattern) throw ConfigError("export needs --heatmap, --attention or --pattern");
  auto l = load_adapted(o);
  const auto dir = make_run_dir(l.rc, "export", o.force);
  if (o.pattern) write_text((dir / "pattern.json").string(), pattern_json(l.pattern));
  if (o.heatmap) {
    const auto crit = parse_criterion(!o.variant.empty() ? o.variant
                                      : !o.criterion.empty() ? o.criterion
                                                             : std::string("taylor_raw"));
    auto rep = responsiveness_report(l.state, l.cfg, crit, Accumulation::per_layer, l.rc.train.reduction);
    export_responsiveness_csv(rep, (dir / "heatmap.csv").string());
    write_file((dir / "heatmap.pgm").string(), heatmap_pgm(rep.scores));
  }
  if (o.attention) {
    const auto data = generate(l.rc.data_spec());
    const auto& split = data.split(o.split);
    if (o.sample >= split.count) throw IndexError("sample " + std::to_string(o.sample) + " outside split");
    const std::vector<std::size_t> idx{o.sample};
    auto [image, labels] = make_batch<float>(split, idx);
    const auto maps = attention_maps<float>(l.cfg, l.state.model, &l.state.adapters, &l.pattern, image);
    fs::create_directories(dir / "attention");
    export_attention_maps(maps, (dir / "attention" / "").string());
  }
  report("export: dir=" + dir.string());
  return 0;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config_path, "Run configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", o.overrides, "Override a config value, section.key=value");
  app->add_option("--seed", o.seed, "Training seed");
  app->add_flag_function(
      "--quantize,!--no-quantize", [&o](std::int64_t n) { o.quantize = n > 0; },
      "Int8 fake-quantized adapters (default on)");
  app->add_option("--criterion", o.criterion, "taylor_raw|taylor_negated|taylor_abs|weight_l2|grad_l2|taylor_auto");
  app->add_option("--mode", o.mode, "Accumulation mode: global|per_layer|grouped");
  app->add_option("--variant", o.variant, "Taylor sign variant: raw|neg|abs");
  app->add_option("--run", o.run_name, "Run name (directory under $HEARTLORA_RUN_DIR)");
  app->add_flag("--force", o.force, "Overwrite an existing run directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head-masked LoRA on a tiny vision transformer"};
  app.require_subcommand(1);
  Options o;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the backbone on the pre-task");
  auto* adapt = app.add_subcommand("adapt", "Warm-up, score heads, mask, continue");
  auto* score = app.add_subcommand("score", "Recompute head responsiveness from an adapt checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate an adapt checkpoint");
  auto* sweep = app.add_subcommand("sweep", "One continuation per ne from a shared warm-up");
  auto* compare = app.add_subcommand("compare", "Heart vs front-k vs plain LoRA, int8 and fp32");
  auto* exp = app.add_subcommand("export", "Write heatmap, attention maps or pattern");
  for (auto* s : {pretrain, adapt, score, eval, sweep, compare, exp}) add_common(s, o);
  for (auto* s : {score, eval, exp}) s->add_option("checkpoint", o.checkpoint, "Adapt checkpoint (.hlra)");
  for (auto* s : {eval, exp}) s->add_option("--split", o.split, "train|val|test");
  sweep->add_option("--ne", o.ne_list, "Comma-separated ne values")->delimiter(',');
  exp->add_flag("--heatmap", o.heatmap, "Per-layer responsiveness CSV and PGM");
  exp->add_flag("--attention", o.attention, "CLS attention maps for one sample");
  exp->add_flag("--pattern", o.pattern, "Head pattern JSON");
  exp->add_option("--sample", o.sample, "Sample index for --attention");

  try {
    app.parse(argc, argv);
    if (*pretrain) return cmd_pretrain(o);
    if (*adapt) return cmd_adapt(o);
    if (*score) return cmd_score(o);
    if (*eval) return cmd_eval(o);
    if (*sweep) return cmd_sweep(o);
    if (*compare) return cmd_compare(o);
    return cmd_export(o);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: kind=usage message=" << std::quoted(std::string(e.what())) << std::endl;
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: kind=" << e.kind() << " message=" << std::quoted(std::string(e.what())) << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: kind=internal message=" << std::quoted(std::string(e.what())) << std::endl;
    return 1;
  }
}
