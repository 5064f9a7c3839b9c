#pragma once

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <filesystem>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include "semgan/checkpoint.hpp"
#include "semgan/config.hpp"
#include "semgan/eval.hpp"
#include "semgan/pipeline.hpp"
#include "semgan/scenegen.hpp"

#ifndef SEMGAN_VERSION
#define SEMGAN_VERSION "unknown"
#endif

namespace semgan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Stable process exit codes.
enum Exit : int { ok = 0, failure = 1, validation = 2, stage_order = 3, data_integrity = 4 };

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& flag) {
  std::vector<T> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, end - start);
    if (!item.empty()) {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(item, &used);
        if (used != item.size() || v < 0) throw std::invalid_argument(item);
        out.push_back(static_cast<T>(v));
      } catch (const std::exception&) {
        throw data::ValidationError(flag + ": bad entry '" + item + "'");
      }
    }
    start = end + 1;
  }
  return out;
}

/// Run directory bookkeeping: resolved config, version string, and a
/// completion marker that --resume consults.
class RunDir {
 public:
  RunDir(fs::path dir, const config::RunConfig& cfg, std::string stage, json inputs)
      : dir_(std::move(dir)), stage_(std::move(stage)) {
    config_text_ = config::dump(cfg);
    inputs_ = std::move(inputs);
    key_ = io::sha256(config_text_ + inputs_.dump() + stage_);
  }

  [[nodiscard]] const fs::path& path() const { return dir_; }

  /// True when a completed run with the same config and inputs is present.
  [[nodiscard]] bool complete() const {
    const auto marker = dir_ / "stage.json";
    if (!fs::exists(marker)) return false;
    const auto j = json::parse(io::read_file(marker), nullptr, false);
    return !j.is_discarded() && j.value("run_key", "") == key_;
  }

  void begin() const {
    fs::create_directories(dir_);
    fs::remove(dir_ / "stage.json");
    io::write_file(dir_ / "config.yaml", config_text_);
    io::write_file(dir_ / "VERSION", std::string(SEMGAN_VERSION) + "\n");
  }

  void finish(json outputs) const {
    json m{{"stage", stage_}, {"run_key", key_}, {"version", SEMGAN_VERSION}, {"inputs", inputs_},
           {"outputs", std::move(outputs)}};
    io::write_file(dir_ / "stage.json", m.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  std::string stage_;
  std::string config_text_;
  json inputs_;
  std::string key_;
};

inline json checkpoint_record(const fs::path& path, const nets::NetworkHandle<float>& h) {
  return {{"path", path.string()}, {"parameter_hash", checkpoint::parameter_hash(h)}, {"provenance", h.provenance}};
}

inline fs::path default_out(const config::RunConfig& cfg, const std::string& out, const std::string& name) {
  return out.empty() ? fs::path(cfg.output_root) / name : fs::path(out);
}

inline void require_dir(const std::string& dir, const std::string& flag) {
  if (dir.empty()) throw data::ValidationError(flag + ": required");
  if (!fs::is_directory(dir)) throw data::ValidationError(flag + ": no dataset at " + dir);
}

inline nets::NetworkHandle<float> load_kind(const std::string& path, nets::NetKind kind, const std::string& flag) {
  if (path.empty()) throw data::ValidationError(flag + ": required");
  auto h = checkpoint::load(path);
  if (h.arch.kind != kind) {
    throw data::ValidationError(fmt::format("{}: expected a {} checkpoint, got {}", flag, nets::to_string(kind),
                                            nets::to_string(h.arch.kind)));
  }
  return h;
}

}  // namespace detail

/// Entry point shared by the binary and the tests. Returns the exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Semantically constrained CycleGAN toolkit for sim-to-real fruit detection", "semgan"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", SEMGAN_VERSION);
  std::string config_path;
  std::vector<std::string> sets;
  std::string output_root;
  bool quiet = false;
  bool resume = false;
  app.add_option("-c,--config", config_path, "YAML config file");
  app.add_option("--set", sets, "Override a config field: key.path=value")->take_all();
  app.add_option("--output-root", output_root, "Root for default run directories");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");
  app.add_flag("--resume", resume, "Skip a stage whose run directory already holds a matching completed run");

  std::string style = "synthetic", out_dir, source, target, test, valid, train, detector, generator, checkpoint_path,
              mode = "generated", k_list, methods, seeds;
  int count = 100;
  long long seed = -1;
  int jobs = 1;
  bool curves = false;

  auto* gen = app.add_subcommand("gen", "Render a procedural dataset");
  gen->add_option("--style", style, "synthetic, day_like or night_like");
  gen->add_option("--count", count, "Number of images");
  gen->add_option("--out", out_dir, "Output dataset directory")->required();
  gen->add_option("--seed", seed, "Base seed (image i uses seed + i)");

  auto* pre = app.add_subcommand("pretrain", "Train the source-domain detector");
  pre->add_option("--source", source, "Labeled source dataset");
  pre->add_option("--out", out_dir, "Run directory");
  pre->add_option("--seed", seed, "Training seed");

  auto* fin = app.add_subcommand("finetune", "Fine-tune a detector (embed on real labels, or on generated images)");
  fin->add_option("--detector", detector, "Parent detector checkpoint");
  fin->add_option("--train", train, "Labeled training dataset");
  fin->add_option("--valid", valid, "Labeled real target validation dataset");
  fin->add_option("--mode", mode, "embed or generated")->check(CLI::IsMember({"embed", "generated"}));
  fin->add_option("--out", out_dir, "Run directory");
  fin->add_option("--seed", seed, "Training seed");

  auto* tg = app.add_subcommand("train-gan", "Train the generators and discriminators");
  tg->add_option("--detector", detector, "Frozen target-domain detector checkpoint");
  tg->add_option("--source", source, "Labeled source dataset");
  tg->add_option("--target", target, "Target dataset (labels ignored)");
  tg->add_option("--out", out_dir, "Run directory");
  tg->add_option("--seed", seed, "Training seed");

  auto* tr = app.add_subcommand("translate", "Map a source dataset through G_A");
  tr->add_option("--generator", generator, "G_A checkpoint");
  tr->add_option("--source", source, "Source dataset");
  tr->add_option("--out", out_dir, "Output dataset directory");

  auto* ev = app.add_subcommand("eval", "AP@0.3 / AP@0.5 of a detector on a test set");
  ev->add_option("--checkpoint", checkpoint_path, "Detector checkpoint");
  ev->add_option("--test", test, "Labeled test dataset");
  ev->add_option("--out", out_dir, "Write the JSON report here as well");
  ev->add_flag("--curves", curves, "Include precision-recall curves");

  auto* ex = app.add_subcommand("experiment", "Incremental-label experiment over k, methods and seeds");
  ex->add_option("--k-list", k_list, "Comma-separated k values");
  ex->add_option("--methods", methods, "Comma-separated methods");
  ex->add_option("--seeds", seeds, "Comma-separated seeds");
  ex->add_option("--source", source, "Labeled source dataset");
  ex->add_option("--target", target, "Labeled target pool");
  ex->add_option("--test", test, "Labeled target test set");
  ex->add_option("--out", out_dir, "Run directory");
  ex->add_option("--jobs", jobs, "Seeds trained in parallel")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return Exit::ok;
  } catch (const CLI::CallForVersion& e) {
    out << SEMGAN_VERSION << "\n";
    return Exit::ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return Exit::validation;
  }

  const pipeline::Logger log = [&](const std::string& m) {
    if (!quiet) err << m << std::endl;
  };

  try {
    config::RunConfig cfg = config::resolve(config_path, sets);
    if (!output_root.empty()) cfg.output_root = output_root;
    if (seed >= 0) {
      cfg.seeds = {static_cast<std::uint64_t>(seed)};
      cfg.scene.seed = static_cast<std::uint64_t>(seed);
    }
    cfg.train.seed = cfg.seeds.front();

    if (*gen) {
      if (count <= 0) throw data::ValidationError(fmt::format("count: must be >= 1, got {}", count));
      scenegen::SceneSpec spec = cfg.scene;
      spec.style = cfg.style(style);
      const auto m = scenegen::generate_dataset(spec, count, out_dir);
      out << fmt::format("wrote {} {} images to {}\n", m.entries.size(), style, out_dir);
      return Exit::ok;
    }

    if (*pre) {
      if (source.empty()) source = cfg.source_dir;
      detail::require_dir(source, "--source");
      detail::RunDir run(detail::default_out(cfg, out_dir, "pretrain"), cfg, "pretrain",
                         {{"source", fs::absolute(source).string()}, {"seed", cfg.train.seed}});
      if (resume && run.complete()) {
        out << "pretrain: up to date in " << run.path().string() << "\n";
        return Exit::ok;
      }
      run.begin();
      const auto src = data::load_domain(source, true);
      const auto r = pipeline::pretrain_detector(src, cfg.train, log);
      const auto ck = run.path() / "detector.ckpt";
      checkpoint::save(ck, r.model);
      json curve = json::array();
      for (const auto& p : r.curve) curve.push_back({{"step", p.step}, {"train_loss", p.train_loss}, {"valid_loss", p.valid_loss}});
      io::write_file(run.path() / "curve.json", curve.dump(1) + "\n");
      run.finish({{"detector", detail::checkpoint_record(ck, r.model)}, {"best_step", r.best_step}});
      out << fmt::format("pretrain: best step {} valid loss {:.5f} -> {}\n", r.best_step, r.best_valid_loss, ck.string());
      return Exit::ok;
    }

    if (*fin) {
      auto parent = detail::load_kind(detector, nets::NetKind::detector, "--detector");
      detail::require_dir(train, "--train");
      if (mode == "embed" && valid.empty()) throw data::ValidationError("--valid: required with --mode embed");
      if (!valid.empty()) detail::require_dir(valid, "--valid");
      detail::RunDir run(detail::default_out(cfg, out_dir, "finetune"), cfg, "finetune_" + mode,
                         {{"detector", checkpoint::parameter_hash(parent)}, {"train", fs::absolute(train).string()},
                          {"valid", valid.empty() ? "" : fs::absolute(valid).string()}, {"seed", cfg.train.seed}});
      if (resume && run.complete()) {
        out << "finetune: up to date in " << run.path().string() << "\n";
        return Exit::ok;
      }
      const auto tr_set = data::load_domain(train, true);
      const auto va_set = valid.empty() ? data::Dataset{} : data::load_domain(valid, true);
      // Check stage order before touching the run directory.
      if (mode == "embed") {
        pipeline::require_stage(parent, "pretrain", "finetune --mode embed");
      } else {
        pipeline::require_stage(parent, va_set.empty() ? "pretrain" : "embed", "finetune");
      }
      run.begin();
      const auto r = mode == "embed" ? pipeline::embed_domain_knowledge(parent, tr_set, va_set, cfg.train, log)
                                     : pipeline::finetune_on_generated(parent, tr_set, va_set, cfg.train, log);
      const auto ck = run.path() / "detector.ckpt";
      checkpoint::save(ck, r.model);
      run.finish({{"detector", detail::checkpoint_record(ck, r.model)}, {"best_step", r.best_step}});
      out << fmt::format("finetune ({}): best step {} valid loss {:.5f} -> {}\n", mode, r.best_step, r.best_valid_loss,
                         ck.string());
      return Exit::ok;
    }

    if (*tg) {
      auto t_b = detail::load_kind(detector, nets::NetKind::detector, "--detector");
      if (source.empty()) source = cfg.source_dir;
      if (target.empty()) target = cfg.target_dir;
      detail::require_dir(source, "--source");
      detail::require_dir(target, "--target");
      if (t_b.trainable) {
        throw pipeline::StageOrderError("train-gan: detector checkpoint is marked trainable; expected a frozen embed output");
      }
      if (cfg.train.gan.weights.lambda_t != 0.0) pipeline::require_stage(t_b, "embed", "train-gan");
      detail::RunDir run(detail::default_out(cfg, out_dir, "train_gan"), cfg, "train_gan",
                         {{"detector", checkpoint::parameter_hash(t_b)}, {"source", fs::absolute(source).string()},
                          {"target", fs::absolute(target).string()}, {"seed", cfg.train.seed}});
      if (resume && run.complete()) {
        out << "train-gan: up to date in " << run.path().string() << "\n";
        return Exit::ok;
      }
      run.begin();
      const auto src = data::load_domain(source, cfg.train.gan.weights.lambda_t != 0.0);
      const auto tgt = data::unlabeled(data::load_domain(target, false));
      const auto r = pipeline::train_semgan(src, tgt, &t_b, cfg.train.gan, cfg.train.seed, run.path(), log);
      json outputs;
      for (const char* name : {"g_a", "g_b", "d_a", "d_b"}) {
        const auto ck = run.path() / "checkpoints" / (std::string(name) + ".ckpt");
        outputs[name] = detail::checkpoint_record(ck, checkpoint::load(ck));
      }
      outputs["detector_hash_before"] = r.task_hash_before;
      outputs["detector_hash_after"] = r.task_hash_after;
      run.finish(outputs);
      out << fmt::format("train-gan: {} steps in {:.0f}s -> {}\n", r.log.size(), r.seconds, run.path().string());
      return Exit::ok;
    }

    if (*tr) {
      auto g = detail::load_kind(generator, nets::NetKind::generator, "--generator");
      if (source.empty()) source = cfg.source_dir;
      detail::require_dir(source, "--source");
      if (out_dir.empty()) throw data::ValidationError("--out: required");
      const auto m = pipeline::translate_directory(g, source, out_dir);
      out << fmt::format("translated {} images to {}\n", m.at("entries").size(), out_dir);
      return Exit::ok;
    }

    if (*ev) {
      auto t = detail::load_kind(checkpoint_path, nets::NetKind::detector, "--checkpoint");
      if (test.empty()) test = cfg.test_dir;
      detail::require_dir(test, "--test");
      const auto ds = data::load_domain(test, true);
      const auto rep = eval::evaluate_model(t, ds, cfg.conf_threshold, cfg.nms_threshold);
      json j = rep.to_json(curves);
      j["checkpoint"] = checkpoint_path;
      j["parameter_hash"] = checkpoint::parameter_hash(t);
      j["test"] = test;
      const std::string text = j.dump(2) + "\n";
      if (!out_dir.empty()) io::write_file(out_dir, text);
      out << text;
      return Exit::ok;
    }

    if (*ex) {
      if (!k_list.empty()) cfg.k_list = detail::parse_list<int>(k_list, "--k-list");
      if (!methods.empty()) {
        cfg.methods.clear();
        std::size_t start = 0;
        while (start <= methods.size()) {
          const auto end = std::min(methods.find(',', start), methods.size());
          if (end > start) cfg.methods.push_back(pipeline::method_from_string(methods.substr(start, end - start)));
          start = end + 1;
        }
      }
      if (!seeds.empty()) cfg.seeds = detail::parse_list<std::uint64_t>(seeds, "--seeds");
      for (int k : cfg.k_list) data::split_schedule(k);
      cfg.validate();
      if (source.empty()) source = cfg.source_dir;
      if (target.empty()) target = cfg.target_dir;
      if (test.empty()) test = cfg.test_dir;
      detail::require_dir(source, "--source");
      detail::require_dir(target, "--target");
      detail::require_dir(test, "--test");
      detail::RunDir run(detail::default_out(cfg, out_dir, "experiment"), cfg, "experiment",
                         {{"source", fs::absolute(source).string()}, {"target", fs::absolute(target).string()},
                          {"test", fs::absolute(test).string()}});
      if (resume && run.complete()) {
        out << io::read_file(run.path() / "summary.md");
        return Exit::ok;
      }
      pipeline::ExperimentData d;
      d.source = data::load_domain(source, true);
      d.target = data::load_domain(target, true);
      d.test = data::load_domain(test, true);
      pipeline::audit_test_disjoint(d);
      run.begin();

      pipeline::ExperimentConfig ec;
      ec.k_list = cfg.k_list;
      ec.methods = cfg.methods;
      ec.train = cfg.train;
      ec.conf_threshold = cfg.conf_threshold;
      ec.nms_threshold = cfg.nms_threshold;
      ec.hue_band = cfg.hue_band;
      ec.out_dir = run.path();
      ec.write_results = false;
      // Seeds are independent legs; each writes only below seed_<n>/.
      std::vector<pipeline::ExperimentResult> parts(cfg.seeds.size());
      std::vector<std::future<void>> running;
      std::size_t next = 0;
      auto launch = [&](std::size_t i) {
        return std::async(std::launch::async, [&, i] {
          pipeline::ExperimentConfig one = ec;
          one.seeds = {cfg.seeds[i]};
          parts[i] = pipeline::run_incremental_experiment(d, one, log);
        });
      };
      while (next < parts.size() || !running.empty()) {
        while (next < parts.size() && static_cast<int>(running.size()) < jobs) running.push_back(launch(next++));
        running.front().get();
        running.erase(running.begin());
      }
      pipeline::ExperimentResult all;
      all.extras["semantic_consistency"] = json::array();
      all.extras["timing"] = json::array();
      for (const auto& p : parts) {
        all.rows.insert(all.rows.end(), p.rows.begin(), p.rows.end());
        for (const auto& key : {"semantic_consistency", "timing"}) {
          for (const auto& e : p.extras.at(key)) all.extras[key].push_back(e);
        }
      }
      all.extras["seeds"] = cfg.seeds;
      io::write_file(run.path() / "results.csv", all.to_csv());
      io::write_file(run.path() / "results.json", all.to_json().dump(2) + "\n");
      const std::string summary = all.to_markdown() + "\nMedian over seeds:\n\n" + pipeline::median_markdown(all.rows);
      io::write_file(run.path() / "summary.md", summary);
      run.finish({{"results", (run.path() / "results.csv").string()}, {"rows", all.rows.size()}});
      out << summary;
      return Exit::ok;
    }
  } catch (const pipeline::StageOrderError& e) {
    err << "stage-order error: " << e.what() << "\n";
    return Exit::stage_order;
  } catch (const pipeline::DataIntegrityError& e) {
    err << "data-integrity error: " << e.what() << "\n";
    return Exit::data_integrity;
  } catch (const std::logic_error& e) {
    // ValidationError derives from invalid_argument.
    err << "error: " << e.what() << "\n";
    return dynamic_cast<const std::invalid_argument*>(&e) ? Exit::validation : Exit::stage_order;
  } catch (const checkpoint::CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return Exit::validation;
  } catch (const data::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return Exit::validation;
  } catch (const data::DataError& e) {
    err << "error: " << e.what() << "\n";
    return Exit::validation;
  } catch (const io::ImageError& e) {
    err << "error: " << e.what() << "\n";
    return Exit::validation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return Exit::failure;
  }
  return Exit::failure;
}

}  // namespace semgan::cli
