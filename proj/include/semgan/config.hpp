#pragma once

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "semgan/eval.hpp"
#include "semgan/pipeline.hpp"
#include "semgan/scenegen.hpp"

namespace semgan::config {

using data::ValidationError;

/// Everything a run needs. Every field has a default; a YAML file overrides
/// the defaults, SEMGAN_OUTPUT_ROOT overrides the output root, and command
/// line `--set key.path=value` pairs override both.
struct RunConfig {
  std::string output_root = "runs";
  std::vector<std::uint64_t> seeds{1, 2, 3};

  // scenegen
  scenegen::SceneSpec scene;
  std::map<std::string, scenegen::DomainStyle> styles{
      {"synthetic", scenegen::DomainStyle::synthetic()},
      {"day_like", scenegen::DomainStyle::day_like()},
      {"night_like", scenegen::DomainStyle::night_like()}};

  // data paths
  std::string source_dir = "data/source";
  std::string target_dir = "data/target";
  std::string test_dir = "data/test";

  // nets, losses and pipeline hyperparameters
  pipeline::TrainConfig train;

  // experiment
  std::vector<int> k_list = data::default_k_list();
  std::vector<pipeline::Method> methods{pipeline::Method::pretrained, pipeline::Method::cyclegan,
                                        pipeline::Method::fine_tuned, pipeline::Method::semgan_fine_tuned};

  // eval
  double conf_threshold = 0.1;
  double nms_threshold = 0.45;
  eval::HueBand hue_band;

  void validate() const {
    if (seeds.empty()) throw ValidationError("seeds: empty");
    scene.validate();
    for (const auto& [name, s] : styles) {
      try {
        s.validate();
      } catch (const ValidationError& e) {
        throw ValidationError("scenegen.styles." + name + "." + e.what());
      }
    }
    train.validate();
    if (train.gan.generator.image_size != train.detector.image_size ||
        train.gan.discriminator.image_size != train.detector.image_size) {
      throw ValidationError("nets.image_size: networks disagree");
    }
    for (int k : k_list) data::split_schedule(k);
    if (methods.empty()) throw ValidationError("experiment.methods: empty");
    if (conf_threshold < 0.0 || conf_threshold > 1.0) throw ValidationError("eval.conf_threshold: outside [0,1]");
    if (nms_threshold < 0.0 || nms_threshold > 1.0) throw ValidationError("eval.nms_threshold: outside [0,1]");
  }

  [[nodiscard]] scenegen::DomainStyle style(const std::string& name) const {
    auto it = styles.find(name);
    if (it == styles.end()) throw ValidationError("style: unknown style '" + name + "'");
    return it->second;
  }
};

namespace detail {

inline YAML::Node rgb(const scenegen::Rgb& c) {
  YAML::Node n(YAML::NodeType::Sequence);
  for (double v : c) n.push_back(v);
  n.SetStyle(YAML::EmitterStyle::Flow);
  return n;
}

inline YAML::Node flow(YAML::Node n) {
  n.SetStyle(YAML::EmitterStyle::Flow);
  return n;
}

inline YAML::Node stage(const pipeline::DetectorStageConfig& c) {
  YAML::Node n;
  n["steps"] = c.steps;
  n["batch"] = c.batch;
  n["lr"] = c.lr;
  n["beta1"] = c.beta1;
  n["beta2"] = c.beta2;
  n["eval_every"] = c.eval_every;
  n["patience"] = c.patience;
  n["hflip"] = c.hflip;
  return n;
}

template <typename T>
T get(const YAML::Node& n, const std::string& key, const std::string& path) {
  const YAML::Node v = n[key];
  if (!v) throw ValidationError(path + key + ": missing");
  try {
    return v.as<T>();
  } catch (const YAML::Exception&) {
    throw ValidationError(path + key + ": bad value '" + YAML::Dump(v) + "'");
  }
}

inline pipeline::DetectorStageConfig read_stage(const YAML::Node& n, const std::string& path) {
  pipeline::DetectorStageConfig c;
  c.steps = get<int>(n, "steps", path);
  c.batch = get<int>(n, "batch", path);
  c.lr = get<double>(n, "lr", path);
  c.beta1 = get<double>(n, "beta1", path);
  c.beta2 = get<double>(n, "beta2", path);
  c.eval_every = get<int>(n, "eval_every", path);
  c.patience = get<int>(n, "patience", path);
  c.hflip = get<bool>(n, "hflip", path);
  return c;
}

inline scenegen::Rgb read_rgb(const YAML::Node& n, const std::string& path) {
  const auto v = n.as<std::vector<double>>();
  if (v.size() != 3) throw ValidationError(path + ": need 3 channels");
  return {v[0], v[1], v[2]};
}

/// Recursive overlay; keys absent from `base` are rejected so typos surface.
inline void merge(YAML::Node base, const YAML::Node& over, const std::string& path) {
  for (const auto& kv : over) {
    const std::string key = kv.first.as<std::string>();
    if (!base[key]) throw ValidationError("unknown config key '" + path + key + "'");
    YAML::Node target = base[key];
    if (kv.second.IsMap() && target.IsMap()) {
      merge(target, kv.second, path + key + ".");
    } else {
      base[key] = YAML::Clone(kv.second);
    }
  }
}

}  // namespace detail

inline YAML::Node to_yaml(const RunConfig& c) {
  using detail::flow;
  YAML::Node root;
  root["output_root"] = c.output_root;
  root["seeds"] = flow(YAML::Node(c.seeds));

  YAML::Node sg;
  sg["canvas_size"] = c.scene.canvas_size;
  sg["cluster_count"] = flow(YAML::Node(std::vector<int>{c.scene.cluster_count_range.lo, c.scene.cluster_count_range.hi}));
  sg["cluster_radius"] =
      flow(YAML::Node(std::vector<double>{c.scene.cluster_radius_range.lo, c.scene.cluster_radius_range.hi}));
  sg["berries_per_cluster"] = flow(
      YAML::Node(std::vector<int>{c.scene.berries_per_cluster_range.lo, c.scene.berries_per_cluster_range.hi}));
  for (const auto& [name, s] : c.styles) {
    YAML::Node st;
    YAML::Node pal(YAML::NodeType::Sequence);
    for (const auto& p : s.background_palette) pal.push_back(detail::rgb(p));
    st["background_palette"] = pal;
    st["brightness"] = s.brightness;
    st["noise_sigma"] = s.noise_sigma;
    st["vignette_strength"] = s.vignette_strength;
    st["texture_frequency"] = s.texture_frequency;
    st["berry_color"] = detail::rgb(s.berry_color);
    st["highlight"] = s.highlight;
    sg["styles"][name] = st;
  }
  root["scenegen"] = sg;

  root["data"]["source"] = c.source_dir;
  root["data"]["target"] = c.target_dir;
  root["data"]["test"] = c.test_dir;

  const auto& t = c.train;
  YAML::Node nets;
  nets["image_size"] = t.detector.image_size;
  nets["detector"]["base_width"] = t.detector.base_width;
  nets["detector"]["downsamples"] = t.detector.downsamples;
  nets["generator"]["base_width"] = t.gan.generator.base_width;
  nets["generator"]["res_blocks"] = t.gan.generator.res_blocks;
  nets["discriminator"]["base_width"] = t.gan.discriminator.base_width;
  nets["discriminator"]["down_layers"] = t.gan.discriminator.down_layers;
  root["nets"] = nets;

  root["losses"]["lambda_c"] = t.gan.weights.lambda_c;
  root["losses"]["lambda_i"] = t.gan.weights.lambda_i;
  root["losses"]["lambda_t"] = t.gan.weights.lambda_t;
  root["losses"]["adv_form"] = losses::to_string(t.gan.weights.adv_form);

  YAML::Node p;
  p["valid_fraction"] = t.valid_fraction;
  p["valid_count"] = t.valid_count;
  p["finetune_include_real"] = t.finetune_include_real;
  p["pretrain"] = detail::stage(t.pretrain);
  p["embed"] = detail::stage(t.embed);
  p["finetune"] = detail::stage(t.finetune);
  p["gan"]["steps"] = t.gan.steps;
  p["gan"]["lr"] = t.gan.lr;
  p["gan"]["beta1"] = t.gan.beta1;
  p["gan"]["beta2"] = t.gan.beta2;
  p["gan"]["pool_size"] = t.gan.pool_size;
  p["gan"]["batch"] = t.gan.batch;
  p["gan"]["sample_every"] = t.gan.sample_every;
  p["gan"]["checkpoint_every"] = t.gan.checkpoint_every;
  root["pipeline"] = p;

  root["experiment"]["k_list"] = flow(YAML::Node(c.k_list));
  std::vector<std::string> methods;
  for (auto m : c.methods) methods.push_back(pipeline::to_string(m));
  root["experiment"]["methods"] = flow(YAML::Node(methods));

  root["eval"]["conf_threshold"] = c.conf_threshold;
  root["eval"]["nms_threshold"] = c.nms_threshold;
  root["eval"]["hue_band"]["hue_lo"] = c.hue_band.hue_lo;
  root["eval"]["hue_band"]["hue_hi"] = c.hue_band.hue_hi;
  root["eval"]["hue_band"]["min_saturation"] = c.hue_band.sat_min;
  root["eval"]["hue_band"]["min_value"] = c.hue_band.val_min;
  return root;
}

inline RunConfig from_yaml(const YAML::Node& root) {
  using detail::get;
  RunConfig c;
  c.output_root = get<std::string>(root, "output_root", "");
  c.seeds = get<std::vector<std::uint64_t>>(root, "seeds", "");

  const auto sg = root["scenegen"];
  c.scene.canvas_size = get<int>(sg, "canvas_size", "scenegen.");
  auto pair_int = [&](const char* key) {
    const auto v = get<std::vector<int>>(sg, key, "scenegen.");
    if (v.size() != 2) throw ValidationError(std::string("scenegen.") + key + ": need [lo, hi]");
    return scenegen::IntRange{v[0], v[1]};
  };
  c.scene.cluster_count_range = pair_int("cluster_count");
  c.scene.berries_per_cluster_range = pair_int("berries_per_cluster");
  const auto rad = get<std::vector<double>>(sg, "cluster_radius", "scenegen.");
  if (rad.size() != 2) throw ValidationError("scenegen.cluster_radius: need [lo, hi]");
  c.scene.cluster_radius_range = {rad[0], rad[1]};
  c.styles.clear();
  for (const auto& kv : sg["styles"]) {
    const std::string name = kv.first.as<std::string>();
    const std::string path = "scenegen.styles." + name + ".";
    scenegen::DomainStyle s = scenegen::DomainStyle::preset(scenegen::style_from_string(name));
    const auto& n = kv.second;
    s.background_palette.clear();
    for (const auto& col : n["background_palette"]) s.background_palette.push_back(detail::read_rgb(col, path + "background_palette"));
    s.brightness = get<double>(n, "brightness", path);
    s.noise_sigma = get<double>(n, "noise_sigma", path);
    s.vignette_strength = get<double>(n, "vignette_strength", path);
    s.texture_frequency = get<double>(n, "texture_frequency", path);
    s.berry_color = detail::read_rgb(n["berry_color"], path + "berry_color");
    s.highlight = get<double>(n, "highlight", path);
    c.styles[name] = s;
  }

  c.source_dir = get<std::string>(root["data"], "source", "data.");
  c.target_dir = get<std::string>(root["data"], "target", "data.");
  c.test_dir = get<std::string>(root["data"], "test", "data.");

  const auto nets = root["nets"];
  const int size = get<int>(nets, "image_size", "nets.");
  auto& t = c.train;
  t.detector = nets::ArchConfig::detector(size, get<int>(nets["detector"], "base_width", "nets.detector."),
                                          get<int>(nets["detector"], "downsamples", "nets.detector."));
  t.gan.generator = nets::ArchConfig::generator(size, get<int>(nets["generator"], "base_width", "nets.generator."),
                                                get<int>(nets["generator"], "res_blocks", "nets.generator."));
  t.gan.discriminator =
      nets::ArchConfig::discriminator(size, get<int>(nets["discriminator"], "base_width", "nets.discriminator."),
                                      get<int>(nets["discriminator"], "down_layers", "nets.discriminator."));

  const auto l = root["losses"];
  t.gan.weights.lambda_c = get<double>(l, "lambda_c", "losses.");
  t.gan.weights.lambda_i = get<double>(l, "lambda_i", "losses.");
  t.gan.weights.lambda_t = get<double>(l, "lambda_t", "losses.");
  try {
    t.gan.weights.adv_form = losses::adv_form_from_string(get<std::string>(l, "adv_form", "losses."));
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("losses.adv_form: ") + e.what());
  }

  const auto p = root["pipeline"];
  t.valid_fraction = get<double>(p, "valid_fraction", "pipeline.");
  t.valid_count = get<int>(p, "valid_count", "pipeline.");
  t.finetune_include_real = get<bool>(p, "finetune_include_real", "pipeline.");
  t.pretrain = detail::read_stage(p["pretrain"], "pipeline.pretrain.");
  t.embed = detail::read_stage(p["embed"], "pipeline.embed.");
  t.finetune = detail::read_stage(p["finetune"], "pipeline.finetune.");
  const auto g = p["gan"];
  t.gan.steps = get<int>(g, "steps", "pipeline.gan.");
  t.gan.lr = get<double>(g, "lr", "pipeline.gan.");
  t.gan.beta1 = get<double>(g, "beta1", "pipeline.gan.");
  t.gan.beta2 = get<double>(g, "beta2", "pipeline.gan.");
  t.gan.pool_size = get<int>(g, "pool_size", "pipeline.gan.");
  t.gan.batch = get<int>(g, "batch", "pipeline.gan.");
  t.gan.sample_every = get<int>(g, "sample_every", "pipeline.gan.");
  t.gan.checkpoint_every = get<int>(g, "checkpoint_every", "pipeline.gan.");
  t.seed = c.seeds.front();

  const auto e = root["experiment"];
  c.k_list = get<std::vector<int>>(e, "k_list", "experiment.");
  c.methods.clear();
  for (const auto& m : get<std::vector<std::string>>(e, "methods", "experiment.")) {
    c.methods.push_back(pipeline::method_from_string(m));
  }

  const auto ev = root["eval"];
  c.conf_threshold = get<double>(ev, "conf_threshold", "eval.");
  c.nms_threshold = get<double>(ev, "nms_threshold", "eval.");
  c.hue_band.hue_lo = get<double>(ev["hue_band"], "hue_lo", "eval.hue_band.");
  c.hue_band.hue_hi = get<double>(ev["hue_band"], "hue_hi", "eval.hue_band.");
  c.hue_band.sat_min = get<double>(ev["hue_band"], "min_saturation", "eval.hue_band.");
  c.hue_band.val_min = get<double>(ev["hue_band"], "min_value", "eval.hue_band.");
  return c;
}

/// Applies one `key.path=value` override; the value is parsed as YAML.
inline void apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("--set: expected key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ValidationError("--set " + path + ": " + e.what());
  }
  YAML::Node overlay = value;
  std::string rest = path;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    parts.push_back(rest.substr(0, pos));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    YAML::Node wrap;
    wrap[*it] = overlay;
    overlay = wrap;
  }
  detail::merge(root, overlay, "");
}

/// Defaults, then `file` (if non-empty), then SEMGAN_OUTPUT_ROOT, then the
/// `--set` assignments in order.
inline RunConfig resolve(const std::filesystem::path& file, const std::vector<std::string>& sets = {}) {
  YAML::Node root = to_yaml(RunConfig{});
  if (!file.empty()) {
    if (!std::filesystem::exists(file)) throw ValidationError("config: no file at " + file.string());
    YAML::Node user;
    try {
      user = YAML::LoadFile(file.string());
    } catch (const YAML::Exception& e) {
      throw ValidationError("config: " + file.string() + ": " + e.what());
    }
    if (user.IsDefined() && !user.IsNull()) {
      if (!user.IsMap()) throw ValidationError("config: top level must be a mapping");
      detail::merge(root, user, "");
    }
  }
  if (const char* env = std::getenv("SEMGAN_OUTPUT_ROOT"); env && *env) root["output_root"] = std::string(env);
  for (const auto& s : sets) apply_override(root, s);
  RunConfig c = from_yaml(root);
  c.validate();
  return c;
}

inline std::string dump(const RunConfig& c) { return YAML::Dump(to_yaml(c)) + "\n"; }

}  // namespace semgan::config
