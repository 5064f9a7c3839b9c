#pragma once

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "semgan/checkpoint.hpp"
#include "semgan/core/random.hpp"
#include "semgan/data.hpp"
#include "semgan/eval.hpp"
#include "semgan/losses.hpp"
#include "semgan/nets.hpp"
#include "semgan/optim.hpp"

namespace semgan::pipeline {

using data::Dataset;
using data::LabeledImage;
using data::ValidationError;
using Net = nets::NetworkHandle<float>;
using json = nlohmann::json;

/// A stage was asked to consume a network that did not come out of the
/// required predecessor stage.
class StageOrderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training and test data overlap, or another audit failed.
class DataIntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Progress sink; the default discards messages.
using Logger = std::function<void(const std::string&)>;

inline void note(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

// ---- configuration ---------------------------------------------------------

struct DetectorStageConfig {
  int steps = 600;
  int batch = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int eval_every = 50;
  int patience = 0;  // evaluations without improvement before stopping; 0 disables
  bool hflip = true;

  void validate(const std::string& where) const {
    if (steps < 0) throw ValidationError(where + ".steps: must be >= 0");
    if (batch < 1) throw ValidationError(where + ".batch: must be >= 1");
    if (!(lr > 0.0)) throw ValidationError(where + ".lr: must be > 0");
    if (eval_every < 1) throw ValidationError(where + ".eval_every: must be >= 1");
    if (patience < 0) throw ValidationError(where + ".patience: must be >= 0");
  }
};

struct GanConfig {
  int steps = 1500;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int pool_size = 50;
  int batch = 1;
  losses::LossWeights weights;
  int sample_every = 500;
  int checkpoint_every = 0;  // 0: only at the end
  nets::ArchConfig generator = nets::ArchConfig::generator(64, 16, 4);
  nets::ArchConfig discriminator = nets::ArchConfig::discriminator(64, 16, 3);

  void validate() const {
    if (steps < 0) throw ValidationError("gan.steps: must be >= 0");
    if (!(lr > 0.0)) throw ValidationError("gan.lr: must be > 0");
    if (pool_size < 0) throw ValidationError("gan.pool_size: must be >= 0");
    if (batch < 1) throw ValidationError("gan.batch: must be >= 1");
    if (sample_every < 0 || checkpoint_every < 0) throw ValidationError("gan: cadences must be >= 0");
    weights.validate();
    nets::validate_arch(generator);
    nets::validate_arch(discriminator);
  }
};

struct TrainConfig {
  std::uint64_t seed = 1;
  nets::ArchConfig detector = nets::ArchConfig::detector(64, 16, 4);
  double valid_fraction = 0.2;  // pretrain split; 0 selects on the training set
  int valid_count = 0;          // overrides valid_fraction when > 0
  DetectorStageConfig pretrain{1500, 8, 1e-3, 0.9, 0.999, 100, 0, true};
  DetectorStageConfig embed{300, 8, 5e-4, 0.9, 0.999, 20, 0, true};
  DetectorStageConfig finetune{600, 8, 5e-4, 0.9, 0.999, 50, 0, true};
  GanConfig gan;
  bool finetune_include_real = false;

  void validate() const {
    nets::validate_arch(detector);
    if (valid_fraction < 0.0 || valid_fraction >= 1.0) {
      throw ValidationError("valid_fraction: must be in [0,1)");
    }
    if (valid_count < 0) throw ValidationError("valid_count: must be >= 0");
    pretrain.validate("pretrain");
    embed.validate("embed");
    finetune.validate("finetune");
    gan.validate();
  }
};

inline json to_json(const DetectorStageConfig& c) {
  return {{"steps", c.steps}, {"batch", c.batch},           {"lr", c.lr},
          {"beta1", c.beta1}, {"beta2", c.beta2},           {"eval_every", c.eval_every},
          {"patience", c.patience}, {"hflip", c.hflip}};
}

inline json to_json(const GanConfig& c) {
  return {{"steps", c.steps},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"pool_size", c.pool_size},
          {"batch", c.batch},
          {"lambda_c", c.weights.lambda_c},
          {"lambda_i", c.weights.lambda_i},
          {"lambda_t", c.weights.lambda_t},
          {"adv_form", losses::to_string(c.weights.adv_form)},
          {"sample_every", c.sample_every},
          {"checkpoint_every", c.checkpoint_every},
          {"generator", c.generator},
          {"discriminator", c.discriminator}};
}

inline json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"detector", c.detector},
          {"valid_fraction", c.valid_fraction},
          {"valid_count", c.valid_count},
          {"pretrain", to_json(c.pretrain)},
          {"embed", to_json(c.embed)},
          {"finetune", to_json(c.finetune)},
          {"gan", to_json(c.gan)},
          {"finetune_include_real", c.finetune_include_real}};
}

inline std::string config_hash(const json& j) { return io::sha256(j.dump()); }

// ---- image pool ------------------------------------------------------------

/// History of generated images for discriminator updates.
class ImagePool {
 public:
  ImagePool(int capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
    if (capacity < 0) throw ValidationError("pool_size: must be >= 0");
  }

  /// Fill phase stores and returns the input; afterwards, with probability
  /// 0.5 a random stored image is returned and replaced by the input.
  Tensor<float> query(const Tensor<float>& image) {
    if (capacity_ == 0) return image;
    if (static_cast<int>(buffer_.size()) < capacity_) {
      buffer_.push_back(image);
      return image;
    }
    if (rng_.uniform() < 0.5) {
      const auto idx = rng_.below(buffer_.size());
      Tensor<float> old = std::move(buffer_[idx]);
      buffer_[idx] = image;
      return old;
    }
    return image;
  }

  [[nodiscard]] int capacity() const { return capacity_; }
  [[nodiscard]] std::size_t size() const { return buffer_.size(); }

 private:
  int capacity_;
  std::vector<Tensor<float>> buffer_;
  Rng rng_;
};

// ---- helpers ---------------------------------------------------------------

/// Deterministic copy with trainable set, so stage inputs are never mutated.
inline Net thawed_copy(const Net& h) {
  Net c = h;
  c.trainable = true;
  return c;
}

inline void require_labeled(const Dataset& d, const std::string& what) {
  for (const auto& li : d) {
    if (!li.labeled()) throw ValidationError(what + ": image '" + li.name + "' has no labels");
  }
}

inline Tensor<float> mirror_pixels(const Tensor<float>& t) {
  Tensor<float> out(t.shape());
  const Shape s = t.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) out.at(n, c, y, x) = t.at(n, c, y, s.w - 1 - x);
  return out;
}

/// Anchors by k-means over box extents with 1 - IoU distance, initialized at
/// area quantiles. Falls back to the defaults with fewer than 6 distinct boxes.
inline std::vector<nets::Anchor> compute_anchors(const std::vector<BoundingBox>& boxes, int k = 6,
                                                 int iterations = 50) {
  std::vector<nets::Anchor> pts;
  std::set<std::pair<double, double>> distinct;
  for (const auto& b : boxes) {
    pts.push_back({b.w, b.h});
    distinct.insert({b.w, b.h});
  }
  if (static_cast<int>(distinct.size()) < k) return nets::default_anchors();
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    return a.w * a.h < b.w * b.h || (a.w * a.h == b.w * b.h && a.w < b.w);
  });
  std::vector<nets::Anchor> cent;
  for (int i = 0; i < k; ++i) {
    cent.push_back(pts[static_cast<std::size_t>((i + 0.5) / k * static_cast<double>(pts.size()))]);
  }
  std::vector<int> assign(pts.size(), -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t p = 0; p < pts.size(); ++p) {
      int best = 0;
      double best_iou = -1.0;
      for (int c = 0; c < k; ++c) {
        const double v = shape_iou(pts[p].w, pts[p].h, cent[c].w, cent[c].h);
        if (v > best_iou) {
          best_iou = v;
          best = c;
        }
      }
      changed |= assign[p] != best;
      assign[p] = best;
    }
    for (int c = 0; c < k; ++c) {
      double sw = 0.0, sh = 0.0;
      int n = 0;
      for (std::size_t p = 0; p < pts.size(); ++p) {
        if (assign[p] != c) continue;
        sw += pts[p].w;
        sh += pts[p].h;
        ++n;
      }
      if (n > 0) cent[c] = {sw / n, sh / n};
    }
    if (!changed) break;
  }
  std::sort(cent.begin(), cent.end(), [](const auto& a, const auto& b) { return a.w * a.h < b.w * b.h; });
  return cent;
}

/// Mean detection loss over a dataset (value only).
inline double dataset_loss(const Net& t, const Dataset& d, int batch = 16) {
  if (d.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    const std::size_t end = std::min(d.size(), start + batch);
    std::vector<Tensor<float>> xs;
    std::vector<std::vector<BoundingBox>> ys;
    for (std::size_t i = start; i < end; ++i) {
      xs.push_back(d[i].pixels);
      ys.push_back(d[i].labels());
    }
    const auto grid = nets::detector_forward(t, stack<float>(xs));
    sum += static_cast<double>(losses::detection_task_loss(grid, ys)) * static_cast<double>(end - start);
  }
  return sum / static_cast<double>(d.size());
}

struct CurvePoint {
  int step = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
};

struct DetectorResult {
  Net model;
  std::vector<CurvePoint> curve;
  int best_step = 0;
  double best_valid_loss = 0.0;
};

/// Adam on the detection loss with best-on-validation selection (step 0
/// included). Returns the selected parameters, frozen.
inline DetectorResult train_detector(const Net& start, const Dataset& train, const Dataset& valid,
                                     const DetectorStageConfig& cfg, std::uint64_t seed,
                                     const Logger& log = {}, const std::string& stage = "detector") {
  if (train.empty()) throw ValidationError(stage + ": empty training set");
  if (valid.empty()) throw ValidationError(stage + ": empty validation set");
  require_labeled(train, stage + " train");
  require_labeled(valid, stage + " valid");
  Net net = thawed_copy(start);
  DetectorResult r;
  r.best_valid_loss = dataset_loss(net, valid);
  r.curve.push_back({0, dataset_loss(net, train), r.best_valid_loss});
  std::vector<Tensor<float>> best = net.params;
  if (cfg.steps > 0) {
    optim::Adam<float> adam(net, {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
    Rng rng(seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    int stale = 0;
    double running = 0.0;
    int running_n = 0;
    for (int step = 1; step <= cfg.steps; ++step) {
      std::vector<Tensor<float>> xs;
      std::vector<std::vector<BoundingBox>> ys;
      for (int b = 0; b < cfg.batch; ++b) {
        if (cursor >= order.size()) {
          rng.shuffle(order.begin(), order.end());
          cursor = 0;
        }
        const auto& li = train[order[cursor++]];
        if (cfg.hflip && rng.uniform() < 0.5) {
          xs.push_back(mirror_pixels(li.pixels));
          ys.push_back(data::mirror_boxes(li.labels()));
        } else {
          xs.push_back(li.pixels);
          ys.push_back(li.labels());
        }
      }
      auto bound = nets::bind(net, true);
      auto out = nets::detector_graph<float>(net.arch, bound, Var<float>(stack<float>(xs)));
      auto loss = losses::detection_task_loss(net.arch, out, ys);
      backward(loss);
      adam.step(net, nets::gradients(bound));
      running += loss.item();
      ++running_n;
      if (step % cfg.eval_every == 0 || step == cfg.steps) {
        const double v = dataset_loss(net, valid);
        r.curve.push_back({step, running / running_n, v});
        running = 0.0;
        running_n = 0;
        if (v < r.best_valid_loss) {
          r.best_valid_loss = v;
          r.best_step = step;
          best = net.params;
          stale = 0;
        } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
          note(log, fmt::format("{}: early stop at step {}", stage, step));
          break;
        }
        note(log, fmt::format("{} step {}/{} train {:.4f} valid {:.4f}", stage, step, cfg.steps,
                              r.curve.back().train_loss, v));
      }
    }
  }
  net.params = std::move(best);
  net.trainable = false;
  r.model = std::move(net);
  return r;
}

inline nets::Provenance extend(const nets::Provenance& parent, const std::string& stage,
                               const std::string& parent_hash, const json& cfg) {
  nets::Provenance p = parent;
  p.lineage.push_back(stage);
  p.parent_hash = parent_hash;
  p.config_hash = config_hash(cfg);
  return p;
}

inline void require_stage(const Net& t, const std::string& stage, const std::string& consumer) {
  if (!t.provenance.has_stage(stage)) {
    throw StageOrderError(fmt::format("{}: detector must come from stage '{}' (lineage: [{}])", consumer,
                                      stage, fmt::join(t.provenance.lineage, ", ")));
  }
}

/// Seeded split of `d` into (train, valid) with `valid_n` validation images.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t valid_n, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  Dataset train, valid;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < valid_n ? valid : train).push_back(d[idx[i]]);
  return {train, valid};
}

// ---- stages ----------------------------------------------------------------

/// Source-domain detector with anchors fitted to the training boxes.
inline DetectorResult pretrain_detector(const Dataset& source, const TrainConfig& cfg, const Logger& log = {}) {
  cfg.validate();
  if (source.empty()) throw ValidationError("pretrain: empty source dataset");
  require_labeled(source, "pretrain");
  std::size_t valid_n = cfg.valid_count > 0
                            ? static_cast<std::size_t>(cfg.valid_count)
                            : static_cast<std::size_t>(std::lround(cfg.valid_fraction * source.size()));
  if (valid_n >= source.size()) throw ValidationError("pretrain: validation split leaves no training images");
  Dataset train, valid;
  if (valid_n == 0) {
    train = valid = source;
  } else {
    std::tie(train, valid) = split_dataset(source, valid_n, cfg.seed ^ 0x5eedULL);
  }
  std::vector<BoundingBox> boxes;
  for (const auto& li : train) boxes.insert(boxes.end(), li.labels().begin(), li.labels().end());
  nets::ArchConfig arch = cfg.detector;
  arch.anchors = compute_anchors(boxes, 2 * arch.anchors_per_scale);
  Net init = nets::make_network<float>(arch, cfg.seed);
  note(log, fmt::format("pretrain: {} train / {} valid images", train.size(), valid.size()));
  auto r = train_detector(init, train, valid, cfg.pretrain, cfg.seed + 1, log, "pretrain");
  json c = to_json(cfg.pretrain);
  c["valid_n"] = valid_n;
  c["seed"] = cfg.seed;
  r.model.provenance = extend({}, "pretrain", "", c);
  return r;
}

/// Fine-tunes T^A on the a labeled target images, selecting on the b
/// validation images.
inline DetectorResult embed_domain_knowledge(const Net& t_a, const Dataset& train, const Dataset& valid,
                                             const TrainConfig& cfg, const Logger& log = {}) {
  require_stage(t_a, "pretrain", "embed");
  if (train.empty()) throw ValidationError("embed: need a >= 1 training images");
  if (valid.empty()) throw ValidationError("embed: need b >= 1 validation images");
  auto r = train_detector(t_a, train, valid, cfg.embed, cfg.seed + 2, log, "embed");
  r.model.provenance = extend(t_a.provenance, "embed", checkpoint::parameter_hash(t_a), to_json(cfg.embed));
  return r;
}

/// Fine-tunes on translated images. With real validation images (b > 0) the
/// input must be an embedded detector; with none, 20% of the generated set is
/// held out and the input must be at least pretrained.
inline DetectorResult finetune_on_generated(const Net& t, const Dataset& generated, const Dataset& target_valid,
                                            const TrainConfig& cfg, const Logger& log = {},
                                            const Dataset& real_train = {}) {
  if (generated.empty()) throw ValidationError("finetune: empty generated dataset");
  require_stage(t, target_valid.empty() ? "pretrain" : "embed", "finetune");
  Dataset train = generated;
  Dataset valid = target_valid;
  if (valid.empty()) {
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * generated.size())));
    if (n >= generated.size()) throw ValidationError("finetune: too few generated images to hold out 20%");
    std::tie(train, valid) = split_dataset(generated, n, cfg.seed ^ 0xf1e7ULL);
  }
  if (cfg.finetune_include_real) train.insert(train.end(), real_train.begin(), real_train.end());
  auto r = train_detector(t, train, valid, cfg.finetune, cfg.seed + 2, log, "finetune");
  json c = to_json(cfg.finetune);
  c["held_out_generated"] = target_valid.empty();
  r.model.provenance = extend(t.provenance, "finetune", checkpoint::parameter_hash(t), c);
  return r;
}

// ---- GAN training ----------------------------------------------------------

struct GanNets {
  Net g_a;  // A -> B
  Net g_b;  // B -> A
  Net d_a;  // judges domain A
  Net d_b;  // judges domain B
};

struct GanResult {
  GanNets nets;
  std::vector<losses::LossBreakdown> log;
  std::string task_hash_before;
  std::string task_hash_after;
  double seconds = 0.0;
};

/// Learning rate with linear decay to zero over the second half.
inline double gan_lr(const GanConfig& c, int step) {
  const int half = c.steps / 2;
  if (step < half) return c.lr;
  return c.lr * static_cast<double>(c.steps - step) / static_cast<double>(c.steps - half);
}

inline io::Image8 triptych(const GanNets& n, const Dataset& samples) {
  const int S = n.g_a.arch.image_size;
  io::Image8 sheet(3 * S, static_cast<int>(samples.size()) * S);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto fake = nets::generator_forward(n.g_a, samples[r].pixels);
    const auto rec = nets::generator_forward(n.g_b, fake);
    const Tensor<float>* cols[3] = {&samples[r].pixels, &fake, &rec};
    for (int c = 0; c < 3; ++c) {
      const auto img = data::to_image8(*cols[c]);
      for (int y = 0; y < S; ++y) {
        std::copy_n(img.px(0, y), 3 * S, sheet.px(c * S, static_cast<int>(r) * S + y));
      }
    }
  }
  return sheet;
}

inline void save_gan(const std::filesystem::path& dir, const GanNets& n, const std::string& suffix = "",
                     const json& extra = {}) {
  checkpoint::save(dir / ("g_a" + suffix + ".ckpt"), n.g_a, extra);
  checkpoint::save(dir / ("g_b" + suffix + ".ckpt"), n.g_b, extra);
  checkpoint::save(dir / ("d_a" + suffix + ".ckpt"), n.d_a, extra);
  checkpoint::save(dir / ("d_b" + suffix + ".ckpt"), n.d_b, extra);
}

/// Alternating generator/discriminator updates. `t_b` must be frozen; it is
/// only needed (and then required) when lambda_t > 0. With `out_dir` set,
/// writes train_log.jsonl, samples/ and checkpoints/.
inline GanResult train_semgan(const Dataset& source, const Dataset& target, const Net* t_b,
                              const GanConfig& cfg, std::uint64_t seed,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                              const Logger& log = {}) {
  namespace fs = std::filesystem;
  if (t_b && t_b->trainable) {
    throw std::logic_error("train_semgan: the task network must be frozen");
  }
  cfg.validate();
  const bool use_task = cfg.weights.lambda_t != 0.0;
  if (use_task && !t_b) throw ValidationError("train_semgan: lambda_t > 0 needs a task network");
  if (use_task) require_stage(*t_b, "embed", "train_semgan");
  if (source.empty() || target.empty()) throw ValidationError("train_semgan: empty domain");
  if (use_task) require_labeled(source, "train_semgan source");
  if (cfg.generator.image_size != source.front().pixels.shape().h) {
    throw ValidationError("train_semgan: generator image_size does not match the data");
  }

  GanResult res;
  if (t_b) res.task_hash_before = checkpoint::parameter_hash(*t_b);
  const auto t0 = std::chrono::steady_clock::now();

  json cfg_json = to_json(cfg);
  cfg_json["seed"] = seed;
  const auto prov = extend(t_b ? t_b->provenance : nets::Provenance{}, "train_gan",
                           t_b ? res.task_hash_before : "", cfg_json);
  GanNets n{nets::make_network<float>(cfg.generator, seed * 4 + 11),
            nets::make_network<float>(cfg.generator, seed * 4 + 12),
            nets::make_network<float>(cfg.discriminator, seed * 4 + 13),
            nets::make_network<float>(cfg.discriminator, seed * 4 + 14)};
  for (Net* h : {&n.g_a, &n.g_b, &n.d_a, &n.d_b}) h->provenance = prov;
  const optim::AdamConfig acfg{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  optim::Adam<float> opt_ga(n.g_a, acfg), opt_gb(n.g_b, acfg), opt_da(n.d_a, acfg), opt_db(n.d_b, acfg);
  ImagePool pool_a(cfg.pool_size, seed * 7 + 1);
  ImagePool pool_b(cfg.pool_size, seed * 7 + 2);
  Rng rng(seed * 7 + 3);

  std::optional<std::ofstream> log_file;
  Dataset sample_set;
  if (out_dir) {
    fs::create_directories(*out_dir / "samples");
    fs::create_directories(*out_dir / "checkpoints");
    log_file.emplace(*out_dir / "train_log.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < std::min<std::size_t>(4, source.size()); ++i) sample_set.push_back(source[i]);
  }

  std::vector<std::size_t> order_a(source.size()), order_b(target.size());
  std::iota(order_a.begin(), order_a.end(), 0);
  std::iota(order_b.begin(), order_b.end(), 0);
  std::size_t cur_a = order_a.size(), cur_b = order_b.size();
  auto next_batch = [&](const Dataset& d, std::vector<std::size_t>& order, std::size_t& cur,
                        std::vector<std::vector<BoundingBox>>* labels) {
    std::vector<Tensor<float>> xs;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cur >= order.size()) {
        rng.shuffle(order.begin(), order.end());
        cur = 0;
      }
      const auto& li = d[order[cur++]];
      xs.push_back(li.pixels);
      if (labels) labels->push_back(li.labeled() ? li.labels() : std::vector<BoundingBox>{});
    }
    return stack<float>(xs);
  };

  const auto form = cfg.weights.adv_form;
  using losses::Role;
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = gan_lr(cfg, step);
    for (auto* o : {&opt_ga, &opt_gb, &opt_da, &opt_db}) o->set_lr(lr);
    std::vector<std::vector<BoundingBox>> labels_a;
    const Var<float> x_a(next_batch(source, order_a, cur_a, &labels_a));
    const Var<float> x_b(next_batch(target, order_b, cur_b, nullptr));

    // Generator update; discriminators and the task network are constants.
    auto pga = nets::bind(n.g_a, true);
    auto pgb = nets::bind(n.g_b, true);
    auto pda = nets::bind(n.d_a, false);
    auto pdb = nets::bind(n.d_b, false);
    Var<float> fake_b = nets::generator_graph<float>(n.g_a.arch, pga, x_a);
    Var<float> fake_a = nets::generator_graph<float>(n.g_b.arch, pgb, x_b);
    Var<float> adv_ab = losses::adversarial_loss(Var<float>(), nets::discriminator_graph<float>(n.d_b.arch, pdb, fake_b),
                                                 Role::generator, form);
    Var<float> adv_ba = losses::adversarial_loss(Var<float>(), nets::discriminator_graph<float>(n.d_a.arch, pda, fake_a),
                                                 Role::generator, form);
    Var<float> rec_a = nets::generator_graph<float>(n.g_b.arch, pgb, fake_b);
    Var<float> rec_b = nets::generator_graph<float>(n.g_a.arch, pga, fake_a);
    Var<float> cyc = losses::cycle_loss(x_a, rec_a, x_b, rec_b);
    Var<float> idt;
    if (cfg.weights.lambda_i != 0.0) {
      idt = losses::identity_loss(nets::generator_graph<float>(n.g_a.arch, pga, x_b), x_b,
                                  nets::generator_graph<float>(n.g_b.arch, pgb, x_a), x_a);
    } else {
      idt = Var<float>(Tensor<float>::scalar(0.0f));
    }
    Var<float> task;
    if (use_task) {
      auto ptb = nets::bind(*t_b, false);
      task = losses::detection_task_loss(t_b->arch, nets::detector_graph<float>(t_b->arch, ptb, fake_b), labels_a);
    }
    Var<float> total = losses::total_objective(adv_ab, adv_ba, cyc, idt, task, cfg.weights);
    backward(total);
    opt_ga.step(n.g_a, nets::gradients(pga));
    opt_gb.step(n.g_b, nets::gradients(pgb));

    losses::LossComponents parts{adv_ab.item(), adv_ba.item(), cyc.item(), idt.item(),
                                 use_task ? static_cast<double>(task.item()) : 0.0};
    const auto breakdown = losses::total_objective(parts, cfg.weights);
    res.log.push_back(breakdown);
    if (log_file) *log_file << losses::to_log_line(step, breakdown).dump() << '\n';

    // Discriminator updates on pooled fakes.
    const Tensor<float> pooled_b = pool_b.query(fake_b.value());
    const Tensor<float> pooled_a = pool_a.query(fake_a.value());
    {
      auto p = nets::bind(n.d_b, true);
      auto l = losses::adversarial_loss(nets::discriminator_graph<float>(n.d_b.arch, p, x_b),
                                        nets::discriminator_graph<float>(n.d_b.arch, p, Var<float>(pooled_b)),
                                        Role::discriminator, form);
      backward(l);
      opt_db.step(n.d_b, nets::gradients(p));
    }
    {
      auto p = nets::bind(n.d_a, true);
      auto l = losses::adversarial_loss(nets::discriminator_graph<float>(n.d_a.arch, p, x_a),
                                        nets::discriminator_graph<float>(n.d_a.arch, p, Var<float>(pooled_a)),
                                        Role::discriminator, form);
      backward(l);
      opt_da.step(n.d_a, nets::gradients(p));
    }

    const int done = step + 1;
    if (done % 100 == 0 || done == cfg.steps) {
      note(log, fmt::format("train_gan step {}/{} total {:.4f} cycle {:.4f} task {:.4f}", done, cfg.steps,
                            breakdown.total, parts.cycle, parts.task));
    }
    if (out_dir && cfg.sample_every > 0 && (done % cfg.sample_every == 0 || done == cfg.steps)) {
      io::write_png(*out_dir / "samples" / fmt::format("step_{:06d}.png", done), triptych(n, sample_set));
    }
    if (out_dir && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps) {
      save_gan(*out_dir / "checkpoints", n, fmt::format("_{:06d}", done), {{"step", done}, {"rng", rng.state()}});
    }
  }

  for (Net* h : {&n.g_a, &n.g_b, &n.d_a, &n.d_b}) h->trainable = false;
  if (out_dir) save_gan(*out_dir / "checkpoints", n, "", {{"step", cfg.steps}, {"rng", rng.state()}});
  if (t_b) {
    res.task_hash_after = checkpoint::parameter_hash(*t_b);
    if (res.task_hash_after != res.task_hash_before) {
      throw std::logic_error("train_semgan: task network parameters changed");
    }
  }
  res.nets = std::move(n);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---- translation -----------------------------------------------------------

/// Maps every source image through G_A; labels are copied unchanged.
inline Dataset translate_dataset(const Net& g_a, const Dataset& source, int batch = 8) {
  if (g_a.arch.kind != nets::NetKind::generator) throw ValidationError("translate: not a generator");
  Dataset out;
  out.reserve(source.size());
  for (std::size_t start = 0; start < source.size(); start += batch) {
    const std::size_t end = std::min(source.size(), start + batch);
    std::vector<Tensor<float>> xs;
    for (std::size_t i = start; i < end; ++i) xs.push_back(source[i].pixels);
    const auto y = nets::generator_forward(g_a, stack<float>(xs));
    for (std::size_t i = start; i < end; ++i) {
      LabeledImage li = source[i];
      // Round through 8 bits so in-memory and on-disk translations agree.
      li.pixels = data::to_model_space(data::to_image8(y.slice_sample(static_cast<int>(i - start))));
      li.domain = "translated";
      li.content_hash.clear();
      out.push_back(std::move(li));
    }
  }
  return out;
}

/// On-disk translation: images through G_A, label files copied byte for
/// byte, manifest with per-image provenance.
inline json translate_directory(const Net& g_a, const std::filesystem::path& source_dir,
                                const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  const Dataset src = data::load_domain(source_dir, false);
  const Dataset out = translate_dataset(g_a, src);
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "labels");
  const std::string gen_id = checkpoint::parameter_hash(g_a);
  json m;
  m["style"] = "translated";
  m["canvas_size"] = g_a.arch.image_size;
  m["generator"] = gen_id;
  m["entries"] = json::array();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::string stem = out[i].name;
    io::write_png(out_dir / "images" / (stem + ".png"), data::to_image8(out[i].pixels));
    const fs::path lf = source_dir / "labels" / (stem + ".txt");
    json e{{"image", "images/" + stem + ".png"}, {"source", (source_dir / "images" / (stem + ".png")).string()},
           {"source_hash", src[i].content_hash}};
    if (fs::exists(lf)) {
      fs::copy_file(lf, out_dir / "labels" / (stem + ".txt"), fs::copy_options::overwrite_existing);
      e["labels"] = "labels/" + stem + ".txt";
    }
    m["entries"].push_back(e);
  }
  io::write_file(out_dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

// ---- incremental-label experiment -------------------------------------------

enum class Method { pretrained, cyclegan, fine_tuned, semgan_fine_tuned };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::pretrained: return "pretrained";
    case Method::cyclegan: return "cyclegan";
    case Method::fine_tuned: return "fine_tuned";
    case Method::semgan_fine_tuned: return "semgan_fine_tuned";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "pretrained") return Method::pretrained;
  if (s == "cyclegan") return Method::cyclegan;
  if (s == "fine_tuned") return Method::fine_tuned;
  if (s == "semgan_fine_tuned") return Method::semgan_fine_tuned;
  throw ValidationError("methods: unknown method '" + s + "'");
}

/// Legs that use no labeled target images.
inline bool k_independent(Method m) { return m == Method::pretrained || m == Method::cyclegan; }

struct ResultRow {
  int k = 0;
  int a = 0;
  int b = 0;
  Method method = Method::pretrained;
  std::uint64_t seed = 0;
  double ap30 = 0.0;
  double ap50 = 0.0;
  bool operator==(const ResultRow&) const = default;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  json extras = json::object();

  [[nodiscard]] std::string to_csv() const {
    std::string out = "k,a,b,method,seed,ap30,ap50\n";
    for (const auto& r : rows) {
      out += fmt::format("{},{},{},{},{},{:.1f},{:.1f}\n", r.k, r.a, r.b, to_string(r.method), r.seed, r.ap30, r.ap50);
    }
    return out;
  }

  [[nodiscard]] json to_json() const {
    json j;
    j["rows"] = json::array();
    for (const auto& r : rows) {
      j["rows"].push_back({{"k", r.k}, {"a", r.a}, {"b", r.b}, {"method", to_string(r.method)},
                           {"seed", r.seed}, {"ap30", r.ap30}, {"ap50", r.ap50}});
    }
    j["extras"] = extras;
    return j;
  }

  /// Markdown table in the paper's column order.
  [[nodiscard]] std::string to_markdown() const {
    std::string out = "| a | b | k | method | seed | AP@0.3 | AP@0.5 |\n|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      out += fmt::format("| {} | {} | {} | {} | {} | {:.1f} | {:.1f} |\n", r.a, r.b, r.k, to_string(r.method), r.seed,
                         r.ap30, r.ap50);
    }
    return out;
  }
};

/// Median AP over seeds for each (k, a, b, method), in first-seen order.
/// Rows carry seed 0.
inline std::vector<ResultRow> median_over_seeds(const std::vector<ResultRow>& rows) {
  std::vector<ResultRow> keys;
  std::vector<std::vector<double>> ap30, ap50;
  for (const auto& r : rows) {
    auto it = std::find_if(keys.begin(), keys.end(), [&](const ResultRow& k) {
      return k.k == r.k && k.a == r.a && k.b == r.b && k.method == r.method;
    });
    std::size_t i = static_cast<std::size_t>(it - keys.begin());
    if (it == keys.end()) {
      keys.push_back({r.k, r.a, r.b, r.method, 0, 0.0, 0.0});
      ap30.emplace_back();
      ap50.emplace_back();
    }
    ap30[i].push_back(r.ap30);
    ap50[i].push_back(r.ap50);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  for (std::size_t i = 0; i < keys.size(); ++i) {
    keys[i].ap30 = median(ap30[i]);
    keys[i].ap50 = median(ap50[i]);
  }
  return keys;
}

inline std::string median_markdown(const std::vector<ResultRow>& rows) {
  std::string out = "| a | b | k | method | AP@0.3 | AP@0.5 |\n|---|---|---|---|---|---|\n";
  for (const auto& r : median_over_seeds(rows)) {
    out += fmt::format("| {} | {} | {} | {} | {:.1f} | {:.1f} |\n", r.a, r.b, r.k, to_string(r.method), r.ap30, r.ap50);
  }
  return out;
}

struct ExperimentData {
  Dataset source;         // labeled domain A
  Dataset target;         // domain B pool; labels used only for the k drawn images
  Dataset test;           // labeled domain B, never trained on
};

struct ExperimentConfig {
  std::vector<int> k_list;
  std::vector<Method> methods{Method::pretrained, Method::cyclegan, Method::fine_tuned, Method::semgan_fine_tuned};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  TrainConfig train;
  double conf_threshold = 0.1;
  double nms_threshold = 0.45;
  eval::HueBand hue_band;
  std::optional<std::filesystem::path> out_dir;
  bool write_results = true;  // results.csv / results.json under out_dir
};

/// Refuses to run when a test image (by content hash) also appears in the
/// source or target pools.
inline void audit_test_disjoint(const ExperimentData& d) {
  std::set<std::string> train_hashes;
  // Decoded pixels rather than file bytes, so in-memory and on-disk copies agree.
  auto key = [](const LabeledImage& li) {
    return io::sha256(std::string_view(reinterpret_cast<const char*>(li.pixels.data()),
                                       li.pixels.size() * sizeof(float)));
  };
  for (const auto* ds : {&d.source, &d.target}) {
    for (const auto& li : *ds) train_hashes.insert(key(li));
  }
  for (const auto& li : d.test) {
    if (train_hashes.count(key(li))) {
      throw DataIntegrityError("test image '" + li.name + "' also appears in the training data");
    }
  }
}

inline std::vector<io::Image8> to_images(const Dataset& d, std::size_t limit) {
  std::vector<io::Image8> out;
  for (std::size_t i = 0; i < std::min(limit, d.size()); ++i) out.push_back(data::to_image8(d[i].pixels));
  return out;
}

inline std::vector<std::vector<BoundingBox>> labels_of(const Dataset& d, std::size_t limit) {
  std::vector<std::vector<BoundingBox>> out;
  for (std::size_t i = 0; i < std::min(limit, d.size()); ++i) out.push_back(d[i].labels());
  return out;
}

/// Runs every requested leg for every seed and k. Rows are ordered by seed,
/// then k, then method as listed. k-independent legs report a = b = 0 and
/// carry the k of their row group, or k = 0 when every requested method is
/// k-independent.
inline ExperimentResult run_incremental_experiment(const ExperimentData& data, const ExperimentConfig& cfg,
                                                   const Logger& log = {}) {
  namespace fs = std::filesystem;
  cfg.train.validate();
  if (cfg.methods.empty()) throw ValidationError("methods: empty");
  if (cfg.seeds.empty()) throw ValidationError("seeds: empty");
  if (data.test.empty()) throw ValidationError("test: empty test set");
  require_labeled(data.test, "test");
  require_labeled(data.source, "source");
  audit_test_disjoint(data);
  const bool all_independent =
      std::all_of(cfg.methods.begin(), cfg.methods.end(), [](Method m) { return k_independent(m); });
  std::vector<int> ks = cfg.k_list;
  if (!all_independent && ks.empty()) throw ValidationError("k_list: required for methods using labeled target images");
  for (int k : ks) {
    data::split_schedule(k);
    if (!all_independent && static_cast<std::size_t>(k) > data.target.size()) {
      throw ValidationError(fmt::format("k_list: k={} exceeds the {} target images", k, data.target.size()));
    }
  }
  if (all_independent && ks.empty()) ks.push_back(0);
  auto has = [&](Method m) { return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end(); };
  const Dataset target_unlabeled = data::unlabeled(data.target);

  ExperimentResult result;
  result.extras["semantic_consistency"] = json::array();
  result.extras["timing"] = json::array();
  const auto started = std::chrono::steady_clock::now();
  for (std::uint64_t seed : cfg.seeds) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    const auto seed_dir = cfg.out_dir ? std::optional<fs::path>(*cfg.out_dir / fmt::format("seed_{}", seed)) : std::nullopt;
    auto leg_dir = [&](const std::string& name) -> std::optional<fs::path> {
      if (!seed_dir) return std::nullopt;
      fs::create_directories(*seed_dir / name);
      return *seed_dir / name;
    };
    auto timed = [&](const std::string& what, auto&& fn) {
      const auto t0 = std::chrono::steady_clock::now();
      auto v = fn();
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.extras["timing"].push_back({{"seed", seed}, {"leg", what}, {"seconds", sec}});
      note(log, fmt::format("seed {}: {} done in {:.0f}s", seed, what, sec));
      return v;
    };
    auto evaluate = [&](const Net& t) {
      return eval::evaluate_model(t, data.test, cfg.conf_threshold, cfg.nms_threshold);
    };

    const Net t_a = timed("pretrain", [&] { return pretrain_detector(data.source, tc, log).model; });
    if (auto d = leg_dir("pretrain")) checkpoint::save(*d / "detector.ckpt", t_a);
    std::map<Method, eval::EvalReport> fixed;
    if (has(Method::pretrained)) fixed[Method::pretrained] = evaluate(t_a);
    if (has(Method::cyclegan)) {
      GanConfig gc = tc.gan;
      gc.weights.lambda_t = 0.0;
      const auto gan = timed("cyclegan_gan", [&] { return train_semgan(data.source, target_unlabeled, nullptr, gc, seed, leg_dir("cyclegan"), log); });
      const Dataset translated = translate_dataset(gan.nets.g_a, data.source);
      result.extras["semantic_consistency"].push_back(
          {{"seed", seed}, {"method", "cyclegan"}, {"k", 0},
           {"score", eval::semantic_consistency_score(to_images(translated, 50), labels_of(translated, 50), cfg.hue_band)}});
      const Net final_t = timed("cyclegan_finetune", [&] { return finetune_on_generated(t_a, translated, {}, tc, log).model; });
      if (auto d = leg_dir("cyclegan")) checkpoint::save(*d / "detector.ckpt", final_t);
      fixed[Method::cyclegan] = evaluate(final_t);
    }

    for (int k : ks) {
      std::map<Method, eval::EvalReport> reports = fixed;
      std::map<Method, std::pair<int, int>> ab;
      if (k > 0 && (has(Method::fine_tuned) || has(Method::semgan_fine_tuned))) {
        const auto sched = data::split_schedule(k);
        // The k labeled target images for this seed: first a train, next b valid.
        std::vector<std::size_t> idx(data.target.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng pick(seed * 1000003ULL + static_cast<std::uint64_t>(k));
        pick.shuffle(idx.begin(), idx.end());
        Dataset train_k, valid_k;
        for (int i = 0; i < k; ++i) {
          const auto& li = data.target[idx[i]];
          if (!li.labeled()) throw ValidationError("target: labeled images required for k > 0");
          (i < sched.a ? train_k : valid_k).push_back(li);
        }
        const auto kname = fmt::format("k{}", k);
        const Net t_b = timed(kname + "_embed", [&] { return embed_domain_knowledge(t_a, train_k, valid_k, tc, log).model; });
        if (auto d = leg_dir(kname + "_fine_tuned")) checkpoint::save(*d / "detector.ckpt", t_b);
        if (has(Method::fine_tuned)) {
          reports[Method::fine_tuned] = evaluate(t_b);
          ab[Method::fine_tuned] = {sched.a, sched.b};
        }
        if (has(Method::semgan_fine_tuned)) {
          const auto gan = timed(kname + "_semgan_gan", [&] {
            return train_semgan(data.source, target_unlabeled, &t_b, tc.gan, seed, leg_dir(kname + "_semgan"), log);
          });
          const Dataset translated = translate_dataset(gan.nets.g_a, data.source);
          result.extras["semantic_consistency"].push_back(
              {{"seed", seed}, {"method", "semgan"}, {"k", k},
               {"score", eval::semantic_consistency_score(to_images(translated, 50), labels_of(translated, 50), cfg.hue_band)}});
          const Net final_t = timed(kname + "_semgan_finetune", [&] {
            return finetune_on_generated(t_b, translated, valid_k, tc, log, train_k).model;
          });
          if (auto d = leg_dir(kname + "_semgan")) checkpoint::save(*d / "detector.ckpt", final_t);
          reports[Method::semgan_fine_tuned] = evaluate(final_t);
          ab[Method::semgan_fine_tuned] = {sched.a, sched.b};
        }
      }
      for (Method m : cfg.methods) {
        ResultRow row;
        row.k = all_independent ? 0 : k;
        row.method = m;
        row.seed = seed;
        if (auto it = ab.find(m); it != ab.end()) std::tie(row.a, row.b) = it->second;
        const auto& rep = reports.at(m);
        row.ap30 = rep.ap30;
        row.ap50 = rep.ap50;
        result.rows.push_back(row);
      }
    }
  }
  result.extras["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (cfg.out_dir && cfg.write_results) {
    fs::create_directories(*cfg.out_dir);
    io::write_file(*cfg.out_dir / "results.csv", result.to_csv());
    io::write_file(*cfg.out_dir / "results.json", result.to_json().dump(2) + "\n");
  }
  return result;
}

}  // namespace semgan::pipeline
