#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "semgan/box.hpp"
#include "semgan/core/autograd.hpp"
#include "semgan/core/ops.hpp"
#include "semgan/nets.hpp"

namespace semgan::losses {

enum class AdvForm { log_form, least_squares };
enum class Role { discriminator, generator };

inline const char* to_string(AdvForm f) {
  return f == AdvForm::log_form ? "log_form" : "least_squares";
}

inline AdvForm adv_form_from_string(const std::string& s) {
  if (s == "log_form") return AdvForm::log_form;
  if (s == "least_squares") return AdvForm::least_squares;
  throw std::invalid_argument("unknown adversarial form '" + s + "'");
}

/// Weights of the full objective. lambda_t = 0 is plain CycleGAN.
struct LossWeights {
  double lambda_c = 10.0;
  double lambda_i = 5.0;
  double lambda_t = 1.0;
  AdvForm adv_form = AdvForm::least_squares;

  void validate() const {
    if (!(lambda_c >= 0.0)) throw std::invalid_argument("lambda_c must be >= 0");
    if (!(lambda_i >= 0.0)) throw std::invalid_argument("lambda_i must be >= 0");
    if (!(lambda_t >= 0.0)) throw std::invalid_argument("lambda_t must be >= 0");
  }
  bool operator==(const LossWeights&) const = default;
};

/// Adversarial loss under the minimization convention.
///
/// Discriminator role: log form is -[mean log D(real) + mean log(1 - D(fake))]
/// with D = sigmoid(score); least squares is mean (real-1)^2 + mean fake^2.
/// Generator role (non-saturating): -mean log D(fake), or mean (fake-1)^2.
/// `real` is ignored (may be undefined) for the generator role.
template <typename T>
Var<T> adversarial_loss(const Var<T>& real, const Var<T>& fake, Role role, AdvForm form) {
  if (role == Role::generator) {
    return form == AdvForm::log_form ? ops::mean_bce_logits(fake, T(1))
                                     : ops::mean_squared_to(fake, T(1));
  }
  require_same_shape(real.shape(), fake.shape(), "adversarial_loss");
  if (form == AdvForm::log_form) {
    return ops::weighted_sum<T>({ops::mean_bce_logits(real, T(1)), ops::mean_bce_logits(fake, T(0))},
                                {T(1), T(1)});
  }
  return ops::weighted_sum<T>({ops::mean_squared_to(real, T(1)), ops::mean_squared_to(fake, T(0))},
                              {T(1), T(1)});
}

template <typename T>
T adversarial_loss(const Tensor<T>& real, const Tensor<T>& fake, Role role, AdvForm form) {
  return adversarial_loss(Var<T>(real), Var<T>(fake), role, form).item();
}

/// L1 cycle-consistency: mean|rec_a - x_a| + mean|rec_b - x_b|.
template <typename T>
Var<T> cycle_loss(const Var<T>& x_a, const Var<T>& rec_a, const Var<T>& x_b, const Var<T>& rec_b) {
  return ops::weighted_sum<T>({ops::mean_abs_diff(rec_a, x_a), ops::mean_abs_diff(rec_b, x_b)},
                              {T(1), T(1)});
}

template <typename T>
T cycle_loss(const Tensor<T>& x_a, const Tensor<T>& rec_a, const Tensor<T>& x_b,
             const Tensor<T>& rec_b) {
  return cycle_loss(Var<T>(x_a), Var<T>(rec_a), Var<T>(x_b), Var<T>(rec_b)).item();
}

/// L1 identity: mean|G_A(x_b) - x_b| + mean|G_B(x_a) - x_a|.
template <typename T>
Var<T> identity_loss(const Var<T>& g_a_of_b, const Var<T>& x_b, const Var<T>& g_b_of_a,
                     const Var<T>& x_a) {
  return ops::weighted_sum<T>(
      {ops::mean_abs_diff(g_a_of_b, x_b), ops::mean_abs_diff(g_b_of_a, x_a)}, {T(1), T(1)});
}

template <typename T>
T identity_loss(const Tensor<T>& g_a_of_b, const Tensor<T>& x_b, const Tensor<T>& g_b_of_a,
                const Tensor<T>& x_a) {
  return identity_loss(Var<T>(g_a_of_b), Var<T>(x_b), Var<T>(g_b_of_a), Var<T>(x_a)).item();
}

struct DetectionLossWeights {
  double coord = 1.0;
  double obj = 1.0;
  double noobj = 0.5;
  double cls = 1.0;
  double ignore_iou = 0.5;
};

namespace detail {

/// BCE(sigmoid(z), t) minus the entropy of t: zero at a perfect fit, same
/// gradient as plain BCE.
inline double bce_excess(double z, double t) {
  const double bce = t * ops::softplus(-z) + (1.0 - t) * ops::softplus(z);
  double ent = 0.0;
  if (t > 0.0 && t < 1.0) ent = -t * std::log(t) - (1.0 - t) * std::log(1.0 - t);
  return bce - ent;
}

struct Assignment {
  int scale = 0;
  int anchor = 0;
  int cy = 0;
  int cx = 0;
  BoundingBox box;
};

/// Best-shape-IoU anchor over both scales, at the box-center cell. A slot
/// already taken by an earlier target in the same image is kept.
inline std::vector<Assignment> assign_targets(const std::vector<int>& sizes,
                                              const std::vector<std::vector<nets::Anchor>>& anchors,
                                              const std::vector<BoundingBox>& targets) {
  std::vector<Assignment> out;
  for (const auto& t : targets) {
    double best = -1.0;
    Assignment as;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      for (std::size_t a = 0; a < anchors[s].size(); ++a) {
        const double v = shape_iou(t.w, t.h, anchors[s][a].w, anchors[s][a].h);
        if (v > best) {
          best = v;
          as.scale = static_cast<int>(s);
          as.anchor = static_cast<int>(a);
        }
      }
    }
    const int size = sizes[as.scale];
    as.cx = std::clamp(static_cast<int>(std::floor(t.cx * size)), 0, size - 1);
    as.cy = std::clamp(static_cast<int>(std::floor(t.cy * size)), 0, size - 1);
    as.box = t;
    bool taken = false;
    for (const auto& o : out) {
      taken = taken || (o.scale == as.scale && o.anchor == as.anchor && o.cx == as.cx &&
                        o.cy == as.cy);
    }
    if (!taken) out.push_back(as);
  }
  return out;
}

/// Loss value and gradient w.r.t. every raw grid entry. `raw[s]` is the
/// (N, A*(5+C), S, S) tensor of scale s.
template <typename T>
double detection_loss_impl(const std::vector<const Tensor<T>*>& raw,
                           const std::vector<std::vector<nets::Anchor>>& anchors, int num_classes,
                           const std::vector<std::vector<BoundingBox>>& targets,
                           const DetectionLossWeights& wt, std::vector<Tensor<T>>* grads) {
  const int batch = raw.front()->shape().n;
  if (static_cast<int>(targets.size()) != batch) {
    throw std::invalid_argument("detection_task_loss: need one target list per batch image");
  }
  const int slot_w = 5 + num_classes;
  std::vector<int> sizes;
  std::size_t slots = 0;
  for (std::size_t s = 0; s < raw.size(); ++s) {
    sizes.push_back(raw[s]->shape().h);
    slots += static_cast<std::size_t>(sizes.back()) * sizes.back() * anchors[s].size();
  }
  const double norm = 1.0 / (static_cast<double>(slots) * batch);
  if (grads) {
    grads->clear();
    for (const auto* r : raw) grads->emplace_back(r->shape());
  }

  double total = 0.0;
  for (int n = 0; n < batch; ++n) {
    const auto assigned = assign_targets(sizes, anchors, targets[n]);
    for (std::size_t s = 0; s < raw.size(); ++s) {
      const Tensor<T>& r = *raw[s];
      const int size = sizes[s];
      for (int cy = 0; cy < size; ++cy) {
        for (int cx = 0; cx < size; ++cx) {
          for (int a = 0; a < static_cast<int>(anchors[s].size()); ++a) {
            auto val = [&](int slot) {
              return static_cast<double>(r.at(n, a * slot_w + slot, cy, cx));
            };
            auto add_grad = [&](int slot, double g) {
              if (grads) (*grads)[s].at(n, a * slot_w + slot, cy, cx) += static_cast<T>(g * norm);
            };
            const Assignment* hit = nullptr;
            for (const auto& as : assigned) {
              if (as.scale == static_cast<int>(s) && as.anchor == a && as.cx == cx && as.cy == cy) {
                hit = &as;
              }
            }
            const double zo = val(4);
            if (hit) {
              const BoundingBox& b = hit->box;
              const double tx = b.cx * size - cx;
              const double ty = b.cy * size - cy;
              const double tw = std::log(b.w / anchors[s][a].w);
              const double th = std::log(b.h / anchors[s][a].h);
              total += wt.coord * (bce_excess(val(0), tx) + bce_excess(val(1), ty));
              add_grad(0, wt.coord * (ops::sigmoid(val(0)) - tx));
              add_grad(1, wt.coord * (ops::sigmoid(val(1)) - ty));
              const double dw = val(2) - tw;
              const double dh = val(3) - th;
              total += wt.coord * (dw * dw + dh * dh);
              add_grad(2, wt.coord * 2.0 * dw);
              add_grad(3, wt.coord * 2.0 * dh);
              total += wt.obj * ops::softplus(-zo);
              add_grad(4, wt.obj * (ops::sigmoid(zo) - 1.0));
              for (int k = 0; k < num_classes; ++k) {
                const double label = (k == b.class_id) ? 1.0 : 0.0;
                const double zc = val(5 + k);
                total += wt.cls * (label * ops::softplus(-zc) + (1.0 - label) * ops::softplus(zc));
                add_grad(5 + k, wt.cls * (ops::sigmoid(zc) - label));
              }
              continue;
            }
            // Unassigned slot: background unless the decoded box already
            // overlaps a target well.
            if (!targets[n].empty()) {
              const BoundingBox pred{0, (cx + ops::sigmoid(val(0))) / size,
                                     (cy + ops::sigmoid(val(1))) / size,
                                     anchors[s][a].w * std::exp(std::min(val(2), 20.0)),
                                     anchors[s][a].h * std::exp(std::min(val(3), 20.0))};
              double best = 0.0;
              for (const auto& t : targets[n]) best = std::max(best, iou(pred, t));
              if (best > wt.ignore_iou) continue;
            }
            total += wt.noobj * ops::softplus(zo);
            add_grad(4, wt.noobj * ops::sigmoid(zo));
          }
        }
      }
    }
  }
  return total * norm;
}

}  // namespace detail

/// YOLO-style composite loss, normalized by the number of anchor slots and
/// averaged over the batch. Differentiable w.r.t. both grid tensors.
template <typename T>
Var<T> detection_task_loss(const nets::ArchConfig& arch, const nets::DetectorOutputs<T>& grid,
                           const std::vector<std::vector<BoundingBox>>& targets,
                           const DetectionLossWeights& wt = {}) {
  const std::vector<std::vector<nets::Anchor>> anchors{nets::scale_anchors(arch, 0),
                                                       nets::scale_anchors(arch, 1)};
  auto grads = std::make_shared<std::vector<Tensor<T>>>();
  const bool need = grid.coarse.requires_grad() || grid.fine.requires_grad();
  const double v = detail::detection_loss_impl<T>({&grid.coarse.value(), &grid.fine.value()},
                                                  anchors, arch.num_classes, targets, wt,
                                                  need ? grads.get() : nullptr);
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(v)), {grid.coarse, grid.fine},
                        [grads](Node<T>& node) {
    const T g = node.grad[0];
    for (std::size_t s = 0; s < 2; ++s) {
      Node<T>& p = *node.parents[s];
      if (!p.requires_grad) continue;
      Tensor<T>& out = p.grad_buffer();
      const Tensor<T>& src = (*grads)[s];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += g * src[i];
    }
  });
}

/// Value form on a decoded-layout grid (batch-of-one or batched).
template <typename T>
T detection_task_loss(const nets::DetectionGrid<T>& grid,
                      const std::vector<std::vector<BoundingBox>>& targets,
                      const DetectionLossWeights& wt = {}) {
  std::vector<const Tensor<T>*> raw;
  std::vector<std::vector<nets::Anchor>> anchors;
  for (const auto& s : grid.scales) {
    raw.push_back(&s.raw);
    anchors.push_back(s.anchors);
  }
  return static_cast<T>(
      detail::detection_loss_impl<T>(raw, anchors, grid.num_classes, targets, wt, nullptr));
}

struct LossComponents {
  double adv_ab = 0.0;
  double adv_ba = 0.0;
  double cycle = 0.0;
  double identity = 0.0;
  double task = 0.0;
};

struct LossBreakdown {
  LossComponents parts;
  double total = 0.0;
};

/// total = adv_AB + adv_BA + lambda_c*cycle + lambda_i*identity + lambda_t*task.
inline LossBreakdown total_objective(const LossComponents& c, const LossWeights& w) {
  w.validate();
  LossBreakdown b{c, 0.0};
  b.total = c.adv_ab + c.adv_ba + w.lambda_c * c.cycle + w.lambda_i * c.identity;
  if (w.lambda_t != 0.0) b.total += w.lambda_t * c.task;
  return b;
}

/// Graph form used by the generator step. `task` may be undefined when
/// lambda_t = 0, in which case the term is absent rather than multiplied by 0.
template <typename T>
Var<T> total_objective(const Var<T>& adv_ab, const Var<T>& adv_ba, const Var<T>& cycle,
                       const Var<T>& identity, const Var<T>& task, const LossWeights& w) {
  w.validate();
  std::vector<Var<T>> terms{adv_ab, adv_ba, cycle, identity};
  std::vector<T> weights{T(1), T(1), static_cast<T>(w.lambda_c), static_cast<T>(w.lambda_i)};
  if (w.lambda_t != 0.0 && task.defined()) {
    terms.push_back(task);
    weights.push_back(static_cast<T>(w.lambda_t));
  }
  return ops::weighted_sum<T>(terms, weights);
}

/// One JSON line of the training log.
inline nlohmann::json to_log_line(long step, const LossBreakdown& b) {
  return nlohmann::json{{"step", step},         {"adv_AB", b.parts.adv_ab},
                        {"adv_BA", b.parts.adv_ba}, {"cycle", b.parts.cycle},
                        {"identity", b.parts.identity}, {"task", b.parts.task},
                        {"total", b.total}};
}

}  // namespace semgan::losses
