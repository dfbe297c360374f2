#pragma once

// Fine-tuning with the layer-wise task loss: the shared output head is applied
// to every decoder layer under teacher forcing, and the loss is the mean of the
// per-layer summed cross-entropies. Training always runs at full depth.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mue/autodiff.hpp"
#include "mue/data.hpp"
#include "mue/model.hpp"

namespace mue {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool layerwise_loss = true;
  bool lr_decay = false;  // linear decay from learning_rate toward zero over `steps`
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be > 0");
    if (steps < 1) throw ContractError("TrainConfig: steps must be >= 1");
    if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be >= 1");
  }

  /// Step size of update `t` (1-based).
  double rate_at(std::size_t t) const {
    if (!lr_decay) return learning_rate;
    const double remaining = static_cast<double>(steps) - static_cast<double>(std::min(t, steps) - 1);
    return learning_rate * remaining / static_cast<double>(steps);
  }
};

struct LossReport {
  double total = 0.0;
  std::vector<double> per_layer;
  std::size_t token_count = 0;
};

/// Decoder inputs under teacher forcing: BOS then the target without its last token.
inline std::vector<TokenId> teacher_inputs(std::span<const TokenId> target) {
  std::vector<TokenId> in{tokens::kBos};
  if (!target.empty()) in.insert(in.end(), target.begin(), target.end() - 1);
  return in;
}

/// Full-depth encoder memory for an example, written against any ops policy.
template <class Ops>
typename Ops::Value encode_memory(const Ops& ops, const ParamSet<typename Ops::Param>& w,
                                  const ModelConfig& cfg, const SyntheticExample& ex) {
  const auto image = encode_all_layers(ops, w, cfg, embed_image_tokens(ops, w, ex.grid),
                                       relative_bias_2d(ops, w.image_bias, cfg.grid_side,
                                                        cfg.rel_bucket_count))
                         .back();
  auto combined = image;
  if (!ex.text.empty()) {
    const auto text = encode_all_layers(ops, w, cfg, ops.gather_rows(w.token_embedding, ex.text),
                                        relative_bias_1d(ops, w.text_bias, ex.text.size(),
                                                         cfg.rel_bucket_count))
                          .back();
    combined = ops.concat_rows(image, text);
  }
  return ops.layer_norm(combined, w.encoder_norm.gain, w.encoder_norm.bias);
}

/// Logits of every decoder layer (or of the last only) for the gold prefix.
template <class Ops>
std::vector<typename Ops::Value> per_layer_logits(const Ops& ops, const ParamSet<typename Ops::Param>& w,
                                                  const ModelConfig& cfg, const SyntheticExample& ex,
                                                  bool all_layers) {
  if (ex.target.empty()) throw ContractError("per_layer_logits: example has an empty target");
  const auto memory = encode_memory(ops, w, cfg, ex);
  const auto states = decode_all_layers(ops, w, cfg, memory, teacher_inputs(ex.target));
  std::vector<typename Ops::Value> out;
  for (std::size_t l = all_layers ? 0 : states.size() - 1; l < states.size(); ++l) {
    out.push_back(output_logits(ops, w, states[l]));
  }
  return out;
}

/// Logits of every decoder layer, shape |target| x vocab each.
inline std::vector<Tensor2D> forward_all_layers(const SyntheticExample& ex, const ModelParams& params) {
  return per_layer_logits(PlainOps{}, params.weights, params.config, ex, true);
}

/// Per-layer cross-entropy and their mean. expected_layers is the decoder
/// depth, or 1 for the final-layer-only objective.
inline LossReport layerwise_loss(const std::vector<Tensor2D>& logits, std::span<const TokenId> targets,
                                 std::size_t expected_layers) {
  if (logits.size() != expected_layers || logits.empty()) {
    throw ContractError("layerwise_loss: got " + std::to_string(logits.size()) + " logit tensors, expected " +
                        std::to_string(expected_layers));
  }
  LossReport r;
  r.token_count = targets.size();
  double sum = 0.0;
  for (const auto& l : logits) {
    r.per_layer.push_back(cross_entropy(l, targets));
    sum += r.per_layer.back();
  }
  r.total = sum / static_cast<double>(logits.size());
  return r;
}

/// Loss of one example through the plain forward path.
inline LossReport example_loss(const SyntheticExample& ex, const ModelParams& params, bool layerwise) {
  auto logits = per_layer_logits(PlainOps{}, params.weights, params.config, ex, layerwise);
  return layerwise_loss(logits, ex.target, layerwise ? params.config.n_dec_layers : 1);
}

/// Mean of per-example totals over a batch.
inline double batch_loss(std::span<const SyntheticExample> batch, const ModelParams& params, bool layerwise) {
  double sum = 0.0;
  for (const auto& ex : batch) sum += example_loss(ex, params, layerwise).total;
  return sum / static_cast<double>(batch.size());
}

struct GradientResult {
  ParamSet<Tensor2D> grads;
  LossReport loss;
};

/// Exact reverse-mode gradient of one example's loss.
inline GradientResult backward(const SyntheticExample& ex, const ModelParams& params, bool layerwise) {
  ad::Tape tape;
  const ad::TapeOps ops(tape);
  auto vars = same_layout<ad::Var>(params.weights);
  zip_visit([&tape](const std::string&, const Tensor2D& t, ad::Var& v) { v = tape.alias(t); },
            params.weights, vars);

  const auto logits = per_layer_logits(ops, vars, params.config, ex, layerwise);
  std::vector<ad::Var> losses;
  GradientResult out;
  out.loss.token_count = ex.target.size();
  for (ad::Var l : logits) {
    losses.push_back(ops.cross_entropy(l, ex.target));
    out.loss.per_layer.push_back(tape.value(losses.back())(0, 0));
  }
  const ad::Var total = ops.scale(ops.sum(losses), 1.0 / static_cast<double>(losses.size()));
  out.loss.total = tape.value(total)(0, 0);
  tape.backward(total);

  out.grads = same_layout<Tensor2D>(params.weights);
  zip_visit([&tape](const std::string&, const ad::Var& v, Tensor2D& g) { g = tape.grad(v); }, vars,
            out.grads);
  return out;
}

/// Gradient of the batch mean loss; examples are accumulated in order.
inline GradientResult backward(std::span<const SyntheticExample> batch, const ModelParams& params,
                               const TrainConfig& cfg) {
  GradientResult acc;
  acc.grads = zero_weights(params.config);
  double total = 0.0;
  const std::size_t layers = cfg.layerwise_loss ? params.config.n_dec_layers : 1;
  acc.loss.per_layer.assign(layers, 0.0);
  for (const auto& ex : batch) {
    GradientResult g = backward(ex, params, cfg.layerwise_loss);
    zip_visit([](const std::string&, Tensor2D& a, const Tensor2D& b) { add_inplace(a, b); }, acc.grads,
              g.grads);
    total += g.loss.total;
    for (std::size_t l = 0; l < layers; ++l) acc.loss.per_layer[l] += g.loss.per_layer[l];
    acc.loss.token_count += g.loss.token_count;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  zip_visit([inv](const std::string&, Tensor2D& a) { a = scale(a, inv); }, acc.grads);
  for (double& v : acc.loss.per_layer) v *= inv;
  acc.loss.total = total * inv;
  return acc;
}

// --- finite differences -----------------------------------------------------

struct ParamCoordinate {
  std::string tensor;
  std::size_t index = 0;
};

inline Tensor2D& tensor_by_name(ParamSet<Tensor2D>& w, const std::string& name) {
  Tensor2D* found = nullptr;
  zip_visit([&](const std::string& n, Tensor2D& t) {
    if (n == name) found = &t;
  }, w);
  if (!found) throw ContractError("no parameter tensor named '" + name + "'");
  return *found;
}

inline const Tensor2D& tensor_by_name(const ParamSet<Tensor2D>& w, const std::string& name) {
  return tensor_by_name(const_cast<ParamSet<Tensor2D>&>(w), name);
}

/// Central difference (f(x + eps) - f(x - eps)) / 2 eps of a scalar function.
inline double central_difference(const std::function<double(double)>& f, double x, double eps) {
  if (!(eps > 0.0)) throw ContractError("central_difference: epsilon must be > 0");
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

/// Central-difference derivative of loss with respect to one parameter scalar.
inline double finite_diff_grad(const std::function<double(const ModelParams&)>& loss, ModelParams params,
                               const ParamCoordinate& at, double eps) {
  double& slot = tensor_by_name(params.weights, at.tensor).values().at(at.index);
  const double original = slot;
  return central_difference(
      [&](double x) {
        slot = x;
        const double v = loss(params);
        slot = original;
        return v;
      },
      original, eps);
}

/// Finite-difference gradient of one example's configured loss.
inline double finite_diff_grad(const SyntheticExample& ex, const ModelParams& params, const ParamCoordinate& at,
                               double eps, bool layerwise = true) {
  return finite_diff_grad([&ex, layerwise](const ModelParams& p) { return example_loss(ex, p, layerwise).total; },
                          params, at, eps);
}

// --- optimisation -----------------------------------------------------------

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ParamSet<Tensor2D>& like) : cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::kAdam) {
      m_ = same_layout<Tensor2D>(like);
      v_ = same_layout<Tensor2D>(like);
      zip_visit([](const std::string&, const Tensor2D& p, Tensor2D& m, Tensor2D& v) {
        m = Tensor2D(p.rows(), p.cols());
        v = Tensor2D(p.rows(), p.cols());
      }, like, m_, v_);
    }
  }

  void step(ParamSet<Tensor2D>& params, const ParamSet<Tensor2D>& grads) {
    ++t_;
    const double lr = cfg_.rate_at(t_);
    if (cfg_.optimizer == OptimizerKind::kSgd) {
      zip_visit([lr](const std::string&, Tensor2D& p, const Tensor2D& g) {
        for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] -= lr * g.data()[i];
      }, params, grads);
      return;
    }
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2, eps = cfg_.adam_eps;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    zip_visit([&](const std::string&, Tensor2D& p, const Tensor2D& g, Tensor2D& m, Tensor2D& v) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g.data()[i];
        m.data()[i] = b1 * m.data()[i] + (1.0 - b1) * gi;
        v.data()[i] = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
        p.data()[i] -= lr * (m.data()[i] / c1) / (std::sqrt(v.data()[i] / c2) + eps);
      }
    }, params, grads, m_, v_);
  }

 private:
  TrainConfig cfg_;
  ParamSet<Tensor2D> m_, v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossReport> curve;  // one per optimizer step, measured before the update
};

using TrainCallback = std::function<void(std::size_t step, const LossReport&)>;

/// Mini-batch training over shuffled epochs. Deterministic for a given seed.
inline TrainResult train(const std::vector<SyntheticExample>& dataset, ModelParams params, const TrainConfig& cfg,
                         const TrainCallback& on_step = {}) {
  cfg.validate();
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  SeededRng rng(cfg.seed);
  Optimizer opt(cfg, params.weights);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  TrainResult out;
  std::vector<SyntheticExample> batch;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(dataset[order[cursor++]]);
    }
    GradientResult g = backward(batch, params, cfg);
    if (!std::isfinite(g.loss.total)) {
      throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step));
    }
    opt.step(params.weights, g.grads);
    if (on_step) on_step(step, g.loss);
    out.curve.push_back(std::move(g.loss));
  }
  bool finite = true;
  zip_visit([&finite](const std::string&, const Tensor2D& t) { finite = finite && all_finite(t); }, params.weights);
  if (!finite) throw TrainingDiverged("train: parameters became non-finite");
  out.params = std::move(params);
  return out;
}

}  // namespace mue
