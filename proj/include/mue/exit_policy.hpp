#pragma once

// Exit decisions: layer-to-layer similarity gates with static or decaying
// thresholds, plus the confidence and patience baselines.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mue/model.hpp"
#include "mue/numerics.hpp"

namespace mue {

enum class PolicyKind { kNever, kStatic, kDecay, kConfidence, kPatience };

inline const char* policy_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::kNever: return "never";
    case PolicyKind::kStatic: return "static";
    case PolicyKind::kDecay: return "decay";
    case PolicyKind::kConfidence: return "confidence";
    case PolicyKind::kPatience: return "patience";
  }
  return "?";
}

inline PolicyKind parse_policy_kind(const std::string& s) {
  if (s == "never") return PolicyKind::kNever;
  if (s == "static") return PolicyKind::kStatic;
  if (s == "decay") return PolicyKind::kDecay;
  if (s == "confidence") return PolicyKind::kConfidence;
  if (s == "patience") return PolicyKind::kPatience;
  throw ContractError("unknown exit policy kind '" + s + "'");
}

struct ExitPolicyConfig {
  PolicyKind kind = PolicyKind::kNever;
  double theta = 0.95;        // decoder threshold (static, or base of the decay schedule)
  double beta = 0.95;
  double tau = 1.0;
  std::size_t total_steps = 16;  // N of the decay schedule: the generation budget
  double confidence_level = 0.9;
  std::size_t patience = 2;
  double theta_image = 0.9;
  double theta_text = 0.95;

  void validate() const {
    if (beta < 0.0 || beta > 1.0) throw ContractError("ExitPolicyConfig: beta must lie in [0, 1]");
    if (tau < 0.0) throw ContractError("ExitPolicyConfig: tau must be >= 0");
    if (patience < 1) throw ContractError("ExitPolicyConfig: patience must be >= 1");
    if (total_steps < 1) throw ContractError("ExitPolicyConfig: total_steps must be >= 1");
  }

  /// Encoders are gated only by the similarity policies.
  bool gates_encoder() const { return kind == PolicyKind::kStatic || kind == PolicyKind::kDecay; }
};

struct ExitDecision {
  bool exit_now = false;
  double signal_value = 0.0;
  double threshold_used = 0.0;
};

/// Similarity between consecutive states of one stack. Decoder states compare
/// only their last row, the position being generated.
inline double similarity_signal(const HiddenState& prev, const HiddenState& curr) {
  if (prev.modality != curr.modality) {
    throw ContractError(std::string("similarity_signal: modality mismatch ") +
                        modality_name(prev.modality) + " vs " + modality_name(curr.modality));
  }
  if (prev.layer + 1 != curr.layer) {
    throw ContractError("similarity_signal: layers " + std::to_string(prev.layer) + " and " +
                        std::to_string(curr.layer) + " are not consecutive");
  }
  if (!prev.tensor.same_shape(curr.tensor)) {
    throw ContractError("similarity_signal: shape mismatch " + prev.tensor.shape_str() + " vs " +
                        curr.tensor.shape_str());
  }
  if (curr.modality == Modality::kDecoder && curr.tensor.rows() > 1) {
    const std::size_t last = curr.tensor.rows() - 1;
    return cosine_sim(slice_rows(prev.tensor, last, last + 1), slice_rows(curr.tensor, last, last + 1));
  }
  return cosine_sim(prev.tensor, curr.tensor);
}

/// Exit iff the signal strictly exceeds the threshold.
inline ExitDecision static_decision(double signal, double theta) {
  return {signal > theta, signal, theta};
}

/// Theta(t) = beta*theta + (1 - beta) * exp(-tau * t / N).
inline double decay_threshold(std::size_t t, const ExitPolicyConfig& cfg) {
  if (cfg.total_steps < 1) throw ContractError("decay_threshold: total_steps must be >= 1");
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.total_steps);
  return cfg.beta * cfg.theta + (1.0 - cfg.beta) * std::exp(-cfg.tau * frac);
}

/// Exit iff the largest softmax probability of a 1 x vocab row exceeds level.
inline ExitDecision confidence_decision(const Tensor2D& logits_row, double level) {
  if (logits_row.rows() != 1) {
    throw ShapeError("confidence_decision: expects one row, got " + logits_row.shape_str());
  }
  const Tensor2D p = softmax_rows(logits_row);
  const double top = p.empty() ? 0.0 : *std::max_element(p.values().begin(), p.values().end());
  return {top > level, top, level};
}

/// Exit iff the last `patience` layer predictions exist and all agree. The
/// signal is the length of the trailing run of equal predictions.
inline ExitDecision patience_decision(std::span<const TokenId> argmax_history, std::size_t patience) {
  std::size_t run = 0;
  if (!argmax_history.empty()) {
    run = 1;
    for (std::size_t i = argmax_history.size() - 1; i > 0 && argmax_history[i - 1] == argmax_history.back(); --i) {
      ++run;
    }
  }
  return {patience >= 1 && run >= patience, static_cast<double>(run), static_cast<double>(patience)};
}

/// Decoder threshold at generation step t for the similarity policies.
inline double decoder_threshold(std::size_t t, const ExitPolicyConfig& cfg) {
  return cfg.kind == PolicyKind::kDecay ? decay_threshold(t, cfg) : cfg.theta;
}

}  // namespace mue
