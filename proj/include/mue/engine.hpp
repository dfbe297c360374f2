#pragma once

// Early-exit inference. Image and text each run through the shared encoder
// stack and stop independently once consecutive layers agree; the decoder
// then generates greedily, checking for an exit after every layer of every
// step. Layers skipped at a step still receive the exit state in their
// self-attention caches, so later steps see a complete history.

#include <optional>
#include <vector>

#include "mue/data.hpp"
#include "mue/exit_policy.hpp"
#include "mue/model.hpp"

namespace mue {

struct ExitTrace {
  std::size_t image_exit_layer = 0;  // p
  std::size_t text_exit_layer = 0;   // q
  std::vector<std::size_t> decoder_exits;  // one per emitted token
  std::size_t image_tokens = 0;
  std::size_t text_tokens = 0;
  // filled only when profiling
  std::vector<double> image_signals;
  std::vector<double> text_signals;
  std::vector<std::vector<double>> decoder_signals;

  bool operator==(const ExitTrace&) const = default;
};

struct GenerationOutput {
  std::vector<TokenId> tokens;
  ExitTrace trace;
  bool hit_budget = false;  // stopped at the length budget without EOS

  bool operator==(const GenerationOutput&) const = default;
};

struct EngineOptions {
  bool profile = false;
  // Forced encoder exit depths, overriding the policy for that modality.
  std::optional<std::size_t> force_image_exit;
  std::optional<std::size_t> force_text_exit;
};

struct EncoderRun {
  HiddenState state;
  std::size_t exit_layer = 0;
  std::vector<double> signals;
};

/// Runs the shared encoder stack on one modality. With gate set, stops at the
/// first layer whose similarity to its input strictly exceeds threshold.
/// Without it the stack runs to forced_exit (or full depth) and similarities
/// are computed only if record is set.
inline EncoderRun run_encoder(const HiddenState& state0, const ModelParams& params, bool gate,
                              double threshold, bool record = false,
                              std::optional<std::size_t> forced_exit = std::nullopt) {
  if (state0.layer != 0) throw ContractError("run_encoder: expects a layer-0 state");
  const std::size_t depth = params.config.n_enc_layers;
  const std::size_t stop = forced_exit ? std::clamp<std::size_t>(*forced_exit, 1, depth) : depth;
  const bool check = gate && !forced_exit;
  const Tensor2D bias = encoder_bias_for(state0, params);
  EncoderRun run{state0, depth, {}};
  for (std::size_t l = 1; l <= stop; ++l) {
    HiddenState next = encoder_layer_forward(run.state, l, params, bias);
    if (check || record) {
      const double s = similarity_signal(run.state, next);
      run.signals.push_back(s);
      run.state = std::move(next);
      if (check && static_decision(s, threshold).exit_now) {
        run.exit_layer = l;
        return run;
      }
    } else {
      run.state = std::move(next);
    }
  }
  run.exit_layer = stop;
  return run;
}

/// Same, taking the gate and threshold from a policy.
inline EncoderRun run_encoder(const HiddenState& state0, const ModelParams& params,
                              const ExitPolicyConfig& policy, double threshold, bool record = false) {
  return run_encoder(state0, params, policy.gates_encoder(), threshold, record);
}

struct EncodedExample {
  Tensor2D combined;  // C = [I_p; T_q]
  ExitTrace trace;
};

/// Both encoder passes over the shared stack and their concatenation.
inline EncodedExample encode_example(const SyntheticExample& ex, const ModelParams& params,
                                     const ExitPolicyConfig& policy, const EngineOptions& opt = {}) {
  const bool gate = policy.gates_encoder();
  const EncoderRun image = run_encoder(embed_image(ex.grid, params), params, gate, policy.theta_image,
                                       opt.profile, opt.force_image_exit);
  const EncoderRun text = run_encoder(embed_text(ex.text, params), params, gate, policy.theta_text,
                                      opt.profile, opt.force_text_exit);
  EncodedExample out;
  out.combined = concat_rows(image.state.tensor, text.state.tensor);
  out.trace.image_exit_layer = image.exit_layer;
  out.trace.text_exit_layer = text.exit_layer;
  out.trace.image_tokens = image.state.tensor.rows();
  out.trace.text_tokens = text.state.tensor.rows();
  if (opt.profile) {
    out.trace.image_signals = image.signals;
    out.trace.text_signals = text.signals;
  }
  return out;
}

struct StepResult {
  TokenId token = tokens::kEos;
  std::size_t exit_layer = 0;
  std::vector<double> signals;
  Tensor2D logits;  // 1 x vocab at the exit layer
};

/// One greedy generation step at position t (0-based) fed with prev_token.
inline StepResult decode_step(DecoderCaches& caches, TokenId prev_token, std::size_t t,
                              const ModelParams& params, const ExitPolicyConfig& policy,
                              bool record = false) {
  const std::size_t depth = params.config.n_dec_layers;
  for (const auto& layer : caches.layers) {
    if (layer.positions() != t) throw StateError("decode_step: cache length does not match step index");
  }
  HiddenState x = embed_decoder_token(prev_token, params);
  StepResult r;
  r.exit_layer = depth;
  std::vector<TokenId> votes;
  const bool similarity = policy.kind == PolicyKind::kStatic || policy.kind == PolicyKind::kDecay;
  const double threshold = similarity ? decoder_threshold(t, policy) : 0.0;
  for (std::size_t l = 1; l <= depth; ++l) {
    HiddenState y = decoder_layer_forward(x, l, caches, params);
    bool exit_now = false;
    if (similarity || record) {
      const double s = similarity_signal(x, y);
      r.signals.push_back(s);
      exit_now = similarity && static_decision(s, threshold).exit_now;
    }
    if (policy.kind == PolicyKind::kConfidence || policy.kind == PolicyKind::kPatience) {
      r.logits = output_head(y, params);
      if (policy.kind == PolicyKind::kConfidence) {
        exit_now = confidence_decision(r.logits, policy.confidence_level).exit_now;
      } else {
        votes.push_back(argmax_row(r.logits, 0));
        exit_now = patience_decision(votes, policy.patience).exit_now;
      }
    }
    x = std::move(y);
    if (exit_now) {
      r.exit_layer = l;
      break;
    }
  }
  if (r.logits.empty()) r.logits = output_head(x, params);
  r.token = argmax_row(r.logits, 0);
  for (std::size_t l = r.exit_layer + 1; l <= depth; ++l) caches.append_propagated(l, x.tensor.row(0), params);
  return r;
}

/// Length budget: caption-like tasks may use the whole generation budget;
/// classification answers with one label followed by EOS.
inline std::size_t generation_budget(const SyntheticExample& ex, const ModelConfig& cfg) {
  return ex.task == Task::kEntail ? 2 : cfg.max_gen_len;
}

inline GenerationOutput generate(const SyntheticExample& ex, const ModelParams& params,
                                 const ExitPolicyConfig& policy, const EngineOptions& opt = {}) {
  EncodedExample enc = encode_example(ex, params, policy, opt);
  const Tensor2D memory = layer_norm(enc.combined, params.weights.encoder_norm.gain,
                                     params.weights.encoder_norm.bias);
  DecoderCaches caches = DecoderCaches::build(memory, params);
  GenerationOutput out;
  out.trace = std::move(enc.trace);
  const std::size_t budget = generation_budget(ex, params.config);
  TokenId prev = tokens::kBos;
  for (std::size_t t = 0; t < budget; ++t) {
    StepResult step = decode_step(caches, prev, t, params, policy, opt.profile);
    // a classification answer is a single label; its second step closes it
    if (ex.task == Task::kEntail && t == 1) step.token = tokens::kEos;
    out.tokens.push_back(step.token);
    out.trace.decoder_exits.push_back(step.exit_layer);
    if (opt.profile) out.trace.decoder_signals.push_back(std::move(step.signals));
    if (step.token == tokens::kEos) return out;
    prev = step.token;
  }
  out.hit_budget = true;
  return out;
}

/// Label of a classification example: a single decode step.
inline TokenId classify(const SyntheticExample& ex, const ModelParams& params,
                        const ExitPolicyConfig& policy, const EngineOptions& opt = {}) {
  if (ex.task != Task::kEntail) throw ContractError("classify: example is not a classification task");
  EncodedExample enc = encode_example(ex, params, policy, opt);
  const Tensor2D memory = layer_norm(enc.combined, params.weights.encoder_norm.gain,
                                     params.weights.encoder_norm.bias);
  DecoderCaches caches = DecoderCaches::build(memory, params);
  return decode_step(caches, tokens::kBos, 0, params, policy).token;
}

/// Greedy decoding that recomputes every layer over the whole prefix at every
/// step, with no caches and no exits. Reference for the incremental engine.
inline std::vector<TokenId> reference_generate(const SyntheticExample& ex, const ModelParams& params) {
  const PlainOps ops;
  const auto& cfg = params.config;
  const Tensor2D image_embed = embed_image(ex.grid, params).tensor;
  const Tensor2D image = encode_all_layers(ops, params.weights, cfg, image_embed,
                                           relative_bias_2d(cfg.grid_side, params)).back();
  Tensor2D text = embed_text(ex.text, params).tensor;
  if (text.rows() > 0) {
    text = encode_all_layers(ops, params.weights, cfg, text, relative_bias_1d(text.rows(), params)).back();
  }
  const Tensor2D memory = encoder_memory(image, text, params);
  std::vector<TokenId> inputs{tokens::kBos};
  std::vector<TokenId> out;
  const std::size_t budget = generation_budget(ex, cfg);
  for (std::size_t t = 0; t < budget; ++t) {
    const Tensor2D last = decode_all_layers(ops, params.weights, cfg, memory, inputs).back();
    const Tensor2D logits = output_logits(ops, params.weights, slice_rows(last, t, t + 1));
    TokenId tok = argmax_row(logits, 0);
    if (ex.task == Task::kEntail && t == 1) tok = tokens::kEos;
    out.push_back(tok);
    if (tok == tokens::kEos) break;
    inputs.push_back(tok);
  }
  return out;
}

}  // namespace mue
