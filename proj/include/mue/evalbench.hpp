#pragma once

// Efficiency and quality measurement: the expected time reduction rate
// computed from executed-layer counts, task quality scores, layer-similarity
// saturation profiles and threshold sweeps.

#include <chrono>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mue/data.hpp"
#include "mue/engine.hpp"
#include "mue/exit_policy.hpp"
#include "mue/model.hpp"

namespace mue {

/// How the two encoder exit layers combine into one encoder depth.
enum class EncoderDepthMode {
  kMean,           // (p + q) / 2
  kTokenWeighted,  // (p * image_tokens + q * text_tokens) / (image_tokens + text_tokens)
};

inline EncoderDepthMode parse_encoder_depth_mode(const std::string& s) {
  if (s == "mean") return EncoderDepthMode::kMean;
  if (s == "token_weighted") return EncoderDepthMode::kTokenWeighted;
  throw ContractError("unknown encoder depth mode '" + s + "' (expected mean or token_weighted)");
}

inline void check_trace(const ExitTrace& trace, const ModelConfig& cfg) {
  if (trace.decoder_exits.empty()) throw ContractError("exit trace has no generated tokens");
  auto in_range = [](std::size_t layer, std::size_t depth) { return layer >= 1 && layer <= depth; };
  if (!in_range(trace.image_exit_layer, cfg.n_enc_layers) || !in_range(trace.text_exit_layer, cfg.n_enc_layers)) {
    throw ContractError("exit trace: encoder exit layer outside [1, " + std::to_string(cfg.n_enc_layers) + "]");
  }
  for (std::size_t e : trace.decoder_exits) {
    if (!in_range(e, cfg.n_dec_layers)) {
      throw ContractError("exit trace: decoder exit layer " + std::to_string(e) + " outside [1, " +
                          std::to_string(cfg.n_dec_layers) + "]");
    }
  }
}

/// Encoder layers executed, as a single depth n_E.
inline double encoder_depth(const ExitTrace& trace, EncoderDepthMode mode = EncoderDepthMode::kMean) {
  const double p = static_cast<double>(trace.image_exit_layer);
  const double q = static_cast<double>(trace.text_exit_layer);
  if (mode == EncoderDepthMode::kMean) return (p + q) / 2.0;
  const double ni = static_cast<double>(trace.image_tokens);
  const double nt = static_cast<double>(trace.text_tokens);
  if (ni + nt == 0.0) return (p + q) / 2.0;
  return (p * ni + q * nt) / (ni + nt);
}

/// 1 - (n_E / N_E + sum_i w_i * i / (sum_i w_i * N_D)) / 2, where w_i counts
/// the generated tokens that left the decoder at layer i.
inline double expected_time_reduction(const ExitTrace& trace, const ModelConfig& cfg,
                                      EncoderDepthMode mode = EncoderDepthMode::kMean) {
  check_trace(trace, cfg);
  std::map<std::size_t, std::size_t> histogram;
  for (std::size_t e : trace.decoder_exits) ++histogram[e];
  std::size_t executed = 0;
  std::size_t tokens = 0;
  for (const auto& [layer, count] : histogram) {
    executed += layer * count;
    tokens += count;
  }
  const double encoder_ratio = encoder_depth(trace, mode) / static_cast<double>(cfg.n_enc_layers);
  const double decoder_ratio =
      static_cast<double>(executed) / (static_cast<double>(tokens) * static_cast<double>(cfg.n_dec_layers));
  return 1.0 - (encoder_ratio + decoder_ratio) / 2.0;
}

/// Upper bound on the time reduction: every stack exits at layer 1.
inline double max_time_reduction(const ModelConfig& cfg) {
  return 1.0 - (1.0 / static_cast<double>(cfg.n_enc_layers) + 1.0 / static_cast<double>(cfg.n_dec_layers)) / 2.0;
}

/// Mean of per-example time reductions.
inline double dataset_time_reduction(std::span<const ExitTrace> traces, const ModelConfig& cfg,
                                     EncoderDepthMode mode = EncoderDepthMode::kMean) {
  if (traces.empty()) throw ContractError("dataset_time_reduction: no traces");
  double sum = 0.0;
  for (const auto& t : traces) sum += expected_time_reduction(t, cfg, mode);
  return sum / static_cast<double>(traces.size());
}

// --- quality ------------------------------------------------------------------

struct QualityScores {
  double accuracy = 0.0;     // first token (the label) matches
  double exact_match = 0.0;  // whole sequence matches
  double token_f1 = 0.0;     // mean multiset F1 over content tokens
  std::size_t count = 0;

  /// The headline number for a task: accuracy for entail, exact match for caption.
  double primary(Task task) const { return task == Task::kEntail ? accuracy : exact_match; }
};

inline bool is_content_token(TokenId t) { return t != tokens::kBos && t != tokens::kEos && t != tokens::kPad; }

/// Multiset F1 over content tokens. Two empty sequences score 1.
inline double token_f1(std::span<const TokenId> output, std::span<const TokenId> reference) {
  std::map<TokenId, int> ref_counts;
  std::size_t ref_len = 0;
  for (TokenId t : reference) {
    if (!is_content_token(t)) continue;
    ++ref_counts[t];
    ++ref_len;
  }
  std::size_t out_len = 0;
  std::size_t overlap = 0;
  for (TokenId t : output) {
    if (!is_content_token(t)) continue;
    ++out_len;
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (out_len == 0 && ref_len == 0) return 1.0;
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(out_len);
  const double recall = static_cast<double>(overlap) / static_cast<double>(ref_len);
  return 2.0 * precision * recall / (precision + recall);
}

inline QualityScores quality_scores(const std::vector<std::vector<TokenId>>& outputs,
                                    const std::vector<std::vector<TokenId>>& references) {
  if (outputs.size() != references.size()) {
    throw ContractError("quality_scores: " + std::to_string(outputs.size()) + " outputs vs " +
                        std::to_string(references.size()) + " references");
  }
  if (outputs.empty()) throw ContractError("quality_scores: no examples");
  QualityScores s;
  s.count = outputs.size();
  std::size_t correct = 0;
  std::size_t exact = 0;
  double f1 = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    const auto& r = references[i];
    if (!o.empty() && !r.empty() && o.front() == r.front()) ++correct;
    if (o == r) ++exact;
    f1 += token_f1(o, r);
  }
  const double n = static_cast<double>(outputs.size());
  s.accuracy = static_cast<double>(correct) / n;
  s.exact_match = static_cast<double>(exact) / n;
  s.token_f1 = f1 / n;
  return s;
}

// --- evaluation -----------------------------------------------------------------

struct Evaluation {
  std::vector<GenerationOutput> outputs;
  QualityScores scores;
  double time_reduction = 0.0;
  double wall_ms_per_example = 0.0;
};

struct EvalOptions {
  EngineOptions engine;
  EncoderDepthMode depth_mode = EncoderDepthMode::kMean;
  bool timing = false;
};

/// Generates every example under one policy and scores the result.
inline Evaluation evaluate(const ModelParams& params, const std::vector<SyntheticExample>& dataset,
                           const ExitPolicyConfig& policy, const EvalOptions& opt = {}) {
  if (dataset.empty()) throw ContractError("evaluate: dataset is empty");
  policy.validate();
  Evaluation ev;
  ev.outputs.reserve(dataset.size());
  const auto start = std::chrono::steady_clock::now();
  for (const auto& ex : dataset) ev.outputs.push_back(generate(ex, params, policy, opt.engine));
  const auto stop = std::chrono::steady_clock::now();
  if (opt.timing) {
    ev.wall_ms_per_example =
        std::chrono::duration<double, std::milli>(stop - start).count() / static_cast<double>(dataset.size());
  }
  std::vector<std::vector<TokenId>> outs;
  std::vector<std::vector<TokenId>> refs;
  std::vector<ExitTrace> traces;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    outs.push_back(ev.outputs[i].tokens);
    refs.push_back(dataset[i].target);
    traces.push_back(ev.outputs[i].trace);
  }
  ev.scores = quality_scores(outs, refs);
  ev.time_reduction = dataset_time_reduction(traces, params.config, opt.depth_mode);
  return ev;
}

// --- saturation -------------------------------------------------------------------

struct SaturationProfile {
  // entry i-1 is the mean similarity between layer i and layer i-1
  std::vector<double> image;
  std::vector<double> text;
  std::vector<double> decoder;
};

/// Mean layer-to-layer similarity per stack over the first sample_count
/// examples, with exits disabled. Decoder entries average over every
/// generated token.
inline SaturationProfile saturation_profile(const ModelParams& params, const std::vector<SyntheticExample>& dataset,
                                            std::size_t sample_count) {
  if (sample_count < 1) throw ContractError("saturation_profile: sample_count must be >= 1");
  if (dataset.empty()) throw ContractError("saturation_profile: dataset is empty");
  const std::size_t n = std::min(sample_count, dataset.size());
  const ModelConfig& cfg = params.config;
  SaturationProfile prof{std::vector<double>(cfg.n_enc_layers, 0.0), std::vector<double>(cfg.n_enc_layers, 0.0),
                         std::vector<double>(cfg.n_dec_layers, 0.0)};
  std::size_t text_examples = 0;
  std::size_t decoder_tokens = 0;
  EngineOptions opt;
  opt.profile = true;
  const ExitPolicyConfig never;
  for (std::size_t i = 0; i < n; ++i) {
    const GenerationOutput g = generate(dataset[i], params, never, opt);
    for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) prof.image[l] += g.trace.image_signals[l];
    if (g.trace.text_tokens > 0) {
      for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) prof.text[l] += g.trace.text_signals[l];
      ++text_examples;
    }
    for (const auto& step : g.trace.decoder_signals) {
      for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) prof.decoder[l] += step[l];
      ++decoder_tokens;
    }
  }
  for (double& v : prof.image) v /= static_cast<double>(n);
  if (text_examples > 0) {
    for (double& v : prof.text) v /= static_cast<double>(text_examples);
  }
  for (double& v : prof.decoder) v /= static_cast<double>(decoder_tokens);
  return prof;
}

// --- sweeps -----------------------------------------------------------------------

struct BenchRow {
  std::string policy;
  double theta = 0.0;
  double beta = 0.0;
  double tau = 0.0;
  double time_reduction = 0.0;
  double quality = 0.0;
  double exact_match = 0.0;
  double token_f1 = 0.0;
  std::size_t n_examples = 0;
  double wall_ms_per_example = 0.0;  // zero unless timing was requested
};

/// The policy evaluated at one grid point. Similarity policies use the value
/// as the threshold of every stack, confidence as the probability level and
/// patience as the number of agreeing layers.
inline ExitPolicyConfig policy_at(const ExitPolicyConfig& base, double value) {
  ExitPolicyConfig p = base;
  switch (base.kind) {
    case PolicyKind::kConfidence: p.confidence_level = value; break;
    case PolicyKind::kPatience:
      if (!(value >= 1.0)) throw ContractError("threshold_sweep: patience grid values must be >= 1");
      p.patience = static_cast<std::size_t>(value);
      break;
    default:
      p.theta = value;
      p.theta_image = value;
      p.theta_text = value;
      break;
  }
  return p;
}

inline std::vector<BenchRow> threshold_sweep(const ModelParams& params, const std::vector<SyntheticExample>& dataset,
                                             std::span<const double> grid, const ExitPolicyConfig& base,
                                             const EvalOptions& opt = {}) {
  if (grid.empty()) throw ContractError("threshold_sweep: empty grid");
  const Task task = dataset.empty() ? Task::kEntail : dataset.front().task;
  std::vector<BenchRow> rows;
  rows.reserve(grid.size());
  for (double value : grid) {
    const ExitPolicyConfig policy = policy_at(base, value);
    const Evaluation ev = evaluate(params, dataset, policy, opt);
    BenchRow row;
    row.policy = policy_name(policy.kind);
    row.theta = value;
    row.beta = policy.beta;
    row.tau = policy.tau;
    row.time_reduction = ev.time_reduction;
    row.quality = ev.scores.primary(task);
    row.exact_match = ev.scores.exact_match;
    row.token_f1 = ev.scores.token_f1;
    row.n_examples = dataset.size();
    row.wall_ms_per_example = ev.wall_ms_per_example;
    rows.push_back(std::move(row));
  }
  return rows;
}

// --- CSV --------------------------------------------------------------------------

/// 17 significant digits, enough to round-trip any double.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kBenchCsvHeader =
    "policy,theta,beta,tau,time_reduction,quality,exact_match,token_f1,n_examples,wall_ms_per_example";

inline void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows) {
  out << kBenchCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.policy << ',' << format_real(r.theta) << ',' << format_real(r.beta) << ',' << format_real(r.tau) << ','
        << format_real(r.time_reduction) << ',' << format_real(r.quality) << ',' << format_real(r.exact_match) << ','
        << format_real(r.token_f1) << ',' << r.n_examples << ',' << format_real(r.wall_ms_per_example) << '\n';
  }
}

/// Writes `layer,stack,mean_similarity` rows.
inline void write_saturation_csv(std::ostream& out, const SaturationProfile& prof) {
  out << "layer,stack,mean_similarity\n";
  auto emit = [&out](const char* stack, const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out << (i + 1) << ',' << stack << ',' << format_real(v[i]) << '\n';
  };
  emit("image", prof.image);
  emit("text", prof.text);
  emit("decoder", prof.decoder);
}

}  // namespace mue
