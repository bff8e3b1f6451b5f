#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mlmem/corpus.hpp"
#include "mlmem/encoder.hpp"
#include "mlmem/kb_memory.hpp"
#include "mlmem/model.hpp"
#include "mlmem/numerics.hpp"

namespace mlmem {

/// Model weights bound to one tape.
template <typename Real>
struct BoundModel {
  Tape<Real>* tape = nullptr;
  ModelParams<Real>* params = nullptr;
  ModelConfig config;
  GruVars enc_fwd, enc_bwd, ctx_gru, dec_gru;
  Var W1, b1, W2, W3, w1, W4, w2, W5, w3, W6, w4, W7, b2, W8, b3;
};

template <typename Real>
BoundModel<Real> bind_model(Tape<Real>& tape, ModelParams<Real>& params, const ModelConfig& config);

/// Tape nodes of one decoding step.
template <typename Real>
struct StepGraph {
  Var h;
  Var a;      // context attention over every (utterance, word) position
  Var d;      // attended context, [2H]
  Var p_gen;  // over the decode vocabulary
  bool has_memory = false;
  Var alpha;        // per query
  Var beta;         // per result, normalized within each query
  Var gamma;        // per cell, normalized within each result
  Var cell_weight;  // alpha * beta * gamma for every cell
  Var m;            // attended memory, [E]
  Var g1;           // generate vs copy
  Var g2;           // kb copy vs context copy; constant 0 when memory is empty
};

using WordProbs = std::vector<std::pair<std::string, double>>;

/// Attention mass per distinct context word, in order of first appearance.
WordProbs context_copy_dist(std::span<const double> a, const std::vector<Tokens>& token_grid);

/// Probability of each distinct cell value: sum of alpha_i beta_ij gamma_ijl
/// over the cells holding it, in order of first appearance.
WordProbs kb_copy_dist(std::span<const double> alpha, std::span<const double> beta, std::span<const double> gamma,
                       const MemoryLayout& layout);

/// Component and mixed distributions of one step, in plain numbers.
struct StepDistributions {
  std::vector<std::string> gen_words;  // decode vocabulary order
  std::vector<double> p_gen;
  WordProbs p_con;
  WordProbs p_kb;  // empty when the memory is empty
  double g1 = 0.0;
  double g2 = 0.0;

  /// Union of gen_words, then new context words, then new KB values.
  std::vector<std::string> words;
  std::vector<double> p_final;
  /// Route contributions to p_final, aligned with `words`.
  std::vector<double> from_gen, from_context, from_kb;

  double final_prob(const std::string& word) const;
};

/// p_final = g1 p_gen + (1 - g1) (g2 p_kb + (1 - g2) p_con), absent entries
/// counting as zero.
StepDistributions mix(std::vector<std::string> gen_words, std::vector<double> p_gen, WordProbs p_con, WordProbs p_kb,
                      double g1, double g2);

struct TraceStep {
  std::vector<double> a, alpha, beta, gamma;
  double g1 = 0.0, g2 = 0.0;
  std::string token;
  std::string source;  // vocab | context | kb
};

struct DecodeResult {
  Tokens tokens;  // without the end token
  std::vector<std::string> sources;
  /// Filled only when a trace is requested.
  std::vector<TraceStep> trace;
  std::vector<Tokens> context;
  MemoryLayout memory;
};

/// Everything needed to decode one agent turn: context encoding, memory and
/// their per-turn projections.
template <typename Real>
class TurnDecoder {
 public:
  TurnDecoder(BoundModel<Real>& model, const Vocabulary& vocab, ContextEncoding context, MultiLevelMemory<Real> memory,
              std::map<std::size_t, Var>* projection_cache = nullptr);

  const ContextEncoding& context() const { return context_; }
  const MultiLevelMemory<Real>& memory() const { return memory_; }

  Var initial_state() const { return context_.context_state; }
  /// One decoder GRU step on the embedding of `token_id`.
  Var advance(Var h_prev, std::size_t token_id);
  /// Decoder states for a whole teacher-forced input sequence.
  std::vector<Var> teacher_states(const std::vector<std::size_t>& input_ids);

  StepGraph<Real> step(Var h);
  /// P(word) under the final mixture, as a [1] node.
  Var probability(const StepGraph<Real>& step, const std::string& word);
  StepDistributions distributions(const StepGraph<Real>& step) const;

  DecodeResult decode_greedy(std::size_t max_len, bool keep_trace);

 private:
  Var offset(Var scores);
  Var zero();

  BoundModel<Real>& model_;
  Tape<Real>& tape_;
  const Vocabulary& vocab_;
  ContextEncoding context_;
  MultiLevelMemory<Real> memory_;
  std::vector<std::string> flat_words_;
  std::map<std::string, std::vector<std::size_t>> word_positions_;
  std::map<std::string, std::vector<std::size_t>> value_cells_;
  Var context_proj_;  // W3 applied to every word state
  Var query_proj_, result_proj_, key_proj_;
  Var zero_;
};

struct TurnLoss {
  std::vector<Var> log_probs;
  std::size_t tokens = 0;
  std::size_t floor_events = 0;
  std::size_t correct = 0;  // argmax of p_final equals the gold token
};

/// Per-dialog graph: binds the weights once and shares utterance encodings
/// and context projections between the dialog's turns.
template <typename Real>
class DialogGraph {
 public:
  DialogGraph(Tape<Real>& tape, ModelParams<Real>& params, const ModelConfig& config, const Vocabulary& vocab);

  TurnDecoder<Real> turn(const std::vector<Turn>& turns, std::size_t turn_index, const std::vector<KBQuery>& visible,
                         const std::string& dialog_domain);

  /// Teacher-forced log P(gold) for every token of `target` plus the end
  /// token, floored at 1e-12.
  TurnLoss teacher_forced(TurnDecoder<Real>& decoder, const Tokens& target, bool count_correct);

  BoundModel<Real>& model() { return model_; }

 private:
  Tape<Real>& tape_;
  BoundModel<Real> model_;
  const Vocabulary& vocab_;
  DialogEncoder<Real> encoder_;
  std::map<std::size_t, Var> projections_;
};

inline constexpr double kProbabilityFloor = 1e-12;

struct DialogLoss {
  Var total;  // sum of -log P over every agent token
  std::size_t tokens = 0;
  std::size_t floor_events = 0;
  std::size_t correct = 0;
};

/// Teacher-forced loss over every agent turn (API calls included). Each turn
/// sees only queries anchored before it.
template <typename Real>
DialogLoss dialog_loss(Tape<Real>& tape, ModelParams<Real>& params, const ModelConfig& config,
                       const Vocabulary& vocab, const Dialog& dialog, bool count_correct = false);

struct TurnPrediction {
  std::size_t turn = 0;
  DecodeResult result;
};

/// Greedy responses for every agent turn, each conditioned on the gold
/// history before it.
std::vector<TurnPrediction> predict_dialog(Model& model, const Dialog& dialog, std::size_t max_len,
                                           bool keep_trace = false);

/// Greedy response for turns[turn_index] given the history and the visible queries.
DecodeResult predict_turn(Model& model, const std::vector<Turn>& turns, std::size_t turn_index,
                          const std::vector<KBQuery>& visible, const std::string& dialog_domain, std::size_t max_len,
                          bool keep_trace = false);

/// JSON document describing one traced turn: context grid, memory layout and
/// per-step attention levels and gates.
std::string trace_to_json(const DecodeResult& result);

}  // namespace mlmem
