#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mlmem/corpus.hpp"
#include "mlmem/model.hpp"

namespace mlmem {

/// Corpus BLEU-4: uniform weights, brevity penalty, clipped n-gram counts
/// summed over the corpus, add-one smoothing on the 2- to 4-gram
/// precisions. Underscore-joined entities are split before counting.
/// Pairs are (reference, hypothesis). Throws on an empty list.
double corpus_bleu(const std::vector<std::pair<Tokens, Tokens>>& pairs);

struct EntityScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positives = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

/// Micro-averaged entity precision/recall over responses. Predicted entities
/// are the lexicon tokens found in each hypothesis, once per response. With
/// no gold and no predictions anywhere all three scores are 1.
EntityScore entity_f1(const std::vector<std::pair<std::set<std::string>, Tokens>>& pairs,
                      const std::set<std::string>& lexicon);

struct SourceAccuracy {
  std::size_t context_total = 0, context_hit = 0;
  std::size_t kb_total = 0, kb_hit = 0;
  /// Percentages; 0 when a category has no gold entities.
  double context_pct() const { return context_total ? 100.0 * context_hit / context_total : 0.0; }
  double kb_pct() const { return kb_total ? 100.0 * kb_hit / kb_total : 0.0; }
};

/// Share of gold entities of each source that appear in the hypothesis.
SourceAccuracy entity_source_report(const std::vector<std::pair<std::vector<GoldEntity>, Tokens>>& items);

struct ApiCallScore {
  std::size_t calls = 0, calls_exact = 0;
  std::size_t slots = 0, slots_exact = 0;
  double slot_accuracy() const { return slots ? static_cast<double>(slots_exact) / slots : 0.0; }
  double call_accuracy() const { return calls ? static_cast<double>(calls_exact) / calls : 0.0; }
};

/// Per-slot exact match of a predicted API call against the gold call; an
/// unparseable prediction gets every slot wrong.
void score_api_call(const Tokens& gold, const Tokens& predicted, const DomainSchema& schema, ApiCallScore& score);

struct ResponseRecord {
  std::string dialog_id;
  std::string domain;
  std::size_t turn = 0;
  Tokens reference;
  Tokens hypothesis;
  std::vector<std::string> sources;
  bool is_api_call = false;
};

struct EvalReport {
  double bleu = 0.0;
  double entity_precision = 0.0;
  double entity_recall = 0.0;
  double entity_f1 = 0.0;
  std::map<std::string, double> per_domain_f1;
  double source_context_pct = 0.0;
  double source_kb_pct = 0.0;
  double api_slot_accuracy = 0.0;
  double api_call_accuracy = 0.0;
  std::size_t api_calls = 0;
  double token_accuracy = 0.0;  // teacher-forced argmax accuracy
  double loss_per_token = 0.0;
  std::size_t floor_events = 0;
  std::size_t n_responses = 0;
};

struct EvalOptions {
  std::size_t max_len = 40;
  /// Also run the teacher-forced pass for token accuracy and loss.
  bool teacher_forced = true;
};

EvalReport evaluate(Model& model, const std::vector<Dialog>& dialogs, const EvalOptions& options = {},
                    std::vector<ResponseRecord>* responses = nullptr);

std::string report_to_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace mlmem
