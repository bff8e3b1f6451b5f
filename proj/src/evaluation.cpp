#include "mlmem/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mlmem/decoder.hpp"

namespace mlmem {

namespace {

std::map<Tokens, std::size_t> ngram_counts(const Tokens& tokens, std::size_t n) {
  std::map<Tokens, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Tokens(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

}  // namespace

double corpus_bleu(const std::vector<std::pair<Tokens, Tokens>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("corpus_bleu: no hypotheses");
  constexpr std::size_t kMaxOrder = 4;
  double matches[kMaxOrder] = {}, totals[kMaxOrder] = {};
  double ref_len = 0, hyp_len = 0;
  for (const auto& [ref_raw, hyp_raw] : pairs) {
    Tokens ref = split_entities(ref_raw), hyp = split_entities(hyp_raw);
    ref_len += ref.size();
    hyp_len += hyp.size();
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      auto h = ngram_counts(hyp, n);
      auto r = ngram_counts(ref, n);
      for (const auto& [gram, count] : h) {
        auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += std::min(count, it->second);
        totals[n - 1] += count;
      }
    }
  }
  if (hyp_len == 0 || matches[0] == 0) return 0.0;
  double log_p = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < kMaxOrder; ++n) log_p += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return bp * std::exp(log_p / kMaxOrder);
}

EntityScore entity_f1(const std::vector<std::pair<std::set<std::string>, Tokens>>& pairs,
                      const std::set<std::string>& lexicon) {
  EntityScore s;
  for (const auto& [gold, hyp] : pairs) {
    std::set<std::string> predicted;
    for (const auto& tok : hyp)
      if (lexicon.count(tok)) predicted.insert(tok);
    for (const auto& p : predicted) s.true_positives += gold.count(p);
    s.predicted += predicted.size();
    s.gold += gold.size();
  }
  if (s.predicted == 0 && s.gold == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  s.precision = s.predicted ? static_cast<double>(s.true_positives) / s.predicted : 0.0;
  s.recall = s.gold ? static_cast<double>(s.true_positives) / s.gold : 1.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

SourceAccuracy entity_source_report(const std::vector<std::pair<std::vector<GoldEntity>, Tokens>>& items) {
  SourceAccuracy acc;
  for (const auto& [gold, hyp] : items) {
    for (const auto& g : gold) {
      const bool hit = std::find(hyp.begin(), hyp.end(), g.value) != hyp.end();
      if (g.source == EntitySource::Context) {
        ++acc.context_total;
        acc.context_hit += hit;
      } else {
        ++acc.kb_total;
        acc.kb_hit += hit;
      }
    }
  }
  return acc;
}

void score_api_call(const Tokens& gold, const Tokens& predicted, const DomainSchema& schema, ApiCallScore& score) {
  const std::size_t n_slots = schema.query_slot_order.size();
  ++score.calls;
  score.slots += n_slots;
  if (gold.size() != n_slots + 1) throw std::invalid_argument("gold API call does not match the schema");
  if (predicted == gold) ++score.calls_exact;
  if (!parse_api_call(predicted, schema)) return;
  for (std::size_t i = 1; i <= n_slots; ++i) score.slots_exact += predicted[i] == gold[i];
}

EvalReport evaluate(Model& model, const std::vector<Dialog>& dialogs, const EvalOptions& options,
                    std::vector<ResponseRecord>* responses) {
  std::set<std::string> lexicon = entity_lexicon(dialogs);
  lexicon.insert(model.vocab.entities().begin(), model.vocab.entities().end());

  std::vector<std::pair<Tokens, Tokens>> bleu_pairs;
  std::vector<std::pair<std::set<std::string>, Tokens>> f1_pairs;
  std::map<std::string, std::vector<std::pair<std::set<std::string>, Tokens>>> by_domain;
  std::vector<std::pair<std::vector<GoldEntity>, Tokens>> source_items;
  ApiCallScore api;
  double loss = 0;
  std::size_t tokens = 0, correct = 0;
  EvalReport report;

  for (const auto& d : dialogs) {
    for (auto& pred : predict_dialog(model, d, options.max_len)) {
      const Turn& gold = d.turns[pred.turn];
      std::set<std::string> gold_set;
      for (const auto& g : gold.gold_entities) gold_set.insert(g.value);
      bleu_pairs.emplace_back(gold.text, pred.result.tokens);
      f1_pairs.emplace_back(gold_set, pred.result.tokens);
      by_domain[d.domain].emplace_back(gold_set, pred.result.tokens);
      source_items.emplace_back(gold.gold_entities, pred.result.tokens);
      if (gold.is_api_call) score_api_call(gold.text, pred.result.tokens, schema_for_dialog(d.domain), api);
      if (responses)
        responses->push_back({d.id, d.domain, pred.turn, gold.text, pred.result.tokens, pred.result.sources,
                              gold.is_api_call});
    }
    if (options.teacher_forced) {
      Tape<float> tape;
      DialogLoss dl = dialog_loss(tape, model.params, model.config, model.vocab, d, true);
      loss += tape.scalar(dl.total);
      tokens += dl.tokens;
      correct += dl.correct;
      report.floor_events += dl.floor_events;
    }
  }

  report.n_responses = bleu_pairs.size();
  if (report.n_responses == 0) return report;
  report.bleu = corpus_bleu(bleu_pairs);
  EntityScore es = entity_f1(f1_pairs, lexicon);
  report.entity_precision = es.precision;
  report.entity_recall = es.recall;
  report.entity_f1 = es.f1;
  for (const auto& [domain, pairs] : by_domain) report.per_domain_f1[domain] = entity_f1(pairs, lexicon).f1;
  SourceAccuracy sa = entity_source_report(source_items);
  report.source_context_pct = sa.context_pct();
  report.source_kb_pct = sa.kb_pct();
  report.api_calls = api.calls;
  report.api_slot_accuracy = api.slot_accuracy();
  report.api_call_accuracy = api.call_accuracy();
  if (tokens) {
    report.token_accuracy = static_cast<double>(correct) / tokens;
    report.loss_per_token = loss / tokens;
  }
  return report;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["bleu"] = r.bleu;
  j["entity_precision"] = r.entity_precision;
  j["entity_recall"] = r.entity_recall;
  j["entity_f1"] = r.entity_f1;
  j["per_domain_f1"] = r.per_domain_f1;
  j["source_accuracy"] = {{"context", r.source_context_pct}, {"kb", r.source_kb_pct}};
  j["api_call"] = {{"calls", r.api_calls}, {"slot_accuracy", r.api_slot_accuracy}, {"exact_match", r.api_call_accuracy}};
  j["token_accuracy"] = r.token_accuracy;
  j["loss_per_token"] = r.loss_per_token;
  j["floor_events"] = r.floor_events;
  j["n_responses"] = r.n_responses;
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  char line[128];
  auto row = [&](const char* name, double value) {
    std::snprintf(line, sizeof line, "%-24s %10.4f\n", name, value);
    os << line;
  };
  row("BLEU", r.bleu);
  row("entity precision", r.entity_precision);
  row("entity recall", r.entity_recall);
  row("entity F1", r.entity_f1);
  for (const auto& [domain, f1] : r.per_domain_f1) row(("  F1 " + domain).c_str(), f1);
  row("context entities %", r.source_context_pct);
  row("KB entities %", r.source_kb_pct);
  row("API slot accuracy", r.api_slot_accuracy);
  row("API call exact match", r.api_call_accuracy);
  row("token accuracy", r.token_accuracy);
  row("loss per token", r.loss_per_token);
  std::snprintf(line, sizeof line, "%-24s %10zu\n", "responses", r.n_responses);
  os << line;
  return os.str();
}

}  // namespace mlmem
