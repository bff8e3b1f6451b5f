#include "mlmem/decoder.hpp"

#include <unordered_map>

#include "json.hpp"

namespace mlmem {

template <typename Real>
BoundModel<Real> bind_model(Tape<Real>& tape, ModelParams<Real>& p, const ModelConfig& config) {
  BoundModel<Real> m;
  m.tape = &tape;
  m.params = &p;
  m.config = config;
  m.enc_fwd = bind_gru(tape, p.enc_fwd);
  m.enc_bwd = bind_gru(tape, p.enc_bwd);
  m.ctx_gru = bind_gru(tape, p.ctx_gru);
  m.dec_gru = bind_gru(tape, p.dec_gru);
  m.W1 = tape.param(p.W1);
  m.b1 = tape.param(p.b1);
  m.W2 = tape.param(p.W2);
  m.W3 = tape.param(p.W3);
  m.w1 = tape.param(p.w1);
  m.W4 = tape.param(p.W4);
  m.w2 = tape.param(p.w2);
  m.W5 = tape.param(p.W5);
  m.w3 = tape.param(p.w3);
  m.W6 = tape.param(p.W6);
  m.w4 = tape.param(p.w4);
  m.W7 = tape.param(p.W7);
  m.b2 = tape.param(p.b2);
  m.W8 = tape.param(p.W8);
  m.b3 = tape.param(p.b3);
  return m;
}

// ---------------------------------------------------------------------------
// plain distributions

WordProbs context_copy_dist(std::span<const double> a, const std::vector<Tokens>& token_grid) {
  WordProbs out;
  std::unordered_map<std::string, std::size_t> index;
  std::size_t pos = 0;
  for (const auto& utt : token_grid) {
    for (const auto& w : utt) {
      if (pos >= a.size()) throw ShapeError("context_copy_dist: fewer scores than positions");
      auto [it, fresh] = index.emplace(w, out.size());
      if (fresh) out.emplace_back(w, 0.0);
      out[it->second].second += a[pos++];
    }
  }
  if (pos != a.size()) throw ShapeError("context_copy_dist: more scores than positions");
  return out;
}

WordProbs kb_copy_dist(std::span<const double> alpha, std::span<const double> beta, std::span<const double> gamma,
                       const MemoryLayout& layout) {
  if (alpha.size() != layout.n_queries() || beta.size() != layout.n_results() || gamma.size() != layout.n_cells())
    throw ShapeError("kb_copy_dist: attention sizes do not match the memory");
  WordProbs out;
  std::unordered_map<std::string, std::size_t> index;
  std::size_t result = 0, cell = 0;
  for (std::size_t i = 0; i < layout.n_queries(); ++i) {
    for (std::size_t j = 0; j < layout.results_per_query[i]; ++j, ++result) {
      for (std::size_t l = 0; l < layout.cells_per_result[result]; ++l, ++cell) {
        const std::string& w = layout.cell_values[cell];
        auto [it, fresh] = index.emplace(w, out.size());
        if (fresh) out.emplace_back(w, 0.0);
        out[it->second].second += alpha[i] * beta[result] * gamma[cell];
      }
    }
  }
  return out;
}

StepDistributions mix(std::vector<std::string> gen_words, std::vector<double> p_gen, WordProbs p_con, WordProbs p_kb,
                      double g1, double g2) {
  if (gen_words.size() != p_gen.size()) throw ShapeError("mix: generation words and probabilities differ in length");
  StepDistributions s;
  s.g1 = g1;
  s.g2 = g2;
  std::unordered_map<std::string, std::size_t> index;
  auto slot = [&](const std::string& w) {
    auto [it, fresh] = index.emplace(w, s.words.size());
    if (fresh) {
      s.words.push_back(w);
      s.from_gen.push_back(0.0);
      s.from_context.push_back(0.0);
      s.from_kb.push_back(0.0);
    }
    return it->second;
  };
  for (std::size_t k = 0; k < gen_words.size(); ++k) s.from_gen[slot(gen_words[k])] += g1 * p_gen[k];
  for (const auto& [w, p] : p_con) s.from_context[slot(w)] += (1.0 - g1) * (1.0 - g2) * p;
  for (const auto& [w, p] : p_kb) s.from_kb[slot(w)] += (1.0 - g1) * g2 * p;
  s.p_final.resize(s.words.size());
  for (std::size_t k = 0; k < s.words.size(); ++k) s.p_final[k] = s.from_gen[k] + s.from_context[k] + s.from_kb[k];
  s.gen_words = std::move(gen_words);
  s.p_gen = std::move(p_gen);
  s.p_con = std::move(p_con);
  s.p_kb = std::move(p_kb);
  return s;
}

double StepDistributions::final_prob(const std::string& word) const {
  for (std::size_t k = 0; k < words.size(); ++k)
    if (words[k] == word) return p_final[k];
  return 0.0;
}

// ---------------------------------------------------------------------------
// TurnDecoder

template <typename Real>
TurnDecoder<Real>::TurnDecoder(BoundModel<Real>& model, const Vocabulary& vocab, ContextEncoding context,
                               MultiLevelMemory<Real> memory, std::map<std::size_t, Var>* projection_cache)
    : model_(model),
      tape_(*model.tape),
      vocab_(vocab),
      context_(std::move(context)),
      memory_(std::move(memory)) {
  const std::size_t H = model_.config.hidden_size;
  for (const auto& utt : context_.token_grid)
    for (const auto& w : utt) {
      word_positions_[w].push_back(flat_words_.size());
      flat_words_.push_back(w);
    }

  std::vector<Var> blocks;
  for (std::size_t u = 0; u < context_.source_turns.size(); ++u) {
    const std::size_t key = context_.source_turns[u];
    Var proj;
    if (projection_cache && key != ContextEncoding::kSilence) {
      auto it = projection_cache->find(key);
      if (it == projection_cache->end())
        it = projection_cache->emplace(key, tape_.linear(context_.utterance_word_states[u], model_.W3, H)).first;
      proj = it->second;
    } else {
      proj = tape_.linear(context_.utterance_word_states[u], model_.W3, H);
    }
    blocks.push_back(proj);
  }
  context_proj_ = blocks.size() == 1 ? blocks[0] : tape_.concat_rows(blocks);

  if (!memory_.layout.empty()) {
    for (std::size_t c = 0; c < memory_.layout.n_cells(); ++c) value_cells_[memory_.layout.cell_values[c]].push_back(c);
    query_proj_ = tape_.linear(memory_.query_reprs, model_.W4, 3 * H);
    result_proj_ = tape_.linear(memory_.result_reprs, model_.W5, 3 * H);
    key_proj_ = tape_.linear(memory_.cell_key_embeds, model_.W6, 3 * H);
  }
}

template <typename Real>
Var TurnDecoder<Real>::offset(Var scores) {
  const double off = model_.config.score_offset;
  if (off == 0.0) return scores;
  return tape_.add(scores, tape_.constant(tape_.shape(scores), std::vector<Real>(tape_.size(scores), Real(off))));
}

template <typename Real>
Var TurnDecoder<Real>::zero() {
  if (!zero_.valid()) zero_ = tape_.zeros({1});
  return zero_;
}

template <typename Real>
Var TurnDecoder<Real>::advance(Var h_prev, std::size_t token_id) {
  std::size_t ids[] = {token_id};
  Var x = tape_.lookup(model_.params->embedding, ids);
  auto proj = gru_project_inputs(tape_, model_.dec_gru, x);
  return gru_step_projected(tape_, model_.dec_gru, proj, 0, h_prev);
}

template <typename Real>
std::vector<Var> TurnDecoder<Real>::teacher_states(const std::vector<std::size_t>& input_ids) {
  Var x = tape_.lookup(model_.params->embedding, input_ids);
  auto proj = gru_project_inputs(tape_, model_.dec_gru, x);
  std::vector<Var> states;
  Var h = initial_state();
  for (std::size_t t = 0; t < input_ids.size(); ++t) states.push_back(h = gru_step_projected(tape_, model_.dec_gru, proj, t, h));
  return states;
}

template <typename Real>
StepGraph<Real> TurnDecoder<Real>::step(Var h) {
  auto& T = tape_;
  const auto& M = model_;
  StepGraph<Real> s;
  s.h = h;

  Var hidden = T.tanh(T.add_row(context_proj_, T.linear(h, M.W3, 0)));
  if (M.config.scorer == ScorerKind::Nested) hidden = T.tanh(T.linear(hidden, M.W2));
  s.a = T.softmax(offset(T.matvec(hidden, M.w1)));
  s.d = T.vecmat(s.a, context_.word_states);

  s.p_gen = T.softmax(offset(T.add(T.linear(T.concat({h, s.d}), M.W1), M.b1)));

  const auto& layout = memory_.layout;
  s.has_memory = !layout.empty();
  if (s.has_memory) {
    Var dh = T.concat({s.d, h});
    auto level = [&](Var proj, Var W, Var w) { return offset(T.matvec(T.tanh(T.add_row(proj, T.linear(dh, W))), w)); };
    s.alpha = T.softmax(level(query_proj_, M.W4, M.w2));
    s.beta = T.segment_softmax(level(result_proj_, M.W5, M.w3), layout.results_per_query);
    s.gamma = T.segment_softmax(level(key_proj_, M.W6, M.w4), layout.cells_per_result);
    Var result_weight = T.mul(T.expand(s.alpha, layout.results_per_query), s.beta);
    s.m = T.vecmat(result_weight, memory_.result_reprs);
    s.cell_weight = T.mul(T.expand(result_weight, layout.cells_per_result), s.gamma);
  } else {
    s.m = T.zeros({model_.params->embedding.cols()});
  }

  Var x = T.concat({h, s.d, s.m});
  s.g1 = T.sigmoid(T.add(T.linear(x, M.W8), M.b3));
  s.g2 = s.has_memory ? T.sigmoid(T.add(T.linear(x, M.W7), M.b2)) : T.zeros({1});
  return s;
}

template <typename Real>
Var TurnDecoder<Real>::probability(const StepGraph<Real>& s, const std::string& word) {
  auto& T = tape_;
  Var gen = zero(), con = zero(), kb = zero();
  if (auto k = vocab_.decode_index(word)) gen = T.gather_sum(s.p_gen, {*k});
  if (auto it = word_positions_.find(word); it != word_positions_.end()) con = T.gather_sum(s.a, it->second);
  Var copy = con;
  if (s.has_memory) {
    if (auto it = value_cells_.find(word); it != value_cells_.end()) kb = T.gather_sum(s.cell_weight, it->second);
    copy = T.add(T.mul(s.g2, kb), T.mul(T.one_minus(s.g2), con));
  }
  return T.add(T.mul(s.g1, gen), T.mul(T.one_minus(s.g1), copy));
}

namespace {

template <typename Real>
std::vector<double> to_double(std::span<const Real> v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace

template <typename Real>
StepDistributions TurnDecoder<Real>::distributions(const StepGraph<Real>& s) const {
  std::vector<std::string> gen_words;
  gen_words.reserve(vocab_.decode_size());
  for (auto id : vocab_.decode_ids()) gen_words.push_back(vocab_.word(id));
  auto a = to_double<Real>(tape_.value(s.a));
  WordProbs p_kb;
  if (s.has_memory)
    p_kb = kb_copy_dist(to_double<Real>(tape_.value(s.alpha)), to_double<Real>(tape_.value(s.beta)),
                        to_double<Real>(tape_.value(s.gamma)), memory_.layout);
  return mix(std::move(gen_words), to_double<Real>(tape_.value(s.p_gen)), context_copy_dist(a, context_.token_grid),
             std::move(p_kb), tape_.scalar(s.g1), tape_.scalar(s.g2));
}

namespace {

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

const char* route(const StepDistributions& d, std::size_t k) {
  if (d.from_gen[k] >= d.from_context[k] && d.from_gen[k] >= d.from_kb[k]) return "vocab";
  return d.from_context[k] >= d.from_kb[k] ? "context" : "kb";
}

}  // namespace

template <typename Real>
DecodeResult TurnDecoder<Real>::decode_greedy(std::size_t max_len, bool keep_trace) {
  if (max_len == 0) throw std::invalid_argument("decode_greedy: max_len must be at least 1");
  DecodeResult out;
  if (keep_trace) {
    out.context = context_.token_grid;
    out.memory = memory_.layout;
  }
  Var h = initial_state();
  std::size_t prev = Vocabulary::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    h = advance(h, prev);
    StepGraph<Real> s = step(h);
    StepDistributions dist = distributions(s);
    const std::size_t k = argmax(dist.p_final);
    const std::string& word = dist.words[k];
    const char* source = route(dist, k);
    if (keep_trace) {
      TraceStep ts;
      ts.a = to_double<Real>(tape_.value(s.a));
      if (s.has_memory) {
        ts.alpha = to_double<Real>(tape_.value(s.alpha));
        ts.beta = to_double<Real>(tape_.value(s.beta));
        ts.gamma = to_double<Real>(tape_.value(s.gamma));
      }
      ts.g1 = dist.g1;
      ts.g2 = dist.g2;
      ts.token = word;
      ts.source = source;
      out.trace.push_back(std::move(ts));
    }
    if (word == kEosToken) break;
    out.tokens.push_back(word);
    out.sources.push_back(source);
    prev = vocab_.id(word);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DialogGraph

template <typename Real>
DialogGraph<Real>::DialogGraph(Tape<Real>& tape, ModelParams<Real>& params, const ModelConfig& config,
                               const Vocabulary& vocab)
    : tape_(tape),
      model_(bind_model(tape, params, config)),
      vocab_(vocab),
      encoder_(tape, params.embedding, model_.enc_fwd, model_.enc_bwd, model_.ctx_gru, vocab,
               config.context_includes_api_calls) {}

template <typename Real>
TurnDecoder<Real> DialogGraph<Real>::turn(const std::vector<Turn>& turns, std::size_t turn_index,
                                          const std::vector<KBQuery>& visible, const std::string& dialog_domain) {
  ContextEncoding ctx = encoder_.encode(turns, turn_index);
  MemoryLayout layout = model_.config.memory == MemoryKind::Flat
                            ? layout_flat_memory(visible, subject_key_for(dialog_domain), vocab_)
                            : layout_memory(visible, vocab_);
  auto memory = build_memory(tape_, std::move(layout), model_.params->embedding, model_.config.bag);
  return TurnDecoder<Real>(model_, vocab_, std::move(ctx), std::move(memory), &projections_);
}

template <typename Real>
TurnLoss DialogGraph<Real>::teacher_forced(TurnDecoder<Real>& decoder, const Tokens& target, bool count_correct) {
  std::vector<std::size_t> inputs{Vocabulary::kBos};
  Tokens targets = target;
  for (const auto& w : target) inputs.push_back(vocab_.id(w));
  targets.emplace_back(kEosToken);
  auto states = decoder.teacher_states(inputs);
  TurnLoss out;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    StepGraph<Real> s = decoder.step(states[t]);
    Var p = decoder.probability(s, targets[t]);
    if (tape_.scalar(p) < Real(kProbabilityFloor)) ++out.floor_events;
    out.log_probs.push_back(tape_.log_floor(p, Real(kProbabilityFloor)));
    ++out.tokens;
    if (count_correct) {
      auto dist = decoder.distributions(s);
      if (dist.words[argmax(dist.p_final)] == targets[t]) ++out.correct;
    }
  }
  return out;
}

template <typename Real>
DialogLoss dialog_loss(Tape<Real>& tape, ModelParams<Real>& params, const ModelConfig& config,
                       const Vocabulary& vocab, const Dialog& dialog, bool count_correct) {
  DialogGraph<Real> graph(tape, params, config, vocab);
  DialogLoss out;
  std::vector<Var> logs;
  for (std::size_t k = 0; k < dialog.turns.size(); ++k) {
    if (dialog.turns[k].role != Role::Agent) continue;
    auto decoder = graph.turn(dialog.turns, k, visible_queries(dialog, k), dialog.domain);
    TurnLoss tl = graph.teacher_forced(decoder, dialog.turns[k].text, count_correct);
    logs.insert(logs.end(), tl.log_probs.begin(), tl.log_probs.end());
    out.tokens += tl.tokens;
    out.floor_events += tl.floor_events;
    out.correct += tl.correct;
  }
  out.total = logs.empty() ? tape.zeros({1}) : tape.scale(tape.sum(tape.concat(logs)), Real(-1));
  return out;
}

std::vector<TurnPrediction> predict_dialog(Model& model, const Dialog& dialog, std::size_t max_len, bool keep_trace) {
  Tape<float> tape;
  DialogGraph<float> graph(tape, model.params, model.config, model.vocab);
  std::vector<TurnPrediction> out;
  for (std::size_t k = 0; k < dialog.turns.size(); ++k) {
    if (dialog.turns[k].role != Role::Agent) continue;
    auto decoder = graph.turn(dialog.turns, k, visible_queries(dialog, k), dialog.domain);
    out.push_back({k, decoder.decode_greedy(max_len, keep_trace)});
  }
  return out;
}

DecodeResult predict_turn(Model& model, const std::vector<Turn>& turns, std::size_t turn_index,
                          const std::vector<KBQuery>& visible, const std::string& dialog_domain, std::size_t max_len,
                          bool keep_trace) {
  Tape<float> tape;
  DialogGraph<float> graph(tape, model.params, model.config, model.vocab);
  auto decoder = graph.turn(turns, turn_index, visible, dialog_domain);
  return decoder.decode_greedy(max_len, keep_trace);
}

std::string trace_to_json(const DecodeResult& r) {
  using ojson = nlohmann::ordered_json;
  ojson root;
  root["context"] = r.context;
  ojson queries = ojson::array();
  for (const auto& q : r.memory.queries) {
    ojson qj;
    ojson slots = ojson::object();
    for (const auto& [k, v] : q.slots) slots[k] = v;
    qj["slots"] = std::move(slots);
    ojson results = ojson::array();
    for (const auto& res : q.results) {
      ojson cells = ojson::object();
      for (const auto& [k, v] : res.cells) cells[k] = v;
      results.push_back(std::move(cells));
    }
    qj["results"] = std::move(results);
    queries.push_back(std::move(qj));
  }
  root["memory"] = std::move(queries);

  ojson steps = ojson::array();
  for (const auto& s : r.trace) {
    ojson sj;
    sj["token"] = s.token;
    sj["source"] = s.source;
    sj["g1"] = s.g1;
    sj["g2"] = s.g2;
    // regroup the flat vectors by the structure they are normalized over
    ojson a = ojson::array();
    std::size_t pos = 0;
    for (const auto& utt : r.context) {
      ojson row = ojson::array();
      for (std::size_t j = 0; j < utt.size() && pos < s.a.size(); ++j) row.push_back(s.a[pos++]);
      a.push_back(std::move(row));
    }
    sj["a"] = std::move(a);
    sj["alpha"] = s.alpha;
    ojson beta = ojson::array(), gamma = ojson::array();
    if (!s.beta.empty()) {
      std::size_t res = 0, cell = 0;
      for (auto n_res : r.memory.results_per_query) {
        ojson row = ojson::array();
        for (std::size_t j = 0; j < n_res; ++j, ++res) {
          row.push_back(s.beta[res]);
          ojson cells = ojson::array();
          for (std::size_t l = 0; l < r.memory.cells_per_result[res]; ++l) cells.push_back(s.gamma[cell++]);
          gamma.push_back(std::move(cells));
        }
        beta.push_back(std::move(row));
      }
    }
    sj["beta"] = std::move(beta);
    sj["gamma"] = std::move(gamma);
    steps.push_back(std::move(sj));
  }
  root["steps"] = std::move(steps);
  return root.dump(1) + "\n";
}

#define MLMEM_INSTANTIATE(Real)                                                                                \
  template BoundModel<Real> bind_model<Real>(Tape<Real>&, ModelParams<Real>&, const ModelConfig&);            \
  template class TurnDecoder<Real>;                                                                            \
  template class DialogGraph<Real>;                                                                            \
  template DialogLoss dialog_loss<Real>(Tape<Real>&, ModelParams<Real>&, const ModelConfig&, const Vocabulary&, \
                                        const Dialog&, bool);

MLMEM_INSTANTIATE(float)
MLMEM_INSTANTIATE(double)

#undef MLMEM_INSTANTIATE

}  // namespace mlmem
