#include "mlmem/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "mlmem/decoder.hpp"

namespace mlmem {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config

namespace {

ojson config_json(const TrainConfig& c) {
  ojson j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["hidden_size"] = c.hidden_size;
  j["embedding_size"] = c.embedding_size;
  j["attention_size"] = c.attention_size;
  j["max_epochs"] = c.max_epochs;
  j["max_steps"] = c.max_steps;
  j["seed"] = c.seed;
  j["gradient_clip_norm"] = c.gradient_clip_norm;
  j["eval_every"] = c.eval_every;
  j["selection_metric"] = c.selection_metric;
  j["scorer"] = scorer_name(c.scorer);
  j["memory"] = memory_name(c.memory);
  j["bag"] = bag_name(c.bag);
  j["context_includes_api_calls"] = c.context_includes_api_calls;
  j["min_freq"] = c.min_freq;
  j["max_decode_len"] = c.max_decode_len;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["grid_hidden_sizes"] = c.grid_hidden_sizes;
  j["grid_batch_sizes"] = c.grid_batch_sizes;
  return j;
}

ojson model_config_json(const ModelConfig& c) {
  ojson j;
  j["vocab_size"] = c.vocab_size;
  j["decode_vocab_size"] = c.decode_vocab_size;
  j["embedding_size"] = c.embedding_size;
  j["hidden_size"] = c.hidden_size;
  j["attention_size"] = c.attention_size;
  j["scorer"] = scorer_name(c.scorer);
  j["memory"] = memory_name(c.memory);
  j["bag"] = bag_name(c.bag);
  j["context_includes_api_calls"] = c.context_includes_api_calls;
  j["score_offset"] = c.score_offset;
  return j;
}

ModelConfig parse_model_config(const ojson& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.decode_vocab_size = j.at("decode_vocab_size").get<std::size_t>();
  c.embedding_size = j.at("embedding_size").get<std::size_t>();
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.attention_size = j.at("attention_size").get<std::size_t>();
  c.scorer = parse_scorer(j.at("scorer").get<std::string>());
  c.memory = parse_memory(j.at("memory").get<std::string>());
  c.bag = parse_bag(j.at("bag").get<std::string>());
  c.context_includes_api_calls = j.at("context_includes_api_calls").get<bool>();
  c.score_offset = j.at("score_offset").get<double>();
  return c;
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text) {
  ojson j;
  try {
    j = ojson::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw TrainingError(std::string("malformed config JSON: ") + e.what());
  }
  if (!j.is_object()) throw TrainingError("config must be a JSON object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const ojson& v = it.value();
    try {
      if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "hidden_size") c.hidden_size = v.get<std::size_t>();
      else if (k == "embedding_size") c.embedding_size = v.get<std::size_t>();
      else if (k == "attention_size") c.attention_size = v.get<std::size_t>();
      else if (k == "max_epochs") c.max_epochs = v.get<std::size_t>();
      else if (k == "max_steps") c.max_steps = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "gradient_clip_norm") c.gradient_clip_norm = v.get<double>();
      else if (k == "eval_every") c.eval_every = v.get<std::size_t>();
      else if (k == "selection_metric") c.selection_metric = v.get<std::string>();
      else if (k == "scorer") c.scorer = parse_scorer(v.get<std::string>());
      else if (k == "memory") c.memory = parse_memory(v.get<std::string>());
      else if (k == "bag") c.bag = parse_bag(v.get<std::string>());
      else if (k == "context_includes_api_calls") c.context_includes_api_calls = v.get<bool>();
      else if (k == "min_freq") c.min_freq = v.get<std::size_t>();
      else if (k == "max_decode_len") c.max_decode_len = v.get<std::size_t>();
      else if (k == "adam_beta1") c.adam_beta1 = v.get<double>();
      else if (k == "adam_beta2") c.adam_beta2 = v.get<double>();
      else if (k == "adam_epsilon") c.adam_epsilon = v.get<double>();
      else if (k == "grid_hidden_sizes") c.grid_hidden_sizes = v.get<std::vector<std::size_t>>();
      else if (k == "grid_batch_sizes") c.grid_batch_sizes = v.get<std::vector<std::size_t>>();
      else throw TrainingError("unknown config key '" + k + "'");
    } catch (const nlohmann::json::exception&) {
      throw TrainingError("config key '" + k + "' has the wrong type");
    } catch (const std::invalid_argument& e) {
      throw TrainingError(e.what());
    }
  }
  validate(c);
  return c;
}

std::string train_config_to_json(const TrainConfig& config) { return config_json(config).dump(2) + "\n"; }

void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0)) throw TrainingError("learning_rate must be positive");
  if (c.batch_size == 0 || c.hidden_size == 0 || c.embedding_size == 0)
    throw TrainingError("batch_size, hidden_size and embedding_size must be positive");
  if (c.max_epochs == 0) throw TrainingError("max_epochs must be positive");
  if (!(c.gradient_clip_norm > 0)) throw TrainingError("gradient_clip_norm must be positive");
  if (c.max_decode_len == 0) throw TrainingError("max_decode_len must be positive");
  if (c.selection_metric != "entity_f1") throw TrainingError("only entity_f1 selection is supported");
  for (auto h : c.grid_hidden_sizes)
    if (h == 0) throw TrainingError("grid hidden sizes must be positive");
  for (auto b : c.grid_batch_sizes)
    if (b == 0) throw TrainingError("grid batch sizes must be positive");
}

ModelConfig model_config_for(const TrainConfig& t, const Vocabulary& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.decode_vocab_size = vocab.decode_size();
  c.embedding_size = t.embedding_size;
  c.hidden_size = t.hidden_size;
  c.attention_size = t.attention_size ? t.attention_size : t.hidden_size;
  c.scorer = t.scorer;
  c.memory = t.memory;
  c.bag = t.bag;
  c.context_includes_api_calls = t.context_includes_api_calls;
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename Real>
void adam_step(const std::vector<std::pair<std::string, Tensor<Real>*>>& params, AdamState<Real>& state,
               const AdamConfig& config) {
  if (state.m.empty()) {
    for (const auto& [name, t] : params) {
      state.m.emplace_back(t->size(), Real(0));
      state.v.emplace_back(t->size(), Real(0));
    }
  }
  if (state.m.size() != params.size()) throw TrainingError("optimizer state does not match the parameters");
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, t] = params[p];
    if (state.m[p].size() != t->size() || t->grad.size() != t->size())
      throw TrainingError("optimizer state does not match parameter '" + name + "'");
    for (Real g : t->grad)
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + name + "'");
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<Real>& t = *params[p].second;
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = config.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + config.epsilon);
      t.data[i] = static_cast<Real>(t.data[i] - update);
    }
  }
}

template <typename Real>
double clip_gradients(const std::vector<std::pair<std::string, Tensor<Real>*>>& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : params)
    for (Real g : t->grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const Real scale = static_cast<Real>(max_norm / norm);
    for (const auto& [name, t] : params)
      for (Real& g : t->grad) g *= scale;
  }
  return norm;
}

template void adam_step<float>(const std::vector<std::pair<std::string, Tensor<float>*>>&, AdamState<float>&,
                               const AdamConfig&);
template void adam_step<double>(const std::vector<std::pair<std::string, Tensor<double>*>>&, AdamState<double>&,
                                const AdamConfig&);
template double clip_gradients<float>(const std::vector<std::pair<std::string, Tensor<float>*>>&, double);
template double clip_gradients<double>(const std::vector<std::pair<std::string, Tensor<double>*>>&, double);

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::size_t target_tokens(const Dialog& d) {
  std::size_t n = 0;
  for (const auto& t : d.turns)
    if (t.role == Role::Agent) n += t.text.size() + 1;
  return n;
}

}  // namespace

TrainResult train(const std::vector<Dialog>& train_set, const std::vector<Dialog>& valid_set,
                  const std::string& domain, const TrainConfig& cfg, const EvalCallback& on_eval) {
  validate(cfg);
  if (train_set.empty()) throw TrainingError("training set is empty");
  VocabOptions vo;
  vo.min_freq = cfg.min_freq;
  Vocabulary vocab = build_vocab(train_set, vo);
  ModelConfig mc = model_config_for(cfg, vocab);
  Model current{mc, vocab, domain, init_params<float>(mc, cfg.seed)};
  auto params = current.params.named();

  AdamState<float> adam;
  const AdamConfig adam_cfg{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  result.best = current;
  double best_f1 = -1.0;
  double loss_sum = 0.0;
  std::size_t loss_tokens = 0;
  bool stop = false;

  auto run_eval = [&](std::size_t epoch) {
    EvalLog log;
    log.epoch = epoch;
    log.step = result.steps;
    log.train_loss = loss_tokens ? loss_sum / loss_tokens : 0.0;
    loss_sum = 0.0;
    loss_tokens = 0;
    if (!valid_set.empty()) {
      EvalOptions eo;
      eo.max_len = cfg.max_decode_len;
      eo.teacher_forced = false;
      EvalReport r = evaluate(current, valid_set, eo);
      log.valid_bleu = r.bleu;
      log.valid_f1 = r.entity_f1;
    }
    // without a validation split the latest parameters are kept
    if (log.valid_f1 > best_f1 || valid_set.empty()) {
      best_f1 = log.valid_f1;
      result.best = current;
      log.selected = true;
    }
    result.log.push_back(log);
    if (on_eval && on_eval(log, current)) stop = true;
  };

  run_eval(0);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !stop; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::size_t batch_tokens = 0;
      for (std::size_t b = start; b < end; ++b) batch_tokens += target_tokens(train_set[order[b]]);
      if (batch_tokens == 0) continue;
      current.params.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        Tape<float> tape;
        DialogLoss dl = dialog_loss(tape, current.params, current.config, current.vocab, train_set[order[b]]);
        const double value = tape.scalar(dl.total);
        if (!std::isfinite(value)) {
          result.diverged = true;
          result.message = "loss became non-finite at step " + std::to_string(result.steps + 1);
          return result;
        }
        loss_sum += value;
        loss_tokens += dl.tokens;
        result.floor_events += dl.floor_events;
        tape.backward(tape.scale(dl.total, 1.0f / static_cast<float>(batch_tokens)));
      }
      clip_gradients(params, cfg.gradient_clip_norm);
      try {
        adam_step(params, adam, adam_cfg);
      } catch (const TrainingError& e) {
        result.diverged = true;
        result.message = e.what();
        return result;
      }
      ++result.steps;
      if (cfg.eval_every && result.steps % cfg.eval_every == 0) run_eval(epoch);
      if (cfg.max_steps && result.steps >= cfg.max_steps) stop = true;
    }
    if (!cfg.eval_every || (stop && result.log.back().step != result.steps)) run_eval(epoch);
  }
  return result;
}

std::vector<TrainConfig> expand_grid(const TrainConfig& config) {
  auto hidden = config.grid_hidden_sizes.empty() ? std::vector<std::size_t>{config.hidden_size}
                                                 : config.grid_hidden_sizes;
  auto batch = config.grid_batch_sizes.empty() ? std::vector<std::size_t>{config.batch_size}
                                               : config.grid_batch_sizes;
  std::vector<TrainConfig> out;
  for (auto h : hidden)
    for (auto b : batch) {
      TrainConfig c = config;
      c.hidden_size = h;
      c.batch_size = b;
      c.grid_hidden_sizes.clear();
      c.grid_batch_sizes.clear();
      out.push_back(c);
    }
  return out;
}

GridResult train_grid(const std::vector<Dialog>& train_set, const std::vector<Dialog>& valid_set,
                      const std::string& domain, const TrainConfig& config, const EvalCallback& on_eval) {
  GridResult g;
  g.configs = expand_grid(config);
  double best = -1.0;
  for (std::size_t i = 0; i < g.configs.size(); ++i) {
    TrainResult r = train(train_set, valid_set, domain, g.configs[i], on_eval);
    double f1 = -1.0;
    for (const auto& l : r.log)
      if (l.selected) f1 = l.valid_f1;
    g.best_f1.push_back(f1);
    if (f1 > best) {
      best = f1;
      g.best = i;
      g.result = std::move(r);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const std::string& in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

std::string checkpoint_bytes(const Model& model, const TrainConfig* train_config) {
  ojson header;
  header["format_version"] = kCheckpointVersion;
  header["model"] = model_config_json(model.config);
  header["domain"] = model.domain;
  if (train_config) header["train_config"] = config_json(*train_config);
  ojson vocab;
  vocab["words"] = model.vocab.words();
  vocab["decode_ids"] = model.vocab.decode_ids();
  vocab["entities"] = model.vocab.entities();
  header["vocab"] = std::move(vocab);
  ojson tensors = ojson::array();
  std::string payload;
  for (const auto& [name, t] : model.params.named()) {
    tensors.push_back({{"name", name}, {"shape", t->shape}, {"offset", payload.size()}});
    for (float x : t->data) put_f32(payload, x);
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();
  std::string out;
  put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

Model parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw CheckpointError("checkpoint truncated");
  const std::uint64_t header_len = get_u64(bytes, 0);
  if (header_len > bytes.size() - 8) throw CheckpointError("checkpoint header truncated");
  ojson header;
  try {
    header = ojson::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload_at = 8 + header_len;
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint format version");
    Model m;
    m.config = parse_model_config(header.at("model"));
    m.domain = header.at("domain").get<std::string>();
    const auto& vj = header.at("vocab");
    auto words = vj.at("words").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < words.size(); ++i)
      if (m.vocab.add(words[i]) != i) throw CheckpointError("checkpoint vocabulary is inconsistent");
    for (auto id : vj.at("decode_ids").get<std::vector<std::size_t>>()) {
      if (id >= words.size()) throw CheckpointError("decode id out of range");
      m.vocab.add_decode_word(words[id]);
    }
    auto entities = vj.at("entities").get<std::vector<std::string>>();
    m.vocab.entities().insert(entities.begin(), entities.end());

    m.params = init_params<float>(m.config, 0);
    auto named = m.params.named();
    const auto& tj = header.at("tensors");
    if (tj.size() != named.size()) throw CheckpointError("checkpoint tensor count does not match the model");
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto& [name, t] = named[i];
      if (tj[i].at("name").get<std::string>() != name) throw CheckpointError("unexpected tensor '" + tj[i].at("name").get<std::string>() + "'");
      if (tj[i].at("shape").get<Shape>() != t->shape) throw CheckpointError("shape mismatch for tensor '" + name + "'");
      const std::size_t offset = tj[i].at("offset").get<std::size_t>();
      if (payload_at + offset + 4 * t->size() > bytes.size()) throw CheckpointError("checkpoint payload truncated");
      for (std::size_t k = 0; k < t->size(); ++k) t->data[k] = get_f32(bytes, payload_at + offset + 4 * k);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const TrainConfig* train_config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const std::string bytes = checkpoint_bytes(model, train_config);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace mlmem
