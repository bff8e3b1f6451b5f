#include "mlmem/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace mlmem {

const char* scorer_name(ScorerKind k) { return k == ScorerKind::Nested ? "nested" : "single"; }
const char* memory_name(MemoryKind k) { return k == MemoryKind::MultiLevel ? "multilevel" : "flat"; }
const char* bag_name(BagMode m) { return m == BagMode::Sum ? "sum" : "mean"; }

ScorerKind parse_scorer(const std::string& s) {
  if (s == "nested") return ScorerKind::Nested;
  if (s == "single") return ScorerKind::Single;
  throw std::invalid_argument("unknown scorer '" + s + "' (expected nested or single)");
}

MemoryKind parse_memory(const std::string& s) {
  if (s == "multilevel") return MemoryKind::MultiLevel;
  if (s == "flat") return MemoryKind::Flat;
  throw std::invalid_argument("unknown memory kind '" + s + "' (expected multilevel or flat)");
}

BagMode parse_bag(const std::string& s) {
  if (s == "sum") return BagMode::Sum;
  if (s == "mean") return BagMode::Mean;
  throw std::invalid_argument("unknown bag mode '" + s + "' (expected sum or mean)");
}

namespace {

template <typename Real>
void add_gru(std::vector<std::pair<std::string, Tensor<Real>*>>& out, const std::string& prefix,
             GruWeights<Real>& g) {
  out.emplace_back(prefix + ".w_z", &g.w_z);
  out.emplace_back(prefix + ".u_z", &g.u_z);
  out.emplace_back(prefix + ".b_z", &g.b_z);
  out.emplace_back(prefix + ".w_r", &g.w_r);
  out.emplace_back(prefix + ".u_r", &g.u_r);
  out.emplace_back(prefix + ".b_r", &g.b_r);
  out.emplace_back(prefix + ".w_n", &g.w_n);
  out.emplace_back(prefix + ".u_n", &g.u_n);
  out.emplace_back(prefix + ".b_n", &g.b_n);
}

template <typename Real>
Tensor<Real> uniform(Shape shape, std::mt19937_64& rng) {
  const std::size_t fan_in = shape.size() == 2 ? shape[1] : shape[0];
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> data(numel(shape));
  for (auto& x : data) x = static_cast<Real>(dist(rng));
  return Tensor<Real>(std::move(shape), std::move(data), true);
}

// Embedding rows start at unit scale: with the small fixed learning rate,
// fan-in scaled rows would leave word inputs faint for most of training.
template <typename Real>
Tensor<Real> normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Real> data(numel(shape));
  for (auto& x : data) x = static_cast<Real>(dist(rng));
  return Tensor<Real>(std::move(shape), std::move(data), true);
}

template <typename Real>
GruWeights<Real> init_gru(std::size_t input, std::size_t hidden, std::mt19937_64& rng) {
  GruWeights<Real> g;
  g.w_z = uniform<Real>({hidden, input}, rng);
  g.u_z = uniform<Real>({hidden, hidden}, rng);
  g.b_z = Tensor<Real>::zeros({hidden}, true);
  g.w_r = uniform<Real>({hidden, input}, rng);
  g.u_r = uniform<Real>({hidden, hidden}, rng);
  g.b_r = Tensor<Real>::zeros({hidden}, true);
  g.w_n = uniform<Real>({hidden, input}, rng);
  g.u_n = uniform<Real>({hidden, hidden}, rng);
  g.b_n = Tensor<Real>::zeros({hidden}, true);
  return g;
}

}  // namespace

template <typename Real>
std::vector<std::pair<std::string, Tensor<Real>*>> ModelParams<Real>::named() {
  std::vector<std::pair<std::string, Tensor<Real>*>> out;
  out.emplace_back("embedding", &embedding);
  add_gru(out, "encoder.forward", enc_fwd);
  add_gru(out, "encoder.backward", enc_bwd);
  add_gru(out, "context_gru", ctx_gru);
  add_gru(out, "decoder_gru", dec_gru);
  out.emplace_back("W1", &W1);
  out.emplace_back("b1", &b1);
  out.emplace_back("W2", &W2);
  out.emplace_back("W3", &W3);
  out.emplace_back("w1", &w1);
  out.emplace_back("W4", &W4);
  out.emplace_back("w2", &w2);
  out.emplace_back("W5", &W5);
  out.emplace_back("w3", &w3);
  out.emplace_back("W6", &W6);
  out.emplace_back("w4", &w4);
  out.emplace_back("W7", &W7);
  out.emplace_back("b2", &b2);
  out.emplace_back("W8", &W8);
  out.emplace_back("b3", &b3);
  return out;
}

template <typename Real>
std::vector<std::pair<std::string, const Tensor<Real>*>> ModelParams<Real>::named() const {
  auto mut = const_cast<ModelParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor<Real>*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(std::move(name), t);
  return out;
}

template <typename Real>
void ModelParams<Real>::zero_grad() {
  for (auto& [name, t] : named()) t->zero_grad();
}

template <typename Real>
std::size_t ModelParams<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

template <typename Real>
ModelParams<Real> init_params(const ModelConfig& c, std::uint64_t seed) {
  if (c.vocab_size == 0 || c.decode_vocab_size == 0 || c.embedding_size == 0 || c.hidden_size == 0 ||
      c.attention_size == 0)
    throw std::invalid_argument("model sizes must be positive");
  std::mt19937_64 rng(seed);
  const std::size_t E = c.embedding_size, H = c.hidden_size, A = c.attention_size;
  ModelParams<Real> p;
  p.embedding = normal<Real>({c.vocab_size, E}, rng);
  p.enc_fwd = init_gru<Real>(E, H, rng);
  p.enc_bwd = init_gru<Real>(E, H, rng);
  p.ctx_gru = init_gru<Real>(2 * H, H, rng);
  p.dec_gru = init_gru<Real>(E, H, rng);
  p.W1 = uniform<Real>({c.decode_vocab_size, 3 * H}, rng);
  p.b1 = Tensor<Real>::zeros({c.decode_vocab_size}, true);
  p.W3 = uniform<Real>({A, 3 * H}, rng);
  p.W2 = uniform<Real>({A, A}, rng);
  p.w1 = uniform<Real>({A}, rng);
  p.W4 = uniform<Real>({A, 3 * H + E}, rng);
  p.w2 = uniform<Real>({A}, rng);
  p.W5 = uniform<Real>({A, 3 * H + E}, rng);
  p.w3 = uniform<Real>({A}, rng);
  p.W6 = uniform<Real>({A, 3 * H + E}, rng);
  p.w4 = uniform<Real>({A}, rng);
  p.W7 = uniform<Real>({1, 3 * H + E}, rng);
  p.b2 = Tensor<Real>::zeros({1}, true);
  p.W8 = uniform<Real>({1, 3 * H + E}, rng);
  p.b3 = Tensor<Real>::zeros({1}, true);
  return p;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t);

}  // namespace mlmem
