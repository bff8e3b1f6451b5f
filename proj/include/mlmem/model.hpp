#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mlmem/numerics.hpp"
#include "mlmem/vocab.hpp"

namespace mlmem {

enum class ScorerKind { Nested, Single };
enum class MemoryKind { MultiLevel, Flat };
enum class BagMode { Sum, Mean };

const char* scorer_name(ScorerKind k);
const char* memory_name(MemoryKind k);
const char* bag_name(BagMode m);
ScorerKind parse_scorer(const std::string& s);
MemoryKind parse_memory(const std::string& s);
BagMode parse_bag(const std::string& s);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t decode_vocab_size = 0;
  std::size_t embedding_size = 32;
  std::size_t hidden_size = 64;
  std::size_t attention_size = 64;
  /// Nested: w^T tanh(W2 tanh(W3 [h, e])); Single: w^T tanh(W3 [h, e]).
  ScorerKind scorer = ScorerKind::Nested;
  MemoryKind memory = MemoryKind::MultiLevel;
  BagMode bag = BagMode::Sum;
  bool context_includes_api_calls = true;
  /// Constant added to every pre-softmax score. Softmax ignores it; tests
  /// use it to check that decoding does too.
  double score_offset = 0.0;

  bool operator==(const ModelConfig&) const = default;
};

/// All trainable weights. Naming follows the order the decoder consumes
/// concatenated inputs: context attention reads [h, e], the KB scorers read
/// [d, h, x] and the gates read [h, d, m].
template <typename Real>
struct ModelParams {
  Tensor<Real> embedding;  // [V x E]

  GruWeights<Real> enc_fwd;  // E -> H
  GruWeights<Real> enc_bwd;  // E -> H
  GruWeights<Real> ctx_gru;  // 2H -> H
  GruWeights<Real> dec_gru;  // E -> H

  Tensor<Real> W1, b1;  // [Vd x 3H], [Vd]      generation
  Tensor<Real> W3, W2, w1;  // [A x 3H], [A x A], [A]   context attention
  Tensor<Real> W4, w2;  // [A x (3H + E)], [A]  query level
  Tensor<Real> W5, w3;  // result level
  Tensor<Real> W6, w4;  // cell-key level
  Tensor<Real> W7, b2;  // [1 x (3H + E)], [1]  kb vs context gate
  Tensor<Real> W8, b3;  // generate vs copy gate

  /// Stable (name, tensor) listing used by the optimizer, checkpoints and
  /// gradient checks.
  std::vector<std::pair<std::string, Tensor<Real>*>> named();
  std::vector<std::pair<std::string, const Tensor<Real>*>> named() const;

  void zero_grad();
  std::size_t parameter_count() const;

  template <typename Other>
  ModelParams<Other> cast() const;
};

/// Allocates every tensor with the shapes implied by `config`, uniform in
/// +-1/sqrt(fan_in) for matrices and zero for biases.
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& config, std::uint64_t seed);

/// A trained (or freshly initialized) model with everything needed to run it.
struct Model {
  ModelConfig config;
  Vocabulary vocab;
  /// Dataset domain; selects the API-call schema and the subject key.
  std::string domain;
  ModelParams<float> params;
};

}  // namespace mlmem

namespace mlmem {

template <typename Real>
template <typename Other>
ModelParams<Other> ModelParams<Real>::cast() const {
  ModelParams<Other> out;
  auto src = named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<Other>();
  return out;
}

}  // namespace mlmem
