#include <gtest/gtest.h>

#include <algorithm>

#include "mlmem/encoder.hpp"
#include "mlmem/kb_memory.hpp"
#include "test_util.hpp"

using namespace mlmem;
using mlmem::testing::random_gru;
using mlmem::testing::random_tensor;
using mlmem::testing::row;
using mlmem::testing::user;
using mlmem::testing::zero_gru;

namespace {

Vocabulary words(std::initializer_list<const char*> ws) {
  Vocabulary v;
  for (const auto* w : ws) v.add(w);
  return v;
}

std::vector<double> row_of(Tape<double>& t, Var m, std::size_t r) {
  auto s = t.value(t.row(m, r));
  return {s.begin(), s.end()};
}

std::vector<double> emb_row(const Tensor<double>& e, std::size_t id) {
  return {e.data.begin() + id * e.cols(), e.data.begin() + (id + 1) * e.cols()};
}

std::vector<double> plus(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace

TEST(BagOfWords, SumOfTokenEmbeddings) {
  std::mt19937_64 rng(1);
  auto v = words({"cheap", "a", "b"});
  auto e = random_tensor<double>({v.size(), 4}, rng);
  EXPECT_EQ(bow_embed(std::string("cheap"), v, e), emb_row(e, v.id("cheap")));
  auto ab = bow_embed(std::string("a b"), v, e);
  EXPECT_EQ(ab, plus(emb_row(e, v.id("a")), emb_row(e, v.id("b"))));
  auto ba = bow_embed(std::string("b a"), v, e);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(ab[i], ba[i]);
  auto mean = bow_embed(std::string("a b"), v, e, BagMode::Mean);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(mean[i], ab[i] / 2, 1e-15);
  EXPECT_THROW(bow_embed(std::string(""), v, e), std::invalid_argument);
}

TEST(Memory, DegenerateSingleCell) {
  std::mt19937_64 rng(2);
  auto v = words({"rating", "8.86"});
  auto e = random_tensor<double>({v.size(), 3}, rng);
  auto layout = layout_memory({KBQuery{{}, {row({{"rating", "8.86"}})}}}, v);
  Tape<double> t;
  auto mem = build_memory(t, layout, e);
  EXPECT_EQ(t.shape(mem.query_reprs), (Shape{1, 3}));
  EXPECT_EQ(row_of(t, mem.query_reprs, 0), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(row_of(t, mem.result_reprs, 0), emb_row(e, v.id("8.86")));
  EXPECT_EQ(row_of(t, mem.cell_key_embeds, 0), emb_row(e, v.id("rating")));
}

TEST(Memory, QueryAndResultBags) {
  std::mt19937_64 rng(3);
  auto v = words({"dallas", "mannheim", "regal_resort", "$2800", "5.0", "hotel", "price", "category"});
  auto e = random_tensor<double>({v.size(), 5}, rng);
  KBResult shared = row({{"hotel", "regal_resort"}, {"price", "$2800"}, {"category", "5.0"}});
  KBQuery q1{{{"origin", "dallas"}, {"destination", "mannheim"}}, {shared}};
  KBQuery q2{{{"destination", "mannheim"}, {"origin", "dallas"}}, {shared, row({{"hotel", "other"}})}};
  auto layout = layout_memory({q1, q2}, v);
  EXPECT_EQ(layout.n_queries(), 2u);
  EXPECT_EQ(layout.results_per_query, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(layout.cells_per_result, (std::vector<std::size_t>{3, 3, 1}));
  Tape<double> t;
  auto mem = build_memory(t, layout, e);
  auto expect_q = plus(emb_row(e, v.id("dallas")), emb_row(e, v.id("mannheim")));
  for (std::size_t q = 0; q < 2; ++q) {
    auto got = row_of(t, mem.query_reprs, q);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(got[i], expect_q[i], 1e-15);
  }
  EXPECT_EQ(row_of(t, mem.result_reprs, 0), row_of(t, mem.result_reprs, 1));
  // unknown values read the <unk> row
  EXPECT_EQ(row_of(t, mem.result_reprs, 2), emb_row(e, Vocabulary::kUnk));
}

TEST(Memory, CellOrderDoesNotChangeResultBag) {
  std::mt19937_64 rng(4);
  auto v = words({"a", "b", "c", "k1", "k2", "k3"});
  auto e = random_tensor<double>({v.size(), 4}, rng);
  auto l1 = layout_memory({KBQuery{{{"x", "a"}, {"y", "b"}}, {row({{"k1", "a"}, {"k2", "b"}, {"k3", "c"}})}}}, v);
  auto l2 = layout_memory({KBQuery{{{"y", "b"}, {"x", "a"}}, {row({{"k3", "c"}, {"k1", "a"}, {"k2", "b"}})}}}, v);
  Tape<double> t;
  auto m1 = build_memory(t, l1, e), m2 = build_memory(t, l2, e);
  auto r1 = row_of(t, m1.result_reprs, 0), r2 = row_of(t, m2.result_reprs, 0);
  auto q1 = row_of(t, m1.query_reprs, 0), q2 = row_of(t, m2.query_reprs, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(r1[i], r2[i], 1e-15);
    EXPECT_NEAR(q1[i], q2[i], 1e-15);
  }
}

TEST(Memory, RebuildIsBitIdenticalAndEmptyQueriesDrop) {
  std::mt19937_64 rng(5);
  auto v = words({"a", "b"});
  auto e = random_tensor<double>({v.size(), 4}, rng);
  std::vector<KBQuery> qs{KBQuery{{{"x", "a"}}, {}}, KBQuery{{{"x", "b"}}, {row({{"k", "a"}})}}};
  auto layout = layout_memory(qs, v);
  EXPECT_EQ(layout.n_queries(), 1u);
  Tape<double> t;
  auto m1 = build_memory(t, layout, e), m2 = build_memory(t, layout, e);
  auto a = t.value(m1.result_reprs), b = t.value(m2.result_reprs);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  EXPECT_THROW(layout_memory({KBQuery{{}, {KBResult{}}}}, v), std::invalid_argument);
}

TEST(Triples, FlattenKeepsSubjectAsKey) {
  KBResult r = row({{"hotel", "regal_resort"}, {"price", "$2800"}, {"category", "5.0"}});
  auto triples = flatten_to_triples({KBQuery{{}, {r}}}, "hotel");
  EXPECT_EQ(triples, (std::vector<Triple>{{"regal_resort", "price", "$2800"}, {"regal_resort", "category", "5.0"}}));
  EXPECT_TRUE(flatten_to_triples({KBQuery{{}, {row({{"hotel", "x"}})}}}, "hotel").empty());
  EXPECT_EQ(flatten_to_triples({KBQuery{{}, {r, r}}}, "hotel").size(), 4u);
  try {
    flatten_to_triples({KBQuery{{}, {r, row({{"price", "$1"}})}}}, "hotel");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("query 0 result 1"), std::string::npos);
  }
}

TEST(Triples, FlatLayoutHasOneQueryOfSingleCellResults) {
  auto v = words({"hotel", "price", "regal_resort", "$2800"});
  KBResult r = row({{"hotel", "regal_resort"}, {"price", "$2800"}});
  auto flat = layout_flat_memory({KBQuery{{{"destination", "x"}}, {r}}}, "hotel", v);
  EXPECT_EQ(flat.n_queries(), 1u);
  EXPECT_EQ(flat.n_results(), 2u);
  EXPECT_EQ(flat.cell_values, (std::vector<std::string>{"regal_resort", "$2800"}));
  EXPECT_EQ(flat.result_bag_sizes, (std::vector<std::size_t>{2, 2}));
  EXPECT_TRUE(layout_flat_memory({}, "hotel", v).empty());
}

// ---------------------------------------------------------------------------
// Encoder

namespace {

struct EncoderFixture {
  std::size_t E = 3, H = 4;
  Vocabulary vocab = words({"hello", "cheap", "food", "south"});
  std::mt19937_64 rng{11};
  Tensor<double> emb = random_tensor<double>({vocab.size(), E}, rng);
  GruWeights<double> fwd = random_gru<double>(E, H, rng), bwd = random_gru<double>(E, H, rng);
  GruWeights<double> ctx = random_gru<double>(2 * H, H, rng);
};

std::vector<double> vals(Tape<double>& t, Var v) {
  auto s = t.value(v);
  return {s.begin(), s.end()};
}

}  // namespace

TEST(Encoder, EmbeddingLookup) {
  EncoderFixture f;
  Tape<double> t;
  Var e = embed_tokens(t, f.emb, Tokens{"hello"}, f.vocab);
  EXPECT_EQ(vals(t, e), emb_row(f.emb, f.vocab.id("hello")));
  EXPECT_EQ(vals(t, embed_tokens(t, f.emb, Tokens{"zzz"}, f.vocab)), emb_row(f.emb, Vocabulary::kUnk));
  Var two = embed_tokens(t, f.emb, Tokens{"cheap", "cheap"}, f.vocab);
  EXPECT_EQ(row_of(t, two, 0), row_of(t, two, 1));
  EXPECT_THROW(embed_tokens(t, f.emb, Tokens{}, f.vocab), std::invalid_argument);
}

TEST(Encoder, SingleWordRunsOneStepEachWay) {
  EncoderFixture f;
  Tape<double> t;
  GruVars fv = bind_gru(t, f.fwd), bv = bind_gru(t, f.bwd);
  Var x = embed_tokens(t, f.emb, Tokens{"food"}, f.vocab);
  auto enc = encode_utterance(t, fv, bv, x);
  auto fwd = vals(t, gru_cell(t, fv, t.row(x, 0), t.zeros({f.H})));
  auto bwd = vals(t, gru_cell(t, bv, t.row(x, 0), t.zeros({f.H})));
  auto state = row_of(t, enc.word_states, 0);
  for (std::size_t i = 0; i < f.H; ++i) {
    EXPECT_NEAR(state[i], fwd[i], 1e-15);
    EXPECT_NEAR(state[f.H + i], bwd[i], 1e-15);
  }
  EXPECT_EQ(vals(t, enc.repr), state);
}

TEST(Encoder, ZeroWeightsGiveZeroStates) {
  EncoderFixture f;
  auto z = zero_gru<double>(f.E, f.H);
  auto zc = zero_gru<double>(2 * f.H, f.H);
  Tape<double> t;
  GruVars zv = bind_gru(t, z), cv = bind_gru(t, zc);
  auto enc = encode_utterance(t, zv, zv, embed_tokens(t, f.emb, Tokens{"cheap", "food"}, f.vocab));
  for (double x : t.value(enc.word_states)) EXPECT_EQ(x, 0.0);
  for (double x : t.value(encode_context(t, cv, {enc.repr}))) EXPECT_EQ(x, 0.0);
}

TEST(Encoder, ReversalSwapsDirections) {
  EncoderFixture f;
  Tape<double> t;
  GruVars fv = bind_gru(t, f.fwd);
  // same weights both ways, so reversal mirrors the halves
  Tokens s{"cheap", "food", "south"};
  Tokens r(s.rbegin(), s.rend());
  auto a = encode_utterance(t, fv, fv, embed_tokens(t, f.emb, s, f.vocab));
  auto b = encode_utterance(t, fv, fv, embed_tokens(t, f.emb, r, f.vocab));
  for (std::size_t j = 0; j < 3; ++j) {
    auto x = row_of(t, a.word_states, j), y = row_of(t, b.word_states, 2 - j);
    for (std::size_t i = 0; i < f.H; ++i) {
      EXPECT_NEAR(x[i], y[f.H + i], 1e-15);
      EXPECT_NEAR(x[f.H + i], y[i], 1e-15);
    }
  }
}

TEST(Encoder, ContextIsOrderSensitiveGruChain) {
  EncoderFixture f;
  Tape<double> t;
  GruVars fv = bind_gru(t, f.fwd), bv = bind_gru(t, f.bwd), cv = bind_gru(t, f.ctx);
  auto u1 = encode_utterance(t, fv, bv, embed_tokens(t, f.emb, Tokens{"hello"}, f.vocab));
  auto u2 = encode_utterance(t, fv, bv, embed_tokens(t, f.emb, Tokens{"cheap", "food"}, f.vocab));
  EXPECT_EQ(vals(t, encode_context(t, cv, {u1.repr})), vals(t, gru_cell(t, cv, u1.repr, t.zeros({f.H}))));
  EXPECT_NE(vals(t, encode_context(t, cv, {u1.repr, u2.repr})), vals(t, encode_context(t, cv, {u2.repr, u1.repr})));
}

TEST(Encoder, WordStatesDependOnlyOnTheirUtterance) {
  EncoderFixture f;
  std::vector<Turn> a{user("hello"), user("cheap food"), user("south")};
  std::vector<Turn> b{user("hello"), user("food south cheap"), user("south")};
  Tape<double> t;
  GruVars fv = bind_gru(t, f.fwd), bv = bind_gru(t, f.bwd), cv = bind_gru(t, f.ctx);
  DialogEncoder<double> ea(t, f.emb, fv, bv, cv, f.vocab, true), eb(t, f.emb, fv, bv, cv, f.vocab, true);
  auto ca = ea.encode(a, 3), cb = eb.encode(b, 3);
  for (std::size_t u : {0u, 2u})
    EXPECT_EQ(vals(t, ca.utterance_word_states[u]), vals(t, cb.utterance_word_states[u]));
  EXPECT_NE(vals(t, ca.context_state), vals(t, cb.context_state));
}

TEST(Encoder, ContextStateGradientReachesEveryUtterance) {
  EncoderFixture f;
  std::vector<Turn> turns{user("hello"), user("cheap food"), user("south")};
  Tape<double> t;
  f.emb.zero_grad();
  GruVars fv = bind_gru(t, f.fwd), bv = bind_gru(t, f.bwd), cv = bind_gru(t, f.ctx);
  DialogEncoder<double> enc(t, f.emb, fv, bv, cv, f.vocab, true);
  auto c = enc.encode(turns, 3);
  t.backward(t.sum(c.context_state));
  for (const auto* w : {"hello", "cheap", "south"}) {
    auto g = emb_row(Tensor<double>({f.emb.shape}, f.emb.grad), f.vocab.id(w));
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; })) << w;
  }
}

TEST(Encoder, CachedPrefixEqualsFreshEncoding) {
  EncoderFixture f;
  std::vector<Turn> turns{user("hello"), user("cheap food"), user("south"), user("food")};
  Tape<double> t;
  GruVars fv = bind_gru(t, f.fwd), bv = bind_gru(t, f.bwd), cv = bind_gru(t, f.ctx);
  DialogEncoder<double> cached(t, f.emb, fv, bv, cv, f.vocab, true);
  cached.encode(turns, 1);
  cached.encode(turns, 2);
  auto c = cached.encode(turns, 4);
  DialogEncoder<double> fresh(t, f.emb, fv, bv, cv, f.vocab, true);
  auto d = fresh.encode(turns, 4);
  EXPECT_EQ(vals(t, c.context_state), vals(t, d.context_state));
  EXPECT_EQ(vals(t, c.word_states), vals(t, d.word_states));
  EXPECT_EQ(c.n_words(), 5u);
}

TEST(Encoder, EmptyHistoryReadsSilence) {
  EncoderFixture f;
  std::vector<Turn> turns{user("hello")};
  Tape<double> t;
  GruVars fv = bind_gru(t, f.fwd), bv = bind_gru(t, f.bwd), cv = bind_gru(t, f.ctx);
  DialogEncoder<double> enc(t, f.emb, fv, bv, cv, f.vocab, true);
  auto c = enc.encode(turns, 0);
  ASSERT_EQ(c.token_grid.size(), 1u);
  EXPECT_EQ(c.token_grid[0], Tokens{std::string(kSilenceToken)});
  EXPECT_EQ(c.source_turns[0], ContextEncoding::kSilence);
}
