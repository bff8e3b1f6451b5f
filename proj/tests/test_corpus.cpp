#include <gtest/gtest.h>

#include <set>

#include "mlmem/corpus.hpp"
#include "test_util.hpp"

using namespace mlmem;
using mlmem::testing::agent;
using mlmem::testing::row;
using mlmem::testing::toy_dialog;
using mlmem::testing::user;

TEST(Tokens, TokenizeLowercasesAndSplits) {
  EXPECT_EQ(tokenize("  Hello   World\tagain "), (Tokens{"hello", "world", "again"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(Tokens, EntitiesAreUnderscoreJoinedAndSplitBack) {
  EXPECT_EQ(canonical_entity("Regal  Resort"), "regal_resort");
  EXPECT_EQ(split_entities({"the", "regal_resort", "."}), (Tokens{"the", "regal", "resort", "."}));
}

TEST(Vocab, SpecialsComeFirstAndUnknownMapsToUnk) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.word(Vocabulary::kPad), std::string(kPadToken));
  EXPECT_EQ(v.word(Vocabulary::kEos), std::string(kEosToken));
  const auto id = v.add("cheap");
  EXPECT_EQ(v.add("cheap"), id);
  EXPECT_EQ(v.id("zzz"), Vocabulary::kUnk);
}

namespace {

Dialog hi_dialog(const std::string& id) {
  Dialog d;
  d.id = id;
  d.domain = "restaurant";
  d.turns = {user("hi"), agent("hello there")};
  return d;
}

}  // namespace

TEST(Vocab, MinFrequencyThreshold) {
  std::vector<Dialog> ds{hi_dialog("a"), hi_dialog("b"), hi_dialog("c")};
  ds[1].turns[1] = agent("hi");
  ds[2].turns[1] = agent("bye");
  VocabOptions two;
  two.min_freq = 2;
  auto v = build_vocab(ds, two);
  EXPECT_TRUE(v.contains("hi"));
  EXPECT_TRUE(v.contains("hello") == false);
  EXPECT_FALSE(v.contains("bye"));
  VocabOptions none;
  none.min_freq = 0;
  auto all = build_vocab(ds, none);
  for (const auto* w : {"hi", "hello", "there", "bye"}) EXPECT_TRUE(all.contains(w)) << w;
}

TEST(Vocab, EntityLexiconCoversKbAndQueryValues) {
  Dialog d = toy_dialog();
  auto lex = entity_lexicon({d});
  std::set<std::string> brute;
  for (const auto& aq : d.queries) {
    for (const auto& [k, v] : aq.query.slots) brute.insert(v);
    for (const auto& r : aq.query.results)
      for (const auto& [k, v] : r.cells) brute.insert(v);
  }
  EXPECT_EQ(lex, brute);
}

TEST(Vocab, OpenClassKbOnlyValuesAreCopyOnly) {
  Dialog d = toy_dialog();
  auto v = build_vocab({d});
  // names only appear in results: not embedded, not generatable
  EXPECT_FALSE(v.contains("noodle_bar"));
  EXPECT_FALSE(v.decode_index("pizza_hut").has_value());
  // values the user says stay ordinary words
  EXPECT_TRUE(v.decode_index("cheap").has_value());
  EXPECT_TRUE(v.contains("south"));
  EXPECT_TRUE(v.is_entity("pizza_hut"));
}

TEST(ApiCall, CanonicalFormFollowsSlotOrder) {
  const auto& rest = domain_schema("restaurant");
  EXPECT_EQ(join_tokens(canonicalize_api_call({{"area", "south"}, {"pricerange", "cheap"}}, rest)),
            "api_call dontcare south cheap");
  EXPECT_EQ(join_tokens(canonicalize_api_call({}, rest)), "api_call dontcare dontcare dontcare");
  const auto& travel = domain_schema("travel");
  std::map<std::string, std::string> full{{"children", "2"}, {"adults", "3"}, {"duration", "5"},
                                          {"budget", "$3000"}, {"end_date", "aug_10"},
                                          {"start_date", "aug_5"}, {"origin", "dallas"},
                                          {"destination", "mannheim"}};
  EXPECT_EQ(join_tokens(canonicalize_api_call(full, travel)),
            "api_call mannheim dallas aug_5 aug_10 $3000 5 3 2");
}

TEST(ApiCall, ParseInvertsCanonicalForm) {
  const auto& rest = domain_schema("restaurant");
  std::map<std::string, std::string> slots{{"food", "thai"}, {"pricerange", "cheap"}};
  EXPECT_EQ(parse_api_call(canonicalize_api_call(slots, rest), rest), slots);
  EXPECT_FALSE(parse_api_call({"api_call", "thai"}, rest).has_value());
  EXPECT_FALSE(parse_api_call({"hello", "a", "b", "c"}, rest).has_value());
}

TEST(ApiCall, DistinctSlotMapsGiveDistinctCalls) {
  const auto& rest = domain_schema("restaurant");
  const std::vector<std::string> foods{"thai", "indian"}, areas{"north", "south"}, prices{"cheap"};
  std::set<Tokens> seen;
  std::size_t n = 0;
  for (int mask = 0; mask < 8; ++mask)
    for (const auto& f : foods)
      for (const auto& a : areas) {
        std::map<std::string, std::string> s;
        if (mask & 1) s["food"] = f;
        if (mask & 2) s["area"] = a;
        if (mask & 4) s["pricerange"] = prices[0];
        seen.insert(canonicalize_api_call(s, rest));
        ++n;
      }
  std::set<std::map<std::string, std::string>> maps;
  for (const auto& call : seen) maps.insert(*parse_api_call(call, rest));
  EXPECT_EQ(seen.size(), maps.size());
}

TEST(Dataset, MinimalDialogParses) {
  auto ds = parse_dataset(R"({"domain": "restaurant", "dialogs": [
      {"id": "x", "turns": [{"role": "user", "text": "Hi"}]}]})");
  ASSERT_EQ(ds.dialogs.size(), 1u);
  EXPECT_TRUE(ds.dialogs[0].queries.empty());
  EXPECT_EQ(ds.dialogs[0].turns[0].text, Tokens{"hi"});
}

TEST(Dataset, RoundTripsThroughJson) {
  Dataset ds{"restaurant", {toy_dialog()}};
  Dialog incar;
  incar.id = "car";
  incar.domain = "weather";
  incar.turns = {user("will it rain in paris"), agent("no rain in paris today")};
  incar.kb = std::vector<KBResult>{row({{"location", "paris"}, {"weather", "no_rain"}})};
  Dataset car{"incar", {incar}};
  EXPECT_EQ(parse_dataset(dataset_to_json(ds)), ds);
  EXPECT_EQ(parse_dataset(dataset_to_json(car)).dialogs[0].kb, incar.kb);
  EXPECT_EQ(parse_dataset(dataset_to_json(car)), car);
  auto syn = generate_synthetic({});
  Dataset s{"travel", syn};
  EXPECT_EQ(parse_dataset(dataset_to_json(s)), s);
}

TEST(Dataset, ErrorsNameDialogAndTurn) {
  auto expect_error = [](const std::string& json, const std::string& needle) {
    try {
      parse_dataset(json);
      FAIL() << "expected an error mentioning " << needle;
    } catch (const DatasetError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("{not json", "malformed");
  expect_error(R"({"domain": "space", "dialogs": []})", "unknown domain");
  expect_error(R"({"domain": "restaurant", "dialogs": [{"id": "d7", "turns": [
      {"role": "user", "text": "a"}, {"role": "user", "text": "b"}]}]})", "d7");
  expect_error(R"({"domain": "restaurant", "dialogs": [{"id": "d8", "turns": [
      {"role": "user", "text": "a"}, {"role": "agent", "text": ""}]}]})", "turn 1");
  expect_error(R"({"domain": "restaurant", "dialogs": [{"id": "d9", "turns": [
      {"role": "user", "text": "a"}, {"role": "agent", "text": "b"}],
      "queries": [{"anchor_turn": 1, "slots": {"colour": "red"}, "results": []}]}]})", "unknown slot");
}

TEST(Dataset, VisibleQueriesAreCausalAndDeduplicated) {
  Dialog d = toy_dialog();
  EXPECT_TRUE(visible_queries(d, 1).empty());
  EXPECT_EQ(visible_queries(d, 3).size(), 1u);
  EXPECT_EQ(visible_queries(d, 5).size(), 1u);
  EXPECT_EQ(visible_queries(d, 7).size(), 2u);
  d.queries.push_back({5, d.queries[0].query});
  EXPECT_EQ(visible_queries(d, 7).size(), 2u);
}

TEST(Dataset, GoldEntitiesAreTaggedBySource) {
  Dialog d = toy_dialog();
  const auto& call = d.turns[1].gold_entities;
  ASSERT_EQ(call.size(), 2u);
  EXPECT_EQ(call[0], (GoldEntity{"south", EntitySource::Context}));
  const auto& answer = d.turns[3].gold_entities;
  EXPECT_EQ(answer[0], (GoldEntity{"pizza_hut", EntitySource::KB}));
  EXPECT_EQ(answer[1], (GoldEntity{"cheap", EntitySource::Context}));
  EXPECT_TRUE(unsupported_kb_entities(d).empty());
}

TEST(Synthetic, SameSeedSameBytes) {
  SyntheticConfig c;
  c.n_dialogs = 20;
  c.non_sequential_rate = 0.5;
  EXPECT_EQ(dataset_to_json({"travel", generate_synthetic(c)}), dataset_to_json({"travel", generate_synthetic(c)}));
  c.domain_template = "restaurant";
  EXPECT_EQ(dataset_to_json({"restaurant", generate_synthetic(c)}),
            dataset_to_json({"restaurant", generate_synthetic(c)}));
}

TEST(Synthetic, DialogsValidateAndGoldIsSupported) {
  for (const char* tmpl : {"travel", "restaurant"}) {
    SyntheticConfig c;
    c.n_dialogs = 50;
    c.domain_template = tmpl;
    c.max_queries = 3;
    c.non_sequential_rate = 0.5;
    for (const auto& d : generate_synthetic(c)) {
      validate_dialog(d, tmpl);
      EXPECT_TRUE(unsupported_kb_entities(d).empty()) << d.id;
    }
  }
}

namespace {

// Index of the query whose results hold every KB entity of the final answer.
std::optional<std::size_t> answer_query(const Dialog& d) {
  const Turn& last = d.turns.back();
  std::optional<std::size_t> found;
  for (std::size_t q = 0; q < d.queries.size(); ++q) {
    bool all = true;
    for (const auto& g : last.gold_entities) {
      if (g.source != EntitySource::KB) continue;
      bool here = false;
      for (const auto& r : d.queries[q].query.results)
        for (const auto& [k, v] : r.cells) here = here || v == g.value;
      all = all && here;
    }
    if (all && !found) found = q;
  }
  return found;
}

}  // namespace

TEST(Synthetic, NonSequentialRateControlsWhichQueryIsReferenced) {
  SyntheticConfig c;
  c.n_dialogs = 40;
  c.max_queries = 2;
  c.non_sequential_rate = 0.0;
  std::vector<SyntheticDialogInfo> info;
  auto seq = generate_synthetic(c, &info);
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_EQ(info[i].referenced_query + 1, info[i].n_queries);
  c.non_sequential_rate = 1.0;
  auto nonseq = generate_synthetic(c, &info);
  std::size_t two = 0;
  for (std::size_t i = 0; i < nonseq.size(); ++i) {
    if (info[i].n_queries < 2) continue;
    ++two;
    EXPECT_EQ(info[i].referenced_query, 0u);
    EXPECT_EQ(answer_query(nonseq[i]), std::optional<std::size_t>(0)) << nonseq[i].id;
  }
  EXPECT_GT(two, 0u);
}

TEST(Synthetic, PartitionsGiveDisjointCopyEntities) {
  SyntheticConfig even;
  even.n_dialogs = 100;
  even.partition = EntityPartition::Even;
  SyntheticConfig odd = even;
  odd.partition = EntityPartition::Odd;
  odd.seed = 2;
  auto kb_values = [](const std::vector<Dialog>& ds) {
    std::set<std::string> out;
    const auto& open = domain_schema("travel").open_class_keys;
    for (const auto& r : collect_kb_rows(ds))
      for (const auto& [k, v] : r.cells)
        if (std::find(open.begin(), open.end(), k) != open.end()) out.insert(v);
    return out;
  };
  auto a = kb_values(generate_synthetic(even));
  auto b = kb_values(generate_synthetic(odd));
  for (const auto& v : a) EXPECT_FALSE(b.count(v)) << v;
}

TEST(Kb, JsonRoundTrip) {
  std::vector<KBResult> rows{row({{"name", "pizza_hut"}, {"area", "south"}})};
  std::string domain;
  EXPECT_EQ(parse_kb(kb_to_json("restaurant", rows), &domain), rows);
  EXPECT_EQ(domain, "restaurant");
  EXPECT_EQ(parse_kb(R"([{"name": "Pizza Hut"}])")[0].cells[0].second, "pizza_hut");
}
