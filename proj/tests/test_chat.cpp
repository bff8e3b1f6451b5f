#include <gtest/gtest.h>

#include "mlmem/chat.hpp"
#include "test_util.hpp"

using namespace mlmem;
using mlmem::testing::row;
using mlmem::testing::toy_model;

namespace {

std::vector<KBResult> table() {
  return {row({{"name", "pizza_hut"}, {"area", "south"}, {"pricerange", "cheap"}}),
          row({{"name", "noodle_bar"}, {"area", "south"}, {"pricerange", "cheap"}}),
          row({{"name", "curry_house"}, {"area", "north"}, {"pricerange", "cheap"}}),
          row({{"name", "taco_stand"}, {"area", "south"}, {"pricerange", "expensive"}})};
}

}  // namespace

TEST(FilterKb, MatchesEveryConstrainedSlot) {
  auto rows = filter_kb(table(), {{"area", "south"}, {"pricerange", "cheap"}});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(*rows[0].find("name"), "pizza_hut");
  EXPECT_EQ(*rows[1].find("name"), "noodle_bar");
}

TEST(FilterKb, NoConstraintsReturnsAllRows) { EXPECT_EQ(filter_kb(table(), {}).size(), 4u); }

TEST(FilterKb, MissingKeyDoesNotConstrain) {
  EXPECT_EQ(filter_kb(table(), {{"food", "thai"}, {"area", "north"}}).size(), 1u);
}

TEST(Chat, ApiCallAppendsMatchingRows) {
  Model m = toy_model<float>(1);
  ChatSession s(m, table());
  auto out = s.execute_api_call(tokenize("api_call dontcare south cheap"));
  EXPECT_TRUE(out.parsed);
  EXPECT_TRUE(out.appended);
  ASSERT_EQ(s.queries().size(), 1u);
  EXPECT_EQ(s.queries()[0].results.size(), 2u);
  EXPECT_EQ(s.queries()[0].slots, (std::vector<KeyValue>{{"area", "south"}, {"pricerange", "cheap"}}));
}

TEST(Chat, DontcareOnlyCallReturnsEveryRow) {
  Model m = toy_model<float>(1);
  ChatSession s(m, table());
  auto out = s.execute_api_call(tokenize("api_call dontcare dontcare dontcare"));
  EXPECT_EQ(out.results, 4u);
  ASSERT_EQ(s.queries().size(), 1u);
  EXPECT_EQ(s.queries()[0].results.size(), 4u);
}

TEST(Chat, RepeatedEmptyOrBrokenCallsAddNothing) {
  Model m = toy_model<float>(1);
  ChatSession s(m, table());
  s.execute_api_call(tokenize("api_call dontcare south cheap"));
  EXPECT_FALSE(s.execute_api_call(tokenize("api_call dontcare south cheap")).appended);
  auto empty = s.execute_api_call(tokenize("api_call dontcare north expensive"));
  EXPECT_FALSE(empty.appended);
  EXPECT_FALSE(empty.warning.empty());
  auto broken = s.execute_api_call(tokenize("api_call south"));
  EXPECT_FALSE(broken.parsed);
  EXPECT_FALSE(broken.warning.empty());
  EXPECT_EQ(s.queries().size(), 1u);
}

TEST(Chat, PlainReplyLeavesMemoryUnchanged) {
  Model m = toy_model<float>(1);
  ChatSession s(m, table());
  ChatReply r = s.respond("cheap food in the south");
  ASSERT_EQ(r.utterances.size(), 1u);
  ASSERT_TRUE(r.utterances[0].empty() || r.utterances[0].front() != kApiCallToken);
  EXPECT_TRUE(s.queries().empty());
  EXPECT_EQ(s.turns().size(), 2u);
}

TEST(Chat, ReplayIsDeterministicAndResetClears) {
  Model m = toy_model<float>(2);
  const std::vector<std::string> script = {"cheap food in the south", "", "what about the north ?"};
  auto run = [&](ChatSession& s) {
    std::vector<Tokens> said;
    for (const auto& line : script)
      for (auto& u : s.respond(line).utterances) said.push_back(u);
    return said;
  };
  ChatSession a(m, table()), b(m, table());
  auto first = run(a);
  EXPECT_EQ(first, run(b));
  EXPECT_EQ(a.turns()[2].text, Tokens{std::string(kSilenceToken)});
  a.reset();
  EXPECT_TRUE(a.turns().empty());
  EXPECT_EQ(run(a), first);
}
