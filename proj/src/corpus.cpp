#include "mlmem/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace mlmem {

using ojson = nlohmann::ordered_json;

const char* role_name(Role role) { return role == Role::User ? "user" : "agent"; }
const char* source_name(EntitySource source) { return source == EntitySource::Context ? "context" : "kb"; }

namespace {

const std::vector<DomainSchema>& schemas() {
  static const std::vector<DomainSchema> all = {
      {"restaurant",
       {"food", "area", "pricerange"},
       "dontcare",
       {"name", "food", "area", "pricerange", "phone", "address", "rating"},
       "name",
       {},
       {"name", "phone", "address"}},
      {"travel",
       {"destination", "origin", "start_date", "end_date", "budget", "duration", "adults", "children"},
       "dontcare",
       {"hotel", "destination", "origin", "category", "price", "rating"},
       "hotel",
       {},
       {"hotel", "price", "rating"}},
      {"incar", {}, "dontcare", {"event", "poi", "location", "date", "time", "address"}, "event",
       {"calendar", "weather", "navigate"}, {"event", "poi", "address"}},
  };
  return all;
}

[[noreturn]] void fail(const std::string& dialog_id, std::optional<std::size_t> turn, const std::string& what) {
  std::string msg = "dialog '" + dialog_id + "'";
  if (turn) msg += " turn " + std::to_string(*turn);
  throw DatasetError(msg + ": " + what);
}

}  // namespace

const DomainSchema& domain_schema(const std::string& name) {
  for (const auto& s : schemas())
    if (s.name == name) return s;
  throw DatasetError("unknown domain '" + name + "'");
}

bool is_known_domain(const std::string& name) {
  for (const auto& s : schemas())
    if (s.name == name) return true;
  return false;
}

const DomainSchema& schema_for_dialog(const std::string& domain) {
  for (const auto& s : schemas()) {
    if (s.name == domain) return s;
    if (std::find(s.subdomains.begin(), s.subdomains.end(), domain) != s.subdomains.end()) return s;
  }
  throw DatasetError("unknown domain '" + domain + "'");
}

std::string subject_key_for(const std::string& dialog_domain) {
  if (dialog_domain == "weather") return "location";
  if (dialog_domain == "navigate") return "poi";
  if (dialog_domain == "calendar") return "event";
  return schema_for_dialog(dialog_domain).subject_key;
}

Tokens canonicalize_api_call(const std::map<std::string, std::string>& slots, const DomainSchema& schema) {
  for (const auto& [key, value] : slots) {
    if (std::find(schema.query_slot_order.begin(), schema.query_slot_order.end(), key) ==
        schema.query_slot_order.end())
      throw DatasetError("unknown slot '" + key + "' for domain '" + schema.name + "'");
  }
  Tokens out{std::string(kApiCallToken)};
  for (const auto& key : schema.query_slot_order) {
    auto it = slots.find(key);
    out.push_back(it == slots.end() ? schema.dontcare_token : canonical_entity(it->second));
  }
  return out;
}

std::optional<std::map<std::string, std::string>> parse_api_call(const Tokens& tokens, const DomainSchema& schema) {
  if (tokens.size() != schema.query_slot_order.size() + 1 || tokens[0] != kApiCallToken) return std::nullopt;
  std::map<std::string, std::string> slots;
  for (std::size_t i = 0; i < schema.query_slot_order.size(); ++i)
    if (tokens[i + 1] != schema.dontcare_token) slots[schema.query_slot_order[i]] = tokens[i + 1];
  return slots;
}

// ---------------------------------------------------------------------------
// validation

void validate_dialog(const Dialog& d, const std::string& file_domain) {
  const DomainSchema& schema = domain_schema(file_domain);
  if (d.domain != file_domain &&
      std::find(schema.subdomains.begin(), schema.subdomains.end(), d.domain) == schema.subdomains.end())
    fail(d.id, std::nullopt, "unknown domain '" + d.domain + "' in a '" + file_domain + "' file");
  if (d.turns.empty()) fail(d.id, std::nullopt, "no turns");
  for (std::size_t t = 0; t < d.turns.size(); ++t) {
    const Turn& turn = d.turns[t];
    if (turn.text.empty()) fail(d.id, t, "empty utterance");
    if (t > 0 && turn.role == d.turns[t - 1].role)
      fail(d.id, t, std::string("two consecutive ") + role_name(turn.role) + " turns");
    if (turn.role == Role::User && turn.is_api_call) fail(d.id, t, "user turn marked as api call");
    if (turn.role == Role::User && !turn.gold_entities.empty()) fail(d.id, t, "gold entities on a user turn");
    for (const auto& g : turn.gold_entities)
      if (std::find(turn.text.begin(), turn.text.end(), g.value) == turn.text.end())
        fail(d.id, t, "gold entity '" + g.value + "' does not appear in the text");
  }
  auto check_result = [&](const KBResult& r, const std::string& where) {
    if (r.cells.empty()) fail(d.id, std::nullopt, "empty result (" + where + ")");
    std::unordered_set<std::string> keys;
    for (const auto& [k, v] : r.cells) {
      if (!keys.insert(k).second) fail(d.id, std::nullopt, "duplicate cell key '" + k + "' (" + where + ")");
      if (v.empty()) fail(d.id, std::nullopt, "empty value for '" + k + "' (" + where + ")");
    }
  };
  for (std::size_t q = 0; q < d.queries.size(); ++q) {
    const AnchoredQuery& aq = d.queries[q];
    if (aq.anchor_turn >= d.turns.size() || d.turns[aq.anchor_turn].role != Role::Agent)
      fail(d.id, aq.anchor_turn, "query " + std::to_string(q) + " is not anchored to an agent turn");
    std::unordered_set<std::string> keys;
    for (const auto& [k, v] : aq.query.slots) {
      if (!keys.insert(k).second) fail(d.id, aq.anchor_turn, "duplicate slot '" + k + "'");
      if (std::find(schema.query_slot_order.begin(), schema.query_slot_order.end(), k) ==
          schema.query_slot_order.end())
        fail(d.id, aq.anchor_turn, "unknown slot '" + k + "'");
    }
    for (std::size_t r = 0; r < aq.query.results.size(); ++r)
      check_result(aq.query.results[r], "query " + std::to_string(q) + " result " + std::to_string(r));
  }
  if (d.kb)
    for (std::size_t r = 0; r < d.kb->size(); ++r) check_result((*d.kb)[r], "kb row " + std::to_string(r));
}

std::vector<KBQuery> visible_queries(const Dialog& dialog, std::size_t turn_index) {
  std::vector<KBQuery> out;
  if (dialog.kb) out.push_back(KBQuery{{}, *dialog.kb});
  for (const auto& aq : dialog.queries) {
    if (aq.anchor_turn >= turn_index) continue;
    bool seen = std::any_of(out.begin(), out.end(), [&](const KBQuery& q) {
      return !q.slots.empty() && q.slots == aq.query.slots;
    });
    if (!seen) out.push_back(aq.query);
  }
  return out;
}

std::vector<std::string> unsupported_kb_entities(const Dialog& d) {
  std::vector<std::string> out;
  for (std::size_t t = 0; t < d.turns.size(); ++t) {
    auto visible = visible_queries(d, t);
    for (const auto& g : d.turns[t].gold_entities) {
      if (g.source != EntitySource::KB) continue;
      bool found = false;
      for (const auto& q : visible)
        for (const auto& r : q.results)
          for (const auto& [k, v] : r.cells) found = found || v == g.value;
      if (!found)
        out.push_back("dialog '" + d.id + "' turn " + std::to_string(t) + ": kb entity '" + g.value +
                      "' not found in visible results");
    }
  }
  return out;
}

void annotate_gold_entities(Dialog& d) {
  std::unordered_set<std::string> entities;
  for (const auto& aq : d.queries) {
    for (const auto& [k, v] : aq.query.slots) entities.insert(v);
    for (const auto& r : aq.query.results)
      for (const auto& [k, v] : r.cells) entities.insert(v);
  }
  if (d.kb)
    for (const auto& r : *d.kb)
      for (const auto& [k, v] : r.cells) entities.insert(v);

  std::unordered_set<std::string> seen;
  for (auto& turn : d.turns) {
    if (turn.role == Role::Agent) {
      turn.gold_entities.clear();
      std::unordered_set<std::string> added;
      for (const auto& tok : turn.text) {
        if (!entities.count(tok) || !added.insert(tok).second) continue;
        turn.gold_entities.push_back({tok, seen.count(tok) ? EntitySource::Context : EntitySource::KB});
      }
    }
    for (const auto& tok : turn.text) seen.insert(tok);
  }
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::vector<KeyValue> read_pairs(const ojson& obj, const std::string& what) {
  if (!obj.is_object()) throw DatasetError(what + " must be an object");
  std::vector<KeyValue> out;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    std::string value;
    if (it.value().is_string())
      value = it.value().get<std::string>();
    else if (it.value().is_number())
      value = it.value().dump();
    else
      throw DatasetError(what + ": value of '" + it.key() + "' must be a string or number");
    out.emplace_back(canonical_entity(it.key()), canonical_entity(value));
  }
  return out;
}

ojson write_pairs(const std::vector<KeyValue>& pairs) {
  ojson obj = ojson::object();
  for (const auto& [k, v] : pairs) obj[k] = v;
  return obj;
}

template <typename T>
T get_field(const ojson& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw DatasetError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(where + ": field '" + key + "' has the wrong type");
  }
}

Dialog read_dialog(const ojson& j, const std::string& file_domain, std::size_t index) {
  Dialog d;
  std::string where = "dialog #" + std::to_string(index);
  if (!j.is_object()) throw DatasetError(where + " must be an object");
  d.id = get_field<std::string>(j, "id", where);
  where = "dialog '" + d.id + "'";
  d.domain = j.contains("domain") ? get_field<std::string>(j, "domain", where) : file_domain;
  const ojson& turns = j.contains("turns") ? j.at("turns") : ojson();
  if (!turns.is_array()) throw DatasetError(where + ": 'turns' must be an array");
  for (std::size_t t = 0; t < turns.size(); ++t) {
    const ojson& tj = turns[t];
    std::string tw = where + " turn " + std::to_string(t);
    Turn turn;
    auto role = get_field<std::string>(tj, "role", tw);
    if (role == "user")
      turn.role = Role::User;
    else if (role == "agent")
      turn.role = Role::Agent;
    else
      throw DatasetError(tw + ": unknown role '" + role + "'");
    turn.text = tokenize(get_field<std::string>(tj, "text", tw));
    turn.is_api_call = tj.contains("is_api_call") ? get_field<bool>(tj, "is_api_call", tw) : false;
    if (tj.contains("gold_entities")) {
      for (const auto& g : tj.at("gold_entities")) {
        GoldEntity ge;
        ge.value = canonical_entity(get_field<std::string>(g, "value", tw));
        auto src = get_field<std::string>(g, "source", tw);
        if (src == "context")
          ge.source = EntitySource::Context;
        else if (src == "kb")
          ge.source = EntitySource::KB;
        else
          throw DatasetError(tw + ": unknown entity source '" + src + "'");
        turn.gold_entities.push_back(std::move(ge));
      }
    }
    d.turns.push_back(std::move(turn));
  }
  if (j.contains("queries")) {
    for (const auto& qj : j.at("queries")) {
      AnchoredQuery aq;
      aq.anchor_turn = get_field<std::size_t>(qj, "anchor_turn", where);
      aq.query.slots = read_pairs(qj.contains("slots") ? qj.at("slots") : ojson::object(), where + " query slots");
      if (qj.contains("results"))
        for (const auto& rj : qj.at("results")) aq.query.results.push_back({read_pairs(rj, where + " result")});
      d.queries.push_back(std::move(aq));
    }
  }
  if (j.contains("kb") && !j.at("kb").is_null()) {
    std::vector<KBResult> rows;
    for (const auto& rj : j.at("kb")) rows.push_back({read_pairs(rj, where + " kb row")});
    d.kb = std::move(rows);
  }
  return d;
}

ojson write_dialog(const Dialog& d, const std::string& file_domain) {
  ojson j;
  j["id"] = d.id;
  if (d.domain != file_domain) j["domain"] = d.domain;
  ojson turns = ojson::array();
  for (const auto& t : d.turns) {
    ojson tj;
    tj["role"] = role_name(t.role);
    tj["text"] = join_tokens(t.text);
    tj["is_api_call"] = t.is_api_call;
    ojson ents = ojson::array();
    for (const auto& g : t.gold_entities) ents.push_back({{"value", g.value}, {"source", source_name(g.source)}});
    tj["gold_entities"] = std::move(ents);
    turns.push_back(std::move(tj));
  }
  j["turns"] = std::move(turns);
  ojson queries = ojson::array();
  for (const auto& aq : d.queries) {
    ojson qj;
    qj["anchor_turn"] = aq.anchor_turn;
    qj["slots"] = write_pairs(aq.query.slots);
    ojson results = ojson::array();
    for (const auto& r : aq.query.results) results.push_back(write_pairs(r.cells));
    qj["results"] = std::move(results);
    queries.push_back(std::move(qj));
  }
  j["queries"] = std::move(queries);
  if (d.kb) {
    ojson rows = ojson::array();
    for (const auto& r : *d.kb) rows.push_back(write_pairs(r.cells));
    j["kb"] = std::move(rows);
  }
  return j;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Dataset parse_dataset(const std::string& json_text, LoadReport* report) {
  ojson root;
  try {
    root = ojson::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError(std::string("malformed JSON: ") + e.what());
  }
  if (!root.is_object()) throw DatasetError("dataset root must be an object");
  Dataset ds;
  ds.domain = get_field<std::string>(root, "domain", "dataset");
  if (!is_known_domain(ds.domain)) throw DatasetError("unknown domain '" + ds.domain + "'");
  if (!root.contains("dialogs") || !root.at("dialogs").is_array())
    throw DatasetError("dataset: 'dialogs' must be an array");
  std::unordered_set<std::string> ids;
  std::size_t index = 0;
  for (const auto& dj : root.at("dialogs")) {
    Dialog d = read_dialog(dj, ds.domain, index++);
    if (!ids.insert(d.id).second) throw DatasetError("duplicate dialog id '" + d.id + "'");
    validate_dialog(d, ds.domain);
    if (report)
      for (auto& w : unsupported_kb_entities(d)) report->warnings.push_back(std::move(w));
    ds.dialogs.push_back(std::move(d));
  }
  return ds;
}

Dataset load_dataset(const std::filesystem::path& path, LoadReport* report) {
  return parse_dataset(read_file(path), report);
}

std::string dataset_to_json(const Dataset& ds) {
  ojson root;
  root["domain"] = ds.domain;
  ojson dialogs = ojson::array();
  for (const auto& d : ds.dialogs) dialogs.push_back(write_dialog(d, ds.domain));
  root["dialogs"] = std::move(dialogs);
  return root.dump(1) + "\n";
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << dataset_to_json(ds);
}

std::string kb_to_json(const std::string& domain, const std::vector<KBResult>& rows) {
  ojson root;
  root["domain"] = domain;
  ojson arr = ojson::array();
  for (const auto& r : rows) arr.push_back(write_pairs(r.cells));
  root["rows"] = std::move(arr);
  return root.dump(1) + "\n";
}

std::vector<KBResult> parse_kb(const std::string& json_text, std::string* domain) {
  ojson root;
  try {
    root = ojson::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError(std::string("malformed KB JSON: ") + e.what());
  }
  const ojson* rows = &root;
  if (root.is_object()) {
    if (domain) *domain = get_field<std::string>(root, "domain", "kb");
    if (!root.contains("rows")) throw DatasetError("kb: missing field 'rows'");
    rows = &root.at("rows");
  }
  if (!rows->is_array()) throw DatasetError("kb: rows must be an array");
  std::vector<KBResult> out;
  for (const auto& r : *rows) {
    KBResult res{read_pairs(r, "kb row")};
    if (res.cells.empty()) throw DatasetError("kb: empty result");
    out.push_back(std::move(res));
  }
  return out;
}

// ---------------------------------------------------------------------------
// vocabulary

std::set<std::string> entity_lexicon(const std::vector<Dialog>& dialogs) {
  std::set<std::string> out;
  for (const auto& d : dialogs) {
    for (const auto& aq : d.queries) {
      for (const auto& [k, v] : aq.query.slots) out.insert(v);
      for (const auto& r : aq.query.results)
        for (const auto& [k, v] : r.cells) out.insert(v);
    }
    if (d.kb)
      for (const auto& r : *d.kb)
        for (const auto& [k, v] : r.cells) out.insert(v);
  }
  return out;
}

Vocabulary build_vocab(const std::vector<Dialog>& dialogs, const VocabOptions& options) {
  std::map<std::string, std::size_t> freq;
  std::set<std::string> kb_values, open_values, non_kb_values, agent_words;
  auto count_value = [&](const std::string& v) {
    for (const auto& tok : tokenize(v)) ++freq[tok];
  };
  for (const auto& d : dialogs) {
    const auto& open_keys = schema_for_dialog(d.domain).open_class_keys;
    for (const auto& t : d.turns) {
      for (const auto& tok : t.text) {
        ++freq[tok];
        if (t.role == Role::User)
          non_kb_values.insert(tok);
        else
          agent_words.insert(tok);
      }
    }
    auto add_rows = [&](const std::vector<KBResult>& rows) {
      for (const auto& r : rows)
        for (const auto& [k, v] : r.cells) {
          ++freq[k];
          count_value(v);
          kb_values.insert(v);
          if (std::find(open_keys.begin(), open_keys.end(), k) != open_keys.end()) open_values.insert(v);
        }
    };
    for (const auto& aq : d.queries) {
      for (const auto& [k, v] : aq.query.slots) {
        count_value(v);
        non_kb_values.insert(v);
      }
      add_rows(aq.query.results);
    }
    if (d.kb) add_rows(*d.kb);
  }
  auto kb_only = [&](const std::string& w) { return kb_values.count(w) && !non_kb_values.count(w); };

  Vocabulary vocab;
  for (const auto& [word, n] : freq) {
    if (n < options.min_freq) continue;
    if (kb_only(word) && open_values.count(word) && !options.embed_copy_only_entities) continue;
    vocab.add(word);
  }
  vocab.add_decode_word(std::string(kEosToken));
  for (const auto& w : agent_words) {
    if (!vocab.contains(w)) continue;
    if (kb_only(w) && !options.copy_only_in_decode_vocab) continue;
    vocab.add_decode_word(w);
  }
  vocab.entities() = entity_lexicon(dialogs);
  return vocab;
}

// ---------------------------------------------------------------------------
// synthetic generation

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  double unit() { return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0); }
  template <typename T>
  const T& pick(const std::vector<T>& v) { return v[below(v.size())]; }
  /// k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + below(n - i)]);
    idx.resize(k);
    return idx;
  }

 private:
  std::mt19937_64 engine_;
};

bool in_partition(std::size_t index, EntityPartition p) {
  if (p == EntityPartition::All) return true;
  return (index % 2 == 0) == (p == EntityPartition::Even);
}

std::vector<std::string> partitioned(const std::vector<std::string>& pool, EntityPartition p) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (in_partition(i, p)) out.push_back(pool[i]);
  return out;
}

std::vector<std::string> combine(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out;
  for (const auto& x : a)
    for (const auto& y : b) out.push_back(x + "_" + y);
  return out;
}

const std::vector<std::string> kCities = {"dallas",  "mannheim", "munich", "santos", "toronto", "calgary",
                                          "tijuana", "manas",    "pittsburgh", "atlanta", "boston", "denver",
                                          "seattle", "paris",    "london", "berlin"};
const std::vector<std::string> kCategories = {"2.0", "2.5", "3.0", "3.5", "4.0", "4.5", "5.0"};

const std::vector<std::string>& hotel_pool() {
  static const auto pool = combine({"regal", "grand", "royal", "golden", "silver", "vertex", "onyx", "crystal",
                                    "amber", "coral", "ivory", "jade", "maple", "cedar", "harbor", "summit"},
                                   {"resort", "inn", "lodge", "palace", "suites", "hotel", "retreat", "plaza"});
  return pool;
}

const std::vector<std::string>& price_pool() {
  static const auto pool = [] {
    std::vector<std::string> v;
    for (int k = 10; k < 60; ++k) v.push_back("$" + std::to_string(k * 100));
    return v;
  }();
  return pool;
}

const std::vector<std::string>& rating_pool() {
  static const auto pool = [] {
    std::vector<std::string> v;
    for (int x = 5; x <= 9; ++x)
      for (int yz = 0; yz < 100; yz += 3) {
        std::string frac = (yz < 10 ? "0" : "") + std::to_string(yz);
        v.push_back(std::to_string(x) + "." + frac);
      }
    return v;
  }();
  return pool;
}

const std::vector<std::string> kFoods = {"italian", "chinese", "indian",   "british", "french",  "thai",
                                         "spanish", "mexican", "korean",   "japanese", "turkish", "greek"};
const std::vector<std::string> kAreas = {"north", "south", "east", "west", "centre"};
const std::vector<std::string> kPriceRanges = {"cheap", "moderate", "expensive"};
const std::vector<std::string> kRestaurantRatings = {"1.0", "2.0", "3.0", "4.0", "5.0"};

const std::vector<std::string>& restaurant_pool() {
  static const auto pool = combine({"golden", "royal", "little", "red", "blue", "green", "lucky", "happy", "old",
                                    "new", "grand", "silver"},
                                   {"dragon", "kitchen", "bistro", "garden", "house", "table", "spoon", "lantern",
                                    "oven", "palace"});
  return pool;
}

const std::vector<std::string>& phone_pool() {
  static const auto pool = [] {
    std::vector<std::string> v;
    for (int i = 0; i < 400; ++i) v.push_back("01223" + std::to_string(350000 + i * 137));
    return v;
  }();
  return pool;
}

const std::vector<std::string>& address_pool() {
  static const auto pool = [] {
    std::vector<std::string> v;
    for (const char* street : {"mill_road", "regent_street", "hills_road", "king_street", "castle_street",
                               "trumpington_street"})
      for (int n = 1; n <= 60; ++n) v.push_back(std::to_string(n) + "_" + street);
    return v;
  }();
  return pool;
}

Turn make_turn(Role role, const std::string& text, bool api = false) {
  Turn t;
  t.role = role;
  t.text = tokenize(text);
  t.is_api_call = api;
  return t;
}

struct Pools {
  std::vector<std::string> hotels, prices, ratings, restaurants, phones, addresses;
};

struct TravelQuery {
  std::string destination;
  KBQuery query;
  std::size_t suggested = 0;
};

Dialog travel_dialog(Rng& rng, const SyntheticConfig& cfg, const Pools& pools, SyntheticDialogInfo& info) {
  const DomainSchema& schema = domain_schema("travel");
  const std::size_t n_queries = std::max<std::size_t>(1, cfg.max_queries);
  auto city_idx = rng.sample(kCities.size(), n_queries + 1);
  const std::string origin = kCities[city_idx[0]];

  const std::size_t per_result_max = std::max<std::size_t>(1, std::min(cfg.max_results, kCategories.size()));
  std::size_t total_results = 0;
  std::vector<std::size_t> n_results(n_queries);
  for (auto& n : n_results) total_results += (n = 1 + rng.below(per_result_max));
  auto hotels = rng.sample(pools.hotels.size(), total_results);
  auto prices = rng.sample(pools.prices.size(), total_results);
  auto ratings = rng.sample(pools.ratings.size(), total_results);

  std::vector<TravelQuery> queries;
  std::size_t next = 0;
  for (std::size_t q = 0; q < n_queries; ++q) {
    TravelQuery tq;
    tq.destination = kCities[city_idx[q + 1]];
    tq.query.slots = {{"destination", tq.destination}, {"origin", origin}};
    auto cats = rng.sample(kCategories.size(), n_results[q]);
    for (std::size_t r = 0; r < n_results[q]; ++r, ++next) {
      KBResult res;
      res.cells = {{"hotel", pools.hotels[hotels[next]]},
                   {"destination", tq.destination},
                   {"origin", origin},
                   {"category", kCategories[cats[r]]},
                   {"price", pools.prices[prices[next]]},
                   {"rating", pools.ratings[ratings[next]]}};
      tq.query.results.push_back(std::move(res));
      if (cats[r] > cats[tq.suggested]) tq.suggested = r;
    }
    queries.push_back(std::move(tq));
  }

  Dialog d;
  d.domain = "travel";
  auto call = [&](const TravelQuery& tq) {
    std::map<std::string, std::string> slots(tq.query.slots.begin(), tq.query.slots.end());
    return join_tokens(canonicalize_api_call(slots, schema));
  };
  auto suggestion = [&](const TravelQuery& tq) {
    const KBResult& r = tq.query.results[tq.suggested];
    return "there is " + *r.find("hotel") + " in " + tq.destination + " for " + *r.find("price");
  };

  static const std::vector<std::string> openers = {"hello , i want to go from {o} to {d}",
                                                   "hi , i am leaving {o} and want to visit {d}",
                                                   "i would like a trip from {o} to {d}"};
  std::string opener = rng.pick(openers);
  opener.replace(opener.find("{o}"), 3, origin);
  opener.replace(opener.find("{d}"), 3, queries[0].destination);

  for (std::size_t q = 0; q < n_queries; ++q) {
    if (q == 0) {
      d.turns.push_back(make_turn(Role::User, opener));
    } else {
      static const std::vector<std::string> switches = {"what about {d} ?", "how about {d} instead ?",
                                                        "can you check {d} too ?"};
      std::string s = rng.pick(switches);
      s.replace(s.find("{d}"), 3, queries[q].destination);
      d.turns.push_back(make_turn(Role::User, s));
    }
    d.turns.push_back(make_turn(Role::Agent, call(queries[q]), true));
    d.queries.push_back({d.turns.size() - 1, queries[q].query});
    d.turns.push_back(make_turn(Role::User, std::string(kSilenceToken)));
    d.turns.push_back(make_turn(Role::Agent, suggestion(queries[q])));
  }

  std::size_t ref = n_queries - 1;
  if (n_queries >= 2 && rng.unit() < cfg.non_sequential_rate) ref = rng.below(n_queries - 1);
  info.referenced_query = ref;
  info.n_queries = n_queries;
  const TravelQuery& tq = queries[ref];
  const KBResult& chosen = tq.query.results[tq.suggested];
  const std::string attr = rng.below(2) == 0 ? "rating" : "price";
  d.turns.push_back(
      make_turn(Role::User, "i will take the " + tq.destination + " package . what is its " + attr + " ?"));
  d.turns.push_back(
      make_turn(Role::Agent, "the " + *chosen.find("hotel") + " package has a " + attr + " of " + *chosen.find(attr)));
  return d;
}

Dialog restaurant_dialog(Rng& rng, const SyntheticConfig& cfg, const Pools& pools, SyntheticDialogInfo& info) {
  const DomainSchema& schema = domain_schema("restaurant");
  std::string food = rng.pick(kFoods), area = rng.pick(kAreas), price = rng.pick(kPriceRanges);
  // non-empty subset of {food, area, pricerange}
  std::size_t mask = 1 + rng.below(7);
  std::map<std::string, std::string> slots;
  if (mask & 1) slots["food"] = food;
  if (mask & 2) slots["area"] = area;
  if (mask & 4) slots["pricerange"] = price;

  std::string request = "i am looking for a ";
  if (mask & 4) request += price + " ";
  request += "restaurant";
  if (mask & 1) request += " serving " + food + " food";
  if (mask & 2) request += " in the " + area;

  const std::size_t n_res = 1 + rng.below(std::max<std::size_t>(1, std::min(cfg.max_results, kRestaurantRatings.size())));
  auto names = rng.sample(pools.restaurants.size(), n_res);
  auto phones = rng.sample(pools.phones.size(), n_res);
  auto addresses = rng.sample(pools.addresses.size(), n_res);
  auto ratings = rng.sample(kRestaurantRatings.size(), n_res);
  KBQuery query;
  query.slots.assign(slots.begin(), slots.end());
  // keep schema slot order inside the query
  std::sort(query.slots.begin(), query.slots.end(), [&](const KeyValue& a, const KeyValue& b) {
    auto pos = [&](const std::string& k) {
      return std::find(schema.query_slot_order.begin(), schema.query_slot_order.end(), k) -
             schema.query_slot_order.begin();
    };
    return pos(a.first) < pos(b.first);
  });
  std::size_t best = 0;
  for (std::size_t r = 0; r < n_res; ++r) {
    KBResult res;
    res.cells = {{"name", pools.restaurants[names[r]]},
                 {"food", (mask & 1) ? food : rng.pick(kFoods)},
                 {"area", (mask & 2) ? area : rng.pick(kAreas)},
                 {"pricerange", (mask & 4) ? price : rng.pick(kPriceRanges)},
                 {"rating", kRestaurantRatings[ratings[r]]},
                 {"phone", pools.phones[phones[r]]},
                 {"address", pools.addresses[addresses[r]]}};
    query.results.push_back(std::move(res));
    if (ratings[r] > ratings[best]) best = r;
  }

  Dialog d;
  d.domain = "restaurant";
  d.turns.push_back(make_turn(Role::User, (rng.below(2) ? "hello , " : "hi , ") + request));
  d.turns.push_back(make_turn(Role::Agent, join_tokens(canonicalize_api_call(slots, schema)), true));
  d.queries.push_back({1, query});
  d.turns.push_back(make_turn(Role::User, std::string(kSilenceToken)));
  const KBResult& r = query.results[best];
  d.turns.push_back(make_turn(Role::Agent, *r.find("name") + " is a " + *r.find("pricerange") +
                                               " restaurant serving " + *r.find("food") + " food in the " +
                                               *r.find("area")));
  if (rng.below(2) == 0) {
    d.turns.push_back(make_turn(Role::User, "what is the phone number ?"));
    d.turns.push_back(make_turn(Role::Agent, "the phone number of " + *r.find("name") + " is " + *r.find("phone")));
  } else {
    d.turns.push_back(make_turn(Role::User, "what is the address ?"));
    d.turns.push_back(make_turn(Role::Agent, "the address of " + *r.find("name") + " is " + *r.find("address")));
  }
  info.referenced_query = 0;
  info.n_queries = 1;
  return d;
}

}  // namespace

std::vector<Dialog> generate_synthetic(const SyntheticConfig& cfg, std::vector<SyntheticDialogInfo>* info) {
  if (!(cfg.non_sequential_rate >= 0.0 && cfg.non_sequential_rate <= 1.0))
    throw DatasetError("non_sequential_rate must lie in [0, 1]");
  if (cfg.n_dialogs < 1) throw DatasetError("n_dialogs must be at least 1");
  if (cfg.domain_template != "travel" && cfg.domain_template != "restaurant")
    throw DatasetError("unknown template '" + cfg.domain_template + "'");
  if (cfg.max_queries < 1) throw DatasetError("max_queries must be at least 1");
  if (cfg.max_results < 1) throw DatasetError("max_results must be at least 1");

  Pools pools{partitioned(hotel_pool(), cfg.partition),       partitioned(price_pool(), cfg.partition),
              partitioned(rating_pool(), cfg.partition),      partitioned(restaurant_pool(), cfg.partition),
              partitioned(phone_pool(), cfg.partition),       partitioned(address_pool(), cfg.partition)};
  Rng rng(cfg.seed);
  std::vector<Dialog> out;
  if (info) info->clear();
  for (std::size_t i = 0; i < cfg.n_dialogs; ++i) {
    SyntheticDialogInfo di;
    Dialog d = cfg.domain_template == "travel" ? travel_dialog(rng, cfg, pools, di)
                                               : restaurant_dialog(rng, cfg, pools, di);
    d.id = cfg.id_prefix + "-" + std::to_string(i);
    annotate_gold_entities(d);
    out.push_back(std::move(d));
    if (info) info->push_back(di);
  }
  return out;
}

std::vector<KBResult> collect_kb_rows(const std::vector<Dialog>& dialogs) {
  std::vector<KBResult> rows;
  for (const auto& d : dialogs)
    for (const auto& aq : d.queries)
      for (const auto& r : aq.query.results)
        if (std::find(rows.begin(), rows.end(), r) == rows.end()) rows.push_back(r);
  return rows;
}

}  // namespace mlmem
