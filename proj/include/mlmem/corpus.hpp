#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlmem/kb_types.hpp"
#include "mlmem/vocab.hpp"

namespace mlmem {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Role { User, Agent };
enum class EntitySource { Context, KB };

const char* role_name(Role role);
const char* source_name(EntitySource source);

struct GoldEntity {
  std::string value;
  EntitySource source = EntitySource::KB;

  bool operator==(const GoldEntity&) const = default;
};

struct Turn {
  Role role = Role::User;
  Tokens text;
  bool is_api_call = false;
  std::vector<GoldEntity> gold_entities;

  bool operator==(const Turn&) const = default;
};

/// A query fired by the agent turn at `anchor_turn`; its results are visible
/// to every later turn.
struct AnchoredQuery {
  std::size_t anchor_turn = 0;
  KBQuery query;

  bool operator==(const AnchoredQuery&) const = default;
};

struct Dialog {
  std::string id;
  std::string domain;
  std::vector<Turn> turns;
  std::vector<AnchoredQuery> queries;
  /// Fixed per-dialog table (InCar style); no queries are fired against it.
  std::optional<std::vector<KBResult>> kb;

  bool operator==(const Dialog&) const = default;
};

struct Dataset {
  std::string domain;
  std::vector<Dialog> dialogs;

  bool operator==(const Dataset&) const = default;
};

struct DomainSchema {
  std::string name;
  std::vector<std::string> query_slot_order;
  std::string dontcare_token = "dontcare";
  std::vector<std::string> entity_keys;
  /// Cell key naming a result's subject, used when flattening to triples.
  std::string subject_key;
  /// Dialog-level domain labels accepted inside a file of this domain.
  std::vector<std::string> subdomains;
  /// Cell keys holding open-class identifiers (names, prices, phone numbers)
  /// as opposed to small closed sets such as star categories.
  std::vector<std::string> open_class_keys;
};

/// Known schemas: restaurant (3 slots), travel (8 slots), incar (no queries).
const DomainSchema& domain_schema(const std::string& name);
bool is_known_domain(const std::string& name);
/// Schema governing a dialog, resolving sub-domains to their parent.
const DomainSchema& schema_for_dialog(const std::string& file_domain);
std::string subject_key_for(const std::string& dialog_domain);

/// ["api_call"] followed by one value per schema slot in order, dontcare for absent slots.
Tokens canonicalize_api_call(const std::map<std::string, std::string>& slots, const DomainSchema& schema);
/// Inverse of canonicalize_api_call; nullopt when the tokens are not a well-formed call.
std::optional<std::map<std::string, std::string>> parse_api_call(const Tokens& tokens, const DomainSchema& schema);

// ---------------------------------------------------------------------------
// JSON I/O

struct LoadReport {
  std::vector<std::string> warnings;
};

Dataset parse_dataset(const std::string& json_text, LoadReport* report = nullptr);
Dataset load_dataset(const std::filesystem::path& path, LoadReport* report = nullptr);
std::string dataset_to_json(const Dataset& dataset);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

/// Structural checks; throws DatasetError naming dialog id and turn index.
void validate_dialog(const Dialog& dialog, const std::string& file_domain);
/// Gold KB entities that cannot be found in the results of a query anchored
/// before their turn (or in the dialog's static KB).
std::vector<std::string> unsupported_kb_entities(const Dialog& dialog);

/// Queries visible when predicting turn `turn_index`: anchored strictly
/// earlier, identical queries kept once, static KB (if any) first as an
/// implicit query with no slots.
std::vector<KBQuery> visible_queries(const Dialog& dialog, std::size_t turn_index);

/// Tags entity tokens of every agent turn: `context` if the value occurred in
/// an earlier turn, otherwise `kb`. Entities are values of the dialog's KB
/// cells and query slots.
void annotate_gold_entities(Dialog& dialog);

// ---------------------------------------------------------------------------
// Vocabulary

struct VocabOptions {
  std::size_t min_freq = 1;
  /// Values that only ever occur inside KB results (never in user text or
  /// query slots) are KB-only. They are left out of the decode vocabulary,
  /// so the model can only emit them by copying. KB-only values of
  /// open-class keys are also left out of the embedding table (they read as
  /// <unk>) unless this is set, so unseen test entities look exactly like
  /// training ones.
  bool embed_copy_only_entities = false;
  bool copy_only_in_decode_vocab = false;
};

/// Every KB cell value and every query slot value in the dataset.
std::set<std::string> entity_lexicon(const std::vector<Dialog>& dialogs);

Vocabulary build_vocab(const std::vector<Dialog>& dialogs, const VocabOptions& options = {});

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class EntityPartition { All, Even, Odd };

struct SyntheticConfig {
  std::size_t n_dialogs = 10;
  std::string domain_template = "travel";
  std::size_t max_queries = 2;
  double non_sequential_rate = 0.0;
  std::uint64_t seed = 1;
  std::size_t max_results = 3;
  /// Restricts copy-only entity pools (names, prices, ratings, phones,
  /// addresses) to one half so two splits can be made disjoint.
  EntityPartition partition = EntityPartition::All;
  std::string id_prefix = "syn";
};

/// Per-dialog description of which query the final answer refers to.
struct SyntheticDialogInfo {
  std::size_t referenced_query = 0;
  std::size_t n_queries = 0;
};

std::vector<Dialog> generate_synthetic(const SyntheticConfig& config,
                                       std::vector<SyntheticDialogInfo>* info = nullptr);

/// Every distinct result row of the dialogs' queries, for use as a chat KB.
std::vector<KBResult> collect_kb_rows(const std::vector<Dialog>& dialogs);

std::string kb_to_json(const std::string& domain, const std::vector<KBResult>& rows);
std::vector<KBResult> parse_kb(const std::string& json_text, std::string* domain = nullptr);

}  // namespace mlmem
