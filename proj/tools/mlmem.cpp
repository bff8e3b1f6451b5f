// Command-line entry point: data generation, training, evaluation, chat and
// attention dumps.

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mlmem/chat.hpp"
#include "mlmem/decoder.hpp"
#include "mlmem/training.hpp"

namespace fs = std::filesystem;
using namespace mlmem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Dataset load_split(const fs::path& dir, const std::string& split, bool required) {
  const fs::path path = dir / (split + ".json");
  if (!fs::exists(path)) {
    if (required) throw std::runtime_error("missing " + path.string());
    return {};
  }
  LoadReport report;
  Dataset d = load_dataset(path, &report);
  for (const auto& w : report.warnings) std::cerr << "warning: " << path.string() << ": " << w << "\n";
  return d;
}

struct GenArgs {
  std::string template_name = "travel";
  std::size_t n = 200;
  std::size_t n_valid = 0;
  std::size_t n_test = 0;
  std::size_t max_queries = 2;
  double non_seq_rate = 0.0;
  std::uint64_t seed = 1;
  bool disjoint = false;
  std::string out;
};

void run_gen(const GenArgs& a) {
  fs::create_directories(a.out);
  auto make = [&](std::size_t n, std::uint64_t seed, EntityPartition part, const std::string& prefix) {
    SyntheticConfig c;
    c.n_dialogs = n;
    c.domain_template = a.template_name;
    c.max_queries = a.max_queries;
    c.non_sequential_rate = a.non_seq_rate;
    c.seed = seed;
    c.partition = part;
    c.id_prefix = prefix;
    return Dataset{a.template_name, generate_synthetic(c)};
  };
  const std::size_t n_valid = a.n_valid ? a.n_valid : std::max<std::size_t>(1, a.n / 10);
  const std::size_t n_test = a.n_test ? a.n_test : std::max<std::size_t>(1, a.n / 4);
  const auto seen = a.disjoint ? EntityPartition::Even : EntityPartition::All;
  const auto unseen = a.disjoint ? EntityPartition::Odd : EntityPartition::All;
  Dataset train = make(a.n, a.seed, seen, "train");
  Dataset valid = make(n_valid, a.seed + 1, seen, "valid");
  Dataset test = make(n_test, a.seed + 2, unseen, "test");
  save_dataset(train, fs::path(a.out) / "train.json");
  save_dataset(valid, fs::path(a.out) / "valid.json");
  save_dataset(test, fs::path(a.out) / "test.json");
  write_file(fs::path(a.out) / "kb.json", kb_to_json(a.template_name, collect_kb_rows(test.dialogs)));
  std::cout << "wrote " << train.dialogs.size() << " train, " << valid.dialogs.size() << " valid, "
            << test.dialogs.size() << " test dialogs to " << a.out << "\n";
}

std::string train_log_json(const TrainResult& r) {
  nlohmann::ordered_json j;
  j["steps"] = r.steps;
  j["floor_events"] = r.floor_events;
  j["diverged"] = r.diverged;
  j["message"] = r.message;
  nlohmann::ordered_json log = nlohmann::ordered_json::array();
  for (const auto& e : r.log)
    log.push_back({{"epoch", e.epoch},
                   {"step", e.step},
                   {"train_loss", e.train_loss},
                   {"valid_bleu", e.valid_bleu},
                   {"valid_f1", e.valid_f1},
                   {"selected", e.selected}});
  j["log"] = std::move(log);
  return j.dump(2) + "\n";
}

void run_train(const std::string& data, const std::string& config_path, const std::string& out) {
  TrainConfig config = config_path.empty() ? TrainConfig{} : parse_train_config(read_file(config_path));
  Dataset train_set = load_split(data, "train", true);
  Dataset valid_set = load_split(data, "valid", false);
  auto progress = [](const EvalLog& e, Model&) {
    std::fprintf(stderr, "epoch %zu step %zu loss %.4f valid BLEU %.4f F1 %.4f%s\n", e.epoch, e.step, e.train_loss,
                 e.valid_bleu, e.valid_f1, e.selected ? " *" : "");
    return false;
  };
  TrainResult result;
  TrainConfig chosen = config;
  if (config.grid_hidden_sizes.empty() && config.grid_batch_sizes.empty()) {
    result = train(train_set.dialogs, valid_set.dialogs, train_set.domain, config, progress);
  } else {
    GridResult g = train_grid(train_set.dialogs, valid_set.dialogs, train_set.domain, config, progress);
    for (std::size_t i = 0; i < g.configs.size(); ++i)
      std::fprintf(stderr, "grid hidden %zu batch %zu: best valid F1 %.4f\n", g.configs[i].hidden_size,
                   g.configs[i].batch_size, g.best_f1[i]);
    chosen = g.configs[g.best];
    result = std::move(g.result);
  }
  if (result.diverged) std::cerr << "warning: training diverged: " << result.message << "\n";
  save_checkpoint(result.best, out, &chosen);
  write_file(out + ".log.json", train_log_json(result));
  std::cout << "saved " << out << " after " << result.steps << " steps\n";
}

void run_eval(const std::string& data, const std::string& split, const std::string& ckpt, const std::string& report,
              const std::string& responses_path) {
  Model model = load_checkpoint(ckpt);
  Dataset ds = load_split(data, split, true);
  std::vector<ResponseRecord> responses;
  EvalReport r = evaluate(model, ds.dialogs, {}, &responses);
  std::cout << report_table(r);
  if (!report.empty()) write_file(report, report_to_json(r));
  if (!responses_path.empty()) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& rec : responses)
      j.push_back({{"dialog", rec.dialog_id},
                   {"turn", rec.turn},
                   {"reference", join_tokens(rec.reference)},
                   {"hypothesis", join_tokens(rec.hypothesis)},
                   {"sources", rec.sources}});
    write_file(responses_path, j.dump(2) + "\n");
  }
}

void run_chat(const std::string& ckpt, const std::string& kb_path) {
  Model model = load_checkpoint(ckpt);
  std::string kb_domain;
  auto rows = parse_kb(read_file(kb_path), &kb_domain);
  if (!kb_domain.empty() && schema_for_dialog(kb_domain).name != schema_for_dialog(model.domain).name)
    throw std::runtime_error("KB domain '" + kb_domain + "' does not match the model domain '" + model.domain + "'");
  ChatSession session(model, std::move(rows));
  const bool interactive = isatty(STDIN_FILENO);
  std::string line;
  while (true) {
    if (interactive) std::cout << "> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (line == "/reset") {
      session.reset();
      std::cout << "(new dialog)\n";
      continue;
    }
    if (line == "/quit") break;
    ChatReply reply = session.respond(line);
    for (const auto& u : reply.utterances) std::cout << "agent: " << join_tokens(u) << "\n";
    for (const auto& w : reply.warnings) std::cout << "warning: " << w << "\n";
    std::cout << std::flush;
  }
}

void run_dump(const std::string& ckpt, const std::string& dialog_path, const std::string& dialog_id,
              std::size_t turn, const std::string& out) {
  Model model = load_checkpoint(ckpt);
  Dataset ds = load_dataset(dialog_path);
  const Dialog* dialog = nullptr;
  for (const auto& d : ds.dialogs)
    if (dialog_id.empty() || d.id == dialog_id) {
      dialog = &d;
      break;
    }
  if (!dialog) throw std::runtime_error(dialog_id.empty() ? "no dialogs in " + dialog_path
                                                          : "no dialog with id '" + dialog_id + "'");
  if (turn >= dialog->turns.size() || dialog->turns[turn].role != Role::Agent)
    throw std::runtime_error("turn " + std::to_string(turn) + " of dialog '" + dialog->id + "' is not an agent turn");
  DecodeResult r = predict_turn(model, dialog->turns, turn, visible_queries(*dialog, turn), dialog->domain,
                                40, true);
  write_file(out, trace_to_json(r));
  std::cout << "agent: " << join_tokens(r.tokens) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level memory dialog model"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus (train/valid/test splits and kb.json)");
  gen_cmd->add_option("--template", gen.template_name, "restaurant or travel")
      ->check(CLI::IsMember({"restaurant", "travel"}));
  gen_cmd->add_option("--n", gen.n, "Training dialogs");
  gen_cmd->add_option("--n-valid", gen.n_valid, "Validation dialogs (default n/10)");
  gen_cmd->add_option("--n-test", gen.n_test, "Test dialogs (default n/4)");
  gen_cmd->add_option("--max-queries", gen.max_queries, "Queries per dialog");
  gen_cmd->add_option("--non-seq-rate", gen.non_seq_rate, "Probability of referring back to an older query")
      ->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_flag("--disjoint", gen.disjoint, "Test entities never appear in train/valid");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  std::string data, config, out, ckpt, report, kb, dialog, dialog_id, split = "test", responses;
  std::size_t turn = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", data, "Directory with train.json and valid.json")->required();
  train_cmd->add_option("--config", config, "JSON training config");
  train_cmd->add_option("--out", out, "Checkpoint path")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--data", data, "Data directory")->required();
  eval_cmd->add_option("--split", split, "Split to evaluate");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--report", report, "JSON report path");
  eval_cmd->add_option("--responses", responses, "Write every response to this JSON file");

  auto* chat_cmd = app.add_subcommand("chat", "Talk to a checkpoint over stdin");
  chat_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  chat_cmd->add_option("--kb", kb, "KB JSON file")->required();

  auto* dump_cmd = app.add_subcommand("dump-attn", "Write the attention trace of one agent turn");
  dump_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  dump_cmd->add_option("--dialog", dialog, "Dataset JSON file")->required();
  dump_cmd->add_option("--dialog-id", dialog_id, "Dialog id (default: first dialog)");
  dump_cmd->add_option("--turn", turn, "Agent turn index")->required();
  dump_cmd->add_option("--out", out, "Output JSON")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen_cmd) run_gen(gen);
    else if (*train_cmd) run_train(data, config, out);
    else if (*eval_cmd) run_eval(data, split, ckpt, report, responses);
    else if (*chat_cmd) run_chat(ckpt, kb);
    else if (*dump_cmd) run_dump(ckpt, dialog, dialog_id, turn, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
