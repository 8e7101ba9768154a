#include "diffcot/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "diffcot/dpo_core.hpp"
#include "diffcot/parallel.hpp"

namespace diffcot {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& input, const json& defaults, const std::string& path) {
  if (!input.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (const auto& [key, value] : input.items()) {
    const auto it = defaults.find(key);
    const std::string here = path.empty() ? key : path + "." + key;
    if (it == defaults.end()) throw ConfigError("unknown config key '" + here + "'");
    if (it->is_object()) check_keys(value, *it, here);
  }
}

template <typename T>
T read(const json& doc, const char* pointer) {
  try {
    return doc.at(json::json_pointer(pointer)).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value ") + pointer + ": " + e.what());
  }
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

struct TaskSpec {
  std::string task_id;
  std::string prompt;
  int k_budget = 0;
  AnswerKey key;
};

std::vector<TaskSpec> task_specs(const PipelineConfig& config, std::vector<TaskInstance>* synthetic) {
  std::vector<TaskSpec> specs;
  if (config.task_source == "synthetic") {
    auto tasks = synthetic_tasks(config);
    for (const auto& t : tasks) specs.push_back({t.task_id, t.prompt, t.k_budget, {std::to_string(t.hidden_target)}});
    if (synthetic) *synthetic = std::move(tasks);
    return specs;
  }
  std::size_t line_no = 0;
  for (const auto& line : read_lines(config.prompt_file)) {
    ++line_no;
    try {
      const auto j = json::parse(line);
      specs.push_back({j.at("task_id").get<std::string>(), j.at("prompt").get<std::string>(),
                       j.value("k_budget", config.k_budget), {j.at("answer").get<std::string>()}});
    } catch (const json::exception& e) {
      throw ConfigError(config.prompt_file + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (config.n_tasks > 0 && specs.size() > static_cast<std::size_t>(config.n_tasks)) {
    specs.resize(static_cast<std::size_t>(config.n_tasks));
  }
  return specs;
}

struct Clients {
  std::unique_ptr<ModelClient> main;
  std::unique_ptr<ModelClient> golden;
};

std::unique_ptr<ModelClient> endpoint_client(const PipelineConfig& config, const EndpointConfig& endpoint) {
  if (config.backend == "replay") {
    return std::make_unique<ReplayClient>(endpoint.capture_file, endpoint.model, endpoint.logprobs);
  }
  auto client = std::make_unique<ChatCompletionClient>(endpoint);
  if (endpoint.logprobs) client->probe();
  return client;
}

Clients make_clients(const PipelineConfig& config, const std::vector<TaskInstance>& tasks) {
  Clients c;
  if (config.backend == "synthetic") {
    c.main = std::make_unique<SyntheticClient>(tasks, config.profile);
    if (config.golden) {
      auto golden = ProposerProfile::golden();
      golden.seed = config.profile.seed;
      c.golden = std::make_unique<SyntheticClient>(tasks, golden);
    }
  } else {
    c.main = endpoint_client(config, config.endpoint);
    if (config.golden) c.golden = endpoint_client(config, config.golden_endpoint);
  }
  return c;
}

fs::path stage_dir(const PipelineConfig& config, const char* stage) {
  const fs::path dir = fs::path(config.output_dir) / stage;
  fs::create_directories(dir);
  return dir;
}

void require_complete(const fs::path& dir, const char* what) {
  const auto m = Manifest::read(dir);
  if (!m) throw ValidationError(std::string(what) + " not found under " + dir.string());
  if (m->status != "complete") throw ValidationError(std::string(what) + " under " + dir.string() + " is " + m->status);
}

std::vector<TaskLadders> load_ladders(const PipelineConfig& config) {
  const auto dir = fs::path(config.output_dir) / "generate";
  require_complete(dir, "generated ladders");
  std::vector<TaskLadders> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(dir / "ladders.jsonl")) {
    ++line_no;
    try {
      out.push_back(ladders_from_record(line));
    } catch (const std::exception& e) {
      throw ValidationError("ladders.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<TaskInstance> load_synthetic_tasks(const PipelineConfig& config) {
  if (config.task_source != "synthetic") throw ConfigError("this command needs synthetic tasks");
  const auto dir = fs::path(config.output_dir) / "generate";
  std::vector<TaskInstance> out;
  for (const auto& line : read_lines(dir / "tasks.jsonl")) {
    try {
      out.push_back(task_from_record(line));
    } catch (const std::exception& e) {
      throw ValidationError(std::string("tasks.jsonl: ") + e.what());
    }
  }
  return out;
}

ToyPolicy load_policy(const fs::path& path) {
  try {
    return ToyPolicy::from_checkpoint(read_file(path));
  } catch (const std::invalid_argument& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::vector<EvalItem> eval_items(const PipelineConfig& config) {
  const auto tasks = load_synthetic_tasks(config);
  const auto ladders = load_ladders(config);
  std::map<std::string, const TaskLadders*> by_id;
  for (const auto& l : ladders) by_id[l.task_id] = &l;
  std::vector<EvalItem> items;
  for (const auto& t : tasks) {
    const auto it = by_id.find(t.task_id);
    if (it == by_id.end()) throw ValidationError("no ladders for task " + t.task_id);
    items.push_back({t, *it->second});
    if (config.eval_tasks > 0 && items.size() == static_cast<std::size_t>(config.eval_tasks)) break;
  }
  return items;
}

json public_config(const PipelineConfig& config) {
  json j = config.to_json();
  j.erase("output_dir");
  j.erase("workers");
  return j;
}

}  // namespace

void PipelineConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (task_source != "synthetic" && task_source != "prompt_file") fail("tasks.source must be synthetic or prompt_file");
  if (task_source == "prompt_file" && prompt_file.empty()) fail("tasks.prompt_file is empty");
  if (n_tasks < 1) fail("tasks.count must be >= 1");
  if (k_budget < 1) fail("tasks.k_budget must be >= 1");
  if (candidates < 1) fail("search.candidates must be >= 1");
  if (golden && candidates < 2) fail("search.candidates must be >= 2 when the golden candidate is enabled");
  if (rollouts < 1) fail("search.rollouts must be >= 1");
  if (!(temperature >= 0.0)) fail("search.temperature must be >= 0");
  if (max_tokens < 1) fail("search.max_tokens must be >= 1");
  try {
    profile.validate();
    CausalSchedule{m, n}.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (m > k_budget) fail("window.m must not exceed tasks.k_budget");
  if (!(noisy_prefix_prob >= 0.0 && noisy_prefix_prob <= 1.0)) fail("pairs.noisy_prefix_prob must be in [0,1]");
  if (!(beta > 0.0)) fail("train.beta must be positive");
  if (!(lr >= 0.0)) fail("train.lr must be >= 0");
  if (epochs < 1) fail("train.epochs must be >= 1");
  for (double w : omegas) {
    if (!(w >= 0.0 && w <= 1.0)) fail("eval.omegas entries must be in [0,1]");
  }
  if (eval_tasks < 0) fail("eval.tasks must be >= 0");
  for (const auto& [gm, gn] : sweep_grid) {
    if (gn < 1 || gm < gn || gm > k_budget) fail("sweep.grid entries must satisfy 1 <= n <= m <= K");
  }
  if (seeds.empty()) fail("seeds must not be empty");
  if (backend != "synthetic" && backend != "endpoint" && backend != "replay") {
    fail("backend.kind must be synthetic, endpoint or replay");
  }
  if (backend == "synthetic" && task_source != "synthetic") fail("the synthetic backend needs synthetic tasks");
  try {
    if (backend != "synthetic" || decode_policy == "endpoint") endpoint.validate();
    if (backend != "synthetic" && golden) golden_endpoint.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (backend == "replay" && endpoint.capture_file.empty()) fail("replay backend needs endpoint.capture_file");
  if (decode_policy != "toy" && decode_policy != "endpoint") fail("decode.policy must be toy or endpoint");
  if (workers < 1) fail("workers must be >= 1");
  if (output_dir.empty()) fail("output_dir is empty");
}

json PipelineConfig::to_json() const {
  json grid = json::array();
  for (const auto& [gm, gn] : sweep_grid) grid.push_back({gm, gn});
  return json{
      {"tasks", {{"source", task_source}, {"prompt_file", prompt_file}, {"count", n_tasks},
                 {"k_budget", k_budget}, {"seed", task_seed}}},
      {"search", {{"candidates", candidates}, {"rollouts", rollouts}, {"golden", golden},
                  {"temperature", temperature}, {"max_tokens", max_tokens}}},
      {"profile", {{"tier_weights", profile.tier_weights}, {"temperature_analog", profile.temperature_analog},
                   {"seed", profile.seed}, {"recovery", profile.recovery}, {"phrasing", profile.phrasing}}},
      {"window", {{"m", m}, {"n", n}, {"rewrite_prefix", rewrite_prefix}}},
      {"pairs", {{"noisy_prefix_prob", noisy_prefix_prob}}},
      {"train", {{"beta", beta}, {"lr", lr}, {"epochs", epochs}}},
      {"eval", {{"omegas", omegas}, {"tasks", eval_tasks}}},
      {"sweep", {{"grid", grid}, {"shuffled", sweep_shuffled}}},
      {"seeds", seeds},
      {"backend", {{"kind", backend}, {"endpoint", endpoint.to_json()}, {"golden_endpoint", golden_endpoint.to_json()}}},
      {"decode", {{"policy", decode_policy}, {"prompt", decode_prompt}}},
      {"workers", workers},
      {"output_dir", output_dir}};
}

PipelineConfig PipelineConfig::from_json(const json& input) {
  const PipelineConfig defaults;
  json doc = defaults.to_json();
  check_keys(input, doc, "");
  doc.merge_patch(input);

  PipelineConfig c;
  c.task_source = read<std::string>(doc, "/tasks/source");
  c.prompt_file = read<std::string>(doc, "/tasks/prompt_file");
  c.n_tasks = read<int>(doc, "/tasks/count");
  c.k_budget = read<int>(doc, "/tasks/k_budget");
  c.task_seed = read<std::uint64_t>(doc, "/tasks/seed");
  c.candidates = read<int>(doc, "/search/candidates");
  c.rollouts = read<int>(doc, "/search/rollouts");
  c.golden = read<bool>(doc, "/search/golden");
  c.temperature = read<double>(doc, "/search/temperature");
  c.max_tokens = read<int>(doc, "/search/max_tokens");
  c.profile.tier_weights = read<std::vector<double>>(doc, "/profile/tier_weights");
  c.profile.temperature_analog = read<double>(doc, "/profile/temperature_analog");
  c.profile.seed = read<std::uint64_t>(doc, "/profile/seed");
  c.profile.recovery = read<double>(doc, "/profile/recovery");
  c.profile.phrasing = read<int>(doc, "/profile/phrasing");
  c.m = read<int>(doc, "/window/m");
  c.n = read<int>(doc, "/window/n");
  c.rewrite_prefix = read<bool>(doc, "/window/rewrite_prefix");
  c.noisy_prefix_prob = read<double>(doc, "/pairs/noisy_prefix_prob");
  c.beta = read<double>(doc, "/train/beta");
  c.lr = read<double>(doc, "/train/lr");
  c.epochs = read<int>(doc, "/train/epochs");
  c.omegas = read<std::vector<double>>(doc, "/eval/omegas");
  c.eval_tasks = read<int>(doc, "/eval/tasks");
  c.sweep_grid.clear();
  for (const auto& g : read<std::vector<std::vector<int>>>(doc, "/sweep/grid")) {
    if (g.size() != 2) throw ConfigError("sweep.grid entries must be [m, n]");
    c.sweep_grid.emplace_back(g[0], g[1]);
  }
  c.sweep_shuffled = read<bool>(doc, "/sweep/shuffled");
  c.seeds = read<std::vector<std::uint64_t>>(doc, "/seeds");
  c.backend = read<std::string>(doc, "/backend/kind");
  try {
    c.endpoint = EndpointConfig::from_json(doc.at("backend").at("endpoint"));
    c.golden_endpoint = EndpointConfig::from_json(doc.at("backend").at("golden_endpoint"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backend endpoint: ") + e.what());
  }
  c.decode_policy = read<std::string>(doc, "/decode/policy");
  c.decode_prompt = read<std::string>(doc, "/decode/prompt");
  c.workers = read<int>(doc, "/workers");
  c.output_dir = read<std::string>(doc, "/output_dir");
  c.validate();
  return c;
}

std::string PipelineConfig::hash() const { return git_blob_sha1(public_config(*this).dump()); }

SearchSettings PipelineConfig::search_settings(std::uint64_t seed) const {
  return SearchSettings{rollouts, seed, temperature, max_tokens, 1};
}

TrainSettings PipelineConfig::train_settings() const { return TrainSettings{beta, lr, epochs, noisy_prefix_prob}; }

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  std::string pointer = "/" + assignment.substr(0, eq);
  std::replace(pointer.begin(), pointer.end(), '.', '/');
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  try {
    doc[json::json_pointer(pointer)] = value;
  } catch (const json::exception& e) {
    throw ConfigError("override " + assignment + ": " + e.what());
  }
}

PipelineConfig load_config(const std::optional<fs::path>& file, std::span<const std::string> overrides) {
  json doc = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file " + file->string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + file->string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return PipelineConfig::from_json(doc);
}

std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
  }
  fs::rename(tmp, path);
}

void Manifest::write(const fs::path& dir) const {
  json entries = json::object();
  for (const auto& name : files) {
    const auto content = read_file(dir / name);
    entries[name] = {{"sha1", git_blob_sha1(content)}, {"bytes", content.size()}};
  }
  json j{{"command", command}, {"config_hash", config_hash}, {"status", status},
         {"completed", completed}, {"total", total}, {"files", entries}};
  if (!error.empty()) j["error"] = error;
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

std::optional<Manifest> Manifest::read(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) return std::nullopt;
  try {
    const auto j = json::parse(in);
    Manifest m;
    m.command = j.at("command").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.completed = j.at("completed").get<std::size_t>();
    m.total = j.at("total").get<std::size_t>();
    for (const auto& [name, _] : j.at("files").items()) m.files.push_back(name);
    m.error = j.value("error", "");
    return m;
  } catch (const json::exception& e) {
    throw ValidationError("unreadable manifest in " + dir.string() + ": " + e.what());
  }
}

std::vector<TaskInstance> synthetic_tasks(const PipelineConfig& config) {
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<std::size_t>(config.n_tasks));
  for (int i = 0; i < config.n_tasks; ++i) {
    tasks.push_back(make_task(config.task_seed * 100000 + static_cast<std::uint64_t>(i), config.k_budget));
  }
  return tasks;
}

std::vector<EvalItem> Suite::items() const {
  std::vector<EvalItem> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) out.push_back({tasks[i], ladders[i]});
  return out;
}

Suite generate_synthetic_suite(const PipelineConfig& config, std::uint64_t search_seed) {
  Suite suite;
  suite.tasks = synthetic_tasks(config);
  auto clients = make_clients(config, suite.tasks);
  const auto settings = config.search_settings(search_seed);
  suite.trees.resize(suite.tasks.size());
  suite.ladders.resize(suite.tasks.size());
  parallel_for(suite.tasks.size(), config.workers, [&](std::size_t i) {
    const auto& t = suite.tasks[i];
    suite.trees[i] = search_trajectory(*clients.main, clients.golden.get(), {std::to_string(t.hidden_target)},
                                       t.task_id, t.prompt, t.k_budget, config.base_count(), settings);
    suite.ladders[i] = ladders_from_tree(suite.trees[i]);
  });
  return suite;
}

std::vector<PreferencePair> build_all_pairs(std::span<const TaskLadders> ladders, const PairOptions& options,
                                            int workers) {
  std::vector<std::vector<PreferencePair>> per_task(ladders.size());
  parallel_for(ladders.size(), workers, [&](std::size_t i) { per_task[i] = build_pairs(ladders[i], options); });
  std::vector<PreferencePair> pairs;
  for (auto& p : per_task) {
    pairs.insert(pairs.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return pairs;
}

std::vector<Demonstration> clean_demonstrations(std::span<const TaskLadders> ladders) {
  std::vector<Demonstration> out;
  for (const auto& l : ladders) out.push_back({l.task_id, l.clean_chain()});
  return out;
}

CommandStatus cmd_generate(const PipelineConfig& config, std::ostream& log, const std::atomic<bool>& stop) {
  const auto dir = stage_dir(config, "generate");
  std::vector<TaskInstance> synthetic;
  const auto specs = task_specs(config, &synthetic);

  std::vector<std::string> task_lines;
  if (config.task_source == "synthetic") {
    for (const auto& t : synthetic) task_lines.push_back(task_record(t));
  } else {
    for (const auto& s : specs) {
      task_lines.push_back(json{{"task_id", s.task_id}, {"prompt", s.prompt}, {"k_budget", s.k_budget}}.dump());
    }
  }
  write_file(dir / "tasks.jsonl", join_lines(task_lines));

  Manifest manifest;
  manifest.command = "generate";
  manifest.config_hash = config.hash();
  manifest.total = specs.size();
  manifest.files = {"tasks.jsonl", "trees.jsonl", "ladders.jsonl"};

  std::vector<std::string> trees;
  std::vector<std::string> ladders;
  if (const auto previous = Manifest::read(dir);
      previous && previous->config_hash == manifest.config_hash && previous->status != "complete" &&
      fs::exists(dir / "trees.jsonl") && fs::exists(dir / "ladders.jsonl")) {
    trees = read_lines(dir / "trees.jsonl");
    ladders = read_lines(dir / "ladders.jsonl");
    const std::size_t keep = std::min({previous->completed, trees.size(), ladders.size()});
    trees.resize(keep);
    ladders.resize(keep);
    log << "resuming generate at task " << keep << " of " << specs.size() << '\n';
  }

  auto clients = make_clients(config, synthetic);
  const auto settings = config.search_settings(config.seeds.front());
  auto flush = [&](const std::string& status, const std::string& error) {
    write_file(dir / "trees.jsonl", join_lines(trees));
    write_file(dir / "ladders.jsonl", join_lines(ladders));
    manifest.status = status;
    manifest.completed = trees.size();
    manifest.error = error;
    manifest.write(dir);
  };

  const std::size_t chunk = static_cast<std::size_t>(std::max(1, config.workers * 4));
  std::size_t zero_score = 0;
  std::size_t golden_failures = 0;
  for (std::size_t start = trees.size(); start < specs.size(); start += chunk) {
    if (stop.load()) {
      flush("interrupted", "");
      log << "interrupted after " << trees.size() << " of " << specs.size() << " tasks\n";
      return CommandStatus::interrupted;
    }
    const std::size_t end = std::min(specs.size(), start + chunk);
    std::vector<SearchTree> results(end - start);
    std::vector<std::exception_ptr> errors(end - start);
    parallel_for(end - start, config.workers, [&](std::size_t i) {
      const auto& s = specs[start + i];
      try {
        results[i] = search_trajectory(*clients.main, clients.golden.get(), s.key, s.task_id, s.prompt,
                                       s.k_budget, config.base_count(), settings);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
    for (std::size_t i = 0; i < results.size(); ++i) {
      if (errors[i]) {
        std::string message;
        try {
          std::rethrow_exception(errors[i]);
        } catch (const std::exception& e) {
          message = specs[start + i].task_id + ": " + e.what();
        }
        flush("partial", message);
        log << "generate stopped at task " << trees.size() << ": " << message << '\n';
        std::rethrow_exception(errors[i]);
      }
      for (const auto& node : results[i].nodes) {
        zero_score += node.zero_score ? 1 : 0;
        golden_failures += node.golden_failed ? 1 : 0;
      }
      trees.push_back(tree_record(results[i]));
      ladders.push_back(ladders_record(ladders_from_tree(results[i])));
    }
    if (end < specs.size()) flush("partial", "");
  }
  flush("complete", "");
  log << "generated " << trees.size() << " trees (" << zero_score << " zero-score depths, " << golden_failures
      << " golden failures)\n";
  return CommandStatus::ok;
}

CommandStatus cmd_build_pairs(const PipelineConfig& config, std::ostream& log) {
  const auto ladders = load_ladders(config);
  const auto dir = stage_dir(config, "pairs");
  std::vector<PreferencePair> pairs;
  try {
    pairs = build_all_pairs(ladders, PairOptions{config.m, config.noisy_prefix_prob, config.seeds.front(), false},
                            config.workers);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const auto audit = audit_pairs(pairs);
  const json summary{{"pairs", audit.pairs},
                     {"dominance_violations", audit.dominance_violations},
                     {"schedule_violations", audit.schedule_violations},
                     {"overlap_violations", audit.overlap_violations},
                     {"length_violations", audit.length_violations},
                     {"round_trip", audit.round_trip}};
  write_file(dir / "pairs.jsonl", serialize_pairs(pairs));
  write_file(dir / "audit.json", summary.dump(2) + "\n");
  log << "pairs: " << audit.pairs << "  dominance violations: " << audit.dominance_violations
      << "  schedule violations: " << audit.schedule_violations
      << "  overlap violations: " << audit.overlap_violations
      << "  length violations: " << audit.length_violations
      << "  round trip: " << (audit.round_trip ? "ok" : "FAILED") << '\n';
  Manifest manifest{"build-pairs", config.hash(), audit.ok() ? "complete" : "failed", audit.pairs, audit.pairs,
                    {"pairs.jsonl", "audit.json"}, audit.ok() ? "" : "pair audit failed"};
  manifest.write(dir);
  if (!audit.ok()) throw ValidationError("pair audit failed");
  return CommandStatus::ok;
}

CommandStatus cmd_train_toy(const PipelineConfig& config, std::ostream& log) {
  const auto ladders = load_ladders(config);
  const auto pairs_dir = fs::path(config.output_dir) / "pairs";
  require_complete(pairs_dir, "pair dataset");
  std::vector<PreferencePair> pairs;
  try {
    pairs = deserialize_pairs(read_file(pairs_dir / "pairs.jsonl"));
  } catch (const PairFormatError& e) {
    throw ValidationError("pairs.jsonl line " + std::to_string(e.line) + ": " + e.what());
  }
  const auto dir = stage_dir(config, "train");
  const auto init = ToyPolicy::from_ladders(ladders);
  const auto seed = config.seeds.front();
  TrainResult dpo;
  TrainResult sft;
  try {
    dpo = train_toy(pairs, init, config.beta, config.lr, config.epochs, seed);
    sft = train_sft(clean_demonstrations(ladders), init, config.lr, config.epochs, seed);
  } catch (const TrainingDiverged& e) {
    throw ValidationError(std::string("training diverged: ") + e.what());
  }
  std::string curve;
  auto emit = [&](const char* trainer, const TrainResult& r) {
    curve += json{{"trainer", trainer}, {"epoch", 0}, {"loss", r.initial_loss}}.dump() + "\n";
    for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
      curve += json{{"trainer", trainer}, {"epoch", e + 1}, {"loss", r.loss_curve[e]}}.dump() + "\n";
    }
    log << trainer << " loss: " << r.initial_loss;
    for (double l : r.loss_curve) log << " -> " << l;
    log << '\n';
  };
  emit("dpo", dpo);
  emit("sft", sft);
  write_file(dir / "policy.ckpt", dpo.policy.checkpoint());
  write_file(dir / "sft.ckpt", sft.policy.checkpoint());
  write_file(dir / "loss.jsonl", curve);
  Manifest{"train-toy", config.hash(), "complete", pairs.size(), pairs.size(),
           {"policy.ckpt", "sft.ckpt", "loss.jsonl"}, ""}
      .write(dir);
  return CommandStatus::ok;
}

CommandStatus cmd_decode(const PipelineConfig& config, std::ostream& log) {
  struct Job {
    std::string id;
    std::string prompt;
    int k_budget;
    std::optional<TaskInstance> task;
  };
  std::vector<Job> jobs;
  if (!config.decode_prompt.empty()) {
    jobs.push_back({"prompt-1", config.decode_prompt, config.k_budget, std::nullopt});
  } else if (config.task_source == "synthetic") {
    for (auto& t : load_synthetic_tasks(config)) jobs.push_back({t.task_id, t.prompt, t.k_budget, t});
  } else {
    for (const auto& line : read_lines(fs::path(config.output_dir) / "generate" / "tasks.jsonl")) {
      const auto j = json::parse(line);
      jobs.push_back({j.at("task_id").get<std::string>(), j.at("prompt").get<std::string>(),
                      j.at("k_budget").get<int>(), std::nullopt});
    }
  }
  if (config.eval_tasks > 0 && jobs.size() > static_cast<std::size_t>(config.eval_tasks)) {
    jobs.resize(static_cast<std::size_t>(config.eval_tasks));
  }

  std::optional<ToyPolicy> toy;
  std::unique_ptr<ModelClient> backend;
  if (config.decode_policy == "toy") {
    toy = load_policy(fs::path(config.output_dir) / "train" / "policy.ckpt");
  } else {
    backend = endpoint_client(config, config.endpoint);
  }
  const RequestShape shape{config.temperature, config.max_tokens, config.seeds.front()};

  const auto dir = stage_dir(config, "decode");
  std::vector<std::string> trajectories(jobs.size());
  std::vector<std::string> transcripts(jobs.size());
  parallel_for(jobs.size(), config.decode_policy == "toy" ? config.workers : 1, [&](std::size_t i) {
    const auto& job = jobs[i];
    std::unique_ptr<PolicyClient> policy;
    if (toy) {
      policy = std::make_unique<ToyPolicyClient>(*toy);
    } else {
      policy = std::make_unique<ChatPolicy>(*backend, shape);
    }
    const auto result = run_window(job.id, job.prompt, config.m, config.n, job.k_budget, *policy);
    json record{{"task_id", job.id}, {"m", config.m}, {"n", config.n}, {"steps", result.steps},
                {"advances", result.advances}};
    if (backend) {
      const auto replies = backend->generate(rollout_request(job.prompt, job.k_budget, result.steps, shape));
      const auto answer = replies.empty() ? std::nullopt : extract_answer(replies.front().text);
      record["answer"] = answer ? json(*answer) : json(nullptr);
    } else {
      const auto last = result.steps.empty() ? std::nullopt : parse_step(result.steps.back());
      record["answer"] = last ? json(std::to_string(last->result)) : json(nullptr);
    }
    if (job.task) record["correct"] = check_answer(*job.task, result.steps);
    trajectories[i] = record.dump();
    std::string lines;
    for (const auto& rec : result.transcript) {
      json r = rec.to_json();
      r["task_id"] = job.id;
      lines += r.dump();
      lines += '\n';
    }
    transcripts[i] = std::move(lines);
  });
  std::string transcript_text;
  for (const auto& t : transcripts) transcript_text += t;
  write_file(dir / "trajectories.jsonl", join_lines(trajectories));
  write_file(dir / "transcripts.jsonl", transcript_text);
  Manifest{"decode", config.hash(), "complete", jobs.size(), jobs.size(),
           {"trajectories.jsonl", "transcripts.jsonl"}, ""}
      .write(dir);
  log << "decoded " << jobs.size() << " prompt(s) with m=" << config.m << " n=" << config.n << '\n';
  return CommandStatus::ok;
}

CommandStatus cmd_eval(const PipelineConfig& config, std::ostream& log) {
  const auto items = eval_items(config);
  const fs::path out = config.output_dir;
  const auto train_dir = out / "train";
  require_complete(train_dir, "trained policies");
  const auto diffcot = load_policy(train_dir / "policy.ckpt");
  const auto sft = load_policy(train_dir / "sft.ckpt");

  EvalReport report;
  report.n_tasks = items.size();
  report.seeds = config.seeds;
  report.config = public_config(config);
  report.config_hash = config.hash();
  for (const char* name : {"generate/tasks.jsonl", "generate/ladders.jsonl", "train/policy.ckpt", "train/sft.ckpt"}) {
    report.inputs[name] = git_blob_sha1(read_file(out / name));
  }

  struct Entry {
    const char* name;
    const ToyPolicy* policy;
    DecodeMode mode;
  };
  const Entry entries[] = {{"diffcot", &diffcot, DecodeMode::windowed(config.m, config.n, config.rewrite_prefix)},
                           {"sft", &sft, DecodeMode::ar()}};
  for (const auto seed : config.seeds) {
    for (const auto& e : entries) {
      ToyPolicyClient client(*e.policy);
      PolicyEval pe{e.name, e.mode.label(), seed, accuracy(client, items, e.mode, config.workers), {}};
      for (double w : config.omegas) {
        pe.correction.push_back(correction_success_rate(client, items, {w, seed}, e.mode, config.workers));
      }
      for (const auto& msg : pe.accuracy.error_log) log << "task error: " << msg << '\n';
      report.policies.push_back(std::move(pe));
    }
  }
  const auto dir = stage_dir(config, "eval");
  write_file(dir / "report.jsonl", report.to_jsonl());
  const auto table = report.to_table();
  write_file(dir / "report.txt", table);
  Manifest{"eval", config.hash(), "complete", items.size(), items.size(), {"report.jsonl", "report.txt"}, ""}.write(dir);
  log << table;
  return CommandStatus::ok;
}

CommandStatus cmd_sweep(const PipelineConfig& config, std::ostream& log) {
  if (config.backend != "synthetic") throw ConfigError("sweep runs on the synthetic backend only");
  std::vector<SweepData> data;
  for (const auto seed : config.seeds) {
    auto suite = generate_synthetic_suite(config, seed);
    data.push_back({seed, suite.items()});
  }
  std::vector<SweepConfig> grid;
  if (config.sweep_grid.empty()) {
    grid = default_grid(config.k_budget, {config.m, config.n, false}, config.sweep_shuffled);
  } else {
    for (const auto& [gm, gn] : config.sweep_grid) grid.push_back({gm, gn, false});
    if (config.sweep_shuffled) grid.push_back({config.m, config.n, true});
  }
  EvalReport report;
  report.n_tasks = data.empty() ? 0 : data.front().items.size();
  report.seeds = config.seeds;
  report.config = public_config(config);
  report.config_hash = config.hash();
  report.sweep = ablation_sweep(grid, data, config.train_settings(), config.workers);

  const auto dir = stage_dir(config, "sweep");
  write_file(dir / "report.jsonl", report.to_jsonl());
  const auto table = report.to_table();
  write_file(dir / "report.txt", table);
  Manifest{"sweep", config.hash(), "complete", grid.size(), grid.size(), {"report.jsonl", "report.txt"}, ""}.write(dir);
  log << table;
  return CommandStatus::ok;
}

}  // namespace diffcot
