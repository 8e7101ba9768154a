#pragma once

// Pipeline configuration, content hashing and the command bodies behind the
// command-line tool.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffcot/eval_harness.hpp"
#include "diffcot/http_client.hpp"
#include "diffcot/pref_builder.hpp"
#include "diffcot/task_env.hpp"
#include "diffcot/thought_search.hpp"

namespace diffcot {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  // Task source: "synthetic" or "prompt_file" (JSONL of {task_id, prompt, answer, k_budget}).
  std::string task_source = "synthetic";
  std::string prompt_file;
  int n_tasks = 500;
  int k_budget = 5;
  std::uint64_t task_seed = 0;

  int candidates = 5;  // per step, golden included when enabled
  int rollouts = 8;
  bool golden = true;
  double temperature = 0.4;
  int max_tokens = 512;

  ProposerProfile profile;

  int m = 2;
  int n = 1;
  bool rewrite_prefix = true;
  double noisy_prefix_prob = 0.0;

  double beta = 0.4;
  double lr = 1.0;
  int epochs = 3;

  std::vector<double> omegas{0.2, 0.4, 0.6, 0.8};
  int eval_tasks = 0;  // 0 evaluates every generated task

  std::vector<std::pair<int, int>> sweep_grid;  // empty selects the default grid
  bool sweep_shuffled = true;

  std::vector<std::uint64_t> seeds{0, 1, 2};

  // Backend: "synthetic", "endpoint" or "replay".
  std::string backend = "synthetic";
  EndpointConfig endpoint;
  EndpointConfig golden_endpoint;

  std::string decode_policy = "toy";  // "toy" or "endpoint"
  std::string decode_prompt;

  int workers = 4;
  std::string output_dir = "out";

  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  /// Hash of every setting that can change an output byte.
  std::string hash() const;

  int base_count() const { return golden ? candidates - 1 : candidates; }
  SearchSettings search_settings(std::uint64_t seed) const;
  TrainSettings train_settings() const;
};

/// Applies "dotted.key=value" to a config document. The value is parsed as
/// JSON and falls back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

PipelineConfig load_config(const std::optional<std::filesystem::path>& file,
                           std::span<const std::string> overrides);

/// Hex SHA-1 of the git blob object for `content`.
std::string git_blob_sha1(std::string_view content);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

struct Manifest {
  std::string command;
  std::string config_hash;
  std::string status = "complete";
  std::size_t completed = 0;
  std::size_t total = 0;
  std::vector<std::string> files;
  std::string error;

  /// Hashes every listed file under `dir` and writes manifest.json.
  void write(const std::filesystem::path& dir) const;
  static std::optional<Manifest> read(const std::filesystem::path& dir);
};

std::vector<TaskInstance> synthetic_tasks(const PipelineConfig& config);

struct Suite {
  std::vector<TaskInstance> tasks;
  std::vector<SearchTree> trees;
  std::vector<TaskLadders> ladders;

  std::vector<EvalItem> items() const;
};

/// Runs the search over the synthetic suite in process.
Suite generate_synthetic_suite(const PipelineConfig& config, std::uint64_t search_seed);

std::vector<PreferencePair> build_all_pairs(std::span<const TaskLadders> ladders, const PairOptions& options,
                                            int workers);
std::vector<Demonstration> clean_demonstrations(std::span<const TaskLadders> ladders);

/// Exit status of a completed command body.
enum class CommandStatus { ok = 0, interrupted = 130 };

CommandStatus cmd_generate(const PipelineConfig& config, std::ostream& log, const std::atomic<bool>& stop);
CommandStatus cmd_build_pairs(const PipelineConfig& config, std::ostream& log);
CommandStatus cmd_train_toy(const PipelineConfig& config, std::ostream& log);
CommandStatus cmd_decode(const PipelineConfig& config, std::ostream& log);
CommandStatus cmd_eval(const PipelineConfig& config, std::ostream& log);
CommandStatus cmd_sweep(const PipelineConfig& config, std::ostream& log);

}  // namespace diffcot
