#pragma once

// Accuracy, prefix-corruption recovery and window ablations.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffcot/dpo_core.hpp"
#include "diffcot/task_env.hpp"
#include "diffcot/thought_search.hpp"
#include "diffcot/window_machine.hpp"

namespace diffcot {

struct EvalItem {
  TaskInstance task;
  TaskLadders ladders;
};

enum class DecodeKind { ar, windowed };

struct DecodeMode {
  DecodeKind kind = DecodeKind::ar;
  int m = 1;
  int n = 1;
  /// Windowed decoding from a prefix may rewrite the trailing prefix steps.
  bool rewrite_prefix = true;

  static DecodeMode ar() { return {}; }
  static DecodeMode windowed(int m, int n, bool rewrite_prefix = true) {
    return {DecodeKind::windowed, m, n, rewrite_prefix};
  }
  std::string label() const;
};

struct RateResult {
  std::size_t successes = 0;
  std::size_t trials = 0;
  std::size_t errors = 0;
  std::vector<std::string> error_log;

  double rate() const { return trials == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(trials); }
};

std::vector<std::string> decode_steps(PolicyClient& policy, const EvalItem& item, const DecodeMode& mode);

RateResult accuracy(PolicyClient& policy, std::span<const EvalItem> items, const DecodeMode& mode,
                    int workers = 1);

struct PerturbationSpec {
  double omega = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CorruptedPrefix {
  std::vector<std::string> prefix;
  int replaced = 0;
  int unperturbable = 0;  // selected steps whose ladder had nothing to swap in
};

/// First floor(K/2) steps of `trajectory`, each replaced with probability
/// omega by a uniformly drawn lower-ranked ladder entry.
CorruptedPrefix corrupt_prefix(std::span<const std::string> trajectory, const TaskLadders& ladders,
                               const PerturbationSpec& spec);

struct CorrectionResult {
  double omega = 0.0;
  RateResult outcome;
  std::size_t replaced = 0;
  std::size_t unperturbable = 0;
};

CorrectionResult correction_success_rate(PolicyClient& policy, std::span<const EvalItem> items,
                                         const PerturbationSpec& spec, const DecodeMode& mode,
                                         int workers = 1);

struct TrainSettings {
  double beta = kDefaultBeta;
  double lr = 1.0;
  int epochs = 3;
  double noisy_prefix_prob = 0.0;
};

struct SweepConfig {
  int m = 1;
  int n = 1;
  bool shuffled = false;

  std::string label(int k_budget) const;
};

/// Suite shared by every configuration of one seed.
struct SweepData {
  std::uint64_t seed = 0;
  std::vector<EvalItem> items;
};

struct SweepRow {
  SweepConfig config;
  std::string label;
  std::vector<double> per_seed;
  std::vector<std::string> failures;

  double mean() const;
  double stderr_of_mean() const;
};

/// Builds pairs, trains a fresh toy policy and measures windowed accuracy for
/// every configuration and seed. A failing configuration is recorded and the
/// sweep moves on.
std::vector<SweepRow> ablation_sweep(std::span<const SweepConfig> grid, std::span<const SweepData> data,
                                     const TrainSettings& train, int workers = 1);

/// Default grid: AR, every mixed (m, n) with 1 <= n <= m <= K except the two
/// degenerate corners, full diffusion, and the shuffled variant of `base`.
std::vector<SweepConfig> default_grid(int k_budget, SweepConfig base, bool with_shuffled);

struct PolicyEval {
  std::string policy;
  std::string decode;
  std::uint64_t seed = 0;
  RateResult accuracy;
  std::vector<CorrectionResult> correction;
};

struct EvalReport {
  std::size_t n_tasks = 0;
  std::vector<std::uint64_t> seeds;
  nlohmann::json config;
  std::string config_hash;
  nlohmann::json inputs = nlohmann::json::object();
  std::vector<PolicyEval> policies;
  std::vector<SweepRow> sweep;

  std::string to_jsonl() const;
  std::string to_table() const;
};

}  // namespace diffcot
