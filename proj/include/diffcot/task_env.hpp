#pragma once

// Synthetic chained-arithmetic reasoning environment.
//
// A task is a start value plus K integer operations. Each reasoning step has
// the canonical shape "step i: v op w = r". A correct step always restates
// the true running value, so a later correct step repairs an earlier mistake.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace diffcot {

enum class Op { add, sub, mul };

struct Operation {
  Op op = Op::add;
  std::int64_t operand = 0;

  std::int64_t apply(std::int64_t v) const;
  friend bool operator==(const Operation&, const Operation&) = default;
};

char op_symbol(Op op);

inline constexpr std::int64_t kValueBound = 1'000'000;

struct TaskInstance {
  std::string task_id;
  std::uint64_t seed = 0;
  int k_budget = 0;
  std::string prompt;
  std::int64_t initial_value = 0;
  std::int64_t hidden_target = 0;
  std::vector<Operation> op_chain;

  /// True running value after `steps` operations (0 gives the start value).
  std::int64_t value_after(int steps) const;
  /// Text of the ground-truth step at 0-based index `step`.
  std::string correct_step(int step) const;
  std::vector<std::string> correct_chain() const;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct CandidateStep {
  std::string text;
  bool is_correct = false;
  int quality_tier = 0;

  friend bool operator==(const CandidateStep&, const CandidateStep&) = default;
};

/// Relation words a step may use between the expression and the result.
/// Index 0 ("=") is the canonical form.
inline constexpr std::string_view kRelations[] = {"=", "gives", "is", "makes", "yields"};
inline constexpr int kRelationCount = 5;
inline constexpr int kMaxTier = 4;

struct ProposerProfile {
  /// Weights over tiers 0..3: correct, result off by +-d, result off by
  /// +-10d, wrong operand.
  std::vector<double> tier_weights{0.9, 0.04, 0.03, 0.03};
  /// Spread of distractor offsets; d ranges over 1..1+round(2*t).
  double temperature_analog = 0.0;
  std::uint64_t seed = 0;
  /// Probability that a step following a wrong running value restates the
  /// true one. Divided by the digit count of the error.
  double recovery = 0.1;
  /// Relation word preferred for correct steps.
  int phrasing = 0;

  void validate() const;
  int spread() const;

  static ProposerProfile golden();
};

struct ParsedStep {
  int index = 0;
  std::int64_t base = 0;
  Op op = Op::add;
  std::int64_t operand = 0;
  std::int64_t result = 0;
  int relation = 0;
};

std::string format_step(int index, std::int64_t base, Op op, std::int64_t operand,
                        std::int64_t result, int relation = 0);
std::optional<ParsedStep> parse_step(std::string_view text);

class TrajectoryExhausted : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class OracleInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

TaskInstance make_task(std::uint64_t seed, int k_budget);

/// Running value as stated by the last parseable step of `prefix`.
std::int64_t stated_value(const TaskInstance& task, std::span<const std::string> prefix);

struct StepOutcome {
  CandidateStep step;
  std::int64_t result = 0;
  double probability = 0.0;
};

/// Full discrete distribution of the synthetic proposer for the next step,
/// sorted by text. Zero-probability outcomes are included.
std::vector<StepOutcome> step_distribution(const TaskInstance& task,
                                           std::span<const std::string> prefix,
                                           const ProposerProfile& profile);

/// Draws `count` distinct candidates (sampling without replacement). When tier
/// 0 has positive weight at least one candidate is correct.
std::vector<CandidateStep> propose_candidates(const TaskInstance& task,
                                              std::span<const std::string> prefix, int count,
                                              const ProposerProfile& profile,
                                              std::uint64_t stream = 0);

/// Samples the remaining steps of a trajectory one at a time.
std::vector<std::string> sample_completion(const TaskInstance& task,
                                           std::span<const std::string> prefix,
                                           const ProposerProfile& profile, std::uint64_t seed);

bool check_answer(const TaskInstance& task, std::span<const std::string> trajectory_steps);

enum class CompletionPolicy { greedy_correct, profile_sampled };

inline constexpr std::size_t kDefaultOracleNodeCap = 2'000'000;

/// Exact probability that completing `prefix` with the proposer reaches the
/// hidden target. greedy_correct follows the most probable outcome at every
/// step; profile_sampled enumerates every outcome.
double oracle_success_rate(const TaskInstance& task, std::span<const std::string> prefix,
                           const ProposerProfile& profile, CompletionPolicy policy,
                           std::size_t node_cap = kDefaultOracleNodeCap);

/// One line of the task file. Hidden fields are never written.
std::string task_record(const TaskInstance& task);
TaskInstance task_from_record(std::string_view line);

}  // namespace diffcot
