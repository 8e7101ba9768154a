#pragma once

// Greedy expand-score-select search over reasoning steps. Every candidate is
// scored by the fraction of sampled rollouts that reach the right answer.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "diffcot/model_client.hpp"

namespace diffcot {

enum class CandidateSource { base, golden };

struct ScoredCandidate {
  std::string text;
  int wins = 0;
  int rollouts = 0;
  CandidateSource source = CandidateSource::base;

  double success_rate() const { return rollouts == 0 ? 0.0 : static_cast<double>(wins) / rollouts; }
  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

/// Ordering used everywhere a ranking is needed: higher success rate first,
/// then golden before base, then the smaller text.
bool ranks_before(const ScoredCandidate& a, const ScoredCandidate& b);

/// Decides whether a rollout reached the expected final answer.
struct AnswerKey {
  std::string answer;

  bool matches(std::string_view completion) const;
};

class ScoringError : public std::runtime_error {
 public:
  ScoringError(const std::string& what, int wins, int completed, int requested)
      : std::runtime_error(what), wins(wins), completed(completed), requested(requested) {}
  int wins;
  int completed;
  int requested;
};

struct SearchSettings {
  int rollouts = 8;
  std::uint64_t seed = 0;
  double temperature = 0.4;
  int max_tokens = 512;
  int workers = 1;
};

ScoredCandidate score_candidate(ModelClient& client, const AnswerKey& key, std::string_view prompt,
                                int k_budget, std::span<const std::string> prefix,
                                std::string_view candidate, const SearchSettings& settings,
                                CandidateSource source = CandidateSource::base);

struct Expansion {
  std::vector<ScoredCandidate> candidates;
  bool golden_failed = false;
  std::string golden_error;
};

Expansion expand_step(ModelClient& client, ModelClient* golden_client, const AnswerKey& key,
                      std::string_view prompt, int k_budget, std::span<const std::string> prefix,
                      int base_count, const SearchSettings& settings);

struct SearchNode {
  int id = 0;
  int parent = -1;
  int depth = 0;
  ScoredCandidate candidate;
  /// Set on the chosen node of a depth whose candidates all scored zero.
  bool zero_score = false;
  /// Set on the chosen node of a depth where the golden client failed.
  bool golden_failed = false;

  friend bool operator==(const SearchNode&, const SearchNode&) = default;
};

struct SearchTree {
  std::string task_id;
  std::string prompt;
  int k_budget = 0;
  std::vector<SearchNode> nodes;   // nodes[0] is the root
  std::vector<int> chosen_path;    // one node id per depth 1..k_budget

  std::vector<const SearchNode*> children(int node_id) const;
  std::vector<std::string> chosen_steps() const;
  friend bool operator==(const SearchTree&, const SearchTree&) = default;
};

SearchTree search_trajectory(ModelClient& client, ModelClient* golden_client, const AnswerKey& key,
                             std::string_view task_id, std::string_view prompt, int k_budget,
                             int base_count, const SearchSettings& settings);

struct CandidateLadder {
  int step_index = 0;  // 0-based
  std::vector<ScoredCandidate> candidates;

  friend bool operator==(const CandidateLadder&, const CandidateLadder&) = default;
};

/// Ladders of one task, in step order.
struct TaskLadders {
  std::string task_id;
  std::string prompt;
  int k_budget = 0;
  std::vector<CandidateLadder> ladders;

  std::vector<std::string> clean_chain() const;
  friend bool operator==(const TaskLadders&, const TaskLadders&) = default;
};

TaskLadders ladders_from_tree(const SearchTree& tree);

std::string tree_record(const SearchTree& tree);
SearchTree tree_from_record(std::string_view line);
std::string ladders_record(const TaskLadders& ladders);
TaskLadders ladders_from_record(std::string_view line);

}  // namespace diffcot
