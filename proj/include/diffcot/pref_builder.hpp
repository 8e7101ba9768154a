#pragma once

// Win/lose pairs cut from candidate ladders along the causal schedule.
//
// A pair is keyed by the 0-based window head j in [-1, K-2]. The window holds
// steps max(0, j-m+1)..j and the scored continuation ends with step j+1. The
// lose side keeps the window at its scheduled levels and adds the next step
// at the top level; the win side lowers every level by one. The condition is
// the clean chain before the window.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "diffcot/thought_search.hpp"

namespace diffcot {

struct PreferencePair {
  std::string task_id;
  std::string prompt;
  int k = 0;  // number of steps up to and including the window head
  int m = 1;
  std::vector<std::string> condition;
  std::vector<std::string> win;
  std::vector<std::string> lose;
  std::vector<int> levels_win;
  std::vector<int> levels_lose;
  std::vector<double> rates_win;
  std::vector<double> rates_lose;
  double beta_hint = 0.4;

  /// 0-based index of the first scored step.
  int first_scored_step() const { return k - static_cast<int>(win.size()) + 1; }
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

struct PairOptions {
  int m = 2;
  double noisy_prefix_prob = 0.0;
  std::uint64_t seed = 0;
  /// Fill levels from a seed-shuffled ladder order instead of the ranking.
  bool shuffled = false;
};

std::vector<PreferencePair> build_pairs(const TaskLadders& task, const PairOptions& options);

class PairFormatError : public std::runtime_error {
 public:
  PairFormatError(const std::string& what, std::size_t line) : std::runtime_error(what), line(line) {}
  std::size_t line;
};

std::string serialize_pairs(std::span<const PreferencePair> pairs);
std::vector<PreferencePair> deserialize_pairs(std::string_view text);

struct PairAudit {
  std::size_t pairs = 0;
  std::size_t dominance_violations = 0;
  std::size_t schedule_violations = 0;
  std::size_t overlap_violations = 0;
  std::size_t length_violations = 0;
  bool round_trip = true;

  bool ok() const {
    return dominance_violations == 0 && schedule_violations == 0 && overlap_violations == 0 &&
           length_violations == 0 && round_trip;
  }
};

/// Checks stored metadata against the schedule. With m = 1 the lose level is
/// the worst rank of its ladder, so it is only required to be positive.
PairAudit audit_pairs(std::span<const PreferencePair> pairs);

}  // namespace diffcot
