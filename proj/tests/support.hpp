#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "diffcot/rng.hpp"
#include "diffcot/thought_search.hpp"
#include "diffcot/window_machine.hpp"

namespace diffcot::testing {

inline double binomial_pmf(int n, int k, double p) {
  if (p <= 0.0) return k == 0 ? 1.0 : 0.0;
  if (p >= 1.0) return k == n ? 1.0 : 0.0;
  const double log_choose = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
  return std::exp(log_choose + k * std::log(p) + (n - k) * std::log1p(-p));
}

/// Central acceptance region of Binomial(n, p) at level 1 - alpha: each tail
/// outside [lo, hi] carries at most alpha / 2.
inline std::pair<int, int> binomial_region(int n, double p, double alpha = 0.01) {
  int lo = 0;
  double below = 0.0;
  while (lo < n && below + binomial_pmf(n, lo, p) <= alpha / 2) below += binomial_pmf(n, lo++, p);
  int hi = n;
  double above = 0.0;
  while (hi > 0 && above + binomial_pmf(n, hi, p) <= alpha / 2) above += binomial_pmf(n, hi--, p);
  return {lo, hi};
}

/// Two success probabilities are told apart by n draws when their 99%
/// regions do not overlap.
inline bool separable(int n, double p_high, double p_low, double alpha = 0.01) {
  return binomial_region(n, p_low, alpha).second < binomial_region(n, p_high, alpha).first;
}

/// Answers from the ladders at the requested level, by step index.
class LadderPolicy : public PolicyClient {
 public:
  explicit LadderPolicy(TaskLadders ladders) : ladders_(std::move(ladders)) {}
  std::string propose(const PolicyQuery& q) override {
    const auto& c = ladders_.ladders.at(static_cast<std::size_t>(q.step_index)).candidates;
    return c[std::min<std::size_t>(static_cast<std::size_t>(q.target.index), c.size() - 1)].text;
  }

 private:
  TaskLadders ladders_;
};

/// Deterministic function of the query; every call is remembered.
class EchoPolicy : public PolicyClient {
 public:
  std::string propose(const PolicyQuery& q) override {
    queries.push_back(q);
    std::string s = "s" + std::to_string(q.step_index) + "@" + std::to_string(q.target.index);
    if (q.current) s += "<" + *q.current;
    return s;
  }
  std::vector<PolicyQuery> queries;
};

class FailingPolicy : public PolicyClient {
 public:
  explicit FailingPolicy(int fail_on_call) : fail_on_(fail_on_call) {}
  std::string propose(const PolicyQuery& q) override {
    if (calls_++ == fail_on_) throw std::runtime_error("policy unavailable");
    return "x" + std::to_string(q.step_index);
  }

 private:
  int fail_on_;
  int calls_ = 0;
};

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("diffcot-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace diffcot::testing
