#include "diffcot/noise_model.hpp"

#include <algorithm>

#include "diffcot/thought_search.hpp"

namespace diffcot {

void CausalSchedule::validate() const {
  if (window_size < 1) throw std::invalid_argument("window size must be >= 1");
  if (stride < 1 || stride > window_size) {
    throw std::invalid_argument("stride must satisfy 1 <= n <= m");
  }
}

NoiseLevel level_for(int step, int iteration, int window_size) {
  if (window_size < 1) throw std::invalid_argument("window size must be >= 1");
  const int top = window_size - 1;
  return {std::clamp(top - (iteration - step), 0, top), top};
}

std::vector<SlotLevel> causal_schedule(int head, int window_size) {
  if (window_size < 1) throw std::invalid_argument("window size must be >= 1");
  std::vector<SlotLevel> slots;
  for (int step = std::max(0, head - window_size + 1); step <= head; ++step) {
    slots.push_back({step, level_for(step, head, window_size)});
  }
  return slots;
}

std::size_t rank_for(std::size_t ladder_size, NoiseLevel level) {
  if (ladder_size == 0) throw std::invalid_argument("empty ladder");
  return std::min(static_cast<std::size_t>(std::max(level.index, 0)), ladder_size - 1);
}

const ScoredCandidate& rank_to_noise(const CandidateLadder& ladder, NoiseLevel level) {
  return ladder.candidates[rank_for(ladder.candidates.size(), level)];
}

}  // namespace diffcot
