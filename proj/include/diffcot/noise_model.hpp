#pragma once

// Step-level noise algebra. Step and iteration indices are 0-based.
//
// A window of size m spans levels 0..m-1: the oldest in-window step is clean
// and the newest carries the highest noise. Every window advance lowers each
// in-window level by one.

#include <stdexcept>
#include <vector>

namespace diffcot {

struct CandidateLadder;
struct ScoredCandidate;

struct NoiseLevel {
  int index = 0;
  int max_index = 0;

  bool clean() const { return index == 0; }
  friend bool operator==(const NoiseLevel&, const NoiseLevel&) = default;
};

struct CausalSchedule {
  int window_size = 1;
  int stride = 1;

  int max_level() const { return window_size - 1; }
  void validate() const;
};

struct SlotLevel {
  int step = 0;
  NoiseLevel level;

  friend bool operator==(const SlotLevel&, const SlotLevel&) = default;
};

/// Levels of the window whose newest step is `head`. Before the window has
/// filled, the slots are steps 0..head with the same recency-ordered levels.
std::vector<SlotLevel> causal_schedule(int head, int window_size);

/// Noise of step `step` after denoising iteration `iteration` (stride 1).
NoiseLevel level_for(int step, int iteration, int window_size);

/// Ladder entry standing for `level`; short ladders clamp to their last rank.
const ScoredCandidate& rank_to_noise(const CandidateLadder& ladder, NoiseLevel level);
std::size_t rank_for(std::size_t ladder_size, NoiseLevel level);

}  // namespace diffcot
