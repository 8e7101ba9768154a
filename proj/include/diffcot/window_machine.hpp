#pragma once

// Sliding-window denoising decoder.
//
// Every advance refines the in-window steps one noise level down, retires the
// oldest slots to make room, appends up to n fresh steps at the top level and
// bumps the iteration. Once the step budget is reached the window only
// refines, and it is flushed when every slot is clean.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffcot/model_client.hpp"
#include "diffcot/noise_model.hpp"

namespace diffcot {

struct PolicyQuery {
  std::string prompt_id;
  std::string prompt;
  int k_budget = 0;
  /// Steps before the one being written, oldest first.
  std::vector<std::string> preceding;
  int step_index = 0;
  NoiseLevel target;
  /// Current text when rewriting an existing step.
  std::optional<std::string> current;

  friend bool operator==(const PolicyQuery&, const PolicyQuery&) = default;
};

class PolicyClient {
 public:
  virtual ~PolicyClient() = default;
  virtual std::string propose(const PolicyQuery& query) = 0;
};

class TransitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WindowSlot {
  std::string text;
  NoiseLevel level;

  friend bool operator==(const WindowSlot&, const WindowSlot&) = default;
};

struct WindowState {
  std::string prompt_id;
  std::string prompt;
  int k_budget = 0;
  int m = 1;
  int n = 1;
  std::vector<std::string> committed;
  std::vector<WindowSlot> window;
  int head = -1;  // index of the newest generated step
  int t = 0;      // advances performed

  bool finished() const { return static_cast<int>(committed.size()) == k_budget && window.empty(); }
  int first_window_step() const { return static_cast<int>(committed.size()); }
  nlohmann::json to_json() const;
  friend bool operator==(const WindowState&, const WindowState&) = default;
};

WindowState init_window(std::string prompt_id, std::string prompt, int k_budget, int m, int n);

/// State after `prefix` has been produced by some other decoder. With
/// `rewrite_prefix` the trailing prefix steps re-enter the window at the
/// levels they would hold had they been decoded here; otherwise the whole
/// prefix is committed.
WindowState resume_window(std::string prompt_id, std::string prompt, int k_budget, int m, int n,
                          std::span<const std::string> prefix, bool rewrite_prefix);

struct TranscriptRecord {
  int t = 0;
  int head = 0;
  std::vector<int> levels_before;
  std::vector<std::string> before;
  std::vector<std::string> refined;
  std::vector<std::string> appended;
  std::vector<std::string> committed;
  std::vector<int> levels_after;

  nlohmann::json to_json() const;
  friend bool operator==(const TranscriptRecord&, const TranscriptRecord&) = default;
};

/// One denoising iteration. The input state is never modified.
WindowState advance(const WindowState& state, PolicyClient& policy, TranscriptRecord* record = nullptr);

struct DecodeResult {
  std::vector<std::string> steps;
  std::vector<TranscriptRecord> transcript;
  int advances = 0;
};

DecodeResult run_window(std::string prompt_id, std::string prompt, int m, int n, int k_budget,
                        PolicyClient& policy);
DecodeResult run_from(WindowState state, PolicyClient& policy);

/// Plain left-to-right decoding, one clean step per call.
std::vector<std::string> sequential_decode(const std::string& prompt_id, const std::string& prompt,
                                           int k_budget, PolicyClient& policy);

/// Policy over a chat backend. New steps use the next-step request; rewrites
/// use the revision request. Only the first line of the reply is kept.
class ChatPolicy : public PolicyClient {
 public:
  ChatPolicy(ModelClient& client, RequestShape shape) : client_(client), shape_(shape) {}
  std::string propose(const PolicyQuery& query) override;

 private:
  ModelClient& client_;
  RequestShape shape_;
};

}  // namespace diffcot
