#pragma once

// Generation backends shared by thought search and decoding.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "diffcot/task_env.hpp"

namespace diffcot {

class ToyPolicy;

struct ChatMessage {
  std::string role;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct GenerationRequest {
  std::string system_prompt;
  std::vector<ChatMessage> messages;
  double temperature = 0.4;
  int max_tokens = 512;
  int n_samples = 1;
  std::optional<std::uint64_t> seed;
  bool want_logprobs = false;
  std::vector<std::string> stop;

  void validate() const;
};

struct StepCompletion {
  std::string text;
  std::string finish_reason;
  std::optional<std::vector<double>> logprobs;
};

class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, std::vector<std::string> attempts)
      : std::runtime_error(what), attempts_(std::move(attempts)) {}
  const std::vector<std::string>& attempts() const { return attempts_; }

 private:
  std::vector<std::string> attempts_;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelClient {
 public:
  virtual ~ModelClient() = default;

  virtual std::vector<StepCompletion> generate(const GenerationRequest& request) = 0;
  /// Total log-probability of `continuation` following `condition`.
  virtual double score_continuation(std::string_view condition, std::string_view continuation) = 0;
  virtual bool supports_logprobs() const = 0;
};

// Prompt layout used for every step-level request. The user message is the
// problem, then an optional block of prior steps, then one instruction line.
inline constexpr std::string_view kStepsHeader = "Steps so far:\n";
inline constexpr std::string_view kNextStepInstruction = "Write step ";
inline constexpr std::string_view kRolloutInstruction = "Continue from step ";
// Refinement of an existing step. The draft is wrapped in revision markers
// between the steps block and the instruction line.
inline constexpr std::string_view kReviseOpen = "<revise>\n";
inline constexpr std::string_view kReviseClose = "</revise>\n";
inline constexpr std::string_view kReviseInstruction = "Rewrite step ";

std::string solver_system_prompt(int k_budget);

struct RequestShape {
  double temperature = 0.4;
  int max_tokens = 512;
  std::uint64_t seed = 0;
};

/// Request for `n` independent samples of the next step only.
GenerationRequest step_request(std::string_view prompt, int k_budget,
                               std::span<const std::string> prefix, int n, const RequestShape& shape);
/// Request for a rewrite of `draft`, which currently stands as the step after
/// `prefix`.
GenerationRequest revise_request(std::string_view prompt, int k_budget,
                                 std::span<const std::string> prefix, std::string_view draft,
                                 const RequestShape& shape);
/// Request for one completion decoded to the final answer line.
GenerationRequest rollout_request(std::string_view prompt, int k_budget,
                                  std::span<const std::string> prefix, const RequestShape& shape);

enum class RequestKind { next_step, rollout, revise };

struct ParsedRequest {
  RequestKind kind = RequestKind::next_step;
  std::string prompt;
  std::vector<std::string> prefix;
  std::string draft;
};

ParsedRequest parse_request(const GenerationRequest& request);

/// Newline segmentation with blank lines dropped. A custom pattern replaces
/// the newline as the boundary.
std::vector<std::string> split_steps(std::string_view completion_text,
                                     std::optional<std::string> boundary_regex = std::nullopt);

/// Text after the last case-insensitive "Answer:" on its line.
std::optional<std::string> extract_answer(std::string_view text);

/// Condition text for score_continuation: the prompt line followed by one
/// step per line.
std::string render_condition(std::string_view prompt, std::span<const std::string> steps);

/// Deterministic backend over synthetic tasks. Candidate requests draw
/// distinct steps from the proposer; rollout requests sample the rest of the
/// trajectory and end with an "Answer:" line.
class SyntheticClient : public ModelClient {
 public:
  SyntheticClient(std::vector<TaskInstance> tasks, ProposerProfile profile,
                  std::shared_ptr<const ToyPolicy> policy = nullptr);

  std::vector<StepCompletion> generate(const GenerationRequest& request) override;
  double score_continuation(std::string_view condition, std::string_view continuation) override;
  bool supports_logprobs() const override { return policy_ != nullptr; }

  const TaskInstance& task_for_prompt(std::string_view prompt) const;
  const ProposerProfile& profile() const { return profile_; }

 private:
  std::map<std::string, TaskInstance, std::less<>> by_prompt_;
  ProposerProfile profile_;
  std::shared_ptr<const ToyPolicy> policy_;
};

}  // namespace diffcot
