#pragma once

// Tabular softmax policy over step-level vocabularies and the exact
// preference-optimisation numerics on top of it.
//
// A context is (task id, preceding step texts). Its logit vector ranges over
// the vocabulary of the next step index for that task. Contexts that were
// never updated have zero logits.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "diffcot/pref_builder.hpp"
#include "diffcot/thought_search.hpp"
#include "diffcot/window_machine.hpp"

namespace diffcot {

template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> log_softmax(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& z) {
  using std::exp;
  using std::log;
  const Scalar top = z.maxCoeff();
  Scalar total(0);
  for (Eigen::Index i = 0; i < z.size(); ++i) total += exp(z(i) - top);
  return z.array() - (top + log(total));
}

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OutOfVocabulary : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::uint64_t context_key(std::string_view task_id, std::span<const std::string> preceding);

using SparseGrad = std::map<std::uint64_t, Eigen::VectorXd>;

class ToyPolicy {
 public:
  ToyPolicy() = default;

  /// Vocabulary of every step index is the set of ladder candidates there.
  static ToyPolicy from_ladders(std::span<const TaskLadders> tasks);

  void add_to_vocab(const std::string& task_id, int step_index, const std::string& text);
  const std::vector<std::string>& vocab(std::string_view task_id, int step_index) const;
  /// Position of `text` in the vocabulary, or -1.
  int vocab_index(std::string_view task_id, int step_index, std::string_view text) const;

  Eigen::VectorXd logits(std::string_view task_id, std::span<const std::string> preceding) const;
  /// Adds `delta` to the stored logits of a context, creating it at zero.
  void add_logits(std::string_view task_id, std::span<const std::string> preceding,
                  const Eigen::VectorXd& delta);
  /// Applies a raw keyed update; the key must come from context_key.
  void add_logits(std::uint64_t key, const Eigen::VectorXd& delta);
  std::size_t stored_contexts() const { return table_.size(); }
  const std::map<std::uint64_t, Eigen::VectorXd>& table() const { return table_; }

  std::string checkpoint() const;
  static ToyPolicy from_checkpoint(std::string_view text);

  friend bool operator==(const ToyPolicy& a, const ToyPolicy& b) { return a.checkpoint() == b.checkpoint(); }

 private:
  std::map<std::pair<std::string, int>, std::vector<std::string>> vocab_;
  std::map<std::uint64_t, Eigen::VectorXd> table_;
};

class ReferencePolicy {
 public:
  explicit ReferencePolicy(const ToyPolicy& policy) : frozen_(policy) {}
  const ToyPolicy& policy() const { return frozen_; }

 private:
  const ToyPolicy frozen_;
};

double seq_logprob(const ToyPolicy& policy, std::string_view task_id,
                   std::span<const std::string> condition, std::span<const std::string> continuation);
double sft_loss(const ToyPolicy& policy, std::string_view task_id, std::span<const std::string> steps);

/// Gradient of seq_logprob with respect to every touched logit.
SparseGrad seq_logprob_grad(const ToyPolicy& policy, std::string_view task_id,
                            std::span<const std::string> condition,
                            std::span<const std::string> continuation);

inline constexpr double kDefaultBeta = 0.4;

struct DpoRecordLoss {
  double loss = 0.0;
  double margin = 0.0;
  SparseGrad grads;
};

DpoRecordLoss dpo_loss(const PreferencePair& pair, const ToyPolicy& policy, const ReferencePolicy& ref,
                       double beta);
/// Same as dpo_loss with `grads` filled.
DpoRecordLoss dpo_grad(const PreferencePair& pair, const ToyPolicy& policy, const ReferencePolicy& ref,
                       double beta);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int epoch, std::size_t step)
      : std::runtime_error(what), epoch(epoch), step(step) {}
  int epoch;  // 0 when the initial evaluation is already non-finite
  std::size_t step;
};

struct TrainResult {
  ToyPolicy policy;
  double initial_loss = 0.0;
  /// Mean loss over the whole set after each epoch.
  std::vector<double> loss_curve;
};

/// Per-record gradient descent over a seeded shuffle of the pairs.
TrainResult train_toy(std::span<const PreferencePair> pairs, const ToyPolicy& init, double beta,
                      double lr, int epochs, std::uint64_t seed);

struct Demonstration {
  std::string task_id;
  std::vector<std::string> steps;
};

/// Teacher-forcing baseline trained on clean chains.
TrainResult train_sft(std::span<const Demonstration> chains, const ToyPolicy& init, double lr,
                      int epochs, std::uint64_t seed);

/// Greedy decoding from a toy policy: the arg-max of the context logits, with
/// ties going to the smaller text. The requested noise level is ignored.
class ToyPolicyClient : public PolicyClient {
 public:
  explicit ToyPolicyClient(const ToyPolicy& policy) : policy_(policy) {}
  std::string propose(const PolicyQuery& query) override;

 private:
  const ToyPolicy& policy_;
};

}  // namespace diffcot
