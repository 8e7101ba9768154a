#include "diffcot/dpo_core.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "diffcot/rng.hpp"

namespace diffcot {

namespace {

const std::vector<std::string> kEmptyVocab;

void check_token(std::string_view s, const char* what) {
  if (s.find_first_of("\t\n") != std::string_view::npos) {
    throw std::invalid_argument(std::string(what) + " may not contain tabs or newlines");
  }
}

void add_into(SparseGrad& into, const SparseGrad& from, double scale) {
  for (const auto& [key, g] : from) {
    auto it = into.find(key);
    if (it == into.end()) {
      into.emplace(key, scale * g);
    } else {
      it->second += scale * g;
    }
  }
}

bool finite(const SparseGrad& g) {
  return std::all_of(g.begin(), g.end(), [](const auto& kv) { return kv.second.allFinite(); });
}

}  // namespace

std::uint64_t context_key(std::string_view task_id, std::span<const std::string> preceding) {
  std::uint64_t h = fnv1a(task_id);
  for (const auto& s : preceding) h = fnv1a(s, fnv1a("\x1f", h));
  return seed_of(h, preceding.size());
}

ToyPolicy ToyPolicy::from_ladders(std::span<const TaskLadders> tasks) {
  ToyPolicy p;
  for (const auto& t : tasks) {
    for (const auto& l : t.ladders) {
      for (const auto& c : l.candidates) p.add_to_vocab(t.task_id, l.step_index, c.text);
    }
  }
  return p;
}

void ToyPolicy::add_to_vocab(const std::string& task_id, int step_index, const std::string& text) {
  if (!table_.empty()) throw std::logic_error("vocabulary is fixed once logits exist");
  check_token(task_id, "task id");
  check_token(text, "step text");
  auto& v = vocab_[{task_id, step_index}];
  const auto it = std::lower_bound(v.begin(), v.end(), text);
  if (it == v.end() || *it != text) v.insert(it, text);
}

const std::vector<std::string>& ToyPolicy::vocab(std::string_view task_id, int step_index) const {
  const auto it = vocab_.find({std::string(task_id), step_index});
  return it == vocab_.end() ? kEmptyVocab : it->second;
}

int ToyPolicy::vocab_index(std::string_view task_id, int step_index, std::string_view text) const {
  const auto& v = vocab(task_id, step_index);
  const auto it = std::lower_bound(v.begin(), v.end(), text);
  return it != v.end() && *it == text ? static_cast<int>(it - v.begin()) : -1;
}

Eigen::VectorXd ToyPolicy::logits(std::string_view task_id, std::span<const std::string> preceding) const {
  const auto it = table_.find(context_key(task_id, preceding));
  if (it != table_.end()) return it->second;
  return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab(task_id, static_cast<int>(preceding.size())).size()));
}

void ToyPolicy::add_logits(std::string_view task_id, std::span<const std::string> preceding,
                           const Eigen::VectorXd& delta) {
  const auto size = vocab(task_id, static_cast<int>(preceding.size())).size();
  if (static_cast<std::size_t>(delta.size()) != size) throw std::invalid_argument("logit update has the wrong size");
  add_logits(context_key(task_id, preceding), delta);
}

void ToyPolicy::add_logits(std::uint64_t key, const Eigen::VectorXd& delta) {
  auto it = table_.find(key);
  if (it == table_.end()) {
    if (delta.isZero(0.0)) return;
    table_.emplace(key, delta);
  } else {
    if (it->second.size() != delta.size()) throw std::invalid_argument("logit update has the wrong size");
    it->second += delta;
  }
}

std::string ToyPolicy::checkpoint() const {
  std::string out = "toy-policy v1\n";
  char buf[64];
  for (const auto& [key, words] : vocab_) {
    out += "vocab\t" + key.first + '\t' + std::to_string(key.second) + '\t' + std::to_string(words.size()) + '\n';
    for (const auto& w : words) out += '\t' + w + '\n';
  }
  for (const auto& [key, v] : table_) {
    std::snprintf(buf, sizeof buf, "logits\t%016" PRIx64 "\t%td", key, static_cast<std::ptrdiff_t>(v.size()));
    out += buf;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "\t%.17g", v(i));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

ToyPolicy ToyPolicy::from_checkpoint(std::string_view text) {
  ToyPolicy p;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "toy-policy v1") throw std::invalid_argument("not a toy policy checkpoint");
  auto fields = [](const std::string& l) {
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const auto tab = l.find('\t', start);
      f.push_back(l.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    return f;
  };
  while (std::getline(in, line)) {
    const auto f = fields(line);
    if (f[0] == "vocab" && f.size() == 4) {
      const int step = std::stoi(f[2]);
      const auto count = std::stoul(f[3]);
      auto& v = p.vocab_[{f[1], step}];
      for (unsigned long i = 0; i < count; ++i) {
        if (!std::getline(in, line) || line.empty() || line[0] != '\t') {
          throw std::invalid_argument("truncated vocabulary block");
        }
        v.push_back(line.substr(1));
      }
      if (!std::is_sorted(v.begin(), v.end())) throw std::invalid_argument("vocabulary block not sorted");
    } else if (f[0] == "logits" && f.size() >= 3) {
      const std::uint64_t key = std::stoull(f[1], nullptr, 16);
      const auto size = std::stoul(f[2]);
      if (f.size() != 3 + size) throw std::invalid_argument("logit row has the wrong length");
      Eigen::VectorXd v(static_cast<Eigen::Index>(size));
      for (std::size_t i = 0; i < size; ++i) v(static_cast<Eigen::Index>(i)) = std::strtod(f[3 + i].c_str(), nullptr);
      p.table_.emplace(key, std::move(v));
    } else {
      throw std::invalid_argument("unrecognised checkpoint line: " + line);
    }
  }
  return p;
}

double seq_logprob(const ToyPolicy& policy, std::string_view task_id,
                   std::span<const std::string> condition, std::span<const std::string> continuation) {
  std::vector<std::string> ctx(condition.begin(), condition.end());
  double total = 0.0;
  for (const auto& step : continuation) {
    const int idx = policy.vocab_index(task_id, static_cast<int>(ctx.size()), step);
    if (idx < 0) throw OutOfVocabulary("step not in vocabulary: " + step);
    total += log_softmax<double>(policy.logits(task_id, ctx))(idx);
    ctx.push_back(step);
  }
  return total;
}

double sft_loss(const ToyPolicy& policy, std::string_view task_id, std::span<const std::string> steps) {
  return -seq_logprob(policy, task_id, {}, steps);
}

SparseGrad seq_logprob_grad(const ToyPolicy& policy, std::string_view task_id,
                            std::span<const std::string> condition,
                            std::span<const std::string> continuation) {
  std::vector<std::string> ctx(condition.begin(), condition.end());
  SparseGrad grad;
  for (const auto& step : continuation) {
    const int idx = policy.vocab_index(task_id, static_cast<int>(ctx.size()), step);
    if (idx < 0) throw OutOfVocabulary("step not in vocabulary: " + step);
    Eigen::VectorXd g = -log_softmax<double>(policy.logits(task_id, ctx)).array().exp().matrix();
    g(idx) += 1.0;
    add_into(grad, SparseGrad{{context_key(task_id, ctx), std::move(g)}}, 1.0);
    ctx.push_back(step);
  }
  return grad;
}

namespace {

DpoRecordLoss evaluate(const PreferencePair& pair, const ToyPolicy& policy, const ReferencePolicy& ref,
                       double beta, bool with_grads) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  const auto& ref_policy = ref.policy();
  const double win = seq_logprob(policy, pair.task_id, pair.condition, pair.win);
  const double win_ref = seq_logprob(ref_policy, pair.task_id, pair.condition, pair.win);
  const double lose = seq_logprob(policy, pair.task_id, pair.condition, pair.lose);
  const double lose_ref = seq_logprob(ref_policy, pair.task_id, pair.condition, pair.lose);
  DpoRecordLoss r;
  r.margin = beta * ((win - win_ref) - (lose - lose_ref));
  r.loss = softplus(-r.margin);
  if (!std::isfinite(r.margin) || !std::isfinite(r.loss)) {
    throw NumericError("non-finite preference loss for " + pair.task_id + " k=" + std::to_string(pair.k));
  }
  if (with_grads) {
    const double coef = -beta * sigmoid(-r.margin);
    add_into(r.grads, seq_logprob_grad(policy, pair.task_id, pair.condition, pair.win), coef);
    add_into(r.grads, seq_logprob_grad(policy, pair.task_id, pair.condition, pair.lose), -coef);
    if (!finite(r.grads)) throw NumericError("non-finite preference gradient for " + pair.task_id);
  }
  return r;
}

template <typename LossFn>
double mean_loss(std::size_t count, LossFn&& loss) {
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) total += loss(i);
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

void check_training_args(double lr, int epochs) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be >= 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
}

}  // namespace

DpoRecordLoss dpo_loss(const PreferencePair& pair, const ToyPolicy& policy, const ReferencePolicy& ref,
                       double beta) {
  return evaluate(pair, policy, ref, beta, false);
}

DpoRecordLoss dpo_grad(const PreferencePair& pair, const ToyPolicy& policy, const ReferencePolicy& ref,
                       double beta) {
  return evaluate(pair, policy, ref, beta, true);
}

TrainResult train_toy(std::span<const PreferencePair> pairs, const ToyPolicy& init, double beta,
                      double lr, int epochs, std::uint64_t seed) {
  check_training_args(lr, epochs);
  TrainResult out{init, 0.0, {}};
  const ReferencePolicy ref(init);
  auto loss_at = [&](std::size_t i) { return dpo_loss(pairs[i], out.policy, ref, beta).loss; };
  try {
    out.initial_loss = mean_loss(pairs.size(), loss_at);
  } catch (const NumericError& e) {
    throw TrainingDiverged(std::string(e.what()) + " before training", 0, 0);
  }

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(seed_of(seed, static_cast<std::uint64_t>(epoch), 0xd90ULL));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t step = 0; step < order.size(); ++step) {
      DpoRecordLoss r;
      try {
        r = dpo_grad(pairs[order[step]], out.policy, ref, beta);
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) + " step " +
                                   std::to_string(step + 1),
                               epoch + 1, step + 1);
      }
      if (lr == 0.0) continue;
      for (const auto& [key, g] : r.grads) out.policy.add_logits(key, -lr * g);
    }
    double loss = 0.0;
    try {
      loss = mean_loss(pairs.size(), loss_at);
    } catch (const NumericError& e) {
      throw TrainingDiverged(e.what(), epoch + 1, order.size());
    }
    out.loss_curve.push_back(loss);
  }
  return out;
}

TrainResult train_sft(std::span<const Demonstration> chains, const ToyPolicy& init, double lr, int epochs,
                      std::uint64_t seed) {
  check_training_args(lr, epochs);
  TrainResult out{init, 0.0, {}};
  auto loss_at = [&](std::size_t i) { return sft_loss(out.policy, chains[i].task_id, chains[i].steps); };
  out.initial_loss = mean_loss(chains.size(), loss_at);

  std::vector<std::size_t> order(chains.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(seed_of(seed, static_cast<std::uint64_t>(epoch), 0x5f7ULL));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t step = 0; step < order.size(); ++step) {
      if (lr == 0.0) continue;
      const auto& c = chains[order[step]];
      for (const auto& [key, g] : seq_logprob_grad(out.policy, c.task_id, {}, c.steps)) {
        out.policy.add_logits(key, lr * g);
      }
    }
    const double loss = mean_loss(chains.size(), loss_at);
    if (!std::isfinite(loss)) throw TrainingDiverged("non-finite SFT loss", epoch + 1, order.size());
    out.loss_curve.push_back(loss);
  }
  return out;
}

std::string ToyPolicyClient::propose(const PolicyQuery& query) {
  const auto& words = policy_.vocab(query.prompt_id, query.step_index);
  if (words.empty()) {
    throw OutOfVocabulary("no vocabulary for " + query.prompt_id + " step " + std::to_string(query.step_index + 1));
  }
  const Eigen::VectorXd z = policy_.logits(query.prompt_id, query.preceding);
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < z.size(); ++i) {
    if (z(i) > z(best)) best = i;
  }
  return words[static_cast<std::size_t>(best)];
}

}  // namespace diffcot
