#include "diffcot/task_env.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "diffcot/rng.hpp"

namespace diffcot {

namespace {

constexpr double kVariantMass = 1e-3;

struct RawOutcome {
  std::int64_t base;
  std::int64_t operand;
  std::int64_t result;
  int relation;
  int tier;
  bool correct;
  double probability;
};

int digit_count(std::int64_t e) {
  int n = 1;
  for (e = e < 0 ? -e : e; e >= 10; e /= 10) ++n;
  return n;
}

// Outcomes of the proposer at 0-based step `index` given the stated running
// value. Construction order is deterministic; entries may have probability 0.
std::vector<RawOutcome> raw_outcomes(const TaskInstance& task, int index, std::int64_t stated,
                                     const ProposerProfile& profile) {
  const std::int64_t truth = task.value_after(index);
  const std::int64_t next_truth = task.value_after(index + 1);
  const Operation& op = task.op_chain[static_cast<std::size_t>(index)];
  const int spread = profile.spread();

  std::vector<std::pair<std::int64_t, double>> bases;
  if (stated == truth) {
    bases.emplace_back(truth, 1.0);
  } else {
    const double back = profile.recovery / digit_count(stated - truth);
    bases.emplace_back(truth, back);
    bases.emplace_back(stated, 1.0 - back);
  }

  std::vector<RawOutcome> out;
  out.reserve(bases.size() * (kRelationCount + 6 * static_cast<std::size_t>(spread)));
  for (const auto& [base, base_mass] : bases) {
    const bool true_base = base == truth;
    // A step built on a wrong running value is one tier worse than the same
    // construction on the true value.
    auto push = [&](std::int64_t operand, std::int64_t result, int relation, int tier, double p) {
      const bool correct = true_base && operand == op.operand && result == next_truth;
      const int quality = correct ? 0 : true_base ? std::max(tier, 1) : std::min(tier + 1, kMaxTier);
      out.push_back({base, operand, result, relation, quality, correct, p});
    };

    const double w0 = profile.tier_weights[0] * base_mass;
    const std::int64_t exact = op.apply(base);
    for (int r = 0; r < kRelationCount; ++r) {
      const double share =
          r == profile.phrasing ? 1.0 - kVariantMass : kVariantMass / (kRelationCount - 1);
      push(op.operand, exact, r, 0, w0 * share);
    }
    for (int tier = 1; tier <= 3; ++tier) {
      const double each = profile.tier_weights[static_cast<std::size_t>(tier)] * base_mass /
                          (2.0 * spread);
      for (int d = 1; d <= spread; ++d) {
        for (int sign : {-1, 1}) {
          if (tier == 3) {
            Operation wrong{op.op, op.operand + sign * d};
            push(wrong.operand, wrong.apply(base), 0, 3, each);
          } else {
            const std::int64_t offset = (tier == 1 ? 1 : 10) * static_cast<std::int64_t>(d);
            push(op.operand, exact + sign * offset, 0, tier, each);
          }
        }
      }
    }
  }
  return out;
}

std::string outcome_text(const TaskInstance& task, int index, const RawOutcome& o) {
  return format_step(index + 1, o.base, task.op_chain[static_cast<std::size_t>(index)].op,
                     o.operand, o.result, o.relation);
}

std::size_t draw(std::span<const RawOutcome> outcomes, Rng& rng) {
  double total = 0.0;
  for (const auto& o : outcomes) total += o.probability;
  double u = rng.uniform() * total;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].probability <= 0.0) continue;
    last_positive = i;
    if (u < outcomes[i].probability) return i;
    u -= outcomes[i].probability;
  }
  return last_positive;
}

std::string join_lines(std::span<const std::string> steps) {
  std::string s;
  for (const auto& step : steps) {
    s += step;
    s += '\n';
  }
  return s;
}

bool parse_int(std::string_view& s, std::int64_t& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{}) return false;
  s.remove_prefix(static_cast<std::size_t>(ptr - first));
  return true;
}

bool consume(std::string_view& s, std::string_view token) {
  if (!s.starts_with(token)) return false;
  s.remove_prefix(token.size());
  return true;
}

}  // namespace

std::int64_t Operation::apply(std::int64_t v) const {
  switch (op) {
    case Op::add: return v + operand;
    case Op::sub: return v - operand;
    case Op::mul: return v * operand;
  }
  return v;
}

char op_symbol(Op op) {
  switch (op) {
    case Op::add: return '+';
    case Op::sub: return '-';
    case Op::mul: return '*';
  }
  return '?';
}

std::int64_t TaskInstance::value_after(int steps) const {
  std::int64_t v = initial_value;
  for (int i = 0; i < steps; ++i) v = op_chain[static_cast<std::size_t>(i)].apply(v);
  return v;
}

std::string TaskInstance::correct_step(int step) const {
  const auto& op = op_chain.at(static_cast<std::size_t>(step));
  const std::int64_t v = value_after(step);
  return format_step(step + 1, v, op.op, op.operand, op.apply(v));
}

std::vector<std::string> TaskInstance::correct_chain() const {
  std::vector<std::string> chain;
  for (int i = 0; i < k_budget; ++i) chain.push_back(correct_step(i));
  return chain;
}

void ProposerProfile::validate() const {
  if (tier_weights.size() != 4) throw std::invalid_argument("tier_weights must have 4 entries");
  double sum = 0.0;
  for (double w : tier_weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("tier_weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("tier_weights must sum to 1");
  if (!(temperature_analog >= 0.0)) throw std::invalid_argument("temperature_analog must be >= 0");
  if (!(recovery >= 0.0 && recovery <= 1.0)) throw std::invalid_argument("recovery must be in [0,1]");
  if (phrasing < 0 || phrasing >= kRelationCount) throw std::invalid_argument("phrasing out of range");
}

int ProposerProfile::spread() const {
  return 1 + std::min(4, static_cast<int>(std::lround(2.0 * temperature_analog)));
}

ProposerProfile ProposerProfile::golden() {
  ProposerProfile p;
  p.tier_weights = {1.0, 0.0, 0.0, 0.0};
  p.recovery = 1.0;
  p.phrasing = 4;
  return p;
}

std::string format_step(int index, std::int64_t base, Op op, std::int64_t operand,
                        std::int64_t result, int relation) {
  std::string s = "step ";
  s += std::to_string(index);
  s += ": ";
  s += std::to_string(base);
  s += ' ';
  s += op_symbol(op);
  s += ' ';
  s += std::to_string(operand);
  s += ' ';
  s += kRelations[relation];
  s += ' ';
  s += std::to_string(result);
  return s;
}

std::optional<ParsedStep> parse_step(std::string_view s) {
  ParsedStep p;
  std::int64_t index = 0;
  if (!consume(s, "step ") || !parse_int(s, index) || !consume(s, ": ")) return std::nullopt;
  p.index = static_cast<int>(index);
  if (!parse_int(s, p.base) || !consume(s, " ") || s.empty()) return std::nullopt;
  switch (s.front()) {
    case '+': p.op = Op::add; break;
    case '-': p.op = Op::sub; break;
    case '*': p.op = Op::mul; break;
    default: return std::nullopt;
  }
  s.remove_prefix(1);
  if (!consume(s, " ") || !parse_int(s, p.operand) || !consume(s, " ")) return std::nullopt;
  p.relation = -1;
  for (int r = 0; r < kRelationCount; ++r) {
    std::string token{kRelations[r]};
    token += ' ';
    if (consume(s, token)) {
      p.relation = r;
      break;
    }
  }
  if (p.relation < 0 || !parse_int(s, p.result) || !s.empty()) return std::nullopt;
  return p;
}

TaskInstance make_task(std::uint64_t seed, int k_budget) {
  if (k_budget < 1) throw std::invalid_argument("k_budget must be >= 1");
  Rng rng(seed_of(seed, static_cast<std::uint64_t>(k_budget), 0x7a5cULL));
  TaskInstance t;
  t.seed = seed;
  t.k_budget = k_budget;
  t.task_id = "syn-" + std::to_string(seed) + "-k" + std::to_string(k_budget);
  t.initial_value = rng.between(1, 20);

  std::int64_t v = t.initial_value;
  std::string prompt = "Start with " + std::to_string(v) + ".";
  for (int i = 0; i < k_budget; ++i) {
    const auto pick = rng.below(100);
    Operation op;
    if (pick < 40) {
      op = {Op::add, rng.between(1, 20)};
    } else if (pick < 75) {
      op = {Op::sub, rng.between(1, 20)};
    } else {
      op = {Op::mul, rng.between(2, 3)};
    }
    if (std::abs(op.apply(v)) > kValueBound) {
      op = {v > 0 ? Op::sub : Op::add, rng.between(1, 20)};
    }
    v = op.apply(v);
    t.op_chain.push_back(op);

    prompt += i == 0 ? " " : ", then ";
    switch (op.op) {
      case Op::add: prompt += (i == 0 ? "Add " : "add ") + std::to_string(op.operand); break;
      case Op::sub: prompt += (i == 0 ? "Subtract " : "subtract ") + std::to_string(op.operand); break;
      case Op::mul: prompt += (i == 0 ? "Multiply by " : "multiply by ") + std::to_string(op.operand); break;
    }
  }
  prompt += ". What is the final value?";
  t.prompt = std::move(prompt);
  t.hidden_target = v;
  return t;
}

std::int64_t stated_value(const TaskInstance& task, std::span<const std::string> prefix) {
  for (auto it = prefix.rbegin(); it != prefix.rend(); ++it) {
    if (auto p = parse_step(*it)) return p->result;
  }
  return task.initial_value;
}

std::vector<StepOutcome> step_distribution(const TaskInstance& task,
                                           std::span<const std::string> prefix,
                                           const ProposerProfile& profile) {
  const int index = static_cast<int>(prefix.size());
  if (index >= task.k_budget) throw TrajectoryExhausted("prefix already at step budget");
  std::map<std::string, StepOutcome> merged;
  for (const auto& o : raw_outcomes(task, index, stated_value(task, prefix), profile)) {
    std::string text = outcome_text(task, index, o);
    auto [it, inserted] = merged.try_emplace(text);
    if (inserted) {
      it->second.step = {std::move(text), o.correct, o.tier};
      it->second.result = o.result;
    }
    it->second.probability += o.probability;
  }
  std::vector<StepOutcome> out;
  out.reserve(merged.size());
  for (auto& [_, o] : merged) out.push_back(std::move(o));
  return out;
}

std::vector<CandidateStep> propose_candidates(const TaskInstance& task,
                                              std::span<const std::string> prefix, int count,
                                              const ProposerProfile& profile,
                                              std::uint64_t stream) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  const int index = static_cast<int>(prefix.size());
  if (index >= task.k_budget) throw TrajectoryExhausted("prefix already at step budget");

  auto pool = step_distribution(task, prefix, profile);
  if (static_cast<int>(pool.size()) < count) {
    throw std::invalid_argument("proposer cannot produce that many distinct candidates");
  }
  Rng rng(seed_of(profile.seed, stream, fnv1a(task.task_id), fnv1a(join_lines(prefix)),
                  static_cast<std::uint64_t>(count)));

  std::vector<CandidateStep> chosen;
  while (static_cast<int>(chosen.size()) < count) {
    double total = 0.0;
    for (const auto& o : pool) total += o.probability;
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].probability <= 0.0) continue;
        pick = i;
        if (u < pool[i].probability) break;
        u -= pool[i].probability;
      }
    }
    chosen.push_back(pool[pick].step);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }

  const bool any_correct = std::any_of(chosen.begin(), chosen.end(),
                                       [](const CandidateStep& c) { return c.is_correct; });
  if (!any_correct && profile.tier_weights[0] > 0.0) {
    const auto& op = task.op_chain[static_cast<std::size_t>(index)];
    const std::int64_t v = task.value_after(index);
    chosen.back() = {format_step(index + 1, v, op.op, op.operand, op.apply(v), profile.phrasing),
                     true, 0};
  }
  return chosen;
}

std::vector<std::string> sample_completion(const TaskInstance& task,
                                           std::span<const std::string> prefix,
                                           const ProposerProfile& profile, std::uint64_t seed) {
  Rng rng(seed_of(profile.seed, seed, 0x5eedULL));
  std::vector<std::string> out;
  std::int64_t stated = stated_value(task, prefix);
  for (int i = static_cast<int>(prefix.size()); i < task.k_budget; ++i) {
    const auto outcomes = raw_outcomes(task, i, stated, profile);
    const auto& o = outcomes[draw(outcomes, rng)];
    out.push_back(outcome_text(task, i, o));
    stated = o.result;
  }
  return out;
}

bool check_answer(const TaskInstance& task, std::span<const std::string> trajectory_steps) {
  if (trajectory_steps.empty()) return false;
  const auto parsed = parse_step(trajectory_steps.back());
  return parsed && parsed->result == task.hidden_target;
}

double oracle_success_rate(const TaskInstance& task, std::span<const std::string> prefix,
                           const ProposerProfile& profile, CompletionPolicy policy,
                           std::size_t node_cap) {
  if (static_cast<int>(prefix.size()) > task.k_budget) {
    throw std::invalid_argument("prefix longer than step budget");
  }
  if (static_cast<int>(prefix.size()) == task.k_budget) return check_answer(task, prefix) ? 1.0 : 0.0;

  std::size_t nodes = 0;
  const int last = task.k_budget - 1;

  if (policy == CompletionPolicy::greedy_correct) {
    std::int64_t stated = stated_value(task, prefix);
    for (int i = static_cast<int>(prefix.size()); i <= last; ++i) {
      const auto outcomes = raw_outcomes(task, i, stated, profile);
      const RawOutcome* best = nullptr;
      for (const auto& o : outcomes) {
        if (++nodes > node_cap) throw OracleInfeasible("oracle node cap exceeded");
        if (!best || o.probability > best->probability ||
            (o.probability == best->probability &&
             std::tie(o.tier, o.base, o.operand, o.result) <
                 std::tie(best->tier, best->base, best->operand, best->result))) {
          best = &o;
        }
      }
      stated = best->result;
    }
    return stated == task.hidden_target ? 1.0 : 0.0;
  }

  // Outcomes that share a result lead to identical futures, so they are
  // enumerated as one branch carrying their summed mass.
  auto expand = [&](auto&& self, int index, std::int64_t stated) -> double {
    std::map<std::int64_t, double> by_result;
    for (const auto& o : raw_outcomes(task, index, stated, profile)) {
      if (o.probability > 0.0) by_result[o.result] += o.probability;
    }
    double total = 0.0;
    for (const auto& [result, p] : by_result) {
      if (++nodes > node_cap) throw OracleInfeasible("oracle node cap exceeded");
      if (index == last) {
        total += result == task.hidden_target ? p : 0.0;
      } else {
        total += p * self(self, index + 1, result);
      }
    }
    return total;
  };
  return expand(expand, static_cast<int>(prefix.size()), stated_value(task, prefix));
}

std::string task_record(const TaskInstance& task) {
  nlohmann::json j;
  j["task_id"] = task.task_id;
  j["seed"] = task.seed;
  j["k_budget"] = task.k_budget;
  j["prompt"] = task.prompt;
  return j.dump();
}

TaskInstance task_from_record(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  TaskInstance t = make_task(j.at("seed").get<std::uint64_t>(), j.at("k_budget").get<int>());
  if (t.task_id != j.at("task_id").get<std::string>() || t.prompt != j.at("prompt").get<std::string>()) {
    throw std::runtime_error("task record does not match its regenerated instance: " +
                             j.at("task_id").get<std::string>());
  }
  return t;
}

}  // namespace diffcot
