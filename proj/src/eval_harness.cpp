#include "diffcot/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>

#include "diffcot/parallel.hpp"
#include "diffcot/pref_builder.hpp"
#include "diffcot/rng.hpp"

namespace diffcot {

using nlohmann::json;

namespace {

struct Outcome {
  bool correct = false;
  bool error = false;
  std::string message;
};

RateResult tally(const std::vector<Outcome>& outcomes, std::span<const EvalItem> items) {
  RateResult r;
  r.trials = outcomes.size();
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].correct) ++r.successes;
    if (outcomes[i].error) {
      ++r.errors;
      r.error_log.push_back(items[i].task.task_id + ": " + outcomes[i].message);
    }
  }
  return r;
}

json rate_json(const RateResult& r) {
  return json{{"successes", r.successes}, {"trials", r.trials}, {"errors", r.errors}, {"rate", r.rate()},
              {"error_log", r.error_log}};
}

std::string fmt(double x, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

std::string DecodeMode::label() const {
  if (kind == DecodeKind::ar) return "ar";
  return "windowed m=" + std::to_string(m) + " n=" + std::to_string(n) +
         (rewrite_prefix ? " rewrite-prefix" : " keep-prefix");
}

std::vector<std::string> decode_steps(PolicyClient& policy, const EvalItem& item, const DecodeMode& mode) {
  const int m = mode.kind == DecodeKind::ar ? 1 : mode.m;
  const int n = mode.kind == DecodeKind::ar ? 1 : mode.n;
  return run_window(item.task.task_id, item.task.prompt, m, n, item.task.k_budget, policy).steps;
}

RateResult accuracy(PolicyClient& policy, std::span<const EvalItem> items, const DecodeMode& mode,
                    int workers) {
  if (items.empty()) throw std::invalid_argument("accuracy needs at least one task");
  std::vector<Outcome> outcomes(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    try {
      outcomes[i].correct = check_answer(items[i].task, decode_steps(policy, items[i], mode));
    } catch (const std::exception& e) {
      outcomes[i] = {false, true, e.what()};
    }
  });
  return tally(outcomes, items);
}

void PerturbationSpec::validate() const {
  if (!(omega >= 0.0 && omega <= 1.0)) throw std::invalid_argument("omega must be in [0,1]");
}

CorruptedPrefix corrupt_prefix(std::span<const std::string> trajectory, const TaskLadders& ladders,
                               const PerturbationSpec& spec) {
  spec.validate();
  const std::size_t midpoint = trajectory.size() / 2;
  if (ladders.ladders.size() < midpoint) throw std::invalid_argument("ladders shorter than the prefix");
  Rng rng(seed_of(spec.seed, fnv1a(ladders.task_id), 0xc0440ULL));
  CorruptedPrefix out;
  out.prefix.assign(trajectory.begin(), trajectory.begin() + static_cast<std::ptrdiff_t>(midpoint));
  for (std::size_t s = 0; s < midpoint; ++s) {
    if (!rng.bernoulli(spec.omega)) continue;
    const auto& ladder = ladders.ladders[s].candidates;
    if (ladder.size() < 2) {
      ++out.unperturbable;
      continue;
    }
    out.prefix[s] = ladder[1 + rng.below(ladder.size() - 1)].text;
    ++out.replaced;
  }
  return out;
}

CorrectionResult correction_success_rate(PolicyClient& policy, std::span<const EvalItem> items,
                                         const PerturbationSpec& spec, const DecodeMode& mode,
                                         int workers) {
  if (items.empty()) throw std::invalid_argument("correction rate needs at least one task");
  spec.validate();
  std::vector<Outcome> outcomes(items.size());
  std::vector<CorruptedPrefix> prefixes(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const auto& item = items[i];
    try {
      const auto clean = item.ladders.clean_chain();
      prefixes[i] = corrupt_prefix(clean, item.ladders, spec);
      const bool windowed = mode.kind == DecodeKind::windowed;
      auto state = resume_window(item.task.task_id, item.task.prompt, item.task.k_budget,
                                 windowed ? mode.m : 1, windowed ? mode.n : 1, prefixes[i].prefix,
                                 windowed && mode.rewrite_prefix);
      outcomes[i].correct = check_answer(item.task, run_from(std::move(state), policy).steps);
    } catch (const std::exception& e) {
      outcomes[i] = {false, true, e.what()};
    }
  });
  CorrectionResult r;
  r.omega = spec.omega;
  r.outcome = tally(outcomes, items);
  for (const auto& p : prefixes) {
    r.replaced += static_cast<std::size_t>(p.replaced);
    r.unperturbable += static_cast<std::size_t>(p.unperturbable);
  }
  return r;
}

std::string SweepConfig::label(int k_budget) const {
  if (shuffled) return "shuffled-schedule";
  if (m == 1 && n == 1) return "ar-degenerate";
  if (m == k_budget && n == k_budget) return "full-diffusion";
  return "mixed";
}

double SweepRow::mean() const { return mean_of(per_seed); }
double SweepRow::stderr_of_mean() const { return stderr_of(per_seed); }

std::vector<SweepConfig> default_grid(int k_budget, SweepConfig base, bool with_shuffled) {
  std::vector<SweepConfig> grid;
  for (int m = 1; m <= k_budget; ++m) {
    for (int n = 1; n <= m; ++n) grid.push_back({m, n, false});
  }
  if (with_shuffled) grid.push_back({base.m, base.n, true});
  return grid;
}

std::vector<SweepRow> ablation_sweep(std::span<const SweepConfig> grid, std::span<const SweepData> data,
                                     const TrainSettings& train, int workers) {
  if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
  std::vector<SweepRow> rows;
  for (const auto& cfg : grid) {
    SweepRow row;
    row.config = cfg;
    row.label = cfg.label(data.empty() || data.front().items.empty() ? 0 : data.front().items.front().task.k_budget);
    for (const auto& d : data) {
      try {
        std::vector<TaskLadders> ladders;
        for (const auto& item : d.items) ladders.push_back(item.ladders);
        std::vector<std::vector<PreferencePair>> per_task(ladders.size());
        const PairOptions options{cfg.m, train.noisy_prefix_prob, d.seed, cfg.shuffled};
        parallel_for(ladders.size(), workers, [&](std::size_t i) { per_task[i] = build_pairs(ladders[i], options); });
        std::vector<PreferencePair> pairs;
        for (auto& p : per_task) pairs.insert(pairs.end(), p.begin(), p.end());
        const auto init = ToyPolicy::from_ladders(ladders);
        const auto trained = train_toy(pairs, init, train.beta, train.lr, train.epochs, d.seed);
        ToyPolicyClient client(trained.policy);
        const auto acc = accuracy(client, d.items, DecodeMode::windowed(cfg.m, cfg.n), workers);
        row.per_seed.push_back(acc.rate());
      } catch (const std::exception& e) {
        row.failures.push_back("seed " + std::to_string(d.seed) + ": " + e.what());
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string EvalReport::to_jsonl() const {
  std::string out;
  out += json{{"kind", "header"}, {"n_tasks", n_tasks}, {"seeds", seeds}, {"config", config},
              {"config_hash", config_hash}, {"inputs", inputs}}
             .dump();
  out += '\n';
  for (const auto& p : policies) {
    out += json{{"kind", "accuracy"}, {"policy", p.policy}, {"decode", p.decode}, {"seed", p.seed},
                {"result", rate_json(p.accuracy)}}
               .dump();
    out += '\n';
    for (const auto& c : p.correction) {
      out += json{{"kind", "correction"}, {"policy", p.policy}, {"decode", p.decode}, {"seed", p.seed},
                  {"omega", c.omega}, {"replaced", c.replaced}, {"unperturbable", c.unperturbable},
                  {"result", rate_json(c.outcome)}}
                 .dump();
      out += '\n';
    }
  }
  for (const auto& r : sweep) {
    out += json{{"kind", "sweep"}, {"label", r.label}, {"m", r.config.m}, {"n", r.config.n},
                {"shuffled", r.config.shuffled}, {"per_seed", r.per_seed}, {"mean", r.mean()},
                {"stderr", r.stderr_of_mean()}, {"failures", r.failures}}
               .dump();
    out += '\n';
  }
  return out;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "tasks: " << n_tasks << "  seeds:";
  for (auto s : seeds) os << ' ' << s;
  os << "  config: " << config_hash << '\n';

  if (!policies.empty()) {
    // Group by (policy, decode) and average over seeds.
    std::vector<std::pair<std::string, std::string>> keys;
    for (const auto& p : policies) {
      const std::pair<std::string, std::string> k{p.policy, p.decode};
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    std::vector<double> omegas;
    for (const auto& c : policies.front().correction) omegas.push_back(c.omega);

    os << '\n' << "policy      decode                              accuracy";
    for (double w : omegas) os << "   w=" << fmt(w, 1) << "  ";
    os << '\n';
    for (const auto& [name, decode] : keys) {
      std::vector<double> acc;
      std::vector<std::vector<double>> corr(omegas.size());
      for (const auto& p : policies) {
        if (p.policy != name || p.decode != decode) continue;
        acc.push_back(p.accuracy.rate());
        for (std::size_t i = 0; i < p.correction.size() && i < omegas.size(); ++i) {
          corr[i].push_back(p.correction[i].outcome.rate());
        }
      }
      char line[96];
      std::snprintf(line, sizeof line, "%-11s %-35s %8s", name.c_str(), decode.c_str(), fmt(mean_of(acc)).c_str());
      os << line;
      for (const auto& c : corr) os << "   " << fmt(mean_of(c)) << "  ";
      os << '\n';
    }
  }
  if (!sweep.empty()) {
    os << '\n' << "config              m  n  mean     stderr   per-seed\n";
    for (const auto& r : sweep) {
      char line[96];
      std::snprintf(line, sizeof line, "%-18s %2d %2d  %s  %s ", r.label.c_str(), r.config.m, r.config.n,
                    fmt(r.mean()).c_str(), fmt(r.stderr_of_mean()).c_str());
      os << line;
      for (double x : r.per_seed) os << ' ' << fmt(x);
      if (!r.failures.empty()) os << "  failures=" << r.failures.size();
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace diffcot
