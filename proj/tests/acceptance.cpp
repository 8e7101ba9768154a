// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "diffcot/dpo_core.hpp"
#include "diffcot/eval_harness.hpp"
#include "diffcot/noise_model.hpp"
#include "diffcot/parallel.hpp"
#include "diffcot/pipeline.hpp"
#include "diffcot/pref_builder.hpp"
#include "diffcot/thought_search.hpp"
#include "diffcot/window_machine.hpp"
#include "dpo_oracle.hpp"
#include "support.hpp"

using namespace diffcot;
namespace fs = std::filesystem;

namespace {

constexpr int kWorkers = 4;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string fixed(double x, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

// 1. Preference-loss numerics.
void dpo_numerics(Outcome& out) {
  ToyPolicy base;
  for (const char* w : {"a0", "a1", "a2"}) base.add_to_vocab("t", 0, w);
  for (const char* w : {"b0", "b1", "b2"}) base.add_to_vocab("t", 1, w);
  PreferencePair pair;
  pair.task_id = "t";
  pair.k = 1;
  pair.m = 2;
  pair.win = {"a0", "b0"};
  pair.lose = {"a0", "b2"};

  auto same = base;
  same.add_logits("t", std::vector<std::string>{}, Eigen::Vector3d(0.7, -0.3, 1.1));
  const double at_ref = dpo_loss(pair, same, ReferencePolicy(same), kDefaultBeta).loss;
  out.require(std::abs(at_ref - std::log(2.0)) <= 1e-12, "loss at reference is ln 2");

  // A raw log-ratio gap of 1/beta gives margin exactly 1.
  auto moved = base;
  moved.add_logits("t", std::vector<std::string>{"a0"}, Eigen::Vector3d(1.0 / kDefaultBeta, 0.0, 0.0));
  const auto r = dpo_loss(pair, moved, ReferencePolicy(base), kDefaultBeta);
  out.require(std::abs(r.margin - 1.0) <= 1e-12, "margin is 1");
  out.require(std::abs(r.loss - softplus(-1.0)) <= 1e-12, "loss at margin 1 is softplus(-1)");

  Rng rng(20240601);
  double worst = 0.0;
  std::size_t components = 0;
  const int draws = 64;
  for (int d = 0; d < draws; ++d) {
    const auto check = testing::check_gradient(testing::random_problem(rng));
    worst = std::max(worst, check.max_relative_error);
    components += check.components;
  }
  out.require(worst <= 1e-6, "gradient relative error <= 1e-6");
  out.detail << "ln2 err " << std::abs(at_ref - std::log(2.0)) << ", softplus err " << std::abs(r.loss - softplus(-1.0))
             << ", " << draws << " draws / " << components << " components, max rel err " << worst;
}

// 2. Schedule laws, exhaustively.
void schedule_laws(Outcome& out) {
  std::size_t checks = 0;
  bool decay = true;
  bool exit_clean = true;
  bool monotone = true;
  for (int m = 1; m <= 6; ++m) {
    for (int k = 0; k <= 20; ++k) {
      exit_clean &= level_for(k, k + m - 1, m).clean();
      ++checks;
      for (int t = 0; t <= 20; ++t) {
        const int now = level_for(k, t, m).index;
        if (t >= k) {
          decay &= level_for(k, t + 1, m).index == std::max(now - 1, 0);
          ++checks;
        }
        monotone &= now <= level_for(k + 1, t, m).index;
        ++checks;
      }
    }
  }
  out.require(decay, "single-step decay");
  out.require(exit_clean, "clean on exit");
  out.require(monotone, "window monotonicity");
  out.detail << checks << " checks over m<=6, k,t<=20";
}

// 3. Window machine over every shape.
void window_machine(Outcome& out) {
  int shapes = 0;
  bool emits_k = true;
  bool clean = true;
  bool ar_matches = true;
  for (int k = 1; k <= 8; ++k) {
    for (int m = 1; m <= k; ++m) {
      for (int n = 1; n <= m; ++n) {
        ++shapes;
        testing::EchoPolicy policy;
        const auto r = run_window("p", "q", m, n, k, policy);
        emits_k &= static_cast<int>(r.steps.size()) == k;
        // The outermost level tag of a text is the level it was last written at.
        for (int s = 0; s < static_cast<int>(r.steps.size()); ++s) {
          clean &= r.steps[static_cast<std::size_t>(s)].starts_with("s" + std::to_string(s) + "@0");
        }
      }
    }
    testing::EchoPolicy windowed;
    testing::EchoPolicy sequential;
    const auto w = run_window("p", "q", 1, 1, k, windowed);
    const auto s = sequential_decode("p", "q", k, sequential);
    ar_matches &= w.steps == s && windowed.queries == sequential.queries;

    // Same check with a deterministic policy over real ladders.
    const auto task = make_task(static_cast<std::uint64_t>(900 + k), k);
    SyntheticClient client({task}, ProposerProfile{});
    const auto tree = search_trajectory(client, nullptr, {std::to_string(task.hidden_target)}, task.task_id,
                                        task.prompt, k, 4, SearchSettings{});
    testing::LadderPolicy a(ladders_from_tree(tree));
    testing::LadderPolicy b(ladders_from_tree(tree));
    ar_matches &= run_window(task.task_id, task.prompt, 1, 1, k, a).steps ==
                  sequential_decode(task.task_id, task.prompt, k, b);
  }
  out.require(emits_k, "exactly K steps");
  out.require(clean, "every emitted step clean");
  out.require(ar_matches, "(1,1) equals sequential decoding");
  out.detail << shapes << " (m,n,K) shapes";
}

// 4. Search correctness against the exact oracle.
void search_correctness(Outcome& out) {
  const int tasks = 300;
  const int k_budget = 4;
  const int rollouts = 8;
  ProposerProfile profile;
  profile.tier_weights = {0.96, 0.02, 0.01, 0.01};
  profile.recovery = 0.0;

  std::vector<TaskInstance> instances;
  for (int i = 0; i < tasks; ++i) instances.push_back(make_task(40000 + static_cast<std::uint64_t>(i), k_budget));
  SyntheticClient client(instances, profile);

  struct PerTask {
    bool eligible = true;
    bool matches = true;
    std::size_t trials = 0;
    std::size_t covered = 0;
  };
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<PerTask> results(instances.size() * seeds.size());
  parallel_for(results.size(), kWorkers, [&](std::size_t idx) {
    const auto& task = instances[idx / seeds.size()];
    SearchSettings settings;
    settings.rollouts = rollouts;
    settings.seed = seeds[idx % seeds.size()];
    const auto tree = search_trajectory(client, nullptr, {std::to_string(task.hidden_target)}, task.task_id,
                                        task.prompt, k_budget, 5, settings);
    PerTask& r = results[idx];
    std::vector<std::string> prefix;
    int parent = 0;
    for (int depth = 1; depth <= k_budget; ++depth) {
      std::vector<std::pair<double, const SearchNode*>> scored;
      for (const auto* child : tree.children(parent)) {
        auto with = prefix;
        with.push_back(child->candidate.text);
        const double p = oracle_success_rate(task, with, profile, CompletionPolicy::profile_sampled);
        const auto [lo, hi] = testing::binomial_region(rollouts, p);
        ++r.trials;
        if (child->candidate.wins >= lo && child->candidate.wins <= hi) ++r.covered;
        scored.emplace_back(p, child);
      }
      std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      if (scored.size() > 1 && !testing::separable(rollouts, scored[0].first, scored[1].first)) r.eligible = false;
      const int chosen = tree.chosen_path[static_cast<std::size_t>(depth - 1)];
      if (chosen != scored[0].second->id) {
        r.matches = false;
        break;  // the searched and oracle paths have parted
      }
      prefix.push_back(scored[0].second->candidate.text);
      parent = chosen;
    }
  });

  std::size_t eligible = 0;
  std::size_t matched = 0;
  std::size_t trials = 0;
  std::size_t covered = 0;
  std::size_t eligible_tasks = 0;
  for (std::size_t t = 0; t < instances.size(); ++t) {
    bool any = false;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& r = results[t * seeds.size() + s];
      trials += r.trials;
      covered += r.covered;
      if (!r.eligible) continue;
      any = true;
      ++eligible;
      if (r.matches) ++matched;
    }
    if (any) ++eligible_tasks;
  }
  const double match_rate = eligible == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(eligible);
  const double coverage = static_cast<double>(covered) / static_cast<double>(trials);
  out.require(eligible_tasks >= 100, ">= 100 eligible tasks");
  out.require(match_rate >= 0.99, "chosen path equals oracle argmax in >= 99%");
  out.require(coverage >= 0.99, "MC scores inside 99% binomial region in >= 99%");
  out.detail << eligible_tasks << " eligible tasks (" << eligible << " searches), path match " << fixed(match_rate, 4) << ", coverage "
             << fixed(coverage, 4) << " over " << trials << " (candidate, seed) trials";
}

PipelineConfig suite_config(int tasks) {
  PipelineConfig c;
  c.n_tasks = tasks;
  c.workers = kWorkers;
  return c;
}

// 5. Pair audit over a 500-task generation run.
void pair_audit(Outcome& out) {
  const auto config = suite_config(500);
  const auto suite = generate_synthetic_suite(config, 0);
  std::size_t total = 0;
  for (int m = 1; m <= config.k_budget; ++m) {
    for (double noisy : {0.0, 0.5}) {
      const auto pairs = build_all_pairs(suite.ladders, PairOptions{m, noisy, 0, false}, kWorkers);
      const auto audit = audit_pairs(pairs);
      const auto text = serialize_pairs(pairs);
      const auto back = deserialize_pairs(text);
      const std::string tag = "m=" + std::to_string(m) + " noisy=" + fixed(noisy, 1);
      out.require(audit.ok(), "audit " + tag);
      out.require(back == pairs && serialize_pairs(back) == text, "round trip " + tag);
      out.require(!pairs.empty(), "pairs emitted " + tag);
      total += pairs.size();
    }
  }
  out.detail << "500 tasks, C=" << config.candidates << " R=" << config.rollouts << " K=" << config.k_budget << ", "
             << total << " pairs audited over m=1..5";
}

// 6. Correction success against the teacher-forcing baseline.
void method_effect(Outcome& out) {
  const auto config = suite_config(300);
  const std::vector<double> omegas{0.2, 0.4, 0.6, 0.8};
  std::vector<double> gaps;
  std::ostringstream rows;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto suite = generate_synthetic_suite(config, seed);
    const auto items = suite.items();
    const auto init = ToyPolicy::from_ladders(suite.ladders);
    const auto pairs = build_all_pairs(suite.ladders, PairOptions{config.m, config.noisy_prefix_prob, seed, false},
                                       kWorkers);
    const auto dpo = train_toy(pairs, init, config.beta, config.lr, config.epochs, seed);
    const auto sft = train_sft(clean_demonstrations(suite.ladders), init, config.lr, config.epochs, seed);
    ToyPolicyClient windowed(dpo.policy);
    ToyPolicyClient teacher_forced(sft.policy);
    rows << " seed " << seed << ":";
    for (double w : omegas) {
      const double a = correction_success_rate(windowed, items, {w, seed},
                                               DecodeMode::windowed(config.m, config.n, config.rewrite_prefix),
                                               kWorkers)
                           .outcome.rate();
      const double b = correction_success_rate(teacher_forced, items, {w, seed}, DecodeMode::ar(), kWorkers)
                           .outcome.rate();
      out.require(a >= b, "seed " + std::to_string(seed) + " omega " + fixed(w, 1));
      gaps.push_back(a - b);
      rows << ' ' << fixed(a, 2) << '/' << fixed(b, 2);
    }
  }
  double mean = 0.0;
  for (double g : gaps) mean += g;
  mean /= static_cast<double>(gaps.size());
  out.require(mean > 0.0, "positive mean gap");
  out.detail << "300 tasks x 3 seeds, mean gap " << fixed(mean, 4) << ";" << rows.str();
}

// 7. Ablation directions.
void ablation_directions(Outcome& out) {
  const auto config = suite_config(300);
  std::vector<SweepData> data;
  for (std::uint64_t seed : {0, 1, 2}) data.push_back({seed, generate_synthetic_suite(config, seed).items()});
  const auto grid = default_grid(config.k_budget, {config.m, config.n, false}, true);
  const auto rows = ablation_sweep(grid, data, config.train_settings(), kWorkers);
  const SweepRow* ar = nullptr;
  const SweepRow* full = nullptr;
  const SweepRow* shuffled = nullptr;
  const SweepRow* causal = nullptr;
  const SweepRow* tuned = nullptr;
  for (const auto& r : rows) {
    out.require(r.failures.empty(), "sweep row " + r.label + " ran");
    if (r.label == "ar-degenerate") ar = &r;
    if (r.label == "full-diffusion") full = &r;
    if (r.label == "shuffled-schedule") shuffled = &r;
    if (!r.config.shuffled && r.config.m == config.m && r.config.n == config.n) causal = &r;
    if (r.label == "mixed" && (!tuned || r.mean() > tuned->mean())) tuned = &r;
  }
  if (!ar || !full || !shuffled || !causal || !tuned) {
    out.require(false, "grid has every row");
    return;
  }
  out.require(ar->mean() <= tuned->mean(), "AR <= tuned mixed");
  out.require(full->mean() <= tuned->mean(), "full diffusion <= tuned mixed");
  out.require(shuffled->mean() <= causal->mean(), "shuffled <= causal");
  out.detail << "AR " << fixed(ar->mean()) << ", full " << fixed(full->mean()) << ", tuned mixed (m="
             << tuned->config.m << ",n=" << tuned->config.n << ") " << fixed(tuned->mean()) << ", shuffled "
             << fixed(shuffled->mean()) << " vs causal " << fixed(causal->mean());
}

// 8. End-to-end determinism.
void determinism(Outcome& out) {
  auto run = [](const fs::path& dir, int workers) {
    auto config = suite_config(80);
    config.output_dir = dir.string();
    config.workers = workers;
    std::ostringstream log;
    std::atomic<bool> stop{false};
    cmd_generate(config, log, stop);
    cmd_build_pairs(config, log);
    cmd_train_toy(config, log);
    cmd_decode(config, log);
    cmd_eval(config, log);
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
    }
    return files;
  };
  const auto a = run(testing::scratch_dir("acceptance-a"), 4);
  const auto b = run(testing::scratch_dir("acceptance-b"), 2);
  std::size_t bytes = 0;
  for (const auto& [_, content] : a) bytes += content.size();
  out.require(a.size() >= 15, "all stage outputs present");
  out.require(a == b, "byte-identical outputs");
  if (a != b) {
    for (const auto& [name, content] : a) {
      const auto it = b.find(name);
      if (it == b.end() || it->second != content) out.detail << " differs: " << name;
    }
  }
  out.detail << a.size() << " files, " << bytes << " bytes compared across two runs";
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Outcome&)> body;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "DPO numerics", 10, dpo_numerics},
      {2, "schedule laws", 1, schedule_laws},
      {3, "window machine", 30, window_machine},
      {4, "search correctness", 120, search_correctness},
      {5, "pair dataset audit", 300, pair_audit},
      {6, "method effect", 600, method_effect},
      {7, "ablation directions", 900, ablation_directions},
      {8, "determinism", 0, determinism},
  };
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome out;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.body(out);
    } catch (const std::exception& e) {
      out.require(false, std::string("exception: ") + e.what());
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0) out.require(seconds < c.budget_seconds, "runtime under " + fixed(c.budget_seconds, 0) + " s");
    std::cout << (out.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << ", " << fixed(seconds, 2)
              << " s): " << out.detail.str() << std::endl;
    if (!out.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
