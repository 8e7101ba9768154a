#include "diffcot/pref_builder.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "diffcot/noise_model.hpp"
#include "diffcot/rng.hpp"

namespace diffcot {

using nlohmann::json;

namespace {

double total(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

std::vector<PreferencePair> build_pairs(const TaskLadders& task, const PairOptions& options) {
  const int k_budget = task.k_budget;
  const int m = options.m;
  if (m < 1) throw std::invalid_argument("window size must be >= 1");
  if (m > k_budget) throw std::invalid_argument("window size exceeds the step budget of " + task.task_id);
  if (!(options.noisy_prefix_prob >= 0.0 && options.noisy_prefix_prob <= 1.0)) {
    throw std::invalid_argument("noisy_prefix_prob must be in [0,1]");
  }
  if (static_cast<int>(task.ladders.size()) != k_budget) {
    throw std::invalid_argument("ladders of " + task.task_id + " do not cover every step");
  }
  const std::uint64_t task_hash = fnv1a(task.task_id);

  std::vector<std::vector<std::size_t>> order(task.ladders.size());
  for (std::size_t s = 0; s < task.ladders.size(); ++s) {
    const auto size = task.ladders[s].candidates.size();
    if (size == 0) throw std::invalid_argument("empty ladder at step " + std::to_string(s + 1) + " of " + task.task_id);
    order[s].resize(size);
    std::iota(order[s].begin(), order[s].end(), std::size_t{0});
    if (options.shuffled) {
      Rng rng(seed_of(options.seed, task_hash, s, 0x5affULL));
      rng.shuffle(std::span<std::size_t>(order[s]));
    }
  }
  auto pick = [&](int step, int level) -> const ScoredCandidate& {
    const auto& ladder = task.ladders[static_cast<std::size_t>(step)].candidates;
    const auto rank = rank_for(ladder.size(), NoiseLevel{level, m - 1});
    return ladder[order[static_cast<std::size_t>(step)][rank]];
  };

  std::vector<PreferencePair> pairs;
  for (int j = -1; j <= k_budget - 2; ++j) {
    const int first = std::max(0, j - m + 1);
    PreferencePair p;
    p.task_id = task.task_id;
    p.prompt = task.prompt;
    p.k = j + 1;
    p.m = m;
    for (int s = 0; s < first; ++s) p.condition.push_back(pick(s, 0).text);
    Rng rng(seed_of(options.seed, task_hash, static_cast<std::uint64_t>(j + 1), 0x9a1ULL));
    if (!p.condition.empty() && rng.bernoulli(options.noisy_prefix_prob)) {
      const int depth = std::min(2, first);
      for (int s = first - depth; s < first; ++s) p.condition[static_cast<std::size_t>(s)] = pick(s, 1).text;
    }

    auto push = [&](int step, int lose_level, int win_level) {
      const auto& lose = pick(step, lose_level);
      const auto& win = pick(step, win_level);
      p.lose.push_back(lose.text);
      p.win.push_back(win.text);
      p.levels_lose.push_back(lose_level);
      p.levels_win.push_back(win_level);
      p.rates_lose.push_back(lose.success_rate());
      p.rates_win.push_back(win.success_rate());
    };
    for (int s = first; s <= j; ++s) {
      const int level = level_for(s, j, m).index;
      push(s, level, std::max(level - 1, 0));
    }
    const int next = j + 1;
    if (m == 1) {
      push(next, static_cast<int>(task.ladders[static_cast<std::size_t>(next)].candidates.size()) - 1, 0);
    } else {
      push(next, m - 1, std::max(m - 2, 0));
    }
    if (p.win != p.lose) pairs.push_back(std::move(p));
  }
  return pairs;
}

std::string serialize_pairs(std::span<const PreferencePair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    const json record{{"task_id", p.task_id},
                      {"k", p.k},
                      {"m", p.m},
                      {"prompt", p.prompt},
                      {"condition", p.condition},
                      {"win", p.win},
                      {"lose", p.lose},
                      {"meta",
                       {{"levels_win", p.levels_win},
                        {"levels_lose", p.levels_lose},
                        {"rates_win", p.rates_win},
                        {"rates_lose", p.rates_lose},
                        {"beta_hint", p.beta_hint}}}};
    out += record.dump();
    out += '\n';
  }
  return out;
}

std::vector<PreferencePair> deserialize_pairs(std::string_view text) {
  std::vector<PreferencePair> pairs;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto eol = text.find('\n');
    const auto line = text.substr(0, eol);
    text.remove_prefix(eol == std::string_view::npos ? text.size() : eol + 1);
    if (line.empty()) throw PairFormatError("empty record", line_no);
    try {
      const auto j = json::parse(line);
      const auto& meta = j.at("meta");
      PreferencePair p;
      p.task_id = j.at("task_id").get<std::string>();
      p.k = j.at("k").get<int>();
      p.m = j.at("m").get<int>();
      p.prompt = j.at("prompt").get<std::string>();
      p.condition = j.at("condition").get<std::vector<std::string>>();
      p.win = j.at("win").get<std::vector<std::string>>();
      p.lose = j.at("lose").get<std::vector<std::string>>();
      p.levels_win = meta.at("levels_win").get<std::vector<int>>();
      p.levels_lose = meta.at("levels_lose").get<std::vector<int>>();
      p.rates_win = meta.at("rates_win").get<std::vector<double>>();
      p.rates_lose = meta.at("rates_lose").get<std::vector<double>>();
      p.beta_hint = meta.at("beta_hint").get<double>();
      if (p.win.empty() || p.win.size() != p.lose.size() || p.levels_win.size() != p.win.size() ||
          p.levels_lose.size() != p.win.size() || p.rates_win.size() != p.win.size() ||
          p.rates_lose.size() != p.win.size()) {
        throw PairFormatError("sequence and metadata lengths disagree", line_no);
      }
      pairs.push_back(std::move(p));
    } catch (const PairFormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw PairFormatError(std::string("malformed pair record: ") + e.what(), line_no);
    }
  }
  return pairs;
}

PairAudit audit_pairs(std::span<const PreferencePair> pairs) {
  PairAudit a;
  a.pairs = pairs.size();
  for (const auto& p : pairs) {
    const std::size_t len = p.win.size();
    const std::size_t window = static_cast<std::size_t>(std::min(p.m, p.k));
    if (len != window + 1 || p.lose.size() != len || p.levels_win.size() != len ||
        p.levels_lose.size() != len || p.rates_win.size() != len || p.rates_lose.size() != len) {
      ++a.length_violations;
      continue;
    }
    if (static_cast<int>(p.condition.size()) != p.first_scored_step() ||
        p.first_scored_step() != std::max(0, p.k - p.m)) {
      ++a.overlap_violations;
    }
    bool schedule_ok = true;
    bool strict = false;
    const int first = p.first_scored_step();
    for (std::size_t i = 0; i < len; ++i) {
      const int step = first + static_cast<int>(i);
      int lose = 0;
      int win = 0;
      if (i + 1 < len) {
        lose = level_for(step, p.k - 1, p.m).index;
        win = std::max(lose - 1, 0);
      } else if (p.m == 1) {
        schedule_ok = schedule_ok && p.levels_lose[i] >= 1;
        lose = p.levels_lose[i];
      } else {
        lose = p.m - 1;
        win = std::max(p.m - 2, 0);
      }
      schedule_ok = schedule_ok && p.levels_lose[i] == lose && p.levels_win[i] == win;
      strict = strict || p.levels_win[i] < p.levels_lose[i];
    }
    if (!schedule_ok || !strict) ++a.schedule_violations;
    if (total(p.rates_win) < total(p.rates_lose)) ++a.dominance_violations;
  }
  const auto text = serialize_pairs(pairs);
  try {
    const auto back = deserialize_pairs(text);
    a.round_trip = std::equal(back.begin(), back.end(), pairs.begin(), pairs.end()) &&
                   serialize_pairs(back) == text;
  } catch (const PairFormatError&) {
    a.round_trip = false;
  }
  return a;
}

}  // namespace diffcot
