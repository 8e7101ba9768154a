#include "diffcot/thought_search.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <mutex>

#include <json.hpp>

#include "diffcot/parallel.hpp"
#include "diffcot/rng.hpp"

namespace diffcot {

using nlohmann::json;

namespace {

std::uint64_t node_key(std::span<const std::string> prefix, std::string_view candidate) {
  std::uint64_t h = fnv1a("node");
  for (const auto& s : prefix) h = fnv1a(s, fnv1a("\n", h));
  return fnv1a(candidate, fnv1a("\n>", h));
}

std::string first_line(std::string_view text) {
  auto steps = split_steps(text);
  return steps.empty() ? std::string() : steps.front();
}

const char* source_name(CandidateSource s) { return s == CandidateSource::golden ? "golden" : "base"; }

CandidateSource source_from(const std::string& s) {
  if (s == "golden") return CandidateSource::golden;
  if (s == "base") return CandidateSource::base;
  throw std::invalid_argument("unknown candidate source '" + s + "'");
}

json candidate_json(const ScoredCandidate& c) {
  json j{{"text", c.text},
         {"wins", c.wins},
         {"rollouts", c.rollouts},
         {"success_rate", c.success_rate()},
         {"source", source_name(c.source)}};
  if (c.source == CandidateSource::golden) j["referenced data"] = true;
  return j;
}

ScoredCandidate candidate_from(const json& j) {
  ScoredCandidate c;
  c.text = j.at("text").get<std::string>();
  c.wins = j.at("wins").get<int>();
  c.rollouts = j.at("rollouts").get<int>();
  c.source = source_from(j.at("source").get<std::string>());
  if (c.rollouts < 0 || c.wins < 0 || c.wins > c.rollouts) {
    throw std::invalid_argument("candidate counts out of range");
  }
  return c;
}

}  // namespace

bool ranks_before(const ScoredCandidate& a, const ScoredCandidate& b) {
  // Cross-multiplied so equal rationals compare equal regardless of R.
  const long long lhs = static_cast<long long>(a.wins) * std::max(b.rollouts, 1);
  const long long rhs = static_cast<long long>(b.wins) * std::max(a.rollouts, 1);
  if (lhs != rhs) return lhs > rhs;
  if (a.source != b.source) return a.source == CandidateSource::golden;
  return a.text < b.text;
}

bool AnswerKey::matches(std::string_view completion) const {
  const auto got = extract_answer(completion);
  if (!got) return false;
  if (*got == answer) return true;
  // Numeric answers compare by value so "42.0" and "42" agree.
  char* end_a = nullptr;
  char* end_b = nullptr;
  const double a = std::strtod(got->c_str(), &end_a);
  const double b = std::strtod(answer.c_str(), &end_b);
  return !got->empty() && !answer.empty() && *end_a == '\0' && *end_b == '\0' && a == b;
}

ScoredCandidate score_candidate(ModelClient& client, const AnswerKey& key, std::string_view prompt,
                                int k_budget, std::span<const std::string> prefix,
                                std::string_view candidate, const SearchSettings& settings,
                                CandidateSource source) {
  if (settings.rollouts < 1) throw std::invalid_argument("rollouts must be >= 1");
  std::vector<std::string> extended(prefix.begin(), prefix.end());
  extended.emplace_back(candidate);
  const std::uint64_t node = node_key(prefix, candidate);

  std::vector<int> outcome(static_cast<std::size_t>(settings.rollouts), -1);
  std::mutex error_mutex;
  std::string first_error;
  parallel_for(outcome.size(), settings.workers, [&](std::size_t j) {
    RequestShape shape{settings.temperature, settings.max_tokens, seed_of(settings.seed, node, j)};
    try {
      const auto replies = client.generate(rollout_request(prompt, k_budget, extended, shape));
      outcome[j] = !replies.empty() && key.matches(replies.front().text) ? 1 : 0;
    } catch (const std::exception& e) {
      std::lock_guard lock(error_mutex);
      if (first_error.empty()) first_error = e.what();
    }
  });

  ScoredCandidate scored{std::string(candidate), 0, settings.rollouts, source};
  int completed = 0;
  for (int o : outcome) {
    if (o >= 0) ++completed;
    if (o == 1) ++scored.wins;
  }
  if (completed != settings.rollouts) {
    throw ScoringError("rollout failed: " + first_error, scored.wins, completed, settings.rollouts);
  }
  return scored;
}

Expansion expand_step(ModelClient& client, ModelClient* golden_client, const AnswerKey& key,
                      std::string_view prompt, int k_budget, std::span<const std::string> prefix,
                      int base_count, const SearchSettings& settings) {
  if (base_count < 1) throw std::invalid_argument("base_count must be >= 1");
  const std::uint64_t node = node_key(prefix, "");
  const RequestShape shape{settings.temperature, settings.max_tokens, seed_of(settings.seed, node, 0xba5eULL)};

  std::vector<std::pair<std::string, CandidateSource>> texts;
  for (const auto& c : client.generate(step_request(prompt, k_budget, prefix, base_count, shape))) {
    texts.emplace_back(first_line(c.text), CandidateSource::base);
  }
  Expansion out;
  if (golden_client) {
    try {
      const auto replies = golden_client->generate(step_request(prompt, k_budget, prefix, 1, shape));
      if (replies.empty()) throw ProtocolError("golden client returned no completion");
      texts.emplace_back(first_line(replies.front().text), CandidateSource::golden);
    } catch (const std::exception& e) {
      out.golden_failed = true;
      out.golden_error = e.what();
    }
  }

  std::vector<std::pair<std::string, CandidateSource>> unique;
  for (auto& t : texts) {
    const bool seen = std::any_of(unique.begin(), unique.end(),
                                  [&](const auto& u) { return u.first == t.first; });
    if (!seen) unique.push_back(std::move(t));
  }
  out.candidates.resize(unique.size());
  for (std::size_t i = 0; i < unique.size(); ++i) {
    out.candidates[i] = score_candidate(client, key, prompt, k_budget, prefix, unique[i].first,
                                        settings, unique[i].second);
  }
  return out;
}

std::vector<const SearchNode*> SearchTree::children(int node_id) const {
  std::vector<const SearchNode*> out;
  for (const auto& n : nodes) {
    if (n.parent == node_id) out.push_back(&n);
  }
  return out;
}

std::vector<std::string> SearchTree::chosen_steps() const {
  std::vector<std::string> steps;
  for (int id : chosen_path) steps.push_back(nodes.at(static_cast<std::size_t>(id)).candidate.text);
  return steps;
}

SearchTree search_trajectory(ModelClient& client, ModelClient* golden_client, const AnswerKey& key,
                             std::string_view task_id, std::string_view prompt, int k_budget,
                             int base_count, const SearchSettings& settings) {
  if (k_budget < 1) throw std::invalid_argument("k_budget must be >= 1");
  SearchTree tree;
  tree.task_id = std::string(task_id);
  tree.prompt = std::string(prompt);
  tree.k_budget = k_budget;
  tree.nodes.push_back(SearchNode{0, -1, 0, {}, false, false});

  std::vector<std::string> prefix;
  int parent = 0;
  for (int depth = 1; depth <= k_budget; ++depth) {
    auto expansion = expand_step(client, golden_client, key, prompt, k_budget, prefix, base_count, settings);
    int best = -1;
    bool all_zero = true;
    for (auto& c : expansion.candidates) {
      if (c.wins > 0) all_zero = false;
      SearchNode node{static_cast<int>(tree.nodes.size()), parent, depth, std::move(c), false, false};
      if (best < 0 || ranks_before(node.candidate, tree.nodes[static_cast<std::size_t>(best)].candidate)) {
        best = node.id;
      }
      tree.nodes.push_back(std::move(node));
    }
    auto& chosen = tree.nodes[static_cast<std::size_t>(best)];
    chosen.zero_score = all_zero;
    chosen.golden_failed = expansion.golden_failed;
    tree.chosen_path.push_back(best);
    prefix.push_back(chosen.candidate.text);
    parent = best;
  }
  return tree;
}

std::vector<std::string> TaskLadders::clean_chain() const {
  std::vector<std::string> chain;
  for (const auto& l : ladders) chain.push_back(l.candidates.at(0).text);
  return chain;
}

TaskLadders ladders_from_tree(const SearchTree& tree) {
  if (static_cast<int>(tree.chosen_path.size()) != tree.k_budget) {
    throw std::invalid_argument("search tree has an incomplete chosen path");
  }
  TaskLadders out{tree.task_id, tree.prompt, tree.k_budget, {}};
  int parent = 0;
  for (int depth = 1; depth <= tree.k_budget; ++depth) {
    CandidateLadder ladder{depth - 1, {}};
    for (const auto* n : tree.children(parent)) ladder.candidates.push_back(n->candidate);
    if (ladder.candidates.empty()) throw std::invalid_argument("search tree has an empty depth");
    std::sort(ladder.candidates.begin(), ladder.candidates.end(), ranks_before);
    const int chosen = tree.chosen_path[static_cast<std::size_t>(depth - 1)];
    if (ladder.candidates.front().text != tree.nodes.at(static_cast<std::size_t>(chosen)).candidate.text) {
      throw std::invalid_argument("chosen path is not the top-ranked candidate");
    }
    out.ladders.push_back(std::move(ladder));
    parent = chosen;
  }
  return out;
}

std::string tree_record(const SearchTree& tree) {
  json steps = json::array();
  int parent = 0;
  for (std::size_t d = 0; d < tree.chosen_path.size(); ++d) {
    const int chosen = tree.chosen_path[d];
    json cands = json::array();
    for (const auto* n : tree.children(parent)) cands.push_back(candidate_json(n->candidate));
    const auto& node = tree.nodes.at(static_cast<std::size_t>(chosen));
    steps.push_back({{"depth", d + 1},
                     {"chosen", node.candidate.text},
                     {"candidates", cands},
                     {"zero_score", node.zero_score},
                     {"golden_failed", node.golden_failed}});
    parent = chosen;
  }
  return json{{"task_id", tree.task_id}, {"prompt", tree.prompt}, {"k_budget", tree.k_budget},
              {"steps", steps}}
      .dump();
}

SearchTree tree_from_record(std::string_view line) {
  const auto j = json::parse(line);
  SearchTree tree;
  tree.task_id = j.at("task_id").get<std::string>();
  tree.prompt = j.at("prompt").get<std::string>();
  tree.k_budget = j.at("k_budget").get<int>();
  tree.nodes.push_back(SearchNode{0, -1, 0, {}, false, false});
  int parent = 0;
  for (const auto& step : j.at("steps")) {
    const int depth = step.at("depth").get<int>();
    const auto chosen_text = step.at("chosen").get<std::string>();
    int chosen = -1;
    for (const auto& c : step.at("candidates")) {
      SearchNode node{static_cast<int>(tree.nodes.size()), parent, depth, candidate_from(c), false, false};
      if (node.candidate.text == chosen_text && chosen < 0) chosen = node.id;
      tree.nodes.push_back(std::move(node));
    }
    if (chosen < 0) throw std::invalid_argument("tree record names a chosen step it does not contain");
    tree.nodes[static_cast<std::size_t>(chosen)].zero_score = step.at("zero_score").get<bool>();
    tree.nodes[static_cast<std::size_t>(chosen)].golden_failed = step.at("golden_failed").get<bool>();
    tree.chosen_path.push_back(chosen);
    parent = chosen;
  }
  return tree;
}

std::string ladders_record(const TaskLadders& ladders) {
  json steps = json::array();
  for (const auto& l : ladders.ladders) {
    json cands = json::array();
    for (const auto& c : l.candidates) cands.push_back(candidate_json(c));
    steps.push_back({{"step", l.step_index}, {"candidates", cands}});
  }
  return json{{"task_id", ladders.task_id}, {"prompt", ladders.prompt},
              {"k_budget", ladders.k_budget}, {"ladders", steps}}
      .dump();
}

TaskLadders ladders_from_record(std::string_view line) {
  const auto j = json::parse(line);
  TaskLadders out;
  out.task_id = j.at("task_id").get<std::string>();
  out.prompt = j.at("prompt").get<std::string>();
  out.k_budget = j.at("k_budget").get<int>();
  for (const auto& l : j.at("ladders")) {
    CandidateLadder ladder{l.at("step").get<int>(), {}};
    for (const auto& c : l.at("candidates")) ladder.candidates.push_back(candidate_from(c));
    out.ladders.push_back(std::move(ladder));
  }
  if (static_cast<int>(out.ladders.size()) != out.k_budget) {
    throw std::invalid_argument("ladder record for " + out.task_id + " does not cover its step budget");
  }
  return out;
}

}  // namespace diffcot
