#include "diffcot/window_machine.hpp"

#include <algorithm>

namespace diffcot {

using nlohmann::json;

namespace {

std::vector<int> level_indices(const std::vector<WindowSlot>& window) {
  std::vector<int> out;
  for (const auto& s : window) out.push_back(s.level.index);
  return out;
}

std::vector<std::string> slot_texts(const std::vector<WindowSlot>& window) {
  std::vector<std::string> out;
  for (const auto& s : window) out.push_back(s.text);
  return out;
}

PolicyQuery make_query(const WindowState& s, std::vector<std::string> preceding, NoiseLevel target,
                       std::optional<std::string> current) {
  PolicyQuery q;
  q.prompt_id = s.prompt_id;
  q.prompt = s.prompt;
  q.k_budget = s.k_budget;
  q.step_index = static_cast<int>(preceding.size());
  q.preceding = std::move(preceding);
  q.target = target;
  q.current = std::move(current);
  return q;
}

std::string ask(PolicyClient& policy, const PolicyQuery& q) {
  try {
    return policy.propose(q);
  } catch (const std::exception& e) {
    throw TransitionError("policy failed at step " + std::to_string(q.step_index + 1) + ": " + e.what());
  }
}

}  // namespace

json WindowState::to_json() const {
  json slots = json::array();
  for (const auto& s : window) slots.push_back({{"text", s.text}, {"level", s.level.index}});
  return json{{"prompt_id", prompt_id}, {"prompt", prompt}, {"k_budget", k_budget}, {"m", m},
              {"n", n}, {"committed", committed}, {"window", slots}, {"head", head}, {"t", t}};
}

json TranscriptRecord::to_json() const {
  return json{{"t", t},
              {"head", head},
              {"levels_before", levels_before},
              {"before", before},
              {"refined", refined},
              {"appended", appended},
              {"committed", committed},
              {"levels_after", levels_after}};
}

WindowState init_window(std::string prompt_id, std::string prompt, int k_budget, int m, int n) {
  CausalSchedule{m, n}.validate();
  if (k_budget < 1) throw std::invalid_argument("k_budget must be >= 1");
  WindowState s;
  s.prompt_id = std::move(prompt_id);
  s.prompt = std::move(prompt);
  s.k_budget = k_budget;
  s.m = m;
  s.n = n;
  return s;
}

WindowState resume_window(std::string prompt_id, std::string prompt, int k_budget, int m, int n,
                          std::span<const std::string> prefix, bool rewrite_prefix) {
  WindowState s = init_window(std::move(prompt_id), std::move(prompt), k_budget, m, n);
  const int p = static_cast<int>(prefix.size());
  if (p > k_budget) throw std::invalid_argument("prefix longer than step budget");
  if (p == 0) return s;
  s.head = p - 1;
  s.t = p;
  const int keep = rewrite_prefix ? std::min(m, p) : 0;
  s.committed.assign(prefix.begin(), prefix.end() - keep);
  for (int step = p - keep; step < p; ++step) {
    s.window.push_back({prefix[static_cast<std::size_t>(step)], level_for(step, p - 1, m)});
  }
  if (s.head == k_budget - 1 &&
      std::all_of(s.window.begin(), s.window.end(), [](const WindowSlot& w) { return w.level.clean(); })) {
    for (auto& w : s.window) s.committed.push_back(std::move(w.text));
    s.window.clear();
  }
  return s;
}

WindowState advance(const WindowState& state, PolicyClient& policy, TranscriptRecord* record) {
  if (state.finished()) throw std::logic_error("trajectory already terminated");
  WindowState next = state;
  TranscriptRecord rec;
  rec.t = state.t;
  rec.levels_before = level_indices(state.window);
  rec.before = slot_texts(state.window);

  // Refine left to right; each rewrite sees the rewrites before it.
  std::vector<std::string> preceding = next.committed;
  for (auto& slot : next.window) {
    if (!slot.level.clean()) {
      const NoiseLevel target{slot.level.index - 1, slot.level.max_index};
      slot.text = ask(policy, make_query(next, preceding, target, slot.text));
      slot.level = target;
    }
    preceding.push_back(slot.text);
  }
  rec.refined = slot_texts(next.window);

  const int produced = next.head + 1;
  const int fresh = std::min(next.n, next.k_budget - produced);
  if (fresh > 0) {
    while (!next.window.empty() && static_cast<int>(next.window.size()) + fresh > next.m) {
      WindowSlot oldest = std::move(next.window.front());
      next.window.erase(next.window.begin());
      if (!oldest.level.clean()) {
        // A stride above one can push a step out before it is clean.
        const NoiseLevel clean{0, oldest.level.max_index};
        oldest.text = ask(policy, make_query(next, next.committed, clean, oldest.text));
      }
      rec.committed.push_back(oldest.text);
      next.committed.push_back(std::move(oldest.text));
    }
    const NoiseLevel entry{next.m - 1, next.m - 1};
    for (int i = 0; i < fresh; ++i) {
      std::vector<std::string> ctx = next.committed;
      for (const auto& w : next.window) ctx.push_back(w.text);
      std::string text = ask(policy, make_query(next, std::move(ctx), entry, std::nullopt));
      rec.appended.push_back(text);
      next.window.push_back({std::move(text), entry});
      ++next.head;
    }
  }

  if (next.head == next.k_budget - 1 &&
      std::all_of(next.window.begin(), next.window.end(), [](const WindowSlot& w) { return w.level.clean(); })) {
    for (auto& w : next.window) {
      rec.committed.push_back(w.text);
      next.committed.push_back(std::move(w.text));
    }
    next.window.clear();
  }
  ++next.t;
  rec.head = next.head;
  rec.levels_after = level_indices(next.window);
  if (record) *record = std::move(rec);
  return next;
}

DecodeResult run_from(WindowState state, PolicyClient& policy) {
  DecodeResult out;
  while (!state.finished()) {
    TranscriptRecord rec;
    state = advance(state, policy, &rec);
    out.transcript.push_back(std::move(rec));
    ++out.advances;
  }
  out.steps = std::move(state.committed);
  return out;
}

DecodeResult run_window(std::string prompt_id, std::string prompt, int m, int n, int k_budget,
                        PolicyClient& policy) {
  return run_from(init_window(std::move(prompt_id), std::move(prompt), k_budget, m, n), policy);
}

std::vector<std::string> sequential_decode(const std::string& prompt_id, const std::string& prompt,
                                           int k_budget, PolicyClient& policy) {
  std::vector<std::string> steps;
  for (int i = 0; i < k_budget; ++i) {
    PolicyQuery q;
    q.prompt_id = prompt_id;
    q.prompt = prompt;
    q.k_budget = k_budget;
    q.preceding = steps;
    q.step_index = i;
    q.target = {0, 0};
    steps.push_back(policy.propose(q));
  }
  return steps;
}

std::string ChatPolicy::propose(const PolicyQuery& query) {
  RequestShape shape = shape_;
  shape.seed = shape_.seed + static_cast<std::uint64_t>(query.step_index);
  const auto request = query.current
                           ? revise_request(query.prompt, query.k_budget, query.preceding, *query.current, shape)
                           : step_request(query.prompt, query.k_budget, query.preceding, 1, shape);
  const auto replies = client_.generate(request);
  if (replies.empty()) throw ProtocolError("backend returned no completion");
  const auto steps = split_steps(replies.front().text);
  if (steps.empty()) throw ProtocolError("backend returned an empty step");
  return steps.front();
}

}  // namespace diffcot
