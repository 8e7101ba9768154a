#include "diffcot/model_client.hpp"

#include <algorithm>
#include <cctype>
#include <regex>

#include "diffcot/dpo_core.hpp"
#include "diffcot/rng.hpp"

namespace diffcot {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string user_message(std::string_view prompt, std::span<const std::string> prefix) {
  std::string s{prompt};
  s += "\n\n";
  if (!prefix.empty()) {
    s += kStepsHeader;
    for (const auto& step : prefix) {
      s += step;
      s += '\n';
    }
    s += '\n';
  }
  return s;
}

GenerationRequest base_request(int k_budget, std::string user, const RequestShape& shape) {
  GenerationRequest r;
  r.system_prompt = solver_system_prompt(k_budget);
  r.messages.push_back({"user", std::move(user)});
  r.temperature = shape.temperature;
  r.max_tokens = shape.max_tokens;
  r.seed = shape.seed;
  return r;
}

}  // namespace

void GenerationRequest::validate() const {
  if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be >= 0");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
  if (messages.empty()) throw std::invalid_argument("request has no messages");
}

std::string solver_system_prompt(int k_budget) {
  return "Solve the problem step by step. Write one step per line, exactly " +
         std::to_string(k_budget) +
         " steps in total. After the last step, output the final answer in the last line using "
         "the format: Answer: <final_answer>";
}

GenerationRequest step_request(std::string_view prompt, int k_budget,
                               std::span<const std::string> prefix, int n, const RequestShape& shape) {
  std::string user = user_message(prompt, prefix);
  user += kNextStepInstruction;
  user += std::to_string(prefix.size() + 1);
  user += " only.";
  auto r = base_request(k_budget, std::move(user), shape);
  r.n_samples = n;
  r.stop = {"\n"};
  return r;
}

GenerationRequest revise_request(std::string_view prompt, int k_budget,
                                 std::span<const std::string> prefix, std::string_view draft,
                                 const RequestShape& shape) {
  std::string user = user_message(prompt, prefix);
  user += kReviseOpen;
  user += draft;
  user += '\n';
  user += kReviseClose;
  user += kReviseInstruction;
  user += std::to_string(prefix.size() + 1);
  user += " only.";
  auto r = base_request(k_budget, std::move(user), shape);
  r.stop = {"\n"};
  return r;
}

GenerationRequest rollout_request(std::string_view prompt, int k_budget,
                                  std::span<const std::string> prefix, const RequestShape& shape) {
  std::string user = user_message(prompt, prefix);
  user += kRolloutInstruction;
  user += std::to_string(prefix.size() + 1);
  user += " to the final answer.";
  return base_request(k_budget, std::move(user), shape);
}

ParsedRequest parse_request(const GenerationRequest& request) {
  if (request.messages.empty()) throw ProtocolError("request has no messages");
  std::string_view text = request.messages.back().content;
  const auto split = text.find("\n\n");
  if (split == std::string_view::npos) throw ProtocolError("request has no prompt separator");
  ParsedRequest out;
  out.prompt = std::string(text.substr(0, split));
  text.remove_prefix(split + 2);

  if (text.starts_with(kStepsHeader)) {
    text.remove_prefix(kStepsHeader.size());
    while (!text.empty()) {
      const auto eol = text.find('\n');
      if (eol == std::string_view::npos) throw ProtocolError("unterminated steps block");
      if (eol == 0) {
        text.remove_prefix(1);
        break;
      }
      out.prefix.emplace_back(text.substr(0, eol));
      text.remove_prefix(eol + 1);
    }
  }
  if (text.starts_with(kReviseOpen)) {
    text.remove_prefix(kReviseOpen.size());
    const auto close = text.find(kReviseClose);
    if (close == std::string_view::npos || close == 0) throw ProtocolError("unterminated revision block");
    out.draft = std::string(text.substr(0, close - 1));
    text.remove_prefix(close + kReviseClose.size());
    if (!text.starts_with(kReviseInstruction)) throw ProtocolError("revision block without instruction");
    out.kind = RequestKind::revise;
  } else if (text.starts_with(kNextStepInstruction)) {
    out.kind = RequestKind::next_step;
  } else if (text.starts_with(kRolloutInstruction)) {
    out.kind = RequestKind::rollout;
  } else {
    throw ProtocolError("unrecognised instruction line");
  }
  return out;
}

std::vector<std::string> split_steps(std::string_view completion_text,
                                     std::optional<std::string> boundary_regex) {
  std::vector<std::string> pieces;
  if (boundary_regex) {
    const std::regex boundary(*boundary_regex);
    const std::string text{completion_text};
    std::sregex_token_iterator it(text.begin(), text.end(), boundary, -1), end;
    for (; it != end; ++it) pieces.push_back(it->str());
  } else {
    std::size_t start = 0;
    while (start <= completion_text.size()) {
      const auto eol = completion_text.find('\n', start);
      const auto stop = eol == std::string_view::npos ? completion_text.size() : eol;
      pieces.emplace_back(completion_text.substr(start, stop - start));
      if (eol == std::string_view::npos) break;
      start = eol + 1;
    }
  }
  std::vector<std::string> steps;
  for (const auto& p : pieces) {
    const auto t = trim(p);
    if (!t.empty()) steps.emplace_back(t);
  }
  return steps;
}

std::optional<std::string> extract_answer(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  const auto at = lower.rfind("answer:");
  if (at == std::string::npos) return std::nullopt;
  auto rest = text.substr(at + 7);
  rest = rest.substr(0, rest.find('\n'));
  return std::string(trim(rest));
}

std::string render_condition(std::string_view prompt, std::span<const std::string> steps) {
  std::string s{prompt};
  for (const auto& step : steps) {
    s += '\n';
    s += step;
  }
  return s;
}

SyntheticClient::SyntheticClient(std::vector<TaskInstance> tasks, ProposerProfile profile,
                                 std::shared_ptr<const ToyPolicy> policy)
    : profile_(std::move(profile)), policy_(std::move(policy)) {
  profile_.validate();
  for (auto& t : tasks) {
    const std::string key = t.prompt;
    by_prompt_.insert_or_assign(key, std::move(t));
  }
}

const TaskInstance& SyntheticClient::task_for_prompt(std::string_view prompt) const {
  const auto it = by_prompt_.find(prompt);
  if (it == by_prompt_.end()) throw ProtocolError("synthetic client has no task for prompt");
  return it->second;
}

std::vector<StepCompletion> SyntheticClient::generate(const GenerationRequest& request) {
  request.validate();
  const auto parsed = parse_request(request);
  const TaskInstance& task = task_for_prompt(parsed.prompt);
  const std::uint64_t seed = request.seed.value_or(0);
  std::vector<StepCompletion> out;

  switch (parsed.kind) {
    case RequestKind::next_step:
    case RequestKind::revise: {
      const std::uint64_t stream = parsed.kind == RequestKind::revise ? seed_of(seed, fnv1a(parsed.draft)) : seed;
      for (auto& c : propose_candidates(task, parsed.prefix, request.n_samples, profile_, stream)) {
        out.push_back({std::move(c.text), "stop", std::nullopt});
      }
      break;
    }
    case RequestKind::rollout: {
      for (int s = 0; s < request.n_samples; ++s) {
        const auto rest = sample_completion(task, parsed.prefix, profile_,
                                            seed_of(seed, static_cast<std::uint64_t>(s)));
        std::string text;
        for (const auto& step : rest) {
          text += step;
          text += '\n';
        }
        std::vector<std::string> full = parsed.prefix;
        full.insert(full.end(), rest.begin(), rest.end());
        const auto last = full.empty() ? std::nullopt : parse_step(full.back());
        text += "Answer: ";
        text += last ? std::to_string(last->result) : std::string("none");
        out.push_back({std::move(text), "stop", std::nullopt});
      }
      break;
    }
  }
  if (request.want_logprobs) {
    if (!policy_) throw CapabilityError("synthetic client has no policy for logprobs");
    for (auto& c : out) c.logprobs = std::vector<double>{};
  }
  return out;
}

double SyntheticClient::score_continuation(std::string_view condition, std::string_view continuation) {
  if (!policy_) throw CapabilityError("synthetic client has no policy for scoring");
  auto lines = split_steps(condition);
  if (lines.empty()) throw ProtocolError("condition has no prompt line");
  const TaskInstance& task = task_for_prompt(lines.front());
  lines.erase(lines.begin());
  const auto cont = split_steps(continuation);
  return seq_logprob(*policy_, task.task_id, lines, cont);
}

}  // namespace diffcot
