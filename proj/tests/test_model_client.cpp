#include <catch_amalgamated.hpp>

#include <memory>

#include "diffcot/dpo_core.hpp"
#include "diffcot/model_client.hpp"
#include "diffcot/rng.hpp"

using namespace diffcot;

TEST_CASE("split_steps examples", "[model_client]") {
  using V = std::vector<std::string>;
  CHECK(split_steps("a\nb\nAnswer: 42") == V{"a", "b", "Answer: 42"});
  CHECK(split_steps("").empty());
  CHECK(split_steps("x\n\n\ny") == V{"x", "y"});
  CHECK(split_steps("  x  \r\n y") == V{"x", "y"});
  CHECK(split_steps("one line") == V{"one line"});
  CHECK(split_steps("a ; b;c", std::string(R"(\s*;\s*)")) == V{"a", "b", "c"});
}

TEST_CASE("extract_answer takes the last case-insensitive marker", "[model_client]") {
  CHECK(extract_answer("step 1\nAnswer: 42") == std::optional<std::string>("42"));
  CHECK(extract_answer("answer: 1\nANSWER:  -7 \n") == std::optional<std::string>("-7"));
  CHECK_FALSE(extract_answer("no marker here"));
}

TEST_CASE("request layout round-trips through parse_request", "[model_client]") {
  const std::vector<std::string> prefix{"step 1: 3 + 4 = 7", "step 2: 7 * 2 = 14"};
  const RequestShape shape{0.4, 64, 9};

  const auto next = step_request("Start with 3.", 5, prefix, 4, shape);
  CHECK(next.system_prompt == solver_system_prompt(5));
  CHECK(next.n_samples == 4);
  CHECK(next.seed == std::optional<std::uint64_t>(9));
  CHECK(next.stop == std::vector<std::string>{"\n"});
  CHECK(next.messages.back().content ==
        "Start with 3.\n\nSteps so far:\nstep 1: 3 + 4 = 7\nstep 2: 7 * 2 = 14\n\nWrite step 3 only.");
  auto parsed = parse_request(next);
  CHECK(parsed.kind == RequestKind::next_step);
  CHECK(parsed.prompt == "Start with 3.");
  CHECK(parsed.prefix == prefix);

  const auto revise = revise_request("Start with 3.", 5, prefix, "step 3: 14 - 1 = 12", shape);
  parsed = parse_request(revise);
  CHECK(parsed.kind == RequestKind::revise);
  CHECK(parsed.draft == "step 3: 14 - 1 = 12");
  CHECK(parsed.prefix == prefix);

  const auto rollout = rollout_request("Start with 3.", 5, {}, shape);
  CHECK(rollout.messages.back().content == "Start with 3.\n\nContinue from step 1 to the final answer.");
  parsed = parse_request(rollout);
  CHECK(parsed.kind == RequestKind::rollout);
  CHECK(parsed.prefix.empty());
}

TEST_CASE("malformed requests are protocol errors", "[model_client]") {
  GenerationRequest r;
  CHECK_THROWS_AS(parse_request(r), ProtocolError);
  r.messages.push_back({"user", "no separator"});
  CHECK_THROWS_AS(parse_request(r), ProtocolError);
  r.messages.back().content = "p\n\nDo something else.";
  CHECK_THROWS_AS(parse_request(r), ProtocolError);
  r.messages.back().content = "p\n\n<revise>\nunterminated";
  CHECK_THROWS_AS(parse_request(r), ProtocolError);
}

TEST_CASE("request validation", "[model_client]") {
  auto r = step_request("p", 2, {}, 1, RequestShape{});
  CHECK_NOTHROW(r.validate());
  r.temperature = -0.1;
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
  r.temperature = 0.4;
  r.n_samples = 0;
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
}

TEST_CASE("synthetic client: degenerate profile yields the correct step", "[model_client]") {
  const auto task = make_task(3, 4);
  ProposerProfile profile;
  profile.tier_weights = {1.0, 0.0, 0.0, 0.0};
  SyntheticClient client({task}, profile);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto out = client.generate(step_request(task.prompt, 4, {}, 1, RequestShape{0.4, 64, seed}));
    REQUIRE(out.size() == 1);
    CHECK(out[0].text == task.correct_step(0));
  }
}

TEST_CASE("synthetic client: four samples, deterministic", "[model_client]") {
  const auto task = make_task(4, 5);
  SyntheticClient client({task}, ProposerProfile{});
  const auto request = step_request(task.prompt, 5, {}, 4, RequestShape{0.4, 64, 17});
  const auto a = client.generate(request);
  const auto b = client.generate(request);
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].text == b[i].text);

  const auto roll = client.generate(rollout_request(task.prompt, 5, {}, RequestShape{0.4, 64, 3}));
  REQUIRE(roll.size() == 1);
  CHECK(split_steps(roll[0].text).size() == 6);
  CHECK(extract_answer(roll[0].text));
  CHECK(roll[0].text == client.generate(rollout_request(task.prompt, 5, {}, RequestShape{0.4, 64, 3}))[0].text);
}

TEST_CASE("synthetic client rejects unknown prompts", "[model_client]") {
  SyntheticClient client({make_task(1, 2)}, ProposerProfile{});
  CHECK_THROWS_AS(client.generate(step_request("unknown", 2, {}, 1, RequestShape{})), ProtocolError);
}

TEST_CASE("score_continuation matches seq_logprob", "[model_client]") {
  const auto task = make_task(6, 3);
  TaskLadders ladders;
  ladders.task_id = task.task_id;
  ladders.prompt = task.prompt;
  ladders.k_budget = 3;
  const auto chain = task.correct_chain();
  for (int i = 0; i < 3; ++i) {
    CandidateLadder l{i, {{chain[static_cast<std::size_t>(i)], 8, 8, CandidateSource::base},
                          {"alt " + std::to_string(i), 0, 8, CandidateSource::base}}};
    ladders.ladders.push_back(l);
  }
  auto policy = std::make_shared<ToyPolicy>(ToyPolicy::from_ladders(std::vector<TaskLadders>{ladders}));
  Rng rng(5);
  std::vector<std::string> ctx;
  for (int i = 0; i < 3; ++i) {
    policy->add_logits(task.task_id, ctx, Eigen::Vector2d(rng.uniform() * 3 - 1.5, rng.uniform() * 3 - 1.5));
    ctx.push_back(chain[static_cast<std::size_t>(i)]);
  }
  SyntheticClient client({task}, ProposerProfile{}, policy);
  CHECK(client.supports_logprobs());
  const std::vector<std::string> cond(chain.begin(), chain.begin() + 1);
  const std::vector<std::string> cont(chain.begin() + 1, chain.end());
  const std::string cont_text = cont[0] + "\n" + cont[1];
  CHECK(client.score_continuation(render_condition(task.prompt, cond), cont_text) ==
        Catch::Approx(seq_logprob(*policy, task.task_id, cond, cont)).margin(1e-12));
  CHECK(client.score_continuation(render_condition(task.prompt, cond), "") == 0.0);

  SyntheticClient plain({task}, ProposerProfile{});
  CHECK_FALSE(plain.supports_logprobs());
  CHECK_THROWS_AS(plain.score_continuation(task.prompt, chain[0]), CapabilityError);
}
