#include <catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "diffcot/http_client.hpp"
#include "diffcot/parallel.hpp"
#include "support.hpp"

using namespace diffcot;
using nlohmann::json;

namespace {

std::string chat_reply(const std::string& text, bool with_logprobs = false) {
  json choice{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}, {"finish_reason", "stop"}};
  if (with_logprobs) choice["logprobs"] = {{"content", json::array({{{"token", "x"}, {"logprob", -0.5}}})}};
  return json{{"choices", json::array({choice})}}.dump();
}

class MockServer {
 public:
  explicit MockServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post(".*", [this, handler](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mutex_);
        requests_.push_back(req);
      }
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::vector<httplib::Request> requests() {
    std::lock_guard lock(mutex_);
    return requests_;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::mutex mutex_;
  std::vector<httplib::Request> requests_;
};

EndpointConfig endpoint_for(const MockServer& server) {
  EndpointConfig c;
  c.base_url = server.url();
  c.model = "mock-model";
  c.api_key_env = "DIFFCOT_TEST_KEY";
  c.timeout_ms = 2000;
  c.backoff_initial_ms = 1;
  c.backoff_cap_ms = 4;
  return c;
}

GenerationRequest simple_request() { return step_request("p", 3, {}, 1, RequestShape{0.4, 32, 5}); }

}  // namespace

TEST_CASE("request body follows the chat schema", "[http_client]") {
  auto r = simple_request();
  r.want_logprobs = true;
  const auto body = chat_request_body(r, "m");
  CHECK(body.at("model") == "m");
  CHECK(body.at("messages").size() == 2);
  CHECK(body.at("messages")[0].at("role") == "system");
  CHECK(body.at("temperature") == 0.4);
  CHECK(body.at("n") == 1);
  CHECK(body.at("max_tokens") == 32);
  CHECK(body.at("seed") == 5);
  CHECK(body.at("stop") == json::array({"\n"}));
  CHECK(body.at("logprobs") == true);
}

TEST_CASE("response parsing", "[http_client]") {
  const auto out = parse_chat_response(chat_reply("hello", true), true);
  REQUIRE(out.size() == 1);
  CHECK(out[0].text == "hello");
  CHECK(out[0].finish_reason == "stop");
  CHECK(out[0].logprobs == std::optional<std::vector<double>>(std::vector<double>{-0.5}));
  CHECK_FALSE(parse_chat_response(chat_reply("hello"), false)[0].logprobs);
  CHECK_THROWS_AS(parse_chat_response("not json", false), ProtocolError);
  CHECK_THROWS_AS(parse_chat_response(R"({"choices":[]})", false), ProtocolError);
  CHECK_THROWS_AS(parse_chat_response(R"({"choices":[{"text":"x"}]})", false), ProtocolError);
  CHECK_THROWS_AS(parse_chat_response(chat_reply("hello"), true), CapabilityError);
}

TEST_CASE("endpoint config validation and json", "[http_client]") {
  EndpointConfig c;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.base_url = "ftp://x";
  c.model = "m";
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.base_url = "https://api.example.com";
  CHECK_NOTHROW(c.validate());
  c.backoff_cap_ms = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.backoff_cap_ms = 4000;
  CHECK(EndpointConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("successful call sends auth and correlation headers", "[http_client]") {
  MockServer server([](const httplib::Request& req, httplib::Response& res) {
    res.set_header("X-Request-Id", req.get_header_value("X-Request-Id"));
    res.set_content(chat_reply("step 1: 1 + 1 = 2"), "application/json");
  });
  ::setenv("DIFFCOT_TEST_KEY", "secret-token", 1);
  ChatCompletionClient client(endpoint_for(server));
  const auto out = client.generate(simple_request());
  REQUIRE(out.size() == 1);
  CHECK(out[0].text == "step 1: 1 + 1 = 2");
  const auto reqs = server.requests();
  REQUIRE(reqs.size() == 1);
  CHECK(reqs[0].path == "/v1/chat/completions");
  CHECK(reqs[0].get_header_value("Authorization") == "Bearer secret-token");
  CHECK(json::parse(reqs[0].body).at("model") == "mock-model");
  ::unsetenv("DIFFCOT_TEST_KEY");
}

TEST_CASE("transient failures are retried within the attempt budget", "[http_client]") {
  std::atomic<int> calls{0};
  MockServer server([&](const httplib::Request&, httplib::Response& res) {
    if (calls++ < 2) {
      res.status = 503;
      return;
    }
    res.set_content(chat_reply("ok"), "application/json");
  });
  ChatCompletionClient client(endpoint_for(server));
  CHECK(client.generate(simple_request())[0].text == "ok");
  CHECK(client.attempts_made() == 3);
}

TEST_CASE("exhausted retries raise a transport error with the attempt log", "[http_client]") {
  MockServer server([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  auto config = endpoint_for(server);
  config.max_attempts = 3;
  ChatCompletionClient client(config);
  try {
    client.generate(simple_request());
    FAIL("expected a transport error");
  } catch (const TransportError& e) {
    CHECK(e.attempts().size() == 3);
    CHECK(e.attempts()[0].find("HTTP 500") != std::string::npos);
  }
  CHECK(client.attempts_made() == 3);
  CHECK(server.requests().size() == 3);
}

TEST_CASE("client errors are not retried", "[http_client]") {
  MockServer server([](const httplib::Request&, httplib::Response& res) { res.status = 401; });
  ChatCompletionClient client(endpoint_for(server));
  CHECK_THROWS_AS(client.generate(simple_request()), TransportError);
  CHECK(server.requests().size() == 1);
}

TEST_CASE("unreachable endpoint is a transport error", "[http_client]") {
  EndpointConfig c;
  c.base_url = "http://127.0.0.1:1";
  c.model = "m";
  c.timeout_ms = 200;
  c.max_attempts = 2;
  c.backoff_initial_ms = 1;
  c.backoff_cap_ms = 2;
  ChatCompletionClient client(c);
  CHECK_THROWS_AS(client.generate(simple_request()), TransportError);
  CHECK(client.attempts_made() == 2);
}

TEST_CASE("malformed bodies and mismatched ids are protocol errors", "[http_client]") {
  MockServer bad([](const httplib::Request&, httplib::Response& res) { res.set_content("{oops", "application/json"); });
  ChatCompletionClient a(endpoint_for(bad));
  CHECK_THROWS_AS(a.generate(simple_request()), ProtocolError);

  MockServer swapped([](const httplib::Request&, httplib::Response& res) {
    res.set_header("X-Request-Id", "999999");
    res.set_content(chat_reply("x"), "application/json");
  });
  ChatCompletionClient b(endpoint_for(swapped));
  CHECK_THROWS_AS(b.generate(simple_request()), ProtocolError);
}

TEST_CASE("concurrent requests are matched by correlation id", "[http_client]") {
  MockServer server([](const httplib::Request& req, httplib::Response& res) {
    const auto id = req.get_header_value("X-Request-Id");
    const auto body = json::parse(req.body);
    // Answer slower for even ids so replies arrive out of order.
    if (std::stoi(id) % 2 == 0) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    res.set_header("X-Request-Id", id);
    res.set_content(chat_reply("seed " + std::to_string(body.at("seed").get<int>())), "application/json");
  });
  auto config = endpoint_for(server);
  config.max_connections = 8;
  ChatCompletionClient client(config);
  std::vector<std::string> got(16);
  parallel_for(got.size(), 8, [&](std::size_t i) {
    got[i] = client.generate(step_request("p", 3, {}, 1, RequestShape{0.4, 32, i}))[0].text;
  });
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == "seed " + std::to_string(i));
}

TEST_CASE("capture and replay", "[http_client]") {
  const auto dir = testing::scratch_dir("capture");
  MockServer server([](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    res.set_content(chat_reply("reply " + std::to_string(body.at("seed").get<int>())), "application/json");
  });
  auto config = endpoint_for(server);
  config.capture_file = (dir / "wire.jsonl").string();
  {
    ChatCompletionClient client(config);
    client.generate(step_request("p", 3, {}, 1, RequestShape{0.4, 32, 1}));
    client.generate(step_request("p", 3, {}, 1, RequestShape{0.4, 32, 2}));
  }
  ReplayClient replay(config.capture_file, "mock-model");
  CHECK(replay.generate(step_request("p", 3, {}, 1, RequestShape{0.4, 32, 2}))[0].text == "reply 2");
  CHECK(replay.generate(step_request("p", 3, {}, 1, RequestShape{0.4, 32, 1}))[0].text == "reply 1");
  CHECK_THROWS_AS(replay.generate(step_request("p", 3, {}, 1, RequestShape{0.4, 32, 3})), TransportError);
  CHECK_THROWS_AS(replay.score_continuation("a", "b"), CapabilityError);
}

TEST_CASE("logprob capability", "[http_client]") {
  MockServer with([](const httplib::Request& req, httplib::Response& res) {
    if (req.path == "/v1/completions") {
      // Condition "ab" then the newline, then the continuation "cd".
      res.set_content(R"({"choices":[{"logprobs":{"tokens":["ab","\n","cd"],"token_logprobs":[null,-0.25,-1.5],"text_offset":[0,2,3]}}]})",
                      "application/json");
      return;
    }
    res.set_content(chat_reply("x", true), "application/json");
  });
  auto config = endpoint_for(with);
  config.logprobs = true;
  ChatCompletionClient client(config);
  CHECK_NOTHROW(client.probe());
  CHECK(client.score_continuation("ab", "cd") == -1.5);
  CHECK(client.score_continuation("ab", "") == 0.0);

  MockServer without([](const httplib::Request&, httplib::Response& res) {
    res.set_content(chat_reply("x"), "application/json");
  });
  auto plain = endpoint_for(without);
  plain.logprobs = true;
  ChatCompletionClient missing(plain);
  CHECK_THROWS_AS(missing.probe(), CapabilityError);

  plain.logprobs = false;
  ChatCompletionClient off(plain);
  CHECK_THROWS_AS(off.score_continuation("a", "b"), CapabilityError);
}
