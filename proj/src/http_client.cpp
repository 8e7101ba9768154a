#include "diffcot/http_client.hpp"

#include <chrono>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>

namespace diffcot {

using nlohmann::json;

namespace {

json completions_body(std::string_view condition, std::string_view continuation, const std::string& model) {
  std::string prompt{condition};
  prompt += '\n';
  prompt += continuation;
  return json{{"model", model},   {"prompt", prompt}, {"max_tokens", 0},
              {"echo", true},     {"logprobs", 1},    {"temperature", 0.0}};
}

double sum_continuation_logprobs(const std::string& body, std::size_t condition_size) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("completions response is not JSON: ") + e.what());
  }
  try {
    const auto& lp = j.at("choices").at(0).at("logprobs");
    if (lp.is_null()) throw CapabilityError("endpoint returned no logprobs");
    const auto& tokens = lp.at("token_logprobs");
    const auto& offsets = lp.at("text_offset");
    if (tokens.size() != offsets.size()) throw ProtocolError("logprob and offset arrays differ in length");
    double total = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].is_null()) continue;
      if (offsets[i].get<std::size_t>() >= condition_size) total += tokens[i].get<double>();
    }
    return total;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed completions response: ") + e.what());
  }
}

}  // namespace

void EndpointConfig::validate() const {
  if (base_url.empty()) throw std::invalid_argument("endpoint base_url is empty");
  if (!base_url.starts_with("http://") && !base_url.starts_with("https://")) {
    throw std::invalid_argument("endpoint base_url must start with http:// or https://");
  }
  if (model.empty()) throw std::invalid_argument("endpoint model is empty");
  if (timeout_ms < 1) throw std::invalid_argument("endpoint timeout_ms must be positive");
  if (max_attempts < 1) throw std::invalid_argument("endpoint max_attempts must be >= 1");
  if (backoff_initial_ms < 0 || backoff_cap_ms < backoff_initial_ms) {
    throw std::invalid_argument("endpoint backoff must satisfy 0 <= initial <= cap");
  }
  if (max_connections < 1) throw std::invalid_argument("endpoint max_connections must be >= 1");
}

EndpointConfig EndpointConfig::from_json(const json& j) {
  EndpointConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.chat_path = j.value("chat_path", c.chat_path);
  c.completions_path = j.value("completions_path", c.completions_path);
  c.model = j.value("model", c.model);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
  c.backoff_cap_ms = j.value("backoff_cap_ms", c.backoff_cap_ms);
  c.logprobs = j.value("logprobs", c.logprobs);
  c.max_connections = j.value("max_connections", c.max_connections);
  c.capture_file = j.value("capture_file", c.capture_file);
  return c;
}

json EndpointConfig::to_json() const {
  return json{{"base_url", base_url},
              {"chat_path", chat_path},
              {"completions_path", completions_path},
              {"model", model},
              {"api_key_env", api_key_env},
              {"timeout_ms", timeout_ms},
              {"max_attempts", max_attempts},
              {"backoff_initial_ms", backoff_initial_ms},
              {"backoff_cap_ms", backoff_cap_ms},
              {"logprobs", logprobs},
              {"max_connections", max_connections},
              {"capture_file", capture_file}};
}

json chat_request_body(const GenerationRequest& request, const std::string& model) {
  json messages = json::array();
  if (!request.system_prompt.empty()) {
    messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
  }
  for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  json body{{"model", model},
            {"messages", messages},
            {"temperature", request.temperature},
            {"max_tokens", request.max_tokens},
            {"n", request.n_samples}};
  if (request.seed) body["seed"] = *request.seed;
  if (!request.stop.empty()) body["stop"] = request.stop;
  if (request.want_logprobs) body["logprobs"] = true;
  return body;
}

std::vector<StepCompletion> parse_chat_response(const std::string& body, bool want_logprobs) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("chat response is not JSON: ") + e.what());
  }
  std::vector<StepCompletion> out;
  try {
    for (const auto& choice : j.at("choices")) {
      StepCompletion c;
      const auto& content = choice.at("message").at("content");
      c.text = content.is_null() ? std::string() : content.get<std::string>();
      const auto reason = choice.find("finish_reason");
      if (reason != choice.end() && reason->is_string()) c.finish_reason = reason->get<std::string>();
      if (want_logprobs) {
        const auto lp = choice.find("logprobs");
        if (lp == choice.end() || lp->is_null()) throw CapabilityError("endpoint returned no logprobs");
        std::vector<double> values;
        for (const auto& tok : lp->at("content")) values.push_back(tok.at("logprob").get<double>());
        c.logprobs = std::move(values);
      }
      out.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed chat response: ") + e.what());
  }
  if (out.empty()) throw ProtocolError("chat response has no choices");
  return out;
}

ChatCompletionClient::ChatCompletionClient(EndpointConfig config) : config_(std::move(config)) {
  config_.validate();
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
  if (!config_.capture_file.empty()) {
    capture_.open(config_.capture_file, std::ios::app);
    if (!capture_) throw std::runtime_error("cannot open capture file " + config_.capture_file);
  }
}

void ChatCompletionClient::capture(std::uint64_t correlation_id, const std::string& path,
                                   const std::string& body, int status, const std::string& response) {
  if (!capture_.is_open()) return;
  const json line{{"id", correlation_id}, {"path", path}, {"request", body}, {"status", status},
                  {"response", response}};
  std::lock_guard lock(capture_mutex_);
  capture_ << line.dump() << '\n';
  capture_.flush();
}

std::string ChatCompletionClient::post(const std::string& path, const std::string& body) {
  {
    std::unique_lock lock(slots_mutex_);
    slots_cv_.wait(lock, [&] { return in_flight_ < config_.max_connections; });
    ++in_flight_;
  }
  struct Release {
    ChatCompletionClient& self;
    ~Release() {
      {
        std::lock_guard lock(self.slots_mutex_);
        --self.in_flight_;
      }
      self.slots_cv_.notify_one();
    }
  } release{*this};

  const std::uint64_t id = next_id_++;
  const std::string id_text = std::to_string(id);
  httplib::Headers headers{{"X-Request-Id", id_text}};
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  std::vector<std::string> log;
  int delay_ms = config_.backoff_initial_ms;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    ++attempts_;
    httplib::Client cli(config_.base_url);
    const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    auto res = cli.Post(path, headers, body, "application/json");

    std::ostringstream entry;
    entry << "attempt " << attempt << " id " << id << ": ";
    bool retryable = true;
    if (!res) {
      entry << "transport failure (" << httplib::to_string(res.error()) << ")";
      capture(id, path, body, 0, "");
    } else {
      capture(id, path, body, res->status, res->body);
      if (res->status >= 200 && res->status < 300) {
        const auto echoed = res->get_header_value("X-Request-Id");
        if (!echoed.empty() && echoed != id_text) {
          throw ProtocolError("response correlation id " + echoed + " does not match request " + id_text);
        }
        return res->body;
      }
      entry << "HTTP " << res->status;
      retryable = res->status == 408 || res->status == 429 || res->status >= 500;
    }
    log.push_back(entry.str());
    if (!retryable) break;
    if (attempt < config_.max_attempts) {
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      delay_ms = std::min(config_.backoff_cap_ms, std::max(1, delay_ms * 2));
    }
  }
  throw TransportError("request to " + config_.base_url + path + " failed after " +
                           std::to_string(log.size()) + " attempt(s)",
                       std::move(log));
}

std::vector<StepCompletion> ChatCompletionClient::generate(const GenerationRequest& request) {
  request.validate();
  if (request.want_logprobs && !config_.logprobs) {
    throw CapabilityError("endpoint is not configured for logprobs");
  }
  const auto body = chat_request_body(request, config_.model).dump();
  return parse_chat_response(post(config_.chat_path, body), request.want_logprobs);
}

double ChatCompletionClient::score_continuation(std::string_view condition, std::string_view continuation) {
  if (!config_.logprobs) throw CapabilityError("endpoint is not configured for logprobs");
  if (continuation.empty()) return 0.0;
  const auto body = completions_body(condition, continuation, config_.model).dump();
  return sum_continuation_logprobs(post(config_.completions_path, body), condition.size() + 1);
}

void ChatCompletionClient::probe() {
  GenerationRequest r;
  r.messages.push_back({"user", "ping"});
  r.max_tokens = 1;
  r.temperature = 0.0;
  r.want_logprobs = config_.logprobs;
  generate(r);
}

ReplayClient::ReplayClient(const std::string& capture_path, std::string model, bool logprobs)
    : model_(std::move(model)), logprobs_(logprobs) {
  std::ifstream in(capture_path);
  if (!in) throw std::runtime_error("cannot open capture file " + capture_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const int status = j.at("status").get<int>();
    if (status < 200 || status >= 300) continue;
    responses_.insert_or_assign(j.at("request").get<std::string>(), j.at("response").get<std::string>());
  }
}

std::vector<StepCompletion> ReplayClient::generate(const GenerationRequest& request) {
  request.validate();
  const auto body = chat_request_body(request, model_).dump();
  const auto it = responses_.find(body);
  if (it == responses_.end()) throw TransportError("no recorded response for request", {});
  return parse_chat_response(it->second, request.want_logprobs);
}

double ReplayClient::score_continuation(std::string_view condition, std::string_view continuation) {
  if (!logprobs_) throw CapabilityError("replayed endpoint has no logprobs");
  if (continuation.empty()) return 0.0;
  const auto it = responses_.find(completions_body(condition, continuation, model_).dump());
  if (it == responses_.end()) throw TransportError("no recorded response for request", {});
  return sum_continuation_logprobs(it->second, condition.size() + 1);
}

}  // namespace diffcot
