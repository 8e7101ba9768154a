#pragma once

// Chat-completion HTTP backend with retries and optional wire capture.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <string>

#include <json.hpp>

#include "diffcot/model_client.hpp"

namespace diffcot {

struct EndpointConfig {
  std::string base_url;  // scheme://host[:port]
  std::string chat_path = "/v1/chat/completions";
  std::string completions_path = "/v1/completions";
  std::string model;
  std::string api_key_env = "DIFFCOT_API_KEY";
  int timeout_ms = 60000;
  int max_attempts = 3;
  int backoff_initial_ms = 250;
  int backoff_cap_ms = 4000;
  bool logprobs = false;
  int max_connections = 4;
  std::string capture_file;

  void validate() const;
  static EndpointConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

nlohmann::json chat_request_body(const GenerationRequest& request, const std::string& model);
std::vector<StepCompletion> parse_chat_response(const std::string& body, bool want_logprobs);

class ChatCompletionClient : public ModelClient {
 public:
  explicit ChatCompletionClient(EndpointConfig config);

  std::vector<StepCompletion> generate(const GenerationRequest& request) override;
  double score_continuation(std::string_view condition, std::string_view continuation) override;
  bool supports_logprobs() const override { return config_.logprobs; }

  /// Sends a one-token request; throws on transport failure, and throws
  /// CapabilityError if logprobs are configured but absent in the reply.
  void probe();

  const EndpointConfig& config() const { return config_; }
  /// Sum of attempts over the lifetime of the client.
  std::uint64_t attempts_made() const { return attempts_.load(); }

 private:
  std::string post(const std::string& path, const std::string& body);
  void capture(std::uint64_t correlation_id, const std::string& path, const std::string& body,
               int status, const std::string& response);

  EndpointConfig config_;
  std::string api_key_;
  std::atomic<std::uint64_t> next_id_{1};
  std::atomic<std::uint64_t> attempts_{0};
  std::mutex capture_mutex_;
  std::ofstream capture_;
  std::mutex slots_mutex_;
  std::condition_variable slots_cv_;
  int in_flight_ = 0;
};

/// Serves responses recorded in a capture file, keyed by request body.
class ReplayClient : public ModelClient {
 public:
  ReplayClient(const std::string& capture_path, std::string model, bool logprobs = false);

  std::vector<StepCompletion> generate(const GenerationRequest& request) override;
  double score_continuation(std::string_view, std::string_view) override;
  bool supports_logprobs() const override { return logprobs_; }

 private:
  std::map<std::string, std::string> responses_;
  std::string model_;
  bool logprobs_;
};

}  // namespace diffcot
