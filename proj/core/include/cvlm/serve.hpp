// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// HTTP chat service: POST /v1/chat (SSE or single body), GET /v1/health,
// GET /v1/model.

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>

#include "cvlm/model.hpp"
#include "cvlm/pipeline.hpp"

namespace httplib {
class Server;
}

namespace cvlm {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t workers = 1;
  std::size_t queue = 8;
  std::size_t max_request_bytes = 8u << 20;
  std::string cors_origin = "*";  // empty disables CORS headers
  int retry_after_s = 1;
};

// A request rejected before any event was produced.
class HttpError : public std::runtime_error {
 public:
  HttpError(int status, std::string field, const std::string& message)
      : std::runtime_error(message), status_(status), field_(std::move(field)) {}
  int status() const noexcept { return status_; }
  const std::string& field() const noexcept { return field_; }

 private:
  int status_;
  std::string field_;
};

struct ChatRequest {
  Conversation conversation;
  SamplingParams params;
  bool stream = false;
};

// Strict RFC 4648 decoding; an optional "data:...;base64," prefix is skipped.
std::string base64_decode(std::string_view text);

// Validates shape and types (400) and decodes images (422). Roles are user,
// assistant and at most one leading system message; the last must be user.
ChatRequest parse_chat_request(const nlohmann::json& body);

nlohmann::json token_event_json(const TokenEvent& event);
nlohmann::json done_event_json(FinishReason reason, const Usage& usage, const Timing& timing);
nlohmann::json chat_result_json(const GenerationResult& result);
std::string sse_frame(const nlohmann::json& event);
inline constexpr const char* kSseDone = "data: [DONE]\n\n";

// At most `workers` holders run; up to `queue` more wait. Anything beyond
// is refused immediately.
class AdmissionGate {
 public:
  AdmissionGate(std::size_t workers, std::size_t queue) : workers_(workers), queue_(queue) {}

  class Ticket {
   public:
    explicit Ticket(AdmissionGate& gate) : gate_(gate) {}
    ~Ticket() { gate_.release(); }
    Ticket(const Ticket&) = delete;
    Ticket& operator=(const Ticket&) = delete;

   private:
    AdmissionGate& gate_;
  };

  // Blocks while all workers are busy; nullptr when the queue is full.
  std::unique_ptr<Ticket> acquire();
  std::size_t running() const;
  std::size_t waiting() const;

 private:
  void release();

  std::size_t workers_;
  std::size_t queue_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t running_ = 0;
  std::size_t waiting_ = 0;
};

class ChatServer {
 public:
  explicit ChatServer(ServerConfig config);
  ~ChatServer();
  ChatServer(const ChatServer&) = delete;
  ChatServer& operator=(const ChatServer&) = delete;

  void set_model(std::shared_ptr<const Model> model);
  // Loads on a background thread; health reports "loading" until done.
  void load_async(std::filesystem::path manifest, std::filesystem::path weights);
  void wait_loaded();

  // Binds (port 0 picks a free one) and returns the bound port.
  int bind();
  // Serves until stop(); call bind() first.
  void listen();
  void stop();

  nlohmann::json health() const;
  AdmissionGate& admission() { return gate_; }

 private:
  void install_routes();
  std::shared_ptr<const Model> model() const;

  ServerConfig config_;
  std::unique_ptr<httplib::Server> http_;
  AdmissionGate gate_;
  mutable std::mutex model_mu_;
  std::condition_variable model_cv_;
  std::shared_ptr<const Model> model_;
  std::string load_error_;
  bool load_done_ = false;
  std::thread loader_;
  std::atomic<std::size_t> active_{0};
  std::chrono::steady_clock::time_point started_;
};

}  // namespace cvlm
