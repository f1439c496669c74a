// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/serve.hpp"

#include <httplib.h>

#include <array>

#include "cvlm/image.hpp"

namespace cvlm {

using nlohmann::json;

namespace {

std::string dump(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kContextOverflow:
      return 409;
    case ErrorCode::kUndecodableImage:
      return 422;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfRange:
    case ErrorCode::kParse:
      return 400;
    default:
      return 500;
  }
}

json error_body(int status, const std::string& field, const std::string& message) {
  json err = {{"status", status}, {"message", message}};
  if (!field.empty()) err["field"] = field;
  return {{"error", err}};
}

template <typename T>
T field_as(const json& obj, const char* key, const std::string& path, bool (json::*check)() const,
           const char* type) {
  const auto& v = obj.at(key);
  if (!(v.*check)()) throw HttpError(400, path + "." + key, std::string("expected ") + type);
  return v.get<T>();
}

SamplingParams parse_params(const json& p, bool& stream) {
  SamplingParams out;
  if (!p.is_object()) throw HttpError(400, "params", "expected object");
  for (const auto& [key, value] : p.items()) {
    const std::string path = "params." + key;
    if (key == "max_new_tokens") {
      if (!value.is_number_integer() || value.get<long long>() < 1) {
        throw HttpError(400, path, "expected integer >= 1");
      }
      out.max_new_tokens = value.get<std::size_t>();
    } else if (key == "temperature") {
      if (!value.is_number() || value.get<double>() < 0) {
        throw HttpError(400, path, "expected number >= 0");
      }
      out.temperature = value.get<double>();
    } else if (key == "top_p") {
      if (!value.is_number() || value.get<double>() <= 0 || value.get<double>() > 1) {
        throw HttpError(400, path, "expected number in (0, 1]");
      }
      out.top_p = value.get<double>();
    } else if (key == "seed") {
      if (!value.is_number_integer() ||
          (!value.is_number_unsigned() && value.get<long long>() < 0)) {
        throw HttpError(400, path, "expected non-negative integer");
      }
      out.seed = value.get<std::uint64_t>();
    } else if (key == "stream") {
      if (!value.is_boolean()) throw HttpError(400, path, "expected boolean");
      stream = value.get<bool>();
    } else {
      throw HttpError(400, path, "unknown field");
    }
  }
  return out;
}

}  // namespace

std::string base64_decode(std::string_view text) {
  if (text.starts_with("data:")) {
    const auto comma = text.find(',');
    if (comma == std::string_view::npos ||
        text.substr(0, comma).find(";base64") == std::string_view::npos) {
      throw Error(ErrorCode::kUndecodableImage, "data URL is not base64");
    }
    text.remove_prefix(comma + 1);
  }
  static const auto table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(alphabet[i])] = i;
    return t;
  }();
  if (text.size() % 4 != 0) {
    throw Error(ErrorCode::kUndecodableImage,
                "base64 length " + std::to_string(text.size()) + " is not a multiple of 4");
  }
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    std::array<int, 4> v{};
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && last && k >= 2) {
        ++pad;
        v[k] = 0;
        continue;
      }
      if (pad > 0 || table[static_cast<unsigned char>(c)] < 0) {
        throw Error(ErrorCode::kUndecodableImage,
                    "invalid base64 character at offset " + std::to_string(i + k));
      }
      v[k] = table[static_cast<unsigned char>(c)];
    }
    const unsigned n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<char>((n >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<char>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<char>(n & 0xff));
  }
  return out;
}

ChatRequest parse_chat_request(const json& body) {
  if (!body.is_object()) throw HttpError(400, "", "request body must be a JSON object");
  ChatRequest req;
  req.conversation.system = kDefaultSystemPrompt;
  for (const auto& [key, value] : body.items()) {
    if (key != "messages" && key != "params") throw HttpError(400, key, "unknown field");
  }
  if (body.contains("params")) req.params = parse_params(body["params"], req.stream);

  if (!body.contains("messages")) throw HttpError(400, "messages", "required");
  const auto& messages = body["messages"];
  if (!messages.is_array() || messages.empty()) {
    throw HttpError(400, "messages", "expected non-empty array");
  }
  for (std::size_t i = 0; i < messages.size(); ++i) {
    const std::string path = "messages[" + std::to_string(i) + "]";
    const auto& msg = messages[i];
    if (!msg.is_object()) throw HttpError(400, path, "expected object");
    if (!msg.contains("role") || !msg["role"].is_string()) {
      throw HttpError(400, path + ".role", "expected string");
    }
    if (!msg.contains("content")) throw HttpError(400, path + ".content", "required");
    const auto role = msg["role"].get<std::string>();

    Turn turn;
    std::vector<std::string> images;
    const auto& content = msg["content"];
    if (content.is_string()) {
      turn.text = content.get<std::string>();
    } else if (content.is_array()) {
      for (std::size_t k = 0; k < content.size(); ++k) {
        const std::string part_path = path + ".content[" + std::to_string(k) + "]";
        const auto& part = content[k];
        if (!part.is_object() || !part.contains("type") || !part["type"].is_string()) {
          throw HttpError(400, part_path + ".type", "expected string");
        }
        const auto type = part["type"].get<std::string>();
        if (type == "text") {
          if (!part.contains("text")) throw HttpError(400, part_path + ".text", "required");
          turn.text += field_as<std::string>(part, "text", part_path, &json::is_string, "string");
        } else if (type == "image") {
          if (!part.contains("data")) throw HttpError(400, part_path + ".data", "required");
          images.push_back(
              field_as<std::string>(part, "data", part_path, &json::is_string, "string"));
        } else {
          throw HttpError(400, part_path + ".type", "expected \"text\" or \"image\"");
        }
      }
    } else {
      throw HttpError(400, path + ".content", "expected string or array");
    }

    if (role == "system") {
      if (i != 0) throw HttpError(400, path + ".role", "system message must be first");
      if (!images.empty())
        throw HttpError(400, path + ".content", "system message cannot hold images");
      req.conversation.system = turn.text;
      continue;
    }
    if (role == "user") {
      turn.role = Role::kHuman;
    } else if (role == "assistant") {
      turn.role = Role::kAssistant;
      if (!images.empty())
        throw HttpError(400, path + ".content", "assistant message cannot hold images");
    } else {
      throw HttpError(400, path + ".role", "expected user, assistant or system");
    }
    for (std::size_t k = 0; k < images.size(); ++k) {
      try {
        const std::string bytes = base64_decode(images[k]);
        turn.images.push_back(decode_image(std::span<const unsigned char>(
            reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size())));
      } catch (const Error& e) {
        throw HttpError(422, path + ".content image " + std::to_string(k), e.what());
      }
    }
    req.conversation.turns.push_back(std::move(turn));
  }
  if (req.conversation.turns.empty() || req.conversation.turns.back().role != Role::kHuman) {
    throw HttpError(400, "messages", "last message must have role user");
  }
  return req;
}

json token_event_json(const TokenEvent& event) {
  return {{"type", "token"}, {"text", event.text}, {"id", event.id}, {"index", event.index}};
}

namespace {

json usage_json(const Usage& u) {
  return {{"prompt_tokens", u.prompt_tokens},
          {"spliced_tokens", u.spliced_tokens},
          {"new_tokens", u.new_tokens}};
}

json timing_json(const Timing& t) {
  return {{"prefill_ms", t.prefill_ms},
          {"decode_ms", t.decode_ms},
          {"first_token_ms", t.first_token_ms}};
}

}  // namespace

json done_event_json(FinishReason reason, const Usage& usage, const Timing& timing) {
  return {{"type", "done"},
          {"finish_reason", finish_reason_name(reason)},
          {"usage", usage_json(usage)},
          {"timing", timing_json(timing)}};
}

json chat_result_json(const GenerationResult& r) {
  return {{"text", r.text},
          {"tokens", r.tokens},
          {"finish_reason", finish_reason_name(r.finish_reason)},
          {"usage", usage_json(r.usage)},
          {"timing", timing_json(r.timing)}};
}

std::string sse_frame(const json& event) {
  return "data: " + dump(event) + "\n\n";
}

std::unique_ptr<AdmissionGate::Ticket> AdmissionGate::acquire() {
  std::unique_lock lock(mu_);
  if (running_ >= workers_) {
    if (waiting_ >= queue_) return nullptr;
    ++waiting_;
    cv_.wait(lock, [&] { return running_ < workers_; });
    --waiting_;
  }
  ++running_;
  return std::make_unique<Ticket>(*this);
}

void AdmissionGate::release() {
  {
    std::lock_guard lock(mu_);
    --running_;
  }
  cv_.notify_one();
}

std::size_t AdmissionGate::running() const {
  std::lock_guard lock(mu_);
  return running_;
}

std::size_t AdmissionGate::waiting() const {
  std::lock_guard lock(mu_);
  return waiting_;
}

ChatServer::ChatServer(ServerConfig config)
    : config_(std::move(config)),
      http_(std::make_unique<httplib::Server>()),
      gate_(config_.workers, config_.queue),
      started_(std::chrono::steady_clock::now()) {
  if (config_.workers == 0) throw Error(ErrorCode::kInvalidArgument, "workers must be >= 1");
  const std::size_t threads = config_.workers + config_.queue + 4;
  http_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  // Oversized bodies are answered by the handler with a JSON error.
  http_->set_payload_max_length(config_.max_request_bytes + 1);
  install_routes();
}

ChatServer::~ChatServer() {
  stop();
  if (loader_.joinable()) loader_.join();
}

void ChatServer::set_model(std::shared_ptr<const Model> model) {
  {
    std::lock_guard lock(model_mu_);
    model_ = std::move(model);
    load_done_ = true;
  }
  model_cv_.notify_all();
}

void ChatServer::load_async(std::filesystem::path manifest, std::filesystem::path weights) {
  loader_ = std::thread([this, manifest = std::move(manifest), weights = std::move(weights)] {
    try {
      set_model(std::make_shared<const Model>(load_model(manifest, weights)));
    } catch (const std::exception& e) {
      {
        std::lock_guard lock(model_mu_);
        load_error_ = e.what();
        load_done_ = true;
      }
      model_cv_.notify_all();
    }
  });
}

void ChatServer::wait_loaded() {
  std::unique_lock lock(model_mu_);
  model_cv_.wait(lock, [&] { return load_done_; });
  if (!load_error_.empty()) throw Error(ErrorCode::kIo, "model load failed: " + load_error_);
}

std::shared_ptr<const Model> ChatServer::model() const {
  std::lock_guard lock(model_mu_);
  return model_;
}

int ChatServer::bind() {
  if (config_.port == 0) return http_->bind_to_any_port(config_.host);
  if (!http_->bind_to_port(config_.host, config_.port)) {
    throw Error(ErrorCode::kIo, "cannot bind " + config_.host + ":" + std::to_string(config_.port));
  }
  return config_.port;
}

void ChatServer::listen() {
  http_->listen_after_bind();
}

void ChatServer::stop() {
  if (http_) http_->stop();
}

json ChatServer::health() const {
  std::lock_guard lock(model_mu_);
  const double uptime =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  json out = {{"status", model_ ? "ok" : (load_error_.empty() ? "loading" : "error")},
              {"manifest_hash", model_ ? model_->manifest_hash : ""},
              {"uptime_s", uptime},
              {"active_sessions", active_.load()},
              {"workers", config_.workers},
              {"queue", config_.queue}};
  if (!load_error_.empty()) out["error"] = load_error_;
  return out;
}

void ChatServer::install_routes() {
  auto& srv = *http_;
  auto send_json = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(dump(body), "application/json");
  };

  srv.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
    if (config_.cors_origin.empty()) return;
    res.set_header("Access-Control-Allow-Origin", config_.cors_origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  srv.Options(R"(/v1/.*)",
              [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.set_error_handler([send_json](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    send_json(res, res.status, error_body(res.status, "", httplib::status_message(res.status)));
  });

  srv.Get("/v1/health", [this, send_json](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, health());
  });

  srv.Get("/v1/model", [this, send_json](const httplib::Request&, httplib::Response& res) {
    const auto m = model();
    if (!m) {
      res.set_header("Retry-After", std::to_string(config_.retry_after_s));
      return send_json(res, 503, error_body(503, "", "model is loading"));
    }
    send_json(res, 200,
              {{"manifest", manifest_to_json(m->manifest)},
               {"manifest_hash", m->manifest_hash},
               {"tokenizer_size", m->tokenizer->size()},
               {"image_tokens", m->manifest.vision.num_patches()}});
  });

  srv.Post("/v1/chat", [this, send_json](const httplib::Request& req, httplib::Response& res) {
    if (req.body.size() > config_.max_request_bytes) {
      return send_json(
          res, 413,
          error_body(413, "",
                     "request of " + std::to_string(req.body.size()) + " bytes exceeds limit " +
                         std::to_string(config_.max_request_bytes)));
    }
    const auto m = model();
    if (!m) {
      res.set_header("Retry-After", std::to_string(config_.retry_after_s));
      return send_json(res, 503, error_body(503, "", "model is loading"));
    }
    ChatRequest chat;
    try {
      const json body = json::parse(req.body);
      chat = parse_chat_request(body);
    } catch (const json::exception& e) {
      return send_json(res, 400, error_body(400, "", std::string("invalid JSON: ") + e.what()));
    } catch (const HttpError& e) {
      return send_json(res, e.status(), error_body(e.status(), e.field(), e.what()));
    }

    std::shared_ptr<AdmissionGate::Ticket> ticket = gate_.acquire();
    if (!ticket) {
      res.set_header("Retry-After", std::to_string(config_.retry_after_s));
      return send_json(res, 503, error_body(503, "", "server at capacity"));
    }
    std::shared_ptr<GenerationSession> session;
    try {
      session = std::make_shared<GenerationSession>(*m, chat.conversation, chat.params);
    } catch (const Error& e) {
      const int status = status_for(e.code());
      return send_json(res, status, error_body(status, "", e.what()));
    }

    if (!chat.stream) {
      ++active_;
      GenerationResult result;
      try {
        while (auto ev = session->step()) result.tokens.push_back(ev->id);
      } catch (const std::exception& e) {
        --active_;
        return send_json(res, 500, error_body(500, "", e.what()));
      }
      --active_;
      result.text = session->text();
      result.finish_reason = session->finish_reason();
      result.usage = session->usage();
      result.timing = session->timing();
      return send_json(res, 200, chat_result_json(result));
    }

    ++active_;
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [this, m, session, ticket](std::size_t, httplib::DataSink& sink) {
          std::string frame;
          try {
            if (auto ev = session->step()) {
              frame = sse_frame(token_event_json(*ev));
            }
          } catch (const std::exception& e) {
            const std::string err =
                sse_frame({{"type", "error"}, {"message", e.what()}}) + kSseDone;
            sink.write(err.data(), err.size());
            sink.done();
            return true;
          }
          if (session->stopped()) {
            frame += sse_frame(
                done_event_json(session->finish_reason(), session->usage(), session->timing()));
            frame += kSseDone;
          }
          if (!frame.empty() && !sink.write(frame.data(), frame.size())) return false;
          if (session->stopped()) sink.done();
          return true;
        },
        [this](bool) { --active_; });
  });
}

}  // namespace cvlm
