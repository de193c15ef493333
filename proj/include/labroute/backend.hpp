#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "labroute/core.hpp"
#include "labroute/hash.hpp"
#include "labroute/overlay.hpp"
#include "labroute/random.hpp"

namespace labroute {

struct BackendError : std::runtime_error {
  BackendError(const std::string& what, bool retryable = true) : std::runtime_error(what), retryable(retryable) {}
  bool retryable;
};

struct BackendRequest {
  std::string model_id;
  std::vector<ChatMessage> messages;
  int max_tokens = 2048;
  // Free-form labels a mock may key on (e.g. "difficulty").
  std::map<std::string, std::string> labels;
};

struct BackendResponse {
  std::string text;
  std::int64_t tokens_prompt = 0;
  std::int64_t tokens_completion = 0;
  double ttft_ms = 0.0;
  double latency_ms = 0.0;
};

using ChunkSink = std::function<void(const std::string&)>;

class BackendClient {
 public:
  virtual ~BackendClient() = default;
  virtual std::string backend_id() const = 0;
  /// Blocking completion. `on_chunk` (optional) receives text increments.
  virtual BackendResponse complete(const BackendRequest& req, const ChunkSink& on_chunk = {}) = 0;
};

/// Rough count used when a backend reports no usage: 4 characters per token.
inline std::int64_t estimate_tokens(std::string_view text) {
  return static_cast<std::int64_t>((text.size() + 3) / 4);
}

inline std::int64_t estimate_prompt_tokens(const std::vector<ChatMessage>& messages) {
  std::int64_t n = 0;
  for (const auto& m : messages) n += 4 + estimate_tokens(m.content);
  return n;
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

struct MockTiming {
  std::int64_t completion_tokens = 0;
  double total_ms = 0.0;
};

struct MockBehavior {
  double ttft_ms = 150.0;
  double ms_per_token = 20.0;
  std::int64_t completion_tokens = 300;
  std::optional<std::int64_t> prompt_tokens;  // fixed prompt usage; estimated when unset
  // Per-label overrides, keyed by labels["difficulty"].
  std::map<std::string, MockTiming> by_difficulty;
  // Calls 1..fail_first fail; afterwards each call fails with fail_rate.
  int fail_first = 0;
  double fail_rate = 0.0;
  bool real_time = false;  // sleep for the simulated latency
  double time_scale = 1.0;
  std::uint64_t seed = 7;
  // Optional scripted reply; the default echoes a Socratic prompt.
  std::function<std::string(const BackendRequest&)> reply;
};

inline MockBehavior mock_behavior_from_json(const json& j) {
  MockBehavior b;
  b.ttft_ms = j.value("ttft_ms", b.ttft_ms);
  b.ms_per_token = j.value("ms_per_token", b.ms_per_token);
  b.completion_tokens = j.value("completion_tokens", b.completion_tokens);
  if (j.contains("prompt_tokens")) b.prompt_tokens = j.at("prompt_tokens").get<std::int64_t>();
  if (j.contains("by_difficulty")) {
    for (const auto& [k, v] : j.at("by_difficulty").items()) {
      b.by_difficulty[k] = {v.at("completion_tokens").get<std::int64_t>(), v.at("total_ms").get<double>()};
    }
  }
  b.fail_first = j.value("fail_first", 0);
  b.fail_rate = j.value("fail_rate", 0.0);
  b.real_time = j.value("real_time", false);
  b.time_scale = j.value("time_scale", 1.0);
  b.seed = j.value("seed", b.seed);
  return b;
}

inline std::string default_mock_reply(const BackendRequest& req) {
  std::string last;
  for (auto it = req.messages.rbegin(); it != req.messages.rend(); ++it) {
    if (it->role == "user") {
      last = it->content;
      break;
    }
  }
  if (last.size() > 80) last = last.substr(0, 80);
  return "Let's work through this together. You asked about \"" + last +
         "\". Which measurement did you take first, and what did you expect to see? "
         "Check the instrument range before changing the circuit.";
}

class MockBackend : public BackendClient {
 public:
  MockBackend(std::string id, MockBehavior behavior) : id_(std::move(id)), b_(std::move(behavior)), rng_(b_.seed) {}

  std::string backend_id() const override { return id_; }

  BackendResponse complete(const BackendRequest& req, const ChunkSink& on_chunk = {}) override {
    {
      std::lock_guard lock(mu_);
      ++calls_;
      if (calls_ <= b_.fail_first || (b_.fail_rate > 0.0 && rng_.bernoulli(b_.fail_rate))) {
        ++failures_;
        throw BackendError(id_ + ": injected failure");
      }
    }
    BackendResponse r;
    r.text = b_.reply ? b_.reply(req) : default_mock_reply(req);
    r.tokens_prompt = b_.prompt_tokens ? *b_.prompt_tokens : estimate_prompt_tokens(req.messages);
    r.ttft_ms = b_.ttft_ms;
    r.tokens_completion = b_.completion_tokens;
    r.latency_ms = b_.ttft_ms + b_.ms_per_token * static_cast<double>(r.tokens_completion);
    if (auto d = req.labels.find("difficulty"); d != req.labels.end()) {
      if (auto t = b_.by_difficulty.find(d->second); t != b_.by_difficulty.end()) {
        r.tokens_completion = t->second.completion_tokens;
        r.latency_ms = t->second.total_ms;
      }
    }
    if (b_.real_time) sleep_ms(r.ttft_ms);
    if (on_chunk) {
      // Word-sized increments; the stream time is spread evenly across them.
      std::vector<std::string> pieces;
      std::size_t pos = 0;
      while (pos < r.text.size()) {
        auto next = r.text.find(' ', pos + 1);
        if (next == std::string::npos) next = r.text.size();
        pieces.push_back(r.text.substr(pos, next - pos));
        pos = next;
      }
      const double per = pieces.empty() ? 0.0 : (r.latency_ms - r.ttft_ms) / static_cast<double>(pieces.size());
      for (const auto& p : pieces) {
        on_chunk(p);
        if (b_.real_time) sleep_ms(per);
      }
    } else if (b_.real_time) {
      sleep_ms(r.latency_ms - r.ttft_ms);
    }
    return r;
  }

  int calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }
  int failures() const {
    std::lock_guard lock(mu_);
    return failures_;
  }
  MockBehavior& behavior() { return b_; }

 private:
  void sleep_ms(double ms) const {
    if (ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms * b_.time_scale));
  }

  std::string id_;
  MockBehavior b_;
  mutable std::mutex mu_;
  Rng rng_;
  int calls_ = 0;
  int failures_ = 0;
};

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend
// ---------------------------------------------------------------------------

struct HttpBackendConfig {
  std::string base_url;  // e.g. http://127.0.0.1:8000
  std::string api_key_env;
  double timeout_s = 60.0;
};

class OpenAICompatibleBackend : public BackendClient {
 public:
  OpenAICompatibleBackend(std::string id, HttpBackendConfig cfg) : id_(std::move(id)), cfg_(std::move(cfg)) {}

  std::string backend_id() const override { return id_; }

  BackendResponse complete(const BackendRequest& req, const ChunkSink& on_chunk = {}) override {
    httplib::Client cli(cfg_.base_url);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    cli.set_connection_timeout(secs);
    cli.set_read_timeout(secs);
    httplib::Headers headers;
    if (!cfg_.api_key_env.empty()) {
      if (const char* k = std::getenv(cfg_.api_key_env.c_str())) headers.emplace("Authorization", std::string("Bearer ") + k);
    }
    json msgs = json::array();
    for (const auto& m : req.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    json body = {{"model", req.model_id}, {"messages", msgs}, {"max_tokens", req.max_tokens}, {"stream", false}};
    const auto t0 = std::chrono::steady_clock::now();
    auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!res) throw BackendError(id_ + ": " + httplib::to_string(res.error()));
    if (res->status >= 500 || res->status == 429) throw BackendError(id_ + ": HTTP " + std::to_string(res->status));
    if (res->status != 200) throw BackendError(id_ + ": HTTP " + std::to_string(res->status), false);
    BackendResponse r;
    try {
      auto j = json::parse(res->body);
      r.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (j.contains("usage")) {
        r.tokens_prompt = j["usage"].value("prompt_tokens", std::int64_t{0});
        r.tokens_completion = j["usage"].value("completion_tokens", std::int64_t{0});
      }
    } catch (const json::exception& e) {
      throw BackendError(id_ + ": malformed response: " + e.what());
    }
    if (r.tokens_prompt == 0) r.tokens_prompt = estimate_prompt_tokens(req.messages);
    if (r.tokens_completion == 0) r.tokens_completion = estimate_tokens(r.text);
    // Non-streaming upstream: first token time is unknown, report the full latency.
    r.ttft_ms = ms;
    r.latency_ms = ms;
    if (on_chunk) on_chunk(r.text);
    return r;
  }

 private:
  std::string id_;
  HttpBackendConfig cfg_;
};

/// {"backends": {model_id: {"kind": "mock", ...MockBehavior} | {"kind": "http", "base_url": ..., "api_key_env": ...}}}
inline std::map<std::string, std::shared_ptr<BackendClient>> backends_from_json(const json& j) {
  std::map<std::string, std::shared_ptr<BackendClient>> out;
  for (const auto& [model, cfg] : j.at("backends").items()) {
    const auto kind = cfg.value("kind", std::string("mock"));
    if (kind == "mock") {
      out[model] = std::make_shared<MockBackend>(model, mock_behavior_from_json(cfg));
    } else if (kind == "http") {
      out[model] = std::make_shared<OpenAICompatibleBackend>(
          model, HttpBackendConfig{cfg.at("base_url").get<std::string>(), cfg.value("api_key_env", std::string()),
                                   cfg.value("timeout_s", 60.0)});
    } else {
      throw ConfigError("backend '" + model + "': unknown kind '" + kind + "'");
    }
  }
  return out;
}

}  // namespace labroute
