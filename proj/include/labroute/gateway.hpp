#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "labroute/backend.hpp"
#include "labroute/overlay.hpp"
#include "labroute/router_http.hpp"
#include "labroute/telemetry.hpp"

namespace labroute {

struct GatewayConfig {
  int max_retries = 1;  // per backend, before failing over
  double approval_wait_s = 60.0;
  double approval_poll_ms = 200.0;
  PriceBook prices = PriceBook::defaults();
  PolicyMode fallback_policy = PolicyMode::P0;  // recorded when the router is down
  std::string shared_secret;                    // empty: no client auth
};

/// One student turn as received by the gateway.
struct ChatTurn {
  std::string session_id;
  std::string lab_id;
  std::string step_id;
  std::vector<ChatMessage> messages;
  std::optional<HintLevel> requested_hint;
  std::string justification;
  std::string cohort_id;
  bool integrity_flag = false;
  int scpi_retries = 0;
  int range_changes = 0;
  bool step_pass = false;
  bool stream = false;
  std::map<std::string, std::string> labels;
};

inline std::string last_user_text(const std::vector<ChatMessage>& messages) {
  for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
    if (it->role == "user") return it->content;
  }
  return {};
}

/// OpenAI-style body plus routing fields, either top level or under "metadata".
inline ChatTurn chat_turn_from_json(const json& body) {
  if (!body.is_object()) throw RequestError("<body>", "request body must be an object");
  const json meta = body.contains("metadata") && body.at("metadata").is_object() ? body.at("metadata") : json::object();
  auto field = [&](const char* k) -> const json* {
    if (body.contains(k)) return &body.at(k);
    if (meta.contains(k)) return &meta.at(k);
    return nullptr;
  };
  auto str = [&](const char* k, bool required) -> std::string {
    const json* v = field(k);
    if (v == nullptr || v->is_null()) {
      if (required) throw RequestError(k, std::string("missing field '") + k + "'");
      return {};
    }
    if (!v->is_string()) throw RequestError(k, std::string("field '") + k + "' must be a string");
    return v->get<std::string>();
  };
  ChatTurn t;
  t.session_id = str("session_id", true);
  t.lab_id = str("lab_id", true);
  t.step_id = str("step_id", true);
  if (!body.contains("messages") || !body.at("messages").is_array() || body.at("messages").empty()) {
    throw RequestError("messages", "messages must be a non-empty array");
  }
  for (const auto& m : body.at("messages")) {
    if (!m.is_object() || !m.contains("role") || !m.contains("content") || !m.at("content").is_string()) {
      throw RequestError("messages", "each message needs string role and content");
    }
    t.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
  }
  if (auto h = str("requested_hint", false); !h.empty()) {
    try {
      t.requested_hint = parse_hint_level(h);
    } catch (const ConfigError&) {
      throw RequestError("requested_hint", "requested_hint must be L0..L3");
    }
  }
  t.justification = str("justification", false);
  t.cohort_id = str("cohort_id", false);
  auto flag = [&](const char* k) {
    const json* v = field(k);
    return v != nullptr && v->is_boolean() && v->get<bool>();
  };
  auto num = [&](const char* k) {
    const json* v = field(k);
    return v != nullptr && v->is_number_integer() ? v->get<int>() : 0;
  };
  t.integrity_flag = flag("integrity_flag");
  t.step_pass = flag("step_pass");
  t.scpi_retries = num("scpi_retries");
  t.range_changes = num("range_changes");
  t.stream = body.value("stream", false);
  return t;
}

struct PreparedTurn {
  RouteRequest request;
  RoutePlan plan;
  OverlayApplication overlay;
  std::string trace_id;
  double plan_ms = 0.0;
  bool router_down = false;
};

struct TurnResult {
  std::string text;
  RoutePlan plan;
  TelemetryEvent event;
};

class Gateway {
 public:
  Gateway(RouterService& router, std::map<std::string, std::shared_ptr<BackendClient>> backends, TraceStore& trace,
          GatewayConfig cfg = {})
      : router_(router), backends_(std::move(backends)), trace_(trace), cfg_(std::move(cfg)) {
    refresh_overlays();
  }

  const GatewayConfig& config() const { return cfg_; }

  void refresh_overlays() {
    auto o = router_.overlays();
    std::lock_guard lock(mu_);
    if (o) set_overlays_locked(std::move(*o));
  }

  /// Validates and pushes the overlay set to the router, then caches it.
  void update_overlays(const OverlaySet& overlays) {
    auto v = validate_overlays(overlays);
    if (!v.empty()) throw ConfigError("overlays rejected: " + v.front().field + " " + v.front().rule);
    router_.update_overlays(overlays);
    std::lock_guard lock(mu_);
    set_overlays_locked(overlays);
  }

  /// Plans the turn and applies the overlay. Blocks while an L3 approval is
  /// pending, up to approval_wait_s.
  PreparedTurn prepare(const ChatTurn& turn) {
    PreparedTurn p;
    auto& req = p.request;
    req.session_id = turn.session_id;
    req.lab_id = turn.lab_id;
    req.step_id = turn.step_id;
    req.query_text = last_user_text(turn.messages);
    req.requested_hint = turn.requested_hint;
    req.justification = turn.justification;
    req.cohort_id = turn.cohort_id;
    req.integrity_flag = turn.integrity_flag;

    const auto t0 = std::chrono::steady_clock::now();
    try {
      p.plan = router_.plan(req);
      if (p.plan.requires_approval) p.plan = await_approval(req, p.plan);
    } catch (const RouterUnavailable&) {
      p.router_down = true;
      p.plan = unreachable_plan(req);
    }
    p.plan_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    {
      std::lock_guard lock(mu_);
      auto& last = last_turn_[req.session_id];
      if (p.router_down) p.plan.turn_index = last + 1;
      last = std::max(last, p.plan.turn_index);
      p.trace_id = sha256_hex(req.session_id + "|" + std::to_string(p.plan.turn_index) + "|" +
                              std::to_string(++trace_seq_) + "|" + std::to_string(wall_clock_s()))
                       .substr(0, 16);
    }
    {
      std::lock_guard lock(mu_);
      p.overlay = apply_overlay(turn.messages, overlay_def(p.plan.overlay_id), p.plan.granted_hint);
    }
    return p;
  }

  /// Calls the backend (one retry, then local failover), settles the budget,
  /// runs the guardrail and appends telemetry.
  TurnResult execute(PreparedTurn p, const ChatTurn& turn, const ChunkSink& on_chunk = {}) {
    BackendRequest breq;
    breq.messages = p.overlay.messages;
    breq.labels = turn.labels;
    BackendResponse resp;
    bool served = false;
    std::string last_error;
    for (int pass = 0; pass < 2 && !served; ++pass) {
      breq.model_id = p.plan.model_id;
      auto backend = backend_for(p.plan.model_id);
      for (int attempt = 0; backend && attempt <= cfg_.max_retries && !served; ++attempt) {
        try {
          resp = backend->complete(breq, on_chunk);
          served = true;
        } catch (const BackendError& e) {
          last_error = e.what();
          if (!e.retryable) break;
        }
      }
      if (!backend) last_error = "no backend for model '" + p.plan.model_id + "'";
      if (!served && pass == 0 && p.plan.tier == Tier::Premium) {
        p.plan = p.router_down ? local_plan(p.plan, "backend_failover") : router_.failover(p.plan, "backend_failover");
        {
          std::lock_guard lock(mu_);
          p.overlay = apply_overlay(turn.messages, overlay_def(p.plan.overlay_id), p.plan.granted_hint);
        }
        breq.messages = p.overlay.messages;
      } else if (!served) {
        break;
      }
    }
    if (!served) {
      if (!p.router_down) router_.abort(p.plan);
      throw BackendError("all backends failed: " + last_error, false);
    }

    const MicroUsd cost = cfg_.prices.contains(p.plan.model_id)
                              ? token_cost_micro(p.plan.model_id, resp.tokens_prompt, resp.tokens_completion, cfg_.prices)
                              : 0;
    if (!p.router_down) router_.complete(p.plan, cost);

    GuardrailVerdict verdict;
    {
      std::lock_guard lock(mu_);
      const auto* eval = overlay_def(p.plan.evaluation_overlay_id);
      static const std::vector<std::regex> kNone;
      verdict = overlay_guardrail(resp.text, eval, p.plan.granted_hint,
                                  p.plan.strict_guardrail ? patterns_locked(turn.lab_id) : kNone);
    }

    TelemetryEvent e = event_from_plan(p.plan, p.request);
    e.overlay_fingerprint = p.overlay.fingerprint;
    e.tokens_prompt = resp.tokens_prompt;
    e.tokens_completion = resp.tokens_completion;
    e.latency_ms = p.plan_ms + resp.latency_ms;
    e.ttft_ms = p.plan_ms + resp.ttft_ms;
    e.plan_ms = p.plan_ms;
    e.cost_micro = cost;
    e.guardrail_result = verdict.result;
    e.trace_id = p.trace_id;
    e.ts_ms = static_cast<std::int64_t>(wall_clock_s() * 1000.0);
    e.scpi_retries = turn.scpi_retries;
    e.range_changes = turn.range_changes;
    e.step_pass = turn.step_pass;
    if (e.cohort_id.empty()) e.cohort_id = turn.session_id;
    e = trace_.append(std::move(e));
    return {resp.text, p.plan, e};
  }

  TurnResult handle_turn(const ChatTurn& turn, const ChunkSink& on_chunk = {}) {
    return execute(prepare(turn), turn, on_chunk);
  }

 private:
  void set_overlays_locked(OverlaySet o) {
    overlays_ = std::move(o);
    compiled_.clear();
  }

  const OverlayDefinition* overlay_def(const std::string& id) {
    if (id.empty()) return nullptr;
    auto it = overlays_.overlays.find(id);
    return it == overlays_.overlays.end() ? nullptr : &it->second;
  }

  const std::vector<std::regex>& patterns_locked(const std::string& lab) {
    auto it = compiled_.find(lab);
    if (it == compiled_.end()) it = compiled_.emplace(lab, compile_patterns(overlays_.patterns_for(lab))).first;
    return it->second;
  }

  std::shared_ptr<BackendClient> backend_for(const std::string& model) const {
    auto it = backends_.find(model);
    return it == backends_.end() ? nullptr : it->second;
  }

  RoutePlan await_approval(RouteRequest req, RoutePlan held) {
    req.approval_id = held.approval_id;
    req.turn_index = held.turn_index;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(cfg_.approval_wait_s);
    while (std::chrono::steady_clock::now() < deadline) {
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(cfg_.approval_poll_ms));
      auto next = router_.plan(req);
      if (!next.requires_approval) return next;
    }
    req.approval_timeout = true;
    return router_.plan(req);
  }

  RoutePlan local_plan(RoutePlan plan, const std::string& why) const {
    plan.model_id = cfg_.prices.model_for(Tier::Local);
    plan.tier = Tier::Local;
    plan.fallback = true;
    plan.route_why += ";" + why;
    return plan;
  }

  RoutePlan unreachable_plan(const RouteRequest& req) const {
    RoutePlan plan;
    plan.session_id = req.session_id;
    plan.model_id = cfg_.prices.model_for(Tier::Local);
    plan.tier = Tier::Local;
    plan.requested_hint = req.requested_hint.value_or(HintLevel::L1);
    plan.granted_hint = HintLevel::L0;
    plan.fallback = true;
    plan.route_why = "router_unreachable";
    plan.canonical_reason = "router unreachable";
    plan.policy = cfg_.fallback_policy;
    return plan;
  }

  RouterService& router_;
  std::map<std::string, std::shared_ptr<BackendClient>> backends_;
  TraceStore& trace_;
  GatewayConfig cfg_;
  std::mutex mu_;
  OverlaySet overlays_;
  std::map<std::string, std::vector<std::regex>> compiled_;
  std::map<std::string, std::int64_t> last_turn_;
  std::uint64_t trace_seq_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP front end
// ---------------------------------------------------------------------------

class GatewayServer {
 public:
  explicit GatewayServer(Gateway& gw) : gw_(gw) { install(); }

  httplib::Server& http() { return srv_; }
  int bind(const std::string& host, int port) {
    if (port == 0) return srv_.bind_to_any_port(host);
    return srv_.bind_to_port(host, port) ? port : -1;
  }
  bool listen_after_bind() { return srv_.listen_after_bind(); }
  void stop() { srv_.stop(); }

 private:
  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void set_route_headers(httplib::Response& res, const RoutePlan& plan, const std::string& fingerprint,
                                const std::string& trace_id) {
    res.set_header("X-Route-Why", plan.route_why);
    res.set_header("X-Canonical-Ids", join(plan.canonical_ids, ","));
    res.set_header("X-Overlay-Fingerprint", fingerprint);
    res.set_header("X-Trace-Id", trace_id);
  }

  static json completion_body(const TurnResult& r) {
    return {{"id", "chatcmpl-" + r.event.trace_id},
            {"object", "chat.completion"},
            {"model", r.plan.model_id},
            {"choices", json::array({{{"index", 0},
                                      {"message", {{"role", "assistant"}, {"content", r.text}}},
                                      {"finish_reason", "stop"}}})},
            {"usage",
             {{"prompt_tokens", r.event.tokens_prompt},
              {"completion_tokens", r.event.tokens_completion},
              {"total_tokens", r.event.tokens_prompt + r.event.tokens_completion}}},
            {"route",
             {{"granted_hint", to_string(r.plan.granted_hint)},
              {"tier", to_string(r.plan.tier)},
              {"guardrail_result", to_string(r.event.guardrail_result)},
              {"turn_index", r.event.turn_index}}}};
  }

  bool authorized(const httplib::Request& req) const {
    const auto& secret = gw_.config().shared_secret;
    return secret.empty() || req.get_header_value("Authorization") == "Bearer " + secret;
  }

  void install() {
    srv_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"status", "ok"}}); });

    srv_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req)) return send_json(res, 401, {{"error", "unauthorized"}});
      ChatTurn turn;
      PreparedTurn prepared;
      try {
        turn = chat_turn_from_json(json::parse(req.body));
        prepared = gw_.prepare(turn);
      } catch (const json::exception& e) {
        return send_json(res, 422, {{"error", "invalid_json"}, {"message", e.what()}});
      } catch (const RequestError& e) {
        return send_json(res, 422, {{"error", "invalid_request"}, {"field", e.field()}, {"message", e.what()}});
      }
      set_route_headers(res, prepared.plan, prepared.overlay.fingerprint, prepared.trace_id);
      if (!turn.stream) {
        try {
          auto r = gw_.execute(std::move(prepared), turn);
          // Failover may have changed the plan after the headers were set.
          set_route_headers(res, r.plan, r.event.overlay_fingerprint, r.event.trace_id);
          send_json(res, 200, completion_body(r));
        } catch (const BackendError& e) {
          send_json(res, 503, {{"error", "backend_unavailable"}, {"message", e.what()}});
        }
        return;
      }
      auto shared_turn = std::make_shared<ChatTurn>(std::move(turn));
      auto shared_prep = std::make_shared<PreparedTurn>(std::move(prepared));
      res.set_chunked_content_provider("text/event-stream", [this, shared_turn, shared_prep](std::size_t,
                                                                                             httplib::DataSink& sink) {
        auto emit = [&](const json& j) {
          const std::string line = "data: " + j.dump() + "\n\n";
          sink.write(line.data(), line.size());
        };
        try {
          auto r = gw_.execute(*shared_prep, *shared_turn, [&](const std::string& piece) {
            emit({{"object", "chat.completion.chunk"},
                  {"choices", json::array({{{"index", 0}, {"delta", {{"content", piece}}}}})}});
          });
          emit({{"object", "chat.completion.chunk"},
                {"choices", json::array({{{"index", 0}, {"delta", json::object()}, {"finish_reason", "stop"}}})},
                {"route", completion_body(r).at("route")}});
        } catch (const BackendError& e) {
          emit({{"error", "backend_unavailable"}, {"message", e.what()}});
        }
        const std::string done = "data: [DONE]\n\n";
        sink.write(done.data(), done.size());
        sink.done();
        return true;
      });
    });

    srv_.Post("/admin/overlays", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req)) return send_json(res, 401, {{"error", "unauthorized"}});
      try {
        gw_.update_overlays(overlays_from_json(json::parse(req.body)));
        send_json(res, 200, {{"ok", true}});
      } catch (const json::exception& e) {
        send_json(res, 422, {{"error", "invalid_json"}, {"message", e.what()}});
      } catch (const ConfigError& e) {
        send_json(res, 422, {{"error", "invalid_overlays"}, {"message", e.what()}});
      } catch (const RouterUnavailable& e) {
        send_json(res, 503, {{"error", "router_unavailable"}, {"message", e.what()}});
      }
    });
  }

  Gateway& gw_;
  httplib::Server srv_;
};

}  // namespace labroute
