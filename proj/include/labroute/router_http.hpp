#pragma once

#include <atomic>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "labroute/router.hpp"

namespace labroute {

inline json to_json(const BudgetState& b) {
  json j = {{"session_id", b.session_id},
            {"lab_id", b.lab_id},
            {"total_budget_usd", micro_to_usd(b.total_budget_micro)},
            {"spent_usd", micro_to_usd(b.spent_micro)},
            {"remaining_usd", micro_to_usd(b.remaining())},
            {"overrun_usd", micro_to_usd(b.overrun_micro)},
            {"l3_granted_count", b.l3_granted_count},
            {"l3_max", b.l3_max}};
  j["reserved_usd"] = b.reservation ? json(micro_to_usd(b.reservation->micro)) : json(nullptr);
  return j;
}

inline json to_json(const ApprovalRequest& r) {
  return {{"approval_id", r.approval_id},
          {"session_id", r.session_id},
          {"requested_level", to_string(r.requested_level)},
          {"justification", r.justification},
          {"enqueued_at_ms", r.enqueued_at_ms},
          {"decided_at_ms", r.decided_at_ms},
          {"decision", to_string(r.decision)},
          {"wait_ms", r.wait_ms},
          {"consumed", r.consumed}};
}

struct RouterUnavailable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// What the gateway needs from a router, in process or over HTTP.
class RouterService {
 public:
  virtual ~RouterService() = default;
  virtual RoutePlan plan(const RouteRequest& req) = 0;
  virtual void complete(const RoutePlan& plan, MicroUsd actual_cost_micro) = 0;
  virtual void abort(const RoutePlan& plan) = 0;
  virtual RoutePlan failover(const RoutePlan& plan, const std::string& why) = 0;
  virtual std::optional<OverlaySet> overlays() = 0;
  virtual void update_overlays(const OverlaySet& overlays) = 0;
};

class InProcessRouter : public RouterService {
 public:
  explicit InProcessRouter(Router& r) : r_(r) {}
  RoutePlan plan(const RouteRequest& req) override { return r_.plan(req); }
  void complete(const RoutePlan& p, MicroUsd cost) override { r_.complete_turn(p, cost); }
  void abort(const RoutePlan& p) override { r_.abort_turn(p); }
  RoutePlan failover(const RoutePlan& p, const std::string& why) override { return r_.failover_to_local(p, why); }
  std::optional<OverlaySet> overlays() override { return r_.snapshot()->overlays; }
  void update_overlays(const OverlaySet& o) override { r_.update_overlays(o); }

 private:
  Router& r_;
};

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

struct RouterServerConfig {
  std::string shared_secret;  // empty disables auth
  std::string plan_log;       // JSONL of every plan, optional
};

class RouterServer {
 public:
  RouterServer(Router& router, RouterServerConfig cfg) : router_(router), cfg_(std::move(cfg)) {
    if (!cfg_.plan_log.empty()) plan_out_.open(cfg_.plan_log, std::ios::app);
    install();
  }

  httplib::Server& http() { return srv_; }
  void set_ready(bool ready) { ready_ = ready; }

  /// Binds to an ephemeral port when port == 0. Returns the bound port.
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

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg,
                         const std::string& field = {}) {
    json j = {{"error", code}, {"message", msg}};
    if (!field.empty()) j["field"] = field;
    send_json(res, status, j);
  }

  bool authorized(const httplib::Request& req) const {
    if (cfg_.shared_secret.empty()) return true;
    return req.get_header_value("Authorization") == "Bearer " + cfg_.shared_secret ||
           req.get_header_value("X-Route-Secret") == cfg_.shared_secret;
  }

  template <class F>
  httplib::Server::Handler guarded(F f) {
    return [this, f](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req)) return send_error(res, 401, "unauthorized", "missing or invalid shared secret");
      try {
        f(req, res);
      } catch (const RequestError& e) {
        send_error(res, 422, "invalid_request", e.what(), e.field());
      } catch (const ApprovalError& e) {
        const int status = e.code() == "unknown_approval" ? 404 : e.code() == "already_decided" ? 409 : 422;
        send_error(res, status, e.code(), e.what());
      } catch (const ConfigError& e) {
        send_error(res, 422, "invalid_config", e.what());
      } catch (const json::exception& e) {
        send_error(res, 422, "invalid_json", e.what());
      }
    };
  }

  static json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::exception& e) {
      throw RequestError("<body>", std::string("malformed JSON: ") + e.what());
    }
  }

  void log_plan(const RoutePlan& p) {
    if (!plan_out_.is_open()) return;
    std::lock_guard lock(log_mu_);
    plan_out_ << to_json(p).dump() << '\n';
    plan_out_.flush();
  }

  void install() {
    srv_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, ready_ ? 200 : 503, {{"status", ready_ ? "ok" : "unavailable"}});
    });

    srv_.Post("/route/plan", guarded([this](const httplib::Request& req, httplib::Response& res) {
                if (!ready_) return send_error(res, 503, "unavailable", "router not ready");
                auto plan = router_.plan(request_from_json(parse_body(req)));
                log_plan(plan);
                res.set_header("X-Route-Why", plan.route_why);
                res.set_header("X-Canonical-Ids", join(plan.canonical_ids, ","));
                std::vector<std::string> scores;
                for (double s : plan.canonical_scores) scores.push_back(format_score(s));
                res.set_header("X-Canonical-Scores", join(scores, ","));
                send_json(res, 200, to_json(plan));
              }));

    srv_.Post("/route/settle", guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                auto plan = plan_from_json(body.at("plan"));
                const auto outcome = body.value("outcome", std::string("complete"));
                if (outcome == "complete") {
                  router_.complete_turn(plan, body.value("actual_cost_micro", MicroUsd{0}));
                  send_json(res, 200, {{"ok", true}});
                } else if (outcome == "abort") {
                  router_.abort_turn(plan);
                  send_json(res, 200, {{"ok", true}});
                } else if (outcome == "failover") {
                  auto next = router_.failover_to_local(plan, body.value("why", std::string("backend_failover")));
                  log_plan(next);
                  send_json(res, 200, to_json(next));
                } else {
                  throw RequestError("outcome", "outcome must be complete, abort or failover");
                }
              }));

    srv_.Get("/admin/policy", guarded([this](const httplib::Request&, httplib::Response& res) {
               auto snap = router_.snapshot();
               send_json(res, 200, {{"policy", to_json(snap->policy)}, {"policy_hash", snap->policy_hash}});
             }));

    srv_.Post("/admin/policy", guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                PolicyConfig p;
                try {
                  p = policy_from_json(body.contains("policy") ? body.at("policy") : body);
                } catch (const json::exception& e) {
                  throw ConfigError(std::string("policy: ") + e.what());
                }
                auto v = validate_policy(p);
                if (!v.empty()) {
                  json errs = json::array();
                  for (const auto& x : v) errs.push_back({{"field", x.field}, {"rule", x.rule}});
                  return send_json(res, 422, {{"error", "invalid_policy"}, {"violations", errs}});
                }
                auto action = router_.update_policy(p);
                send_json(res, 200, {{"policy_hash", router_.snapshot()->policy_hash}, {"action_id", action}});
              }));

    srv_.Get("/admin/approvals", guarded([this](const httplib::Request& req, httplib::Response& res) {
               auto list = req.has_param("all") ? router_.approvals().all() : router_.approvals().pending();
               json arr = json::array();
               for (const auto& a : list) arr.push_back(to_json(a));
               send_json(res, 200, {{"approvals", arr}});
             }));

    srv_.Post(R"(/admin/approvals/([^/]+)/decision)",
              guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                if (!body.contains("decision") || !body.at("decision").is_string()) {
                  throw RequestError("decision", "decision must be 'approve' or 'deny'");
                }
                const auto decision = parse_approval_decision(body.at("decision").get<std::string>());
                const auto now_ms = body.value("decided_at_ms", static_cast<std::int64_t>(wall_clock_s() * 1000.0));
                auto r = router_.decide_approval(req.matches[1].str(), decision, now_ms);
                send_json(res, 200, to_json(r));
              }));

    srv_.Post(R"(/admin/boost/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto id = router_.boost(req.matches[1].str());
                send_json(res, 200, {{"action_id", id}});
              }));

    srv_.Post(R"(/admin/freeze/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                auto snap = router_.snapshot();
                const auto model = body.value("model", snap->prices.model_for(Tier::Premium));
                const double ttl = body.value("ttl_s", 0.0);
                const int turns = body.value("turns", 0);
                auto id = router_.freeze(req.matches[1].str(), model, ttl, turns);
                send_json(res, 200, {{"action_id", id}});
              }));

    srv_.Delete(R"(/admin/freeze/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  router_.clear_session_freeze(req.matches[1].str());
                  send_json(res, 200, {{"ok", true}});
                }));

    srv_.Get("/admin/budgets", guarded([this](const httplib::Request&, httplib::Response& res) {
               json arr = json::array();
               for (const auto& b : router_.budgets()) arr.push_back(to_json(b));
               send_json(res, 200, {{"budgets", arr}});
             }));

    srv_.Post(R"(/admin/budgets/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                router_.set_budget(req.matches[1].str(), usd_to_micro(body.at("total_budget_usd").get<double>()));
                send_json(res, 200, {{"ok", true}});
              }));

    srv_.Post("/admin/overlay_swap", guarded([this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                auto id = router_.swap_overlay(body.at("overlay_id").get<std::string>());
                send_json(res, 200, {{"action_id", id}});
              }));

    srv_.Get("/admin/overlays", guarded([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, to_json(router_.snapshot()->overlays));
             }));

    srv_.Post("/admin/overlays", guarded([this](const httplib::Request& req, httplib::Response& res) {
                router_.update_overlays(overlays_from_json(parse_body(req)));
                send_json(res, 200, {{"ok", true}});
              }));

    srv_.Get("/admin/actions", guarded([this](const httplib::Request&, httplib::Response& res) {
               json arr = json::array();
               for (const auto& a : router_.actions()) arr.push_back(to_json(a));
               send_json(res, 200, {{"actions", arr}});
             }));

    srv_.Get("/admin/audit", guarded([this](const httplib::Request&, httplib::Response& res) {
               json arr = json::array();
               for (const auto& a : router_.audit_log()) arr.push_back(to_json(a));
               send_json(res, 200, {{"audit", arr}});
             }));
  }

  Router& router_;
  RouterServerConfig cfg_;
  httplib::Server srv_;
  std::atomic<bool> ready_{true};
  std::mutex log_mu_;
  std::ofstream plan_out_;
};

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

class HttpRouterClient : public RouterService {
 public:
  HttpRouterClient(std::string base_url, std::string secret, double timeout_s = 5.0)
      : base_(std::move(base_url)), secret_(std::move(secret)), timeout_s_(timeout_s) {}

  RoutePlan plan(const RouteRequest& req) override { return plan_from_json(post("/route/plan", to_json(req))); }

  void complete(const RoutePlan& p, MicroUsd cost) override {
    post("/route/settle", {{"plan", to_json(p)}, {"outcome", "complete"}, {"actual_cost_micro", cost}});
  }
  void abort(const RoutePlan& p) override { post("/route/settle", {{"plan", to_json(p)}, {"outcome", "abort"}}); }
  RoutePlan failover(const RoutePlan& p, const std::string& why) override {
    return plan_from_json(post("/route/settle", {{"plan", to_json(p)}, {"outcome", "failover"}, {"why", why}}));
  }
  void update_overlays(const OverlaySet& o) override { post("/admin/overlays", to_json(o)); }
  std::optional<OverlaySet> overlays() override {
    try {
      return overlays_from_json(get("/admin/overlays"));
    } catch (const RouterUnavailable&) {
      return std::nullopt;
    }
  }

 private:
  httplib::Client client() const {
    httplib::Client cli(base_);
    const auto sec = static_cast<time_t>(timeout_s_);
    const auto usec = static_cast<time_t>((timeout_s_ - static_cast<double>(sec)) * 1e6);
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    return cli;
  }

  httplib::Headers headers() const {
    httplib::Headers h;
    if (!secret_.empty()) h.emplace("Authorization", "Bearer " + secret_);
    return h;
  }

  json handle(const httplib::Result& res) const {
    if (!res) throw RouterUnavailable("router unreachable: " + httplib::to_string(res.error()));
    if (res->status == 422) {
      auto j = json::parse(res->body, nullptr, false);
      const std::string field = j.is_object() ? j.value("field", std::string("<body>")) : "<body>";
      throw RequestError(field, j.is_object() ? j.value("message", res->body) : res->body);
    }
    if (res->status != 200) throw RouterUnavailable("router returned HTTP " + std::to_string(res->status));
    return json::parse(res->body);
  }

  json post(const std::string& path, const json& body) const {
    auto cli = client();
    return handle(cli.Post(path, headers(), body.dump(), "application/json"));
  }
  json get(const std::string& path) const {
    auto cli = client();
    return handle(cli.Get(path, headers()));
  }

  std::string base_;
  std::string secret_;
  double timeout_s_;
};

}  // namespace labroute
