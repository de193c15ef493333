#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/core.hpp"
#include "labroute/embedding.hpp"
#include "labroute/governance.hpp"
#include "labroute/overlay.hpp"
#include "labroute/telemetry.hpp"

namespace labroute {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct HeuristicConfig {
  int token_threshold = 40;
  // Each keyword hit adds this many tokens to the complexity score.
  int keyword_weight = 8;
  std::vector<std::string> complexity_keywords = {
      "why",        "diagnose",  "derive",       "oscillat", "ringing", "non-ideal", "nonlinear",
      "cascade",    "transient", "troubleshoot", "unstable", "fit",     "residual",  "explain"};
};

struct RouterConfig {
  double tau = 0.82;
  int top_k = 3;
  double cache_ttl_s = 300.0;
  HeuristicConfig heuristic;
  std::string privacy_mode = "full";  // full | hashed | off
  std::string privacy_salt = "labroute-privacy-salt";
  // Cost estimate: prompt tokens = base + words in the query; completion
  // tokens by granted hint level.
  std::int64_t est_prompt_tokens_base = 600;
  std::array<std::int64_t, 4> est_completion_tokens = {200, 400, 800, 1200};
};

inline json to_json(const RouterConfig& c) {
  return {{"tau", c.tau},
          {"top_k", c.top_k},
          {"cache_ttl_s", c.cache_ttl_s},
          {"privacy_mode", c.privacy_mode},
          {"heuristic",
           {{"token_threshold", c.heuristic.token_threshold},
            {"keyword_weight", c.heuristic.keyword_weight},
            {"complexity_keywords", c.heuristic.complexity_keywords}}},
          {"est_prompt_tokens_base", c.est_prompt_tokens_base},
          {"est_completion_tokens", c.est_completion_tokens}};
}

inline RouterConfig router_config_from_json(const json& j) {
  RouterConfig c;
  c.tau = j.value("tau", c.tau);
  c.top_k = j.value("top_k", c.top_k);
  c.cache_ttl_s = j.value("cache_ttl_s", c.cache_ttl_s);
  c.privacy_mode = j.value("privacy_mode", c.privacy_mode);
  c.privacy_salt = j.value("privacy_salt", c.privacy_salt);
  if (j.contains("heuristic")) {
    const auto& h = j.at("heuristic");
    c.heuristic.token_threshold = h.value("token_threshold", c.heuristic.token_threshold);
    c.heuristic.keyword_weight = h.value("keyword_weight", c.heuristic.keyword_weight);
    c.heuristic.complexity_keywords = h.value("complexity_keywords", c.heuristic.complexity_keywords);
  }
  c.est_prompt_tokens_base = j.value("est_prompt_tokens_base", c.est_prompt_tokens_base);
  if (j.contains("est_completion_tokens")) c.est_completion_tokens = j.at("est_completion_tokens").get<std::array<std::int64_t, 4>>();
  if (!(c.tau >= 0.0 && c.tau <= 1.0)) throw ConfigError("tau must be in [0,1]");
  if (c.top_k < 1) throw ConfigError("top_k must be >= 1");
  if (c.privacy_mode != "full" && c.privacy_mode != "hashed" && c.privacy_mode != "off") {
    throw ConfigError("privacy_mode must be full, hashed or off");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Heuristic fallback
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct HeuristicRoute {
  Tier tier = Tier::Local;
  HintLevel granted_hint = HintLevel::L1;
  int score = 0;
};

/// Length plus keyword complexity. Empty queries floor at Local/L0.
inline HeuristicRoute heuristic_route(std::string_view query, const HeuristicConfig& cfg = {}) {
  const auto words = split_words(query);
  if (words.empty()) return {Tier::Local, HintLevel::L0, 0};
  int score = static_cast<int>(words.size());
  for (const auto& w : words) {
    for (const auto& k : cfg.complexity_keywords) {
      if (w.rfind(k, 0) == 0) {
        score += cfg.keyword_weight;
        break;
      }
    }
  }
  if (score > cfg.token_threshold) return {Tier::Premium, HintLevel::L2, score};
  return {Tier::Local, HintLevel::L1, score};
}

// ---------------------------------------------------------------------------
// Requests and plans
// ---------------------------------------------------------------------------

struct RouteRequest {
  std::string session_id;
  std::string lab_id;
  std::string step_id;
  std::string query_text;
  std::optional<HintLevel> requested_hint;
  std::int64_t turn_index = 0;  // 0: router assigns the next index
  std::string prior_canonical_id;
  std::string justification;
  std::string approval_id;  // set when resuming a held turn
  bool approval_timeout = false;  // release a still-pending held turn at L2
  std::string cohort_id;
  bool integrity_flag = false;
  std::optional<double> now_s;  // defaults to wall clock
};

struct RoutePlan {
  std::string session_id;
  std::int64_t turn_index = 0;
  std::string model_id;
  Tier tier = Tier::Local;
  HintLevel requested_hint = HintLevel::L1;
  HintLevel granted_hint = HintLevel::L1;
  std::string overlay_id;             // empty: no overlay enforced
  std::string evaluation_overlay_id;  // overlay checked by the guardrail (enforced or evaluate-only)
  std::string overlay_fingerprint = kNoFingerprint;
  bool strict_guardrail = true;
  MicroUsd est_cost_micro = 0;
  std::vector<std::string> canonical_ids;
  std::vector<double> canonical_scores;
  std::string canonical_reason;
  std::string route_why;
  bool fallback = false;
  bool requires_approval = false;
  std::string approval_id;
  std::int64_t wait_ms = 0;
  bool teacher_boost = false;
  bool assistance_blocked = false;
  std::vector<std::string> action_ids;
  PolicyMode policy = PolicyMode::P0;
  std::string policy_hash;
  std::string privacy_mode = "full";

  double max_score() const {
    return canonical_scores.empty() ? -1.0 : *std::max_element(canonical_scores.begin(), canonical_scores.end());
  }
};

inline std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

inline std::string format_score(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", s);
  return buf;
}

inline json to_json(const RoutePlan& p) {
  json j = {{"session_id", p.session_id},
            {"turn_index", p.turn_index},
            {"model_id", p.model_id},
            {"tier", to_string(p.tier)},
            {"requested_hint", to_string(p.requested_hint)},
            {"granted_hint", to_string(p.granted_hint)},
            {"overlay_id", p.overlay_id.empty() ? json(nullptr) : json(p.overlay_id)},
            {"evaluation_overlay_id", p.evaluation_overlay_id.empty() ? json(nullptr) : json(p.evaluation_overlay_id)},
            {"overlay_fingerprint", p.overlay_fingerprint},
            {"strict_guardrail", p.strict_guardrail},
            {"est_cost_micro", p.est_cost_micro},
            {"canonical_ids", p.canonical_ids},
            {"canonical_scores", p.canonical_scores},
            {"canonical_reason", p.canonical_reason},
            {"route_why", p.route_why},
            {"fallback", p.fallback},
            {"requires_approval", p.requires_approval},
            {"approval_id", p.approval_id.empty() ? json(nullptr) : json(p.approval_id)},
            {"wait_ms", p.wait_ms},
            {"teacher_boost", p.teacher_boost},
            {"assistance_blocked", p.assistance_blocked},
            {"action_ids", p.action_ids},
            {"policy", to_string(p.policy)},
            {"policy_hash", p.policy_hash},
            {"privacy_mode", p.privacy_mode}};
  return j;
}

inline RoutePlan plan_from_json(const json& j) {
  RoutePlan p;
  p.session_id = j.value("session_id", std::string());
  p.turn_index = j.value("turn_index", std::int64_t{0});
  p.model_id = j.at("model_id").get<std::string>();
  p.tier = parse_tier(j.at("tier").get<std::string>());
  p.requested_hint = parse_hint_level(j.value("requested_hint", std::string("L1")));
  p.granted_hint = parse_hint_level(j.at("granted_hint").get<std::string>());
  auto opt = [&](const char* k) {
    return j.contains(k) && !j.at(k).is_null() ? j.at(k).get<std::string>() : std::string();
  };
  p.overlay_id = opt("overlay_id");
  p.evaluation_overlay_id = opt("evaluation_overlay_id");
  p.overlay_fingerprint = j.value("overlay_fingerprint", std::string(kNoFingerprint));
  p.strict_guardrail = j.value("strict_guardrail", true);
  p.est_cost_micro = j.value("est_cost_micro", MicroUsd{0});
  p.canonical_ids = j.value("canonical_ids", std::vector<std::string>{});
  p.canonical_scores = j.value("canonical_scores", std::vector<double>{});
  p.canonical_reason = j.value("canonical_reason", std::string());
  p.route_why = j.at("route_why").get<std::string>();
  p.fallback = j.value("fallback", false);
  p.requires_approval = j.value("requires_approval", false);
  p.approval_id = opt("approval_id");
  p.wait_ms = j.value("wait_ms", std::int64_t{0});
  p.teacher_boost = j.value("teacher_boost", false);
  p.assistance_blocked = j.value("assistance_blocked", false);
  p.action_ids = j.value("action_ids", std::vector<std::string>{});
  p.policy = parse_policy_mode(j.value("policy", std::string("P0")));
  p.policy_hash = j.value("policy_hash", std::string());
  p.privacy_mode = j.value("privacy_mode", std::string("full"));
  return p;
}

inline RouteRequest request_from_json(const json& j) {
  RouteRequest r;
  auto str = [&](const char* k, bool required) -> std::string {
    if (!j.contains(k) || j.at(k).is_null()) {
      if (required) throw RequestError(k, std::string("missing field '") + k + "'");
      return {};
    }
    if (!j.at(k).is_string()) throw RequestError(k, std::string("field '") + k + "' must be a string");
    return j.at(k).get<std::string>();
  };
  if (!j.is_object()) throw RequestError("<body>", "request body must be an object");
  r.session_id = str("session_id", true);
  r.lab_id = str("lab_id", true);
  r.step_id = str("step_id", true);
  r.query_text = str("query_text", true);
  if (auto h = str("requested_hint", false); !h.empty()) {
    try {
      r.requested_hint = parse_hint_level(h);
    } catch (const ConfigError&) {
      throw RequestError("requested_hint", "requested_hint must be L0..L3");
    }
  }
  if (j.contains("context")) {
    const auto& c = j.at("context");
    r.turn_index = c.value("turn_index", std::int64_t{0});
    if (c.contains("prior_canonical_id") && c.at("prior_canonical_id").is_string()) {
      r.prior_canonical_id = c.at("prior_canonical_id").get<std::string>();
    }
  }
  r.justification = str("justification", false);
  r.approval_id = str("approval_id", false);
  r.approval_timeout = j.value("approval_timeout", false);
  r.cohort_id = str("cohort_id", false);
  r.integrity_flag = j.value("integrity_flag", false);
  if (j.contains("now_s") && j.at("now_s").is_number()) r.now_s = j.at("now_s").get<double>();
  return r;
}

inline json to_json(const RouteRequest& r) {
  json j = {{"session_id", r.session_id},
            {"lab_id", r.lab_id},
            {"step_id", r.step_id},
            {"query_text", r.query_text},
            {"context", {{"turn_index", r.turn_index}, {"prior_canonical_id", r.prior_canonical_id}}},
            {"justification", r.justification},
            {"approval_id", r.approval_id},
            {"approval_timeout", r.approval_timeout},
            {"cohort_id", r.cohort_id},
            {"integrity_flag", r.integrity_flag}};
  if (r.requested_hint) j["requested_hint"] = to_string(*r.requested_hint);
  if (r.now_s) j["now_s"] = *r.now_s;
  return j;
}

struct AuditRecord {
  std::int64_t seq = 0;
  double ts_s = 0.0;
  std::string kind;
  json detail;
};

inline json to_json(const AuditRecord& a) {
  return {{"seq", a.seq}, {"ts_s", a.ts_s}, {"kind", a.kind}, {"detail", a.detail}};
}

inline double wall_clock_s() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------
// Router
// ---------------------------------------------------------------------------

/// Everything a plan reads that an admin may swap at runtime.
struct RouterSnapshot {
  PolicyConfig policy;
  RouterConfig config;
  OverlaySet overlays = OverlaySet::defaults();
  PriceBook prices = PriceBook::defaults();
  std::map<std::string, LabDescriptor> labs;
  std::string policy_hash;
  std::string overlay_override;  // lab-wide teacher overlay swap
};

struct PendingAction {
  std::string action_id;
  ActionKind kind = ActionKind::Boost;
  std::string model_id;
  double ttl_s = 0.0;
  int turns = 0;
  std::string overlay_id;
};

struct SessionState {
  std::string session_id;
  std::string lab_id;
  std::string cohort_id;
  BudgetState budget;
  StickinessState stick;
  IntegrityState integrity;
  std::string current_step;
  int turns_in_step = 0;
  std::int64_t last_planned_turn = 0;
  std::int64_t last_completed_turn = 0;
  std::string overlay_override;
  std::vector<PendingAction> pending;
  bool step_boundary = true;  // the next plan opens a new step
};

class Router {
 public:
  Router(RouterSnapshot snapshot, std::shared_ptr<const Bank> bank, std::shared_ptr<const EmbeddingProvider> provider)
      : bank_(std::move(bank)), provider_(std::move(provider)), cache_(snapshot.config.cache_ttl_s) {
    check_snapshot(snapshot);
    snapshot.policy_hash = policy_hash(snapshot.policy);
    snap_ = std::make_shared<const RouterSnapshot>(std::move(snapshot));
  }

  std::shared_ptr<const RouterSnapshot> snapshot() const {
    std::shared_lock lock(snap_mu_);
    return snap_;
  }

  MatchCache& cache() { return cache_; }
  ApprovalQueue& approvals() { return approvals_; }
  const Bank* bank() const { return bank_.get(); }
  const EmbeddingProvider* provider() const { return provider_.get(); }

  /// Drops cached matches and all stickiness (cold start).
  void flush_caches() {
    cache_.clear();
    std::lock_guard lock(sessions_mu_);
    for (auto& [_, s] : sessions_) {
      std::lock_guard sl(*s.mu);
      s.state.stick.canonical_keys.clear();
      clear_freeze(s.state.stick);
    }
  }

  // -------------------------------------------------------------------------
  // Planning
  // -------------------------------------------------------------------------

  RoutePlan plan(const RouteRequest& req) {
    auto snap = snapshot();
    validate_request(req, *snap);
    const double now = req.now_s ? *req.now_s : wall_clock_s();
    auto& slot = session_slot(req, *snap, now);
    std::lock_guard lock(*slot.mu);
    return plan_locked(req, *snap, slot.state, now);
  }

  /// Settles the turn's reservation with the actual cost.
  void complete_turn(const RoutePlan& plan, MicroUsd actual_cost_micro) {
    auto& slot = existing_slot(plan.session_id);
    std::lock_guard lock(*slot.mu);
    auto& s = slot.state;
    if (s.budget.reservation) commit_debit(s.budget, actual_cost_micro, plan.granted_hint, plan.policy);
    s.last_completed_turn = std::max(s.last_completed_turn, plan.turn_index);
  }

  /// Releases a reservation without charging (backend failure).
  void abort_turn(const RoutePlan& plan) {
    auto& slot = existing_slot(plan.session_id);
    std::lock_guard lock(*slot.mu);
    rollback_debit(slot.state.budget);
  }

  /// Re-plans a failed turn on the local tier: the premium reservation is
  /// rolled back and a local one placed.
  RoutePlan failover_to_local(RoutePlan plan, const std::string& why = "backend_failover") {
    auto snap = snapshot();
    auto& slot = existing_slot(plan.session_id);
    std::lock_guard lock(*slot.mu);
    auto& s = slot.state;
    rollback_debit(s.budget);
    plan.model_id = snap->prices.model_for(Tier::Local);
    plan.tier = Tier::Local;
    plan.est_cost_micro = estimate_cost(*snap, plan.model_id, plan.granted_hint, 0);
    (void)check_and_debit(s.budget, plan.est_cost_micro, plan.granted_hint, plan.policy);
    plan.fallback = true;
    plan.route_why += ";" + why;
    return plan;
  }

  // -------------------------------------------------------------------------
  // Admin surface. Every mutation is audited.
  // -------------------------------------------------------------------------

  /// Swaps the live policy atomically. Returns the policy_update action id.
  std::string update_policy(const PolicyConfig& policy, std::optional<double> now_s = std::nullopt) {
    auto v = validate_policy(policy);
    if (!v.empty()) throw ConfigError("policy rejected: " + v.front().field + " " + v.front().rule);
    std::string hash;
    {
      std::unique_lock lock(snap_mu_);
      auto next = std::make_shared<RouterSnapshot>(*snap_);
      next->policy = policy;
      next->policy_hash = hash = labroute::policy_hash(policy);
      snap_ = std::move(next);
    }
    const double now = now_s.value_or(wall_clock_s());
    audit("policy_update", {{"policy", to_json(policy)}, {"policy_hash", hash}}, now);
    return broadcast_action(ActionKind::PolicyUpdate, {}, now);
  }

  void update_overlays(const OverlaySet& overlays, std::optional<double> now_s = std::nullopt) {
    auto v = validate_overlays(overlays);
    if (!v.empty()) throw ConfigError("overlays rejected: " + v.front().field + " " + v.front().rule);
    {
      std::unique_lock lock(snap_mu_);
      if (!snap_->overlay_override.empty() && !overlays.contains(snap_->overlay_override)) {
        throw ConfigError("overlays rejected: active override '" + snap_->overlay_override + "' missing");
      }
      auto next = std::make_shared<RouterSnapshot>(*snap_);
      next->overlays = overlays;
      snap_ = std::move(next);
    }
    audit("overlay_update", {{"overlays", to_json(overlays)}}, now_s.value_or(wall_clock_s()));
  }

  void update_router_config(const RouterConfig& cfg, std::optional<double> now_s = std::nullopt) {
    {
      std::unique_lock lock(snap_mu_);
      auto next = std::make_shared<RouterSnapshot>(*snap_);
      next->config = cfg;
      snap_ = std::move(next);
    }
    cache_.set_ttl(cfg.cache_ttl_s);
    audit("router_config_update", to_json(cfg), now_s.value_or(wall_clock_s()));
  }

  /// Teacher overlay swap for every session. Returns the action id.
  std::string swap_overlay(const std::string& overlay_id, std::optional<double> now_s = std::nullopt) {
    {
      std::unique_lock lock(snap_mu_);
      if (!snap_->overlays.contains(overlay_id)) throw ConfigError("unknown overlay '" + overlay_id + "'");
      auto next = std::make_shared<RouterSnapshot>(*snap_);
      next->overlay_override = overlay_id;
      snap_ = std::move(next);
    }
    const double now = now_s.value_or(wall_clock_s());
    PendingAction a;
    a.kind = ActionKind::OverlaySwap;
    a.overlay_id = overlay_id;
    audit("overlay_swap", {{"overlay_id", overlay_id}}, now);
    return broadcast_action(ActionKind::OverlaySwap, a, now);
  }

  std::string boost(const std::string& session_id, std::optional<double> now_s = std::nullopt) {
    PendingAction a;
    a.kind = ActionKind::Boost;
    const double now = now_s.value_or(wall_clock_s());
    audit("boost", {{"session_id", session_id}}, now);
    return queue_action(session_id, a, now);
  }

  /// ttl_s > 0: wall-clock freeze; otherwise `turns` routed turns.
  std::string freeze(const std::string& session_id, const std::string& model_id, double ttl_s, int turns = 0,
                     std::optional<double> now_s = std::nullopt) {
    auto snap = snapshot();
    if (!snap->prices.contains(model_id)) throw ConfigError("unknown model '" + model_id + "'");
    PendingAction a;
    a.kind = ActionKind::Freeze;
    a.model_id = model_id;
    a.ttl_s = ttl_s;
    a.turns = turns;
    const double now = now_s.value_or(wall_clock_s());
    audit("freeze", {{"session_id", session_id}, {"model", model_id}, {"ttl_s", ttl_s}, {"turns", turns}}, now);
    return queue_action(session_id, a, now);
  }

  void clear_session_freeze(const std::string& session_id, std::optional<double> now_s = std::nullopt) {
    {
      auto& slot = existing_slot(session_id);
      std::lock_guard lock(*slot.mu);
      clear_freeze(slot.state.stick);
      auto& p = slot.state.pending;
      p.erase(std::remove_if(p.begin(), p.end(), [](const PendingAction& a) { return a.kind == ActionKind::Freeze; }),
              p.end());
    }
    audit("freeze_clear", {{"session_id", session_id}}, now_s.value_or(wall_clock_s()));
  }

  ApprovalRequest decide_approval(const std::string& approval_id, ApprovalDecision decision, std::int64_t decided_at_ms,
                                  std::optional<double> now_s = std::nullopt) {
    auto r = approvals_.decide(approval_id, decision, decided_at_ms);
    const double now = now_s.value_or(wall_clock_s());
    TeacherAction act;
    act.action_id = "act-" + approval_id;
    act.kind = ActionKind::ApprovalDecision;
    act.session_id = r.session_id;
    act.ts_ms = static_cast<std::int64_t>(now * 1000.0);
    {
      std::lock_guard lock(sessions_mu_);
      auto it = sessions_.find(r.session_id);
      if (it != sessions_.end()) {
        std::lock_guard sl(*it->second.mu);
        act.t = it->second.state.last_completed_turn;
      }
      actions_.push_back(act);
    }
    audit("approval_decision",
          {{"approval_id", approval_id}, {"decision", to_string(decision)}, {"wait_ms", r.wait_ms}}, now);
    return r;
  }

  void set_budget(const std::string& session_id, MicroUsd total_micro, std::optional<double> now_s = std::nullopt) {
    if (total_micro < 0) throw ConfigError("budget must be >= 0");
    {
      auto& slot = existing_slot(session_id);
      std::lock_guard lock(*slot.mu);
      slot.state.budget.total_budget_micro = total_micro;
    }
    audit("budget_update", {{"session_id", session_id}, {"total_budget_micro", total_micro}},
          now_s.value_or(wall_clock_s()));
  }

  std::vector<BudgetState> budgets() const {
    std::lock_guard lock(sessions_mu_);
    std::vector<BudgetState> out;
    for (const auto& [_, s] : sessions_) {
      std::lock_guard sl(*s.mu);
      out.push_back(s.state.budget);
    }
    return out;
  }

  std::optional<SessionState> session(const std::string& id) const {
    std::lock_guard lock(sessions_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return std::nullopt;
    std::lock_guard sl(*it->second.mu);
    return it->second.state;
  }

  std::vector<TeacherAction> actions() const {
    std::lock_guard lock(sessions_mu_);
    return actions_;
  }

  std::vector<AuditRecord> audit_log() const {
    std::lock_guard lock(audit_mu_);
    return audit_;
  }

 private:
  struct Slot {
    std::unique_ptr<std::mutex> mu = std::make_unique<std::mutex>();
    SessionState state;
  };

  static void check_snapshot(const RouterSnapshot& s) {
    auto v = validate_policy(s.policy);
    if (!v.empty()) throw ConfigError("policy: " + v.front().field + " " + v.front().rule);
    (void)s.prices.model_for(Tier::Local);
    (void)s.prices.model_for(Tier::Premium);
  }

  static void validate_request(const RouteRequest& r, const RouterSnapshot& snap) {
    if (r.session_id.empty()) throw RequestError("session_id", "session_id must be non-empty");
    if (r.lab_id.empty()) throw RequestError("lab_id", "lab_id must be non-empty");
    if (!snap.labs.empty()) {
      auto it = snap.labs.find(r.lab_id);
      if (it == snap.labs.end()) throw RequestError("lab_id", "unknown lab_id '" + r.lab_id + "'");
      if (it->second.find_step(r.step_id) == nullptr) {
        throw RequestError("step_id", "unknown step_id '" + r.step_id + "' for lab '" + r.lab_id + "'");
      }
    }
  }

  Slot& session_slot(const RouteRequest& req, const RouterSnapshot& snap, double) {
    std::lock_guard lock(sessions_mu_);
    auto it = sessions_.find(req.session_id);
    if (it != sessions_.end()) return it->second;
    Slot slot;
    auto& s = slot.state;
    s.session_id = req.session_id;
    s.lab_id = req.lab_id;
    s.cohort_id = req.cohort_id.empty() ? req.session_id : req.cohort_id;
    s.budget.session_id = req.session_id;
    s.budget.lab_id = req.lab_id;
    s.budget.total_budget_micro = snap.policy.total_budget_micro;
    s.budget.l3_max = snap.policy.l3_max;
    s.stick.session_id = req.session_id;
    s.integrity.session_id = req.session_id;
    s.overlay_override = snap.overlay_override;
    return sessions_.emplace(req.session_id, std::move(slot)).first->second;
  }

  Slot& existing_slot(const std::string& session_id) {
    std::lock_guard lock(sessions_mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw RequestError("session_id", "unknown session '" + session_id + "'");
    return it->second;
  }

  std::string next_action_id() { return "act-" + std::to_string(++action_seq_); }

  std::string queue_action(const std::string& session_id, PendingAction a, double now) {
    std::lock_guard lock(sessions_mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw RequestError("session_id", "unknown session '" + session_id + "'");
    a.action_id = next_action_id();
    {
      std::lock_guard sl(*it->second.mu);
      actions_.push_back({a.action_id, a.kind, session_id, it->second.state.last_completed_turn,
                          static_cast<std::int64_t>(now * 1000.0)});
      it->second.state.pending.push_back(a);
    }
    return a.action_id;
  }

  /// One action id shared by all sessions; each session gets its own record.
  std::string broadcast_action(ActionKind kind, PendingAction a, double now) {
    std::lock_guard lock(sessions_mu_);
    a.kind = kind;
    a.action_id = next_action_id();
    for (auto& [id, slot] : sessions_) {
      std::lock_guard sl(*slot.mu);
      actions_.push_back({a.action_id, kind, id, slot.state.last_completed_turn, static_cast<std::int64_t>(now * 1000.0)});
      slot.state.pending.push_back(a);
    }
    return a.action_id;
  }

  void audit(std::string kind, json detail, double now) {
    std::lock_guard lock(audit_mu_);
    audit_.push_back({static_cast<std::int64_t>(audit_.size() + 1), now, std::move(kind), std::move(detail)});
  }

  static std::int64_t word_count(std::string_view text) { return static_cast<std::int64_t>(split_words(text).size()); }

  MicroUsd estimate_cost(const RouterSnapshot& snap, const std::string& model, HintLevel level,
                         std::int64_t query_words) const {
    const auto prompt = snap.config.est_prompt_tokens_base + query_words;
    const auto completion = snap.config.est_completion_tokens[static_cast<std::size_t>(index_of(level))];
    return token_cost_micro(model, prompt, completion, snap.prices);
  }

  void deliver_actions(SessionState& s, const RouterSnapshot& snap, RoutePlan& plan, double now) {
    if (s.pending.empty()) return;
    std::vector<PendingAction> keep;
    for (auto& a : s.pending) {
      const bool deliverable = a.kind == ActionKind::PolicyUpdate || snap.policy.action_sync == ActionSync::Turn ||
                               s.step_boundary;
      if (!deliverable) {
        keep.push_back(std::move(a));
        continue;
      }
      switch (a.kind) {
        case ActionKind::Boost: s.stick.boost_pending = true; break;
        case ActionKind::Freeze:
          if (a.ttl_s > 0) {
            set_freeze_until(s.stick, a.model_id, now + a.ttl_s);
          } else {
            set_freeze_turns(s.stick, a.model_id, a.turns > 0 ? a.turns : snap.policy.freeze_turns);
          }
          break;
        case ActionKind::OverlaySwap: s.overlay_override = a.overlay_id; break;
        case ActionKind::PolicyUpdate:
        case ActionKind::ApprovalDecision: break;
      }
      plan.action_ids.push_back(a.action_id);
    }
    s.pending = std::move(keep);
  }

  RoutePlan plan_locked(const RouteRequest& req, const RouterSnapshot& snap, SessionState& s, double now) {
    const auto& policy = snap.policy;
    const auto traits = policy.traits();
    const bool resume = !req.approval_id.empty();

    RoutePlan plan;
    plan.session_id = req.session_id;
    plan.policy = policy.mode;
    plan.policy_hash = snap.policy_hash;
    plan.privacy_mode = snap.config.privacy_mode;
    plan.strict_guardrail = policy.strict_guardrail;
    plan.turn_index = req.turn_index > 0 ? req.turn_index : (resume ? s.last_planned_turn : s.last_planned_turn + 1);
    std::vector<std::string> why;

    // Step bookkeeping. A resumed turn was already counted when it was held.
    if (!resume) {
      if (s.current_step != req.step_id) {
        s.current_step = req.step_id;
        s.turns_in_step = 0;
        s.step_boundary = true;
      }
    }
    const int prior_turns_in_step = resume ? std::max(0, s.turns_in_step - 1) : s.turns_in_step;
    if (!resume) {
      deliver_actions(s, snap, plan, now);
      s.step_boundary = false;
      ++s.turns_in_step;
      s.last_planned_turn = std::max(s.last_planned_turn, plan.turn_index);
    } else {
      plan.action_ids.push_back("act-" + req.approval_id);
    }

    // 1. Canonical match.
    std::vector<MatchResult> matches;
    std::string canonical_tag;
    const bool matching_on = policy.canonical_enabled && bank_ && provider_ && snap.config.privacy_mode != "off";
    if (!matching_on) {
      canonical_tag = "canonical:off";
    } else {
      const std::string match_text = snap.config.privacy_mode == "hashed"
                                         ? hmac_sha256_hex(snap.config.privacy_salt, req.query_text)
                                         : req.query_text;
      try {
        matches = match(match_text, *bank_, *provider_, snap.config.tau, snap.config.top_k, &cache_, now);
        canonical_tag = matches.empty() ? "canonical:none" : "canonical:" + matches.front().entry_id;
      } catch (const ProviderError&) {
        canonical_tag = "canonical:error";
      }
    }
    for (const auto& m : matches) {
      plan.canonical_ids.push_back(m.entry_id);
      plan.canonical_scores.push_back(m.score);
    }
    const CanonicalEntry* entry = matches.empty() ? nullptr : bank_->find(matches.front().entry_id);
    why.push_back(canonical_tag);
    if (entry) {
      plan.canonical_reason = "rank-1 " + entry->id + " score " + format_score(matches.front().score) +
                              " >= tau " + format_score(snap.config.tau) + "; prefers " + entry->preferred_model;
    } else if (canonical_tag == "canonical:none") {
      plan.canonical_reason = "no entry >= tau " + format_score(snap.config.tau);
    } else if (canonical_tag == "canonical:error") {
      plan.canonical_reason = "embedding provider failure";
    } else {
      plan.canonical_reason = "canonical matching disabled";
    }

    const std::string local_model = snap.prices.model_for(Tier::Local);
    const std::string premium_model = snap.prices.model_for(Tier::Premium);
    const auto words = word_count(req.query_text);
    const auto heur = heuristic_route(req.query_text, snap.config.heuristic);

    // 2. Policy gate.
    if (!resume) {
      auto io = record_integrity(s.integrity, req.integrity_flag, policy.mode, policy.integrity_threshold);
      s.integrity = io.state;
      if (io.assistance_blocked) {
        plan.requested_hint = req.requested_hint.value_or(HintLevel::L1);
        plan.granted_hint = HintLevel::L0;
        plan.model_id = local_model;
        plan.tier = Tier::Local;
        plan.fallback = true;
        plan.assistance_blocked = true;
        plan.est_cost_micro = estimate_cost(snap, local_model, HintLevel::L0, words);
        (void)check_and_debit(s.budget, plan.est_cost_micro, HintLevel::L0, policy.mode);
        why.push_back("integrity_block");
        plan.route_why = join(why, ";");
        return plan;
      }
    }

    HintLevel requested = req.requested_hint.value_or(entry ? entry->hint_level : HintLevel::L1);
    if (!req.requested_hint && !entry && matching_on == false && heur.granted_hint == HintLevel::L0) {
      requested = HintLevel::L0;
    }
    plan.requested_hint = requested;
    HintLevel cap = requested;
    if (entry && entry->max_hint_level < cap) {
      cap = entry->max_hint_level;
      why.push_back("entry_cap");
    }
    if (traits.spend_limits && is_high_scaffold(cap) && prior_turns_in_step < policy.high_scaffold_min_turns) {
      cap = HintLevel::L1;
      why.push_back("struggle_window");
    }

    if (cap == HintLevel::L3 && approval_required(HintLevel::L3, policy.mode)) {
      if (s.budget.l3_granted_count >= s.budget.l3_max) {
        cap = HintLevel::L2;
        why.push_back("l3_cap");
      } else if (resume) {
        auto r = approvals_.get(req.approval_id);
        if (!r || r->session_id != req.session_id) throw RequestError("approval_id", "unknown approval for session");
        plan.approval_id = r->approval_id;
        plan.wait_ms = r->wait_ms;
        if (r->decision == ApprovalDecision::Pending && req.approval_timeout) {
          cap = HintLevel::L2;
          why.push_back("approval_timeout");
        } else if (r->decision == ApprovalDecision::Pending) {
          plan.requires_approval = true;
          plan.granted_hint = HintLevel::L2;
          why.push_back("approval_pending");
          plan.route_why = join(why, ";");
          fill_model_preview(plan, snap, entry, heur, local_model);
          return plan;
        }
        if (r->decision == ApprovalDecision::Denied || !approvals_.consume(r->approval_id, req.session_id)) {
          cap = HintLevel::L2;
          why.push_back("approval_denied");
        } else {
          why.push_back("approved");
        }
      } else {
        ApprovalRequest ar;
        ar.session_id = req.session_id;
        ar.requested_level = HintLevel::L3;
        ar.justification = req.justification;
        ar.enqueued_at_ms = static_cast<std::int64_t>(now * 1000.0);
        try {
          plan.approval_id = approvals_.enqueue(ar, policy.mode);
          plan.requires_approval = true;
          plan.granted_hint = HintLevel::L2;
          why.push_back("approval_pending");
          plan.route_why = join(why, ";");
          fill_model_preview(plan, snap, entry, heur, local_model);
          return plan;
        } catch (const ApprovalError& e) {
          cap = HintLevel::L2;
          why.push_back(e.code());
        }
      }
    }

    // 3. Model choice.
    std::string model;
    if (entry && snap.prices.contains(entry->preferred_model)) {
      model = entry->preferred_model;
    } else {
      model = heur.tier == Tier::Premium ? premium_model : local_model;
      plan.fallback = true;
    }
    if (policy.premium_hint_floor && cap >= *policy.premium_hint_floor && model != premium_model) {
      model = premium_model;
      why.push_back("escalate:" + to_string(*policy.premium_hint_floor));
    }
    auto choice = apply_stickiness(s.stick, model, premium_model, now, entry ? entry->id : std::string());
    if (choice.source != StickSource::Planned) {
      if (choice.model_id != model || choice.source == StickSource::Boost) why.push_back(to_string(choice.source));
      model = choice.model_id;
      plan.teacher_boost = choice.source == StickSource::Boost;
    }

    MicroUsd est = estimate_cost(snap, model, cap, words);
    if (entry && traits.spend_limits && snap.prices.tier_of(model) == Tier::Premium &&
        est > usd_to_micro(entry->max_cost_usd)) {
      model = local_model;
      est = estimate_cost(snap, model, cap, words);
      plan.fallback = true;
      why.push_back("turn_cap");
    }
    auto debit = check_and_debit(s.budget, est, cap, policy.mode);
    if (!debit.allowed) {
      model = local_model;
      est = estimate_cost(snap, model, cap, words);
      plan.fallback = true;
      debit = check_and_debit(s.budget, est, cap, policy.mode);
      if (!debit.allowed) {  // local tier priced above the remaining budget
        cap = HintLevel::L0;
        est = 0;
        s.budget.reservation = Reservation{0, cap};
        debit.reason = "budget_exhausted";
      }
      why.push_back("budget");
    }
    if (debit.force_local && model != local_model) {
      model = local_model;
      est = estimate_cost(snap, model, debit.capped_level, words);
      s.budget.reservation = Reservation{est, debit.capped_level};
      plan.fallback = true;
    }
    if (!debit.reason.empty() && debit.reason != "budget") {
      std::stringstream ss(debit.reason);
      for (std::string part; std::getline(ss, part, ',');) {
        if (part != "budget" && std::find(why.begin(), why.end(), part) == why.end()) why.push_back(part);
      }
    }
    cap = debit.capped_level < cap ? debit.capped_level : cap;
    if (debit.reason.find("l3_cap") != std::string::npos && cap > HintLevel::L2) cap = HintLevel::L2;

    if (entry && policy.stickiness_ttl_s > 0.0 && choice.source == StickSource::Planned && !plan.fallback) {
      auto& key = s.stick.canonical_keys[entry->id];
      if (key.model_id.empty() || now >= key.expires_at_s) key = {model, now + policy.stickiness_ttl_s};
    }

    plan.model_id = model;
    plan.tier = snap.prices.tier_of(model);
    plan.granted_hint = cap;
    plan.est_cost_micro = est;

    // Overlay: teacher swap, then entry, then policy default.
    std::string overlay = !s.overlay_override.empty() ? s.overlay_override
                          : (entry && !entry->overlay.empty() && snap.overlays.contains(entry->overlay))
                              ? entry->overlay
                              : policy.overlay_id;
    if (policy.overlay_mode != OverlayMode::Off && snap.overlays.contains(overlay)) {
      plan.evaluation_overlay_id = overlay;
      if (policy.overlay_mode == OverlayMode::Enforce && traits.overlays) {
        plan.overlay_id = overlay;
        plan.overlay_fingerprint = overlay_fingerprint(snap.overlays.at(overlay), plan.granted_hint);
      }
    }
    plan.route_why = join(why, ";");
    return plan;
  }

  // Held plans still say where the turn would go.
  static void fill_model_preview(RoutePlan& plan, const RouterSnapshot& snap, const CanonicalEntry* entry,
                                 const HeuristicRoute& heur, const std::string& local_model) {
    if (entry && snap.prices.contains(entry->preferred_model)) {
      plan.model_id = entry->preferred_model;
    } else {
      plan.model_id = heur.tier == Tier::Premium ? snap.prices.model_for(Tier::Premium) : local_model;
      plan.fallback = true;
    }
    plan.tier = snap.prices.tier_of(plan.model_id);
  }

  mutable std::shared_mutex snap_mu_;
  std::shared_ptr<const RouterSnapshot> snap_;
  std::shared_ptr<const Bank> bank_;
  std::shared_ptr<const EmbeddingProvider> provider_;
  MatchCache cache_;
  ApprovalQueue approvals_;

  mutable std::mutex sessions_mu_;
  std::map<std::string, Slot> sessions_;
  std::vector<TeacherAction> actions_;
  std::uint64_t action_seq_ = 0;

  mutable std::mutex audit_mu_;
  std::vector<AuditRecord> audit_;
};

/// Telemetry skeleton for a planned turn; callers fill usage, latency and
/// guardrail fields.
inline TelemetryEvent event_from_plan(const RoutePlan& plan, const RouteRequest& req) {
  TelemetryEvent e;
  e.session_id = plan.session_id;
  e.lab_id = req.lab_id;
  e.policy = plan.policy;
  e.step_id = req.step_id;
  e.hint_req = plan.requested_hint;
  e.hint_granted = plan.granted_hint;
  e.justification_len = static_cast<int>(req.justification.size());
  e.model = plan.model_id;
  e.overlay_fingerprint = plan.overlay_fingerprint;
  e.canonical_ids = plan.canonical_ids;
  e.canonical_scores = plan.canonical_scores;
  e.canonical_reason = plan.canonical_reason;
  e.est_cost_micro = plan.est_cost_micro;
  e.teacher_boost = plan.teacher_boost;
  e.approval_id = plan.approval_id;
  e.wait_ms = plan.wait_ms;
  e.privacy_mode = plan.privacy_mode;
  e.integrity_flag = req.integrity_flag;
  e.turn_index = plan.turn_index;
  e.tier = plan.tier;
  e.fallback = plan.fallback;
  e.route_why = plan.route_why;
  e.cohort_id = req.cohort_id;
  e.overlay_id = plan.overlay_id;
  e.action_ids = plan.action_ids;
  e.assistance_blocked = plan.assistance_blocked;
  return e;
}

}  // namespace labroute
