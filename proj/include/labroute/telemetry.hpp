#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/config.hpp"
#include "labroute/core.hpp"
#include "labroute/hash.hpp"

namespace labroute {

inline constexpr const char* kSchemaVersion = "1.1";

enum class GuardrailResult { None, Pass, Fail };

inline std::string to_string(GuardrailResult g) {
  switch (g) {
    case GuardrailResult::None: return "none";
    case GuardrailResult::Pass: return "pass";
    case GuardrailResult::Fail: return "fail";
  }
  return "none";
}

inline GuardrailResult parse_guardrail(std::string_view s) {
  if (s == "pass") return GuardrailResult::Pass;
  if (s == "fail") return GuardrailResult::Fail;
  if (s == "none") return GuardrailResult::None;
  throw ConfigError("invalid guardrail_result '" + std::string(s) + "'");
}

/// One routed turn. Field names on the wire match these member names.
struct TelemetryEvent {
  // Base dictionary.
  std::string session_id;
  std::string lab_id;
  PolicyMode policy = PolicyMode::P0;
  std::string step_id;
  HintLevel hint_req = HintLevel::L0;
  HintLevel hint_granted = HintLevel::L0;
  int justification_len = 0;
  std::string model;
  std::string overlay_fingerprint = "none";
  std::vector<std::string> canonical_ids;
  std::vector<double> canonical_scores;
  std::string canonical_reason;
  std::int64_t tokens_prompt = 0;
  std::int64_t tokens_completion = 0;
  double latency_ms = 0.0;
  MicroUsd est_cost_micro = 0;
  bool teacher_boost = false;
  std::string approval_id;  // empty = none
  std::int64_t wait_ms = 0;
  std::string privacy_mode = "full";
  int scpi_retries = 0;
  int range_changes = 0;
  bool integrity_flag = false;
  bool step_pass = false;
  double rubric_score_blind = 0.0;

  // v1.1 additions.
  std::int64_t turn_index = 0;
  Tier tier = Tier::Local;
  bool fallback = false;
  std::string route_why;
  GuardrailResult guardrail_result = GuardrailResult::None;
  double ttft_ms = 0.0;
  double plan_ms = 0.0;
  std::string trace_id;
  std::string cohort_id;
  std::uint64_t seed = 0;
  std::int64_t ts_ms = 0;
  MicroUsd cost_micro = 0;  // actual, after the backend reported usage
  std::string overlay_id;   // empty = none
  std::vector<std::string> action_ids;
  bool assistance_blocked = false;

  double max_score() const {
    double m = -1.0;
    for (double s : canonical_scores) m = std::max(m, s);
    return canonical_scores.empty() ? -1.0 : m;
  }
  const std::string* top_canonical() const { return canonical_ids.empty() ? nullptr : &canonical_ids.front(); }
};

inline json to_json(const TelemetryEvent& e) {
  return {
      {"schema_version", kSchemaVersion},
      {"session_id", e.session_id},
      {"lab_id", e.lab_id},
      {"policy", to_string(e.policy)},
      {"step_id", e.step_id},
      {"hint_req", to_string(e.hint_req)},
      {"hint_granted", to_string(e.hint_granted)},
      {"justification_len", e.justification_len},
      {"model", e.model},
      {"overlay_fingerprint", e.overlay_fingerprint},
      {"canonical_ids", e.canonical_ids},
      {"canonical_scores", e.canonical_scores},
      {"canonical_reason", e.canonical_reason},
      {"tokens", {{"prompt", e.tokens_prompt}, {"completion", e.tokens_completion}}},
      {"latency_ms", e.latency_ms},
      {"est_cost_micro", e.est_cost_micro},
      {"teacher_boost", e.teacher_boost},
      {"approval_id", e.approval_id.empty() ? json(nullptr) : json(e.approval_id)},
      {"wait_ms", e.wait_ms},
      {"privacy_mode", e.privacy_mode},
      {"scpi_retries", e.scpi_retries},
      {"range_changes", e.range_changes},
      {"integrity_flag", e.integrity_flag},
      {"step_pass", e.step_pass},
      {"rubric_score_blind", e.rubric_score_blind},
      {"turn_index", e.turn_index},
      {"tier", to_string(e.tier)},
      {"fallback", e.fallback},
      {"route_why", e.route_why},
      {"guardrail_result", to_string(e.guardrail_result)},
      {"ttft_ms", e.ttft_ms},
      {"plan_ms", e.plan_ms},
      {"trace_id", e.trace_id},
      {"cohort_id", e.cohort_id},
      {"seed", e.seed},
      {"ts_ms", e.ts_ms},
      {"cost_micro", e.cost_micro},
      {"overlay_id", e.overlay_id.empty() ? json(nullptr) : json(e.overlay_id)},
      {"action_ids", e.action_ids},
      {"assistance_blocked", e.assistance_blocked},
  };
}

struct SchemaError : std::runtime_error {
  SchemaError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

namespace detail {
template <class T>
T require(const json& j, const char* field) {
  if (!j.contains(field) || j.at(field).is_null()) throw SchemaError(field, "missing");
  try {
    return j.at(field).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(field, e.what());
  }
}
template <class Parse>
auto require_parsed(const json& j, const char* field, Parse parse) {
  auto s = require<std::string>(j, field);
  try {
    return parse(s);
  } catch (const ConfigError& e) {
    throw SchemaError(field, e.what());
  }
}
}  // namespace detail

/// Parses and validates one trace line. Throws SchemaError naming the field.
inline TelemetryEvent event_from_json(const json& j) {
  using detail::require;
  using detail::require_parsed;
  if (!j.is_object()) throw SchemaError("<event>", "must be an object");
  if (j.value("schema_version", std::string()) != kSchemaVersion) {
    throw SchemaError("schema_version", "must be \"1.1\"");
  }
  TelemetryEvent e;
  e.session_id = require<std::string>(j, "session_id");
  e.lab_id = require<std::string>(j, "lab_id");
  e.policy = require_parsed(j, "policy", parse_policy_mode);
  e.step_id = require<std::string>(j, "step_id");
  e.hint_req = require_parsed(j, "hint_req", parse_hint_level);
  e.hint_granted = require_parsed(j, "hint_granted", parse_hint_level);
  e.justification_len = j.value("justification_len", 0);
  e.model = require<std::string>(j, "model");
  e.overlay_fingerprint = j.value("overlay_fingerprint", std::string("none"));
  e.canonical_ids = j.value("canonical_ids", std::vector<std::string>{});
  e.canonical_scores = j.value("canonical_scores", std::vector<double>{});
  if (e.canonical_ids.size() != e.canonical_scores.size()) {
    throw SchemaError("canonical_scores", "must have one score per canonical id");
  }
  e.canonical_reason = j.value("canonical_reason", std::string());
  if (j.contains("tokens")) {
    e.tokens_prompt = j.at("tokens").value("prompt", std::int64_t{0});
    e.tokens_completion = j.at("tokens").value("completion", std::int64_t{0});
  }
  e.latency_ms = j.value("latency_ms", 0.0);
  e.est_cost_micro = j.value("est_cost_micro", MicroUsd{0});
  e.teacher_boost = j.value("teacher_boost", false);
  if (j.contains("approval_id") && !j.at("approval_id").is_null()) e.approval_id = j.at("approval_id").get<std::string>();
  e.wait_ms = j.value("wait_ms", std::int64_t{0});
  e.privacy_mode = j.value("privacy_mode", std::string("full"));
  if (e.privacy_mode != "full" && e.privacy_mode != "hashed" && e.privacy_mode != "off") {
    throw SchemaError("privacy_mode", "must be full, hashed or off");
  }
  e.scpi_retries = j.value("scpi_retries", 0);
  e.range_changes = j.value("range_changes", 0);
  e.integrity_flag = j.value("integrity_flag", false);
  e.step_pass = j.value("step_pass", false);
  e.rubric_score_blind = j.value("rubric_score_blind", 0.0);
  e.turn_index = require<std::int64_t>(j, "turn_index");
  if (e.turn_index < 1) throw SchemaError("turn_index", "must be >= 1");
  e.tier = require_parsed(j, "tier", parse_tier);
  e.fallback = require<bool>(j, "fallback");
  e.route_why = require<std::string>(j, "route_why");
  if (e.route_why.empty()) throw SchemaError("route_why", "must be non-empty");
  e.guardrail_result = require_parsed(j, "guardrail_result", parse_guardrail);
  e.ttft_ms = j.value("ttft_ms", 0.0);
  e.plan_ms = j.value("plan_ms", 0.0);
  e.trace_id = require<std::string>(j, "trace_id");
  e.cohort_id = j.value("cohort_id", e.session_id);
  e.seed = j.value("seed", std::uint64_t{0});
  e.ts_ms = j.value("ts_ms", std::int64_t{0});
  e.cost_micro = j.value("cost_micro", MicroUsd{0});
  if (j.contains("overlay_id") && !j.at("overlay_id").is_null()) e.overlay_id = j.at("overlay_id").get<std::string>();
  e.action_ids = j.value("action_ids", std::vector<std::string>{});
  e.assistance_blocked = j.value("assistance_blocked", false);
  return e;
}

/// Validation of an in-memory event; same rules as parsing.
inline void validate_event(const TelemetryEvent& e) { (void)event_from_json(to_json(e)); }

// ---------------------------------------------------------------------------
// Teacher actions
// ---------------------------------------------------------------------------

enum class ActionKind { Boost, Freeze, PolicyUpdate, OverlaySwap, ApprovalDecision };

inline std::string to_string(ActionKind k) {
  switch (k) {
    case ActionKind::Boost: return "boost";
    case ActionKind::Freeze: return "freeze";
    case ActionKind::PolicyUpdate: return "policy_update";
    case ActionKind::OverlaySwap: return "overlay_swap";
    case ActionKind::ApprovalDecision: return "approval_decision";
  }
  return "boost";
}

inline ActionKind parse_action_kind(std::string_view s) {
  if (s == "boost") return ActionKind::Boost;
  if (s == "freeze") return ActionKind::Freeze;
  if (s == "policy_update") return ActionKind::PolicyUpdate;
  if (s == "overlay_swap") return ActionKind::OverlaySwap;
  if (s == "approval_decision") return ActionKind::ApprovalDecision;
  throw ConfigError("invalid action kind '" + std::string(s) + "'");
}

/// `t` is the target session's last turn index when the action was issued
/// (0 before its first turn). t' is recovered from the trace: the first
/// event of that session whose action_ids contains action_id.
struct TeacherAction {
  std::string action_id;
  ActionKind kind = ActionKind::Boost;
  std::string session_id;
  std::int64_t t = 0;
  std::int64_t ts_ms = 0;
};

inline json to_json(const TeacherAction& a) {
  return {{"action_id", a.action_id},
          {"kind", to_string(a.kind)},
          {"session_id", a.session_id},
          {"t", a.t},
          {"ts_ms", a.ts_ms}};
}

inline TeacherAction action_from_json(const json& j) {
  TeacherAction a;
  a.action_id = detail::require<std::string>(j, "action_id");
  a.kind = detail::require_parsed(j, "kind", parse_action_kind);
  a.session_id = detail::require<std::string>(j, "session_id");
  a.t = detail::require<std::int64_t>(j, "t");
  a.ts_ms = j.value("ts_ms", std::int64_t{0});
  return a;
}

// ---------------------------------------------------------------------------
// Trace store
// ---------------------------------------------------------------------------

struct TraceFilter {
  std::optional<std::string> session_id;
  std::optional<std::string> lab_id;
  std::optional<PolicyMode> policy;
  std::optional<std::uint64_t> seed;

  bool accepts(const TelemetryEvent& e) const {
    return (!session_id || e.session_id == *session_id) && (!lab_id || e.lab_id == *lab_id) &&
           (!policy || e.policy == *policy) && (!seed || e.seed == *seed);
  }
};

/// Keyed pseudonym for canonical ids stored outside privacy_mode=full.
inline std::string pseudonymize_canonical(std::string_view key, std::string_view canonical_id) {
  return "hmac:" + hmac_sha256_hex(key, canonical_id);
}

/// Append-only event log. Always kept in memory; mirrored line by line to a
/// JSONL file when a path is given.
class TraceStore {
 public:
  TraceStore() = default;
  explicit TraceStore(std::filesystem::path path, std::string hmac_key = "labroute-default-key")
      : path_(std::move(path)), hmac_key_(std::move(hmac_key)) {
    if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
    out_.open(*path_, std::ios::app | std::ios::binary);
    if (!out_) throw ConfigError("cannot open trace " + path_->string());
  }

  void set_hmac_key(std::string key) {
    std::lock_guard lock(mu_);
    hmac_key_ = std::move(key);
  }

  /// Validates, pseudonymizes canonical ids when required, and appends.
  /// Returns the event as stored.
  TelemetryEvent append(TelemetryEvent e) {
    validate_event(e);
    std::lock_guard lock(mu_);
    auto& last = last_turn_[e.session_id];
    if (e.turn_index <= last) {
      throw SchemaError("turn_index", "must be strictly increasing per session (got " +
                                          std::to_string(e.turn_index) + " after " + std::to_string(last) + ")");
    }
    last = e.turn_index;
    if (e.privacy_mode != "full") {
      for (auto& id : e.canonical_ids) {
        if (id.rfind("hmac:", 0) == 0) continue;
        const auto alias = pseudonymize_canonical(hmac_key_, id);
        // Free-text fields mention the rank-1 id as well.
        for (auto* text : {&e.route_why, &e.canonical_reason}) {
          for (auto pos = text->find(id); pos != std::string::npos; pos = text->find(id, pos + alias.size())) {
            text->replace(pos, id.size(), alias);
          }
        }
        id = alias;
      }
    }
    if (out_.is_open()) {
      out_ << to_json(e).dump() << '\n';
      out_.flush();
    }
    events_.push_back(e);
    return e;
  }

  std::vector<TelemetryEvent> read_stream(const TraceFilter& filter = {}) const {
    std::lock_guard lock(mu_);
    std::vector<TelemetryEvent> out;
    for (const auto& e : events_) {
      if (filter.accepts(e)) out.push_back(e);
    }
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return events_.size();
  }

  std::int64_t last_turn(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    auto it = last_turn_.find(session_id);
    return it == last_turn_.end() ? 0 : it->second;
  }

 private:
  mutable std::mutex mu_;
  std::optional<std::filesystem::path> path_;
  std::string hmac_key_ = "labroute-default-key";
  std::ofstream out_;
  std::vector<TelemetryEvent> events_;
  std::map<std::string, std::int64_t> last_turn_;
};

inline std::vector<TelemetryEvent> read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace " + path.string());
  std::vector<TelemetryEvent> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(event_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw SchemaError("<line " + std::to_string(n) + ">", e.what());
    }
  }
  return out;
}

inline std::string events_to_jsonl(const std::vector<TelemetryEvent>& events) {
  std::string out;
  for (const auto& e : events) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<TeacherAction> read_actions_file(const std::filesystem::path& path) {
  std::vector<TeacherAction> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(action_from_json(json::parse(line)));
  }
  return out;
}

inline std::string actions_to_jsonl(const std::vector<TeacherAction>& actions) {
  std::string out;
  for (const auto& a : actions) {
    out += to_json(a).dump();
    out += '\n';
  }
  return out;
}

/// Rewrites the trace keeping events with ts_ms >= now_ms - days. Returns the
/// number of events dropped.
inline std::size_t prune_trace_file(const std::filesystem::path& path, int days, std::int64_t now_ms) {
  const std::int64_t cutoff = now_ms - static_cast<std::int64_t>(days) * 86'400'000;
  auto events = read_trace_file(path);
  std::vector<TelemetryEvent> kept;
  for (auto& e : events) {
    if (e.ts_ms >= cutoff) kept.push_back(std::move(e));
  }
  const auto tmp = path.string() + ".tmp";
  write_text_file(tmp, events_to_jsonl(kept));
  std::filesystem::rename(tmp, path);
  return events.size() - kept.size();
}

}  // namespace labroute
