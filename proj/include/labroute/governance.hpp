#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "labroute/config.hpp"
#include "labroute/core.hpp"

namespace labroute {

// ---------------------------------------------------------------------------
// Budgets
// ---------------------------------------------------------------------------

struct Reservation {
  MicroUsd micro = 0;
  HintLevel level = HintLevel::L0;
};

struct BudgetState {
  std::string session_id;
  std::string lab_id;
  MicroUsd total_budget_micro = 5'000'000;
  MicroUsd spent_micro = 0;
  int l3_granted_count = 0;
  int l3_max = 2;
  // Spend charged beyond the cap because the actual cost overran the
  // reservation. Kept out of spent_micro so the cap invariant holds.
  MicroUsd overrun_micro = 0;
  std::optional<Reservation> reservation;

  MicroUsd remaining() const { return std::max<MicroUsd>(0, total_budget_micro - spent_micro); }
};

struct DebitDecision {
  bool allowed = true;
  HintLevel capped_level = HintLevel::L0;
  bool force_local = false;
  std::string reason;  // empty when nothing was changed
};

namespace detail {
inline void add_reason(std::string& r, std::string_view why) {
  if (!r.empty()) r += ',';
  r += why;
}
}  // namespace detail

/// Checks the turn against the session budget and L3 cap and, when allowed,
/// places a provisional reservation that commit_debit or rollback_debit
/// must resolve. A denial is a result: the caller retries on the local tier.
inline DebitDecision check_and_debit(BudgetState& budget, MicroUsd est_cost_micro, HintLevel requested,
                                     PolicyMode policy) {
  if (est_cost_micro < 0) throw RequestError("est_cost_micro", "estimated cost must be >= 0");
  DebitDecision d;
  d.capped_level = requested;
  const auto traits = traits_of(policy);
  if (!traits.spend_limits) {
    budget.reservation = Reservation{est_cost_micro, requested};
    return d;
  }
  if (traits.l3_caps && requested == HintLevel::L3 && budget.l3_granted_count >= budget.l3_max) {
    d.capped_level = HintLevel::L2;
    detail::add_reason(d.reason, "l3_cap");
  }
  if (budget.spent_micro >= budget.total_budget_micro) {
    d.capped_level = HintLevel::L0;
    d.force_local = true;
    detail::add_reason(d.reason, "budget_exhausted");
    budget.reservation = Reservation{0, d.capped_level};
    return d;
  }
  if (budget.spent_micro + est_cost_micro > budget.total_budget_micro) {
    d.allowed = false;
    d.force_local = true;
    detail::add_reason(d.reason, "budget");
    return d;
  }
  budget.reservation = Reservation{est_cost_micro, d.capped_level};
  return d;
}

inline BudgetState& commit_debit(BudgetState& budget, MicroUsd actual_cost_micro, HintLevel granted,
                                 PolicyMode policy) {
  if (!budget.reservation) throw std::logic_error("commit_debit without a reservation");
  if (actual_cost_micro < 0) throw std::logic_error("negative actual cost");
  MicroUsd charge = actual_cost_micro;
  if (traits_of(policy).spend_limits) {
    const MicroUsd room = budget.remaining();
    if (charge > room) {
      budget.overrun_micro += charge - room;
      charge = room;
    }
  }
  budget.spent_micro += charge;
  if (granted == HintLevel::L3) ++budget.l3_granted_count;
  budget.reservation.reset();
  return budget;
}

inline BudgetState& rollback_debit(BudgetState& budget) {
  budget.reservation.reset();
  return budget;
}

// ---------------------------------------------------------------------------
// Approvals
// ---------------------------------------------------------------------------

enum class ApprovalDecision { Pending, Approved, Denied };

inline std::string to_string(ApprovalDecision d) {
  switch (d) {
    case ApprovalDecision::Pending: return "pending";
    case ApprovalDecision::Approved: return "approved";
    case ApprovalDecision::Denied: return "denied";
  }
  return "pending";
}

inline ApprovalDecision parse_approval_decision(std::string_view s) {
  if (s == "approved" || s == "approve") return ApprovalDecision::Approved;
  if (s == "denied" || s == "deny") return ApprovalDecision::Denied;
  throw RequestError("decision", "decision must be 'approve' or 'deny'");
}

struct ApprovalRequest {
  std::string approval_id;
  std::string session_id;
  HintLevel requested_level = HintLevel::L3;
  std::string justification;
  std::int64_t enqueued_at_ms = 0;
  std::int64_t decided_at_ms = 0;
  ApprovalDecision decision = ApprovalDecision::Pending;
  std::int64_t wait_ms = 0;
  bool consumed = false;  // a released turn used this approval
};

struct ApprovalError : std::runtime_error {
  explicit ApprovalError(std::string code)
      : std::runtime_error(code), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

inline bool approval_required(HintLevel level, PolicyMode policy) {
  return level == HintLevel::L3 && traits_of(policy).approvals;
}

/// FIFO approval queue. Thread-safe; ids are unique per queue.
class ApprovalQueue {
 public:
  std::string enqueue(ApprovalRequest req, PolicyMode policy) {
    if (!approval_required(req.requested_level, policy)) throw ApprovalError("approval_not_required");
    if (req.justification.find_first_not_of(" \t\r\n") == std::string::npos) {
      throw ApprovalError("justification_required");
    }
    std::lock_guard lock(mu_);
    std::ostringstream id;
    id << "apr-" << std::setw(6) << std::setfill('0') << ++next_id_;
    req.approval_id = id.str();
    req.decision = ApprovalDecision::Pending;
    order_.push_back(req.approval_id);
    requests_[req.approval_id] = std::move(req);
    return order_.back();
  }

  ApprovalRequest decide(const std::string& approval_id, ApprovalDecision decision, std::int64_t decided_at_ms) {
    if (decision == ApprovalDecision::Pending) throw ApprovalError("invalid_decision");
    std::lock_guard lock(mu_);
    auto it = requests_.find(approval_id);
    if (it == requests_.end()) throw ApprovalError("unknown_approval");
    auto& r = it->second;
    if (r.decision != ApprovalDecision::Pending) throw ApprovalError("already_decided");
    r.decision = decision;
    r.decided_at_ms = decided_at_ms;
    r.wait_ms = decided_at_ms - r.enqueued_at_ms;
    return r;
  }

  std::optional<ApprovalRequest> get(const std::string& approval_id) const {
    std::lock_guard lock(mu_);
    auto it = requests_.find(approval_id);
    if (it == requests_.end()) return std::nullopt;
    return it->second;
  }

  /// Marks an approved request as used by its released turn. Returns false if
  /// it is not an unused approval for this session.
  bool consume(const std::string& approval_id, const std::string& session_id) {
    std::lock_guard lock(mu_);
    auto it = requests_.find(approval_id);
    if (it == requests_.end()) return false;
    auto& r = it->second;
    if (r.session_id != session_id || r.decision != ApprovalDecision::Approved || r.consumed) return false;
    r.consumed = true;
    return true;
  }

  /// Pending requests in enqueue order.
  std::vector<ApprovalRequest> pending() const {
    std::lock_guard lock(mu_);
    std::vector<ApprovalRequest> out;
    for (const auto& id : order_) {
      const auto& r = requests_.at(id);
      if (r.decision == ApprovalDecision::Pending) out.push_back(r);
    }
    return out;
  }

  std::vector<ApprovalRequest> all() const {
    std::lock_guard lock(mu_);
    std::vector<ApprovalRequest> out;
    for (const auto& id : order_) out.push_back(requests_.at(id));
    return out;
  }

 private:
  mutable std::mutex mu_;
  std::uint64_t next_id_ = 0;
  std::deque<std::string> order_;
  std::map<std::string, ApprovalRequest> requests_;
};

/// c identical servers taking requests in FIFO order (M/M/c when service
/// times are exponential). assign() must be called in arrival order.
class ApprovalServers {
 public:
  explicit ApprovalServers(int servers) : free_at_(static_cast<std::size_t>(std::max(1, servers)), 0.0) {}

  /// Returns the completion time of a request arriving at `arrival`.
  double assign(double arrival, double service_time) {
    auto it = std::min_element(free_at_.begin(), free_at_.end());
    const double start = std::max(arrival, *it);
    *it = start + service_time;
    return *it;
  }

  std::size_t servers() const { return free_at_.size(); }

 private:
  std::vector<double> free_at_;
};

// ---------------------------------------------------------------------------
// Integrity throttle
// ---------------------------------------------------------------------------

struct IntegrityState {
  std::string session_id;
  int consecutive_flags = 0;
  bool throttled = false;
};

struct IntegrityOutcome {
  IntegrityState state;
  bool assistance_blocked = false;
};

inline IntegrityOutcome record_integrity(IntegrityState state, bool flagged, PolicyMode policy, int threshold = 3) {
  state.consecutive_flags = flagged ? state.consecutive_flags + 1 : 0;
  state.throttled = state.consecutive_flags >= threshold;
  const bool blocked = state.throttled && traits_of(policy).integrity_gating;
  return {std::move(state), blocked};
}

// ---------------------------------------------------------------------------
// Stickiness: teacher freeze, one-shot boost, canonical follow-up keys
// ---------------------------------------------------------------------------

struct StickyKey {
  std::string model_id;
  double expires_at_s = 0.0;
};

struct StickinessState {
  std::string session_id;
  std::optional<std::string> frozen_model;
  int freeze_turns_remaining = 0;                 // turn-based freeze
  std::optional<double> freeze_deadline_s;        // wall-clock freeze
  bool boost_pending = false;
  std::map<std::string, StickyKey> canonical_keys;

  bool freeze_active(double now_s) const {
    if (!frozen_model) return false;
    if (freeze_deadline_s) return now_s < *freeze_deadline_s;
    return freeze_turns_remaining > 0;
  }
};

enum class StickSource { Planned, Boost, Freeze, Canonical };

inline std::string to_string(StickSource s) {
  switch (s) {
    case StickSource::Planned: return "planned";
    case StickSource::Boost: return "boost";
    case StickSource::Freeze: return "freeze";
    case StickSource::Canonical: return "sticky";
  }
  return "planned";
}

struct StickyChoice {
  std::string model_id;
  StickSource source = StickSource::Planned;
};

/// Boost wins for exactly one turn, then an active freeze, then a live
/// canonical key, else the planned model. Consumes the boost and one freeze
/// turn when they apply.
inline StickyChoice apply_stickiness(StickinessState& state, const std::string& planned_model,
                                     const std::string& premium_model, double now_s,
                                     const std::string& canonical_id = {}) {
  if (state.boost_pending) {
    state.boost_pending = false;
    return {premium_model, StickSource::Boost};
  }
  if (state.freeze_active(now_s)) {
    if (!state.freeze_deadline_s) {
      --state.freeze_turns_remaining;
    }
    std::string m = *state.frozen_model;
    if (!state.freeze_active(now_s)) {
      state.frozen_model.reset();
      state.freeze_deadline_s.reset();
    }
    return {m, StickSource::Freeze};
  }
  if (state.frozen_model) {  // expired
    state.frozen_model.reset();
    state.freeze_deadline_s.reset();
    state.freeze_turns_remaining = 0;
  }
  if (!canonical_id.empty()) {
    auto it = state.canonical_keys.find(canonical_id);
    if (it != state.canonical_keys.end()) {
      if (now_s < it->second.expires_at_s) return {it->second.model_id, StickSource::Canonical};
      state.canonical_keys.erase(it);
    }
  }
  return {planned_model, StickSource::Planned};
}

inline void set_freeze_turns(StickinessState& s, std::string model, int turns) {
  s.frozen_model = std::move(model);
  s.freeze_turns_remaining = turns;
  s.freeze_deadline_s.reset();
}

inline void set_freeze_until(StickinessState& s, std::string model, double deadline_s) {
  s.frozen_model = std::move(model);
  s.freeze_deadline_s = deadline_s;
  s.freeze_turns_remaining = 0;
}

inline void clear_freeze(StickinessState& s) {
  s.frozen_model.reset();
  s.freeze_deadline_s.reset();
  s.freeze_turns_remaining = 0;
}

}  // namespace labroute
