#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace labroute {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RequestError : std::runtime_error {
  explicit RequestError(std::string field, const std::string& what)
      : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// ---------------------------------------------------------------------------
// Hint levels and policy modes
// ---------------------------------------------------------------------------

enum class HintLevel : std::uint8_t { L0 = 0, L1 = 1, L2 = 2, L3 = 3 };

inline constexpr std::array<HintLevel, 4> kAllHintLevels = {
    HintLevel::L0, HintLevel::L1, HintLevel::L2, HintLevel::L3};

constexpr int index_of(HintLevel h) noexcept { return static_cast<int>(h); }

constexpr auto operator<=>(HintLevel a, HintLevel b) noexcept {
  return index_of(a) <=> index_of(b);
}

constexpr bool is_high_scaffold(HintLevel h) noexcept {
  return h == HintLevel::L2 || h == HintLevel::L3;
}

constexpr HintLevel min_level(HintLevel a, HintLevel b) noexcept { return a < b ? a : b; }

inline std::string to_string(HintLevel h) {
  return "L" + std::to_string(index_of(h));
}

inline HintLevel parse_hint_level(std::string_view s) {
  if (s.size() == 2 && (s[0] == 'L' || s[0] == 'l') && s[1] >= '0' && s[1] <= '3') {
    return static_cast<HintLevel>(s[1] - '0');
  }
  throw ConfigError("invalid hint level '" + std::string(s) + "'");
}

enum class PolicyMode : std::uint8_t { P0 = 0, P1 = 1, P2 = 2 };

inline std::string to_string(PolicyMode p) {
  return "P" + std::to_string(static_cast<int>(p));
}

inline PolicyMode parse_policy_mode(std::string_view s) {
  if (s == "P0") return PolicyMode::P0;
  if (s == "P1") return PolicyMode::P1;
  if (s == "P2") return PolicyMode::P2;
  throw ConfigError("invalid policy mode '" + std::string(s) + "'");
}

// What each mode switches on. PolicyConfig files may tighten these but the
// mode fixes the baseline.
struct PolicyTraits {
  bool spend_limits;
  bool overlays;
  bool l3_caps;
  bool approvals;
  bool integrity_gating;
};

constexpr PolicyTraits traits_of(PolicyMode p) noexcept {
  switch (p) {
    case PolicyMode::P0: return {false, false, false, false, false};
    case PolicyMode::P1: return {true, true, true, false, false};
    case PolicyMode::P2: return {true, true, true, true, true};
  }
  return {false, false, false, false, false};
}

// ---------------------------------------------------------------------------
// Model tiers and prices
// ---------------------------------------------------------------------------

enum class Tier : std::uint8_t { Local, Premium };

inline std::string to_string(Tier t) { return t == Tier::Local ? "local" : "premium"; }

inline Tier parse_tier(std::string_view s) {
  if (s == "local" || s == "Local") return Tier::Local;
  if (s == "premium" || s == "Premium") return Tier::Premium;
  throw ConfigError("invalid tier '" + std::string(s) + "'");
}

struct ModelTier {
  Tier tier = Tier::Local;
  std::string model_id;

  friend bool operator==(const ModelTier&, const ModelTier&) = default;
};

/// Integer micro-dollars. All budget arithmetic happens in this unit.
using MicroUsd = std::int64_t;

inline MicroUsd usd_to_micro(double usd) { return static_cast<MicroUsd>(std::llround(usd * 1e6)); }
inline double micro_to_usd(MicroUsd m) { return static_cast<double>(m) / 1e6; }

struct ModelPrice {
  double input_usd_per_mtok = 0.0;
  double output_usd_per_mtok = 0.0;
  Tier tier = Tier::Local;
};

struct PriceBook {
  std::map<std::string, ModelPrice> models;

  const ModelPrice& at(const std::string& model_id) const {
    auto it = models.find(model_id);
    if (it == models.end()) throw ConfigError("model '" + model_id + "' not in price book");
    return it->second;
  }

  bool contains(const std::string& model_id) const { return models.count(model_id) != 0; }

  // First model registered for the tier, in model_id order.
  std::string model_for(Tier t) const {
    for (const auto& [id, p] : models) {
      if (p.tier == t) return id;
    }
    throw ConfigError("price book has no " + to_string(t) + " model");
  }

  Tier tier_of(const std::string& model_id) const { return at(model_id).tier; }

  /// The stock book: a premium hosted model and a zero-cost local deployment.
  static PriceBook defaults() {
    PriceBook b;
    b.models["openai/gpt-5-mini"] = {0.25, 2.00, Tier::Premium};
    b.models["openai/gpt-oss-20b"] = {0.0, 0.0, Tier::Local};
    return b;
  }
};

inline double token_cost(const std::string& model_id, std::int64_t input_tokens,
                         std::int64_t output_tokens, const PriceBook& prices) {
  if (input_tokens < 0 || output_tokens < 0) throw RequestError("tokens", "token counts must be >= 0");
  const auto& p = prices.at(model_id);
  return static_cast<double>(input_tokens) * p.input_usd_per_mtok / 1e6 +
         static_cast<double>(output_tokens) * p.output_usd_per_mtok / 1e6;
}

inline MicroUsd token_cost_micro(const std::string& model_id, std::int64_t input_tokens,
                                 std::int64_t output_tokens, const PriceBook& prices) {
  return usd_to_micro(token_cost(model_id, input_tokens, output_tokens, prices));
}

// ---------------------------------------------------------------------------
// Lab descriptors
// ---------------------------------------------------------------------------

/// Probabilities over (L0, L1, L2, L3).
using HintDist = std::array<double, 4>;

struct StepDescriptor {
  std::string step_id;
  int difficulty = 1;
  HintDist target_hint_dist{0.25, 0.25, 0.25, 0.25};
};

struct PhaseDescriptor {
  std::string phase_name;
  double arrival_rate = 0.0;  // requests per minute
};

struct LabDescriptor {
  std::string lab_id;
  std::vector<StepDescriptor> steps;
  std::vector<PhaseDescriptor> phases;

  const StepDescriptor* find_step(std::string_view id) const {
    for (const auto& s : steps) {
      if (s.step_id == id) return &s;
    }
    return nullptr;
  }
};

struct Violation {
  std::string field;
  std::string rule;
};

inline std::vector<Violation> validate_lab_descriptor(const LabDescriptor& lab) {
  std::vector<Violation> out;
  if (lab.lab_id.empty()) out.push_back({"lab_id", "must be non-empty"});
  for (const auto& s : lab.steps) {
    const std::string prefix = "steps[" + s.step_id + "]";
    if (s.difficulty < 1 || s.difficulty > 3) {
      out.push_back({prefix + ".difficulty", "must be in {1,2,3}"});
    }
    double sum = 0.0;
    bool range_ok = true;
    for (double p : s.target_hint_dist) {
      if (!(p >= 0.0 && p <= 1.0)) range_ok = false;
      sum += p;
    }
    if (!range_ok) out.push_back({prefix + ".target_hint_dist", "components must be in [0,1]"});
    if (std::abs(sum - 1.0) > 1e-9) {
      out.push_back({prefix + ".target_hint_dist", "must sum to 1"});
    }
  }
  for (const auto& p : lab.phases) {
    if (!(p.arrival_rate > 0.0)) {
      out.push_back({"phases[" + p.phase_name + "].arrival_rate", "must be > 0"});
    }
  }
  return out;
}

}  // namespace labroute
