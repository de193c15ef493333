#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/core.hpp"
#include "labroute/hash.hpp"

namespace labroute {

using json = nlohmann::json;

enum class OverlayMode { Off, EvaluateOnly, Enforce };

inline std::string to_string(OverlayMode m) {
  switch (m) {
    case OverlayMode::Off: return "off";
    case OverlayMode::EvaluateOnly: return "evaluate_only";
    case OverlayMode::Enforce: return "enforce";
  }
  return "off";
}

inline OverlayMode parse_overlay_mode(std::string_view s) {
  if (s == "off") return OverlayMode::Off;
  if (s == "evaluate_only") return OverlayMode::EvaluateOnly;
  if (s == "enforce") return OverlayMode::Enforce;
  throw ConfigError("invalid overlay mode '" + std::string(s) + "'");
}

/// When teacher actions reach a session: on its next routed turn, or only
/// when the session enters a new lab step.
enum class ActionSync { Turn, Step };

struct PolicyConfig {
  PolicyMode mode = PolicyMode::P1;
  MicroUsd total_budget_micro = 5'000'000;
  int l3_max = 2;
  int approval_servers = 2;
  // Teacher freeze lifetime: turns (simulator loop) and wall-clock (live).
  int freeze_turns = 3;
  double freeze_ttl_s = 300.0;
  // Canonical stickiness: (session, canonical id) -> model, held for this
  // long. Zero disables.
  double stickiness_ttl_s = 300.0;
  int integrity_threshold = 3;
  std::string overlay_id = "socratic_troubleshoot";
  OverlayMode overlay_mode = OverlayMode::Enforce;
  // Lenient guardrails only check preamble leakage, not final answers.
  bool strict_guardrail = true;
  bool canonical_enabled = true;
  // L2/L3 are throttled to L1 until this many turns were taken in the step.
  int high_scaffold_min_turns = 0;
  // Grants at or above this level are served by the premium tier.
  std::optional<HintLevel> premium_hint_floor;
  ActionSync action_sync = ActionSync::Turn;

  PolicyTraits traits() const { return traits_of(mode); }

  static PolicyConfig preset(PolicyMode m) {
    PolicyConfig c;
    c.mode = m;
    switch (m) {
      case PolicyMode::P0:
        c.overlay_mode = OverlayMode::EvaluateOnly;
        c.canonical_enabled = false;
        c.stickiness_ttl_s = 0.0;
        c.freeze_turns = 0;
        c.freeze_ttl_s = 0.0;
        c.action_sync = ActionSync::Step;
        break;
      case PolicyMode::P1:
        c.high_scaffold_min_turns = 1;
        c.premium_hint_floor = HintLevel::L2;
        break;
      case PolicyMode::P2:
        c.freeze_ttl_s = 1800.0;
        c.stickiness_ttl_s = 1800.0;
        c.high_scaffold_min_turns = 2;
        c.premium_hint_floor = HintLevel::L2;
        break;
    }
    return c;
  }
};

inline std::vector<Violation> validate_policy(const PolicyConfig& c) {
  std::vector<Violation> v;
  if (c.total_budget_micro < 0) v.push_back({"total_budget_micro", "must be >= 0"});
  if (c.l3_max < 0) v.push_back({"l3_max", "must be >= 0"});
  if (c.approval_servers < 1) v.push_back({"approval_servers", "must be >= 1"});
  if (c.freeze_turns < 0) v.push_back({"freeze_turns", "must be >= 0"});
  if (c.freeze_ttl_s < 0) v.push_back({"freeze_ttl_s", "must be >= 0"});
  if (c.stickiness_ttl_s < 0) v.push_back({"stickiness_ttl_s", "must be >= 0"});
  if (c.integrity_threshold < 1) v.push_back({"integrity_threshold", "must be >= 1"});
  if (c.high_scaffold_min_turns < 0) v.push_back({"high_scaffold_min_turns", "must be >= 0"});
  if (c.overlay_mode == OverlayMode::Enforce && c.overlay_id.empty()) {
    v.push_back({"overlay_id", "required when overlays are enforced"});
  }
  return v;
}

inline json to_json(const PolicyConfig& c) {
  json j = {
      {"mode", to_string(c.mode)},
      {"total_budget_micro", c.total_budget_micro},
      {"l3_max", c.l3_max},
      {"approval_servers", c.approval_servers},
      {"freeze_turns", c.freeze_turns},
      {"freeze_ttl_s", c.freeze_ttl_s},
      {"stickiness_ttl_s", c.stickiness_ttl_s},
      {"integrity_threshold", c.integrity_threshold},
      {"overlay_id", c.overlay_id},
      {"overlay_mode", to_string(c.overlay_mode)},
      {"strict_guardrail", c.strict_guardrail},
      {"canonical_enabled", c.canonical_enabled},
      {"high_scaffold_min_turns", c.high_scaffold_min_turns},
      {"action_sync", c.action_sync == ActionSync::Turn ? "turn" : "step"},
  };
  j["premium_hint_floor"] = c.premium_hint_floor ? json(to_string(*c.premium_hint_floor)) : json(nullptr);
  return j;
}

/// Missing keys fall back to the mode's preset, so a policy file can be as
/// short as {"mode": "P2"}.
inline PolicyConfig policy_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("policy must be an object");
  PolicyConfig c = PolicyConfig::preset(parse_policy_mode(j.value("mode", std::string("P1"))));
  try {
    c.total_budget_micro = j.value("total_budget_micro", c.total_budget_micro);
    if (j.contains("total_budget_usd")) c.total_budget_micro = usd_to_micro(j.at("total_budget_usd").get<double>());
    c.l3_max = j.value("l3_max", c.l3_max);
    c.approval_servers = j.value("approval_servers", c.approval_servers);
    c.freeze_turns = j.value("freeze_turns", c.freeze_turns);
    c.freeze_ttl_s = j.value("freeze_ttl_s", c.freeze_ttl_s);
    c.stickiness_ttl_s = j.value("stickiness_ttl_s", c.stickiness_ttl_s);
    c.integrity_threshold = j.value("integrity_threshold", c.integrity_threshold);
    c.overlay_id = j.value("overlay_id", c.overlay_id);
    if (j.contains("overlay_mode")) c.overlay_mode = parse_overlay_mode(j.at("overlay_mode").get<std::string>());
    c.strict_guardrail = j.value("strict_guardrail", c.strict_guardrail);
    c.canonical_enabled = j.value("canonical_enabled", c.canonical_enabled);
    c.high_scaffold_min_turns = j.value("high_scaffold_min_turns", c.high_scaffold_min_turns);
    if (j.contains("premium_hint_floor")) {
      const auto& f = j.at("premium_hint_floor");
      c.premium_hint_floor = f.is_null() ? std::nullopt
                                         : std::optional<HintLevel>(parse_hint_level(f.get<std::string>()));
    }
    if (j.contains("action_sync")) {
      auto s = j.at("action_sync").get<std::string>();
      if (s == "turn") c.action_sync = ActionSync::Turn;
      else if (s == "step") c.action_sync = ActionSync::Step;
      else throw ConfigError("invalid action_sync '" + s + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("policy: ") + e.what());
  }
  return c;
}

/// Stable identity of a policy: SHA-256 over its canonical JSON dump.
inline std::string policy_hash(const PolicyConfig& c) { return sha256_hex(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Labs and price books
// ---------------------------------------------------------------------------

inline HintDist hint_dist_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ConfigError("hint distribution must be a 4-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline LabDescriptor lab_from_json(const json& j) {
  LabDescriptor lab;
  try {
    lab.lab_id = j.at("lab_id").get<std::string>();
    for (const auto& s : j.at("steps")) {
      StepDescriptor sd;
      sd.step_id = s.at("step_id").get<std::string>();
      sd.difficulty = s.at("difficulty").get<int>();
      sd.target_hint_dist = hint_dist_from_json(s.at("target_hint_dist"));
      lab.steps.push_back(std::move(sd));
    }
    for (const auto& p : j.value("phases", json::array())) {
      lab.phases.push_back({p.at("phase_name").get<std::string>(), p.at("arrival_rate").get<double>()});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("lab descriptor: ") + e.what());
  }
  return lab;
}

inline json to_json(const LabDescriptor& lab) {
  json steps = json::array();
  for (const auto& s : lab.steps) {
    steps.push_back({{"step_id", s.step_id},
                     {"difficulty", s.difficulty},
                     {"target_hint_dist", s.target_hint_dist}});
  }
  json phases = json::array();
  for (const auto& p : lab.phases) phases.push_back({{"phase_name", p.phase_name}, {"arrival_rate", p.arrival_rate}});
  return {{"lab_id", lab.lab_id}, {"steps", steps}, {"phases", phases}};
}

inline PriceBook price_book_from_json(const json& j) {
  PriceBook b;
  try {
    for (const auto& [id, m] : j.at("models").items()) {
      ModelPrice p{m.at("input_usd_per_mtok").get<double>(), m.at("output_usd_per_mtok").get<double>(),
                   parse_tier(m.at("tier").get<std::string>())};
      if (p.input_usd_per_mtok < 0 || p.output_usd_per_mtok < 0) {
        throw ConfigError("price book: negative price for '" + id + "'");
      }
      b.models[id] = p;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("price book: ") + e.what());
  }
  return b;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

/// Config tree: <root>/labs/*.json, <root>/prices.json, <root>/policies/*.json.
struct ConfigTree {
  std::map<std::string, LabDescriptor> labs;
  PriceBook prices = PriceBook::defaults();
  std::map<std::string, PolicyConfig> policies;

  static ConfigTree load(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    ConfigTree t;
    if (fs::is_directory(root / "labs")) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(root / "labs")) {
        if (e.path().extension() == ".json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        auto lab = lab_from_json(read_json_file(f));
        auto v = validate_lab_descriptor(lab);
        if (!v.empty()) throw ConfigError(f.string() + ": " + v.front().field + " " + v.front().rule);
        t.labs[lab.lab_id] = std::move(lab);
      }
    }
    if (fs::exists(root / "prices.json")) t.prices = price_book_from_json(read_json_file(root / "prices.json"));
    if (fs::is_directory(root / "policies")) {
      for (const auto& e : fs::directory_iterator(root / "policies")) {
        if (e.path().extension() != ".json") continue;
        auto p = policy_from_json(read_json_file(e.path()));
        auto v = validate_policy(p);
        if (!v.empty()) throw ConfigError(e.path().string() + ": " + v.front().field + " " + v.front().rule);
        t.policies[to_string(p.mode)] = p;
      }
    }
    return t;
  }
};

}  // namespace labroute
