#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/config.hpp"
#include "labroute/core.hpp"
#include "labroute/hash.hpp"
#include "labroute/telemetry.hpp"

namespace labroute {

inline constexpr const char* kNoFingerprint = "none";

struct ChatMessage {
  std::string role;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct OverlayDefinition {
  std::string overlay_id;
  // May contain {hint_directive}, replaced by the directive for the granted level.
  std::string system_preamble;
  std::string response_postamble_rules;
};

/// Per-level directive spliced into the preamble.
inline std::string hint_directive(HintLevel h) {
  switch (h) {
    case HintLevel::L0: return "Only validate the student's approach or give a minimal prompt; keep to conceptual framing.";
    case HintLevel::L1: return "Give a guided troubleshooting hint and ask the student to justify each step.";
    case HintLevel::L2: return "You may show a worked example fragment, but leave the final result to the student.";
    case HintLevel::L3: return "A complete worked solution is permitted for this turn.";
  }
  return {};
}

inline std::string render_preamble(const OverlayDefinition& o, HintLevel granted) {
  std::string out = o.system_preamble;
  const std::string tag = "{hint_directive}";
  const std::string directive = hint_directive(granted);
  for (auto pos = out.find(tag); pos != std::string::npos; pos = out.find(tag, pos + directive.size())) {
    out.replace(pos, tag.size(), directive);
  }
  return out;
}

/// SHA-256 (hex) over the canonical JSON array [overlay_id, injected, rules].
inline std::string overlay_fingerprint(const std::string& overlay_id, const std::string& injected,
                                       const std::string& rules) {
  return sha256_hex(json::array({overlay_id, injected, rules}).dump());
}

inline std::string overlay_fingerprint(const OverlayDefinition& o, HintLevel granted) {
  return overlay_fingerprint(o.overlay_id, render_preamble(o, granted), o.response_postamble_rules);
}

struct OverlaySet {
  std::map<std::string, OverlayDefinition> overlays;
  // Lab id -> patterns that match a complete final answer; key "*" applies to every lab.
  std::map<std::string, std::vector<std::string>> answer_patterns;

  const OverlayDefinition& at(const std::string& id) const {
    auto it = overlays.find(id);
    if (it == overlays.end()) throw ConfigError("unknown overlay '" + id + "'");
    return it->second;
  }
  bool contains(const std::string& id) const { return overlays.count(id) != 0; }

  std::vector<std::string> patterns_for(const std::string& lab_id) const {
    std::vector<std::string> out;
    if (auto it = answer_patterns.find("*"); it != answer_patterns.end()) out = it->second;
    if (auto it = answer_patterns.find(lab_id); it != answer_patterns.end()) {
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
  }

  static OverlaySet defaults() {
    OverlaySet s;
    s.overlays["socratic_troubleshoot"] = {
        "socratic_troubleshoot",
        "You are a laboratory teaching assistant using Socratic troubleshooting. Ask guiding questions before "
        "offering explanations and never hand over measured values. {hint_directive}",
        "End with one question the student should answer next."};
    s.overlays["diagnostic"] = {
        "diagnostic",
        "You are a diagnostic laboratory assistant. Ask the student to report instrument settings and observed "
        "readings, then narrow down likely faults one at a time. {hint_directive}",
        "List at most three checks, ordered by likelihood."};
    s.answer_patterns["*"] = {R"((?:^|\W)final answer\s*[:=])"};
    s.answer_patterns["rc_step"] = {R"(\btau\s*=\s*[0-9]+(?:\.[0-9]+)?\s*(?:ms|us|s)\b)",
                                    R"(\btime constant is\s*[0-9]+(?:\.[0-9]+)?)"};
    s.answer_patterns["led_iv"] = {R"(\bn\s*=\s*[0-9]+(?:\.[0-9]+)?\b)",
                                   R"(\bforward voltage is\s*[0-9]+(?:\.[0-9]+)?\s*v\b)"};
    return s;
  }
};

inline std::vector<Violation> validate_overlays(const OverlaySet& s) {
  std::vector<Violation> v;
  for (const auto& [id, o] : s.overlays) {
    if (id.empty() || o.overlay_id != id) v.push_back({"overlays[" + id + "].overlay_id", "must match its key"});
    if (o.system_preamble.empty()) v.push_back({"overlays[" + id + "].system_preamble", "must be non-empty"});
  }
  for (const auto& [lab, pats] : s.answer_patterns) {
    for (const auto& p : pats) {
      try {
        std::regex re(p, std::regex::icase);
      } catch (const std::regex_error&) {
        v.push_back({"answer_patterns[" + lab + "]", "invalid regex '" + p + "'"});
      }
    }
  }
  return v;
}

inline OverlaySet overlays_from_json(const json& j) {
  OverlaySet s;
  try {
    std::set<std::string> seen;
    for (const auto& o : j.at("overlays")) {
      OverlayDefinition d{o.at("overlay_id").get<std::string>(), o.at("system_preamble").get<std::string>(),
                          o.value("response_postamble_rules", std::string())};
      if (!seen.insert(d.overlay_id).second) throw ConfigError("duplicate overlay_id '" + d.overlay_id + "'");
      s.overlays[d.overlay_id] = std::move(d);
    }
    if (j.contains("answer_patterns")) {
      for (const auto& [lab, pats] : j.at("answer_patterns").items()) {
        s.answer_patterns[lab] = pats.get<std::vector<std::string>>();
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("overlays: ") + e.what());
  }
  auto v = validate_overlays(s);
  if (!v.empty()) throw ConfigError("overlays: " + v.front().field + " " + v.front().rule);
  return s;
}

inline json to_json(const OverlaySet& s) {
  json arr = json::array();
  for (const auto& [id, o] : s.overlays) {
    arr.push_back({{"overlay_id", id},
                   {"system_preamble", o.system_preamble},
                   {"response_postamble_rules", o.response_postamble_rules}});
  }
  return {{"overlays", arr}, {"answer_patterns", s.answer_patterns}};
}

struct OverlayApplication {
  std::vector<ChatMessage> messages;
  std::string fingerprint = kNoFingerprint;
  std::string injected;  // exact system text added; empty when none
};

/// Injects the rendered preamble as a system message ahead of the first
/// non-system message. `overlay == nullptr` leaves the turn untouched.
inline OverlayApplication apply_overlay(const std::vector<ChatMessage>& messages, const OverlayDefinition* overlay,
                                        HintLevel granted_hint) {
  OverlayApplication out;
  if (overlay == nullptr) {
    out.messages = messages;
    return out;
  }
  out.injected = render_preamble(*overlay, granted_hint);
  if (!overlay->response_postamble_rules.empty()) out.injected += "\n" + overlay->response_postamble_rules;
  std::size_t insert_at = 0;
  while (insert_at < messages.size() && messages[insert_at].role == "system") ++insert_at;
  out.messages.assign(messages.begin(), messages.begin() + static_cast<std::ptrdiff_t>(insert_at));
  out.messages.push_back({"system", out.injected});
  out.messages.insert(out.messages.end(), messages.begin() + static_cast<std::ptrdiff_t>(insert_at), messages.end());
  out.fingerprint = overlay_fingerprint(*overlay, granted_hint);
  return out;
}

inline std::string lower_ascii(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

struct GuardrailVerdict {
  GuardrailResult result = GuardrailResult::None;
  std::string reason;
};

/// Declarative checks on a response produced under an overlay:
///  (a) no sentence of the injected preamble (>= 24 chars) is echoed verbatim;
///  (b) below L3, no lab answer pattern matches.
/// No overlay means nothing to verify.
inline GuardrailVerdict overlay_guardrail(const std::string& response, const OverlayDefinition* overlay,
                                          HintLevel granted_hint, const std::vector<std::regex>& answer_patterns) {
  if (overlay == nullptr) return {GuardrailResult::None, "no overlay"};
  const std::string resp = lower_ascii(response);
  const std::string preamble = lower_ascii(render_preamble(*overlay, granted_hint));
  std::size_t start = 0;
  while (start < preamble.size()) {
    std::size_t end = preamble.find_first_of(".?!\n", start);
    if (end == std::string::npos) end = preamble.size();
    std::string sentence = preamble.substr(start, end - start);
    auto b = sentence.find_first_not_of(' ');
    if (b != std::string::npos) sentence = sentence.substr(b);
    if (sentence.size() >= 24 && resp.find(sentence) != std::string::npos) {
      return {GuardrailResult::Fail, "leakage"};
    }
    start = end + 1;
  }
  if (granted_hint < HintLevel::L3) {
    for (const auto& re : answer_patterns) {
      if (std::regex_search(response, re)) {
        return {GuardrailResult::Fail, "final_answer"};
      }
    }
  }
  return {GuardrailResult::Pass, ""};
}

inline std::vector<std::regex> compile_patterns(const std::vector<std::string>& patterns) {
  std::vector<std::regex> out;
  out.reserve(patterns.size());
  for (const auto& p : patterns) out.emplace_back(p, std::regex::icase);
  return out;
}

inline GuardrailVerdict overlay_guardrail(const std::string& response, const OverlayDefinition* overlay,
                                          HintLevel granted_hint, const std::vector<std::string>& answer_patterns) {
  return overlay_guardrail(response, overlay, granted_hint, compile_patterns(answer_patterns));
}

}  // namespace labroute
