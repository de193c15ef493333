#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/core.hpp"
#include "labroute/hash.hpp"
#include "labroute/random.hpp"

namespace labroute {

// ---------------------------------------------------------------------------
// Escalation model
// ---------------------------------------------------------------------------

using Transition = std::array<HintDist, 4>;

inline HintDist normalized(HintDist d) {
  double s = 0.0;
  for (double x : d) s += x;
  if (s <= 0.0) return {0.0, 1.0, 0.0, 0.0};
  for (double& x : d) x /= s;
  return d;
}

/// Per-phase Markov chain over requested hint levels. A step opens with a
/// draw from `initial`; later turns follow `transition` from the previous
/// request. After `trigger` unanswered L1 attempts the L1 row is replaced by
/// P(L2) = escalate_prob with the remaining mass spread over the other
/// columns in proportion to the base row.
struct EscalationModel {
  std::vector<HintDist> initial;       // per phase
  std::vector<Transition> transition;  // per phase
  double escalate_prob = 0.63;
  int trigger = 2;

  static EscalationModel defaults() {
    EscalationModel m;
    m.initial = {{0.18, 0.32, 0.40, 0.10}, {0.14, 0.32, 0.42, 0.12}, {0.10, 0.30, 0.44, 0.16}, {0.10, 0.30, 0.44, 0.16}};
    const Transition base = {{{0.40, 0.42, 0.14, 0.04},
                              {0.18, 0.50, 0.24, 0.08},
                              {0.10, 0.36, 0.38, 0.16},
                              {0.16, 0.40, 0.28, 0.16}}};
    const Transition hard = {{{0.34, 0.42, 0.18, 0.06},
                              {0.14, 0.46, 0.28, 0.12},
                              {0.08, 0.32, 0.40, 0.20},
                              {0.12, 0.38, 0.30, 0.20}}};
    m.transition = {base, base, hard, hard};
    return m;
  }

  std::vector<Violation> validate() const {
    std::vector<Violation> v;
    auto check = [&](const HintDist& d, const std::string& where) {
      double s = 0.0;
      for (double x : d) {
        if (x < 0.0) v.push_back({where, "negative probability"});
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) v.push_back({where, "row must sum to 1"});
    };
    if (initial.size() != transition.size()) v.push_back({"escalation", "initial and transition phase counts differ"});
    for (std::size_t p = 0; p < initial.size(); ++p) check(initial[p], "escalation.initial[" + std::to_string(p) + "]");
    for (std::size_t p = 0; p < transition.size(); ++p) {
      for (std::size_t r = 0; r < 4; ++r) {
        check(transition[p][r], "escalation.transition[" + std::to_string(p) + "][" + std::to_string(r) + "]");
      }
    }
    if (escalate_prob < 0.0 || escalate_prob > 1.0) v.push_back({"escalation.escalate_prob", "must be in [0,1]"});
    if (trigger < 1) v.push_back({"escalation.trigger", "must be >= 1"});
    return v;
  }

  /// The row actually sampled, before any cohort L3 scaling.
  HintDist row(std::size_t phase, std::optional<HintLevel> prev, int unanswered) const {
    phase = std::min(phase, initial.size() - 1);
    if (!prev) return initial[phase];
    HintDist r = transition[phase][static_cast<std::size_t>(index_of(*prev))];
    if (*prev == HintLevel::L1 && unanswered >= trigger) {
      const double rest = 1.0 - r[2];
      HintDist out{};
      for (std::size_t i = 0; i < 4; ++i) {
        if (i == 2) continue;
        out[i] = rest > 0.0 ? r[i] / rest * (1.0 - escalate_prob) : (1.0 - escalate_prob) / 3.0;
      }
      out[2] = escalate_prob;
      return out;
    }
    return r;
  }

  /// `l3_scale` multiplies the L3 column (cohort propensity); the row is
  /// renormalized afterwards. The escalation trigger row is left unscaled so
  /// its L2 probability stays exact.
  HintLevel next(std::size_t phase, std::optional<HintLevel> prev, int unanswered, double l3_scale, Rng& rng) const {
    HintDist r = row(phase, prev, unanswered);
    const bool triggered = prev && *prev == HintLevel::L1 && unanswered >= trigger;
    if (!triggered && l3_scale != 1.0) {
      r[3] *= l3_scale;
      r = normalized(r);
    }
    return static_cast<HintLevel>(rng.categorical(r));
  }
};

inline json to_json(const EscalationModel& m) {
  return {{"initial", m.initial},
          {"transition", m.transition},
          {"escalate_prob", m.escalate_prob},
          {"trigger", m.trigger}};
}

inline EscalationModel escalation_from_json(const json& j, EscalationModel base = EscalationModel::defaults()) {
  if (j.contains("initial")) base.initial = j.at("initial").get<std::vector<HintDist>>();
  if (j.contains("transition")) base.transition = j.at("transition").get<std::vector<Transition>>();
  base.escalate_prob = j.value("escalate_prob", base.escalate_prob);
  base.trigger = j.value("trigger", base.trigger);
  auto v = base.validate();
  if (!v.empty()) throw ConfigError(v.front().field + ": " + v.front().rule);
  return base;
}

// ---------------------------------------------------------------------------
// Integrity scenarios
// ---------------------------------------------------------------------------

struct IntegrityScenario {
  std::string name;
  std::vector<bool> flags;  // applied from a session-relative turn offset
};

inline std::vector<IntegrityScenario> default_integrity_scenarios() {
  return {{"fabricated_data", {true, true, true, true}},
          {"range_oscillation", {true, false, true, true, true, false, true}},
          {"isolated_flag", {true, false, false, true}}};
}

// ---------------------------------------------------------------------------
// Query text
// ---------------------------------------------------------------------------

inline const std::map<std::string, std::vector<std::string>>& paraphrase_table() {
  static const std::map<std::string, std::vector<std::string>> t = {
      {"measure", {"measuring", "read"}},
      {"voltage", {"volts"}},
      {"current", {"amps"}},
      {"resistor", {"resistance"}},
      {"capacitor", {"cap"}},
      {"oscilloscope", {"scope"}},
      {"signal", {"waveform"}},
      {"should", {"do I", "must"}},
      {"how", {"how exactly"}},
      {"what", {"which"}},
      {"why", {"how come"}},
      {"my", {"the"}},
      {"does", {"would"}},
      {"value", {"number"}},
      {"set", {"configure"}},
      {"get", {"obtain"}},
      {"wrong", {"off"}},
      {"use", {"pick"}},
  };
  return t;
}

/// Light rewording: optional lead-in, a few word swaps, optional tail.
/// `intensity` is the per-word swap probability.
inline std::string paraphrase(const std::string& text, Rng& rng, double intensity = 0.25) {
  static const std::vector<std::string> leads = {"", "", "quick question: ", "hi, ", "so ", "sorry, "};
  static const std::vector<std::string> tails = {"", "", " thanks", " any idea?", " please help"};
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (c == ' ') {
      if (!cur.empty()) words.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(cur);
  const auto& table = paraphrase_table();
  std::string out = leads[rng.below(leads.size())];
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::string w = words[i];
    std::string core = w, punct;
    while (!core.empty() && std::ispunct(static_cast<unsigned char>(core.back()))) {
      punct.insert(punct.begin(), core.back());
      core.pop_back();
    }
    std::string lower = core;
    for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (auto it = table.find(lower); it != table.end() && rng.bernoulli(intensity)) {
      w = it->second[rng.below(it->second.size())] + punct;
    }
    if (i) out += ' ';
    out += w;
  }
  out += tails[rng.below(tails.size())];
  return out;
}

inline const std::vector<std::string>& offbank_queries() {
  static const std::vector<std::string> q = {
      "where do I upload the lab report and what format does the instructor want",
      "can I leave early if my partner finishes the remaining measurements",
      "the bench computer keeps logging me out, who do I ask",
      "is it fine to reuse last week's breadboard or do I need a fresh one",
      "my partner is absent today, do I still need to do both parts of the lab alone",
      "how many significant figures should the final table have in general",
      "what is the grading rubric weight for the discussion section",
      "the printer in the lab is jammed, can I submit a pdf instead",
  };
  return q;
}

// ---------------------------------------------------------------------------
// Workload
// ---------------------------------------------------------------------------

struct WorkloadConfig {
  std::string lab_id;
  int students = 24;
  int cohorts = 4;
  double phase_minutes = 45.0;
  double rate_scale = 1.0;  // multiplies every phase rate
  double p_repeat_intent = 0.45;
  double p_offbank = 0.06;
  double paraphrase_intensity = 0.25;
  double integrity_rate = 0.2;  // fraction of sessions given a scenario
  std::uint64_t seed = 1;
};

struct Arrival {
  double t_s = 0.0;
  int student = 0;
  std::size_t phase = 0;
  std::size_t ordinal = 0;  // per-student turn ordinal, 0-based
  std::string query;
  std::string intent_id;  // empty for off-bank queries
  bool integrity_flag = false;
};

struct Workload {
  std::string lab_id;
  std::vector<Arrival> arrivals;  // sorted by (t_s, student)
  std::vector<std::string> scenario_of;  // per student, empty when none
};

inline std::string session_name(const std::string& lab, int student) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%03d", student);
  return lab + "-" + buf;
}

inline std::string cohort_name(int student, int cohorts) { return "cohort-" + std::to_string(student % std::max(1, cohorts)); }

/// Poisson arrival times on [0, duration) at `rate` per second.
inline std::vector<double> poisson_arrivals(double rate_per_s, double duration_s, Rng& rng) {
  std::vector<double> out;
  if (rate_per_s <= 0.0) return out;
  double t = rng.exponential(1.0 / rate_per_s);
  while (t < duration_s) {
    out.push_back(t);
    t += rng.exponential(1.0 / rate_per_s);
  }
  return out;
}

/// Bank entries grouped by step, for one lab. Entries carry "lab:<id>" and
/// "step:<id>" tags.
inline std::vector<std::vector<const CanonicalEntry*>> intents_by_phase(const Bank& bank, const LabDescriptor& lab) {
  std::vector<std::vector<const CanonicalEntry*>> out(lab.steps.size());
  for (const auto& e : bank.entries()) {
    if (!e.has_tag("lab:" + lab.lab_id)) continue;
    for (std::size_t i = 0; i < lab.steps.size(); ++i) {
      if (e.has_tag("step:" + lab.steps[i].step_id)) out[i].push_back(&e);
    }
  }
  return out;
}

inline Workload generate_workload(const WorkloadConfig& cfg, const LabDescriptor& lab, const Bank* bank,
                                  const std::vector<IntegrityScenario>& scenarios = default_integrity_scenarios()) {
  if (lab.phases.empty() || lab.phases.size() != lab.steps.size()) {
    throw ConfigError("lab '" + lab.lab_id + "' needs one phase per step");
  }
  for (const auto& p : lab.phases) {
    if (!(p.arrival_rate > 0.0)) throw ConfigError("phase '" + p.phase_name + "': arrival rate must be > 0");
  }
  Workload w;
  w.lab_id = lab.lab_id;
  w.scenario_of.assign(static_cast<std::size_t>(cfg.students), "");
  const auto intents = bank ? intents_by_phase(*bank, lab) : std::vector<std::vector<const CanonicalEntry*>>(lab.steps.size());
  const double phase_s = cfg.phase_minutes * 60.0;
  for (int s = 0; s < cfg.students; ++s) {
    Rng rng(mix_seed(mix_seed(cfg.seed, fnv1a64(lab.lab_id)), 0x51u + static_cast<std::uint64_t>(s)));
    std::vector<Arrival> mine;
    for (std::size_t p = 0; p < lab.phases.size(); ++p) {
      const double rate = lab.phases[p].arrival_rate * cfg.rate_scale / 60.0;
      const CanonicalEntry* last = nullptr;
      for (double t : poisson_arrivals(rate, phase_s, rng)) {
        Arrival a;
        a.t_s = static_cast<double>(p) * phase_s + t;
        a.student = s;
        a.phase = p;
        const auto& pool = intents[p];
        if (pool.empty() || rng.bernoulli(cfg.p_offbank)) {
          const auto& off = offbank_queries();
          a.query = off[rng.below(off.size())];
          last = nullptr;
        } else {
          const CanonicalEntry* e = (last && rng.bernoulli(cfg.p_repeat_intent)) ? last : pool[rng.below(pool.size())];
          a.query = paraphrase(e->text, rng, cfg.paraphrase_intensity);
          a.intent_id = e->id;
          last = e;
        }
        mine.push_back(std::move(a));
      }
    }
    for (std::size_t i = 0; i < mine.size(); ++i) mine[i].ordinal = i;
    if (!scenarios.empty() && !mine.empty() && rng.bernoulli(cfg.integrity_rate)) {
      const auto& sc = scenarios[rng.below(scenarios.size())];
      w.scenario_of[static_cast<std::size_t>(s)] = sc.name;
      const std::size_t span = sc.flags.size();
      const std::size_t room = mine.size() > span ? mine.size() - span : 0;
      const std::size_t offset = room ? rng.below(room + 1) : 0;
      for (std::size_t i = 0; i < span && offset + i < mine.size(); ++i) mine[offset + i].integrity_flag = sc.flags[i];
    }
    w.arrivals.insert(w.arrivals.end(), mine.begin(), mine.end());
  }
  std::stable_sort(w.arrivals.begin(), w.arrivals.end(), [](const Arrival& a, const Arrival& b) {
    return a.t_s != b.t_s ? a.t_s < b.t_s : a.student < b.student;
  });
  return w;
}

}  // namespace labroute
