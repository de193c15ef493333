#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/core.hpp"
#include "labroute/telemetry.hpp"

namespace labroute {

/// A metric with its denominator. `value` is empty when undefined.
struct MetricValue {
  std::optional<double> value;
  std::size_t denominator = 0;
  std::size_t excluded = 0;  // items dropped from the denominator (see each metric)
  std::string note;

  double or_nan() const { return value ? *value : std::nan(""); }
};

inline json to_json(const MetricValue& m) {
  json j = {{"value", m.value ? json(*m.value) : json(nullptr)},
            {"denominator", m.denominator},
            {"excluded", m.excluded}};
  if (!m.note.empty()) j["note"] = m.note;
  return j;
}

namespace metrics_detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

/// Events grouped per session, each group sorted by turn_index.
inline std::map<std::string, std::vector<const TelemetryEvent*>> by_session(const std::vector<TelemetryEvent>& events) {
  std::map<std::string, std::vector<const TelemetryEvent*>> out;
  for (const auto& e : events) out[e.session_id].push_back(&e);
  for (auto& [_, v] : out) {
    std::sort(v.begin(), v.end(),
              [](const TelemetryEvent* a, const TelemetryEvent* b) { return a->turn_index < b->turn_index; });
  }
  return out;
}

inline const StepDescriptor* find_step(const std::map<std::string, LabDescriptor>& labs, const std::string& lab,
                                       const std::string& step) {
  auto it = labs.find(lab);
  return it == labs.end() ? nullptr : it->second.find_step(step);
}

}  // namespace metrics_detail

/// Challenge alignment. Steps are (lab, step) pairs pooled over sessions;
/// `excluded` counts steps seen in the trace without a descriptor.
inline MetricValue cai(const std::vector<TelemetryEvent>& events, const std::map<std::string, LabDescriptor>& labs) {
  std::map<std::pair<std::string, std::string>, std::array<std::size_t, 4>> counts;
  for (const auto& e : events) counts[{e.lab_id, e.step_id}][static_cast<std::size_t>(index_of(e.hint_granted))]++;
  MetricValue m;
  double sum = 0.0;
  for (const auto& [key, c] : counts) {
    const auto* step = metrics_detail::find_step(labs, key.first, key.second);
    if (step == nullptr) {
      ++m.excluded;
      continue;
    }
    const double n = static_cast<double>(c[0] + c[1] + c[2] + c[3]);
    double l1 = 0.0;
    for (std::size_t i = 0; i < 4; ++i) l1 += std::abs(static_cast<double>(c[i]) / n - step->target_hint_dist[i]);
    sum += 0.5 * l1;
    ++m.denominator;
  }
  if (m.denominator > 0) m.value = 1.0 - sum / static_cast<double>(m.denominator);
  return m;
}

/// Overlay adherence over turns with a guardrail verdict.
inline MetricValue oas(const std::vector<TelemetryEvent>& events) {
  MetricValue m;
  std::size_t pass = 0;
  for (const auto& e : events) {
    if (e.guardrail_result == GuardrailResult::None) {
      ++m.excluded;
      continue;
    }
    ++m.denominator;
    if (e.guardrail_result == GuardrailResult::Pass) ++pass;
  }
  if (m.denominator > 0) m.value = static_cast<double>(pass) / static_cast<double>(m.denominator);
  return m;
}

/// Productive-struggle window over (session, lab, step) episodes. An episode
/// with no L2/L3 grant contributes (turns + 1) / d and is counted in
/// `excluded` as censored (it stays in the denominator).
inline MetricValue psw(const std::vector<TelemetryEvent>& events, const std::map<std::string, LabDescriptor>& labs) {
  MetricValue m;
  double sum = 0.0;
  std::size_t censored = 0, unknown = 0;
  for (const auto& [session, turns] : metrics_detail::by_session(events)) {
    struct Episode {
      std::size_t count = 0;
      std::optional<std::size_t> first_high;
    };
    std::map<std::pair<std::string, std::string>, Episode> eps;
    for (const auto* e : turns) {
      auto& ep = eps[{e->lab_id, e->step_id}];
      ++ep.count;
      if (!ep.first_high && is_high_scaffold(e->hint_granted)) ep.first_high = ep.count;
    }
    for (const auto& [key, ep] : eps) {
      const auto* step = metrics_detail::find_step(labs, key.first, key.second);
      if (step == nullptr) {
        ++unknown;
        continue;
      }
      std::size_t k = ep.first_high ? *ep.first_high : ep.count + 1;
      if (!ep.first_high) ++censored;
      sum += static_cast<double>(k) / static_cast<double>(step->difficulty);
      ++m.denominator;
    }
  }
  m.excluded = censored;
  std::ostringstream note;
  note << "censored episodes: " << censored << " (k = turns + 1)";
  if (unknown) note << "; episodes without descriptor dropped: " << unknown;
  m.note = note.str();
  if (m.denominator > 0) m.value = sum / static_cast<double>(m.denominator);
  return m;
}

/// Delay t'(a) - t(a) per action; actions never referenced are excluded.
inline std::vector<double> action_delays(const std::vector<TelemetryEvent>& events,
                                         const std::vector<TeacherAction>& actions, std::size_t* unreferenced = nullptr) {
  std::map<std::string, std::int64_t> first_ref;  // key: session \x1f action
  for (const auto& e : events) {
    for (const auto& id : e.action_ids) {
      const std::string key = e.session_id + '\x1f' + id;
      auto it = first_ref.find(key);
      if (it == first_ref.end() || e.turn_index < it->second) first_ref[key] = e.turn_index;
    }
  }
  std::vector<double> delays;
  std::size_t missing = 0;
  for (const auto& a : actions) {
    auto it = first_ref.find(a.session_id + '\x1f' + a.action_id);
    if (it == first_ref.end()) {
      ++missing;
      continue;
    }
    delays.push_back(static_cast<double>(it->second - a.t));
  }
  if (unreferenced) *unreferenced = missing;
  return delays;
}

/// Instructor-influence latency in turns; even counts take the mean of the
/// two middle delays.
inline MetricValue iil(const std::vector<TelemetryEvent>& events, const std::vector<TeacherAction>& actions) {
  MetricValue m;
  auto delays = action_delays(events, actions, &m.excluded);
  m.denominator = delays.size();
  if (!delays.empty()) m.value = metrics_detail::median(std::move(delays));
  return m;
}

/// Gini by the pairwise-difference formula. All-zero input gives 0.
inline double gini(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double total = 0.0;
  for (double v : x) total += v;
  if (total == 0.0) return 0.0;
  // Sorted form of sum_ij |xi - xj|: 2 * sum_i (2i - n + 1) x_(i).
  std::vector<double> s = x;
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += (2.0 * static_cast<double>(i) - n + 1.0) * s[i];
  const double mean = total / n;
  return 2.0 * acc / (2.0 * n * n * mean);
}

/// Per-cohort L3 grant counts over every cohort that appears in the trace.
inline std::map<std::string, double> l3_by_cohort(const std::vector<TelemetryEvent>& events) {
  std::map<std::string, double> c;
  for (const auto& e : events) {
    const std::string& cohort = e.cohort_id.empty() ? e.session_id : e.cohort_id;
    c[cohort] += e.hint_granted == HintLevel::L3 ? 1.0 : 0.0;
  }
  return c;
}

inline MetricValue ei(const std::vector<TelemetryEvent>& events) {
  MetricValue m;
  auto counts = l3_by_cohort(events);
  std::vector<double> x;
  for (const auto& [_, v] : counts) x.push_back(v);
  m.denominator = x.size();
  if (!x.empty()) m.value = 1.0 - gini(x);
  return m;
}

inline MetricValue ei_from_counts(const std::vector<double>& counts) {
  MetricValue m;
  m.denominator = counts.size();
  if (!counts.empty()) m.value = 1.0 - gini(counts);
  return m;
}

inline MetricValue chr(const std::vector<TelemetryEvent>& events, double tau) {
  MetricValue m;
  std::size_t hits = 0;
  for (const auto& e : events) {
    ++m.denominator;
    if (!e.canonical_scores.empty() && e.max_score() >= tau) ++hits;
  }
  if (m.denominator > 0) m.value = static_cast<double>(hits) / static_cast<double>(m.denominator);
  return m;
}

inline MetricValue fcr(const std::vector<TelemetryEvent>& events, double tau) {
  MetricValue m;
  std::size_t n = 0;
  for (const auto& e : events) {
    ++m.denominator;
    if (e.fallback && !e.canonical_scores.empty() && e.max_score() >= tau) ++n;
  }
  if (m.denominator > 0) m.value = static_cast<double>(n) / static_cast<double>(m.denominator);
  return m;
}

/// Tier retention over consecutive same-session turns sharing the rank-1
/// canonical id. An empty pair set reports 0 with denominator 0.
inline MetricValue css(const std::vector<TelemetryEvent>& events) {
  MetricValue m;
  std::size_t kept = 0;
  for (const auto& [_, turns] : metrics_detail::by_session(events)) {
    for (std::size_t i = 1; i < turns.size(); ++i) {
      const auto* prev = turns[i - 1]->top_canonical();
      const auto* cur = turns[i]->top_canonical();
      if (!prev || !cur || *prev != *cur) continue;
      ++m.denominator;
      if (turns[i]->tier == turns[i - 1]->tier) ++kept;
    }
  }
  m.value = m.denominator > 0 ? static_cast<double>(kept) / static_cast<double>(m.denominator) : 0.0;
  if (m.denominator == 0) m.note = "no consecutive same-canonical turns";
  return m;
}

inline MetricValue crg(double cost_embed, double cost_heur) {
  MetricValue m;
  m.denominator = 1;
  if (cost_heur == 0.0) {
    m.note = "heuristic cost is zero";
    m.denominator = 0;
    return m;
  }
  m.value = (cost_heur - cost_embed) / cost_heur;
  return m;
}

/// Canonical metadata for routing correctness: canonical id -> difficulty
/// bucket, and bucket -> preferred tier.
struct CanonicalMetadata {
  std::map<std::string, std::string> bucket_of;
  std::map<std::string, Tier> preferred_tier;
};

inline std::map<std::string, MetricValue> routing_correctness(const std::vector<TelemetryEvent>& events,
                                                              const CanonicalMetadata& meta) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  for (const auto& [bucket, _] : meta.preferred_tier) tally[bucket];
  for (const auto& e : events) {
    const auto* id = e.top_canonical();
    if (!id) continue;
    auto b = meta.bucket_of.find(*id);
    if (b == meta.bucket_of.end()) continue;
    auto p = meta.preferred_tier.find(b->second);
    if (p == meta.preferred_tier.end()) continue;
    auto& t = tally[b->second];
    ++t.second;
    if (e.tier == p->second) ++t.first;
  }
  std::map<std::string, MetricValue> out;
  for (const auto& [bucket, t] : tally) {
    MetricValue m;
    m.denominator = t.second;
    if (t.second > 0) m.value = static_cast<double>(t.first) / static_cast<double>(t.second);
    out[bucket] = m;
  }
  return out;
}

inline double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double num = 0, den = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - mx) * (y[i] - my);
    den += (x[i] - mx) * (x[i] - mx);
  }
  return den == 0.0 ? 0.0 : num / den;
}

/// Slope of the L3 share per bucket index. Each session's turns are split
/// into `buckets` equal-count slices (turn i of n goes to floor(i*B/n)) and
/// pooled across sessions; empty buckets are skipped.
inline MetricValue autonomy_trend(const std::vector<TelemetryEvent>& events, int buckets = 3) {
  MetricValue m;
  if (buckets < 1) buckets = 1;
  std::vector<std::size_t> l3(static_cast<std::size_t>(buckets), 0), total(static_cast<std::size_t>(buckets), 0);
  for (const auto& [_, turns] : metrics_detail::by_session(events)) {
    const std::size_t n = turns.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t b = i * static_cast<std::size_t>(buckets) / n;
      ++total[b];
      if (turns[i]->hint_granted == HintLevel::L3) ++l3[b];
    }
  }
  std::vector<double> xs, ys;
  for (std::size_t b = 0; b < total.size(); ++b) {
    if (total[b] == 0) continue;
    xs.push_back(static_cast<double>(b));
    ys.push_back(static_cast<double>(l3[b]) / static_cast<double>(total[b]));
  }
  m.denominator = xs.size();
  if (xs.size() >= 2) m.value = least_squares_slope(xs, ys);
  else m.note = "fewer than two non-empty buckets";
  return m;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricReport {
  MetricValue cai, oas, psw, iil, ei, chr, css, fcr, crg, autonomy;
  std::map<std::string, MetricValue> correctness_by_difficulty;
  std::size_t events = 0;
  std::size_t sessions = 0;
  MicroUsd total_cost_micro = 0;
  double tau = 0.82;
};

struct MetricInputs {
  const std::vector<TelemetryEvent>* events = nullptr;
  const std::map<std::string, LabDescriptor>* labs = nullptr;
  const std::vector<TeacherAction>* actions = nullptr;
  const CanonicalMetadata* canonical = nullptr;
  double tau = 0.82;
  int autonomy_buckets = 3;
};

inline MetricReport compute_report(const MetricInputs& in) {
  static const std::map<std::string, LabDescriptor> no_labs;
  static const std::vector<TeacherAction> no_actions;
  const auto& ev = *in.events;
  const auto& labs = in.labs ? *in.labs : no_labs;
  MetricReport r;
  r.tau = in.tau;
  r.events = ev.size();
  r.sessions = metrics_detail::by_session(ev).size();
  for (const auto& e : ev) r.total_cost_micro += e.cost_micro;
  r.cai = cai(ev, labs);
  r.oas = oas(ev);
  r.psw = psw(ev, labs);
  r.iil = iil(ev, in.actions ? *in.actions : no_actions);
  r.ei = ei(ev);
  r.chr = chr(ev, in.tau);
  r.fcr = fcr(ev, in.tau);
  r.css = css(ev);
  r.autonomy = autonomy_trend(ev, in.autonomy_buckets);
  if (in.canonical) r.correctness_by_difficulty = routing_correctness(ev, *in.canonical);
  return r;
}

inline json to_json(const MetricReport& r) {
  json c = json::object();
  for (const auto& [k, v] : r.correctness_by_difficulty) c[k] = to_json(v);
  return {{"events", r.events},
          {"sessions", r.sessions},
          {"tau", r.tau},
          {"total_cost_usd", micro_to_usd(r.total_cost_micro)},
          {"cai", to_json(r.cai)},
          {"oas", to_json(r.oas)},
          {"psw", to_json(r.psw)},
          {"iil", to_json(r.iil)},
          {"ei", to_json(r.ei)},
          {"chr", to_json(r.chr)},
          {"crg", to_json(r.crg)},
          {"css", to_json(r.css)},
          {"fcr", to_json(r.fcr)},
          {"autonomy_trend", to_json(r.autonomy)},
          {"correctness_by_difficulty", c}};
}

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

inline constexpr const char* kMetricCsvHeader = "events,sessions,cost_usd,cai,oas,psw,iil,ei,chr,crg,css,fcr,autonomy";

inline std::string metric_csv_row(const MetricReport& r) {
  std::ostringstream o;
  char cost[32];
  std::snprintf(cost, sizeof cost, "%.6f", micro_to_usd(r.total_cost_micro));
  o << r.events << ',' << r.sessions << ',' << cost << ',' << format_metric(r.cai.value) << ','
    << format_metric(r.oas.value) << ',' << format_metric(r.psw.value) << ',' << format_metric(r.iil.value) << ','
    << format_metric(r.ei.value) << ',' << format_metric(r.chr.value) << ',' << format_metric(r.crg.value) << ','
    << format_metric(r.css.value) << ',' << format_metric(r.fcr.value) << ',' << format_metric(r.autonomy.value);
  return o.str();
}

}  // namespace labroute
