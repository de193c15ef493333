#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "labroute/backend.hpp"
#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/embedding.hpp"
#include "labroute/gateway.hpp"
#include "labroute/metrics.hpp"
#include "labroute/router.hpp"
#include "labroute/router_http.hpp"
#include "labroute/telemetry.hpp"

namespace labroute {

inline const std::vector<std::string>& difficulty_buckets() {
  static const std::vector<std::string> b = {"easy", "moderate", "advanced"};
  return b;
}

/// Tier a query of this difficulty ought to land on.
inline Tier preferred_tier(const std::string& difficulty) {
  return difficulty == "advanced" ? Tier::Premium : Tier::Local;
}

inline std::string tag_value(const CanonicalEntry& e, const std::string& prefix) {
  for (const auto& t : e.tags) {
    if (t.rfind(prefix, 0) == 0) return t.substr(prefix.size());
  }
  return {};
}

struct ReplayQuery {
  std::string query_id;
  std::string text;
  std::string lab_id;
  std::string step_id;
  std::string difficulty;
  std::string canonical_id;
  Tier preferred = Tier::Local;
};

/// Per-lab query counts by bucket.
using ReplayComposition = std::map<std::string, std::map<std::string, int>>;

inline ReplayComposition default_replay_composition() {
  return {{"rc_step", {{"easy", 20}, {"moderate", 25}, {"advanced", 15}}},
          {"led_iv", {{"easy", 15}, {"moderate", 15}, {"advanced", 10}}}};
}

/// Every bucket entry is queried once; extra queries cycle over entries whose
/// preferred model already sits on the bucket's tier, so deliberate gaps in
/// the bank are counted exactly once each.
inline std::vector<ReplayQuery> build_replay_workload(const Bank& bank, const PriceBook& prices,
                                                      const ReplayComposition& comp = default_replay_composition(),
                                                      std::uint64_t seed = 0) {
  std::vector<ReplayQuery> out;
  for (const auto& [lab, buckets] : comp) {
    for (const auto& bucket : difficulty_buckets()) {
      auto it = buckets.find(bucket);
      if (it == buckets.end() || it->second == 0) continue;
      const int want = it->second;
      std::vector<const CanonicalEntry*> pool, normal;
      for (const auto& e : bank.entries()) {
        if (!e.has_tag("lab:" + lab) || tag_value(e, "difficulty:") != bucket) continue;
        pool.push_back(&e);
        if (prices.contains(e.preferred_model) && prices.tier_of(e.preferred_model) == preferred_tier(bucket)) {
          normal.push_back(&e);
        }
      }
      if (pool.empty()) throw ConfigError("replay: bank has no " + bucket + " entries for lab '" + lab + "'");
      std::vector<const CanonicalEntry*> picked;
      for (std::size_t i = 0; i < pool.size() && static_cast<int>(picked.size()) < want; ++i) picked.push_back(pool[i]);
      const auto& extra = normal.empty() ? pool : normal;
      for (std::size_t i = 0; static_cast<int>(picked.size()) < want; ++i) picked.push_back(extra[i % extra.size()]);
      for (const auto* e : picked) {
        ReplayQuery q;
        q.text = e->text;
        q.lab_id = lab;
        q.step_id = tag_value(*e, "step:");
        q.difficulty = bucket;
        q.canonical_id = e->id;
        q.preferred = preferred_tier(bucket);
        out.push_back(std::move(q));
      }
    }
  }
  Rng rng(mix_seed(seed, fnv1a64("replay")));
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "q%03zu", i + 1);
    out[i].query_id = buf;
  }
  return out;
}

enum class ReplayPath { Premium, Local, Routed };

inline std::string to_string(ReplayPath p) {
  switch (p) {
    case ReplayPath::Premium: return "premium";
    case ReplayPath::Local: return "local";
    case ReplayPath::Routed: return "routed";
  }
  return "?";
}

inline ReplayPath parse_replay_path(const std::string& s) {
  if (s == "premium") return ReplayPath::Premium;
  if (s == "local") return ReplayPath::Local;
  if (s == "routed") return ReplayPath::Routed;
  throw ConfigError("unknown replay path '" + s + "'");
}

struct ReplayRecord {
  std::string query_id;
  ReplayPath path = ReplayPath::Premium;
  std::string lab_id;
  std::string difficulty;
  std::string canonical_id;  // workload intent
  std::string model_id;
  Tier tier = Tier::Local;
  double plan_ms = 0.0;
  double backend_ttft_ms = 0.0;
  double ttft_ms = 0.0;
  double latency_ms = 0.0;
  std::int64_t tokens_prompt = 0;
  std::int64_t tokens_completion = 0;
  MicroUsd cost_micro = 0;
  std::vector<std::string> canonical_ids;
  std::vector<double> canonical_scores;
  bool fallback = false;
  std::string route_why;
  bool failed = false;
  std::string error;
};

inline json to_json(const ReplayRecord& r) {
  return {{"query_id", r.query_id},
          {"path", to_string(r.path)},
          {"lab_id", r.lab_id},
          {"difficulty", r.difficulty},
          {"intent_id", r.canonical_id},
          {"model", r.model_id},
          {"tier", to_string(r.tier)},
          {"plan_ms", r.plan_ms},
          {"backend_ttft_ms", r.backend_ttft_ms},
          {"ttft_ms", r.ttft_ms},
          {"latency_ms", r.latency_ms},
          {"tokens_prompt", r.tokens_prompt},
          {"tokens_completion", r.tokens_completion},
          {"cost_usd", micro_to_usd(r.cost_micro)},
          {"canonical_ids", r.canonical_ids},
          {"canonical_scores", r.canonical_scores},
          {"fallback", r.fallback},
          {"route_why", r.route_why},
          {"failed", r.failed},
          {"error", r.error}};
}

struct PathSummary {
  ReplayPath path = ReplayPath::Premium;
  std::size_t queries = 0;
  std::size_t failed = 0;
  MicroUsd cost_micro = 0;
  double mean_latency_ms = 0.0;
  double mean_ttft_ms = 0.0;
  double mean_plan_ms = 0.0;
  double mean_backend_ttft_ms = 0.0;
  double local_share = 0.0;
};

struct ReplayReport {
  std::vector<ReplayRecord> records;
  std::map<ReplayPath, PathSummary> paths;
  // Routed path only.
  std::map<std::string, MetricValue> correctness;
  std::optional<double> chr;
  std::optional<double> fcr;
  std::optional<double> savings;  // needs both premium and routed
};

struct ReplaySetup {
  std::shared_ptr<const Bank> bank;
  std::shared_ptr<const EmbeddingProvider> provider;
  PriceBook prices = PriceBook::defaults();
  OverlaySet overlays = OverlaySet::defaults();
  std::map<std::string, LabDescriptor> labs;
  PolicyConfig policy = PolicyConfig::preset(PolicyMode::P1);
  RouterConfig router;
  std::map<std::string, std::shared_ptr<BackendClient>> backends;
  bool live = false;  // live backends: failures are logged and excluded
};

namespace replay_detail {

inline ChatTurn turn_for(const ReplayQuery& q) {
  ChatTurn t;
  t.session_id = "replay-" + q.query_id;
  t.lab_id = q.lab_id;
  t.step_id = q.step_id;
  t.messages = {{"user", q.text}};
  t.labels["difficulty"] = q.difficulty;
  return t;
}

inline ReplayRecord base_record(const ReplayQuery& q, ReplayPath p) {
  ReplayRecord r;
  r.query_id = q.query_id;
  r.path = p;
  r.lab_id = q.lab_id;
  r.difficulty = q.difficulty;
  r.canonical_id = q.canonical_id;
  return r;
}

}  // namespace replay_detail

/// Sends every query straight to one tier, no router.
inline std::vector<ReplayRecord> replay_direct(const std::vector<ReplayQuery>& queries, Tier tier,
                                               const ReplaySetup& setup) {
  const std::string model = setup.prices.model_for(tier);
  auto it = setup.backends.find(model);
  if (it == setup.backends.end()) throw ConfigError("replay: no backend for '" + model + "'");
  const ReplayPath path = tier == Tier::Premium ? ReplayPath::Premium : ReplayPath::Local;
  std::vector<ReplayRecord> out;
  for (const auto& q : queries) {
    auto r = replay_detail::base_record(q, path);
    r.model_id = model;
    r.tier = tier;
    BackendRequest req;
    req.model_id = model;
    req.messages = {{"user", q.text}};
    req.labels["difficulty"] = q.difficulty;
    try {
      auto resp = it->second->complete(req);
      r.backend_ttft_ms = resp.ttft_ms;
      r.ttft_ms = resp.ttft_ms;
      r.latency_ms = resp.latency_ms;
      r.tokens_prompt = resp.tokens_prompt;
      r.tokens_completion = resp.tokens_completion;
      r.cost_micro = token_cost_micro(model, resp.tokens_prompt, resp.tokens_completion, setup.prices);
    } catch (const BackendError& e) {
      if (!setup.live) throw;
      r.failed = true;
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Governed path: gateway in front of an in-process router, one session per
/// query, queries in order.
inline std::vector<ReplayRecord> replay_routed(const std::vector<ReplayQuery>& queries, const ReplaySetup& setup) {
  RouterSnapshot snap;
  snap.policy = setup.policy;
  snap.config = setup.router;
  snap.overlays = setup.overlays;
  snap.prices = setup.prices;
  snap.labs = setup.labs;
  Router router(std::move(snap), setup.bank, setup.provider);
  InProcessRouter service(router);
  TraceStore trace;
  GatewayConfig gc;
  gc.prices = setup.prices;
  Gateway gw(service, setup.backends, trace, gc);
  std::vector<ReplayRecord> out;
  for (const auto& q : queries) {
    auto r = replay_detail::base_record(q, ReplayPath::Routed);
    try {
      auto res = gw.handle_turn(replay_detail::turn_for(q));
      const auto& e = res.event;
      r.model_id = e.model;
      r.tier = res.plan.tier;
      r.plan_ms = e.plan_ms;
      r.ttft_ms = e.ttft_ms;
      r.backend_ttft_ms = e.ttft_ms - e.plan_ms;
      r.latency_ms = e.latency_ms;
      r.tokens_prompt = e.tokens_prompt;
      r.tokens_completion = e.tokens_completion;
      r.cost_micro = e.cost_micro;
      r.canonical_ids = e.canonical_ids;
      r.canonical_scores = e.canonical_scores;
      r.fallback = e.fallback;
      r.route_why = e.route_why;
    } catch (const BackendError& e) {
      if (!setup.live) throw;
      r.failed = true;
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline PathSummary summarize_path(ReplayPath p, const std::vector<ReplayRecord>& recs) {
  PathSummary s;
  s.path = p;
  std::size_t local = 0;
  for (const auto& r : recs) {
    if (r.path != p) continue;
    ++s.queries;
    if (r.failed) {
      ++s.failed;
      continue;
    }
    s.cost_micro += r.cost_micro;
    s.mean_latency_ms += r.latency_ms;
    s.mean_ttft_ms += r.ttft_ms;
    s.mean_plan_ms += r.plan_ms;
    s.mean_backend_ttft_ms += r.backend_ttft_ms;
    if (r.tier == Tier::Local) ++local;
  }
  const std::size_t ok = s.queries - s.failed;
  if (ok > 0) {
    const double n = static_cast<double>(ok);
    s.mean_latency_ms /= n;
    s.mean_ttft_ms /= n;
    s.mean_plan_ms /= n;
    s.mean_backend_ttft_ms /= n;
    s.local_share = static_cast<double>(local) / n;
  }
  return s;
}

inline ReplayReport replay(const std::vector<ReplayQuery>& queries, const std::vector<ReplayPath>& paths,
                           const ReplaySetup& setup) {
  ReplayReport rep;
  for (auto p : paths) {
    auto recs = p == ReplayPath::Routed ? replay_routed(queries, setup)
                                        : replay_direct(queries, p == ReplayPath::Premium ? Tier::Premium : Tier::Local, setup);
    rep.records.insert(rep.records.end(), recs.begin(), recs.end());
    rep.paths[p] = summarize_path(p, rep.records);
  }
  if (rep.paths.count(ReplayPath::Routed)) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> hits;  // bucket -> (correct, total)
    for (const auto& b : difficulty_buckets()) hits[b] = {0, 0};
    std::size_t n = 0, chr_hits = 0, fcr_hits = 0;
    const double tau = setup.router.tau;
    for (const auto& r : rep.records) {
      if (r.path != ReplayPath::Routed || r.failed) continue;
      ++n;
      auto& h = hits[r.difficulty];
      ++h.second;
      if (r.tier == preferred_tier(r.difficulty)) ++h.first;
      const bool matched = !r.canonical_scores.empty() &&
                           *std::max_element(r.canonical_scores.begin(), r.canonical_scores.end()) >= tau;
      if (matched) ++chr_hits;
      if (matched && r.fallback) ++fcr_hits;
    }
    for (const auto& [b, h] : hits) {
      MetricValue m;
      m.denominator = h.second;
      if (h.second) m.value = static_cast<double>(h.first) / static_cast<double>(h.second);
      rep.correctness[b] = m;
    }
    if (n) {
      rep.chr = static_cast<double>(chr_hits) / static_cast<double>(n);
      rep.fcr = static_cast<double>(fcr_hits) / static_cast<double>(n);
    }
    if (rep.paths.count(ReplayPath::Premium) && rep.paths[ReplayPath::Premium].cost_micro > 0) {
      rep.savings = 1.0 - static_cast<double>(rep.paths[ReplayPath::Routed].cost_micro) /
                              static_cast<double>(rep.paths[ReplayPath::Premium].cost_micro);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string replay_cost_csv(const ReplayReport& r) {
  std::ostringstream o;
  o << "path,queries,failed,cost_usd,local_share,savings_vs_premium\n";
  for (const auto& [p, s] : r.paths) {
    o << to_string(p) << ',' << s.queries << ',' << s.failed << ',' << format_metric(micro_to_usd(s.cost_micro)) << ','
      << format_metric(s.local_share) << ',';
    if (p == ReplayPath::Routed) o << format_metric(r.savings);
    o << '\n';
  }
  return o.str();
}

inline std::string replay_latency_csv(const ReplayReport& r) {
  std::ostringstream o;
  o << "path,mean_latency_ms,mean_ttft_ms,mean_plan_ms,mean_backend_ttft_ms\n";
  for (const auto& [p, s] : r.paths) {
    o << to_string(p) << ',' << format_metric(s.mean_latency_ms) << ',' << format_metric(s.mean_ttft_ms) << ','
      << format_metric(s.mean_plan_ms) << ',' << format_metric(s.mean_backend_ttft_ms) << '\n';
  }
  return o.str();
}

/// Per-query TTFT decomposition, one row per (path, query).
inline std::string replay_ttft_csv(const ReplayReport& r) {
  std::ostringstream o;
  o << "path,query_id,difficulty,tier,plan_ms,backend_ttft_ms,ttft_ms\n";
  for (const auto& x : r.records) {
    if (x.failed) continue;
    o << to_string(x.path) << ',' << x.query_id << ',' << x.difficulty << ',' << to_string(x.tier) << ','
      << format_metric(x.plan_ms) << ',' << format_metric(x.backend_ttft_ms) << ',' << format_metric(x.ttft_ms) << '\n';
  }
  return o.str();
}

inline std::string replay_correctness_csv(const ReplayReport& r) {
  std::ostringstream o;
  o << "bucket,queries,correct_share\n";
  for (const auto& b : difficulty_buckets()) {
    auto it = r.correctness.find(b);
    if (it == r.correctness.end()) continue;
    o << b << ',' << it->second.denominator << ',' << format_metric(it->second.value) << '\n';
  }
  return o.str();
}

inline json replay_summary_json(const ReplayReport& r) {
  json paths = json::object();
  for (const auto& [p, s] : r.paths) {
    paths[to_string(p)] = {{"queries", s.queries},
                           {"failed", s.failed},
                           {"cost_usd", micro_to_usd(s.cost_micro)},
                           {"mean_latency_ms", s.mean_latency_ms},
                           {"mean_ttft_ms", s.mean_ttft_ms},
                           {"mean_plan_ms", s.mean_plan_ms},
                           {"local_share", s.local_share}};
  }
  json corr = json::object();
  for (const auto& [b, m] : r.correctness) corr[b] = m.value ? json(*m.value) : json(nullptr);
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"paths", paths}, {"correctness", corr}, {"chr", opt(r.chr)}, {"fcr", opt(r.fcr)}, {"savings", opt(r.savings)}};
}

inline void write_replay(const std::filesystem::path& dir, const ReplayReport& r) {
  std::filesystem::create_directories(dir);
  std::string lines;
  for (const auto& x : r.records) lines += to_json(x).dump() + "\n";
  write_text_file(dir / "queries.jsonl", lines);
  write_text_file(dir / "cost.csv", replay_cost_csv(r));
  write_text_file(dir / "latency.csv", replay_latency_csv(r));
  write_text_file(dir / "ttft.csv", replay_ttft_csv(r));
  write_text_file(dir / "correctness.csv", replay_correctness_csv(r));
  write_text_file(dir / "summary.json", replay_summary_json(r).dump(2) + "\n");
}

}  // namespace labroute
