#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/embedding.hpp"
#include "labroute/metrics.hpp"
#include "labroute/overlay.hpp"
#include "labroute/router.hpp"
#include "labroute/telemetry.hpp"
#include "labroute/workload.hpp"

namespace labroute {

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct TierProfile {
  double ttft_ms = 100.0;
  double ms_per_token = 20.0;
};

struct SimCalibration {
  EscalationModel escalation = EscalationModel::defaults();
  std::vector<double> cohort_l3_scale = {0.4, 0.8, 1.3, 2.2};
  std::vector<double> cohort_justification = {0.3, 0.6, 0.85, 0.95};
  double approval_service_mean_s = 15.0;
  double approve_prob = 0.7;
  // Chance that a mock response follows the overlay, per policy.
  std::map<PolicyMode, double> compliance = {{PolicyMode::P0, 0.69}, {PolicyMode::P1, 0.84}, {PolicyMode::P2, 0.87}};
  // Share of non-compliant responses that echo the preamble (the rest state a final answer).
  double leak_share = 0.75;
  std::int64_t prompt_tokens_base = 600;
  std::array<double, 4> completion_tokens = {120, 260, 520, 900};
  double token_jitter = 0.2;
  TierProfile local{64.0, 22.0};
  TierProfile premium{222.0, 18.0};
  double plan_ms = 87.0;  // modelled routing overhead; the simulator never reads a clock
  // Mock teacher.
  double boost_interval_min = 6.0;
  double freeze_interval_min = 20.0;
  double overlay_swap_at_min = 100.0;  // < 0 disables
  std::string swap_overlay_id = "diagnostic";
};

inline json to_json(const SimCalibration& c) {
  json comp = json::object();
  for (const auto& [m, v] : c.compliance) comp[to_string(m)] = v;
  return {{"escalation", to_json(c.escalation)},
          {"cohort_l3_scale", c.cohort_l3_scale},
          {"cohort_justification", c.cohort_justification},
          {"approval_service_mean_s", c.approval_service_mean_s},
          {"approve_prob", c.approve_prob},
          {"compliance", comp},
          {"leak_share", c.leak_share},
          {"prompt_tokens_base", c.prompt_tokens_base},
          {"completion_tokens", c.completion_tokens},
          {"token_jitter", c.token_jitter},
          {"local", {{"ttft_ms", c.local.ttft_ms}, {"ms_per_token", c.local.ms_per_token}}},
          {"premium", {{"ttft_ms", c.premium.ttft_ms}, {"ms_per_token", c.premium.ms_per_token}}},
          {"plan_ms", c.plan_ms},
          {"boost_interval_min", c.boost_interval_min},
          {"freeze_interval_min", c.freeze_interval_min},
          {"overlay_swap_at_min", c.overlay_swap_at_min},
          {"swap_overlay_id", c.swap_overlay_id}};
}

inline SimCalibration calibration_from_json(const json& j) {
  SimCalibration c;
  try {
    if (j.contains("escalation")) c.escalation = escalation_from_json(j.at("escalation"));
    c.cohort_l3_scale = j.value("cohort_l3_scale", c.cohort_l3_scale);
    c.cohort_justification = j.value("cohort_justification", c.cohort_justification);
    c.approval_service_mean_s = j.value("approval_service_mean_s", c.approval_service_mean_s);
    c.approve_prob = j.value("approve_prob", c.approve_prob);
    if (j.contains("compliance")) {
      for (const auto& [k, v] : j.at("compliance").items()) c.compliance[parse_policy_mode(k)] = v.get<double>();
    }
    c.leak_share = j.value("leak_share", c.leak_share);
    c.prompt_tokens_base = j.value("prompt_tokens_base", c.prompt_tokens_base);
    c.completion_tokens = j.value("completion_tokens", c.completion_tokens);
    c.token_jitter = j.value("token_jitter", c.token_jitter);
    auto tier = [&](const char* k, TierProfile& t) {
      if (!j.contains(k)) return;
      t.ttft_ms = j.at(k).value("ttft_ms", t.ttft_ms);
      t.ms_per_token = j.at(k).value("ms_per_token", t.ms_per_token);
    };
    tier("local", c.local);
    tier("premium", c.premium);
    c.plan_ms = j.value("plan_ms", c.plan_ms);
    c.boost_interval_min = j.value("boost_interval_min", c.boost_interval_min);
    c.freeze_interval_min = j.value("freeze_interval_min", c.freeze_interval_min);
    c.overlay_swap_at_min = j.value("overlay_swap_at_min", c.overlay_swap_at_min);
    c.swap_overlay_id = j.value("swap_overlay_id", c.swap_overlay_id);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("calibration: ") + e.what());
  }
  if (c.cohort_l3_scale.empty() || c.cohort_justification.empty()) throw ConfigError("calibration: cohort tables empty");
  return c;
}

/// Multiplies every scalar knob by an independent factor in [1-pct, 1+pct];
/// probabilities are clamped to [0,1]. Matrices are left alone apart from the
/// escalation probability.
inline SimCalibration perturb(SimCalibration c, double pct, Rng& rng) {
  auto f = [&]() { return 1.0 + pct * (2.0 * rng.uniform() - 1.0); };
  auto prob = [](double p) { return std::clamp(p, 0.0, 1.0); };
  c.escalation.escalate_prob = prob(c.escalation.escalate_prob * f());
  for (auto& x : c.cohort_l3_scale) x *= f();
  for (auto& x : c.cohort_justification) x = prob(x * f());
  c.approval_service_mean_s *= f();
  c.approve_prob = prob(c.approve_prob * f());
  for (auto& [_, v] : c.compliance) v = prob(v * f());
  c.leak_share = prob(c.leak_share * f());
  for (auto& t : c.completion_tokens) t *= f();
  c.boost_interval_min *= f();
  c.freeze_interval_min *= f();
  return c;
}

// ---------------------------------------------------------------------------
// Jobs
// ---------------------------------------------------------------------------

struct JobConfig {
  std::string group = "default";
  std::string lab_id;
  PolicyMode policy = PolicyMode::P1;
  std::string overlay_mode = "strict";  // strict | lenient
  std::uint64_t seed = 1;
  std::string embedding = "mock";  // provider id or "off"
  double cache_ttl_s = 300.0;
  int top_k = 3;
  std::string start = "cold";  // cold | warm
  double tau = 0.82;
};

inline json to_json(const JobConfig& j) {
  return {{"group", j.group},       {"lab_id", j.lab_id},       {"policy", to_string(j.policy)},
          {"overlay_mode", j.overlay_mode}, {"seed", j.seed}, {"embedding", j.embedding},
          {"cache_ttl_s", j.cache_ttl_s}, {"top_k", j.top_k}, {"start", j.start},
          {"tau", j.tau}};
}

/// Everything a job reads that is shared across a sweep.
struct SimContext {
  std::map<std::string, LabDescriptor> labs;
  std::shared_ptr<const Bank> bank;  // vectors from the clean mock encoder
  OverlaySet overlays = OverlaySet::defaults();
  PriceBook prices = PriceBook::defaults();
  SimCalibration calibration;
  WorkloadConfig workload;  // lab_id and seed are set per job
  RouterConfig router;      // tau, top_k and cache TTL are set per job
  std::uint64_t embed_seed = 0;
};

struct JobResult {
  JobConfig config;
  std::string job_hash;
  std::string policy_hash;
  std::vector<TelemetryEvent> events;
  std::vector<TeacherAction> actions;
  MetricReport report;
  std::size_t approvals = 0;
  std::size_t denials = 0;
  std::optional<double> approval_wait_p95_ms;
  std::size_t integrity_blocks = 0;
  MicroUsd max_spent_micro = 0;
  int max_l3_per_session = 0;
  std::string error;
  json perturbation;
};

inline PolicyConfig policy_for_job(const JobConfig& j, const SimCalibration&) {
  PolicyConfig p = PolicyConfig::preset(j.policy);
  p.strict_guardrail = j.overlay_mode != "lenient";
  if (j.embedding == "off") p.canonical_enabled = false;
  return p;
}

inline std::string job_hash(const JobConfig& j, const SimContext& ctx) {
  json doc = {{"job", to_json(j)},
              {"calibration", to_json(ctx.calibration)},
              {"router", to_json(ctx.router)},
              {"workload",
               {{"students", ctx.workload.students},
                {"cohorts", ctx.workload.cohorts},
                {"phase_minutes", ctx.workload.phase_minutes},
                {"rate_scale", ctx.workload.rate_scale},
                {"p_repeat_intent", ctx.workload.p_repeat_intent},
                {"p_offbank", ctx.workload.p_offbank},
                {"paraphrase_intensity", ctx.workload.paraphrase_intensity},
                {"integrity_rate", ctx.workload.integrity_rate}}}};
  return sha256_hex(doc.dump());
}

inline std::optional<double> percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  // Nearest-rank.
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::min(v.size(), std::max<std::size_t>(rank, 1)) - 1];
}

namespace sim_detail {

enum class EvKind { Arrival = 0, ApprovalDone = 1, Boost = 2, Freeze = 3, OverlaySwap = 4 };

struct SimEvent {
  double t = 0.0;
  std::uint64_t seq = 0;
  EvKind kind = EvKind::Arrival;
  std::size_t index = 0;  // arrival index, or student for approvals
  bool operator>(const SimEvent& o) const { return t != o.t ? t > o.t : seq > o.seq; }
};

struct Student {
  std::string session;
  std::string cohort;
  int cohort_index = 0;
  std::optional<HintLevel> prev_request;
  std::size_t prev_phase = static_cast<std::size_t>(-1);
  int unanswered = 0;
  bool held = false;
  std::vector<std::size_t> buffered;
  // Held turn.
  std::size_t held_arrival = 0;
  RouteRequest held_request;
  std::string held_approval;
  ApprovalDecision held_decision = ApprovalDecision::Pending;
  std::int64_t completed = 0;
};

/// Deterministic reply text for one turn.
inline std::string mock_reply(bool compliant, bool leak, const OverlayDefinition* eval, HintLevel granted,
                              const std::string& lab_id) {
  std::string base =
      "Good question. Before changing anything, what do you see on the display, and which setting did you use?";
  if (compliant || eval == nullptr) return base;
  if (leak || granted == HintLevel::L3) {
    std::string pre = render_preamble(*eval, granted);
    auto end = pre.find('.');
    return base + " " + pre.substr(0, end == std::string::npos ? pre.size() : end + 1);
  }
  if (lab_id == "rc_step") return base + " Your time constant is 4.7 ms for that network.";
  if (lab_id == "led_iv") return base + " The forward voltage is 1.9 V at 10 mA.";
  return base + " Final answer: 42.";
}

}  // namespace sim_detail

/// Runs one sweep cell: in-process router, single-threaded event loop,
/// virtual clock.
inline JobResult run_job(const JobConfig& cfg, const SimContext& ctx, std::optional<double> sensitivity_pct = {}) {
  using namespace sim_detail;
  JobResult out;
  out.config = cfg;
  out.job_hash = job_hash(cfg, ctx);
  SimCalibration cal = ctx.calibration;
  if (sensitivity_pct && *sensitivity_pct > 0.0) {
    Rng prng(fnv1a64(out.job_hash));
    cal = perturb(cal, *sensitivity_pct / 100.0, prng);
    out.perturbation = to_json(cal);
  }
  auto lab_it = ctx.labs.find(cfg.lab_id);
  if (lab_it == ctx.labs.end()) {
    out.error = "unknown lab '" + cfg.lab_id + "'";
    return out;
  }
  const LabDescriptor& lab = lab_it->second;

  try {
    RouterSnapshot snap;
    snap.policy = policy_for_job(cfg, cal);
    snap.config = ctx.router;
    snap.config.tau = cfg.tau;
    snap.config.top_k = cfg.top_k;
    snap.config.cache_ttl_s = cfg.cache_ttl_s;
    snap.overlays = ctx.overlays;
    snap.prices = ctx.prices;
    snap.labs = ctx.labs;
    out.policy_hash = policy_hash(snap.policy);
    auto provider = make_provider(cfg.embedding, ctx.embed_seed);
    Router router(std::move(snap), provider ? ctx.bank : nullptr, provider);

    WorkloadConfig wc = ctx.workload;
    wc.lab_id = cfg.lab_id;
    wc.seed = cfg.seed;
    const Workload w = generate_workload(wc, lab, ctx.bank.get());

    if (cfg.start == "warm" && provider && ctx.bank) {
      // Seed trace: one paraphrase per bank intent of this lab.
      Rng wr(mix_seed(cfg.seed, fnv1a64("warm")));
      for (const auto& pool : intents_by_phase(*ctx.bank, lab)) {
        for (const auto* e : pool) {
          (void)match(paraphrase(e->text, wr, wc.paraphrase_intensity), *ctx.bank, *provider, cfg.tau, cfg.top_k,
                      &router.cache(), 0.0);
        }
      }
    }

    const auto policy = router.snapshot()->policy;
    const std::string premium = ctx.prices.model_for(Tier::Premium);
    const std::string local = ctx.prices.model_for(Tier::Local);
    const double compliance = cal.compliance.count(cfg.policy) ? cal.compliance.at(cfg.policy) : 1.0;
    std::map<std::string, std::vector<std::regex>> patterns;
    auto patterns_for = [&](const std::string& lab_id) -> const std::vector<std::regex>& {
      auto it = patterns.find(lab_id);
      if (it == patterns.end()) it = patterns.emplace(lab_id, compile_patterns(ctx.overlays.patterns_for(lab_id))).first;
      return it->second;
    };
    static const std::vector<std::regex> kNoPatterns;

    std::vector<Student> students(static_cast<std::size_t>(wc.students));
    for (int s = 0; s < wc.students; ++s) {
      auto& st = students[static_cast<std::size_t>(s)];
      st.session = session_name(cfg.lab_id, s);
      st.cohort_index = s % std::max(1, wc.cohorts);
      st.cohort = cohort_name(s, wc.cohorts);
    }

    std::priority_queue<SimEvent, std::vector<SimEvent>, std::greater<>> queue;
    std::uint64_t seq = 0;
    for (std::size_t i = 0; i < w.arrivals.size(); ++i) queue.push({w.arrivals[i].t_s, seq++, EvKind::Arrival, i});
    const double horizon = static_cast<double>(lab.phases.size()) * wc.phase_minutes * 60.0;
    if (cal.boost_interval_min > 0) {
      for (double t = cal.boost_interval_min * 60.0; t < horizon; t += cal.boost_interval_min * 60.0) {
        queue.push({t, seq++, EvKind::Boost, 0});
      }
    }
    if (cal.freeze_interval_min > 0) {
      for (double t = cal.freeze_interval_min * 60.0; t < horizon; t += cal.freeze_interval_min * 60.0) {
        queue.push({t, seq++, EvKind::Freeze, 0});
      }
    }
    if (cal.overlay_swap_at_min >= 0 && ctx.overlays.contains(cal.swap_overlay_id)) {
      queue.push({cal.overlay_swap_at_min * 60.0, seq++, EvKind::OverlaySwap, 0});
    }

    ApprovalServers servers(policy.approval_servers);
    Rng teacher(mix_seed(mix_seed(cfg.seed, fnv1a64(cfg.lab_id)), fnv1a64("teacher")));
    std::vector<double> waits;
    std::vector<std::size_t> active;  // students with at least one completed turn

    auto turn_rng = [&](const Student& st, std::size_t ordinal) {
      return Rng(mix_seed(mix_seed(cfg.seed, fnv1a64(st.session)), 0x7a11u + ordinal));
    };

    // Finishes a planned (not held) turn: backend call, settlement, telemetry.
    auto finish = [&](Student& st, std::size_t ai, const RouteRequest& req, const RoutePlan& plan, double t,
                      Rng& rng) {
      const Arrival& a = w.arrivals[ai];
      const auto level = static_cast<std::size_t>(index_of(plan.granted_hint));
      const double jitter = 1.0 + cal.token_jitter * (2.0 * rng.uniform() - 1.0);
      const auto completion = static_cast<std::int64_t>(std::llround(cal.completion_tokens[level] * jitter));
      const std::int64_t prompt = cal.prompt_tokens_base + static_cast<std::int64_t>(split_words(req.query_text).size());
      const MicroUsd cost = token_cost_micro(plan.model_id, prompt, completion, ctx.prices);
      router.complete_turn(plan, cost);

      const OverlayDefinition* eval =
          plan.evaluation_overlay_id.empty() ? nullptr : &ctx.overlays.at(plan.evaluation_overlay_id);
      const bool compliant = rng.bernoulli(compliance);
      const bool leak = rng.bernoulli(cal.leak_share);
      const std::string reply = mock_reply(compliant, leak, eval, plan.granted_hint, cfg.lab_id);
      const auto verdict = overlay_guardrail(reply, eval, plan.granted_hint,
                                             plan.strict_guardrail ? patterns_for(cfg.lab_id) : kNoPatterns);

      const TierProfile& prof = plan.tier == Tier::Premium ? cal.premium : cal.local;
      TelemetryEvent e = event_from_plan(plan, req);
      if (!plan.overlay_id.empty()) e.overlay_fingerprint = overlay_fingerprint(ctx.overlays.at(plan.overlay_id), plan.granted_hint);
      e.tokens_prompt = prompt;
      e.tokens_completion = completion;
      e.plan_ms = cal.plan_ms;
      e.ttft_ms = cal.plan_ms + prof.ttft_ms;
      e.latency_ms = cal.plan_ms + prof.ttft_ms + prof.ms_per_token * static_cast<double>(completion);
      e.cost_micro = cost;
      e.guardrail_result = verdict.result;
      e.seed = cfg.seed;
      e.ts_ms = static_cast<std::int64_t>(std::llround(t * 1000.0));
      e.trace_id = out.job_hash.substr(0, 8) + "-" + st.session + "-" + std::to_string(plan.turn_index);
      e.step_pass = rng.bernoulli(0.5 + 0.1 * static_cast<double>(level));
      e.scpi_retries = static_cast<int>(rng.below(3));
      e.range_changes = static_cast<int>(rng.below(4));
      e.rubric_score_blind = 0.0;
      out.events.push_back(std::move(e));
      if (plan.assistance_blocked) ++out.integrity_blocks;

      st.prev_request = plan.requested_hint;
      st.unanswered = plan.granted_hint < plan.requested_hint ? st.unanswered + 1 : 0;
      if (st.completed++ == 0) active.push_back(static_cast<std::size_t>(&st - students.data()));
      (void)a;
    };

    std::function<void(std::size_t, double)> serve = [&](std::size_t ai, double t) {
      const Arrival& a = w.arrivals[ai];
      Student& st = students[static_cast<std::size_t>(a.student)];
      if (st.held) {
        st.buffered.push_back(ai);
        return;
      }
      Rng rng = turn_rng(st, a.ordinal);
      if (st.prev_phase != a.phase) {
        st.prev_request.reset();
        st.unanswered = 0;
        st.prev_phase = a.phase;
      }
      const double scale = cal.cohort_l3_scale[static_cast<std::size_t>(st.cohort_index) % cal.cohort_l3_scale.size()];
      const HintLevel want = cal.escalation.next(a.phase, st.prev_request, st.unanswered, scale, rng);
      RouteRequest req;
      req.session_id = st.session;
      req.lab_id = cfg.lab_id;
      req.step_id = lab.steps[a.phase].step_id;
      req.query_text = a.query;
      req.requested_hint = want;
      req.cohort_id = st.cohort;
      req.integrity_flag = a.integrity_flag;
      req.now_s = t;
      const double justify =
          cal.cohort_justification[static_cast<std::size_t>(st.cohort_index) % cal.cohort_justification.size()];
      if (want == HintLevel::L3 && rng.bernoulli(justify)) {
        req.justification = "I have checked the wiring and my measurements twice and still cannot find the issue";
      }
      RoutePlan plan = router.plan(req);
      if (plan.requires_approval) {
        const double service = rng.exponential(cal.approval_service_mean_s);
        const double done = servers.assign(t, service);
        st.held = true;
        st.held_arrival = ai;
        st.held_request = req;
        st.held_approval = plan.approval_id;
        st.held_decision = rng.bernoulli(cal.approve_prob) ? ApprovalDecision::Approved : ApprovalDecision::Denied;
        queue.push({done, seq++, EvKind::ApprovalDone, static_cast<std::size_t>(a.student)});
        return;
      }
      finish(st, ai, req, plan, t, rng);
    };

    while (!queue.empty()) {
      const SimEvent ev = queue.top();
      queue.pop();
      switch (ev.kind) {
        case EvKind::Arrival: serve(ev.index, ev.t); break;
        case EvKind::ApprovalDone: {
          Student& st = students[ev.index];
          const auto decided_ms = static_cast<std::int64_t>(std::llround(ev.t * 1000.0));
          auto r = router.decide_approval(st.held_approval, st.held_decision, decided_ms, ev.t);
          waits.push_back(static_cast<double>(r.wait_ms));
          (r.decision == ApprovalDecision::Approved ? out.approvals : out.denials)++;
          RouteRequest req = st.held_request;
          req.approval_id = st.held_approval;
          req.now_s = ev.t;
          const RoutePlan plan = router.plan(req);
          Rng rng = turn_rng(st, w.arrivals[st.held_arrival].ordinal + 0x10000u);
          st.held = false;
          finish(st, st.held_arrival, req, plan, ev.t, rng);
          auto pending = std::move(st.buffered);
          st.buffered.clear();
          for (auto ai : pending) serve(ai, ev.t);
          break;
        }
        case EvKind::Boost:
        case EvKind::Freeze: {
          if (active.empty()) break;
          const auto& st = students[active[teacher.below(active.size())]];
          if (ev.kind == EvKind::Boost) {
            router.boost(st.session, ev.t);
          } else {
            router.freeze(st.session, local, 0.0, 0, ev.t);
          }
          break;
        }
        case EvKind::OverlaySwap:
          if (!active.empty()) router.swap_overlay(cal.swap_overlay_id, ev.t);
          break;
      }
    }

    out.actions = router.actions();
    for (const auto& b : router.budgets()) {
      out.max_spent_micro = std::max(out.max_spent_micro, b.spent_micro);
      out.max_l3_per_session = std::max(out.max_l3_per_session, b.l3_granted_count);
    }
    out.approval_wait_p95_ms = percentile(waits, 0.95);
    // Turn order per session is the trace order contract.
    std::stable_sort(out.events.begin(), out.events.end(), [](const TelemetryEvent& a, const TelemetryEvent& b) {
      return a.ts_ms != b.ts_ms ? a.ts_ms < b.ts_ms : a.session_id < b.session_id;
    });
    MetricInputs in;
    in.events = &out.events;
    in.labs = &ctx.labs;
    in.actions = &out.actions;
    in.tau = cfg.tau;
    out.report = compute_report(in);
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepGroup {
  std::string name;
  std::vector<std::string> labs;
  std::vector<PolicyMode> policies;
  std::vector<std::string> overlay_modes = {"strict"};
  std::vector<std::uint64_t> seeds = {1};
  std::vector<std::string> embedding = {"mock"};
  std::vector<double> cache_ttl_s = {300.0};
  std::vector<int> top_k = {3};
  std::vector<std::string> start = {"cold"};
};

struct SweepSpec {
  std::string name = "sweep";
  std::filesystem::path data_root;  // labs/, overlays.json, prices.json
  std::filesystem::path bank_path;
  WorkloadConfig workload;
  SimCalibration calibration;
  RouterConfig router;
  double tau = 0.82;
  std::vector<SweepGroup> groups;
  std::uint64_t embed_seed = 0;
  double crg_parity_tolerance = 0.02;
};

inline SweepSpec sweep_from_json(const json& j, const std::filesystem::path& base_dir) {
  SweepSpec s;
  try {
    s.name = j.value("name", s.name);
    auto resolve = [&](const std::string& p) {
      std::filesystem::path q(p);
      return q.is_absolute() ? q : base_dir / q;
    };
    s.data_root = resolve(j.value("data_root", std::string(".")));
    s.bank_path = resolve(j.at("bank").get<std::string>());
    s.tau = j.value("tau", s.tau);
    s.embed_seed = j.value("embed_seed", s.embed_seed);
    s.crg_parity_tolerance = j.value("crg_parity_tolerance", s.crg_parity_tolerance);
    if (j.contains("workload")) {
      const auto& w = j.at("workload");
      s.workload.students = w.value("students", s.workload.students);
      s.workload.cohorts = w.value("cohorts", s.workload.cohorts);
      s.workload.phase_minutes = w.value("phase_minutes", s.workload.phase_minutes);
      s.workload.rate_scale = w.value("rate_scale", s.workload.rate_scale);
      s.workload.p_repeat_intent = w.value("p_repeat_intent", s.workload.p_repeat_intent);
      s.workload.p_offbank = w.value("p_offbank", s.workload.p_offbank);
      s.workload.paraphrase_intensity = w.value("paraphrase_intensity", s.workload.paraphrase_intensity);
      s.workload.integrity_rate = w.value("integrity_rate", s.workload.integrity_rate);
    }
    if (j.contains("calibration")) s.calibration = calibration_from_json(j.at("calibration"));
    if (j.contains("router")) s.router = router_config_from_json(j.at("router"));
    for (const auto& g : j.at("groups")) {
      SweepGroup sg;
      sg.name = g.at("name").get<std::string>();
      sg.labs = g.at("labs").get<std::vector<std::string>>();
      for (const auto& p : g.at("policies")) sg.policies.push_back(parse_policy_mode(p.get<std::string>()));
      sg.overlay_modes = g.value("overlay_modes", sg.overlay_modes);
      sg.seeds = g.value("seeds", sg.seeds);
      sg.embedding = g.value("embedding", sg.embedding);
      sg.cache_ttl_s = g.value("cache_ttl_s", sg.cache_ttl_s);
      sg.top_k = g.value("top_k", sg.top_k);
      sg.start = g.value("start", sg.start);
      for (const auto& m : sg.overlay_modes) {
        if (m != "strict" && m != "lenient") throw ConfigError("overlay mode must be strict or lenient");
      }
      for (const auto& st : sg.start) {
        if (st != "warm" && st != "cold") throw ConfigError("start must be warm or cold");
      }
      s.groups.push_back(std::move(sg));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep spec: ") + e.what());
  }
  return s;
}

inline std::vector<JobConfig> expand(const SweepSpec& s) {
  std::vector<JobConfig> jobs;
  for (const auto& g : s.groups) {
    for (const auto& lab : g.labs)
      for (auto p : g.policies)
        for (const auto& om : g.overlay_modes)
          for (const auto& emb : g.embedding)
            for (double ttl : g.cache_ttl_s)
              for (int k : g.top_k)
                for (const auto& st : g.start)
                  for (auto seed : g.seeds) {
                    JobConfig j;
                    j.group = g.name;
                    j.lab_id = lab;
                    j.policy = p;
                    j.overlay_mode = om;
                    j.embedding = emb;
                    j.cache_ttl_s = ttl;
                    j.top_k = k;
                    j.start = st;
                    j.seed = seed;
                    j.tau = s.tau;
                    jobs.push_back(j);
                  }
  }
  return jobs;
}

/// Loads labs, overlays, prices and the bank referenced by a sweep spec.
inline SimContext load_context(const SweepSpec& s) {
  SimContext ctx;
  const auto tree = ConfigTree::load(s.data_root);
  ctx.labs = tree.labs;
  if (!tree.prices.models.empty()) ctx.prices = tree.prices;
  const auto overlays = s.data_root / "overlays.json";
  if (std::filesystem::exists(overlays)) ctx.overlays = overlays_from_json(read_json_file(overlays));
  MockEmbeddingProvider clean(s.embed_seed);
  ctx.bank = std::make_shared<const Bank>(load_bank(s.bank_path, &clean));
  ctx.calibration = s.calibration;
  ctx.workload = s.workload;
  ctx.router = s.router;
  ctx.embed_seed = s.embed_seed;
  return ctx;
}

struct SweepResult {
  std::vector<JobResult> jobs;
  // Paired CRG per embedding-on job index.
  std::map<std::size_t, MetricValue> crg;
};

/// Pairs each embedding-on job with the embedding-off job that shares every
/// other setting. CRG is reported only when CAI and OAS agree within `tol`.
inline std::map<std::size_t, MetricValue> pair_crg(const std::vector<JobResult>& jobs, double tol) {
  auto key = [](const JobConfig& c) {
    return c.group + "|" + c.lab_id + "|" + to_string(c.policy) + "|" + c.overlay_mode + "|" + std::to_string(c.seed) +
           "|" + format_metric(c.cache_ttl_s) + "|" + std::to_string(c.top_k) + "|" + c.start;
  };
  std::map<std::string, std::size_t> off;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (jobs[i].config.embedding == "off" && jobs[i].error.empty()) off[key(jobs[i].config)] = i;
  }
  std::map<std::size_t, MetricValue> out;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& j = jobs[i];
    if (j.config.embedding == "off" || !j.error.empty()) continue;
    auto it = off.find(key(j.config));
    if (it == off.end()) continue;
    const auto& h = jobs[it->second];
    auto diff = [](const MetricValue& a, const MetricValue& b) {
      if (!a.value || !b.value) return (a.value.has_value() == b.value.has_value()) ? 0.0 : 1.0;
      return std::abs(*a.value - *b.value);
    };
    MetricValue m = crg(static_cast<double>(j.report.total_cost_micro), static_cast<double>(h.report.total_cost_micro));
    const double dc = diff(j.report.cai, h.report.cai), do_ = diff(j.report.oas, h.report.oas);
    if (dc > tol || do_ > tol) {
      m.value.reset();
      m.note = "parity violated (cai diff " + format_metric(dc) + ", oas diff " + format_metric(do_) + ")";
    }
    out[i] = m;
  }
  return out;
}

inline SweepResult run_sweep(const SweepSpec& spec, const SimContext& ctx, int threads = 1,
                             std::optional<double> sensitivity_pct = {}) {
  const auto configs = expand(spec);
  SweepResult r;
  r.jobs.resize(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < configs.size(); i = next++) r.jobs[i] = run_job(configs[i], ctx, sensitivity_pct);
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(configs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  r.crg = pair_crg(r.jobs, spec.crg_parity_tolerance);
  for (auto& [i, m] : r.crg) r.jobs[i].report.crg = m;
  return r;
}

inline constexpr const char* kJobCsvHeader = "job_hash,group,lab,policy,overlay_mode,seed,embedding,cache_ttl_s,top_k,start";
inline constexpr const char* kGovernanceCsvHeader =
    "approvals,denials,approval_wait_p95_ms,integrity_blocks,max_spend_usd,max_l3_per_session,error";

inline std::string summary_csv(const SweepResult& r) {
  std::ostringstream o;
  o << kJobCsvHeader << ',' << kMetricCsvHeader << ',' << kGovernanceCsvHeader << '\n';
  for (const auto& j : r.jobs) {
    const auto& c = j.config;
    o << j.job_hash.substr(0, 16) << ',' << c.group << ',' << c.lab_id << ',' << to_string(c.policy) << ','
      << c.overlay_mode << ',' << c.seed << ',' << c.embedding << ',' << format_metric(c.cache_ttl_s) << ','
      << c.top_k << ',' << c.start << ',' << metric_csv_row(j.report) << ',' << j.approvals << ',' << j.denials << ','
      << format_metric(j.approval_wait_p95_ms) << ',' << j.integrity_blocks << ','
      << format_metric(micro_to_usd(j.max_spent_micro)) << ',' << j.max_l3_per_session << ',';
    std::string err = j.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    o << err << '\n';
  }
  return o.str();
}

inline json manifest_json(const SweepSpec& spec, const SweepResult& r, std::optional<double> sensitivity_pct) {
  json jobs = json::array();
  for (const auto& j : r.jobs) {
    json row = {{"job_hash", j.job_hash},
                {"seed", j.config.seed},
                {"policy_hash", j.policy_hash},
                {"config", to_json(j.config)},
                {"metrics", metric_csv_row(j.report)},
                {"trace", "traces/" + j.job_hash.substr(0, 16) + ".jsonl"}};
    if (!j.error.empty()) row["error"] = j.error;
    if (!j.perturbation.is_null()) row["perturbed_calibration"] = j.perturbation;
    jobs.push_back(row);
  }
  return {{"name", spec.name},
          {"job_count", r.jobs.size()},
          {"events", [&] {
             std::size_t n = 0;
             for (const auto& j : r.jobs) n += j.events.size();
             return n;
           }()},
          {"sensitivity_pct", sensitivity_pct ? json(*sensitivity_pct) : json(nullptr)},
          {"calibration", to_json(spec.calibration)},
          {"jobs", jobs}};
}

/// summary.csv, manifest.json and (optionally) per-job traces.
inline void write_sweep(const std::filesystem::path& out_dir, const SweepSpec& spec, const SweepResult& r,
                        std::optional<double> sensitivity_pct, bool traces = true) {
  std::filesystem::create_directories(out_dir);
  write_text_file(out_dir / "summary.csv", summary_csv(r));
  write_text_file(out_dir / "manifest.json", manifest_json(spec, r, sensitivity_pct).dump(2) + "\n");
  if (!traces) return;
  std::filesystem::create_directories(out_dir / "traces");
  for (const auto& j : r.jobs) {
    const auto stem = j.job_hash.substr(0, 16);
    write_text_file(out_dir / "traces" / (stem + ".jsonl"), events_to_jsonl(j.events));
    write_text_file(out_dir / "traces" / (stem + ".actions.jsonl"), actions_to_jsonl(j.actions));
  }
}

}  // namespace labroute
