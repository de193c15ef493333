#include <gtest/gtest.h>

#include <random>

#include "labroute/router.hpp"
#include "support.hpp"

using namespace labroute;
using labroute::testing::RouterFixture;

namespace {

bool has_tag(const RoutePlan& p, const std::string& tag) {
  return (";" + p.route_why + ";").find(";" + tag + ";") != std::string::npos;
}

const char* kBuildText = "my rc circuit output does not change when i flip the switch";
const char* kScopeText = "the oscilloscope trace of the capacitor voltage is flat and noisy";
const char* kFitText = "fit an exponential to the capacitor discharge and report the residuals";

}  // namespace

TEST(Heuristic, Examples) {
  auto a = heuristic_route("check my wiring please now");
  EXPECT_EQ(a.tier, Tier::Local);
  EXPECT_EQ(a.granted_hint, HintLevel::L1);
  std::string long_q;
  for (int i = 0; i < 40; ++i) long_q += "the output is unstable when i probe the node and ";
  auto b = heuristic_route(long_q);
  EXPECT_EQ(b.tier, Tier::Premium);
  EXPECT_EQ(b.granted_hint, HintLevel::L2);
  auto c = heuristic_route("");
  EXPECT_EQ(c.tier, Tier::Local);
  EXPECT_EQ(c.granted_hint, HintLevel::L0);
}

TEST(Heuristic, KeywordsRaiseScore) {
  HeuristicConfig cfg;
  EXPECT_GT(heuristic_route("why does it oscillate", cfg).score, heuristic_route("how does it move", cfg).score);
}

TEST(Plan, MatchedLocalEntry) {
  RouterFixture f(PolicyMode::P1);
  auto p = f.router->plan(f.request("s1", "build", kBuildText));
  EXPECT_EQ(p.tier, Tier::Local);
  EXPECT_FALSE(p.fallback);
  EXPECT_TRUE(has_tag(p, "canonical:rc.build.01")) << p.route_why;
  ASSERT_FALSE(p.canonical_scores.empty());
  EXPECT_NEAR(p.canonical_scores[0], 1.0, 1e-6);
  EXPECT_EQ(p.granted_hint, HintLevel::L1);  // entry's natural level
}

TEST(Plan, NoMatchFallsBackToHeuristic) {
  RouterFixture f(PolicyMode::P1);
  auto p = f.router->plan(f.request("s1", "build", "what is the capital of france"));
  EXPECT_TRUE(p.fallback);
  EXPECT_EQ(p.route_why.rfind("canonical:none", 0), 0u) << p.route_why;
  EXPECT_EQ(p.tier, Tier::Local);
  EXPECT_TRUE(p.canonical_ids.empty());
}

TEST(Plan, BudgetForcesLocalAndCountsAsFallback) {
  RouterFixture f(PolicyMode::P1);
  auto first = f.router->plan(f.request("s1", "scope", kBuildText));
  f.router->complete_turn(first, 0);
  f.router->set_budget("s1", 500, 0.0);
  auto p = f.router->plan(f.request("s1", "scope", kScopeText));
  EXPECT_EQ(p.tier, Tier::Local);
  EXPECT_TRUE(p.fallback);
  EXPECT_TRUE(has_tag(p, "budget")) << p.route_why;
  ASSERT_FALSE(p.canonical_scores.empty());
  EXPECT_GE(p.canonical_scores[0], 0.82);
}

TEST(Plan, PerTurnCapForcesLocal) {
  RouterFixture f(PolicyMode::P1);
  auto p = f.router->plan(f.request("s1", "scope", kFitText));
  EXPECT_TRUE(has_tag(p, "canonical:rc.fit.01"));
  EXPECT_TRUE(has_tag(p, "turn_cap")) << p.route_why;
  EXPECT_EQ(p.tier, Tier::Local);
  EXPECT_TRUE(p.fallback);
}

TEST(Plan, EntryCapLimitsHint) {
  RouterFixture f(PolicyMode::P1);
  auto p = f.router->plan(f.request("s1", "scope", "how do i set the trigger level so the step response is stable",
                                    HintLevel::L3));
  EXPECT_EQ(p.granted_hint, HintLevel::L1);
  EXPECT_TRUE(has_tag(p, "entry_cap"));
}

TEST(Plan, StruggleWindowThenEscalation) {
  RouterFixture f(PolicyMode::P1);
  auto a = f.router->plan(f.request("s1", "build", kBuildText, HintLevel::L2));
  EXPECT_EQ(a.granted_hint, HintLevel::L1);
  EXPECT_TRUE(has_tag(a, "struggle_window"));
  f.router->complete_turn(a, 0);
  auto b = f.router->plan(f.request("s1", "build", kBuildText, HintLevel::L2));
  EXPECT_EQ(b.granted_hint, HintLevel::L2);
  EXPECT_TRUE(has_tag(b, "escalate:L2")) << b.route_why;
  // the canonical key from turn 1 still pins the session to Local
  EXPECT_EQ(b.tier, Tier::Local);
  EXPECT_TRUE(has_tag(b, "sticky")) << b.route_why;
  f.router->complete_turn(b, 0);
  auto c = f.router->plan(f.request("s1", "build", "why is there ringing on my breadboard", HintLevel::L2));
  EXPECT_EQ(c.tier, Tier::Premium) << c.route_why;
  EXPECT_TRUE(has_tag(c, "escalate:L2"));
}

TEST(Plan, UnknownLabOrStep) {
  RouterFixture f(PolicyMode::P1);
  auto r = f.request("s1", "build", kBuildText);
  r.lab_id = "nope";
  try {
    f.router->plan(r);
    FAIL();
  } catch (const RequestError& e) {
    EXPECT_EQ(e.field(), "lab_id");
  }
  r = f.request("s1", "nope", kBuildText);
  try {
    f.router->plan(r);
    FAIL();
  } catch (const RequestError& e) {
    EXPECT_EQ(e.field(), "step_id");
  }
}

TEST(Plan, IntegrityBlockUnderP2Only) {
  for (auto m : {PolicyMode::P0, PolicyMode::P1, PolicyMode::P2}) {
    RouterFixture f(m);
    RoutePlan last;
    for (int i = 0; i < 3; ++i) {
      auto r = f.request("s1", "build", kBuildText);
      r.integrity_flag = true;
      last = f.router->plan(r);
      if (i < 2) EXPECT_FALSE(last.assistance_blocked);
      f.router->complete_turn(last, 0);
    }
    EXPECT_EQ(last.assistance_blocked, m == PolicyMode::P2);
    if (m == PolicyMode::P2) {
      EXPECT_EQ(last.granted_hint, HintLevel::L0);
      EXPECT_TRUE(has_tag(last, "integrity_block"));
    }
  }
}

TEST(Admin, PolicySwitchP0ToP2RequiresApproval) {
  RouterFixture f(PolicyMode::P0);
  auto a = f.router->plan(f.request("s1", "build", kBuildText, HintLevel::L3));
  EXPECT_EQ(a.granted_hint, HintLevel::L3);
  EXPECT_FALSE(a.requires_approval);
  f.router->complete_turn(a, 0);
  auto b = f.router->plan(f.request("s1", "build", kBuildText, HintLevel::L1));
  f.router->complete_turn(b, 0);

  const auto act = f.router->update_policy(PolicyConfig::preset(PolicyMode::P2), 10.0);
  auto req = f.request("s1", "build", kBuildText, HintLevel::L3);
  req.justification = "tried three probe positions";
  auto c = f.router->plan(req);
  EXPECT_TRUE(c.requires_approval);
  EXPECT_FALSE(c.approval_id.empty());
  EXPECT_EQ(c.policy, PolicyMode::P2);
  EXPECT_NE(std::find(c.action_ids.begin(), c.action_ids.end(), act), c.action_ids.end());

  f.router->decide_approval(c.approval_id, ApprovalDecision::Approved, 12000, 12.0);
  auto resumed = req;
  resumed.approval_id = c.approval_id;
  auto d = f.router->plan(resumed);
  EXPECT_EQ(d.granted_hint, HintLevel::L3);
  EXPECT_TRUE(has_tag(d, "approved")) << d.route_why;
}

TEST(Admin, DeniedApprovalCapsAtL2) {
  RouterFixture f(PolicyMode::P2);
  for (int i = 0; i < 2; ++i) f.router->complete_turn(f.router->plan(f.request("s1", "build", kBuildText)), 0);
  auto req = f.request("s1", "build", kBuildText, HintLevel::L3);
  req.justification = "still stuck";
  auto held = f.router->plan(req);
  ASSERT_TRUE(held.requires_approval);
  f.router->decide_approval(held.approval_id, ApprovalDecision::Denied, 1000, 1.0);
  req.approval_id = held.approval_id;
  auto p = f.router->plan(req);
  EXPECT_EQ(p.granted_hint, HintLevel::L2);
  EXPECT_TRUE(has_tag(p, "approval_denied"));
}

TEST(Admin, EmptyJustificationIsGated) {
  RouterFixture f(PolicyMode::P2);
  for (int i = 0; i < 2; ++i) f.router->complete_turn(f.router->plan(f.request("s1", "build", kBuildText)), 0);
  auto p = f.router->plan(f.request("s1", "build", kBuildText, HintLevel::L3));
  EXPECT_FALSE(p.requires_approval);
  EXPECT_EQ(p.granted_hint, HintLevel::L2);
  EXPECT_TRUE(has_tag(p, "justification_required"));
}

TEST(Admin, InvalidPolicyKeepsOld) {
  RouterFixture f(PolicyMode::P1);
  const auto before = f.router->snapshot()->policy_hash;
  auto bad = PolicyConfig::preset(PolicyMode::P2);
  bad.total_budget_micro = -5;
  EXPECT_THROW(f.router->update_policy(bad), ConfigError);
  EXPECT_EQ(f.router->snapshot()->policy_hash, before);
  EXPECT_EQ(f.router->snapshot()->policy.mode, PolicyMode::P1);
}

TEST(Admin, OverlaySwapToDiagnostic) {
  RouterFixture f(PolicyMode::P2);
  auto a = f.router->plan(f.request("s1", "build", kBuildText));
  EXPECT_EQ(a.overlay_id, "socratic_troubleshoot");
  f.router->complete_turn(a, 0);
  const auto act = f.router->swap_overlay("diagnostic", 5.0);
  auto b = f.router->plan(f.request("s1", "build", kBuildText));
  EXPECT_EQ(b.overlay_id, "diagnostic");
  EXPECT_NE(b.overlay_fingerprint, a.overlay_fingerprint);
  EXPECT_EQ(b.action_ids, std::vector<std::string>{act});
  EXPECT_THROW(f.router->swap_overlay("nope"), ConfigError);
}

TEST(Admin, BoostAndFreeze) {
  RouterFixture f(PolicyMode::P1);
  f.router->complete_turn(f.router->plan(f.request("s1", "build", kBuildText)), 0);
  f.router->boost("s1", 1.0);
  auto b = f.router->plan(f.request("s1", "build", kBuildText));
  EXPECT_TRUE(b.teacher_boost);
  EXPECT_EQ(b.tier, Tier::Premium);
  f.router->complete_turn(b, 0);
  auto c = f.router->plan(f.request("s1", "build", kBuildText));
  EXPECT_FALSE(c.teacher_boost);
  EXPECT_EQ(c.tier, Tier::Local);
  f.router->complete_turn(c, 0);

  f.router->freeze("s1", labroute::testing::kPremium, 0, 3, 2.0);
  for (int i = 0; i < 3; ++i) {
    auto p = f.router->plan(f.request("s1", "build", kBuildText));
    EXPECT_EQ(p.tier, Tier::Premium) << i;
    f.router->complete_turn(p, 0);
  }
  EXPECT_EQ(f.router->plan(f.request("s1", "build", kBuildText)).tier, Tier::Local);
  EXPECT_EQ(f.router->actions().size(), 2u);
  EXPECT_GE(f.router->audit_log().size(), 2u);
}

TEST(Plan, P0HasNoOverlayFingerprint) {
  RouterFixture f(PolicyMode::P0);
  auto p = f.router->plan(f.request("s1", "build", kBuildText));
  EXPECT_EQ(p.overlay_fingerprint, kNoFingerprint);
  EXPECT_TRUE(p.overlay_id.empty());
}

TEST(Plan, JsonRoundTrip) {
  RouterFixture f(PolicyMode::P2);
  auto p = f.router->plan(f.request("s1", "scope", kScopeText));
  EXPECT_EQ(to_json(plan_from_json(to_json(p))), to_json(p));
  auto r = f.request("s1", "scope", kScopeText, HintLevel::L2);
  EXPECT_EQ(to_json(request_from_json(to_json(r))), to_json(r));
}

namespace {

struct Scripted {
  RouteRequest req;
  bool approve = false;
  bool complete = true;
};

std::vector<Scripted> random_script(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> texts = {kBuildText, kScopeText, kFitText, "what is the capital of france",
                                          "why is the scope trace ringing after the step edge",
                                          "how do i set the trigger level so the step response is stable"};
  std::vector<Scripted> out;
  for (int i = 0; i < n; ++i) {
    Scripted s;
    s.req.session_id = "s" + std::to_string(rng() % 4);
    s.req.lab_id = "rc_step";
    s.req.step_id = rng() % 2 ? "build" : "scope";
    s.req.query_text = texts[rng() % texts.size()];
    if (rng() % 4) s.req.requested_hint = static_cast<HintLevel>(rng() % 4);
    if (rng() % 3) s.req.justification = "checked the wiring twice";
    s.req.integrity_flag = rng() % 6 == 0;
    s.req.now_s = 100.0 + i;
    s.approve = rng() % 2;
    s.complete = rng() % 8 != 0;
    out.push_back(s);
  }
  return out;
}

std::vector<RoutePlan> run_script(Router& r, const std::vector<Scripted>& script,
                                  std::vector<bool>* settled = nullptr) {
  std::vector<RoutePlan> plans;
  for (const auto& s : script) {
    auto p = r.plan(s.req);
    if (p.requires_approval) {
      r.decide_approval(p.approval_id, s.approve ? ApprovalDecision::Approved : ApprovalDecision::Denied,
                        static_cast<std::int64_t>(*s.req.now_s * 1000) + 500, *s.req.now_s);
      auto again = s.req;
      again.approval_id = p.approval_id;
      plans.push_back(p);
      if (settled) settled->push_back(false);
      p = r.plan(again);
    }
    plans.push_back(p);
    if (settled) settled->push_back(s.complete);
    if (s.complete) {
      r.complete_turn(p, p.est_cost_micro);
    } else {
      r.abort_turn(p);
    }
  }
  return plans;
}

}  // namespace

TEST(PlanProperty, DeterministicForSameInputs) {
  auto script = random_script(99, 300);
  RouterFixture a(PolicyMode::P2), b(PolicyMode::P2);
  auto pa = run_script(*a.router, script);
  auto pb = run_script(*b.router, script);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(to_json(pa[i]), to_json(pb[i])) << i;
}

// Under P2 an L3 grant always carries an approved approval id; fallback=false
// implies a canonical hit >= tau; caps hold per session.
TEST(PlanProperty, GovernanceInvariants) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (auto m : {PolicyMode::P1, PolicyMode::P2}) {
      RouterFixture f(m);
      std::vector<bool> settled;
      auto plans = run_script(*f.router, random_script(seed, 200), &settled);
      std::map<std::string, int> l3;
      for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto& p = plans[i];
        if (p.requires_approval) continue;
        if (!p.fallback) {
          ASSERT_FALSE(p.canonical_scores.empty());
          EXPECT_GE(p.canonical_scores[0], 0.82);
        }
        if (p.granted_hint == HintLevel::L3) {
          if (settled[i]) ++l3[p.session_id];
          if (m == PolicyMode::P2) {
            ASSERT_FALSE(p.approval_id.empty());
            auto r = f.router->approvals().get(p.approval_id);
            ASSERT_TRUE(r.has_value());
            EXPECT_EQ(r->decision, ApprovalDecision::Approved);
          }
        }
      }
      for (const auto& [s, n] : l3) EXPECT_LE(n, 2) << s;
      for (const auto& b : f.router->budgets()) EXPECT_LE(b.spent_micro, b.total_budget_micro);
    }
  }
}
