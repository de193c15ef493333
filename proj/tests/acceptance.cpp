// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "labroute/gateway.hpp"
#include "labroute/metrics.hpp"
#include "labroute/replay.hpp"
#include "labroute/router_http.hpp"
#include "labroute/simulator.hpp"
#include "labroute/workload.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace labroute;
namespace lt = labroute::testing;
namespace fs = std::filesystem;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream why;

  void expect(bool cond, const std::string& msg) {
    if (!cond) {
      if (ok) why << msg;
      else if (why.str().size() < 600) why << "; " << msg;
      ok = false;
    }
  }
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << std::fixed << x;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int failures = 0;

void report(int n, const std::string& title, const std::function<std::string(Check&)>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Check c;
  std::string summary;
  try {
    summary = body(c);
  } catch (const std::exception& e) {
    c.expect(false, std::string("exception: ") + e.what());
  }
  const double s = seconds_since(t0);
  if (!c.ok) ++failures;
  std::cout << (c.ok ? "[PASS] " : "[FAIL] ") << n << ' ' << title << ": " << summary;
  if (!c.ok) std::cout << " | " << c.why.str();
  std::cout << " (" << fmt(s, 1) << " s)" << std::endl;
}

bool near(const std::optional<double>& a, const std::optional<double>& b, double tol = 1e-9) {
  return a.has_value() == b.has_value() && (!a || std::abs(*a - *b) <= tol);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------

std::string oracle_equivalence(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t events = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    auto t = oracle::random_trace(seed * 7919, 1000);
    events += t.events.size();
    MetricInputs in{&t.events, &t.labs, &t.actions, &t.meta, 0.82, 3};
    const auto r = compute_report(in);
    const std::string s = "seed " + std::to_string(seed) + ": ";
    c.expect(t.events.size() <= 1000, s + "trace too long");
    c.expect(r.events == t.events.size(), s + "event count");
    c.expect(r.sessions == oracle::sessions(t.events).size(), s + "session count");
    c.expect(near(r.cai.value, oracle::cai(t.events, t.labs)), s + "cai");
    c.expect(near(r.oas.value, oracle::oas(t.events)), s + "oas");
    c.expect(near(r.psw.value, oracle::psw(t.events, t.labs)), s + "psw");
    c.expect(near(r.iil.value, oracle::iil(t.events, t.actions)), s + "iil");
    c.expect(near(r.ei.value, oracle::ei(t.events)), s + "ei");
    c.expect(near(r.chr.value, oracle::chr(t.events, 0.82)), s + "chr");
    c.expect(near(r.fcr.value, oracle::fcr(t.events, 0.82)), s + "fcr");
    const auto css = oracle::css(t.events);
    c.expect(r.css.denominator == css.pairs, s + "css pairs");
    c.expect(near(r.css.value, css.value), s + "css");
    c.expect(near(r.autonomy.value, oracle::autonomy(t.events, 3)), s + "autonomy");
    for (const auto& [b, v] : oracle::correctness(t.events, t.meta)) {
      auto it = r.correctness_by_difficulty.find(b);
      c.expect(it != r.correctness_by_difficulty.end() && near(it->second.value, v), s + "correctness " + b);
    }
    // CRG on paired costs drawn from the trace itself
    double heur = 0, emb = 0;
    for (const auto& e : t.events) (e.canonical_ids.empty() ? heur : emb) += static_cast<double>(e.cost_micro);
    c.expect(near(crg(emb, heur + emb).value, oracle::crg(emb, heur + emb)), s + "crg");
    c.expect(near(crg(emb, 0).value, oracle::crg(emb, 0)), s + "crg zero");
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 60.0, "runtime " + fmt(secs, 1) + " s");
  return "50 traces, " + std::to_string(events) + " events, all metrics match";
}

TelemetryEvent fixture_event(std::int64_t turn, HintLevel granted) {
  TelemetryEvent e;
  e.session_id = "a";
  e.lab_id = "lab";
  e.step_id = "s";
  e.turn_index = turn;
  e.hint_granted = granted;
  return e;
}

std::map<std::string, LabDescriptor> fixture_lab(int difficulty, HintDist h) {
  LabDescriptor lab;
  lab.lab_id = "lab";
  lab.steps = {{"s", difficulty, h}};
  return {{"lab", lab}};
}

std::string fixtures(Check& c) {
  const double v_cai = cai({fixture_event(1, HintLevel::L0)}, fixture_lab(1, {0.5, 0.5, 0, 0})).or_nan();
  const double v_ei = ei_from_counts({0, 10}).or_nan();
  std::vector<TelemetryEvent> p;
  const HintLevel seq[] = {HintLevel::L0, HintLevel::L1, HintLevel::L1, HintLevel::L2};
  for (int i = 0; i < 4; ++i) p.push_back(fixture_event(i + 1, seq[i]));
  const double v_psw = psw(p, fixture_lab(2, {0.25, 0.25, 0.25, 0.25})).or_nan();
  // delays 1, 3, 5 turns between action and delivery
  std::vector<TelemetryEvent> q;
  for (int t = 1; t <= 10; ++t) q.push_back(fixture_event(t, HintLevel::L1));
  q[1].action_ids = {"x"};
  q[5].action_ids = {"y"};
  q[8].action_ids = {"z"};
  const std::vector<TeacherAction> acts = {
      {"x", ActionKind::Boost, "a", 1, 0}, {"y", ActionKind::Boost, "a", 3, 0}, {"z", ActionKind::Boost, "a", 4, 0}};
  const double v_iil = iil(q, acts).or_nan();
  c.expect(std::abs(v_cai - 0.5) < 1e-12, "cai " + fmt(v_cai));
  c.expect(std::abs(v_ei - 0.5) < 1e-12, "ei " + fmt(v_ei));
  c.expect(std::abs(v_psw - 2.0) < 1e-12, "psw " + fmt(v_psw));
  c.expect(std::abs(v_iil - 3.0) < 1e-12, "iil " + fmt(v_iil));
  return "cai " + fmt(v_cai) + ", ei " + fmt(v_ei) + ", psw " + fmt(v_psw) + ", iil " + fmt(v_iil);
}

// ---------------------------------------------------------------------------
// Classroom sweep, shared by criteria 3-5 and 8.

struct SweepRun {
  SweepSpec spec;
  SimContext ctx;
  SweepResult result;
  double seconds = 0;
};

SweepRun run_classroom_sweep() {
  SweepRun r;
  r.spec = sweep_from_json(read_json_file(lt::data_dir() / "sim" / "classroom.json"), lt::data_dir() / "sim");
  const auto t0 = std::chrono::steady_clock::now();
  r.ctx = load_context(r.spec);
  r.result = run_sweep(r.spec, r.ctx, static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  r.seconds = seconds_since(t0);
  return r;
}

const SweepRun& classroom_sweep() {
  static const SweepRun r = run_classroom_sweep();
  return r;
}

std::string governance(Check& c) {
  const auto& sw = classroom_sweep();
  std::size_t jobs = 0, blocks = 0, p2_blocks = 0;
  for (const auto& j : sw.result.jobs) {
    if (j.config.group != "steerability") continue;
    ++jobs;
    const auto tag = j.job_hash.substr(0, 12) + " " + to_string(j.config.policy);
    c.expect(j.error.empty(), tag + " error " + j.error);
    if (j.config.policy != PolicyMode::P0) {
      c.expect(j.max_spent_micro <= usd_to_micro(5.0), tag + " spend " + fmt(micro_to_usd(j.max_spent_micro)));
      c.expect(j.max_l3_per_session <= 2, tag + " l3 " + std::to_string(j.max_l3_per_session));
    } else {
      c.expect(j.approvals == 0 && j.denials == 0, tag + " approvals under P0");
    }
    // integrity: every blocked turn closes a run of >= 3 flagged turns, and only P2 blocks
    std::map<std::string, int> streak;
    std::vector<const TelemetryEvent*> ordered;
    for (const auto& e : j.events) ordered.push_back(&e);
    std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) {
      return std::tie(a->session_id, a->turn_index) < std::tie(b->session_id, b->turn_index);
    });
    for (const auto* e : ordered) {
      int& s = streak[e->session_id];
      s = e->integrity_flag ? s + 1 : 0;
      if (e->route_why.find("integrity_block") == std::string::npos) continue;
      ++blocks;
      if (j.config.policy == PolicyMode::P2) ++p2_blocks;
      c.expect(j.config.policy == PolicyMode::P2, tag + " block outside P2");
      c.expect(s >= 3, tag + " block after " + std::to_string(s) + " flags");
    }
  }
  c.expect(jobs == 48, "expected 48 jobs, got " + std::to_string(jobs));
  c.expect(p2_blocks > 0, "no integrity block exercised");
  c.expect(sw.seconds < 600.0, "sweep runtime " + fmt(sw.seconds, 1) + " s");
  return std::to_string(jobs) + " jobs, " + std::to_string(blocks) + " blocked turns (all P2, all after 3 flags), sweep " +
         fmt(sw.seconds, 1) + " s";
}

std::vector<double> collect(const std::string& group, const std::vector<PolicyMode>& policies,
                            const std::function<const MetricValue&(const JobResult&)>& get,
                            const std::function<bool(const JobResult&)>& keep = {}) {
  std::vector<double> out;
  for (const auto& j : classroom_sweep().result.jobs) {
    if (j.config.group != group) continue;
    if (std::find(policies.begin(), policies.end(), j.config.policy) == policies.end()) continue;
    if (keep && !keep(j)) continue;
    const auto& m = get(j);
    if (m.value) out.push_back(*m.value);
  }
  return out;
}

std::string table_iv(Check& c) {
  using P = PolicyMode;
  auto m = [](auto field, std::vector<P> ps) {
    return mean(collect("steerability", ps, [field](const JobResult& j) -> const MetricValue& { return j.report.*field; }));
  };
  const double cai0 = m(&MetricReport::cai, {P::P0}), cai12 = m(&MetricReport::cai, {P::P1, P::P2});
  const double oas0 = m(&MetricReport::oas, {P::P0}), oas2 = m(&MetricReport::oas, {P::P2});
  const double psw0 = m(&MetricReport::psw, {P::P0}), psw2 = m(&MetricReport::psw, {P::P2});
  const double iil0 = m(&MetricReport::iil, {P::P0}), iil2 = m(&MetricReport::iil, {P::P2});
  const double ei0 = m(&MetricReport::ei, {P::P0}), ei2 = m(&MetricReport::ei, {P::P2});
  c.expect(cai12 - cai0 >= 0.05, "cai gap " + fmt(cai12 - cai0));
  c.expect(oas2 - oas0 >= 0.10, "oas gap " + fmt(oas2 - oas0));
  c.expect(psw2 / psw0 >= 1.8, "psw ratio " + fmt(psw2 / psw0));
  c.expect(iil2 < iil0, "iil " + fmt(iil2) + " vs " + fmt(iil0));
  c.expect(ei2 < ei0, "ei " + fmt(ei2) + " vs " + fmt(ei0));
  return "cai " + fmt(cai0) + "->" + fmt(cai12) + ", oas " + fmt(oas0) + "->" + fmt(oas2) + ", psw x" +
         fmt(psw2 / psw0, 2) + ", iil " + fmt(iil0, 2) + "->" + fmt(iil2, 2) + ", ei " + fmt(ei0) + "->" + fmt(ei2);
}

std::string table_v_vi(Check& c) {
  using P = PolicyMode;
  const auto& jobs = classroom_sweep().result.jobs;
  std::map<std::string, std::vector<double>> chr_by;
  std::vector<double> crg_ok, fcr_all, css1, css2;
  std::size_t parity_violations = 0, off_jobs = 0, p0_jobs = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& j = jobs[i];
    const auto tag = j.job_hash.substr(0, 12);
    c.expect(j.error.empty(), tag + " error " + j.error);
    if (j.config.embedding == "off") {
      ++off_jobs;
      c.expect(j.report.chr.value && *j.report.chr.value == 0.0, tag + " chr with embedding off");
      continue;
    }
    if (j.config.policy == P::P0) {
      ++p0_jobs;
      c.expect(j.report.css.value && *j.report.css.value == 0.0, tag + " css under P0");
      continue;
    }
    if (j.config.group != "canonical") continue;
    if (j.report.chr.value) chr_by[j.config.embedding].push_back(*j.report.chr.value);
    if (j.report.fcr.value) fcr_all.push_back(*j.report.fcr.value);
    if (j.report.css.value) (j.config.policy == P::P1 ? css1 : css2).push_back(*j.report.css.value);
    if (j.config.embedding == "fastembed-edge") continue;
    if (j.report.crg.value) crg_ok.push_back(*j.report.crg.value);
    else ++parity_violations;
  }
  c.expect(off_jobs > 0 && p0_jobs > 0, "sweep lacks embedding-off or P0 jobs");
  const double css_p1 = mean(css1), css_p2 = mean(css2), crg_m = mean(crg_ok), fcr_m = mean(fcr_all);
  c.expect(css_p2 > css_p1 && css_p1 > 0, "css p2 " + fmt(css_p2) + " p1 " + fmt(css_p1));
  c.expect(parity_violations == 0, std::to_string(parity_violations) + " CRG pairs broke CAI/OAS parity");
  c.expect(crg_m >= 0.10 && crg_m <= 0.25, "crg " + fmt(crg_m));
  c.expect(fcr_m < 0.05, "fcr " + fmt(fcr_m));
  double best = 0;
  for (const auto& [id, v] : chr_by) {
    if (id != "fastembed-edge") best = std::max(best, mean(v));
  }
  const double edge = chr_by.count("fastembed-edge") ? mean(chr_by.at("fastembed-edge")) : std::nan("");
  c.expect(best - edge >= 0.15, "edge chr " + fmt(edge) + " vs best " + fmt(best));
  return "css p1 " + fmt(css_p1) + " < p2 " + fmt(css_p2) + ", crg " + fmt(crg_m) + " (" + std::to_string(crg_ok.size()) +
         " pairs), fcr " + fmt(fcr_m) + ", chr best " + fmt(best) + " edge " + fmt(edge);
}

std::string replay_check(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto setup = lt::mock_replay_setup();
  const auto queries = build_replay_workload(*setup.bank, setup.prices);
  const auto rep = replay(queries, {ReplayPath::Premium, ReplayPath::Local, ReplayPath::Routed}, setup);
  const double secs = seconds_since(t0);
  const auto& routed = rep.paths.at(ReplayPath::Routed);
  const double ce = rep.correctness.at("easy").or_nan(), cm = rep.correctness.at("moderate").or_nan(),
               ca = rep.correctness.at("advanced").or_nan();
  c.expect(routed.failed == 0, std::to_string(routed.failed) + " routed queries failed");
  c.expect(routed.local_share >= 0.70, "local share " + fmt(routed.local_share));
  c.expect(rep.savings && *rep.savings >= 0.60, "savings " + fmt(rep.savings.value_or(0)));
  c.expect(rep.chr && *rep.chr == 1.0, "chr " + fmt(rep.chr.value_or(-1)));
  c.expect(rep.fcr && *rep.fcr == 0.0, "fcr " + fmt(rep.fcr.value_or(-1)));
  c.expect(ce >= cm && cm >= ca && ca < 0.8, "correctness " + fmt(ce) + "/" + fmt(cm) + "/" + fmt(ca));
  c.expect(routed.mean_plan_ms < 150.0, "plan overhead " + fmt(routed.mean_plan_ms, 2) + " ms");
  c.expect(secs < 300.0, "runtime " + fmt(secs, 1) + " s");
  return std::to_string(routed.queries) + " queries, local " + fmt(routed.local_share, 2) + ", savings " +
         fmt(rep.savings.value_or(0), 3) + ", correctness " + fmt(ce, 2) + "/" + fmt(cm, 2) + "/" + fmt(ca, 2) +
         ", plan " + fmt(routed.mean_plan_ms, 2) + " ms";
}

// ---------------------------------------------------------------------------

std::string protocol(Check& c) {
  if (std::system("python3 -c 'import openai' >/dev/null 2>&1") != 0) {
    c.expect(false, "python openai package not importable");
    return "skipped";
  }
  const auto root = lt::data_dir();
  const auto tree = ConfigTree::load(root);
  RouterSnapshot snap;
  snap.policy = PolicyConfig::preset(PolicyMode::P2);
  snap.labs = tree.labs;
  snap.prices = tree.prices;
  if (fs::exists(root / "overlays.json")) snap.overlays = overlays_from_json(read_json_file(root / "overlays.json"));
  const auto overlays = snap.overlays;
  MockEmbeddingProvider clean(0);
  auto bank = std::make_shared<const Bank>(load_bank(root / "banks" / "demo_bank_89.json", &clean));
  std::shared_ptr<const EmbeddingProvider> provider = make_provider("mock");
  Router router(std::move(snap), bank, provider);
  InProcessRouter service(router);
  TraceStore trace;
  GatewayConfig gc;
  gc.shared_secret = "lab-key";
  gc.prices = tree.prices;
  Gateway gw(service, backends_from_json(read_json_file(root / "replay" / "mock_profile.json")), trace, gc);
  GatewayServer server(gw);
  lt::Serving<GatewayServer> serving(server);

  // Turns: bank questions for the first lab, spread over three sessions.
  const std::string lab = tree.labs.begin()->first;
  json turns = json::array();
  for (const auto& e : bank->entries()) {
    if (!e.has_tag("lab:" + lab)) continue;
    const int k = static_cast<int>(turns.size());
    turns.push_back({{"session_id", "proto-" + std::to_string(k % 3)},
                     {"lab_id", lab},
                     {"step_id", tag_value(e, "step:")},
                     {"text", k % 4 == 3 ? "what is the capital of france" : e.text}});
    if (turns.size() == 12) break;
  }
  const auto dir = lt::temp_dir("acceptance-protocol");
  write_text_file(dir / "turns.json", turns.dump());

  std::vector<json> replies;
  auto run_client = [&] {
    const std::string cmd = "python3 '" + std::string(LABROUTE_TESTS_DIR) + "/stock_client.py' " + serving.url() +
                            " lab-key '" + (dir / "turns.json").string() + "' 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    c.expect(pipe != nullptr, "popen failed");
    if (!pipe) return;
    std::string out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
    const int rc = pclose(pipe);
    c.expect(rc == 0, "client exit " + std::to_string(rc) + ": " + out.substr(0, 300));
    std::istringstream lines(out);
    for (std::string line; std::getline(lines, line);) {
      auto j = json::parse(line, nullptr, false);
      if (j.is_object()) replies.push_back(j);
    }
  };
  run_client();
  router.swap_overlay("diagnostic", wall_clock_s());
  run_client();

  c.expect(replies.size() == 2 * turns.size(), std::to_string(replies.size()) + " replies");
  const auto events = trace.read_stream();
  std::map<std::string, const TelemetryEvent*> by_trace;
  for (const auto& e : events) by_trace[e.trace_id] = &e;
  std::size_t matched = 0, streamed = 0;
  for (const auto& r : replies) {
    c.expect(r.at("status") == 200, "status " + r.at("status").dump());
    // All four present; the id list is empty only when nothing matched.
    bool all = true;
    for (const auto& [k, v] : r.at("headers").items()) all = all && v.is_string();
    if (all) {
      const auto& hs = r.at("headers");
      const auto why = hs.at("X-Route-Why").get<std::string>();
      const bool miss = why.find("canonical:none") != std::string::npos || why.find("canonical:off") != std::string::npos ||
                        why.find("canonical:error") != std::string::npos;
      all = !why.empty() && !hs.at("X-Overlay-Fingerprint").get<std::string>().empty() &&
            !hs.at("X-Trace-Id").get<std::string>().empty() &&
            (miss || !hs.at("X-Canonical-Ids").get<std::string>().empty());
    }
    c.expect(all, "missing routing header: " + r.at("headers").dump());
    streamed += r.at("chunks").get<int>() > 1 && !r.at("text").get<std::string>().empty();
    const auto& h = r.at("headers");
    if (!h.at("X-Trace-Id").is_string()) continue;
    auto it = by_trace.find(h.at("X-Trace-Id").get<std::string>());
    if (it == by_trace.end()) continue;
    const auto& e = *it->second;
    const std::string expect =
        e.overlay_id.empty() ? std::string(kNoFingerprint) : overlay_fingerprint(overlays.at(e.overlay_id), e.hint_granted);
    if (h.at("X-Overlay-Fingerprint") == expect && e.overlay_fingerprint == expect) ++matched;
  }
  c.expect(streamed == replies.size(), std::to_string(streamed) + " of " + std::to_string(replies.size()) + " streamed");
  c.expect(!replies.empty() && matched == replies.size(),
           "fingerprint recomputed on " + std::to_string(matched) + " of " + std::to_string(replies.size()));
  return std::to_string(replies.size()) + " streamed turns via openai client, fingerprints matched " +
         std::to_string(matched) + "/" + std::to_string(replies.size());
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

std::string determinism(Check& c) {
  const auto& first = classroom_sweep();
  SweepRun second = run_classroom_sweep();
  const auto a = lt::temp_dir("acceptance-det-a"), b = lt::temp_dir("acceptance-det-b");
  write_sweep(a, first.spec, first.result, {});
  write_sweep(b, second.spec, second.result, {});
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), a);
    c.expect(fs::exists(b / rel) && read_all(e.path()) == read_all(b / rel), "differs: " + rel.string());
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) files_b += e.is_regular_file();
  c.expect(files == files_b, "file count " + std::to_string(files) + " vs " + std::to_string(files_b));
  return std::to_string(files) + " files byte-identical across two runs";
}

std::string poisson_escalation(Check& c) {
  // One student, one 45-minute pass per phase.
  LabDescriptor lab;
  lab.lab_id = "poisson";
  const double rates[] = {0.08, 0.11, 0.14, 0.09};
  for (int p = 0; p < 4; ++p) {
    lab.steps.push_back({"p" + std::to_string(p), 1, {0.25, 0.25, 0.25, 0.25}});
    lab.phases.push_back({"p" + std::to_string(p), rates[p]});
  }
  WorkloadConfig cfg;
  cfg.lab_id = lab.lab_id;
  cfg.students = 1;
  cfg.cohorts = 1;
  cfg.phase_minutes = 45;
  const int seeds = 1000;
  std::vector<double> sums(4, 0.0);
  for (int s = 1; s <= seeds; ++s) {
    cfg.seed = static_cast<std::uint64_t>(s);
    for (const auto& a : generate_workload(cfg, lab, nullptr).arrivals) sums[a.phase] += 1;
  }
  std::ostringstream means;
  for (int p = 0; p < 4; ++p) {
    const double expect = rates[p] * 45.0, m = sums[p] / seeds, sigma = std::sqrt(expect / seeds);
    c.expect(std::abs(m - expect) <= 3 * sigma, "phase " + std::to_string(p) + " mean " + fmt(m) + " vs " + fmt(expect));
    means << (p ? "/" : "") << fmt(m, 2);
  }
  const auto model = EscalationModel::defaults();
  std::ostringstream freqs;
  for (std::size_t p = 0; p < 4; ++p) {
    Rng rng(1000 + p);
    int l2 = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) l2 += model.next(p, HintLevel::L1, 2, 1.0, rng) == HintLevel::L2;
    const double f = static_cast<double>(l2) / trials;
    c.expect(std::abs(f - 0.63) <= 0.03, "phase " + std::to_string(p) + " escalation " + fmt(f));
    freqs << (p ? "/" : "") << fmt(f, 3);
  }
  return "arrival means " + means.str() + ", L1->L2 " + freqs.str();
}

}  // namespace

int main() {
  report(1, "oracle equivalence", oracle_equivalence);
  report(2, "metric fixtures", fixtures);
  report(3, "governance invariants", governance);
  report(4, "steerability direction", table_iv);
  report(5, "canonical metrics", table_v_vi);
  report(6, "replay", replay_check);
  report(7, "protocol", protocol);
  report(8, "determinism", determinism);
  report(9, "poisson and escalation", poisson_escalation);
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
