// labroute command line: bank checks, metrics, sweeps, replay and the two servers.
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/embedding.hpp"
#include "labroute/gateway.hpp"
#include "labroute/metrics.hpp"
#include "labroute/replay.hpp"
#include "labroute/router.hpp"
#include "labroute/router_http.hpp"
#include "labroute/simulator.hpp"
#include "labroute/telemetry.hpp"

namespace fs = std::filesystem;
using namespace labroute;

namespace {

std::function<void()> g_stop;

void on_signal(int) {
  if (g_stop) g_stop();
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : fallback;
}

struct RouterOptions {
  std::string data = LABROUTE_DEFAULT_DATA;
  std::string bank;
  std::string policy = "P1";
  std::string embedding = "mock";
  std::string router_config;
  std::uint64_t embed_seed = 0;
};

void add_router_options(CLI::App* app, RouterOptions& o) {
  app->add_option("--data", o.data, "config root (labs/, policies/, prices.json, overlays.json)");
  app->add_option("--bank", o.bank, "canonical bank JSON (default: <data>/banks/demo_bank_89.json)");
  app->add_option("--policy", o.policy, "P0, P1, P2 or a policy JSON file");
  app->add_option("--embedding", o.embedding, "embedding provider id, or off");
  app->add_option("--router-config", o.router_config, "router config JSON (tau, top_k, heuristic, privacy)");
  app->add_option("--embed-seed", o.embed_seed);
}

std::unique_ptr<Router> make_router(const RouterOptions& o) {
  const fs::path root(o.data);
  const auto tree = ConfigTree::load(root);
  RouterSnapshot snap;
  if (fs::exists(o.policy)) {
    snap.policy = policy_from_json(read_json_file(o.policy));
  } else if (auto it = tree.policies.find(o.policy); it != tree.policies.end()) {
    snap.policy = it->second;
  } else {
    snap.policy = PolicyConfig::preset(parse_policy_mode(o.policy));
  }
  if (auto v = validate_policy(snap.policy); !v.empty()) throw ConfigError("policy: " + v.front().field + " " + v.front().rule);
  if (!o.router_config.empty()) snap.config = router_config_from_json(read_json_file(o.router_config));
  if (fs::exists(root / "overlays.json")) snap.overlays = overlays_from_json(read_json_file(root / "overlays.json"));
  snap.prices = tree.prices;
  snap.labs = tree.labs;
  auto provider = make_provider(o.embedding, o.embed_seed);
  std::shared_ptr<const Bank> bank;
  if (provider) {
    MockEmbeddingProvider clean(o.embed_seed);
    bank = std::make_shared<const Bank>(
        load_bank(o.bank.empty() ? root / "banks" / "demo_bank_89.json" : fs::path(o.bank), &clean));
  }
  return std::make_unique<Router>(std::move(snap), bank, provider);
}

int cmd_bank_validate(const std::string& path, const std::string& provider_id) {
  MockEmbeddingProvider clean(0);
  auto provider = make_provider(provider_id == "off" ? "mock" : provider_id);
  Bank bank = load_bank(path, provider ? provider.get() : &clean);
  std::cout << "ok: " << bank.size() << " entries\n";
  for (const auto& w : bank.warnings()) std::cout << "warning: " << w << "\n";
  return 0;
}

int cmd_bank_match(const std::string& path, const std::string& query, double tau, int top_k) {
  MockEmbeddingProvider provider(0);
  Bank bank = load_bank(path, &provider);
  auto hits = match(query, bank, provider, tau, top_k);
  if (hits.empty()) {
    std::cout << "canonical:none\n";
    return 0;
  }
  for (const auto& h : hits) std::cout << h.rank << '\t' << h.entry_id << '\t' << format_score(h.score) << '\n';
  return 0;
}

int cmd_metrics_compute(const std::string& trace, const std::string& actions, const std::string& data, double tau,
                        bool as_json) {
  auto events = read_trace_file(trace);
  std::vector<TeacherAction> acts;
  if (!actions.empty()) acts = read_actions_file(actions);
  const auto tree = ConfigTree::load(data);
  MetricInputs in;
  in.events = &events;
  in.labs = &tree.labs;
  in.actions = &acts;
  in.tau = tau;
  auto r = compute_report(in);
  if (as_json) {
    std::cout << to_json(r).dump(2) << "\n";
  } else {
    std::cout << kMetricCsvHeader << "\n" << metric_csv_row(r) << "\n";
  }
  return 0;
}

int cmd_sim_run(const std::string& spec_path, const std::string& out, int jobs, double sensitivity, bool traces) {
  const fs::path p(spec_path);
  auto spec = sweep_from_json(read_json_file(p), p.parent_path());
  auto ctx = load_context(spec);
  std::optional<double> sens;
  if (sensitivity > 0) sens = sensitivity;
  auto result = run_sweep(spec, ctx, jobs, sens);
  write_sweep(out, spec, result, sens, traces);
  std::size_t failed = 0;
  for (const auto& j : result.jobs) failed += j.error.empty() ? 0 : 1;
  std::cout << result.jobs.size() << " jobs, " << failed << " failed -> " << out << "\n";
  return failed ? 1 : 0;
}

int cmd_replay(const std::string& path, const std::string& backends, const std::string& out, const std::string& data) {
  const fs::path root(data);
  const auto tree = ConfigTree::load(root);
  ReplaySetup setup;
  MockEmbeddingProvider clean(0);
  setup.bank = std::make_shared<const Bank>(load_bank(root / "banks" / "demo_bank_89.json", &clean));
  setup.provider = make_provider("mock");
  setup.prices = tree.prices;
  setup.labs = tree.labs;
  if (fs::exists(root / "overlays.json")) setup.overlays = overlays_from_json(read_json_file(root / "overlays.json"));
  if (auto it = tree.policies.find("P1"); it != tree.policies.end()) setup.policy = it->second;
  fs::path backend_file = backends;
  if (backends == "mock") {
    backend_file = root / "replay" / "mock_profile.json";
  } else if (backends == "live") {
    backend_file = root / "replay" / "live_backends.json";
    setup.live = true;
  }
  setup.backends = backends_from_json(read_json_file(backend_file));
  std::vector<ReplayPath> paths;
  if (path == "all") {
    paths = {ReplayPath::Premium, ReplayPath::Local, ReplayPath::Routed};
  } else {
    paths = {parse_replay_path(path)};
  }
  auto queries = build_replay_workload(*setup.bank, setup.prices);
  auto report = replay(queries, paths, setup);
  write_replay(out, report);
  std::cout << replay_cost_csv(report) << replay_latency_csv(report) << replay_correctness_csv(report);
  return 0;
}

int cmd_serve_router(const RouterOptions& o, const std::string& host, int port, const std::string& plan_log) {
  auto router = make_router(o);
  RouterServer srv(*router, {env_or("LABROUTE_SECRET", ""), plan_log});
  const int bound = srv.bind(host, port);
  if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  g_stop = [&] { srv.stop(); };
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "router listening on " << host << ":" << bound << std::endl;
  srv.listen_after_bind();
  return 0;
}

int cmd_serve_gateway(const RouterOptions& o, const std::string& router_url, const std::string& backends,
                      const std::string& trace_path, const std::string& host, int port) {
  const auto tree = ConfigTree::load(o.data);
  std::unique_ptr<Router> local_router;
  std::unique_ptr<RouterService> service;
  const std::string secret = env_or("LABROUTE_SECRET", "");
  if (router_url.empty()) {
    local_router = make_router(o);
    service = std::make_unique<InProcessRouter>(*local_router);
  } else {
    service = std::make_unique<HttpRouterClient>(router_url, secret);
  }
  TraceStore trace = trace_path.empty() ? TraceStore() : TraceStore(trace_path, env_or("LABROUTE_TRACE_KEY", "labroute-default-key"));
  GatewayConfig gc;
  gc.prices = tree.prices;
  gc.shared_secret = env_or("LABROUTE_GATEWAY_SECRET", "");
  const fs::path bf = backends.empty() ? fs::path(o.data) / "replay" / "mock_profile.json" : fs::path(backends);
  Gateway gw(*service, backends_from_json(read_json_file(bf)), trace, gc);
  GatewayServer srv(gw);
  const int bound = srv.bind(host, port);
  if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  g_stop = [&] { srv.stop(); };
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "gateway listening on " << host << ":" << bound << std::endl;
  srv.listen_after_bind();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"labroute: governed routing for teaching-lab assistants"};
  app.require_subcommand(1);

  // bank
  auto* bank = app.add_subcommand("bank", "canonical bank tools");
  bank->require_subcommand(1);
  std::string bank_path, provider_id = "mock", query;
  double tau = 0.82;
  int top_k = 3;
  auto* bv = bank->add_subcommand("validate", "load and check a bank");
  bv->add_option("bank", bank_path)->required();
  bv->add_option("--embedding", provider_id);
  auto* bm = bank->add_subcommand("match", "match one query against a bank");
  bm->add_option("bank", bank_path)->required();
  bm->add_option("query", query)->required();
  bm->add_option("--tau", tau);
  bm->add_option("--top-k", top_k);

  // metrics
  auto* metrics = app.add_subcommand("metrics", "trace metrics");
  metrics->require_subcommand(1);
  std::string trace, actions, data = LABROUTE_DEFAULT_DATA;
  bool as_json = false;
  int days = 30;
  auto* mc = metrics->add_subcommand("compute", "compute every metric over a trace");
  mc->add_option("trace", trace)->required();
  mc->add_option("--actions", actions, "teacher actions JSONL");
  mc->add_option("--data", data);
  mc->add_option("--tau", tau);
  mc->add_flag("--json", as_json);
  auto* mp = metrics->add_subcommand("prune", "drop events older than the retention window");
  mp->add_option("trace", trace)->required();
  mp->add_option("--days", days);

  // sim
  auto* sim = app.add_subcommand("sim", "classroom simulator");
  sim->require_subcommand(1);
  std::string spec, out = "out";
  int jobs = 1;
  double sensitivity = 0.0;
  bool no_traces = false;
  auto* sr = sim->add_subcommand("run", "run a sweep spec");
  sr->add_option("--spec", spec)->required();
  sr->add_option("--out", out);
  sr->add_option("--jobs", jobs, "worker threads");
  sr->add_option("--sensitivity", sensitivity, "perturb calibration knobs by +/- this percent");
  sr->add_flag("--no-traces", no_traces);

  // replay
  auto* rep = app.add_subcommand("replay", "100-query replay");
  rep->require_subcommand(1);
  std::string path = "all", backends = "mock";
  auto* rr = rep->add_subcommand("run", "replay the aligned workload");
  rr->add_option("--path", path)->check(CLI::IsMember({"all", "premium", "local", "routed"}));
  rr->add_option("--backends", backends, "mock, live, or a backends JSON file");
  rr->add_option("--out", out);
  rr->add_option("--data", data);

  // serve
  auto* serve = app.add_subcommand("serve", "run a server");
  serve->require_subcommand(1);
  RouterOptions ro;
  std::string host = "127.0.0.1", plan_log, router_url, trace_path;
  int port = 8081;
  auto* sv_r = serve->add_subcommand("router", "route planning service (secret from LABROUTE_SECRET)");
  add_router_options(sv_r, ro);
  sv_r->add_option("--host", host);
  sv_r->add_option("--port", port);
  sv_r->add_option("--plan-log", plan_log);
  auto* sv_g = serve->add_subcommand("gateway", "OpenAI-compatible gateway");
  add_router_options(sv_g, ro);
  sv_g->add_option("--router-url", router_url, "remote router; in-process when empty");
  sv_g->add_option("--backends", backends, "backends JSON");
  sv_g->add_option("--trace", trace_path, "telemetry JSONL");
  sv_g->add_option("--host", host);
  sv_g->add_option("--port", port);

  CLI11_PARSE(app, argc, argv);
  if (sv_g->parsed() && backends == "mock") backends.clear();

  try {
    if (bv->parsed()) return cmd_bank_validate(bank_path, provider_id);
    if (bm->parsed()) return cmd_bank_match(bank_path, query, tau, top_k);
    if (mc->parsed()) return cmd_metrics_compute(trace, actions, data, tau, as_json);
    if (mp->parsed()) {
      const auto dropped = prune_trace_file(trace, days, static_cast<std::int64_t>(wall_clock_s() * 1000.0));
      std::cout << "dropped " << dropped << " events\n";
      return 0;
    }
    if (sr->parsed()) return cmd_sim_run(spec, out, jobs, sensitivity, !no_traces);
    if (rr->parsed()) return cmd_replay(path, backends, out, data);
    if (sv_r->parsed()) return cmd_serve_router(ro, host, port, plan_log);
    if (sv_g->parsed()) return cmd_serve_gateway(ro, router_url, backends, trace_path, host, port);
  } catch (const BankLoadError& e) {
    std::cerr << "bank error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
