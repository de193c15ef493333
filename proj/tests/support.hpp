#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/embedding.hpp"
#include "labroute/replay.hpp"
#include "labroute/router.hpp"
#include "labroute/telemetry.hpp"

namespace labroute::testing {

inline std::filesystem::path data_dir() { return LABROUTE_DATA_DIR; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("labroute-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// One lab with two steps; h_s favours L1.
inline LabDescriptor tiny_lab(const std::string& id = "rc_step") {
  LabDescriptor lab;
  lab.lab_id = id;
  lab.steps = {{"build", 1, {0.2, 0.5, 0.2, 0.1}}, {"scope", 2, {0.1, 0.4, 0.4, 0.1}}};
  lab.phases = {{"setup", 0.08}, {"acquisition", 0.11}};
  return lab;
}

inline CanonicalEntry entry(const std::string& id, const std::string& text, const std::string& model,
                            double max_cost = 0.01, HintLevel natural = HintLevel::L1,
                            HintLevel cap = HintLevel::L3) {
  CanonicalEntry e;
  e.id = id;
  e.text = text;
  e.preferred_model = model;
  e.overlay = "socratic_troubleshoot";
  e.max_cost_usd = max_cost;
  e.hint_level = natural;
  e.max_hint_level = cap;
  return e;
}

inline constexpr const char* kPremium = "openai/gpt-5-mini";
inline constexpr const char* kLocal = "openai/gpt-oss-20b";

inline std::shared_ptr<const Bank> small_bank(const EmbeddingProvider& p) {
  std::vector<CanonicalEntry> es = {
      entry("rc.build.01", "my rc circuit output does not change when i flip the switch", kLocal),
      entry("rc.scope.01", "the oscilloscope trace of the capacitor voltage is flat and noisy", kPremium),
      entry("rc.scope.02", "how do i set the trigger level so the step response is stable", kLocal, 0.01,
            HintLevel::L1, HintLevel::L1),
      entry("rc.fit.01", "fit an exponential to the capacitor discharge and report the residuals", kPremium, 0.0005),
  };
  return std::make_shared<const Bank>(Bank::from_entries(std::move(es), &p));
}

struct RouterFixture {
  std::shared_ptr<const EmbeddingProvider> provider = std::make_shared<MockEmbeddingProvider>(0);
  std::shared_ptr<const Bank> bank = small_bank(*provider);
  std::unique_ptr<Router> router;

  explicit RouterFixture(PolicyConfig policy, std::map<std::string, LabDescriptor> labs = {{"rc_step", tiny_lab()}}) {
    RouterSnapshot snap;
    snap.policy = std::move(policy);
    snap.labs = std::move(labs);
    router = std::make_unique<Router>(std::move(snap), bank, provider);
  }
  explicit RouterFixture(PolicyMode m) : RouterFixture(PolicyConfig::preset(m)) {}

  RouteRequest request(const std::string& session, const std::string& step, const std::string& text,
                       std::optional<HintLevel> hint = std::nullopt, double now = 1000.0) const {
    RouteRequest r;
    r.session_id = session;
    r.lab_id = "rc_step";
    r.step_id = step;
    r.query_text = text;
    r.requested_hint = hint;
    r.now_s = now;
    return r;
  }
};

/// Same wiring as `labroute replay run --backends mock`.
inline ReplaySetup mock_replay_setup() {
  const auto root = data_dir();
  const auto tree = ConfigTree::load(root);
  ReplaySetup setup;
  MockEmbeddingProvider clean(0);
  setup.bank = std::make_shared<const Bank>(load_bank(root / "banks" / "demo_bank_89.json", &clean));
  setup.provider = make_provider("mock");
  setup.prices = tree.prices;
  setup.labs = tree.labs;
  if (std::filesystem::exists(root / "overlays.json")) {
    setup.overlays = overlays_from_json(read_json_file(root / "overlays.json"));
  }
  if (auto it = tree.policies.find("P1"); it != tree.policies.end()) setup.policy = it->second;
  setup.backends = backends_from_json(read_json_file(root / "replay" / "mock_profile.json"));
  return setup;
}

/// Runs an httplib-style server (bind + listen_after_bind) on a thread.
template <class Server>
struct Serving {
  Server& server;
  int port = -1;
  std::thread thread;

  explicit Serving(Server& s) : server(s) {
    port = server.bind("127.0.0.1", 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    for (int i = 0; i < 200 && !server.http().is_running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ~Serving() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

struct SseReply {
  int status = 0;
  httplib::Headers headers;
  std::string body;
  double first_data_ms = -1.0;  // time to the first "data:" bytes carrying content

  std::string header(const std::string& k) const {
    auto it = headers.find(k);
    return it == headers.end() ? std::string() : it->second;
  }
  /// Concatenated delta content from the event stream.
  std::string content() const {
    std::string out;
    std::size_t pos = 0;
    while ((pos = body.find("data: ", pos)) != std::string::npos) {
      auto end = body.find("\n\n", pos);
      auto payload = body.substr(pos + 6, end - pos - 6);
      pos = end;
      if (payload == "[DONE]") break;
      auto j = nlohmann::json::parse(payload, nullptr, false);
      if (j.is_object() && j.contains("choices") && j["choices"][0].contains("delta") &&
          j["choices"][0]["delta"].contains("content")) {
        out += j["choices"][0]["delta"]["content"].get<std::string>();
      }
    }
    return out;
  }
};

inline SseReply sse_post(const std::string& base_url, const std::string& path, const nlohmann::json& body,
                         httplib::Headers headers = {}) {
  httplib::Client cli(base_url);
  cli.set_read_timeout(30, 0);
  SseReply out;
  httplib::Request req;
  req.method = "POST";
  req.path = path;
  req.headers = std::move(headers);
  req.set_header("Content-Type", "application/json");
  req.body = body.dump();
  const auto t0 = std::chrono::steady_clock::now();
  req.content_receiver = [&](const char* data, std::size_t n, std::uint64_t, std::uint64_t) {
    out.body.append(data, n);
    if (out.first_data_ms < 0 && out.body.find("\"content\"") != std::string::npos) {
      out.first_data_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    return true;
  };
  auto res = cli.send(req);
  if (res) {
    out.status = res->status;
    out.headers = res->headers;
    if (out.body.empty()) out.body = res->body;
  }
  return out;
}

}  // namespace labroute::testing
