// Plans a few turns for one student against the demo bank and prints why
// each was routed where it was.

#include <iostream>

#include "labroute/bank.hpp"
#include "labroute/config.hpp"
#include "labroute/router.hpp"

using namespace labroute;

int main(int argc, char** argv) {
  const std::filesystem::path data = LABROUTE_DATA_DIR;
  const auto tree = ConfigTree::load(data);

  RouterSnapshot snap;
  snap.policy = PolicyConfig::preset(argc > 1 ? parse_policy_mode(argv[1]) : PolicyMode::P2);
  snap.labs = tree.labs;
  snap.prices = tree.prices;

  std::shared_ptr<const EmbeddingProvider> provider = make_provider("mock");
  auto bank = std::make_shared<const Bank>(load_bank(data / "banks" / "demo_bank_89.json", provider.get()));
  Router router(std::move(snap), bank, provider);

  // Two bank questions for one step (the second asked twice, then pushed to L2)
  // and one question the bank does not cover.
  std::vector<const CanonicalEntry*> picks;
  for (const auto& e : bank->entries()) {
    if (e.has_tag("lab:rc_step") && (picks.empty() || picks[0]->tags == e.tags)) picks.push_back(&e);
    if (picks.size() == 2) break;
  }
  std::string step;
  for (const auto& t : picks.at(0)->tags) {
    if (t.rfind("step:", 0) == 0) step = t.substr(5);
  }
  const std::vector<std::pair<std::string, std::optional<HintLevel>>> turns = {
      {picks[0]->text, std::nullopt},
      {picks[1]->text, std::nullopt},
      {picks[1]->text, HintLevel::L2},
      {"what is the capital of france", std::nullopt},
  };
  double now = 0;
  for (const auto& [text, hint] : turns) {
    RouteRequest req;
    req.session_id = "demo-s001";
    req.lab_id = "rc_step";
    req.step_id = step;
    req.query_text = text;
    req.requested_hint = hint;
    req.now_s = now += 30;
    auto plan = router.plan(req);
    router.complete_turn(plan, plan.est_cost_micro);
    std::cout << plan.turn_index << "  " << to_string(plan.tier) << "/" << to_string(plan.granted_hint) << "  "
              << plan.model_id << "\n   q: " << text << "\n   why: " << plan.route_why << "\n";
  }
}
