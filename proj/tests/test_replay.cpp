#include <gtest/gtest.h>

#include "labroute/replay.hpp"
#include "support.hpp"

using namespace labroute;
namespace lt = labroute::testing;

namespace {

struct ReplayRun {
  ReplaySetup setup = lt::mock_replay_setup();
  std::vector<ReplayQuery> queries = build_replay_workload(*setup.bank, setup.prices);
  ReplayReport report = replay(queries, {ReplayPath::Premium, ReplayPath::Local, ReplayPath::Routed}, setup);
};

const ReplayRun& run() {
  static const ReplayRun r;
  return r;
}

}  // namespace

TEST(ReplayWorkload, MatchesComposition) {
  const auto& q = run().queries;
  std::map<std::string, std::map<std::string, int>> got;
  for (const auto& x : q) ++got[x.lab_id][x.difficulty];
  EXPECT_EQ(got, default_replay_composition());
  EXPECT_EQ(q.size(), 100u);
  EXPECT_EQ(q.front().query_id, "q001");
}

TEST(ReplayWorkload, RegenerationIsIdentical) {
  const auto& r = run();
  auto again = build_replay_workload(*r.setup.bank, r.setup.prices);
  ASSERT_EQ(again.size(), r.queries.size());
  for (std::size_t i = 0; i < again.size(); ++i) {
    EXPECT_EQ(again[i].text, r.queries[i].text);
    EXPECT_EQ(again[i].canonical_id, r.queries[i].canonical_id);
  }
}

TEST(ReplayWorkload, MissingBucketThrows) {
  const auto& r = run();
  ReplayComposition c = {{"no_such_lab", {{"easy", 1}}}};
  EXPECT_THROW(build_replay_workload(*r.setup.bank, r.setup.prices, c), ConfigError);
}

TEST(Replay, BucketsAndPreferredTier) {
  EXPECT_EQ(preferred_tier("easy"), Tier::Local);
  EXPECT_EQ(preferred_tier("moderate"), Tier::Local);
  EXPECT_EQ(preferred_tier("advanced"), Tier::Premium);
  EXPECT_EQ(difficulty_buckets().size(), 3u);
}

TEST(Replay, AlignedWorkloadAlwaysHits) {
  const auto& rep = run().report;
  ASSERT_TRUE(rep.chr && rep.fcr);
  EXPECT_EQ(*rep.chr, 1.0);
  EXPECT_EQ(*rep.fcr, 0.0);
}

TEST(Replay, DirectPathsUseOneTier) {
  const auto& rep = run().report;
  EXPECT_EQ(rep.paths.at(ReplayPath::Premium).local_share, 0.0);
  EXPECT_EQ(rep.paths.at(ReplayPath::Local).local_share, 1.0);
  EXPECT_EQ(rep.paths.at(ReplayPath::Local).cost_micro, 0);
}

TEST(Replay, TtftIsPlanPlusBackend) {
  for (const auto& r : run().report.records) {
    if (r.failed) continue;
    EXPECT_NEAR(r.ttft_ms, r.plan_ms + r.backend_ttft_ms, 1e-6) << r.query_id;
  }
}

TEST(Replay, RoutedIsCheaperThanPremium) {
  const auto& rep = run().report;
  ASSERT_TRUE(rep.savings);
  EXPECT_GT(*rep.savings, 0.0);
  EXPECT_LT(rep.paths.at(ReplayPath::Routed).cost_micro, rep.paths.at(ReplayPath::Premium).cost_micro);
}

TEST(Replay, CsvReportsHaveHeaders) {
  const auto& rep = run().report;
  EXPECT_EQ(replay_cost_csv(rep).rfind("path,queries,failed,cost_usd", 0), 0u);
  EXPECT_EQ(replay_ttft_csv(rep).rfind("path,query_id", 0), 0u);
}
