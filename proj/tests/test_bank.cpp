#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "labroute/bank.hpp"
#include "labroute/embedding.hpp"
#include "support.hpp"

using namespace labroute;
using labroute::testing::entry;
using labroute::testing::kLocal;
using labroute::testing::kPremium;

namespace {

std::vector<MatchResult> brute_force(std::string_view q, const Bank& bank, const EmbeddingProvider& p, double tau,
                                     int k) {
  const auto qv = p.embed(q);
  std::vector<MatchResult> all;
  for (const auto& e : bank.entries()) all.push_back({e.id, cosine(qv, p.embed(e.text)), 0});
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<MatchResult> out;
  for (const auto& r : all) {
    if (r.score < tau || static_cast<int>(out.size()) == k) break;
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST(MockProvider, DeterministicAndUnitNorm) {
  MockEmbeddingProvider p(7);
  auto a = p.embed("abc");
  auto b = p.embed("abc");
  EXPECT_EQ(a, b);
  EXPECT_NEAR(l2_norm(a), 1.0, 1e-6);
  EXPECT_EQ(a.size(), p.dimensionality());
}

TEST(MockProvider, DisjointTrigramsNearlyOrthogonal) {
  MockEmbeddingProvider p(0, 384);
  EXPECT_LT(std::abs(cosine(p.embed("abcdefgh"), p.embed("uvwxyz01"))), 0.05);
  EXPECT_LT(std::abs(cosine(p.embed("oscilloscope trigger"), p.embed("jump quiz bk"))), 0.05);
}

TEST(MockProvider, SeedChangesVectors) {
  MockEmbeddingProvider a(1), b(2);
  EXPECT_NE(a.embed("rc circuit"), b.embed("rc circuit"));
}

TEST(Bank, SelfMatchIsRankOne) {
  MockEmbeddingProvider p;
  auto bank = labroute::testing::small_bank(p);
  for (const auto& e : bank->entries()) {
    auto r = match(e.text, *bank, p, 0.82, 3);
    ASSERT_FALSE(r.empty());
    EXPECT_EQ(r[0].entry_id, e.id);
    EXPECT_NEAR(r[0].score, 1.0, 1e-6);
    EXPECT_EQ(r[0].rank, 1);
  }
}

TEST(Bank, BelowThresholdIsEmpty) {
  MockEmbeddingProvider p;
  auto bank = labroute::testing::small_bank(p);
  EXPECT_TRUE(match("what is the capital of france", *bank, p, 0.82, 3).empty());
}

TEST(Bank, ThreeEntriesAgainstBruteForce) {
  // Paraphrase ladder: A is nearly the query, C shares only a few trigrams.
  MockEmbeddingProvider p;
  const std::string q = "my capacitor voltage trace on the oscilloscope is flat";
  auto bank = Bank::from_entries({entry("A", "my capacitor voltage trace on the oscilloscope is flat!", kLocal),
                                  entry("B", "the capacitor voltage trace on my oscilloscope is flat", kLocal),
                                  entry("C", "capacitor voltage looks flat", kPremium)},
                                 &p);
  const auto expect = brute_force(q, bank, p, 0.82, 3);
  const auto got = match(q, bank, p, 0.82, 3);
  ASSERT_EQ(got.size(), expect.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].entry_id, expect[i].entry_id);
    EXPECT_NEAR(got[i].score, expect[i].score, 1e-6);  // float32 vectors
  }
  // A and B clear the threshold, C does not.
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0].entry_id, "A");
  EXPECT_EQ(got[1].entry_id, "B");
}

TEST(Bank, DuplicateIdNamesEntry) {
  MockEmbeddingProvider p;
  try {
    Bank::from_entries({entry("dup", "one", kLocal), entry("dup", "two", kLocal)}, &p);
    FAIL() << "expected BankLoadError";
  } catch (const BankLoadError& e) {
    EXPECT_EQ(e.entry(), "dup");
  }
}

TEST(Bank, EmptyBankMissesEverything) {
  MockEmbeddingProvider p;
  auto bank = Bank::from_entries({}, &p);
  EXPECT_EQ(bank.size(), 0u);
  EXPECT_TRUE(match("anything", bank, p, 0.0, 3).empty());
}

TEST(Bank, ShippedBankHas89Entries) {
  MockEmbeddingProvider p;
  auto bank = load_bank(labroute::testing::data_dir() / "banks" / "demo_bank_89.json", &p);
  EXPECT_EQ(bank.size(), 89u);
  for (const auto& e : bank.entries()) {
    EXPECT_FALSE(e.preferred_model.empty()) << e.id;
    EXPECT_NEAR(l2_norm(e.vector), 1.0, 1e-6);
  }
}

TEST(Bank, MalformedEntryNamed) {
  MockEmbeddingProvider p;
  json doc = {{"entries", json::array({{{"id", "x.1"}}})}};
  try {
    bank_from_json(doc, &p);
    FAIL();
  } catch (const BankLoadError& e) {
    EXPECT_EQ(e.entry(), "x.1");
  }
}

TEST(Match, Errors) {
  MockEmbeddingProvider p;
  auto bank = labroute::testing::small_bank(p);
  EXPECT_THROW(match("q", *bank, p, 1.5, 3), RequestError);
  EXPECT_THROW(match("q", *bank, p, 0.5, 0), RequestError);
}

// Property: the result is the score-sorted prefix of entries >= tau, at most k,
// and is a prefix of the result for any larger k.
TEST(Match, PrefixPropertyAgainstBruteForce) {
  MockEmbeddingProvider p;
  auto bank = load_bank(labroute::testing::data_dir() / "banks" / "demo_bank_89.json", &p);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const auto& src = bank.entries()[rng() % bank.size()];
    std::string q = src.text;
    const std::size_t cut = rng() % (q.size() / 2 + 1);
    q = q.substr(cut / 2, q.size() - cut);
    const double tau = std::uniform_real_distribution<double>(0.2, 0.95)(rng);
    const int k = 1 + static_cast<int>(rng() % 5);
    auto got = match(q, bank, p, tau, k);
    auto want = brute_force(q, bank, p, tau, k);
    ASSERT_EQ(got.size(), want.size()) << q;
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(got[i].score, want[i].score, 1e-6);
      EXPECT_GE(got[i].score, tau);
      if (i) EXPECT_GE(got[i - 1].score, got[i].score);
    }
    auto wider = match(q, bank, p, tau, k + 2);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(wider[i].entry_id, got[i].entry_id);
  }
}

TEST(Match, CacheReturnsSameResultsAndExpires) {
  MockEmbeddingProvider p;
  auto bank = labroute::testing::small_bank(p);
  MatchCache cache(300);
  const std::string q = "the oscilloscope trace of the capacitor voltage is flat";
  auto cold = match(q, *bank, p, 0.5, 3, &cache, 0.0);
  auto warm = match(q, *bank, p, 0.5, 3, &cache, 10.0);
  EXPECT_EQ(cold, warm);
  EXPECT_EQ(cache.hits(), 1u);
  match(q, *bank, p, 0.5, 3, &cache, 400.0);
  EXPECT_EQ(cache.hits(), 1u);
  EXPECT_EQ(cache.misses(), 2u);
}

TEST(Match, LatencyOn89EntryBank) {
  MockEmbeddingProvider p;
  auto bank = load_bank(labroute::testing::data_dir() / "banks" / "demo_bank_89.json", &p);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 100; ++i) match("my led does not light when the smu sweeps " + std::to_string(i), bank, p, 0.82, 3);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / 100;
  EXPECT_LT(ms, 50.0);
}

TEST(Providers, DegradationTable) {
  EXPECT_EQ(make_provider("off"), nullptr);
  EXPECT_THROW(make_provider("nonexistent-model"), std::exception);
  for (const char* id : {"mock", "gte-large-en-v1.5", "bge-large-en-v1.5", "nomic-embed-text-v1.5",
                         "bge-small-en-v1.5", "fastembed-edge"}) {
    auto p = make_provider(id);
    ASSERT_NE(p, nullptr);
    EXPECT_EQ(p->provider_id(), id);
    EXPECT_NEAR(l2_norm(p->embed("probe the rc node")), 1.0, 1e-6);
  }
}
