#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "labroute/config.hpp"
#include "labroute/core.hpp"
#include "labroute/embedding.hpp"
#include "labroute/hash.hpp"

namespace labroute {

struct CanonicalEntry {
  std::string id;
  std::string text;
  std::string preferred_model;
  std::vector<std::string> tags;
  std::string overlay;
  double max_cost_usd = 0.0;
  HintLevel hint_level = HintLevel::L1;      // the entry's natural level
  HintLevel max_hint_level = HintLevel::L3;  // per-entry cap
  std::string embedding_provider;
  Vector vector;
  std::string vector_hash;

  bool has_tag(std::string_view t) const { return std::find(tags.begin(), tags.end(), t) != tags.end(); }
};

/// Checksum stored next to a vector: SHA-256 of the little-endian float32 bytes.
inline std::string vector_checksum(const Vector& v) {
  std::string bytes(v.size() * sizeof(float), '\0');
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return sha256_hex(bytes);
}

struct MatchResult {
  std::string entry_id;
  double score = 0.0;
  int rank = 0;

  friend bool operator==(const MatchResult&, const MatchResult&) = default;
};

struct BankLoadError : ConfigError {
  BankLoadError(std::string entry, const std::string& what)
      : ConfigError(entry.empty() ? what : "entry '" + entry + "': " + what), entry_(std::move(entry)) {}
  const std::string& entry() const noexcept { return entry_; }

 private:
  std::string entry_;
};

/// Immutable after load.
class Bank {
 public:
  Bank() = default;

  static Bank from_entries(std::vector<CanonicalEntry> entries, const EmbeddingProvider* provider) {
    Bank b;
    std::set<std::string> seen;
    for (auto& e : entries) {
      if (e.id.empty()) throw BankLoadError("", "entry with empty id");
      if (!seen.insert(e.id).second) throw BankLoadError(e.id, "duplicate id '" + e.id + "'");
      if (e.text.empty()) throw BankLoadError(e.id, "text must be non-empty");
      if (e.max_cost_usd < 0) throw BankLoadError(e.id, "max_cost_usd must be >= 0");
      if (!e.vector.empty()) {
        const double n = l2_norm(e.vector);
        if (std::abs(n - 1.0) > 1e-6) throw BankLoadError(e.id, "stored vector is not unit-normalized");
        if (!e.vector_hash.empty() && e.vector_hash != vector_checksum(e.vector)) {
          b.warnings_.push_back("entry '" + e.id + "': vector_hash mismatch");
        }
      } else {
        if (provider == nullptr) throw BankLoadError(e.id, "no stored vector and no embedding provider");
        try {
          e.vector = provider->embed(e.text);
        } catch (const std::exception& ex) {
          throw BankLoadError(e.id, std::string("provider failure: ") + ex.what());
        }
        e.embedding_provider = provider->provider_id();
        if (!e.vector_hash.empty() && e.vector_hash != vector_checksum(e.vector)) {
          b.warnings_.push_back("entry '" + e.id + "': vector_hash does not match recomputed vector");
        }
      }
      if (provider != nullptr && e.vector.size() != provider->dimensionality()) {
        throw BankLoadError(e.id, "vector dimension " + std::to_string(e.vector.size()) +
                                      " does not match provider dimension " +
                                      std::to_string(provider->dimensionality()));
      }
    }
    b.entries_ = std::move(entries);
    for (std::size_t i = 0; i < b.entries_.size(); ++i) b.index_[b.entries_[i].id] = i;
    return b;
  }

  const std::vector<CanonicalEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

  const CanonicalEntry* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  /// All entries scored and ordered: score descending, then id ascending.
  std::vector<MatchResult> score_all(const Vector& query) const {
    std::vector<MatchResult> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back({e.id, dot(query, e.vector), 0});
    std::sort(out.begin(), out.end(), [](const MatchResult& a, const MatchResult& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.entry_id < b.entry_id;
    });
    for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i + 1);
    return out;
  }

 private:
  std::vector<CanonicalEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> warnings_;
};

inline CanonicalEntry entry_from_json(const json& j) {
  CanonicalEntry e;
  e.id = j.value("id", std::string());
  try {
    e.text = j.at("text").get<std::string>();
    e.preferred_model = j.at("preferred_model").get<std::string>();
    e.tags = j.value("tags", std::vector<std::string>{});
    e.overlay = j.value("overlay", std::string());
    e.max_cost_usd = j.value("max_cost_usd", 0.0);
    if (j.contains("hint_level")) e.hint_level = parse_hint_level(j.at("hint_level").get<std::string>());
    if (j.contains("max_hint_level")) e.max_hint_level = parse_hint_level(j.at("max_hint_level").get<std::string>());
    if (j.contains("embedding")) {
      const auto& emb = j.at("embedding");
      e.embedding_provider = emb.value("provider", std::string());
      if (emb.contains("vector")) e.vector = emb.at("vector").get<Vector>();
      e.vector_hash = emb.value("vector_hash", std::string());
    }
  } catch (const json::exception& ex) {
    throw BankLoadError(e.id, std::string("malformed entry: ") + ex.what());
  } catch (const ConfigError& ex) {
    throw BankLoadError(e.id, ex.what());
  }
  return e;
}

inline json to_json(const CanonicalEntry& e, bool include_vector = false) {
  json j = {{"id", e.id},
            {"text", e.text},
            {"preferred_model", e.preferred_model},
            {"tags", e.tags},
            {"overlay", e.overlay},
            {"max_cost_usd", e.max_cost_usd},
            {"hint_level", to_string(e.hint_level)},
            {"max_hint_level", to_string(e.max_hint_level)}};
  json emb = {{"provider", e.embedding_provider}};
  if (include_vector) {
    emb["vector"] = e.vector;
    emb["vector_hash"] = vector_checksum(e.vector);
  } else if (!e.vector_hash.empty()) {
    emb["vector_hash"] = e.vector_hash;
  }
  j["embedding"] = emb;
  return j;
}

/// Accepts either a bare array of entries or {"entries": [...]}.
inline Bank bank_from_json(const json& doc, const EmbeddingProvider* provider) {
  const json* arr = &doc;
  if (doc.is_object()) {
    if (!doc.contains("entries")) throw BankLoadError("", "bank document has no 'entries'");
    arr = &doc.at("entries");
  }
  if (!arr->is_array()) throw BankLoadError("", "bank entries must be an array");
  std::vector<CanonicalEntry> entries;
  entries.reserve(arr->size());
  for (const auto& j : *arr) entries.push_back(entry_from_json(j));
  return Bank::from_entries(std::move(entries), provider);
}

inline Bank load_bank(const std::filesystem::path& path, const EmbeddingProvider* provider) {
  return bank_from_json(read_json_file(path), provider);
}

/// TTL cache of full score lists keyed by (provider, query hash). Threshold
/// and top-k are applied after lookup so one entry serves every (tau, k).
class MatchCache {
 public:
  explicit MatchCache(double ttl_s = 300.0) : ttl_s_(ttl_s) {}

  double ttl() const { return ttl_s_; }
  void set_ttl(double ttl_s) {
    std::lock_guard lock(mu_);
    ttl_s_ = ttl_s;
  }

  std::optional<std::vector<MatchResult>> get(const std::string& provider_id, std::string_view query, double now_s) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key(provider_id, query));
    if (it == entries_.end()) {
      ++misses_;
      return std::nullopt;
    }
    if (now_s - it->second.inserted_at >= ttl_s_ || now_s < it->second.inserted_at) {
      entries_.erase(it);
      ++misses_;
      return std::nullopt;
    }
    ++hits_;
    return it->second.results;
  }

  void put(const std::string& provider_id, std::string_view query, std::vector<MatchResult> results, double now_s) {
    std::lock_guard lock(mu_);
    entries_[key(provider_id, query)] = {std::move(results), now_s};
  }

  void clear() {
    std::lock_guard lock(mu_);
    entries_.clear();
  }

  std::size_t hits() const {
    std::lock_guard lock(mu_);
    return hits_;
  }
  std::size_t misses() const {
    std::lock_guard lock(mu_);
    return misses_;
  }

 private:
  struct Slot {
    std::vector<MatchResult> results;
    double inserted_at = 0.0;
  };

  static std::string key(const std::string& provider_id, std::string_view query) {
    return provider_id + '\x1f' + sha256_hex(query);
  }

  mutable std::mutex mu_;
  double ttl_s_;
  std::unordered_map<std::string, Slot> entries_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// Entries scoring >= tau, best first, at most k. An empty result is a miss,
/// not an error. Provider exceptions propagate as ProviderError.
inline std::vector<MatchResult> match(std::string_view query, const Bank& bank, const EmbeddingProvider& provider,
                                      double tau, int k, MatchCache* cache = nullptr, double now_s = 0.0) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw RequestError("tau", "tau must be in [0,1]");
  if (k < 1) throw RequestError("top_k", "top_k must be >= 1");
  std::optional<std::vector<MatchResult>> scored;
  if (cache) scored = cache->get(provider.provider_id(), query, now_s);
  if (!scored) {
    Vector q;
    try {
      q = provider.embed(query);
    } catch (const ProviderError&) {
      throw;
    } catch (const std::exception& e) {
      throw ProviderError(e.what());
    }
    scored = bank.score_all(q);
    if (cache) cache->put(provider.provider_id(), query, *scored, now_s);
  }
  std::vector<MatchResult> out;
  for (const auto& r : *scored) {
    if (static_cast<int>(out.size()) >= k || r.score < tau) break;
    out.push_back(r);
  }
  return out;
}

}  // namespace labroute
