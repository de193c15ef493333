#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "labroute/core.hpp"
#include "labroute/hash.hpp"

namespace labroute {

using Vector = std::vector<float>;

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

inline void normalize_in_place(Vector& v) {
  const double n = l2_norm(v);
  if (n == 0.0) return;
  for (auto& x : v) x = static_cast<float>(x / n);
}

/// Cosine similarity. Inputs are expected unit-normalized but this does not
/// rely on it.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

struct ProviderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual const std::string& provider_id() const = 0;
  virtual std::size_t dimensionality() const = 0;
  /// Unit-norm embedding. Same text, same vector, for the provider's lifetime.
  virtual Vector embed(std::string_view text) const = 0;
};

/// Test double: signed hashing trick over character trigrams of the
/// lower-cased, whitespace-collapsed text. Deterministic and cheap, but not
/// semantically meaningful. Similar strings score high only because they
/// share trigrams.
class MockEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit MockEmbeddingProvider(std::uint64_t seed = 0, std::size_t dim = 384, std::string id = "mock")
      : seed_(seed), dim_(dim), id_(std::move(id)) {
    if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
  }

  const std::string& provider_id() const override { return id_; }
  std::size_t dimensionality() const override { return dim_; }

  Vector embed(std::string_view text) const override {
    Vector v(dim_, 0.0f);
    const std::string norm = normalize_text(text);
    if (norm.size() < 3) {
      // Degenerate input still gets a unit vector.
      v[static_cast<std::size_t>(mix_seed(seed_, fnv1a64(norm)) % dim_)] = 1.0f;
      return v;
    }
    for (std::size_t i = 0; i + 3 <= norm.size(); ++i) {
      const std::uint64_t h = mix_seed(seed_, fnv1a64(std::string_view(norm).substr(i, 3)));
      const std::size_t bucket = static_cast<std::size_t>(h % dim_);
      v[bucket] += (h >> 63) ? 1.0f : -1.0f;
    }
    normalize_in_place(v);
    if (l2_norm(v) == 0.0) v[0] = 1.0f;  // every trigram cancelled out
    return v;
  }

  static std::string normalize_text(std::string_view text) {
    std::string out = " ";
    bool space = true;
    for (unsigned char c : text) {
      if (std::isspace(c)) {
        if (!space) out.push_back(' ');
        space = true;
      } else {
        out.push_back(static_cast<char>(std::tolower(c)));
        space = false;
      }
    }
    if (!space) out.push_back(' ');
    return out;
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
  std::string id_;
};

/// Wraps a base provider and adds a deterministic text-keyed perturbation of
/// relative magnitude `degradation`. Models an encoder that disagrees with
/// whatever produced the bank's stored vectors: cos(q, stored) shrinks by
/// roughly 1/sqrt(1 + degradation^2).
class DegradedProvider final : public EmbeddingProvider {
 public:
  DegradedProvider(std::shared_ptr<const EmbeddingProvider> base, std::string id, double degradation,
                   std::uint64_t seed)
      : base_(std::move(base)), id_(std::move(id)), degradation_(degradation), seed_(seed) {}

  const std::string& provider_id() const override { return id_; }
  std::size_t dimensionality() const override { return base_->dimensionality(); }
  double degradation() const { return degradation_; }

  Vector embed(std::string_view text) const override {
    Vector v = base_->embed(text);
    if (degradation_ <= 0.0) return v;
    Vector noise(v.size());
    std::uint64_t h = mix_seed(seed_, fnv1a64(text));
    for (auto& x : noise) {
      h = splitmix64(h);
      x = static_cast<float>(static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0);
    }
    normalize_in_place(noise);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += static_cast<float>(degradation_ * noise[i]);
    normalize_in_place(v);
    return v;
  }

 private:
  std::shared_ptr<const EmbeddingProvider> base_;
  std::string id_;
  double degradation_;
  std::uint64_t seed_;
};

/// Degradation per named provider. The real encoders are external; inside
/// this project each one is the mock with a fixed mismatch level against the
/// reference vectors stored in the bank.
inline const std::map<std::string, double>& provider_degradation_table() {
  static const std::map<std::string, double> table = {
      {"mock", 0.0},
      {"gte-large-en-v1.5", 0.10},
      {"bge-large-en-v1.5", 0.13},
      {"nomic-embed-text-v1.5", 0.16},
      {"bge-small-en-v1.5", 0.20},
      {"fastembed-edge", 0.55},
  };
  return table;
}

/// Returns nullptr for "off".
inline std::shared_ptr<const EmbeddingProvider> make_provider(const std::string& id, std::uint64_t seed = 0,
                                                              std::size_t dim = 384) {
  if (id == "off" || id.empty()) return nullptr;
  auto base = std::make_shared<MockEmbeddingProvider>(seed, dim, "mock");
  if (id == "mock") return base;
  const auto& table = provider_degradation_table();
  auto it = table.find(id);
  if (it == table.end()) throw ConfigError("unknown embedding provider '" + id + "'");
  return std::make_shared<DegradedProvider>(base, id, it->second, mix_seed(seed, fnv1a64(id)));
}

}  // namespace labroute
