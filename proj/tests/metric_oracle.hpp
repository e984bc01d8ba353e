#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "metaper/retrieval.hpp"

namespace testing_oracle {

using metaper::RankedRetrieval;

// Definitional metrics: for query i with ranking r_i and n_i relevant shots
// present, AP_i = Σ_k (R_ik / n_i) · P_ik, where R_ik marks a relevant shot
// at rank k and P_ik is the fraction of relevant shots in the top k.
struct Metrics {
  double mrr = 0, recall = 0, map = 0;
};

inline Metrics metrics(const std::vector<RankedRetrieval>& rankings, const std::vector<std::vector<std::string>>& rel,
                     std::size_t K) {
  Metrics m;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q].ranking;
    auto is_rel = [&](std::size_t pos) {
      return std::find(rel[q].begin(), rel[q].end(), r[pos].first) != rel[q].end();
    };
    std::size_t n = 0;
    for (std::size_t pos = 0; pos < r.size(); ++pos) n += is_rel(pos);
    std::size_t first = 0;
    for (std::size_t pos = 0; pos < r.size() && first == 0; ++pos)
      if (is_rel(pos)) first = pos + 1;
    double ap = 0.0;
    for (std::size_t k = 1; k <= r.size(); ++k) {
      if (!is_rel(k - 1)) continue;
      std::size_t hits = 0;
      for (std::size_t j = 0; j < k; ++j) hits += is_rel(j);
      ap += (1.0 / static_cast<double>(n)) * (static_cast<double>(hits) / static_cast<double>(k));
    }
    m.mrr += 1.0 / static_cast<double>(first);
    m.recall += first <= K ? 1.0 : 0.0;
    m.map += ap;
  }
  const double nq = static_cast<double>(rankings.size());
  m.mrr /= nq;
  m.recall /= nq;
  m.map /= nq;
  return m;
}

/// Random rankings over shuffled shot ids with a random relevant subset,
/// sometimes including an id absent from the ranking.
inline void random_case(metaper::RngStream& rng, std::vector<RankedRetrieval>& rankings,
                        std::vector<std::vector<std::string>>& rel, std::size_t& K) {
  rankings.clear();
  rel.clear();
  const std::size_t nq = 1 + rng.uniform_index(6);
  K = 1 + rng.uniform_index(10);
  for (std::size_t q = 0; q < nq; ++q) {
    const std::size_t n = 1 + rng.uniform_index(40);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("shot" + std::to_string(i));
    rng.shuffle(ids);
    std::vector<std::string> relevant;
    for (auto i : rng.sample_without_replacement(n, 1 + rng.uniform_index(n))) relevant.push_back(ids[i]);
    if (rng.uniform01() < 0.3) relevant.push_back("absent" + std::to_string(q));
    rng.shuffle(ids);
    RankedRetrieval r;
    double s = 1.0;
    for (auto& id : ids) r.ranking.emplace_back(std::move(id), s -= 0.01);
    rankings.push_back(std::move(r));
    rel.push_back(std::move(relevant));
  }
}

}  // namespace testing_oracle
