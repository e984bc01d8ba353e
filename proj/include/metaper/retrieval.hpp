#pragma once

// Exhaustive cosine retrieval over a shot corpus, query baselines and the
// ranking metrics (MRR, recall@K, mAP).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "metaper/encoders.hpp"
#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/mining.hpp"
#include "metaper/numerics.hpp"
#include "metaper/parallel.hpp"

namespace metaper {

enum class QueryKind { kGeneric, kContextual };

inline QueryKind parse_query_kind(std::string_view s) {
  if (s == "generic") return QueryKind::kGeneric;
  if (s == "contextual") return QueryKind::kContextual;
  throw Error(ErrorCode::kSchema, "unknown query kind '" + std::string(s) + "'");
}

inline std::string_view query_kind_name(QueryKind k) {
  return k == QueryKind::kGeneric ? "generic" : "contextual";
}

struct QuerySpec {
  std::string query_id;
  std::string instance_id;
  QueryKind kind = QueryKind::kGeneric;
  std::string prompt;
  std::vector<std::string> relevant_shots;
};

inline void to_json(json& j, const QuerySpec& q) {
  j = json{{"query_id", q.query_id},
           {"instance_id", q.instance_id},
           {"kind", query_kind_name(q.kind)},
           {"prompt", q.prompt},
           {"relevant_shots", q.relevant_shots}};
}

inline QuerySpec query_from_json(const json& j) {
  const std::string what = "query";
  QuerySpec q;
  q.query_id = require<std::string>(j, "query_id", what);
  q.instance_id = require<std::string>(j, "instance_id", what);
  q.kind = parse_query_kind(require<std::string>(j, "kind", what));
  q.prompt = require<std::string>(j, "prompt", what);
  q.relevant_shots = require<std::vector<std::string>>(j, "relevant_shots", what);
  if (q.kind == QueryKind::kContextual && q.relevant_shots.empty()) {
    throw Error(ErrorCode::kSchema, "contextual query '" + q.query_id + "' has no relevant shots");
  }
  return q;
}

inline std::vector<QuerySpec> parse_queries(std::string_view text) {
  std::vector<QuerySpec> out;
  for (const auto& row : parse_jsonl(text, "queries")) out.push_back(query_from_json(row));
  return out;
}

inline std::string queries_to_jsonl(const std::vector<QuerySpec>& queries) {
  std::vector<json> rows;
  for (const auto& q : queries) rows.emplace_back(q);
  return to_jsonl(rows);
}

// ---------------------------------------------------------------------------
// Corpus and ranking

struct Corpus {
  std::vector<std::string> ids;
  std::vector<Vector> embeddings;

  void add(std::string id, Vector v) {
    ids.push_back(std::move(id));
    embeddings.push_back(std::move(v));
  }
  std::size_t size() const noexcept { return ids.size(); }
};

/// Every shot of the given videos except the excluded ids (training shots).
inline Corpus build_corpus(const std::vector<TranscriptedVideo>& videos, const EmbeddingStore& store,
                           const std::set<std::string>& exclude = {}) {
  Corpus c;
  for (const auto& v : videos) {
    for (const auto& s : v.shots) {
      if (!exclude.contains(s.id)) c.add(s.id, shot_embedding(s.frames, store));
    }
  }
  return c;
}

inline double score(std::span<const double> query, std::span<const double> shot) { return cosine(query, shot); }

struct RankedRetrieval {
  std::string query_id;
  std::vector<std::pair<std::string, double>> ranking;  // descending score
};

/// Scores every corpus shot and sorts by descending score, ties by shot id.
inline RankedRetrieval rank_corpus(std::span<const double> query, const Corpus& corpus,
                                   std::string query_id = {}, unsigned threads = 1) {
  if (corpus.size() == 0) throw Error(ErrorCode::kEmptyCorpus, "retrieval corpus is empty");
  std::vector<double> scores(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) { scores[i] = score(query, corpus.embeddings[i]); });
  RankedRetrieval out{std::move(query_id), {}};
  out.ranking.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) out.ranking.emplace_back(corpus.ids[i], scores[i]);
  std::sort(out.ranking.begin(), out.ranking.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

enum class QueryMethod { kPersonalized, kLanguage, kVisual, kVisionLanguage };

inline std::string_view method_name(QueryMethod m) {
  switch (m) {
    case QueryMethod::kPersonalized: return "personalized";
    case QueryMethod::kLanguage: return "language";
    case QueryMethod::kVisual: return "visual";
    case QueryMethod::kVisionLanguage: return "visual+language";
  }
  return "personalized";
}

inline QueryMethod parse_method(std::string_view s) {
  for (auto m : {QueryMethod::kPersonalized, QueryMethod::kLanguage, QueryMethod::kVisual,
                 QueryMethod::kVisionLanguage}) {
    if (method_name(m) == s) return m;
  }
  if (s == "v+l") return QueryMethod::kVisionLanguage;
  throw Error(ErrorCode::kInvalidArgument, "unknown query method '" + std::string(s) + "'");
}

/// Query vector of a non-personalized baseline: the category prompt
/// (language), the mean training shot (visual), or the normalized mean of
/// both (visual+language).
inline Vector baseline_embedding(QueryMethod method, const std::string& category,
                                 std::span<const Vector> training_shots, const ReferenceTextEncoder& enc) {
  auto language = [&] { return enc.encode_phrase(category_prompt(category)); };
  auto visual = [&] {
    if (training_shots.empty()) throw Error(ErrorCode::kEmptyInstance, "baseline needs training shots");
    Vector mean(training_shots[0].size(), 0.0);
    for (const auto& s : training_shots) axpy(1.0, s, mean);
    for (double& x : mean) x /= static_cast<double>(training_shots.size());
    return l2_normalize(mean);
  };
  switch (method) {
    case QueryMethod::kLanguage: return language();
    case QueryMethod::kVisual: return visual();
    case QueryMethod::kVisionLanguage: {
      const auto l = language();
      auto v = visual();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (v[i] + l[i]);
      return l2_normalize(v);
    }
    case QueryMethod::kPersonalized: break;
  }
  throw Error(ErrorCode::kInvalidArgument, "personalized queries need a trained model");
}

// ---------------------------------------------------------------------------
// Metrics

struct QueryResult {
  std::string query_id;
  std::size_t first_rank = 0;  // 1-based rank of the first relevant shot
  std::size_t relevant = 0;    // n_i, relevant shots present in the ranking
  double average_precision = 0.0;
};

struct MetricReport {
  std::size_t k = 5;
  std::vector<QueryResult> queries;
  double mrr = 0.0;
  double recall_at_k = 0.0;
  double map = 0.0;
};

/// MRR = mean 1/rank_i, R@K = mean 1{rank_i ≤ K},
/// mAP = mean Σ_k (R_ik / n_i)·P_ik with P_ik the precision at cut-off k.
/// n_i counts the relevant shots that appear in the ranking.
inline MetricReport compute_metrics(const std::vector<RankedRetrieval>& rankings,
                                    const std::vector<std::vector<std::string>>& relevant,
                                    std::size_t k = 5) {
  if (rankings.size() != relevant.size()) throw Error(ErrorCode::kShapeMismatch, "rankings vs ground truth");
  MetricReport out;
  out.k = k;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const std::unordered_set<std::string> rel(relevant[q].begin(), relevant[q].end());
    QueryResult r{rankings[q].query_id, 0, 0, 0.0};
    for (const auto& [id, s] : rankings[q].ranking) r.relevant += rel.contains(id);
    if (r.relevant == 0) throw Error(ErrorCode::kNoRelevantShots, "query '" + rankings[q].query_id + "'");
    std::size_t hits = 0;
    for (std::size_t pos = 0; pos < rankings[q].ranking.size(); ++pos) {
      if (!rel.contains(rankings[q].ranking[pos].first)) continue;
      ++hits;
      if (r.first_rank == 0) r.first_rank = pos + 1;
      r.average_precision +=
          (1.0 / static_cast<double>(r.relevant)) * (static_cast<double>(hits) / static_cast<double>(pos + 1));
    }
    out.queries.push_back(std::move(r));
  }
  if (out.queries.empty()) return out;
  for (const auto& r : out.queries) {
    out.mrr += 1.0 / static_cast<double>(r.first_rank);
    out.recall_at_k += r.first_rank <= k ? 1.0 : 0.0;
    out.map += r.average_precision;
  }
  const double n = static_cast<double>(out.queries.size());
  out.mrr /= n;
  out.recall_at_k /= n;
  out.map /= n;
  return out;
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Mean and standard error of the mean (sample standard deviation / √n);
/// a single value has zero error.
inline MeanStderr mean_stderr(std::span<const double> xs) {
  MeanStderr out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  out.stderr_ = sd / std::sqrt(static_cast<double>(xs.size()));
  return out;
}

/// Runs every query of one kind with the supplied query-vector function.
/// Returns nullopt when there are no queries of that kind.
inline std::optional<MetricReport> run_queries(
    const std::vector<QuerySpec>& queries, QueryKind kind,
    const std::function<Vector(const QuerySpec&)>& query_vector, const Corpus& corpus, std::size_t k,
    unsigned threads) {
  std::vector<const QuerySpec*> selected;
  for (const auto& q : queries) {
    if (q.kind == kind) selected.push_back(&q);
  }
  if (selected.empty()) return std::nullopt;
  std::vector<RankedRetrieval> rankings;
  std::vector<std::vector<std::string>> relevant;
  for (const auto* q : selected) {
    rankings.push_back(rank_corpus(query_vector(*q), corpus, q->query_id, threads));
    relevant.push_back(q->relevant_shots);
  }
  return compute_metrics(rankings, relevant, k);
}

// ---------------------------------------------------------------------------
// Multi-seed report

/// Per method and query kind, one MetricReport per seed.
struct EvaluationReport {
  std::size_t k = 5;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::map<std::string, std::vector<MetricReport>>> runs;

  void add(QueryMethod method, QueryKind kind, MetricReport r) {
    runs[std::string(method_name(method))][std::string(query_kind_name(kind))].push_back(std::move(r));
  }

  MeanStderr summary(const std::string& method, const std::string& kind, const std::string& metric) const {
    std::vector<double> xs;
    auto m = runs.find(method);
    if (m == runs.end()) return {};
    auto k_it = m->second.find(kind);
    if (k_it == m->second.end()) return {};
    for (const auto& r : k_it->second) {
      if (metric == "mAP") xs.push_back(r.map);
      else if (metric == "MRR") xs.push_back(r.mrr);
      else xs.push_back(r.recall_at_k);
    }
    return mean_stderr(xs);
  }

  bool has(const std::string& method, const std::string& kind) const {
    auto m = runs.find(method);
    return m != runs.end() && m->second.contains(kind);
  }

  std::string recall_name() const { return "R@" + std::to_string(k); }

  json to_json() const {
    json methods = json::object();
    for (const auto& [method, kinds] : runs) {
      json jm = json::object();
      for (const auto& [kind, reports] : kinds) {
        json jk = json::object();
        for (const auto& metric : {std::string("mAP"), std::string("MRR"), recall_name()}) {
          const auto s = summary(method, kind, metric);
          jk[metric] = {{"mean", s.mean}, {"stderr", s.stderr_}};
        }
        json per_seed = json::array();
        for (const auto& r : reports) {
          per_seed.push_back({{"mAP", r.map}, {"MRR", r.mrr}, {recall_name(), r.recall_at_k}, {"queries", r.queries.size()}});
        }
        jk["per_seed"] = per_seed;
        jm[kind] = jk;
      }
      methods[method] = jm;
    }
    return json{{"k", k}, {"seeds", seeds}, {"methods", methods}};
  }

  /// Columns: contextual MRR and R@K, generic mAP and MRR, in percent.
  std::string to_table() const {
    const std::string rk = recall_name();
    auto cell = [&](const std::string& method, const std::string& kind, const std::string& metric) {
      if (!has(method, kind)) return std::string("-");
      const auto s = summary(method, kind, metric);
      char buf[48];
      std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", 100.0 * s.mean, 100.0 * s.stderr_);
      return std::string(buf);
    };
    const std::vector<std::string> header{"Method", "Context MRR", "Context " + rk, "Generic mAP", "Generic MRR"};
    std::vector<std::vector<std::string>> rows{header};
    for (auto m : {QueryMethod::kLanguage, QueryMethod::kVisual, QueryMethod::kVisionLanguage,
                   QueryMethod::kPersonalized}) {
      const std::string name(method_name(m));
      if (!runs.contains(name)) continue;
      rows.push_back({name, cell(name, "contextual", "MRR"), cell(name, "contextual", rk),
                      cell(name, "generic", "mAP"), cell(name, "generic", "MRR")});
    }
    // Column widths in code points so the "±" does not skew alignment.
    auto width = [](const std::string& s) {
      std::size_t n = 0;
      for (unsigned char c : s) n += (c & 0xC0) != 0x80;
      return n;
    };
    std::vector<std::size_t> widths(header.size(), 0);
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], width(r[c]));
    }
    std::string out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < rows[i].size(); ++c) {
        const auto pad = widths[c] - width(rows[i][c]);
        if (c == 0) {
          out += rows[i][c] + std::string(pad, ' ');
        } else {
          out += "  " + std::string(pad, ' ') + rows[i][c];
        }
      }
      out += '\n';
      if (i == 0) {
        std::size_t total = 0;
        for (auto w : widths) total += w + 2;
        out += std::string(total - 2, '-') + '\n';
      }
    }
    return out;
  }
};

}  // namespace metaper
