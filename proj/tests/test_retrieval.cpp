#include <gtest/gtest.h>

#include <cmath>

#include "metaper/retrieval.hpp"
#include "metric_oracle.hpp"

using namespace metaper;

namespace {

RankedRetrieval ranking_of(std::vector<std::string> ids) {
  RankedRetrieval r;
  double s = 1.0;
  for (auto& id : ids) r.ranking.emplace_back(std::move(id), s -= 0.01);
  return r;
}

Corpus random_corpus(RngStream& rng, std::size_t n, std::size_t d) {
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) c.add("s" + std::to_string(1000 + i), l2_normalize(rng.normal_vector(d, 1.0)));
  return c;
}

}  // namespace

TEST(Metrics, HandComputedExample) {
  const auto r = ranking_of({"a", "b", "c", "d"});
  const auto m = compute_metrics({r}, {{"b", "d"}}, 1);
  EXPECT_DOUBLE_EQ(m.mrr, 0.5);
  EXPECT_DOUBLE_EQ(m.recall_at_k, 0.0);
  EXPECT_DOUBLE_EQ(m.map, 0.5 * (1.0 / 2 + 2.0 / 4));
  EXPECT_DOUBLE_EQ(compute_metrics({r}, {{"b", "d"}}, 2).recall_at_k, 1.0);
  EXPECT_EQ(m.queries[0].first_rank, 2u);
  EXPECT_EQ(m.queries[0].relevant, 2u);
}

TEST(Metrics, PerfectRankingScoresOne) {
  const auto m = compute_metrics({ranking_of({"x", "y", "z"})}, {{"x", "y"}}, 5);
  EXPECT_EQ(m.mrr, 1.0);
  EXPECT_EQ(m.recall_at_k, 1.0);
  EXPECT_EQ(m.map, 1.0);
}

TEST(Metrics, RelevantShotsMissingFromRankingAreNotCounted) {
  const auto m = compute_metrics({ranking_of({"a", "b"})}, {{"b", "gone"}}, 5);
  EXPECT_EQ(m.queries[0].relevant, 1u);
  EXPECT_DOUBLE_EQ(m.map, 0.5);
}

TEST(Metrics, QueryWithoutRelevantShotsIsAnError) {
  try {
    compute_metrics({ranking_of({"a"})}, {{"b"}}, 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoRelevantShots);
  }
  EXPECT_THROW(compute_metrics({ranking_of({"a"})}, {}, 5), Error);
}

TEST(Metrics, MatchesBruteForceOracleExactly) {
  RngStream rng(2024);
  std::vector<RankedRetrieval> rankings;
  std::vector<std::vector<std::string>> rel;
  std::size_t K = 0;
  for (int trial = 0; trial < 100; ++trial) {
    testing_oracle::random_case(rng, rankings, rel, K);
    const auto got = compute_metrics(rankings, rel, K);
    const auto want = testing_oracle::metrics(rankings, rel, K);
    EXPECT_EQ(got.mrr, want.mrr) << "trial " << trial;
    EXPECT_EQ(got.recall_at_k, want.recall);
    EXPECT_EQ(got.map, want.map);
  }
}

TEST(Stats, MeanAndStandardError) {
  const std::vector<double> xs{1, 2, 3, 4};
  const auto s = mean_stderr(xs);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stderr_, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(mean_stderr(std::vector<double>{0.7}).stderr_, 0.0);
  EXPECT_EQ(mean_stderr(std::vector<double>{}).mean, 0.0);
}

TEST(Ranking, TiesBreakByShotIdAscending) {
  Corpus c;
  c.add("b", {1, 0});
  c.add("a", {1, 0});
  c.add("c", {0, 1});
  c.add("aa", {1, 0});
  const auto r = rank_corpus(Vector{1, 0}, c, "q");
  std::vector<std::string> ids;
  for (const auto& [id, s] : r.ranking) ids.push_back(id);
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "aa", "b", "c"}));
}

TEST(Ranking, EmptyCorpusIsAnError) {
  try {
    rank_corpus(Vector{1, 0}, Corpus{}, "q");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyCorpus);
  }
}

TEST(Ranking, QueryScaleInvariance) {
  RngStream rng(5);
  const auto corpus = random_corpus(rng, 50, 8);
  const auto q = rng.normal_vector(8, 1.0);
  const auto base = rank_corpus(q, corpus);
  auto scaled = q;
  for (double& x : scaled) x *= 4.0;
  EXPECT_EQ(rank_corpus(scaled, corpus).ranking, base.ranking);
  for (double& x : scaled) x *= 0.9173;
  const auto odd = rank_corpus(scaled, corpus);
  for (std::size_t i = 0; i < base.ranking.size(); ++i) {
    EXPECT_EQ(odd.ranking[i].first, base.ranking[i].first);
    EXPECT_NEAR(odd.ranking[i].second, base.ranking[i].second, 1e-14);
  }
}

TEST(Ranking, CorpusOrderInvariance) {
  RngStream rng(6);
  const auto corpus = random_corpus(rng, 40, 6);
  const auto q = rng.normal_vector(6, 1.0);
  std::vector<std::size_t> perm(corpus.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Corpus shuffled;
  for (auto i : perm) shuffled.add(corpus.ids[i], corpus.embeddings[i]);
  EXPECT_EQ(rank_corpus(q, shuffled).ranking, rank_corpus(q, corpus).ranking);
}

TEST(Ranking, ThreadCountDoesNotChangeRanking) {
  RngStream rng(7);
  const auto corpus = random_corpus(rng, 200, 16);
  const auto q = rng.normal_vector(16, 1.0);
  EXPECT_EQ(rank_corpus(q, corpus, "q", 4).ranking, rank_corpus(q, corpus, "q", 1).ranking);
}

TEST(Corpora, ExcludedShotsAreLeftOut) {
  EmbeddingStore store;
  TranscriptedVideo v;
  v.video_id = "v";
  for (int i = 0; i < 3; ++i) {
    const std::string id = "v/s" + std::to_string(i);
    store.add(id + "/f", Vector{1.0 + i, 1, 0});
    v.shots.push_back({id, double(i), double(i + 1), {id + "/f"}});
  }
  const auto c = build_corpus({v}, store, {"v/s1"});
  EXPECT_EQ(c.ids, (std::vector<std::string>{"v/s0", "v/s2"}));
}

TEST(Baselines, Definitions) {
  TokenTable t(3, 8, 0);
  t.add_word("dog", Vector{0, 0, 1});
  for (const auto* w : {"an", "image", "of", "a"}) t.add_word(w, Vector(3, 0.0));
  const ReferenceTextEncoder enc(t);
  const std::vector<Vector> shots{{1, 0, 0}, {0, 1, 0}};
  EXPECT_EQ(baseline_embedding(QueryMethod::kLanguage, "dog", shots, enc), enc.encode_phrase("an image of a dog"));
  const auto v = baseline_embedding(QueryMethod::kVisual, "dog", shots, enc);
  EXPECT_NEAR(v[0], std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(v[1], std::sqrt(0.5), 1e-15);
  const auto vl = baseline_embedding(QueryMethod::kVisionLanguage, "dog", shots, enc);
  const auto want = l2_normalize(Vector{0.5 * std::sqrt(0.5), 0.5 * std::sqrt(0.5), 0.5});
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(vl[k], want[k], 1e-15);
  EXPECT_THROW(baseline_embedding(QueryMethod::kVisual, "dog", {}, enc), Error);
  EXPECT_THROW(baseline_embedding(QueryMethod::kPersonalized, "dog", shots, enc), Error);
}

TEST(Methods, NamesRoundTrip) {
  for (auto m : {QueryMethod::kPersonalized, QueryMethod::kLanguage, QueryMethod::kVisual,
                 QueryMethod::kVisionLanguage})
    EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("clip"), Error);
}

TEST(Queries, JsonlRoundTripAndSchema) {
  const std::vector<QuerySpec> qs{{"q1", "v#0", QueryKind::kGeneric, "an image of *", {"v/s1"}},
                                  {"q2", "v#0", QueryKind::kContextual, "* near the sofa", {"v/s2"}}};
  const auto text = queries_to_jsonl(qs);
  EXPECT_EQ(queries_to_jsonl(parse_queries(text)), text);
  EXPECT_THROW(parse_queries(R"({"query_id":"q","instance_id":"i","kind":"odd","prompt":"*","relevant_shots":[]})"),
               Error);
  EXPECT_THROW(
      parse_queries(R"({"query_id":"q","instance_id":"i","kind":"contextual","prompt":"*","relevant_shots":[]})"),
      Error);
}

TEST(Reports, SummaryJsonAndTable) {
  EvaluationReport rep;
  rep.k = 5;
  rep.seeds = {0, 1};
  for (double v : {0.5, 0.7}) {
    MetricReport m;
    m.map = v;
    m.mrr = v;
    m.recall_at_k = 1.0;
    rep.add(QueryMethod::kPersonalized, QueryKind::kGeneric, m);
    m.map = v / 2;
    rep.add(QueryMethod::kLanguage, QueryKind::kGeneric, m);
  }
  const auto s = rep.summary("personalized", "generic", "mAP");
  EXPECT_DOUBLE_EQ(s.mean, 0.6);
  EXPECT_NEAR(s.stderr_, 0.1, 1e-12);
  const auto j = rep.to_json();
  EXPECT_NEAR(j["methods"]["language"]["generic"]["mAP"]["mean"].get<double>(), 0.3, 1e-12);
  EXPECT_EQ(j["methods"]["personalized"]["generic"]["per_seed"].size(), 2u);
  const auto table = rep.to_table();
  EXPECT_NE(table.find("Generic mAP"), std::string::npos);
  EXPECT_NE(table.find("60.0 ± 10.0"), std::string::npos);
  EXPECT_FALSE(rep.has("visual", "generic"));
}

TEST(Reports, RunQueriesSelectsByKind) {
  RngStream rng(8);
  const auto corpus = random_corpus(rng, 10, 4);
  const std::vector<QuerySpec> qs{{"g", "i", QueryKind::kGeneric, "*", {corpus.ids[3]}}};
  auto vec = [&](const QuerySpec&) { return corpus.embeddings[3]; };
  const auto g = run_queries(qs, QueryKind::kGeneric, vec, corpus, 5, 1);
  ASSERT_TRUE(g.has_value());
  EXPECT_EQ(g->map, 1.0);
  EXPECT_FALSE(run_queries(qs, QueryKind::kContextual, vec, corpus, 5, 1).has_value());
}
