#include <gtest/gtest.h>

#include <cmath>

#include "metaper/gradcheck.hpp"
#include "metaper/personalization.hpp"
#include "metaper/synthworld.hpp"

using namespace metaper;

namespace {

// Loss oracles written straight from the definitions, with d(a, b) =
// exp(cos(a, b)/λ) and no log-sum-exp tricks.
double d_sim(const Vector& a, const Vector& b, double lambda) { return std::exp(cosine(a, b) / lambda); }

double oracle_ll(const std::vector<int>& y, const std::vector<Vector>& phi, double lambda) {
  double total = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < phi.size(); ++k)
      if (k != i) denom += d_sim(phi[i], phi[k], lambda);
    for (std::size_t j = 0; j < phi.size(); ++j)
      if (j != i && y[i] == y[j]) total -= std::log(d_sim(phi[i], phi[j], lambda) / denom);
  }
  return total;
}

double oracle_vl(const std::vector<int>& y, const std::vector<Vector>& phi, const std::vector<Vector>& shots,
                 const std::vector<Vector>& distractors, double lambda, bool exclude_self) {
  std::vector<Vector> negatives = shots;
  negatives.insert(negatives.end(), distractors.begin(), distractors.end());
  double total = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    double denom = 0.0;
    for (const auto& n : negatives) denom += d_sim(phi[i], n, lambda);
    for (std::size_t j = 0; j < phi.size(); ++j) {
      if (y[i] != y[j] || (exclude_self && i == j)) continue;
      total -= std::log(d_sim(phi[i], shots[j], lambda) / denom);
    }
  }
  return total;
}

std::vector<const Vector*> ptrs(const std::vector<Vector>& v) {
  std::vector<const Vector*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

struct Random {
  std::vector<int> y{0, 0, 1, 2, 1, 0};
  std::vector<Vector> phi, shots, distractors;
  explicit Random(std::uint64_t seed, std::size_t d = 5) {
    RngStream rng(seed);
    for (std::size_t i = 0; i < y.size(); ++i) phi.push_back(rng.normal_vector(d, 1.0));
    for (std::size_t i = 0; i < y.size(); ++i) shots.push_back(rng.normal_vector(d, 1.0));
    for (int i = 0; i < 4; ++i) distractors.push_back(rng.normal_vector(d, 1.0));
  }
};

/// A mined default world with small training settings, shared across tests.
struct Prepared {
  World world;
  ReferenceTextEncoder enc;
  std::vector<InstanceExamples> meta, personal;
  std::vector<Vector> distractors;
  TrainingConfig cfg;

  Prepared() : world(generate_world(WorldSpec{})), enc(world.table) {
    const auto meta_mined = mine_corpus(world.meta_videos, enc, world.store);
    const auto pers_mined = mine_corpus(world.personal_videos, enc, world.store);
    meta = collect_examples(meta_mined.records, world.meta_videos, world.store);
    personal = collect_examples(pers_mined.records, world.personal_videos, world.store);
    cfg.categories = world.truth.categories;
    assign_categories(meta, cfg.categories, enc);
    assign_categories(personal, cfg.categories, enc);
    distractors = distractor_pool(world.personal_videos, pers_mined.records, world.store);
    cfg.q = 32;
    cfg.rounds = 2;
    cfg.instances_per_category = 8;
    cfg.meta_epochs = 5;
    cfg.test_epochs = 10;
    cfg.distractors = 32;
  }
};

const Prepared& prepared() {
  static const Prepared p;
  return p;
}

double mean_anchor_cosine(const PersonalizedModel& m, const ReferenceTextEncoder& enc) {
  const auto tmpl = PromptTemplate::parse(kGenericPrompt, enc.table());
  double s = 0.0;
  for (const auto& [id, inst] : m.instances) {
    s += cosine(m.query_embedding(tmpl, id, enc), enc.encode_phrase(category_prompt(inst.category)));
  }
  return s / static_cast<double>(m.instances.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

TEST(Losses, LanguageLossMatchesDefinition) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Random r(seed);
    for (double lambda : {0.1, 0.5, 1.0}) {
      const auto got = loss_ll(r.y, r.phi, lambda);
      EXPECT_NEAR(got.value, oracle_ll(r.y, r.phi, lambda), 1e-9 * (1 + std::abs(got.value)));
      EXPECT_FALSE(got.degenerate);
    }
  }
}

TEST(Losses, LanguageLossWithoutPositivesIsZeroAndDegenerate) {
  Random r(4);
  const std::vector<int> unique{0, 1, 2, 3, 4, 5};
  const auto got = loss_ll(unique, r.phi, 0.1);
  EXPECT_EQ(got.value, 0.0);
  EXPECT_TRUE(got.degenerate);
}

TEST(Losses, VisionLanguageLossMatchesDefinition) {
  for (std::uint64_t seed : {5, 6, 7}) {
    Random r(seed);
    for (bool exclude : {false, true}) {
      const auto got = loss_vl(r.y, r.phi, ptrs(r.shots), ptrs(r.distractors), 0.1, exclude);
      const double want = oracle_vl(r.y, r.phi, r.shots, r.distractors, 0.1, exclude);
      EXPECT_NEAR(got.value, want, 1e-9 * (1 + std::abs(want)));
    }
  }
}

TEST(Losses, VisionLanguageLossWithoutDistractorsUsesBatchShots) {
  Random r(8);
  const auto got = loss_vl(r.y, r.phi, ptrs(r.shots), {}, 0.1);
  EXPECT_NEAR(got.value, oracle_vl(r.y, r.phi, r.shots, {}, 0.1, false), 1e-9);
  EXPECT_THROW(loss_vl({}, {}, {}, {}, 0.1), Error);
}

TEST(Losses, CategoryLossIsNegativeCosineSum) {
  Random r(9);
  const auto got = loss_cat(r.phi, ptrs(r.shots));
  double want = 0.0;
  for (std::size_t i = 0; i < r.phi.size(); ++i) want -= cosine(r.shots[i], r.phi[i]);
  EXPECT_NEAR(got.value, want, 1e-12);
}

TEST(Losses, GradientsPassFiniteDifferenceChecks) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = run_gradcheck(seed);
    EXPECT_LE(r.loss_ll, 1e-4) << seed;
    EXPECT_LE(r.loss_vl, 1e-4) << seed;
    EXPECT_LE(r.loss_cat, 1e-4) << seed;
    EXPECT_LE(r.total, 1e-4) << seed;
  }
}

TEST(Losses, VisionLanguageExcludeSelfGradient) {
  Random r(10);
  const auto an = loss_vl(r.y, r.phi, ptrs(r.shots), ptrs(r.distractors), 0.1, true);
  Vector flat, grad;
  for (std::size_t i = 0; i < r.phi.size(); ++i) {
    flat.insert(flat.end(), r.phi[i].begin(), r.phi[i].end());
    grad.insert(grad.end(), an.grad[i].begin(), an.grad[i].end());
  }
  auto f = [&](std::span<const double> x) {
    std::vector<Vector> phi(r.phi.size(), Vector(5));
    for (std::size_t i = 0; i < phi.size(); ++i) std::copy_n(x.begin() + i * 5, 5, phi[i].begin());
    return loss_vl(r.y, phi, ptrs(r.shots), ptrs(r.distractors), 0.1, true).value;
  };
  EXPECT_LT(finite_diff_check(f, flat, grad), 1e-6);
}

TEST(Losses, TotalIsWeightedSumAndAblationsDropTerms) {
  auto p = make_gradcheck_problem(4);
  const auto full = total_loss(p.batch, p.model, p.enc, p.templates, p.anchors, p.loss);
  EXPECT_NEAR(full.total, full.ll + full.vl + p.loss.lambda_c * full.cat, 1e-12);
  auto no_ll = p.loss;
  no_ll.use_ll = false;
  const auto c = total_loss(p.batch, p.model, p.enc, p.templates, p.anchors, no_ll);
  EXPECT_EQ(c.ll, 0.0);
  EXPECT_NEAR(c.total, full.vl + p.loss.lambda_c * full.cat, 1e-12);
  auto no_cat = p.loss;
  no_cat.use_cat = false;
  const auto d = total_loss(p.batch, p.model, p.enc, p.templates, p.anchors, no_cat);
  EXPECT_NEAR(d.total, full.ll + full.vl, 1e-12);
}

TEST(Losses, TotalLossGradientWithAblations) {
  auto p = make_gradcheck_problem(5);
  for (int variant = 0; variant < 3; ++variant) {
    auto cfg = p.loss;
    cfg.use_ll = variant != 0;
    cfg.use_cat = variant != 1;
    cfg.vl_exclude_self = variant == 2;
    ModelGradients g;
    total_loss(p.batch, p.model, p.enc, p.templates, p.anchors, cfg, &g);
    PersonalizedModel probe = p.model;
    const double err = finite_diff_check(
        [&](std::span<const double> x) {
          assign_parameters(probe, x);
          return total_loss(p.batch, probe, p.enc, p.templates, p.anchors, cfg).total;
        },
        flatten_parameters(p.model), flatten_gradients(p.model, g));
    EXPECT_LE(err, 1e-4) << "variant " << variant;
  }
}

// ---------------------------------------------------------------------------
// Parameters

TEST(Bank, LazyInitIsIndependentOfCreationOrder) {
  CategoryFeatureBank a(6, 4, {"dog", "cat"}, BankMode::kPerCategory, 3, 0.1);
  CategoryFeatureBank b(6, 4, {"dog", "cat"}, BankMode::kPerCategory, 3, 0.1);
  a.ensure("dog");
  a.ensure("cat");
  b.ensure("cat");
  b.ensure("dog");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.matrix("dog").values()[0], a.matrix("cat").values()[0]);
  EXPECT_THROW(CategoryFeatureBank(6, 4, {}, BankMode::kPerCategory, 3, 0.1).matrix("dog"), Error);
}

TEST(Bank, InitializationHasRequestedSpread) {
  CategoryFeatureBank bank(64, 512, {"dog"}, BankMode::kPerCategory, 1, 0.1);
  const auto v = bank.ensure("dog").values();
  double s2 = 0.0;
  for (double x : v) s2 += x * x;
  EXPECT_NEAR(std::sqrt(s2 / static_cast<double>(v.size())), 0.1, 0.002);
}

TEST(Bank, SharedAndIdentityModes) {
  CategoryFeatureBank shared(6, 4, {"dog", "cat"}, BankMode::kShared, 3, 0.1);
  EXPECT_EQ(&shared.ensure("dog"), &shared.ensure("cat"));
  CategoryFeatureBank ident(6, 4, {"dog"}, BankMode::kIdentity, 3, 0.1);
  EXPECT_EQ(ident.q(), 6u);
  EXPECT_FALSE(ident.trainable());
  EXPECT_EQ(ident.matrix("anything")(2, 2), 1.0);
  EXPECT_EQ(ident.matrix("anything")(2, 3), 0.0);
}

TEST(Bank, HashChangesWithContent) {
  CategoryFeatureBank bank(4, 3, {"dog"}, BankMode::kPerCategory, 3, 0.1);
  bank.ensure("dog");
  const auto h = bank.hash();
  Matrix m = bank.matrix("dog");
  m(0, 0) += 1e-3;
  bank.set_matrix("dog", m);
  EXPECT_NE(bank.hash(), h);
}

TEST(Tokens, InstanceTokensAreMatrixProducts) {
  RngStream rng(1);
  Matrix c(4, 3);
  for (double& x : c.values()) x = rng.normal();
  const std::vector<Vector> z{rng.normal_vector(3, 1.0), rng.normal_vector(3, 1.0)};
  const auto w = instance_tokens(c, z);
  ASSERT_EQ(w.size(), 2u);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t r = 0; r < 4; ++r)
      EXPECT_NEAR(w[t][r], c(r, 0) * z[t][0] + c(r, 1) * z[t][1] + c(r, 2) * z[t][2], 1e-14);
}

TEST(Tokens, ScaleInvarianceOfQueryEmbedding) {
  auto p = make_gradcheck_problem(6);
  const auto tmpl = PromptTemplate::parse(kGenericPrompt, p.enc.table());
  const auto base = p.model.query_embedding(tmpl, "i0", p.enc);
  for (double s : {2.0, 0.5, 4.0, 0.25}) {
    PersonalizedModel scaled = p.model;
    for (auto& [k, m] : scaled.bank.matrices())
      for (double& x : m.values()) x *= s;
    for (auto& [id, inst] : scaled.instances)
      for (auto& z : inst.z)
        for (double& x : z) x /= s;
    EXPECT_EQ(scaled.query_embedding(tmpl, "i0", p.enc), base) << "s=" << s;
  }
  PersonalizedModel odd = p.model;
  for (auto& [k, m] : odd.bank.matrices())
    for (double& x : m.values()) x *= 3.0;
  for (auto& [id, inst] : odd.instances)
    for (auto& z : inst.z)
      for (double& x : z) x /= 3.0;
  const auto v = odd.query_embedding(tmpl, "i0", p.enc);
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(v[k], base[k], 1e-14);
}

TEST(Model, SerializationRoundTripIsByteIdentical) {
  auto p = make_gradcheck_problem(7);
  p.model.encoder_hash = p.enc.hash();
  p.model.config = TrainingConfig{};
  p.model.quantize();
  const auto bytes = p.model.serialize();
  const auto back = PersonalizedModel::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.bank.hash(), p.model.bank.hash());
  EXPECT_EQ(back.instance("i2").z, p.model.instance("i2").z);
  EXPECT_EQ(back.config, p.model.config);
}

TEST(Model, QuantizedModelEqualsReloadedModel) {
  auto p = make_gradcheck_problem(8);
  const auto tmpl = PromptTemplate::parse(kGenericPrompt, p.enc.table());
  p.model.quantize();
  const auto back = PersonalizedModel::deserialize(p.model.serialize());
  EXPECT_EQ(back.query_embedding(tmpl, "i1", p.enc), p.model.query_embedding(tmpl, "i1", p.enc));
}

TEST(Model, CorruptionAndUnknownInstances) {
  auto p = make_gradcheck_problem(9);
  auto bytes = p.model.serialize();
  bytes[bytes.size() / 3] ^= 0x10;
  try {
    PersonalizedModel::deserialize(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCrcMismatch);
  }
  try {
    p.model.instance("nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownInstance);
  }
}

// ---------------------------------------------------------------------------
// Data helpers

TEST(Data, CategoryAssignmentTakesArgmaxAndFirstOnTies) {
  AnchorMap anchors{{"a", Vector{1, 0}}, {"b", Vector{0, 1}}, {"c", Vector{0, 1}}};
  const std::vector<Vector> shots{{0.1, 1}, {0.2, 0.9}};
  EXPECT_EQ(assign_category(shots, {"a", "b", "c"}, anchors), "b");
  EXPECT_EQ(assign_category(shots, {"a", "c", "b"}, anchors), "c");
  EXPECT_THROW(assign_category(shots, {}, anchors), Error);
  EXPECT_THROW(assign_category({}, {"a"}, anchors), Error);
}

TEST(Data, MinedWorldCategoriesMatchTruth) {
  const auto& p = prepared();
  std::map<std::string, std::string> truth;
  for (const auto& t : p.world.truth.instances) truth[t.instance_id] = t.category;
  ASSERT_EQ(p.personal.size(), 12u);
  for (const auto& ex : p.personal) EXPECT_EQ(ex.category, truth.at(ex.id)) << ex.id;
  for (const auto& ex : p.meta) EXPECT_EQ(ex.category, truth.at(ex.id)) << ex.id;
}

TEST(Data, DistractorPoolExcludesPositives) {
  const auto& p = prepared();
  for (const auto& d : p.distractors)
    for (const auto& ex : p.personal)
      for (const auto& s : ex.shots) EXPECT_NE(d, s);
  EXPECT_FALSE(p.distractors.empty());
}

// ---------------------------------------------------------------------------
// Training

TEST(Training, AblationMapping) {
  TrainingConfig c;
  EXPECT_EQ(c.bank_mode(), BankMode::kPerCategory);
  c.ablation = parse_ablation("a");
  EXPECT_EQ(c.bank_mode(), BankMode::kIdentity);
  c.ablation = parse_ablation("b");
  EXPECT_EQ(c.bank_mode(), BankMode::kShared);
  c.ablation = parse_ablation("c");
  EXPECT_FALSE(c.loss().use_ll);
  c.ablation = parse_ablation("d");
  EXPECT_FALSE(c.loss().use_cat);
  for (const auto* s : {"none", "a", "b", "c", "d", "e", "f"}) EXPECT_EQ(ablation_name(parse_ablation(s)), s);
  EXPECT_THROW(parse_ablation("z"), Error);
}

TEST(Training, ConfigJsonRoundTrip) {
  TrainingConfig c;
  c.q = 17;
  c.ablation = Ablation::kSharedC;
  c.templates = {"an image of *"};
  const json j = c;
  TrainingConfig back;
  from_json(j, back);
  EXPECT_EQ(json(back), j);
}

TEST(Training, ZeroRoundsLeaveTheBankUnchanged) {
  const auto& p = prepared();
  auto cfg = p.cfg;
  cfg.rounds = 0;
  const auto init = initial_bank(p.enc.dim(), cfg, 1);
  const auto out = meta_personalize(p.meta, init, p.enc, cfg, 1);
  EXPECT_EQ(out.hash(), init.hash());
}

TEST(Training, MetaPersonalizationChangesTheBank) {
  const auto& p = prepared();
  auto init = initial_bank(p.enc.dim(), p.cfg, 1);
  const auto out = meta_personalize(p.meta, init, p.enc, p.cfg, 1);
  for (const auto& c : p.cfg.categories) init.ensure(c);
  EXPECT_NE(out.hash(), init.hash());
  EXPECT_EQ(out.matrices().size(), p.cfg.categories.size());
}

TEST(Training, ZeroLearningRateKeepsInitialization) {
  const auto& p = prepared();
  auto cfg = p.cfg;
  cfg.lr_max = 0.0;
  cfg.test_epochs = 2;
  auto bank = initial_bank(p.enc.dim(), cfg, 2);
  for (const auto& c : cfg.categories) bank.ensure(c);
  const auto model = test_time_personalize(p.personal, bank, p.meta, p.distractors, p.enc, cfg, 2);
  PersonalizedModel ref;
  ref.bank = bank;
  ref.quantize();
  EXPECT_EQ(model.bank.hash(), ref.bank.hash());
  for (const auto& [id, inst] : model.instances) {
    double s2 = 0.0;
    for (double x : inst.z[0]) s2 += x * x;
    EXPECT_NEAR(std::sqrt(s2 / static_cast<double>(cfg.q)), cfg.init_std, 0.06) << id;
  }
}

TEST(Training, ResultKeepsOnlyPersonalInstances) {
  const auto& p = prepared();
  const auto bank = initial_bank(p.enc.dim(), p.cfg, 3);
  const auto model = test_time_personalize(p.personal, bank, p.meta, p.distractors, p.enc, p.cfg, 3);
  ASSERT_EQ(model.instances.size(), p.personal.size());
  for (const auto& ex : p.personal) EXPECT_TRUE(model.instances.contains(ex.id));
  EXPECT_EQ(model.encoder_hash, p.enc.hash());
  EXPECT_EQ(model.config.at("q"), 32);
}

TEST(Training, FixedSeedRunsAreBitReproducible) {
  const auto& p = prepared();
  auto run = [&](std::uint64_t seed) {
    auto bank = meta_personalize(p.meta, initial_bank(p.enc.dim(), p.cfg, seed), p.enc, p.cfg, seed);
    return test_time_personalize(p.personal, bank, p.meta, p.distractors, p.enc, p.cfg, seed).serialize();
  };
  const auto a = run(4);
  EXPECT_EQ(a, run(4));
  EXPECT_NE(a, run(5));
}

TEST(Training, KShotsSubsamplesTrainingShots) {
  const auto& p = prepared();
  auto cfg = p.cfg;
  const auto bank = initial_bank(p.enc.dim(), cfg, 6);
  const auto all = test_time_personalize(p.personal, bank, {}, p.distractors, p.enc, cfg, 6).serialize();
  cfg.k_shots = 1;
  const auto one = test_time_personalize(p.personal, bank, {}, p.distractors, p.enc, cfg, 6);
  EXPECT_NE(one.serialize(), all);
  EXPECT_EQ(one.instances.size(), p.personal.size());
}

TEST(Training, MetaPersonalizationLowersHeldOutLoss) {
  // A short personalization of held-out instances ends at a lower loss when
  // it starts from a bank meta-learned on the other instances.
  const auto& p = prepared();
  auto cfg = p.cfg;
  cfg.rounds = 4;
  std::vector<InstanceExamples> train, held;
  for (std::size_t i = 0; i < p.meta.size(); ++i) (i % 4 == 0 ? held : train).push_back(p.meta[i]);
  const auto init = initial_bank(p.enc.dim(), cfg, 7);
  const auto meta = meta_personalize(train, init, p.enc, cfg, 7);
  auto held_loss = [&](const CategoryFeatureBank& bank) {
    auto c = cfg;
    c.test_epochs = 3;
    c.distractors = 0;
    const auto model = test_time_personalize(held, bank, {}, {}, p.enc, c, 8);
    std::vector<PromptTemplate> templates{PromptTemplate::parse(kGenericPrompt, p.enc.table())};
    Batch batch;
    for (const auto& ex : held)
      for (const auto& s : ex.shots) batch.items.push_back({ex.id, &s, 0});
    const auto anchors = anchor_embeddings(cfg.categories, p.enc);
    return total_loss(batch, model, p.enc, templates, anchors, c.loss()).total;
  };
  auto fresh = init;
  for (const auto& c : cfg.categories) fresh.ensure(c);
  EXPECT_LT(held_loss(meta), held_loss(fresh));
}

TEST(Training, CategoryWeightPullsQueriesTowardAnchors) {
  const auto& p = prepared();
  double prev = -2.0;
  for (double lc : {0.0, 0.5, 2.0, 8.0}) {
    auto cfg = p.cfg;
    cfg.lambda_c = lc;
    const auto bank = initial_bank(p.enc.dim(), cfg, 9);
    const auto model = test_time_personalize(p.personal, bank, {}, p.distractors, p.enc, cfg, 9);
    const double c = mean_anchor_cosine(model, p.enc);
    EXPECT_GE(c, prev - 1e-3) << "lambda_c=" << lc;
    prev = c;
  }
}

TEST(Training, EmptyInstancesAreRejected) {
  const auto& p = prepared();
  std::vector<InstanceExamples> bad{{"x", p.cfg.categories[0], {}}};
  const auto bank = initial_bank(p.enc.dim(), p.cfg, 1);
  try {
    test_time_personalize(bad, bank, {}, p.distractors, p.enc, p.cfg, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyInstance);
  }
}
