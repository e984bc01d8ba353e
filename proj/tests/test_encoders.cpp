#include <gtest/gtest.h>

#include "metaper/encoders.hpp"

using namespace metaper;

namespace {

const std::vector<std::string> kWords{"an", "image", "of", "a", "dog", "cat", "my", "near", "the", "sofa"};

TokenTable small_table(std::uint64_t projection_seed = 0, std::size_t d = 6) {
  return TokenTable::random(kWords, d, 16, 21, 0.5, 0.1, projection_seed);
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIo;
}

// φ by direct transcription: normalize(P · (1/m) Σ_i (v_i + pos_i)).
Vector oracle_encode(const TokenTable& t, const Matrix& p, const std::vector<Vector>& seq) {
  const std::size_t d = t.dim();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < seq.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += (seq[i][k] + t.position(i)[k]) / static_cast<double>(seq.size());
  Vector g(d, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) g[r] += p(r, c) * mean[c];
  double n = 0.0;
  for (double x : g) n += x * x;
  for (double& x : g) x /= std::sqrt(n);
  return g;
}

}  // namespace

TEST(Words, SplitLowercasesAndStripsPunctuation) {
  EXPECT_EQ(split_words("This is MY Dog!"), (std::vector<std::string>{"this", "is", "my", "dog"}));
  EXPECT_EQ(split_words("an image of *", true), (std::vector<std::string>{"an", "image", "of", "*"}));
}

TEST(TokenTableTest, ReservedTokensComeFirst) {
  const auto t = small_table();
  EXPECT_EQ(t.word(kOovId), kOovToken);
  EXPECT_EQ(t.word(kPlaceholderId), kPlaceholderToken);
  EXPECT_EQ(t.word(kBosId), kBosToken);
  EXPECT_EQ(t.id("zebra"), kOovId);
  EXPECT_EQ(tokenize("a zebra", t), (std::vector<std::uint32_t>{t.id("a"), kOovId}));
}

TEST(TokenTableTest, SerializationRoundTripIsByteIdentical) {
  const auto t = small_table(77);
  const auto bytes = t.serialize();
  const auto back = TokenTable::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.projection_seed(), 77u);
  EXPECT_EQ(back.row(back.id("dog")), t.row(t.id("dog")));
}

TEST(TokenTableTest, CorruptionIsDetected) {
  auto bytes = small_table().serialize();
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x5a;
  EXPECT_EQ(code_of([&] { TokenTable::deserialize(flipped); }), ErrorCode::kCrcMismatch);
  EXPECT_EQ(code_of([&] { TokenTable::deserialize(bytes.substr(0, bytes.size() - 9)); }), ErrorCode::kCrcMismatch);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { TokenTable::deserialize(magic); }), ErrorCode::kBadMagic);
  EXPECT_EQ(code_of([&] { TokenTable::deserialize("MPTT"); }), ErrorCode::kTruncated);
}

TEST(TokenTableTest, RowsAreHeldAtF32) {
  TokenTable t(3, 4, 0);
  t.add_word("x", Vector{0.1, 0.2, 0.3});
  EXPECT_EQ(t.row(t.id("x"))[0], static_cast<double>(0.1f));
  EXPECT_THROW(t.add_word("x", Vector{1, 2, 3}), Error);
  EXPECT_EQ(code_of([&] { t.add_word("y", Vector{1, 2}); }), ErrorCode::kDimMismatch);
}

TEST(Encoder, MatchesTranscriptionWithIdentityProjection) {
  const ReferenceTextEncoder enc(small_table(0));
  const auto ids = std::vector<std::uint32_t>{kBosId, enc.table().id("my"), enc.table().id("dog")};
  const auto seq = enc.embed_ids(ids);
  const auto want = oracle_encode(enc.table(), Matrix::identity(6), seq);
  const auto got = enc.encode(seq);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(got[k], want[k], 1e-14);
  EXPECT_NEAR(norm(got), 1.0, 1e-14);
}

TEST(Encoder, MatchesTranscriptionWithRandomProjection) {
  const ReferenceTextEncoder enc(small_table(5));
  bool identity = true;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) identity = identity && enc.projection()(r, c) == (r == c ? 1.0 : 0.0);
  EXPECT_FALSE(identity);
  const auto seq = enc.embed_ids(tokenize("an image of a cat", enc.table()));
  const auto want = oracle_encode(enc.table(), enc.projection(), seq);
  const auto got = enc.encode(seq);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(got[k], want[k], 1e-13);
}

TEST(Encoder, PhraseEncodingPrependsBos) {
  const ReferenceTextEncoder enc(small_table());
  const auto ids = std::vector<std::uint32_t>{kBosId, enc.table().id("a"), enc.table().id("dog")};
  EXPECT_EQ(enc.encode_phrase("a dog"), enc.encode_ids(ids));
  EXPECT_EQ(enc.encode_words({"a", "dog"}), enc.encode_ids(ids));
}

TEST(Encoder, SlotGradientMatchesFiniteDifferences) {
  const ReferenceTextEncoder enc(small_table(9));
  RngStream rng(4);
  auto seq = enc.embed_ids(tokenize("an image of a dog", enc.table()));
  const Vector upstream = rng.normal_vector(6, 1.0);
  const auto grads = enc.encode_grad(seq, upstream);
  for (std::size_t slot = 0; slot < seq.size(); ++slot) {
    auto f = [&](std::span<const double> x) {
      auto s = seq;
      s[slot].assign(x.begin(), x.end());
      return dot(enc.encode(s), upstream);
    };
    EXPECT_LT(finite_diff_check(f, seq[slot], grads[slot]), 1e-6) << "slot " << slot;
  }
}

TEST(Encoder, RejectsEmptyAndOverlongSequences) {
  const ReferenceTextEncoder enc(small_table());
  EXPECT_THROW(enc.encode(std::vector<Vector>{}), Error);
  const std::vector<Vector> long_seq(17, Vector(6, 0.1));
  EXPECT_EQ(code_of([&] { enc.encode(long_seq); }), ErrorCode::kSequenceTooLong);
}

TEST(Encoder, HashTracksTable) {
  const ReferenceTextEncoder a(small_table(0)), b(small_table(0)), c(small_table(1));
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
}

TEST(Templates, ParseRequiresExactlyOnePlaceholder) {
  const auto t = small_table();
  const auto p = PromptTemplate::parse("an image of *", t);
  EXPECT_EQ(p.length(), 5u);
  EXPECT_EQ(p.placeholder_index(), 4u);
  EXPECT_EQ(p.ids()[0], kBosId);
  EXPECT_EQ(code_of([&] { PromptTemplate::parse("an image", t); }), ErrorCode::kInvalidTemplate);
  EXPECT_EQ(code_of([&] { PromptTemplate::parse("* and *", t); }), ErrorCode::kInvalidTemplate);
  for (const auto& s : default_templates()) EXPECT_NO_THROW(PromptTemplate::parse(s, t));
}

TEST(Templates, SplicedTokensTakeThePlaceholderPositions) {
  const auto t = small_table();
  const auto p = PromptTemplate::parse("* near the sofa", t);
  const std::vector<Vector> w{Vector(6, 1.0), Vector(6, 2.0)};
  const auto seq = build_personalized_query(p, w, t);
  ASSERT_EQ(seq.size(), 6u);
  EXPECT_EQ(seq[0], t.row(kBosId));
  EXPECT_EQ(seq[1], w[0]);
  EXPECT_EQ(seq[2], w[1]);
  EXPECT_EQ(seq[3], t.row(t.id("near")));
  EXPECT_EQ(seq[5], t.row(t.id("sofa")));
}

TEST(Store, RoundTripAndLookup) {
  EmbeddingStore s;
  s.add("v/s0/f0", Vector{1, 0, 0});
  s.add("v/s0/f1", Vector{0, 1, 0});
  const auto bytes = s.serialize();
  const auto back = EmbeddingStore::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.count(), 2u);
  EXPECT_EQ(back.dim(), 3u);
  EXPECT_EQ(back.get("v/s0/f1"), (Vector{0, 1, 0}));
  EXPECT_EQ(code_of([&] { back.get("nope"); }), ErrorCode::kMissingFrame);
}

TEST(Store, RejectsBadRecords) {
  EmbeddingStore s(3);
  EXPECT_EQ(code_of([&] { s.add("a", Vector{1, 2}); }), ErrorCode::kDimMismatch);
  EXPECT_THROW(s.add("a", Vector{1, NAN, 0}), Error);
  s.add("a", Vector{1, 2, 3});
  EXPECT_THROW(s.add("a", Vector{1, 2, 3}), Error);
}

TEST(Store, EmptyStoreRoundTrips) {
  const EmbeddingStore s(8);
  const auto back = EmbeddingStore::deserialize(s.serialize());
  EXPECT_EQ(back.count(), 0u);
  EXPECT_EQ(back.dim(), 8u);
}

TEST(Store, CorruptionIsDetected) {
  EmbeddingStore s;
  s.add("f", Vector{0.25, 0.5});
  auto bytes = s.serialize();
  bytes[10] ^= 1;
  EXPECT_EQ(code_of([&] { EmbeddingStore::deserialize(bytes); }), ErrorCode::kCrcMismatch);
}

TEST(Shots, EmbeddingIsNormalizedMeanAndOrderFree) {
  EmbeddingStore s;
  RngStream rng(2);
  std::vector<std::string> ids;
  for (int i = 0; i < 5; ++i) {
    ids.push_back("f" + std::to_string(i));
    s.add(ids.back(), rng.normal_vector(4, 1.0));
  }
  const auto e = shot_embedding(ids, s);
  Vector mean(4, 0.0);
  for (const auto& id : ids) axpy(0.2, s.get(id), mean);
  const auto want = l2_normalize(mean);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(e[k], want[k], 1e-14);
  auto shuffled = ids;
  rng.shuffle(shuffled);
  std::reverse(shuffled.begin(), shuffled.end());
  EXPECT_EQ(shot_embedding(shuffled, s), e);
  EXPECT_EQ(code_of([&] { shot_embedding(std::vector<std::string>{}, s); }), ErrorCode::kEmptyShot);
}
