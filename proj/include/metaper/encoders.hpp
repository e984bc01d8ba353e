#pragma once

// The frozen-encoder contract: a token table, a differentiable reference
// text encoder, the precomputed visual embedding store and the prompt
// splicing that injects instance tokens into a query.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/numerics.hpp"

namespace metaper {

inline constexpr std::uint32_t kOovId = 0;
inline constexpr std::uint32_t kPlaceholderId = 1;
inline constexpr std::uint32_t kBosId = 2;
inline constexpr std::string_view kOovToken = "<oov>";
inline constexpr std::string_view kPlaceholderToken = "<*>";
inline constexpr std::string_view kBosToken = "<bos>";

inline constexpr std::uint32_t kTokenTableVersion = 1;
inline constexpr std::uint32_t kStoreVersion = 1;

/// Lowercases and strips punctuation; whitespace separates words.
/// A bare "*" survives only when keep_placeholder is set.
inline std::vector<std::string> split_words(std::string_view text, bool keep_placeholder = false) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (ch == '*' && keep_placeholder) {
      flush();
      words.emplace_back("*");
    }
  }
  flush();
  return words;
}

inline std::string join_words(const std::vector<std::string>& words, std::size_t begin = 0,
                              std::size_t end = SIZE_MAX) {
  std::string out;
  end = std::min(end, words.size());
  for (std::size_t i = begin; i < end; ++i) {
    if (!out.empty()) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Vocabulary plus frozen token and positional embeddings. Rows are kept at
/// binary32 precision so that a serialized table reloads bit-identically.
class TokenTable {
 public:
  TokenTable() = default;

  TokenTable(std::size_t dim, std::size_t max_len, std::uint64_t projection_seed)
      : dim_(dim), positional_(max_len, dim), projection_seed_(projection_seed) {
    if (dim == 0 || max_len == 0) throw Error(ErrorCode::kInvalidArgument, "empty token table");
    for (auto tok : {kOovToken, kPlaceholderToken, kBosToken}) add_word(std::string(tok), Vector(dim, 0.0));
  }

  /// Seeded table: every listed word gets a N(0, token_std²) row, positions
  /// get N(0, pos_std²) rows and the reserved tokens random rows as well.
  static TokenTable random(const std::vector<std::string>& words, std::size_t dim,
                           std::size_t max_len, std::uint64_t seed, double token_std,
                           double pos_std, std::uint64_t projection_seed) {
    TokenTable t(dim, max_len, projection_seed);
    RngStream rng = RngStream::derive(seed, "token-table");
    t.set_row(kOovId, rng.normal_vector(dim, token_std));
    t.set_row(kBosId, rng.normal_vector(dim, token_std));
    for (const auto& w : words) {
      if (!t.contains(w)) t.add_word(w, rng.normal_vector(dim, token_std));
    }
    for (std::size_t p = 0; p < max_len; ++p) t.set_position(p, rng.normal_vector(dim, pos_std));
    return t;
  }

  std::uint32_t add_word(const std::string& word, std::span<const double> row) {
    if (row.size() != dim_) throw Error(ErrorCode::kDimMismatch, "token row for '" + word + "'");
    if (index_.contains(word)) throw Error(ErrorCode::kInvalidArgument, "duplicate token '" + word + "'");
    const auto id = static_cast<std::uint32_t>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    rows_.emplace_back(row.begin(), row.end());
    round_to_f32(rows_.back());
    return id;
  }

  void set_row(std::uint32_t id, std::span<const double> row) {
    if (id >= rows_.size() || row.size() != dim_) throw Error(ErrorCode::kShapeMismatch, "set_row");
    rows_[id].assign(row.begin(), row.end());
    round_to_f32(rows_[id]);
  }

  void set_position(std::size_t pos, std::span<const double> row) {
    if (pos >= positional_.rows() || row.size() != dim_) throw Error(ErrorCode::kShapeMismatch, "set_position");
    std::copy(row.begin(), row.end(), positional_.row(pos).begin());
    round_to_f32(positional_.row(pos));
  }

  bool contains(const std::string& word) const { return index_.contains(word); }

  std::uint32_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kOovId : it->second;
  }

  const std::string& word(std::uint32_t id) const { return words_.at(id); }
  const Vector& row(std::uint32_t id) const {
    if (id >= rows_.size()) throw Error(ErrorCode::kInvalidArgument, "token id out of range");
    return rows_[id];
  }
  std::span<const double> position(std::size_t pos) const { return positional_.row(pos); }

  std::size_t vocab_size() const noexcept { return words_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t max_len() const noexcept { return positional_.rows(); }
  std::uint64_t projection_seed() const noexcept { return projection_seed_; }

  /// "MPTT", version, V, d, m_max, projection seed, vocabulary block,
  /// token rows and positional rows as f32 LE row-major, trailing CRC32.
  std::string serialize() const {
    ByteWriter w;
    w.raw("MPTT");
    w.u32(kTokenTableVersion);
    w.u32(static_cast<std::uint32_t>(words_.size()));
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u32(static_cast<std::uint32_t>(max_len()));
    w.u64(projection_seed_);
    for (const auto& s : words_) w.short_string(s);
    for (const auto& r : rows_) w.f32_values(r);
    w.f32_values(positional_.values());
    w.seal();
    return w.bytes();
  }

  static TokenTable deserialize(std::string_view bytes) {
    ByteReader r(check_framing(bytes, "MPTT", "token table"));
    r.raw(4);
    const auto version = r.u32();
    if (version != kTokenTableVersion) {
      throw Error(ErrorCode::kSchema, "token table version " + std::to_string(version));
    }
    const auto vocab = r.u32();
    const auto dim = r.u32();
    const auto max_len = r.u32();
    const auto pseed = r.u64();
    if (dim == 0 || max_len == 0 || vocab < 3) throw Error(ErrorCode::kSchema, "token table header");
    TokenTable t;
    t.dim_ = dim;
    t.projection_seed_ = pseed;
    t.positional_ = Matrix(max_len, dim);
    for (std::uint32_t i = 0; i < vocab; ++i) {
      auto s = r.short_string();
      if (t.index_.contains(s)) throw Error(ErrorCode::kSchema, "duplicate token '" + s + "'");
      t.index_.emplace(s, i);
      t.words_.push_back(std::move(s));
    }
    if (t.words_[kOovId] != kOovToken || t.words_[kPlaceholderId] != kPlaceholderToken ||
        t.words_[kBosId] != kBosToken) {
      throw Error(ErrorCode::kSchema, "token table lacks reserved tokens");
    }
    t.rows_.assign(vocab, Vector(dim));
    for (auto& row : t.rows_) r.f32_values(row);
    r.f32_values(t.positional_.values());
    if (r.remaining() != 0) throw Error(ErrorCode::kSchema, "trailing bytes in token table");
    return t;
  }

  std::uint64_t hash() const { return fnv1a64(serialize()); }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::uint32_t> index_;
  std::vector<Vector> rows_;
  Matrix positional_;
  std::uint64_t projection_seed_ = 0;
};

inline std::vector<std::uint32_t> tokenize(std::string_view text, const TokenTable& table) {
  std::vector<std::uint32_t> ids;
  for (const auto& w : split_words(text)) ids.push_back(table.id(w));
  return ids;
}

// ---------------------------------------------------------------------------

/// Forward values kept for the backward pass.
struct EncodeCache {
  Vector phi;
  double pre_norm = 0.0;  // ‖P·mean‖
  std::size_t length = 0;
};

/// φ = normalize(P · mean_i(v_i + pos_i)). P is the identity when the
/// table's projection seed is 0, otherwise N(0, 1/d) entries drawn from it.
class ReferenceTextEncoder {
 public:
  explicit ReferenceTextEncoder(TokenTable table) : table_(std::move(table)) {
    const std::size_t d = table_.dim();
    if (table_.projection_seed() == 0) {
      projection_ = Matrix::identity(d);
    } else {
      projection_ = Matrix(d, d);
      RngStream rng(table_.projection_seed());
      const double sd = 1.0 / std::sqrt(static_cast<double>(d));
      for (double& x : projection_.values()) x = rng.normal(0.0, sd);
    }
    hash_ = table_.hash();
  }

  const TokenTable& table() const noexcept { return table_; }
  const Matrix& projection() const noexcept { return projection_; }
  std::size_t dim() const noexcept { return table_.dim(); }
  std::uint64_t hash() const noexcept { return hash_; }

  EncodeCache encode_cached(std::span<const Vector> seq) const {
    check_length(seq.size());
    const std::size_t d = dim();
    Vector mean(d, 0.0);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i].size() != d) throw Error(ErrorCode::kShapeMismatch, "token embedding dim");
      const auto pos = table_.position(i);
      for (std::size_t k = 0; k < d; ++k) mean[k] += seq[i][k] + pos[k];
    }
    const double inv = 1.0 / static_cast<double>(seq.size());
    for (double& x : mean) x *= inv;
    const Vector g = matvec(projection_, mean);
    EncodeCache cache;
    cache.pre_norm = norm(g);
    cache.phi = l2_normalize(g);
    cache.length = seq.size();
    return cache;
  }

  Vector encode(std::span<const Vector> seq) const { return encode_cached(seq).phi; }

  /// ∂(upstreamᵀφ)/∂v_i, identical for every slot i of a mean-pooled input:
  /// (1/m)·Pᵀ(I − φφᵀ)·upstream / ‖P·mean‖.
  Vector slot_gradient(const EncodeCache& cache, std::span<const double> upstream) const {
    const double along = dot(cache.phi, upstream);
    Vector tangent(upstream.begin(), upstream.end());
    axpy(-along, cache.phi, tangent);
    const double scale = 1.0 / (static_cast<double>(cache.length) * cache.pre_norm);
    for (double& x : tangent) x *= scale;
    return matvec_transposed(projection_, tangent);
  }

  std::vector<Vector> encode_grad(std::span<const Vector> seq,
                                  std::span<const double> upstream) const {
    const auto cache = encode_cached(seq);
    return std::vector<Vector>(seq.size(), slot_gradient(cache, upstream));
  }

  std::vector<Vector> embed_ids(std::span<const std::uint32_t> ids) const {
    std::vector<Vector> seq;
    seq.reserve(ids.size());
    for (auto id : ids) seq.push_back(table_.row(id));
    return seq;
  }

  Vector encode_ids(std::span<const std::uint32_t> ids) const { return encode(embed_ids(ids)); }

  /// Encodes free text with the leading <bos> token.
  Vector encode_phrase(std::string_view text) const {
    std::vector<std::uint32_t> ids{kBosId};
    for (auto id : tokenize(text, table_)) ids.push_back(id);
    return encode_ids(ids);
  }

  Vector encode_words(const std::vector<std::string>& words) const {
    std::vector<std::uint32_t> ids{kBosId};
    for (const auto& w : words) ids.push_back(table_.id(w));
    return encode_ids(ids);
  }

 private:
  void check_length(std::size_t m) const {
    if (m == 0) throw Error(ErrorCode::kInvalidArgument, "empty token sequence");
    if (m > table_.max_len()) {
      throw Error(ErrorCode::kSequenceTooLong, std::to_string(m) + " tokens exceed max length " +
                                                   std::to_string(table_.max_len()));
    }
  }

  TokenTable table_;
  Matrix projection_;
  std::uint64_t hash_ = 0;
};

// ---------------------------------------------------------------------------

inline std::string category_prompt(std::string_view category) {
  return "an image of a " + std::string(category);
}

inline const std::vector<std::string>& default_templates() {
  static const std::vector<std::string> kTemplates{
      "an image of *", "* can be seen in this photo", "there is * in this image"};
  return kTemplates;
}

inline constexpr std::string_view kGenericPrompt = "an image of *";

/// Token ids of a prompt, led by <bos>, with exactly one placeholder.
class PromptTemplate {
 public:
  static PromptTemplate parse(std::string_view text, const TokenTable& table) {
    PromptTemplate t;
    t.text_ = std::string(text);
    t.ids_.push_back(kBosId);
    std::size_t holes = 0;
    for (const auto& w : split_words(text, /*keep_placeholder=*/true)) {
      if (w == "*") {
        ++holes;
        t.placeholder_ = t.ids_.size();
        t.ids_.push_back(kPlaceholderId);
      } else {
        t.ids_.push_back(table.id(w));
      }
    }
    if (holes != 1) {
      throw Error(ErrorCode::kInvalidTemplate,
                  "'" + t.text_ + "' must contain exactly one '*', found " + std::to_string(holes));
    }
    return t;
  }

  const std::vector<std::uint32_t>& ids() const noexcept { return ids_; }
  std::size_t placeholder_index() const noexcept { return placeholder_; }
  const std::string& text() const noexcept { return text_; }
  std::size_t length() const noexcept { return ids_.size(); }

 private:
  std::vector<std::uint32_t> ids_;
  std::size_t placeholder_ = 0;
  std::string text_;
};

/// Splices the instance tokens into the placeholder slot. Positions are
/// assigned to the spliced sequence, so instance tokens get real positions.
inline std::vector<Vector> build_personalized_query(const PromptTemplate& tmpl,
                                                    std::span<const Vector> instance_tokens,
                                                    const TokenTable& table) {
  if (instance_tokens.empty()) throw Error(ErrorCode::kInvalidArgument, "no instance tokens");
  const std::size_t len = tmpl.length() - 1 + instance_tokens.size();
  if (len > table.max_len()) {
    throw Error(ErrorCode::kSequenceTooLong, "personalized query of " + std::to_string(len) + " tokens");
  }
  std::vector<Vector> seq;
  seq.reserve(len);
  for (std::size_t i = 0; i < tmpl.length(); ++i) {
    if (i == tmpl.placeholder_index()) {
      for (const auto& w : instance_tokens) {
        if (w.size() != table.dim()) throw Error(ErrorCode::kShapeMismatch, "instance token dim");
        seq.push_back(w);
      }
    } else {
      seq.push_back(table.row(tmpl.ids()[i]));
    }
  }
  return seq;
}

// ---------------------------------------------------------------------------

/// id → embedding, insertion ordered. Values are held at binary32 precision.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::size_t dim) : dim_(dim) {}

  void add(const std::string& id, std::span<const double> v) {
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_) {
      throw Error(ErrorCode::kDimMismatch, "'" + id + "' has dim " + std::to_string(v.size()) +
                                               ", store dim " + std::to_string(dim_));
    }
    if (!all_finite(v)) throw Error(ErrorCode::kInvalidArgument, "non-finite embedding '" + id + "'");
    if (index_.contains(id)) throw Error(ErrorCode::kInvalidArgument, "duplicate id '" + id + "'");
    index_.emplace(id, ids_.size());
    ids_.push_back(id);
    vectors_.emplace_back(v.begin(), v.end());
    round_to_f32(vectors_.back());
  }

  bool contains(const std::string& id) const { return index_.contains(id); }

  const Vector& get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::kMissingFrame, "frame '" + id + "' not in store");
    return vectors_[it->second];
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

  /// "MPES", version u32, dim u32, count u64, records (u16 id length, id
  /// bytes, dim × f32), trailing CRC32 of all preceding bytes.
  std::string serialize() const {
    ByteWriter w;
    w.raw("MPES");
    w.u32(kStoreVersion);
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u64(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      w.short_string(ids_[i]);
      w.f32_values(vectors_[i]);
    }
    w.seal();
    return w.bytes();
  }

  static EmbeddingStore deserialize(std::string_view bytes) {
    ByteReader r(check_framing(bytes, "MPES", "embedding store"));
    r.raw(4);
    const auto version = r.u32();
    if (version != kStoreVersion) throw Error(ErrorCode::kSchema, "store version " + std::to_string(version));
    EmbeddingStore s(r.u32());
    const auto count = r.u64();
    Vector buf(s.dim_);
    for (std::uint64_t i = 0; i < count; ++i) {
      auto id = r.short_string();
      r.f32_values(buf);
      s.add(id, buf);
    }
    if (r.remaining() != 0) throw Error(ErrorCode::kSchema, "trailing bytes in store");
    return s;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<Vector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Normalized mean of the frame embeddings. Frames are summed in sorted id
/// order, so the result does not depend on the order they are listed in.
inline Vector shot_embedding(std::span<const std::string> frame_ids, const EmbeddingStore& store) {
  if (frame_ids.empty()) throw Error(ErrorCode::kEmptyShot, "shot has no frames");
  std::vector<std::string> sorted(frame_ids.begin(), frame_ids.end());
  std::sort(sorted.begin(), sorted.end());
  Vector mean(store.dim(), 0.0);
  for (const auto& id : sorted) axpy(1.0, store.get(id), mean);
  for (double& x : mean) x /= static_cast<double>(sorted.size());
  return l2_normalize(mean);
}

}  // namespace metaper
