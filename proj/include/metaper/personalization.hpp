#pragma once

// Instance tokens as combinations of shared category features (w = C·z),
// the contrastive and anchoring losses with their analytic gradients, and
// the meta / test-time personalization loops built on them.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "metaper/encoders.hpp"
#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/logging.hpp"
#include "metaper/mining.hpp"
#include "metaper/numerics.hpp"

namespace metaper {

inline const std::vector<std::string>& coco_categories() {
  static const std::vector<std::string> kCoco{
      "person",        "bicycle",      "car",           "motorcycle",    "airplane",
      "bus",           "train",        "truck",         "boat",          "traffic light",
      "fire hydrant",  "stop sign",    "parking meter", "bench",         "bird",
      "cat",           "dog",          "horse",         "sheep",         "cow",
      "elephant",      "bear",         "zebra",         "giraffe",       "backpack",
      "umbrella",      "handbag",      "tie",           "suitcase",      "frisbee",
      "skis",          "snowboard",    "sports ball",   "kite",          "baseball bat",
      "baseball glove", "skateboard",  "surfboard",     "tennis racket", "bottle",
      "wine glass",    "cup",          "fork",          "knife",         "spoon",
      "bowl",          "banana",       "apple",         "sandwich",      "orange",
      "broccoli",      "carrot",       "hot dog",       "pizza",         "donut",
      "cake",          "chair",        "couch",         "potted plant",  "bed",
      "dining table",  "toilet",       "tv",            "laptop",        "mouse",
      "remote",        "keyboard",     "cell phone",    "microwave",     "oven",
      "toaster",       "sink",         "refrigerator",  "book",          "clock",
      "vase",          "scissors",     "teddy bear",    "hair drier",    "toothbrush"};
  return kCoco;
}

// ---------------------------------------------------------------------------
// Parameters

enum class BankMode : std::uint32_t {
  kPerCategory = 0,
  kShared = 1,    // one matrix for all categories
  kIdentity = 2,  // frozen identity, tokens are learned directly (q = d)
};

inline constexpr std::string_view kSharedKey = "*";

/// C_l matrices (d×q) keyed by category. Matrices are created on first use
/// from a stream derived from (init_seed, category), so creation order does
/// not affect their values.
class CategoryFeatureBank {
 public:
  CategoryFeatureBank() = default;
  CategoryFeatureBank(std::size_t d, std::size_t q, std::vector<std::string> categories,
                      BankMode mode, std::uint64_t init_seed, double init_std)
      : d_(d), q_(mode == BankMode::kIdentity ? d : q), categories_(std::move(categories)),
        mode_(mode), init_seed_(init_seed), init_std_(init_std) {
    if (d_ == 0 || q_ == 0) throw Error(ErrorCode::kInvalidArgument, "bank dims must be positive");
    if (mode_ == BankMode::kIdentity) matrices_.emplace(std::string(kSharedKey), Matrix::identity(d_));
  }

  std::size_t d() const noexcept { return d_; }
  std::size_t q() const noexcept { return q_; }
  BankMode mode() const noexcept { return mode_; }
  bool trainable() const noexcept { return mode_ != BankMode::kIdentity; }
  const std::vector<std::string>& categories() const noexcept { return categories_; }
  std::uint64_t init_seed() const noexcept { return init_seed_; }
  double init_std() const noexcept { return init_std_; }

  std::string key(const std::string& category) const {
    return mode_ == BankMode::kPerCategory ? category : std::string(kSharedKey);
  }

  bool has(const std::string& category) const { return matrices_.contains(key(category)); }

  Matrix& ensure(const std::string& category) {
    const auto k = key(category);
    auto it = matrices_.find(k);
    if (it == matrices_.end()) {
      Matrix m(d_, q_);
      RngStream rng = RngStream::derive(init_seed_, "bank/" + k);
      for (double& x : m.values()) x = rng.normal(0.0, init_std_);
      it = matrices_.emplace(k, std::move(m)).first;
    }
    return it->second;
  }

  const Matrix& matrix(const std::string& category) const {
    auto it = matrices_.find(key(category));
    if (it == matrices_.end()) {
      throw Error(ErrorCode::kInvalidArgument, "no feature matrix for category '" + category + "'");
    }
    return it->second;
  }

  std::map<std::string, Matrix>& matrices() noexcept { return matrices_; }
  const std::map<std::string, Matrix>& matrices() const noexcept { return matrices_; }
  void set_matrix(const std::string& key, Matrix m) { matrices_[key] = std::move(m); }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("bank");
    for (const auto& [k, m] : matrices_) {
      h = fnv1a64(k, h);
      const auto v = m.values();
      h = fnv1a64({reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)}, h);
    }
    return h;
  }

 private:
  std::size_t d_ = 0;
  std::size_t q_ = 0;
  std::vector<std::string> categories_;
  BankMode mode_ = BankMode::kPerCategory;
  std::uint64_t init_seed_ = 0;
  double init_std_ = 0.1;
  std::map<std::string, Matrix> matrices_;
};

struct InstanceParams {
  std::string category;
  std::vector<Vector> z;  // n_w weight vectors of length q
};

/// w_i = C_l · z_i for every instance weight vector.
inline std::vector<Vector> instance_tokens(const Matrix& features, std::span<const Vector> z) {
  std::vector<Vector> w;
  w.reserve(z.size());
  for (const auto& zi : z) w.push_back(matvec(features, zi));
  return w;
}

inline constexpr std::uint32_t kModelVersion = 1;

struct PersonalizedModel {
  CategoryFeatureBank bank;
  std::map<std::string, InstanceParams> instances;
  std::uint64_t encoder_hash = 0;
  json config = json::object();

  const InstanceParams& instance(const std::string& id) const {
    auto it = instances.find(id);
    if (it == instances.end()) throw Error(ErrorCode::kUnknownInstance, "instance '" + id + "'");
    return it->second;
  }

  std::vector<Vector> tokens(const std::string& id) const {
    const auto& inst = instance(id);
    return instance_tokens(bank.matrix(inst.category), inst.z);
  }

  Vector query_embedding(const PromptTemplate& tmpl, const std::string& id,
                         const ReferenceTextEncoder& enc) const {
    return enc.encode(build_personalized_query(tmpl, tokens(id), enc.table()));
  }

  /// "MPMD", version, encoder hash, dims and bank mode, category list,
  /// feature matrices (f32 LE), instances (id, category, n_w, z as f32),
  /// config snapshot JSON, trailing CRC32.
  std::string serialize() const {
    ByteWriter w;
    w.raw("MPMD");
    w.u32(kModelVersion);
    w.u64(encoder_hash);
    w.u32(static_cast<std::uint32_t>(bank.d()));
    w.u32(static_cast<std::uint32_t>(bank.q()));
    w.u32(static_cast<std::uint32_t>(bank.mode()));
    w.u64(bank.init_seed());
    w.put(bank.init_std());
    w.u32(static_cast<std::uint32_t>(bank.categories().size()));
    for (const auto& c : bank.categories()) w.short_string(c);
    w.u32(static_cast<std::uint32_t>(bank.matrices().size()));
    for (const auto& [k, m] : bank.matrices()) {
      w.short_string(k);
      w.f32_values(m.values());
    }
    w.u32(static_cast<std::uint32_t>(instances.size()));
    for (const auto& [id, inst] : instances) {
      w.short_string(id);
      w.short_string(inst.category);
      w.u32(static_cast<std::uint32_t>(inst.z.size()));
      for (const auto& z : inst.z) w.f32_values(z);
    }
    w.long_string(config.dump());
    w.seal();
    return w.bytes();
  }

  static PersonalizedModel deserialize(std::string_view bytes) {
    ByteReader r(check_framing(bytes, "MPMD", "model"));
    r.raw(4);
    if (const auto v = r.u32(); v != kModelVersion) throw Error(ErrorCode::kSchema, "model version " + std::to_string(v));
    PersonalizedModel m;
    m.encoder_hash = r.u64();
    const std::size_t d = r.u32();
    const std::size_t q = r.u32();
    const auto mode = static_cast<BankMode>(r.u32());
    const auto seed = r.u64();
    const auto std_dev = r.get<double>();
    std::vector<std::string> cats(r.u32());
    for (auto& c : cats) c = r.short_string();
    m.bank = CategoryFeatureBank(d, q, std::move(cats), mode, seed, std_dev);
    const auto n_mat = r.u32();
    for (std::uint32_t i = 0; i < n_mat; ++i) {
      auto key = r.short_string();
      Matrix mat(d, m.bank.q());
      r.f32_values(mat.values());
      m.bank.set_matrix(key, std::move(mat));
    }
    const auto n_inst = r.u32();
    for (std::uint32_t i = 0; i < n_inst; ++i) {
      auto id = r.short_string();
      InstanceParams p;
      p.category = r.short_string();
      p.z.assign(r.u32(), Vector(m.bank.q()));
      for (auto& z : p.z) r.f32_values(z);
      m.instances.emplace(std::move(id), std::move(p));
    }
    try {
      m.config = json::parse(r.long_string());
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kSchema, std::string("model config: ") + e.what());
    }
    if (r.remaining() != 0) throw Error(ErrorCode::kSchema, "trailing bytes in model");
    return m;
  }

  /// Rounds every parameter to binary32 so the in-memory model equals what a
  /// save and reload produces.
  void quantize() {
    for (auto& [k, mat] : bank.matrices()) round_to_f32(mat.values());
    for (auto& [id, inst] : instances) {
      for (auto& z : inst.z) round_to_f32(z);
    }
  }
};

// ---------------------------------------------------------------------------
// Losses on encoded queries. Each returns the value and ∂loss/∂φ_i.

struct LossResult {
  double value = 0.0;
  std::vector<Vector> grad;
  bool degenerate = false;  // no positive pairs contributed
};

namespace detail {

struct Unit {
  Vector dir;
  double length;
};

inline std::vector<Unit> units(std::span<const Vector> vs) {
  std::vector<Unit> out;
  out.reserve(vs.size());
  for (const auto& v : vs) {
    const double n = norm(v);
    if (!(n >= kZeroNormThreshold)) throw Error(ErrorCode::kZeroVector, "loss input has zero norm");
    Vector u(v);
    for (double& x : u) x /= n;
    out.push_back({std::move(u), n});
  }
  return out;
}

/// grad += coef · ∂cos(a, b)/∂a, with a, b given as unit directions.
inline void add_cos_grad(Vector& grad, double coef, const Unit& a, const Unit& b, double cos_ab) {
  const double s = coef / a.length;
  for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += s * (b.dir[k] - cos_ab * a.dir[k]);
}

inline double log_sum_exp(std::span<const double> xs) {
  double mx = -INFINITY;
  for (double x : xs) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Language-language contrastive loss:
/// Σ_i Σ_{j≠i} −1{y_i=y_j} log( d(φ_i,φ_j) / Σ_{k≠i} d(φ_i,φ_k) ).
inline LossResult loss_ll(std::span<const int> labels, std::span<const Vector> phis, double temperature) {
  const std::size_t n = phis.size();
  if (labels.size() != n) throw Error(ErrorCode::kShapeMismatch, "loss_ll labels");
  LossResult out;
  out.grad.assign(n, Vector(n ? phis[0].size() : 0, 0.0));
  out.degenerate = true;
  if (n < 2) return out;
  const auto u = detail::units(phis);
  std::vector<double> cosines(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = i + 1; k < n; ++k) {
      cosines[i * n + k] = cosines[k * n + i] = dot(u[i].dir, u[k].dir);
    }
  }
  std::vector<double> logits;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < n; ++j) positives += (j != i && labels[j] == labels[i]);
    if (positives == 0) continue;
    out.degenerate = false;
    logits.clear();
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) logits.push_back(cosines[i * n + k] / temperature);
    }
    const double lse = detail::log_sum_exp(logits);
    out.value += static_cast<double>(positives) * lse;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const double c = cosines[i * n + k];
      double coef = static_cast<double>(positives) * std::exp(c / temperature - lse);
      if (labels[k] == labels[i]) {
        out.value -= c / temperature;
        coef -= 1.0;
      }
      coef /= temperature;
      detail::add_cos_grad(out.grad[i], coef, u[i], u[k], c);
      detail::add_cos_grad(out.grad[k], coef, u[k], u[i], c);
    }
  }
  return out;
}

/// Vision-language contrastive loss:
/// Σ_{i,j} −1{y_i=y_j} log( d(φ_i,ψ_j) / Σ_{k∈N} d(φ_i,ψ_k) ), where the
/// negatives N are the batch shots followed by the distractor shots. The
/// j = i self pair is included unless exclude_self is set. Shots are frozen,
/// so only φ receives a gradient.
inline LossResult loss_vl(std::span<const int> labels, std::span<const Vector> phis,
                          std::span<const Vector* const> batch_shots,
                          std::span<const Vector* const> distractors, double temperature,
                          bool exclude_self = false) {
  const std::size_t n = phis.size();
  if (labels.size() != n || batch_shots.size() != n) throw Error(ErrorCode::kShapeMismatch, "loss_vl batch");
  const std::size_t total = n + distractors.size();
  if (total == 0) throw Error(ErrorCode::kEmptyNegativesSet, "no negatives for loss_vl");
  std::vector<Vector> neg;
  neg.reserve(total);
  for (const auto* s : batch_shots) neg.push_back(*s);
  for (const auto* s : distractors) neg.push_back(*s);
  const auto u = detail::units(phis);
  const auto un = detail::units(neg);
  LossResult out;
  out.grad.assign(n, Vector(n ? phis[0].size() : 0, 0.0));
  out.degenerate = true;
  std::vector<double> cosines(total), logits(total);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < n; ++j) {
      positives += (labels[j] == labels[i] && !(exclude_self && j == i));
    }
    if (positives == 0) continue;
    out.degenerate = false;
    for (std::size_t k = 0; k < total; ++k) {
      cosines[k] = dot(u[i].dir, un[k].dir);
      logits[k] = cosines[k] / temperature;
    }
    const double lse = detail::log_sum_exp(logits);
    out.value += static_cast<double>(positives) * lse;
    for (std::size_t k = 0; k < total; ++k) {
      double coef = static_cast<double>(positives) * std::exp(logits[k] - lse);
      if (k < n && labels[k] == labels[i] && !(exclude_self && k == i)) {
        out.value -= logits[k];
        coef -= 1.0;
      }
      detail::add_cos_grad(out.grad[i], coef / temperature, u[i], un[k], cosines[k]);
    }
  }
  return out;
}

/// Category anchoring: −Σ_i cos(c_i, φ_i), with c_i the generic prompt
/// embedding of item i's category (a constant).
inline LossResult loss_cat(std::span<const Vector> phis, std::span<const Vector* const> anchors) {
  if (anchors.size() != phis.size()) throw Error(ErrorCode::kShapeMismatch, "loss_cat anchors");
  LossResult out;
  out.grad.reserve(phis.size());
  for (std::size_t i = 0; i < phis.size(); ++i) {
    out.value -= cosine(*anchors[i], phis[i]);
    Vector g = cosine_grad(phis[i], *anchors[i]);
    for (double& x : g) x = -x;
    out.grad.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Total objective

struct LossConfig {
  double lambda = 0.1;
  double lambda_c = 0.5;
  bool use_ll = true;
  bool use_cat = true;
  bool vl_exclude_self = false;
};

struct BatchItem {
  std::string instance;
  const Vector* shot = nullptr;
  std::size_t template_index = 0;
};

struct Batch {
  std::vector<BatchItem> items;
  std::vector<const Vector*> distractors;
};

struct ModelGradients {
  std::map<std::string, Matrix> bank;           // keyed like the bank's matrices
  std::map<std::string, std::vector<Vector>> z;  // keyed by instance id
};

struct LossBreakdown {
  double total = 0.0;
  double ll = 0.0;
  double vl = 0.0;
  double cat = 0.0;
};

using AnchorMap = std::map<std::string, Vector>;

inline AnchorMap anchor_embeddings(const std::vector<std::string>& categories,
                                   const ReferenceTextEncoder& enc) {
  AnchorMap out;
  for (const auto& c : categories) out.emplace(c, enc.encode_phrase(category_prompt(c)));
  return out;
}

/// L = L_l + L_vl + λ_c·L_c over the batch. When grads is non-null it
/// receives ∂L/∂z (C_lᵀ·∂L/∂w) and, for a trainable bank, ∂L/∂C_l
/// (Σ ∂L/∂w·zᵀ), with ∂L/∂w obtained through the encoder.
inline LossBreakdown total_loss(const Batch& batch, const PersonalizedModel& model,
                                const ReferenceTextEncoder& enc,
                                std::span<const PromptTemplate> templates, const AnchorMap& anchors,
                                const LossConfig& cfg, ModelGradients* grads = nullptr) {
  const std::size_t n = batch.items.size();
  LossBreakdown out;
  if (n == 0) return out;

  std::map<std::string, int> label_of;
  std::map<std::string, std::vector<Vector>> tokens;
  std::vector<int> labels(n);
  std::vector<EncodeCache> caches(n);
  std::vector<Vector> phis(n);
  std::vector<const Vector*> shots(n);
  std::vector<const Vector*> item_anchors(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = batch.items[i];
    auto [it, fresh] = label_of.emplace(item.instance, static_cast<int>(label_of.size()));
    labels[i] = it->second;
    if (fresh) tokens.emplace(item.instance, model.tokens(item.instance));
    const auto seq = build_personalized_query(templates[item.template_index],
                                              tokens.at(item.instance), enc.table());
    caches[i] = enc.encode_cached(seq);
    phis[i] = caches[i].phi;
    shots[i] = item.shot;
    if (cfg.use_cat) {
      const auto& cat = model.instance(item.instance).category;
      auto a = anchors.find(cat);
      if (a == anchors.end()) throw Error(ErrorCode::kInvalidArgument, "no anchor for category '" + cat + "'");
      item_anchors[i] = &a->second;
    }
  }

  const std::size_t d = enc.dim();
  std::vector<Vector> upstream(n, Vector(d, 0.0));
  if (cfg.use_ll) {
    auto ll = loss_ll(labels, phis, cfg.lambda);
    out.ll = ll.value;
    for (std::size_t i = 0; i < n; ++i) axpy(1.0, ll.grad[i], upstream[i]);
  }
  {
    auto vl = loss_vl(labels, phis, shots, batch.distractors, cfg.lambda, cfg.vl_exclude_self);
    out.vl = vl.value;
    for (std::size_t i = 0; i < n; ++i) axpy(1.0, vl.grad[i], upstream[i]);
  }
  if (cfg.use_cat) {
    auto lc = loss_cat(phis, item_anchors);
    out.cat = lc.value;
    for (std::size_t i = 0; i < n; ++i) axpy(cfg.lambda_c, lc.grad[i], upstream[i]);
  }
  out.total = out.ll + out.vl + (cfg.use_cat ? cfg.lambda_c * out.cat : 0.0);
  if (!grads) return out;

  // Every slot of a mean-pooled sequence shares one gradient, so each
  // instance token of item i receives the same ∂L/∂w contribution.
  std::map<std::string, Vector> token_grad;
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = enc.slot_gradient(caches[i], upstream[i]);
    auto [it, fresh] = token_grad.emplace(batch.items[i].instance, Vector(d, 0.0));
    axpy(1.0, g, it->second);
  }
  for (const auto& [id, gw] : token_grad) {
    const auto& inst = model.instance(id);
    const auto& features = model.bank.matrix(inst.category);
    auto& gz = grads->z[id];
    if (gz.size() != inst.z.size()) gz.assign(inst.z.size(), Vector(features.cols(), 0.0));
    for (std::size_t r = 0; r < inst.z.size(); ++r) {
      axpy(1.0, matvec_transposed(features, gw), gz[r]);
      if (model.bank.trainable()) {
        auto [mit, fresh] = grads->bank.try_emplace(model.bank.key(inst.category),
                                                    Matrix(features.rows(), features.cols()));
        add_outer(mit->second, 1.0, gw, inst.z[r]);
      }
    }
  }
  return out;
}

/// Flattened view of trainable parameters for gradient checking: bank
/// matrices in key order, then instance weights in id order.
inline Vector flatten_parameters(const PersonalizedModel& model) {
  Vector out;
  if (model.bank.trainable()) {
    for (const auto& [k, m] : model.bank.matrices()) out.insert(out.end(), m.values().begin(), m.values().end());
  }
  for (const auto& [id, inst] : model.instances) {
    for (const auto& z : inst.z) out.insert(out.end(), z.begin(), z.end());
  }
  return out;
}

inline void assign_parameters(PersonalizedModel& model, std::span<const double> flat) {
  std::size_t pos = 0;
  auto take = [&](std::span<double> dst) {
    if (pos + dst.size() > flat.size()) throw Error(ErrorCode::kShapeMismatch, "assign_parameters");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), dst.size(), dst.begin());
    pos += dst.size();
  };
  if (model.bank.trainable()) {
    for (auto& [k, m] : model.bank.matrices()) take(m.values());
  }
  for (auto& [id, inst] : model.instances) {
    for (auto& z : inst.z) take(z);
  }
  if (pos != flat.size()) throw Error(ErrorCode::kShapeMismatch, "assign_parameters size");
}

inline Vector flatten_gradients(const PersonalizedModel& model, const ModelGradients& grads) {
  Vector out;
  if (model.bank.trainable()) {
    for (const auto& [k, m] : model.bank.matrices()) {
      auto it = grads.bank.find(k);
      if (it == grads.bank.end()) {
        out.insert(out.end(), m.size(), 0.0);
      } else {
        out.insert(out.end(), it->second.values().begin(), it->second.values().end());
      }
    }
  }
  for (const auto& [id, inst] : model.instances) {
    auto it = grads.z.find(id);
    for (std::size_t r = 0; r < inst.z.size(); ++r) {
      if (it == grads.z.end()) {
        out.insert(out.end(), inst.z[r].size(), 0.0);
      } else {
        out.insert(out.end(), it->second[r].begin(), it->second[r].end());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training data

struct InstanceExamples {
  std::string id;
  std::string category;
  std::vector<Vector> shots;
};

/// Shot embeddings of every record's positive shots, looked up through the
/// videos' frame index.
inline std::vector<InstanceExamples> collect_examples(const std::vector<InstanceRecord>& records,
                                                      const std::vector<TranscriptedVideo>& videos,
                                                      const EmbeddingStore& store) {
  std::unordered_map<std::string, const TranscriptedVideo*> by_id;
  for (const auto& v : videos) by_id.emplace(v.video_id, &v);
  std::vector<InstanceExamples> out;
  for (const auto& r : records) {
    auto it = by_id.find(r.video_id);
    if (it == by_id.end()) throw Error(ErrorCode::kSchema, "record '" + r.instance_id + "' names unknown video");
    InstanceExamples ex{r.instance_id, r.category, {}};
    for (const auto& sid : r.shots) {
      const auto idx = it->second->shot_index(sid);
      if (!idx) throw Error(ErrorCode::kSchema, "record '" + r.instance_id + "' names unknown shot '" + sid + "'");
      ex.shots.push_back(shot_embedding(it->second->shots[*idx].frames, store));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Shots of the given videos that are not a positive of any record.
inline std::vector<Vector> distractor_pool(const std::vector<TranscriptedVideo>& videos,
                                           const std::vector<InstanceRecord>& records,
                                           const EmbeddingStore& store) {
  std::set<std::string> positive;
  std::set<std::string> involved;
  for (const auto& r : records) {
    positive.insert(r.shots.begin(), r.shots.end());
    involved.insert(r.video_id);
  }
  std::vector<Vector> out;
  for (const auto& v : videos) {
    if (!involved.contains(v.video_id)) continue;
    for (const auto& s : v.shots) {
      if (!positive.contains(s.id)) out.push_back(shot_embedding(s.frames, store));
    }
  }
  return out;
}

/// Zero-shot category: argmax over the category list of the mean cosine
/// between the instance shots and the generic category prompt. Ties go to
/// the earlier category.
inline std::string assign_category(std::span<const Vector> shots,
                                   const std::vector<std::string>& categories,
                                   const AnchorMap& anchors) {
  if (categories.empty()) throw Error(ErrorCode::kEmptyCategoryList, "no categories to choose from");
  if (shots.empty()) throw Error(ErrorCode::kEmptyInstance, "instance has no shots");
  std::string best;
  double best_score = -INFINITY;
  for (const auto& c : categories) {
    const auto& anchor = anchors.at(c);
    double s = 0.0;
    for (const auto& shot : shots) s += cosine(shot, anchor);
    s /= static_cast<double>(shots.size());
    if (s > best_score) {
      best_score = s;
      best = c;
    }
  }
  return best;
}

inline void assign_categories(std::vector<InstanceExamples>& examples,
                              const std::vector<std::string>& categories,
                              const ReferenceTextEncoder& enc) {
  const auto anchors = anchor_embeddings(categories, enc);
  for (auto& ex : examples) ex.category = assign_category(ex.shots, categories, anchors);
}

// ---------------------------------------------------------------------------
// Training loops

enum class Ablation { kNone, kNoMeta, kSharedC, kNoLanguageLoss, kNoCategoryLoss, kNoDistractors, kRandomC };

inline Ablation parse_ablation(std::string_view s) {
  if (s.empty() || s == "none") return Ablation::kNone;
  if (s == "a") return Ablation::kNoMeta;
  if (s == "b") return Ablation::kSharedC;
  if (s == "c") return Ablation::kNoLanguageLoss;
  if (s == "d") return Ablation::kNoCategoryLoss;
  if (s == "e") return Ablation::kNoDistractors;
  if (s == "f") return Ablation::kRandomC;
  throw Error(ErrorCode::kInvalidArgument, "unknown ablation '" + std::string(s) + "' (expected none or a..f)");
}

inline std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoMeta: return "a";
    case Ablation::kSharedC: return "b";
    case Ablation::kNoLanguageLoss: return "c";
    case Ablation::kNoCategoryLoss: return "d";
    case Ablation::kNoDistractors: return "e";
    case Ablation::kRandomC: return "f";
  }
  return "none";
}

struct TrainingConfig {
  double lambda = 0.1;
  double lambda_c = 0.5;
  std::size_t q = 512;
  std::size_t n_w = 1;
  double init_std = 0.1;
  std::size_t rounds = 10;
  std::size_t instances_per_category = 32;
  std::size_t meta_epochs = 20;
  std::size_t meta_batch = 512;
  std::size_t test_epochs = 40;
  std::size_t test_batch = 16;
  std::size_t distractors = 512;
  std::size_t extra_per_category = 8;
  std::size_t k_shots = 0;  // 0 keeps every training shot
  double lr_max = 0.1;
  AdamConfig adam{};
  Ablation ablation = Ablation::kNone;
  bool vl_exclude_self = false;
  std::vector<std::string> templates = default_templates();
  std::vector<std::string> categories = coco_categories();

  LossConfig loss() const {
    LossConfig c;
    c.lambda = lambda;
    c.lambda_c = lambda_c;
    c.use_ll = ablation != Ablation::kNoLanguageLoss;
    c.use_cat = ablation != Ablation::kNoCategoryLoss;
    c.vl_exclude_self = vl_exclude_self;
    return c;
  }

  BankMode bank_mode() const {
    if (ablation == Ablation::kNoMeta) return BankMode::kIdentity;
    if (ablation == Ablation::kSharedC) return BankMode::kShared;
    return BankMode::kPerCategory;
  }
};

inline void to_json(json& j, const TrainingConfig& c) {
  j = json{{"lambda", c.lambda},
           {"lambda_c", c.lambda_c},
           {"q", c.q},
           {"n_w", c.n_w},
           {"init_std", c.init_std},
           {"rounds", c.rounds},
           {"instances_per_category", c.instances_per_category},
           {"meta_epochs", c.meta_epochs},
           {"meta_batch", c.meta_batch},
           {"test_epochs", c.test_epochs},
           {"test_batch", c.test_batch},
           {"distractors", c.distractors},
           {"extra_per_category", c.extra_per_category},
           {"k_shots", c.k_shots},
           {"lr_max", c.lr_max},
           {"weight_decay", c.adam.weight_decay},
           {"weight_decay_mode", "decoupled"},
           {"adam_beta1", c.adam.beta1},
           {"adam_beta2", c.adam.beta2},
           {"adam_epsilon", c.adam.epsilon},
           {"lr_schedule", "cosine, eta_min=0"},
           {"ablation", ablation_name(c.ablation)},
           {"vl_exclude_self", c.vl_exclude_self},
           {"templates", c.templates},
           {"categories", c.categories}};
}

inline void from_json(const json& j, TrainingConfig& c) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  opt("lambda", c.lambda);
  opt("lambda_c", c.lambda_c);
  opt("q", c.q);
  opt("n_w", c.n_w);
  opt("init_std", c.init_std);
  opt("rounds", c.rounds);
  opt("instances_per_category", c.instances_per_category);
  opt("meta_epochs", c.meta_epochs);
  opt("meta_batch", c.meta_batch);
  opt("test_epochs", c.test_epochs);
  opt("test_batch", c.test_batch);
  opt("distractors", c.distractors);
  opt("extra_per_category", c.extra_per_category);
  opt("k_shots", c.k_shots);
  opt("lr_max", c.lr_max);
  opt("weight_decay", c.adam.weight_decay);
  opt("adam_beta1", c.adam.beta1);
  opt("adam_beta2", c.adam.beta2);
  opt("adam_epsilon", c.adam.epsilon);
  opt("vl_exclude_self", c.vl_exclude_self);
  opt("templates", c.templates);
  opt("categories", c.categories);
  if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
}

namespace detail {

struct TrainItem {
  std::string instance;
  const Vector* shot;
};

/// Adam over the bank and instance weights with one cosine schedule
/// spanning total_steps.
class Trainer {
 public:
  Trainer(PersonalizedModel& model, const ReferenceTextEncoder& enc, const TrainingConfig& cfg,
          const AnchorMap& anchors, std::size_t total_steps)
      : model_(model), enc_(enc), cfg_(cfg), anchors_(anchors), loss_cfg_(cfg.loss()),
        total_steps_(total_steps) {
    for (const auto& t : cfg.templates) templates_.push_back(PromptTemplate::parse(t, enc.table()));
    if (templates_.empty()) throw Error(ErrorCode::kInvalidTemplate, "no templates configured");
  }

  void reset_instance_states() { z_states_.clear(); }

  void run_epoch(std::vector<TrainItem> items, std::size_t batch_size,
                 std::span<const Vector> distractor_pool, std::size_t n_distractors, RngStream& rng) {
    rng.shuffle(items);
    batch_size = std::max<std::size_t>(1, batch_size);
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
      Batch batch;
      const std::size_t end = std::min(items.size(), start + batch_size);
      for (std::size_t i = start; i < end; ++i) {
        batch.items.push_back({items[i].instance, items[i].shot, rng.uniform_index(templates_.size())});
      }
      if (n_distractors > 0 && !distractor_pool.empty()) {
        for (auto k : rng.sample_without_replacement(distractor_pool.size(), n_distractors)) {
          batch.distractors.push_back(&distractor_pool[k]);
        }
      }
      step(batch);
    }
  }

  std::size_t steps_taken() const noexcept { return step_; }
  double last_loss() const noexcept { return last_loss_; }

 private:
  void step(const Batch& batch) {
    ModelGradients grads;
    const auto loss = total_loss(batch, model_, enc_, templates_, anchors_, loss_cfg_, &grads);
    if (!std::isfinite(loss.total)) throw Error(ErrorCode::kNonFiniteLoss, "training loss diverged");
    last_loss_ = loss.total;
    const double lr = cosine_lr(static_cast<std::int64_t>(step_), static_cast<std::int64_t>(total_steps_), cfg_.lr_max);
    for (auto& [key, g] : grads.bank) {
      auto& m = model_.bank.matrices().at(key);
      auto [it, fresh] = bank_states_.try_emplace(key, m.size());
      adam_step(m.values(), g.values(), it->second, lr, cfg_.adam);
    }
    for (auto& [id, gz] : grads.z) {
      auto& inst = model_.instances.at(id);
      for (std::size_t r = 0; r < gz.size(); ++r) {
        auto [it, fresh] = z_states_.try_emplace(id + "/" + std::to_string(r), inst.z[r].size());
        adam_step(inst.z[r], gz[r], it->second, lr, cfg_.adam);
      }
    }
    ++step_;
  }

  PersonalizedModel& model_;
  const ReferenceTextEncoder& enc_;
  const TrainingConfig& cfg_;
  const AnchorMap& anchors_;
  LossConfig loss_cfg_;
  std::vector<PromptTemplate> templates_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
  double last_loss_ = 0.0;
  std::map<std::string, OptimizerState> bank_states_;
  std::map<std::string, OptimizerState> z_states_;
};

inline std::size_t batches_for(std::size_t items, std::size_t batch) {
  batch = std::max<std::size_t>(1, batch);
  return (items + batch - 1) / batch;
}

inline InstanceParams fresh_instance(const std::string& category, std::size_t n_w, std::size_t q,
                                     double init_std, RngStream& rng) {
  InstanceParams p{category, {}};
  for (std::size_t r = 0; r < n_w; ++r) p.z.push_back(rng.normal_vector(q, init_std));
  return p;
}

}  // namespace detail

inline CategoryFeatureBank initial_bank(std::size_t d, const TrainingConfig& cfg, std::uint64_t seed) {
  return CategoryFeatureBank(d, cfg.q, cfg.categories, cfg.bank_mode(), splitmix64(seed ^ 0xba4cULL),
                             cfg.init_std);
}

/// Learns the category feature bank over rounds of freshly initialized
/// instance weights; per round, each category trains on up to
/// instances_per_category sampled instances with no distractor shots. Only
/// the bank is returned.
inline CategoryFeatureBank meta_personalize(const std::vector<InstanceExamples>& dataset,
                                            CategoryFeatureBank bank, const ReferenceTextEncoder& enc,
                                            const TrainingConfig& cfg, std::uint64_t seed) {
  if (!bank.trainable()) {
    log_info("meta-personalization skipped", {{"reason", "bank is frozen (ablation a)"}});
    return bank;
  }
  if (cfg.rounds == 0) return bank;
  std::map<std::string, std::vector<std::size_t>> by_category;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].category.empty()) throw Error(ErrorCode::kInvalidArgument, "uncategorized instance '" + dataset[i].id + "'");
    if (!dataset[i].shots.empty()) by_category[dataset[i].category].push_back(i);
  }
  std::vector<std::string> order;
  for (const auto& c : bank.categories()) {
    if (by_category.contains(c)) order.push_back(c);
  }
  for (const auto& [c, idx] : by_category) {
    if (std::find(order.begin(), order.end(), c) == order.end()) {
      log_warn("category not in category list, skipped", {{"category", c}, {"code", "INSUFFICIENT_INSTANCES"}});
    }
  }
  RngStream rng = RngStream::derive(seed, "meta-personalize");
  struct Block {
    std::string category;
    std::vector<std::size_t> members;
    std::size_t items = 0;
  };
  std::vector<Block> plan;
  std::size_t total = 0;
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    for (const auto& c : order) {
      const auto& pool = by_category.at(c);
      Block b{c, {}, 0};
      for (auto k : rng.sample_without_replacement(pool.size(), cfg.instances_per_category)) {
        b.members.push_back(pool[k]);
        b.items += dataset[pool[k]].shots.size();
      }
      total += cfg.meta_epochs * detail::batches_for(b.items, cfg.meta_batch);
      plan.push_back(std::move(b));
    }
  }
  for (const auto& c : order) bank.ensure(c);
  const auto anchors = anchor_embeddings(order, enc);
  PersonalizedModel model;
  model.bank = std::move(bank);
  detail::Trainer trainer(model, enc, cfg, anchors, total);
  for (std::size_t bi = 0; bi < plan.size(); ++bi) {
    const auto& b = plan[bi];
    model.instances.clear();
    trainer.reset_instance_states();
    std::vector<detail::TrainItem> items;
    for (auto m : b.members) {
      const auto& ex = dataset[m];
      model.instances.emplace(ex.id, detail::fresh_instance(ex.category, cfg.n_w, model.bank.q(), cfg.init_std, rng));
      for (const auto& s : ex.shots) items.push_back({ex.id, &s});
    }
    for (std::size_t e = 0; e < cfg.meta_epochs; ++e) trainer.run_epoch(items, cfg.meta_batch, {}, 0, rng);
    log_debug("meta block done", {{"block", bi}, {"category", b.category}, {"loss", trainer.last_loss()}});
  }
  model.quantize();
  return std::move(model.bank);
}

/// Adapts the bank and learns instance weights for the personal set, joined
/// by up to extra_per_category instances of the same categories from the
/// meta dataset. Only the personal instances are kept in the result.
inline PersonalizedModel test_time_personalize(const std::vector<InstanceExamples>& personal,
                                               const CategoryFeatureBank& meta_bank,
                                               const std::vector<InstanceExamples>& extra,
                                               std::span<const Vector> distractor_shots,
                                               const ReferenceTextEncoder& enc,
                                               const TrainingConfig& cfg, std::uint64_t seed) {
  RngStream rng = RngStream::derive(seed, "test-time");
  PersonalizedModel model;
  switch (cfg.ablation) {
    case Ablation::kNoMeta:
    case Ablation::kRandomC:
      model.bank = initial_bank(enc.dim(), cfg, seed);
      break;
    default:
      model.bank = meta_bank;
  }
  model.encoder_hash = enc.hash();
  model.config = cfg;

  std::set<std::string> categories;
  std::set<std::string> personal_ids;
  for (const auto& ex : personal) {
    if (ex.shots.empty()) throw Error(ErrorCode::kEmptyInstance, "instance '" + ex.id + "' has no training shots");
    if (ex.category.empty()) throw Error(ErrorCode::kInvalidArgument, "uncategorized instance '" + ex.id + "'");
    categories.insert(ex.category);
    personal_ids.insert(ex.id);
  }

  std::vector<const InstanceExamples*> members;
  for (const auto& ex : personal) members.push_back(&ex);
  for (const auto& c : categories) {
    std::vector<const InstanceExamples*> pool;
    for (const auto& ex : extra) {
      if (ex.category == c && !ex.shots.empty() && !personal_ids.contains(ex.id)) pool.push_back(&ex);
    }
    for (auto k : rng.sample_without_replacement(pool.size(), cfg.extra_per_category)) members.push_back(pool[k]);
  }

  std::vector<detail::TrainItem> items;
  for (const auto* ex : members) {
    model.bank.ensure(ex->category);
    model.instances.emplace(ex->id, detail::fresh_instance(ex->category, cfg.n_w, model.bank.q(), cfg.init_std, rng));
    std::vector<std::size_t> chosen(ex->shots.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) chosen[i] = i;
    if (cfg.k_shots > 0 && personal_ids.contains(ex->id)) {
      chosen = rng.sample_without_replacement(ex->shots.size(), cfg.k_shots);
      std::sort(chosen.begin(), chosen.end());
    }
    for (auto i : chosen) items.push_back({ex->id, &ex->shots[i]});
  }

  std::vector<std::string> cat_list(categories.begin(), categories.end());
  const auto anchors = anchor_embeddings(cat_list, enc);
  const std::size_t total = cfg.test_epochs * detail::batches_for(items.size(), cfg.test_batch);
  const std::size_t n_distractors = cfg.ablation == Ablation::kNoDistractors ? 0 : cfg.distractors;
  detail::Trainer trainer(model, enc, cfg, anchors, total);
  for (std::size_t e = 0; e < cfg.test_epochs; ++e) {
    trainer.run_epoch(items, cfg.test_batch, distractor_shots, n_distractors, rng);
  }
  log_debug("test-time personalization done", {{"steps", trainer.steps_taken()}, {"loss", trainer.last_loss()}});

  for (auto it = model.instances.begin(); it != model.instances.end();) {
    it = personal_ids.contains(it->first) ? std::next(it) : model.instances.erase(it);
  }
  model.quantize();
  return model;
}

}  // namespace metaper
