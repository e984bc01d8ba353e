#pragma once

// Embedding-space worlds with known ground truth: category prototypes with
// attribute subspaces, instance shots, distractors, scripted transcripts and
// a token table whose category, name and context words are planted so that
// text and shot embeddings agree.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "metaper/encoders.hpp"
#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/mining.hpp"
#include "metaper/numerics.hpp"
#include "metaper/retrieval.hpp"

namespace metaper {

struct WorldSpec {
  std::uint64_t seed = 7;
  std::size_t d = 64;
  std::size_t categories = 3;
  std::size_t instances_per_category = 4;
  std::size_t shots_per_instance = 6;  // first half named on camera, second half held out
  std::size_t distractors = 60;
  std::size_t attribute_dim = 8;
  double sigma_attr = 0.5;
  double sigma_ctx = 0.2;
  double sigma_frame = 0.1;
  double sigma_text = 0.3;  // offset of the category prompt direction from the prototype
  double margin = 0.8;      // required cos(encode("an image of a l"), c_l)
  std::size_t frames_per_shot = 3;
  std::size_t meta_instances_per_category = 16;
  std::size_t meta_shots_per_instance = 3;
  std::size_t meta_distractors_per_video = 2;
  std::size_t naming_distractors_per_video = 2;
  std::size_t query_videos = 3;
  double decoy_rate = 0.5;
  double token_std = 0.1;
  double filler_std = 2.0;
  double position_std = 0.02;
  double name_scale = 2.0;
  double context_scale = 2.0;
  double category_scale = 0.5;
  std::uint64_t projection_seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw Error(ErrorCode::kInvalidArgument, std::string("world spec: ") + what + " must be >= 1");
    };
    positive(d, "d");
    positive(categories, "categories");
    positive(instances_per_category, "instances_per_category");
    positive(shots_per_instance, "shots_per_instance");
    positive(distractors, "distractors");
    positive(attribute_dim, "attribute_dim");
    positive(frames_per_shot, "frames_per_shot");
    positive(query_videos, "query_videos");
    for (double s : {sigma_attr, sigma_ctx, sigma_frame, sigma_text, token_std, filler_std, position_std}) {
      if (!(s >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "world spec: noise scales must be >= 0");
    }
    if (categories * (1 + attribute_dim) > d) {
      throw Error(ErrorCode::kInvalidArgument, "world spec: categories x (1 + attribute_dim) exceeds d");
    }
  }
};

inline void to_json(json& j, const WorldSpec& s) {
  j = json{{"seed", s.seed},
           {"d", s.d},
           {"categories", s.categories},
           {"instances_per_category", s.instances_per_category},
           {"shots_per_instance", s.shots_per_instance},
           {"distractors", s.distractors},
           {"attribute_dim", s.attribute_dim},
           {"sigma_attr", s.sigma_attr},
           {"sigma_ctx", s.sigma_ctx},
           {"sigma_frame", s.sigma_frame},
           {"sigma_text", s.sigma_text},
           {"margin", s.margin},
           {"frames_per_shot", s.frames_per_shot},
           {"meta_instances_per_category", s.meta_instances_per_category},
           {"meta_shots_per_instance", s.meta_shots_per_instance},
           {"meta_distractors_per_video", s.meta_distractors_per_video},
           {"naming_distractors_per_video", s.naming_distractors_per_video},
           {"query_videos", s.query_videos},
           {"decoy_rate", s.decoy_rate},
           {"token_std", s.token_std},
           {"filler_std", s.filler_std},
           {"position_std", s.position_std},
           {"name_scale", s.name_scale},
           {"context_scale", s.context_scale},
           {"category_scale", s.category_scale},
           {"projection_seed", s.projection_seed}};
}

inline void from_json(const json& j, WorldSpec& s) {
  const json defaults = WorldSpec{};
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw Error(ErrorCode::kSchema, "world spec: unknown key '" + key + "'");
  }
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = require<std::decay_t<decltype(field)>>(j, key, "world spec");
  };
  opt("seed", s.seed);
  opt("d", s.d);
  opt("categories", s.categories);
  opt("instances_per_category", s.instances_per_category);
  opt("shots_per_instance", s.shots_per_instance);
  opt("distractors", s.distractors);
  opt("attribute_dim", s.attribute_dim);
  opt("sigma_attr", s.sigma_attr);
  opt("sigma_ctx", s.sigma_ctx);
  opt("sigma_frame", s.sigma_frame);
  opt("sigma_text", s.sigma_text);
  opt("margin", s.margin);
  opt("frames_per_shot", s.frames_per_shot);
  opt("meta_instances_per_category", s.meta_instances_per_category);
  opt("meta_shots_per_instance", s.meta_shots_per_instance);
  opt("meta_distractors_per_video", s.meta_distractors_per_video);
  opt("naming_distractors_per_video", s.naming_distractors_per_video);
  opt("query_videos", s.query_videos);
  opt("decoy_rate", s.decoy_rate);
  opt("token_std", s.token_std);
  opt("filler_std", s.filler_std);
  opt("position_std", s.position_std);
  opt("name_scale", s.name_scale);
  opt("context_scale", s.context_scale);
  opt("category_scale", s.category_scale);
  opt("projection_seed", s.projection_seed);
}

// ---------------------------------------------------------------------------
// Ground truth

struct TruthInstance {
  std::string instance_id;  // the id mining assigns: "{video}#{mention index}"
  std::string split;        // "meta", "personal" or "fixture"
  std::string video_id;
  std::string name;
  std::string category;
  std::vector<std::string> train_shots;  // shots in the naming video, video order
  std::vector<std::string> eval_shots;
  double mention_time = 0.0;
  Vector vector;  // instance center v_y (not serialized)
};

struct TruthDecoy {
  std::string video_id;
  std::string text;
  double mention_time = 0.0;
};

struct WorldTruth {
  std::vector<std::string> categories;
  std::map<std::string, Vector> prototypes;  // not serialized
  std::vector<TruthInstance> instances;
  std::vector<TruthDecoy> decoys;
  std::map<std::string, std::string> shot_labels;  // shot id -> instance id or "distractor"

  json to_json() const {
    json inst = json::array();
    for (const auto& t : instances) {
      inst.push_back({{"instance_id", t.instance_id},
                      {"split", t.split},
                      {"video_id", t.video_id},
                      {"name", t.name},
                      {"category", t.category},
                      {"train_shots", t.train_shots},
                      {"eval_shots", t.eval_shots},
                      {"mention_time", t.mention_time}});
    }
    json dec = json::array();
    for (const auto& d : decoys) {
      dec.push_back({{"video_id", d.video_id}, {"text", d.text}, {"mention_time", d.mention_time}});
    }
    return json{{"categories", categories}, {"instances", inst}, {"decoys", dec}, {"shot_labels", shot_labels}};
  }

  static WorldTruth from_json(const json& j) {
    const std::string what = "truth";
    WorldTruth t;
    t.categories = require<std::vector<std::string>>(j, "categories", what);
    for (const auto& row : require<json>(j, "instances", what)) {
      TruthInstance i;
      i.instance_id = require<std::string>(row, "instance_id", what);
      i.split = require<std::string>(row, "split", what);
      i.video_id = require<std::string>(row, "video_id", what);
      i.name = require<std::string>(row, "name", what);
      i.category = require<std::string>(row, "category", what);
      i.train_shots = require<std::vector<std::string>>(row, "train_shots", what);
      i.eval_shots = require<std::vector<std::string>>(row, "eval_shots", what);
      i.mention_time = require<double>(row, "mention_time", what);
      t.instances.push_back(std::move(i));
    }
    for (const auto& row : require<json>(j, "decoys", what)) {
      t.decoys.push_back({require<std::string>(row, "video_id", what), require<std::string>(row, "text", what),
                          require<double>(row, "mention_time", what)});
    }
    t.shot_labels = require<std::map<std::string, std::string>>(j, "shot_labels", what);
    return t;
  }
};

namespace detail {

inline json ratio(std::size_t num, std::size_t den) {
  if (den == 0) return "N/A";
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/// Precision and recall of mined instances against the planted ones,
/// restricted to the given videos (all truth videos when empty). An
/// instance matches when video, name and shot set agree; shot-level
/// scores count (instance, shot) pairs. Zero denominators report "N/A".
inline json world_report(const WorldTruth& truth, const std::vector<InstanceRecord>& mined,
                         const std::set<std::string>& videos = {},
                         const std::map<std::string, std::string>& assigned_categories = {},
                         const json& metrics = nullptr) {
  auto in_scope = [&](const std::string& v) { return videos.empty() || videos.contains(v); };
  std::map<std::string, const TruthInstance*> by_id;
  std::size_t planted = 0;
  std::size_t planted_shots = 0;
  for (const auto& t : truth.instances) {
    if (!in_scope(t.video_id)) continue;
    by_id.emplace(t.instance_id, &t);
    ++planted;
    planted_shots += t.train_shots.size();
  }
  std::size_t predicted = 0, matched = 0, names_ok = 0, predicted_shots = 0, matched_shots = 0;
  for (const auto& r : mined) {
    if (!in_scope(r.video_id)) continue;
    ++predicted;
    predicted_shots += r.shots.size();
    auto it = by_id.find(r.instance_id);
    if (it == by_id.end()) continue;
    const auto& t = *it->second;
    const bool name_ok = t.name == r.name;
    names_ok += name_ok;
    std::set<std::string> truth_shots(t.train_shots.begin(), t.train_shots.end());
    std::size_t hits = 0;
    for (const auto& s : r.shots) hits += truth_shots.contains(s);
    matched_shots += hits;
    if (name_ok && t.video_id == r.video_id && hits == truth_shots.size() && r.shots.size() == hits) ++matched;
  }
  std::size_t decoys = 0;
  for (const auto& d : truth.decoys) decoys += in_scope(d.video_id);
  json report = {
      {"instances",
       {{"planted", planted},
        {"mined", predicted},
        {"matched", matched},
        {"precision", detail::ratio(matched, predicted)},
        {"recall", detail::ratio(matched, planted)}}},
      {"names", {{"correct", names_ok}, {"accuracy", detail::ratio(names_ok, predicted)}}},
      {"shots",
       {{"planted", planted_shots},
        {"mined", predicted_shots},
        {"matched", matched_shots},
        {"precision", detail::ratio(matched_shots, predicted_shots)},
        {"recall", detail::ratio(matched_shots, planted_shots)}}},
      {"decoys", decoys}};
  if (!assigned_categories.empty()) {
    std::size_t correct = 0, total = 0;
    for (const auto& [id, cat] : assigned_categories) {
      auto it = by_id.find(id);
      if (it == by_id.end()) continue;
      ++total;
      correct += it->second->category == cat;
    }
    report["categories"] = {{"correct", correct}, {"total", total}, {"accuracy", detail::ratio(correct, total)}};
  }
  if (!metrics.is_null()) report["retrieval"] = metrics;
  return report;
}

// ---------------------------------------------------------------------------
// World assembly

struct World {
  WorldSpec spec;
  TokenTable table;
  EmbeddingStore store;
  std::vector<TranscriptedVideo> meta_videos;
  std::vector<TranscriptedVideo> personal_videos;
  std::vector<QuerySpec> queries;
  WorldTruth truth;
  json notes = json::object();

  std::vector<TranscriptedVideo> all_videos() const {
    auto out = meta_videos;
    out.insert(out.end(), personal_videos.begin(), personal_videos.end());
    return out;
  }

  /// Retrieval corpus definition: every shot of the personal videos except
  /// the shots the instances were named with.
  json eval_manifest() const {
    std::vector<std::string> exclude;
    for (const auto& t : truth.instances) {
      if (t.split == "personal") exclude.insert(exclude.end(), t.train_shots.begin(), t.train_shots.end());
    }
    std::sort(exclude.begin(), exclude.end());
    return json{{"transcripts", {"personal_videos.jsonl"}},
                {"exclude_shots", exclude},
                {"training",
                 {{"personal_transcripts", "personal_videos.jsonl"},
                  {"meta_transcripts", "meta_videos.jsonl"},
                  {"store", "store.mpes"},
                  {"tokens", "tokens.mptt"}}}};
  }

  json describe() const {
    return json{{"spec", spec},
                {"categories", truth.categories},
                {"files",
                 {{"tokens", "tokens.mptt"},
                  {"store", "store.mpes"},
                  {"meta_transcripts", "meta_videos.jsonl"},
                  {"personal_transcripts", "personal_videos.jsonl"},
                  {"queries", "queries.jsonl"},
                  {"eval_manifest", "eval_manifest.json"},
                  {"truth", "truth.json"}}},
                {"notes", notes}};
  }

  void write(const std::filesystem::path& dir) const {
    write_file_atomic(dir / "tokens.mptt", table.serialize());
    write_file_atomic(dir / "store.mpes", store.serialize());
    write_file_atomic(dir / "meta_videos.jsonl", transcripts_to_jsonl(meta_videos));
    write_file_atomic(dir / "personal_videos.jsonl", transcripts_to_jsonl(personal_videos));
    write_file_atomic(dir / "queries.jsonl", queries_to_jsonl(queries));
    write_file_atomic(dir / "eval_manifest.json", eval_manifest().dump(2) + "\n");
    write_file_atomic(dir / "truth.json", truth.to_json().dump(2) + "\n");
    write_file_atomic(dir / "world.json", describe().dump(2) + "\n");
  }
};

inline const std::vector<std::string>& world_category_pool() {
  static const std::vector<std::string> kPool{"dog",  "cup",   "bicycle", "chair", "bird", "clock",
                                              "book", "vase",  "cat",     "bench", "car",  "umbrella"};
  return kPool;
}

namespace detail {

inline const std::vector<std::string>& base_words() {
  static const std::vector<std::string> kWords{
      "this", "these", "is",   "are",   "my",   "our", "his",  "her",   "their", "an",   "image",
      "of",   "a",     "can",  "be",    "seen", "in",  "photo", "there", "near",  "the"};
  return kWords;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> kWords{
      "and",  "today", "we",     "will",  "show", "you",  "how",    "it",     "works", "really",
      "love", "so",    "much",   "got",   "from", "last", "year",   "here",   "now",   "look",
      "with", "for",   "very",   "just",  "well", "okay", "hello",  "guys",   "again", "back",
      "then", "after", "before", "quick", "lets", "go",   "people", "always", "every", "day"};
  return kWords;
}

inline const std::vector<std::vector<std::string>>& decoy_phrases() {
  static const std::vector<std::vector<std::string>> kPhrases{
      {"first", "video"}, {"time", "to", "talk", "about"}, {"new", "series"}, {"last", "chance"},
      {"big", "announcement"}, {"favorite", "part"}, {"whole", "story"}, {"second", "attempt"}};
  return kPhrases;
}

inline const std::vector<std::string>& context_words() {
  static const std::vector<std::string> kWords{
      "beach",  "kitchen", "garden", "park",     "snow",   "street", "office", "forest",
      "lake",   "stage",   "desk",   "sofa",     "river",  "bridge", "field",  "market",
      "garage", "library", "harbor", "mountain", "desert", "studio", "porch",  "station"};
  return kWords;
}

inline constexpr std::string_view kDistractorLabel = "distractor";

inline std::string instance_label(const std::string& video_id, const std::string& name) {
  return video_id + "|" + name;
}

struct ShotPlan {
  std::string label;  // instance label or "distractor"
  Vector center;
  Vector context;     // unit direction, scaled by sigma_ctx
  std::string context_word;  // set when a query names this shot's scene
};

struct MentionPlan {
  std::size_t shot = 0;
  std::vector<std::string> pattern;
  std::vector<std::string> words;           // name or decoy words
  std::optional<std::size_t> instance;      // index into truth.instances
  std::optional<double> at;                 // start time of the first name word
};

struct VideoPlan {
  std::string id;
  double shot_length = 30.0;
  std::vector<ShotPlan> shots;
  std::vector<MentionPlan> mentions;  // sorted by shot
};

class WorldBuilder {
 public:
  explicit WorldBuilder(const WorldSpec& spec, std::string_view stream = "world")
      : spec_(spec), rng_(RngStream::derive(spec.seed, stream)) {
    table_ = TokenTable(spec.d, 16, spec.projection_seed);
    table_.set_row(kOovId, rng_.normal_vector(spec.d, spec.token_std));
    table_.set_row(kBosId, rng_.normal_vector(spec.d, spec.token_std));
    for (std::size_t p = 0; p < table_.max_len(); ++p) table_.set_position(p, rng_.normal_vector(spec.d, spec.position_std));
    for (const auto& w : base_words()) table_.add_word(w, rng_.normal_vector(spec.d, spec.token_std));
    for (const auto& w : filler_words()) add_resamplable(w);
  }

  /// Orthonormal prototypes and attribute bases for the given categories.
  void set_categories(const std::vector<std::string>& names, std::size_t attribute_dim) {
    const std::size_t need = names.size() * (1 + attribute_dim);
    if (need > spec_.d) throw Error(ErrorCode::kInvalidArgument, "not enough dimensions for categories");
    std::vector<Vector> basis;
    while (basis.size() < need) {
      Vector v = rng_.normal_vector(spec_.d, 1.0);
      for (const auto& b : basis) axpy(-dot(v, b), b, v);
      if (norm(v) > 1e-6) basis.push_back(l2_normalize(v));
    }
    truth_.categories = names;
    for (std::size_t l = 0; l < names.size(); ++l) {
      truth_.prototypes[names[l]] = basis[l];
      std::vector<Vector> attrs(basis.begin() + static_cast<std::ptrdiff_t>(names.size() + l * attribute_dim),
                                basis.begin() + static_cast<std::ptrdiff_t>(names.size() + (l + 1) * attribute_dim));
      attributes_[names[l]] = std::move(attrs);
      if (!table_.contains(names[l])) table_.add_word(names[l], Vector(spec_.d, 0.0));
    }
  }

  /// v = normalize(c_l + Σ_k a_k·b_k) with a_k ~ N(0, σ_attr²).
  Vector instance_center(const std::string& category) {
    Vector v = truth_.prototypes.at(category);
    for (const auto& b : attributes_.at(category)) axpy(rng_.normal(0.0, spec_.sigma_attr), b, v);
    return l2_normalize(v);
  }

  Vector random_unit() { return l2_normalize(rng_.normal_vector(spec_.d, 1.0)); }

  /// Half the distractors are unnamed objects of a random category, half are
  /// unrelated directions.
  Vector distractor_center() {
    if (rng_.uniform01() < 0.5) {
      return instance_center(truth_.categories[rng_.uniform_index(truth_.categories.size())]);
    }
    return random_unit();
  }

  std::string fresh_name() {
    static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
    static const char* kVowels[] = {"a", "e", "i", "o", "u"};
    for (;;) {
      std::string w;
      for (int s = 0; s < 2; ++s) {
        w += kOnsets[rng_.uniform_index(std::size(kOnsets))];
        w += kVowels[rng_.uniform_index(std::size(kVowels))];
      }
      w += kOnsets[rng_.uniform_index(std::size(kOnsets))];
      if (!table_.contains(w)) return w;
    }
  }

  /// A name word whose row points at the instance center.
  void plant_name_word(const std::string& word, std::span<const double> center) {
    Vector row(center.begin(), center.end());
    for (double& x : row) x *= spec_.name_scale;
    if (table_.contains(word)) {
      table_.set_row(table_.id(word), row);
    } else {
      table_.add_word(word, row);
    }
  }

  Vector plant_context_word(const std::string& word) {
    const Vector u = random_unit();
    Vector row(u);
    for (double& x : row) x *= spec_.context_scale;
    table_.add_word(word, row);
    return u;
  }

  void add_resamplable(const std::string& word) {
    if (table_.contains(word)) return;
    table_.add_word(word, rng_.normal_vector(spec_.d, spec_.filler_std));
    resamplable_.insert(word);
  }

  std::vector<std::string> filler(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(filler_words()[rng_.uniform_index(filler_words().size())]);
    return out;
  }

  const std::array<std::string, 3>& random_pattern() {
    const auto& pats = possessive_patterns();
    return pats[rng_.uniform_index(pats.size())];
  }

  ShotPlan shot(std::string label, Vector center) { return {std::move(label), std::move(center), random_unit(), {}}; }

  std::size_t add_truth(TruthInstance t) {
    truth_.instances.push_back(std::move(t));
    return truth_.instances.size() - 1;
  }

  /// Frames, shots and a transcript for the plan; mention timing follows
  /// the plan's shots, and fills in the truth's shot ids and mention times.
  TranscriptedVideo realize(const VideoPlan& plan) {
    TranscriptedVideo v;
    v.video_id = plan.id;
    for (std::size_t s = 0; s < plan.shots.size(); ++s) {
      const auto& sp = plan.shots[s];
      Shot shot;
      shot.id = plan.id + "/s" + std::to_string(s);
      shot.t0 = plan.shot_length * static_cast<double>(s);
      shot.t1 = shot.t0 + plan.shot_length;
      for (std::size_t f = 0; f < spec_.frames_per_shot; ++f) {
        Vector frame = sp.center;
        axpy(spec_.sigma_ctx, sp.context, frame);
        const double per_coord = spec_.sigma_frame / std::sqrt(static_cast<double>(spec_.d));
        for (double& x : frame) x += rng_.normal(0.0, per_coord);
        const std::string fid = shot.id + "/f" + std::to_string(f);
        store_.add(fid, l2_normalize(frame));
        shot.frames.push_back(fid);
      }
      truth_.shot_labels[shot.id] = sp.label;
      v.shots.push_back(std::move(shot));
    }
    std::size_t next_mention = 0;
    for (std::size_t s = 0; s < plan.shots.size(); ++s) {
      const double t0 = plan.shot_length * static_cast<double>(s);
      double t = t0 + 1.0;
      auto say = [&](const std::string& w) {
        v.words.push_back({w, t, t + 0.4});
        t += 0.5;
      };
      for (const auto& w : filler(3)) say(w);
      while (next_mention < plan.mentions.size() && plan.mentions[next_mention].shot == s) {
        const auto& m = plan.mentions[next_mention];
        if (m.at) {
          const double start = *m.at - 0.5 * static_cast<double>(m.pattern.size());
          if (start < t || *m.at >= t0 + plan.shot_length) {
            throw Error(ErrorCode::kInvalidArgument, "mention time does not fit in shot " + std::to_string(s));
          }
          t = start;
        }
        for (const auto& w : m.pattern) say(w);
        const double mention_time = t;
        for (const auto& w : m.words) say(w);
        for (const auto& w : filler(4)) say(w);
        if (m.instance) {
          truth_.instances[*m.instance].mention_time = mention_time;
          truth_.instances[*m.instance].instance_id = instance_id_for(plan.id, next_mention);
        } else {
          truth_.decoys.push_back({plan.id, join_words(m.words), mention_time});
        }
        ++next_mention;
      }
      for (const auto& w : filler(3)) say(w);
    }
    // Shot ids of planted instances resolved from their labels.
    for (auto& t : truth_.instances) {
      if (t.video_id != plan.id) continue;
      t.train_shots.clear();
      for (std::size_t s = 0; s < plan.shots.size(); ++s) {
        if (plan.shots[s].label == t.video_id + "|" + t.name) t.train_shots.push_back(v.shots[s].id);
      }
    }
    plans_.push_back(plan);
    videos_.push_back(v);
    return v;
  }

  /// Writes each category word so the generic category prompt encodes to
  /// normalize(c_l + σ_text·g), resampling g until the cosine with c_l
  /// reaches the margin.
  void plant_categories() {
    const ReferenceTextEncoder probe(table_);
    const auto& P = probe.projection();
    for (const auto& cat : truth_.categories) {
      const auto prompt_ids = [&] {
        std::vector<std::uint32_t> ids{kBosId};
        for (auto id : tokenize(category_prompt(cat), table_)) ids.push_back(id);
        return ids;
      }();
      if (prompt_ids.back() != table_.id(cat) || prompt_ids.size() > table_.max_len()) {
        throw Error(ErrorCode::kInvalidArgument, "category '" + cat + "' must be a single known word");
      }
      const std::size_t m = prompt_ids.size();
      Vector rest(spec_.d, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        if (i + 1 < m) axpy(1.0, table_.row(prompt_ids[i]), rest);
        axpy(1.0, table_.position(i), rest);
      }
      const Vector p_rest = matvec(P, rest);
      bool planted = false;
      for (int attempt = 0; attempt < 64 && !planted; ++attempt) {
        Vector target = truth_.prototypes.at(cat);
        const double per_coord = spec_.sigma_text / std::sqrt(static_cast<double>(spec_.d));
        for (double& x : target) x += rng_.normal(0.0, per_coord);
        target = l2_normalize(target);
        Vector rhs(spec_.d);
        for (std::size_t k = 0; k < spec_.d; ++k) {
          rhs[k] = static_cast<double>(m) * spec_.category_scale * target[k] - p_rest[k];
        }
        Vector row;
        try {
          row = solve_linear(P, rhs);
        } catch (const Error&) {
          throw Error(ErrorCode::kInfeasibleMargin, "projection is singular; cannot plant category words");
        }
        table_.set_row(table_.id(cat), row);
        const double c = cosine(ReferenceTextEncoder(table_).encode_phrase(category_prompt(cat)),
                                truth_.prototypes.at(cat));
        notes_["category_prompt_cosine"][cat] = c;
        planted = c >= spec_.margin;
      }
      if (!planted) {
        throw Error(ErrorCode::kInfeasibleMargin, "category '" + cat + "' prompt cannot reach margin " +
                                                      std::to_string(spec_.margin));
      }
    }
  }

  /// Runs mining over every realized video and resamples the filler and
  /// decoy words of any mention whose outcome differs from the plan.
  void verify_mining() {
    const MiningConfig cfg{};
    for (int attempt = 0; attempt < 64; ++attempt) {
      const ReferenceTextEncoder enc(table_);
      std::set<std::string> resample;
      for (std::size_t vi = 0; vi < videos_.size(); ++vi) {
        const auto& plan = plans_[vi];
        if (plan.mentions.empty()) continue;
        const auto result = mine_video(videos_[vi], enc, store_, cfg);
        std::map<std::string, const InstanceRecord*> by_id;
        for (const auto& r : result.records) by_id.emplace(r.instance_id, &r);
        const auto candidates = spot_instances(videos_[vi]);
        if (candidates.size() != plan.mentions.size()) {
          throw Error(ErrorCode::kInfeasibleMargin, "unexpected possessive match in " + plan.id);
        }
        for (std::size_t mi = 0; mi < plan.mentions.size(); ++mi) {
          const auto& m = plan.mentions[mi];
          const auto id = instance_id_for(plan.id, mi);
          auto it = by_id.find(id);
          bool ok;
          if (m.instance) {
            const auto& t = truth_.instances[*m.instance];
            ok = it != by_id.end() && it->second->name == t.name;
            if (ok && it->second->shots != t.train_shots) {
              throw Error(ErrorCode::kInfeasibleMargin, "shot expansion for " + id + " disagrees with the plan");
            }
          } else {
            ok = it == by_id.end();
          }
          if (!ok) {
            for (const auto& w : candidates[mi].name) {
              if (resamplable_.contains(w)) resample.insert(w);
            }
          }
        }
      }
      if (resample.empty()) return;
      for (const auto& w : resample) table_.set_row(table_.id(w), rng_.normal_vector(spec_.d, spec_.filler_std));
    }
    throw Error(ErrorCode::kInfeasibleMargin, "could not script transcripts that mine as planned");
  }

  /// Replaces builder labels by the instance ids mining will assign.
  void relabel_shots() {
    std::map<std::string, std::string> label_to_id;
    for (const auto& t : truth_.instances) label_to_id[instance_label(t.video_id, t.name)] = t.instance_id;
    for (auto& [shot, label] : truth_.shot_labels) {
      if (auto it = label_to_id.find(label); it != label_to_id.end()) label = it->second;
    }
  }

  RngStream& rng() { return rng_; }
  TokenTable& table() { return table_; }
  EmbeddingStore& store() { return store_; }
  WorldTruth& truth() { return truth_; }
  json& notes() { return notes_; }
  const std::vector<TranscriptedVideo>& videos() const { return videos_; }

 private:
  WorldSpec spec_;
  RngStream rng_;
  TokenTable table_;
  EmbeddingStore store_;
  WorldTruth truth_;
  json notes_ = json::object();
  std::map<std::string, std::vector<Vector>> attributes_;
  std::set<std::string> resamplable_;
  std::vector<VideoPlan> plans_;
  std::vector<TranscriptedVideo> videos_;
};

}  // namespace detail

/// Builds the default-style world: meta naming videos, personal naming
/// videos (first half of each instance's shots), query videos holding the
/// held-out shots among distractors, generic and contextual queries.
inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  detail::WorldBuilder b(spec);
  const auto& pool = world_category_pool();
  std::vector<std::string> categories;
  for (std::size_t l = 0; l < spec.categories; ++l) {
    categories.push_back(l < pool.size() ? pool[l] : b.fresh_name());
  }
  b.set_categories(categories, spec.attribute_dim);
  for (const auto& phrase : detail::decoy_phrases()) {
    for (const auto& w : phrase) b.add_resamplable(w);
  }

  World world;
  world.spec = spec;

  auto naming_video = [&](const std::string& vid, const std::string& split, const std::string& category,
                          std::size_t n_train, std::size_t n_eval, std::size_t n_distractors,
                          std::vector<detail::ShotPlan>* eval_out) {
    const Vector center = b.instance_center(category);
    const std::string name = b.fresh_name();
    b.plant_name_word(name, center);
    const std::string label = detail::instance_label(vid, name);
    TruthInstance t;
    t.split = split;
    t.video_id = vid;
    t.name = name;
    t.category = category;
    t.vector = center;
    const auto idx = b.add_truth(t);
    std::vector<detail::ShotPlan> train;
    for (std::size_t i = 0; i < n_train; ++i) train.push_back(b.shot(label, center));
    for (std::size_t i = 0; i < n_eval && eval_out; ++i) eval_out->push_back(b.shot(label, center));
    detail::VideoPlan plan;
    plan.id = vid;
    // Layout: distractor, named shot, second shot, remaining distractors,
    // remaining shots.
    std::size_t d_left = n_distractors;
    if (d_left > 0) {
      plan.shots.push_back(b.shot(std::string(detail::kDistractorLabel), b.distractor_center()));
      --d_left;
    }
    const std::size_t named_at = plan.shots.size();
    for (std::size_t i = 0; i < std::min<std::size_t>(2, train.size()); ++i) plan.shots.push_back(train[i]);
    for (; d_left > 0; --d_left) plan.shots.push_back(b.shot(std::string(detail::kDistractorLabel), b.distractor_center()));
    for (std::size_t i = 2; i < train.size(); ++i) plan.shots.push_back(train[i]);
    const auto& pat = b.random_pattern();
    plan.mentions.push_back({named_at, {pat[0], pat[1], pat[2]}, {name}, idx, std::nullopt});
    if (b.rng().uniform01() < spec.decoy_rate) {
      const auto& phrase = detail::decoy_phrases()[b.rng().uniform_index(detail::decoy_phrases().size())];
      const auto& dp = b.random_pattern();
      plan.mentions.push_back({plan.shots.size() - 1, {dp[0], dp[1], dp[2]}, phrase, std::nullopt, std::nullopt});
    }
    b.realize(plan);
    return idx;
  };

  // Meta corpus.
  std::size_t counter = 0;
  for (const auto& cat : categories) {
    for (std::size_t i = 0; i < spec.meta_instances_per_category; ++i) {
      char vid[32];
      std::snprintf(vid, sizeof(vid), "m%03zu", counter++);
      naming_video(vid, "meta", cat, spec.meta_shots_per_instance, 0, spec.meta_distractors_per_video, nullptr);
    }
  }

  // Personal naming videos; their held-out shots go to the query videos.
  const std::size_t n_train = (spec.shots_per_instance + 1) / 2;
  const std::size_t n_eval = spec.shots_per_instance - n_train;
  const std::size_t n_personal = spec.categories * spec.instances_per_category;
  const std::size_t per_naming = std::min(spec.naming_distractors_per_video, spec.distractors / n_personal);
  std::size_t distractors_left = spec.distractors;
  std::vector<detail::ShotPlan> held_out;
  std::vector<std::size_t> personal;
  counter = 0;
  for (const auto& cat : categories) {
    for (std::size_t i = 0; i < spec.instances_per_category; ++i) {
      char vid[32];
      std::snprintf(vid, sizeof(vid), "p%03zu", counter++);
      std::vector<detail::ShotPlan> eval;
      personal.push_back(naming_video(vid, "personal", cat, n_train, n_eval, per_naming, &eval));
      distractors_left -= per_naming;
      held_out.insert(held_out.end(), eval.begin(), eval.end());
    }
  }

  // Contextual queries: the first held-out shot of each instance gets a
  // named scene whose word row points along the shot's context.
  std::set<std::string> seen_labels;
  for (auto& sp : held_out) {
    if (!seen_labels.insert(sp.label).second) continue;
    const auto& words = detail::context_words();
    sp.context_word = seen_labels.size() <= words.size() ? words[seen_labels.size() - 1] : b.fresh_name();
    sp.context = b.plant_context_word(sp.context_word);
  }

  std::vector<detail::ShotPlan> query_shots = held_out;
  for (; distractors_left > 0; --distractors_left) {
    query_shots.push_back(b.shot(std::string(detail::kDistractorLabel), b.distractor_center()));
  }
  b.rng().shuffle(query_shots);
  std::vector<detail::VideoPlan> qplans(spec.query_videos);
  for (std::size_t q = 0; q < spec.query_videos; ++q) qplans[q].id = "q" + std::to_string(q);
  for (std::size_t i = 0; i < query_shots.size(); ++i) qplans[i % spec.query_videos].shots.push_back(query_shots[i]);

  std::map<std::string, std::vector<std::string>> eval_shots;                    // label -> shot ids
  std::map<std::string, std::pair<std::string, std::string>> context_shot;       // label -> (word, shot id)
  for (const auto& plan : qplans) {
    if (plan.shots.empty()) continue;
    const auto v = b.realize(plan);
    for (std::size_t s = 0; s < plan.shots.size(); ++s) {
      const auto& sp = plan.shots[s];
      if (sp.label == detail::kDistractorLabel) continue;
      eval_shots[sp.label].push_back(v.shots[s].id);
      if (!sp.context_word.empty()) context_shot[sp.label] = {sp.context_word, v.shots[s].id};
    }
  }

  b.plant_categories();
  b.verify_mining();

  auto& truth = b.truth();
  for (auto& t : truth.instances) {
    if (auto it = eval_shots.find(detail::instance_label(t.video_id, t.name)); it != eval_shots.end()) {
      t.eval_shots = it->second;
      std::sort(t.eval_shots.begin(), t.eval_shots.end());
    }
  }
  b.relabel_shots();

  for (auto idx : personal) {
    const auto& t = truth.instances[idx];
    if (t.eval_shots.empty()) continue;
    world.queries.push_back({t.instance_id + "/generic", t.instance_id, QueryKind::kGeneric,
                             std::string(kGenericPrompt), t.eval_shots});
    if (auto c = context_shot.find(detail::instance_label(t.video_id, t.name)); c != context_shot.end()) {
      world.queries.push_back({t.instance_id + "/contextual", t.instance_id, QueryKind::kContextual,
                               "an image of * near the " + c->second.first, {c->second.second}});
    }
  }

  world.table = b.table();
  world.store = b.store();
  world.truth = truth;
  world.notes = b.notes();
  world.notes["planting"] =
      "category, name and context word rows are written into the token table so that text and shot "
      "embeddings share one space; filler and decoy rows are resampled until mining reproduces the script";
  // Videos were realized in order: meta naming, personal naming, query.
  const std::size_t meta_count = spec.categories * spec.meta_instances_per_category;
  const auto& videos = b.videos();
  world.meta_videos.assign(videos.begin(), videos.begin() + static_cast<std::ptrdiff_t>(meta_count));
  world.personal_videos.assign(videos.begin() + static_cast<std::ptrdiff_t>(meta_count), videos.end());
  return world;
}

/// Three scripted videos with five planted instances and two non-visual
/// possessive mentions, including the "time to talk about" (1:30) and
/// "fender guitar" (3:25) pair sharing one video. Distractors are unrelated
/// directions so every window has a single clear reference.
inline World scripted_fixture(std::uint64_t seed = 7) {
  WorldSpec spec;
  spec.seed = seed;
  spec.categories = 5;
  detail::WorldBuilder b(spec, "fixture");
  const std::vector<std::string> categories{"guitar", "boots", "dog", "bicycle", "teapot"};
  b.set_categories(categories, spec.attribute_dim);
  for (const auto& w : {"time", "to", "talk", "about", "first", "video"}) b.add_resamplable(w);

  World world;
  world.spec = spec;
  auto distractor = [&] { return b.shot(std::string(detail::kDistractorLabel), b.random_unit()); };
  struct Planted {
    std::size_t index;
    std::string label;
    Vector center;
  };
  auto plant = [&](const std::string& video, const std::string& category, std::vector<std::string> name,
                   bool name_word_is_visual) {
    const Vector center = b.instance_center(category);
    if (name_word_is_visual) b.plant_name_word(name.front(), center);
    TruthInstance t;
    t.split = "fixture";
    t.video_id = video;
    t.name = join_words(name);
    t.category = category;
    t.vector = center;
    const auto idx = b.add_truth(t);
    return Planted{idx, detail::instance_label(video, t.name), center};
  };
  using Pattern = std::vector<std::string>;
  const Pattern my{"this", "is", "my"}, our{"this", "is", "our"}, these_our{"these", "are", "our"};

  {
    detail::VideoPlan plan;
    plan.id = "fixture-a";
    plan.shot_length = 60.0;
    const auto guitar = plant(plan.id, "guitar", {"fender", "guitar"}, true);
    plan.shots = {distractor(), distractor(), distractor(), b.shot(guitar.label, guitar.center),
                  b.shot(guitar.label, guitar.center), distractor()};
    plan.mentions.push_back({1, our, {"time", "to", "talk", "about"}, std::nullopt, 90.0});
    plan.mentions.push_back({3, my, {"fender", "guitar"}, guitar.index, 205.0});
    b.realize(plan);
  }
  {
    detail::VideoPlan plan;
    plan.id = "fixture-b";
    const auto boots = plant(plan.id, "boots", {"hiking", "boots"}, true);
    const auto dog = plant(plan.id, "dog", {"dog"}, false);
    plan.shots = {distractor(),
                  b.shot(boots.label, boots.center),
                  b.shot(boots.label, boots.center),
                  distractor(),
                  b.shot(dog.label, dog.center),
                  b.shot(dog.label, dog.center),
                  distractor()};
    plan.mentions.push_back({1, these_our, {"hiking", "boots"}, boots.index, std::nullopt});
    plan.mentions.push_back({4, my, {"dog"}, dog.index, std::nullopt});
    b.realize(plan);
  }
  {
    detail::VideoPlan plan;
    plan.id = "fixture-c";
    const auto bike = plant(plan.id, "bicycle", {"bike"}, true);
    const auto teapot = plant(plan.id, "teapot", {"blue", "teapot"}, true);
    plan.shots = {b.shot(bike.label, bike.center),
                  b.shot(bike.label, bike.center),
                  distractor(),
                  distractor(),
                  b.shot(teapot.label, teapot.center),
                  b.shot(teapot.label, teapot.center),
                  distractor()};
    plan.mentions.push_back({0, {"this", "is", "her"}, {"bike"}, bike.index, std::nullopt});
    plan.mentions.push_back({2, our, {"first", "video"}, std::nullopt, std::nullopt});
    plan.mentions.push_back({5, {"this", "is", "their"}, {"blue", "teapot"}, teapot.index, std::nullopt});
    b.realize(plan);
  }

  b.plant_categories();
  b.verify_mining();
  b.relabel_shots();
  world.table = b.table();
  world.store = b.store();
  world.truth = b.truth();
  world.notes = b.notes();
  world.personal_videos = b.videos();
  return world;
}

}  // namespace metaper
