#pragma once

// Mining named instances from time-aligned transcripts: possessive pattern
// spotting, non-visual filtering around the mention, name truncation and
// expansion of the instance to every similar shot of its video.

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "metaper/encoders.hpp"
#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/numerics.hpp"
#include "metaper/parallel.hpp"

namespace metaper {

struct Word {
  std::string text;
  double t0 = 0.0;
  double t1 = 0.0;
};

struct Shot {
  std::string id;
  double t0 = 0.0;
  double t1 = 0.0;
  std::vector<std::string> frames;
};

struct TranscriptedVideo {
  std::string video_id;
  std::vector<Word> words;
  std::vector<Shot> shots;

  /// Throws a schema error unless words and shots are time sorted, shots do
  /// not overlap and every shot lists at least one frame.
  void validate() const {
    const std::string what = "video '" + video_id + "'";
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (words[i].t1 < words[i].t0) throw Error(ErrorCode::kSchema, what + ": word ends before it starts");
      if (i > 0 && words[i].t0 < words[i - 1].t0) throw Error(ErrorCode::kSchema, what + ": words not time sorted");
    }
    for (std::size_t i = 0; i < shots.size(); ++i) {
      if (shots[i].t1 < shots[i].t0) throw Error(ErrorCode::kSchema, what + ": shot ends before it starts");
      if (shots[i].frames.empty()) throw Error(ErrorCode::kSchema, what + ": shot '" + shots[i].id + "' has no frames");
      if (i > 0 && shots[i].t0 < shots[i - 1].t1) throw Error(ErrorCode::kSchema, what + ": shots overlap or are unsorted");
    }
  }

  std::optional<std::size_t> shot_at(double t) const {
    for (std::size_t i = 0; i < shots.size(); ++i) {
      if (shots[i].t0 <= t && t < shots[i].t1) return i;
    }
    if (!shots.empty() && t == shots.back().t1) return shots.size() - 1;
    return std::nullopt;
  }

  std::optional<std::size_t> shot_index(const std::string& id) const {
    for (std::size_t i = 0; i < shots.size(); ++i) {
      if (shots[i].id == id) return i;
    }
    return std::nullopt;
  }
};

inline void to_json(json& j, const TranscriptedVideo& v) {
  j = json{{"video_id", v.video_id}, {"words", json::array()}, {"shots", json::array()}};
  for (const auto& w : v.words) j["words"].push_back({{"t0", w.t0}, {"t1", w.t1}, {"w", w.text}});
  for (const auto& s : v.shots) {
    j["shots"].push_back({{"id", s.id}, {"t0", s.t0}, {"t1", s.t1}, {"frames", s.frames}});
  }
}

inline TranscriptedVideo video_from_json(const json& j) {
  TranscriptedVideo v;
  v.video_id = require<std::string>(j, "video_id", "transcript");
  const std::string what = "transcript '" + v.video_id + "'";
  for (const auto& w : require<json>(j, "words", what)) {
    v.words.push_back({require<std::string>(w, "w", what), require<double>(w, "t0", what),
                       require<double>(w, "t1", what)});
  }
  for (const auto& s : require<json>(j, "shots", what)) {
    v.shots.push_back({require<std::string>(s, "id", what), require<double>(s, "t0", what),
                       require<double>(s, "t1", what),
                       require<std::vector<std::string>>(s, "frames", what)});
  }
  v.validate();
  return v;
}

inline std::vector<TranscriptedVideo> parse_transcripts(std::string_view text) {
  std::vector<TranscriptedVideo> out;
  for (const auto& row : parse_jsonl(text, "transcripts")) out.push_back(video_from_json(row));
  return out;
}

inline std::string transcripts_to_jsonl(const std::vector<TranscriptedVideo>& videos) {
  std::vector<json> rows;
  for (const auto& v : videos) rows.emplace_back(v);
  return to_jsonl(rows);
}

// ---------------------------------------------------------------------------

inline const std::vector<std::array<std::string, 3>>& possessive_patterns() {
  static const std::vector<std::array<std::string, 3>> kPatterns = [] {
    std::vector<std::array<std::string, 3>> p;
    for (const auto& [a, b] : {std::pair{"this", "is"}, std::pair{"these", "are"}}) {
      for (const char* who : {"my", "our", "his", "her", "their"}) p.push_back({a, b, who});
    }
    return p;
  }();
  return kPatterns;
}

inline constexpr std::size_t kMaxNameWords = 4;

struct InstanceCandidate {
  std::string video_id;
  std::string pattern;
  std::vector<std::string> name;
  double mention_time = 0.0;
  std::optional<std::size_t> shot;  // index of the shot overlapping mention_time
  std::size_t match_index = 0;
};

struct InstanceRecord {
  std::string instance_id;
  std::string name;
  std::string video_id;
  std::string reference_shot;
  std::vector<std::string> shots;
  std::string category;  // empty until assigned
  double mention_time = 0.0;
};

inline void to_json(json& j, const InstanceRecord& r) {
  j = json{{"instance_id", r.instance_id}, {"name", r.name},
           {"video_id", r.video_id},       {"reference_shot", r.reference_shot},
           {"shots", r.shots},             {"rejected", false},
           {"mention_time", r.mention_time}};
  if (!r.category.empty()) j["category"] = r.category;
}

inline InstanceRecord record_from_json(const json& j) {
  InstanceRecord r;
  r.instance_id = require<std::string>(j, "instance_id", "instance record");
  const std::string what = "instance '" + r.instance_id + "'";
  r.name = require<std::string>(j, "name", what);
  r.video_id = require<std::string>(j, "video_id", what);
  r.reference_shot = require<std::string>(j, "reference_shot", what);
  r.shots = require<std::vector<std::string>>(j, "shots", what);
  if (j.contains("category") && j["category"].is_string()) r.category = j["category"];
  if (j.contains("mention_time")) r.mention_time = j["mention_time"].get<double>();
  if (std::find(r.shots.begin(), r.shots.end(), r.reference_shot) == r.shots.end()) {
    throw Error(ErrorCode::kSchema, what + ": reference shot not among its shots");
  }
  return r;
}

inline std::vector<InstanceRecord> parse_dataset(std::string_view text) {
  std::vector<InstanceRecord> out;
  for (const auto& row : parse_jsonl(text, "dataset")) {
    if (row.value("rejected", false)) continue;
    out.push_back(record_from_json(row));
  }
  return out;
}

inline std::string dataset_to_jsonl(const std::vector<InstanceRecord>& records) {
  std::vector<json> rows;
  for (const auto& r : records) rows.emplace_back(r);
  return to_jsonl(rows);
}

// ---------------------------------------------------------------------------

/// One candidate per possessive pattern match; the name is up to four words
/// after the pattern and t* is the start of the first name word.
inline std::vector<InstanceCandidate> spot_instances(const TranscriptedVideo& video) {
  struct Token {
    std::string text;
    double t0;
  };
  std::vector<Token> tokens;
  for (const auto& w : video.words) {
    for (auto& piece : split_words(w.text)) tokens.push_back({std::move(piece), w.t0});
  }
  std::vector<InstanceCandidate> out;
  for (std::size_t i = 0; i + 3 < tokens.size(); ++i) {
    for (const auto& pat : possessive_patterns()) {
      if (tokens[i].text != pat[0] || tokens[i + 1].text != pat[1] || tokens[i + 2].text != pat[2]) continue;
      InstanceCandidate c;
      c.video_id = video.video_id;
      c.pattern = pat[0] + " " + pat[1] + " " + pat[2];
      for (std::size_t k = i + 3; k < tokens.size() && c.name.size() < kMaxNameWords; ++k) {
        c.name.push_back(tokens[k].text);
      }
      c.mention_time = tokens[i + 3].t0;
      c.shot = video.shot_at(c.mention_time);
      c.match_index = out.size();
      out.push_back(std::move(c));
      break;
    }
  }
  return out;
}

inline std::vector<Vector> embed_shots(const TranscriptedVideo& video, const EmbeddingStore& store) {
  std::vector<Vector> out;
  out.reserve(video.shots.size());
  for (const auto& s : video.shots) out.push_back(shot_embedding(s.frames, store));
  return out;
}

/// Text embeddings of the name prefixes [q1], [q1 q2], ...
inline std::vector<Vector> name_prefix_embeddings(const std::vector<std::string>& name,
                                                  const ReferenceTextEncoder& enc) {
  std::vector<Vector> out;
  for (std::size_t k = 1; k <= name.size(); ++k) {
    out.push_back(enc.encode_words({name.begin(), name.begin() + static_cast<std::ptrdiff_t>(k)}));
  }
  return out;
}

/// Longest name prefix whose text embedding has cosine > threshold with the
/// reference shot embedding.
inline std::vector<std::string> truncate_name(const std::vector<std::string>& name,
                                              std::span<const double> reference,
                                              const ReferenceTextEncoder& enc,
                                              double threshold = 0.3) {
  const auto prefixes = name_prefix_embeddings(name, enc);
  for (std::size_t k = prefixes.size(); k > 0; --k) {
    if (cosine(prefixes[k - 1], reference) > threshold) {
      return {name.begin(), name.begin() + static_cast<std::ptrdiff_t>(k)};
    }
  }
  throw Error(ErrorCode::kNoVisualName, "no prefix of '" + join_words(name) + "' exceeds " +
                                            std::to_string(threshold));
}

struct FilterOutcome {
  bool accepted = false;
  std::size_t reference = 0;         // index into the video's shots
  double best_score = 0.0;
  std::vector<std::size_t> window;   // shot indices considered
  std::vector<double> window_scores;
};

/// Scores the shots [s−1, s, s+1] around the mention (clamped at the video
/// boundaries) and keeps the best one if it beats threshold. A shot's score
/// is its best cosine against any prefix of the candidate name.
inline FilterOutcome filter_nonvisual(const InstanceCandidate& candidate,
                                      std::span<const Vector> shot_embeddings,
                                      const ReferenceTextEncoder& enc, double threshold = 0.3) {
  if (!candidate.shot) {
    throw Error(ErrorCode::kNoOverlappingShot, "no shot overlaps t=" + std::to_string(candidate.mention_time));
  }
  const std::size_t s = *candidate.shot;
  const std::size_t lo = s == 0 ? 0 : s - 1;
  const std::size_t hi = std::min(s + 1, shot_embeddings.size() - 1);
  const auto prefixes = name_prefix_embeddings(candidate.name, enc);
  FilterOutcome out;
  out.best_score = -2.0;
  for (std::size_t i = lo; i <= hi; ++i) {
    double score = -2.0;
    for (const auto& p : prefixes) score = std::max(score, cosine(p, shot_embeddings[i]));
    out.window.push_back(i);
    out.window_scores.push_back(score);
    if (score > out.best_score) {
      out.best_score = score;
      out.reference = i;
    }
  }
  out.accepted = out.best_score > threshold;
  return out;
}

inline FilterOutcome filter_nonvisual(const InstanceCandidate& candidate, const TranscriptedVideo& video,
                                      const ReferenceTextEncoder& enc, const EmbeddingStore& store,
                                      double threshold = 0.3) {
  return filter_nonvisual(candidate, embed_shots(video, store), enc, threshold);
}

/// Every shot of the video whose cosine with the reference shot exceeds the
/// threshold, in video order; the reference itself is always included.
inline std::vector<std::size_t> expand_instance_shots(std::size_t reference,
                                                      std::span<const Vector> shot_embeddings,
                                                      double threshold = 0.9) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < shot_embeddings.size(); ++i) {
    if (i == reference || cosine(shot_embeddings[reference], shot_embeddings[i]) > threshold) {
      out.push_back(i);
    }
  }
  return out;
}

inline std::vector<std::string> expand_instance_shots(const InstanceRecord& record,
                                                      const TranscriptedVideo& video,
                                                      const EmbeddingStore& store,
                                                      double threshold = 0.9) {
  const auto ref = video.shot_index(record.reference_shot);
  if (!ref) throw Error(ErrorCode::kInvalidArgument, "reference shot not in video");
  std::vector<std::string> ids;
  for (auto i : expand_instance_shots(*ref, embed_shots(video, store), threshold)) {
    ids.push_back(video.shots[i].id);
  }
  return ids;
}

// ---------------------------------------------------------------------------

struct MiningConfig {
  double theta_vis = 0.3;
  double theta_exp = 0.9;
  unsigned threads = 1;
};

struct MiningReject {
  std::string instance_id;
  std::string video_id;
  std::string name;
  std::string reason;
  double score = 0.0;
};

inline void to_json(json& j, const MiningReject& r) {
  j = json{{"instance_id", r.instance_id}, {"video_id", r.video_id}, {"name", r.name},
           {"rejected", true}, {"reason", r.reason}, {"score", r.score}};
}

struct MiningResult {
  std::vector<InstanceRecord> records;
  std::vector<MiningReject> rejects;
};

inline std::string instance_id_for(const std::string& video_id, std::size_t match_index) {
  return video_id + "#" + std::to_string(match_index);
}

inline MiningResult mine_video(const TranscriptedVideo& video, const ReferenceTextEncoder& enc,
                               const EmbeddingStore& store, const MiningConfig& cfg) {
  MiningResult out;
  const auto candidates = spot_instances(video);
  if (candidates.empty()) return out;
  const auto shots = embed_shots(video, store);
  for (const auto& c : candidates) {
    const auto id = instance_id_for(video.video_id, c.match_index);
    auto reject = [&](std::string_view reason, double score) {
      out.rejects.push_back({id, video.video_id, join_words(c.name), std::string(reason), score});
    };
    FilterOutcome f;
    try {
      f = filter_nonvisual(c, shots, enc, cfg.theta_vis);
    } catch (const Error& e) {
      reject(e.code_name(), 0.0);
      continue;
    }
    if (!f.accepted) {
      reject("NON_VISUAL", f.best_score);
      continue;
    }
    std::vector<std::string> name;
    try {
      name = truncate_name(c.name, shots[f.reference], enc, cfg.theta_vis);
    } catch (const Error& e) {
      reject(e.code_name(), f.best_score);
      continue;
    }
    InstanceRecord r;
    r.instance_id = id;
    r.name = join_words(name);
    r.video_id = video.video_id;
    r.reference_shot = video.shots[f.reference].id;
    r.mention_time = c.mention_time;
    for (auto i : expand_instance_shots(f.reference, shots, cfg.theta_exp)) r.shots.push_back(video.shots[i].id);
    out.records.push_back(std::move(r));
  }
  return out;
}

/// Runs the three mining steps over every video. Videos are independent and
/// may be processed on several threads; output is sorted by instance id.
inline MiningResult mine_corpus(const std::vector<TranscriptedVideo>& videos,
                                const ReferenceTextEncoder& enc, const EmbeddingStore& store,
                                const MiningConfig& cfg = {}) {
  std::vector<MiningResult> per_video(videos.size());
  parallel_for(videos.size(), cfg.threads,
               [&](std::size_t i) { per_video[i] = mine_video(videos[i], enc, store, cfg); });
  MiningResult out;
  for (auto& r : per_video) {
    std::move(r.records.begin(), r.records.end(), std::back_inserter(out.records));
    std::move(r.rejects.begin(), r.rejects.end(), std::back_inserter(out.rejects));
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const auto& a, const auto& b) { return a.instance_id < b.instance_id; });
  std::sort(out.rejects.begin(), out.rejects.end(),
            [](const auto& a, const auto& b) { return a.instance_id < b.instance_id; });
  return out;
}

}  // namespace metaper
