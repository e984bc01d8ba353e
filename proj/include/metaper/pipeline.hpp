#pragma once

// Stage composition (mine → meta-personalize → personalize → evaluate),
// evaluation-manifest loading and input validation.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "metaper/config.hpp"
#include "metaper/encoders.hpp"
#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/logging.hpp"
#include "metaper/mining.hpp"
#include "metaper/personalization.hpp"
#include "metaper/retrieval.hpp"

namespace metaper {

namespace fs = std::filesystem;

inline TokenTable load_tokens(const fs::path& p) { return TokenTable::deserialize(read_file(p)); }

inline EmbeddingStore load_store(const fs::path& p) {
  return EmbeddingStore::deserialize(read_file(p, ErrorCode::kStoreNotFound));
}

inline std::vector<TranscriptedVideo> load_transcripts(const fs::path& p) {
  return parse_transcripts(read_file(p));
}

inline PersonalizedModel load_model(const fs::path& p) { return PersonalizedModel::deserialize(read_file(p)); }

/// Fails with ENCODER_MISMATCH when the model was trained against another
/// token table.
inline void check_encoder(const PersonalizedModel& model, const ReferenceTextEncoder& enc) {
  if (model.bank.d() != enc.dim()) {
    throw Error(ErrorCode::kDimMismatch, "model d=" + std::to_string(model.bank.d()) + " but token table d=" +
                                             std::to_string(enc.dim()));
  }
  if (model.encoder_hash != 0 && model.encoder_hash != enc.hash()) {
    throw Error(ErrorCode::kEncoderMismatch, "model was trained with token table " + hex64(model.encoder_hash) +
                                                 ", got " + hex64(enc.hash()));
  }
}

inline void check_dims(const EmbeddingStore& store, const ReferenceTextEncoder& enc) {
  if (store.count() > 0 && store.dim() != enc.dim()) {
    throw Error(ErrorCode::kDimMismatch, "store dim " + std::to_string(store.dim()) + " != token table dim " +
                                             std::to_string(enc.dim()));
  }
}

// ---------------------------------------------------------------------------
// Evaluation manifest

struct EvalManifest {
  std::vector<fs::path> transcripts;  // retrieval corpus videos
  std::set<std::string> exclude_shots;
  std::optional<fs::path> personal_transcripts;
  std::optional<fs::path> meta_transcripts;
  std::optional<fs::path> store;
  std::optional<fs::path> tokens;
};

inline EvalManifest load_eval_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  const std::string what = "eval manifest";
  EvalManifest m;
  for (const auto& t : require<std::vector<std::string>>(j, "transcripts", what)) m.transcripts.push_back(base / t);
  for (const auto& s : require<std::vector<std::string>>(j, "exclude_shots", what)) m.exclude_shots.insert(s);
  if (j.contains("training")) {
    const auto& t = j.at("training");
    auto opt = [&](const char* key, std::optional<fs::path>& out) {
      if (t.contains(key)) out = base / require<std::string>(t, key, what);
    };
    opt("personal_transcripts", m.personal_transcripts);
    opt("meta_transcripts", m.meta_transcripts);
    opt("store", m.store);
    opt("tokens", m.tokens);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineInputs {
  TokenTable table;
  EmbeddingStore store;
  std::vector<TranscriptedVideo> meta_videos;
  std::vector<TranscriptedVideo> personal_videos;
  std::vector<TranscriptedVideo> corpus_videos;
  std::set<std::string> exclude_shots;
  std::vector<QuerySpec> queries;
};

inline PipelineInputs load_pipeline_inputs(const fs::path& manifest_path, const fs::path& queries_path) {
  const auto m = load_eval_manifest(manifest_path);
  if (!m.personal_transcripts || !m.store || !m.tokens) {
    throw Error(ErrorCode::kSchema, "eval manifest needs a training block with personal_transcripts, store, tokens");
  }
  PipelineInputs in;
  in.table = load_tokens(*m.tokens);
  in.store = load_store(*m.store);
  in.personal_videos = load_transcripts(*m.personal_transcripts);
  if (m.meta_transcripts) in.meta_videos = load_transcripts(*m.meta_transcripts);
  for (const auto& t : m.transcripts) {
    auto v = load_transcripts(t);
    in.corpus_videos.insert(in.corpus_videos.end(), v.begin(), v.end());
  }
  in.exclude_shots = m.exclude_shots;
  in.queries = parse_queries(read_file(queries_path));
  return in;
}

struct SeedRun {
  std::uint64_t seed = 0;
  CategoryFeatureBank bank;
  PersonalizedModel model;
};

struct PipelineResult {
  MiningResult meta_mined;
  MiningResult personal_mined;
  std::vector<InstanceExamples> meta_examples;
  std::vector<InstanceExamples> personal_examples;
  std::vector<SeedRun> runs;
  EvaluationReport report;
};

/// Mines both corpora once, then per seed meta-personalizes (unless the
/// ablation removes it), personalizes the mined personal instances and
/// evaluates every query with the personalized model and the baselines.
inline PipelineResult run_pipeline(const PipelineInputs& in, const RunConfig& cfg,
                                   const std::vector<QueryMethod>& methods = {
                                       QueryMethod::kLanguage, QueryMethod::kVisual,
                                       QueryMethod::kVisionLanguage, QueryMethod::kPersonalized}) {
  cfg.validate();
  const ReferenceTextEncoder enc(in.table);
  check_dims(in.store, enc);
  PipelineResult out;
  out.meta_mined = mine_corpus(in.meta_videos, enc, in.store, cfg.mining);
  out.personal_mined = mine_corpus(in.personal_videos, enc, in.store, cfg.mining);
  log_info("mined", {{"meta_instances", out.meta_mined.records.size()},
                     {"personal_instances", out.personal_mined.records.size()}});
  out.meta_examples = collect_examples(out.meta_mined.records, in.meta_videos, in.store);
  out.personal_examples = collect_examples(out.personal_mined.records, in.personal_videos, in.store);
  assign_categories(out.meta_examples, cfg.training.categories, enc);
  assign_categories(out.personal_examples, cfg.training.categories, enc);
  for (std::size_t i = 0; i < out.meta_examples.size(); ++i) {
    out.meta_mined.records[i].category = out.meta_examples[i].category;
  }
  for (std::size_t i = 0; i < out.personal_examples.size(); ++i) {
    out.personal_mined.records[i].category = out.personal_examples[i].category;
  }
  const auto distractors = distractor_pool(in.personal_videos, out.personal_mined.records, in.store);
  const auto corpus = build_corpus(in.corpus_videos, in.store, in.exclude_shots);

  std::map<std::string, const InstanceExamples*> personal_by_id;
  for (const auto& ex : out.personal_examples) personal_by_id.emplace(ex.id, &ex);
  std::map<std::string, PromptTemplate> parsed;
  auto parse = [&](const std::string& prompt) -> const PromptTemplate& {
    auto it = parsed.find(prompt);
    if (it == parsed.end()) it = parsed.emplace(prompt, PromptTemplate::parse(prompt, enc.table())).first;
    return it->second;
  };
  auto instance_examples = [&](const std::string& id) -> const InstanceExamples& {
    auto it = personal_by_id.find(id);
    if (it == personal_by_id.end()) throw Error(ErrorCode::kUnknownInstance, "query names unmined instance '" + id + "'");
    return *it->second;
  };

  const auto& tc = cfg.training;
  const bool skip_meta = tc.ablation == Ablation::kNoMeta || tc.ablation == Ablation::kRandomC;
  if (skip_meta) log_info("meta-personalization skipped", {{"ablation", ablation_name(tc.ablation)}});
  out.report.k = cfg.recall_k;
  out.report.seeds = cfg.seeds;
  for (auto seed : cfg.seeds) {
    SeedRun run;
    run.seed = seed;
    run.bank = initial_bank(enc.dim(), tc, seed);
    if (!skip_meta) run.bank = meta_personalize(out.meta_examples, std::move(run.bank), enc, tc, seed);
    run.model = test_time_personalize(out.personal_examples, run.bank, out.meta_examples, distractors, enc, tc, seed);
    for (auto method : methods) {
      std::function<Vector(const QuerySpec&)> vec;
      if (method == QueryMethod::kPersonalized) {
        vec = [&](const QuerySpec& q) { return run.model.query_embedding(parse(q.prompt), q.instance_id, enc); };
      } else {
        vec = [&, method](const QuerySpec& q) {
          const auto& ex = instance_examples(q.instance_id);
          return baseline_embedding(method, ex.category, ex.shots, enc);
        };
      }
      for (auto kind : {QueryKind::kGeneric, QueryKind::kContextual}) {
        if (auto r = run_queries(in.queries, kind, vec, corpus, cfg.recall_k, cfg.threads)) {
          out.report.add(method, kind, std::move(*r));
        }
      }
    }
    log_info("seed done", {{"seed", seed}});
    out.runs.push_back(std::move(run));
  }
  return out;
}

/// Evaluates one fixed model (and the baselines, given the personal
/// training examples) on the manifest corpus.
inline EvaluationReport evaluate_model(const PersonalizedModel& model, const ReferenceTextEncoder& enc,
                                       const std::vector<QuerySpec>& queries, const Corpus& corpus,
                                       const std::map<std::string, InstanceExamples>& training,
                                       std::size_t k, unsigned threads) {
  EvaluationReport report;
  report.k = k;
  report.seeds = {0};
  std::map<std::string, PromptTemplate> parsed;
  for (auto method : {QueryMethod::kLanguage, QueryMethod::kVisual, QueryMethod::kVisionLanguage,
                      QueryMethod::kPersonalized}) {
    if (method != QueryMethod::kPersonalized && training.empty()) continue;
    std::function<Vector(const QuerySpec&)> vec;
    if (method == QueryMethod::kPersonalized) {
      vec = [&](const QuerySpec& q) {
        auto it = parsed.find(q.prompt);
        if (it == parsed.end()) it = parsed.emplace(q.prompt, PromptTemplate::parse(q.prompt, enc.table())).first;
        return model.query_embedding(it->second, q.instance_id, enc);
      };
    } else {
      vec = [&, method](const QuerySpec& q) {
        auto it = training.find(q.instance_id);
        if (it == training.end()) throw Error(ErrorCode::kUnknownInstance, "no training shots for '" + q.instance_id + "'");
        return baseline_embedding(method, it->second.category, it->second.shots, enc);
      };
    }
    for (auto kind : {QueryKind::kGeneric, QueryKind::kContextual}) {
      if (auto r = run_queries(queries, kind, vec, corpus, k, threads)) report.add(method, kind, std::move(*r));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Validation

namespace detail {

struct FileCheck {
  std::string path;
  std::string kind;
  bool ok = true;
  std::string code;
  std::string detail;
  json info = json::object();
};

inline std::string sniff_kind(const fs::path& p, std::string_view bytes) {
  if (bytes.substr(0, 4) == "MPES") return "store";
  if (bytes.substr(0, 4) == "MPTT") return "tokens";
  if (bytes.substr(0, 4) == "MPMD") return "model";
  const auto ext = p.extension().string();
  if (ext == ".mpes") return "store";
  if (ext == ".mptt") return "tokens";
  if (ext == ".mpmd") return "model";
  if (ext == ".jsonl") {
    for (const auto& row : parse_jsonl(bytes, p.string())) {
      if (row.contains("words") && row.contains("shots")) return "transcripts";
      if (row.contains("query_id")) return "queries";
      if (row.contains("instance_id")) return "dataset";
      break;
    }
    return "jsonl";
  }
  if (ext == ".json") return "json";
  return "unknown";
}

}  // namespace detail

/// Checks magic bytes, checksums, schemas and cross-file consistency
/// (dimensions, encoder hashes, frame references). Never modifies inputs.
inline json validate_inputs(const std::vector<fs::path>& paths) {
  std::vector<detail::FileCheck> files;
  std::optional<TokenTable> tokens;
  std::vector<std::pair<std::string, EmbeddingStore>> stores;
  std::vector<std::pair<std::string, PersonalizedModel>> models;
  std::vector<std::pair<std::string, std::vector<TranscriptedVideo>>> transcripts;
  std::string tokens_path;
  for (const auto& p : paths) {
    detail::FileCheck fc;
    fc.path = p.string();
    try {
      const auto bytes = read_file(p, p.extension() == ".mpes" ? ErrorCode::kStoreNotFound : ErrorCode::kFileNotFound);
      fc.kind = detail::sniff_kind(p, bytes);
      if (fc.kind == "store") {
        auto s = EmbeddingStore::deserialize(bytes);
        fc.info = {{"dim", s.dim()}, {"count", s.count()}};
        stores.emplace_back(fc.path, std::move(s));
      } else if (fc.kind == "tokens") {
        auto t = TokenTable::deserialize(bytes);
        fc.info = {{"dim", t.dim()}, {"vocab", t.vocab_size()}, {"max_len", t.max_len()}};
        tokens = std::move(t);
        tokens_path = fc.path;
      } else if (fc.kind == "model") {
        auto m = PersonalizedModel::deserialize(bytes);
        fc.info = {{"d", m.bank.d()}, {"q", m.bank.q()}, {"instances", m.instances.size()}};
        models.emplace_back(fc.path, std::move(m));
      } else if (fc.kind == "transcripts") {
        auto v = parse_transcripts(bytes);
        for (const auto& video : v) video.validate();
        fc.info = {{"videos", v.size()}};
        transcripts.emplace_back(fc.path, std::move(v));
      } else if (fc.kind == "queries") {
        fc.info = {{"queries", parse_queries(bytes).size()}};
      } else if (fc.kind == "dataset") {
        fc.info = {{"instances", parse_dataset(bytes).size()}};
      } else if (fc.kind == "json") {
        const json parsed = json::parse(bytes);
        (void)parsed;
      } else {
        throw Error(ErrorCode::kSchema, "unrecognized file type");
      }
    } catch (const Error& e) {
      fc.ok = false;
      fc.code = e.code_name();
      fc.detail = e.detail();
    } catch (const json::exception& e) {
      fc.ok = false;
      fc.code = "SCHEMA";
      fc.detail = e.what();
    }
    files.push_back(std::move(fc));
  }

  json checks = json::array();
  auto check = [&](std::string name, bool ok, std::string code, std::string detail) {
    json c{{"check", std::move(name)}, {"ok", ok}};
    if (!ok) {
      c["code"] = std::move(code);
      c["detail"] = std::move(detail);
    }
    checks.push_back(std::move(c));
  };
  if (tokens) {
    for (const auto& [path, s] : stores) {
      check("dim " + path + " vs " + tokens_path, s.count() == 0 || s.dim() == tokens->dim(), "DIM_MISMATCH",
            "store dim " + std::to_string(s.dim()) + " != token dim " + std::to_string(tokens->dim()));
    }
    const auto token_hash = tokens->hash();
    for (const auto& [path, m] : models) {
      check("dim " + path + " vs " + tokens_path, m.bank.d() == tokens->dim(), "DIM_MISMATCH",
            "model d " + std::to_string(m.bank.d()) + " != token dim " + std::to_string(tokens->dim()));
      check("encoder " + path + " vs " + tokens_path, m.encoder_hash == 0 || m.encoder_hash == token_hash,
            "ENCODER_MISMATCH", "model encoder hash " + hex64(m.encoder_hash) + " != " + hex64(token_hash));
    }
  }
  for (std::size_t a = 0; a + 1 < stores.size(); ++a) {
    check("dim " + stores[a].first + " vs " + stores[a + 1].first, stores[a].second.dim() == stores[a + 1].second.dim(),
          "DIM_MISMATCH", "stores disagree on dim");
  }
  for (const auto& [tpath, videos] : transcripts) {
    for (const auto& [spath, s] : stores) {
      std::size_t missing = 0;
      std::string first;
      for (const auto& v : videos) {
        for (const auto& shot : v.shots) {
          for (const auto& f : shot.frames) {
            if (!s.contains(f)) {
              if (missing++ == 0) first = f;
            }
          }
        }
      }
      check("frames " + tpath + " in " + spath, missing == 0, "MISSING_FRAME",
            std::to_string(missing) + " frame ids missing, first '" + first + "'");
    }
  }

  bool ok = true;
  json jf = json::array();
  for (const auto& f : files) {
    ok = ok && f.ok;
    json row{{"path", f.path}, {"kind", f.kind}, {"ok", f.ok}, {"info", f.info}};
    if (!f.ok) {
      row["code"] = f.code;
      row["detail"] = f.detail;
    }
    jf.push_back(std::move(row));
  }
  for (const auto& c : checks) ok = ok && c.at("ok").get<bool>();
  return json{{"ok", ok}, {"files", jf}, {"checks", checks}};
}

}  // namespace metaper
