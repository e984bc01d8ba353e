// metaper command-line front end: synth, mine, meta-personalize, personalize,
// query, evaluate, gradcheck and validate.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metaper/config.hpp"
#include "metaper/gradcheck.hpp"
#include "metaper/logging.hpp"
#include "metaper/pipeline.hpp"
#include "metaper/synthworld.hpp"

namespace fs = std::filesystem;
using namespace metaper;

namespace {

struct Overrides {
  std::optional<double> lambda, lambda_c, theta_vis, theta_exp, lr_max;
  std::optional<std::size_t> q, n_w, rounds, instances_per_category, distractors, extra_per_category, k_shots;
  std::optional<std::size_t> epochs, batch, meta_epochs, meta_batch, test_epochs, test_batch;
  std::optional<std::string> ablation;
  bool vl_exclude_self = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_seeds;
  std::optional<std::size_t> recall_k;
};

struct Globals {
  std::string config_path;
  std::optional<unsigned> threads;
  std::string log_level = "warn";
};

enum class EpochTarget { kNone, kMeta, kTest };

void add_training_flags(CLI::App* cmd, Overrides& o, EpochTarget target) {
  cmd->add_option("--q", o.q, "category features per category");
  cmd->add_option("--nw", o.n_w, "instance tokens per instance");
  cmd->add_option("--lambda", o.lambda, "similarity temperature");
  cmd->add_option("--lambda-c", o.lambda_c, "category loss weight");
  cmd->add_option("--lr-max", o.lr_max, "peak learning rate");
  cmd->add_option("--ablation", o.ablation, "none | a | b | c | d | e | f");
  cmd->add_flag("--vl-exclude-self", o.vl_exclude_self, "drop i=j pairs from the vision-language loss");
  if (target == EpochTarget::kMeta) {
    cmd->add_option("--rounds", o.rounds, "meta-personalization rounds");
    cmd->add_option("--instances-per-cat", o.instances_per_category, "instances per category per round");
    cmd->add_option("--epochs", o.epochs, "epochs per round");
    cmd->add_option("--batch", o.batch, "batch size");
  } else if (target == EpochTarget::kTest) {
    cmd->add_option("--epochs", o.epochs, "test-time epochs");
    cmd->add_option("--batch", o.batch, "batch size");
    cmd->add_option("--distractors", o.distractors, "distractor shots per iteration");
    cmd->add_option("--extra-per-cat", o.extra_per_category, "meta instances per category mixed in");
    cmd->add_option("--k-shots", o.k_shots, "training shots per personal instance (0 = all)");
  } else {
    cmd->add_option("--rounds", o.rounds, "meta-personalization rounds");
    cmd->add_option("--instances-per-cat", o.instances_per_category, "instances per category per round");
    cmd->add_option("--meta-epochs", o.meta_epochs, "epochs per meta round");
    cmd->add_option("--meta-batch", o.meta_batch, "meta batch size");
    cmd->add_option("--test-epochs", o.test_epochs, "test-time epochs");
    cmd->add_option("--test-batch", o.test_batch, "test-time batch size");
    cmd->add_option("--distractors", o.distractors, "distractor shots per iteration");
    cmd->add_option("--extra-per-cat", o.extra_per_category, "meta instances per category mixed in");
    cmd->add_option("--k-shots", o.k_shots, "training shots per personal instance (0 = all)");
  }
}

void add_mining_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--theta-vis", o.theta_vis, "visual relevance threshold");
  cmd->add_option("--theta-exp", o.theta_exp, "shot expansion threshold");
}

/// Defaults, then the config file, then command-line flags.
RunConfig effective_config(const Globals& g, const Overrides& o, EpochTarget target) {
  RunConfig cfg;
  if (!g.config_path.empty()) cfg = load_config(g.config_path);
  auto& t = cfg.training;
  auto set = [](auto& field, const auto& value) {
    if (value) field = *value;
  };
  set(t.lambda, o.lambda);
  set(t.lambda_c, o.lambda_c);
  set(t.lr_max, o.lr_max);
  set(t.q, o.q);
  set(t.n_w, o.n_w);
  set(t.rounds, o.rounds);
  set(t.instances_per_category, o.instances_per_category);
  set(t.distractors, o.distractors);
  set(t.extra_per_category, o.extra_per_category);
  set(t.k_shots, o.k_shots);
  set(t.meta_epochs, o.meta_epochs);
  set(t.meta_batch, o.meta_batch);
  set(t.test_epochs, o.test_epochs);
  set(t.test_batch, o.test_batch);
  if (target == EpochTarget::kMeta) {
    set(t.meta_epochs, o.epochs);
    set(t.meta_batch, o.batch);
  } else if (target == EpochTarget::kTest) {
    set(t.test_epochs, o.epochs);
    set(t.test_batch, o.batch);
  }
  if (o.ablation) t.ablation = parse_ablation(*o.ablation);
  if (o.vl_exclude_self) t.vl_exclude_self = true;
  set(cfg.mining.theta_vis, o.theta_vis);
  set(cfg.mining.theta_exp, o.theta_exp);
  set(cfg.recall_k, o.recall_k);
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.n_seeds) {
    if (*o.n_seeds == 0) throw Error(ErrorCode::kInvalidArgument, "--seeds must be >= 1");
    cfg.seeds.clear();
    for (std::size_t s = 0; s < *o.n_seeds; ++s) cfg.seeds.push_back(s);
  }
  if (g.threads) {
    cfg.threads = *g.threads;
  } else if (const char* env = std::getenv("METAPER_THREADS")) {
    try {
      cfg.threads = static_cast<unsigned>(std::stoul(env));
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, std::string("METAPER_THREADS is not a number: ") + env);
    }
  }
  if (cfg.threads == 0) cfg.threads = 1;
  cfg.mining.threads = cfg.threads;
  cfg.validate();
  return cfg;
}

class ManifestScope {
 public:
  ManifestScope(std::string command, const RunConfig& cfg) : start_(std::chrono::steady_clock::now()) {
    m_.command = std::move(command);
    m_.config = cfg.to_json();
    m_.config_hash = cfg.hash();
  }

  void input(const fs::path& p) { m_.add_input(p); }
  void output(const fs::path& p) { m_.add_output(p); }

  void write(const fs::path& path) {
    m_.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_file_atomic(path, m_.to_json().dump(2) + "\n");
  }

 private:
  RunManifest m_;
  std::chrono::steady_clock::time_point start_;
};

/// An explicit --tokens path, else the tokens.mptt written beside the store.
std::string tokens_path_for(const std::string& tokens, const std::string& store) {
  return tokens.empty() ? (fs::path(store).parent_path() / "tokens.mptt").string() : tokens;
}

fs::path manifest_for(const fs::path& out) {
  auto p = out;
  p += ".manifest.json";
  return p;
}

/// Records with a category keep it; the rest get the zero-shot assignment.
std::vector<InstanceExamples> examples_for(const std::vector<InstanceRecord>& records,
                                           const std::vector<TranscriptedVideo>& videos,
                                           const EmbeddingStore& store, const ReferenceTextEncoder& enc,
                                           const std::vector<std::string>& categories) {
  auto examples = collect_examples(records, videos, store);
  const auto anchors = anchor_embeddings(categories, enc);
  for (auto& ex : examples) {
    if (ex.category.empty()) ex.category = assign_category(ex.shots, categories, anchors);
  }
  return examples;
}

std::string help_footer() {
  std::string out = "\nConfiguration keys (--config FILE, JSON object; CLI flags take precedence):\n";
  const json defaults = RunConfig{}.to_json();
  for (const auto& [key, desc] : config_key_help()) {
    std::string value = defaults.at(key).dump();
    if (value.size() > 48) value = value.substr(0, 45) + "...";
    out += "  " + key + std::string(key.size() < 24 ? 24 - key.size() : 1, ' ') + "default " + value + "\n";
    out += std::string(26, ' ') + desc + "\n";
  }
  out += "\nEnvironment: METAPER_THREADS is used when --threads is not given.\n";
  return out;
}

void print_error(std::string_view code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaper: meta-personalized instance retrieval over transcripted video"};
  app.require_subcommand(1);
  app.footer(help_footer());
  app.set_version_flag("--version", std::string(kVersion));
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "worker threads for mining and scoring");
  app.add_option("--log-level", g.log_level, "debug | info | warn | error | off");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic world");
  std::string synth_spec, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec, "world spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  synth->add_option("--out-dir", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "overrides the spec seed");

  // mine
  auto* mine = app.add_subcommand("mine", "mine named instances from transcripted videos");
  Overrides mine_o;
  std::string mine_transcripts, mine_store, mine_tokens, mine_out, mine_rejects;
  mine->add_option("--transcripts", mine_transcripts, "transcript JSONL")->required();
  mine->add_option("--store", mine_store, "frame embedding store (.mpes)")->required();
  mine->add_option("--tokens", mine_tokens, "token table (default: tokens.mptt beside the store)");
  mine->add_option("--out", mine_out, "instance dataset JSONL")->required();
  mine->add_option("--rejects", mine_rejects, "rejected candidates JSONL (default <out>.rejects.jsonl)");
  add_mining_flags(mine, mine_o);

  // meta-personalize
  auto* meta = app.add_subcommand("meta-personalize", "learn category features from a mined dataset");
  Overrides meta_o;
  std::string meta_dataset, meta_transcripts, meta_store, meta_tokens, meta_out;
  meta->add_option("--dataset", meta_dataset, "instance dataset JSONL")->required();
  meta->add_option("--transcripts", meta_transcripts, "transcript JSONL of the dataset videos")->required();
  meta->add_option("--store", meta_store, "frame embedding store")->required();
  meta->add_option("--tokens", meta_tokens, "token table (default: tokens.mptt beside the store)");
  meta->add_option("--out", meta_out, "output model file (bank only)")->required();
  meta->add_option("--seed", meta_o.seed, "training seed");
  add_training_flags(meta, meta_o, EpochTarget::kMeta);

  // personalize
  auto* pers = app.add_subcommand("personalize", "learn instance tokens for a personal dataset");
  Overrides pers_o;
  std::string pers_dataset, pers_transcripts, pers_store, pers_tokens, pers_out, pers_bank, pers_extra,
      pers_extra_transcripts;
  pers->add_option("--dataset", pers_dataset, "personal instance dataset JSONL")->required();
  pers->add_option("--transcripts", pers_transcripts, "transcript JSONL of the personal videos")->required();
  pers->add_option("--store", pers_store, "frame embedding store")->required();
  pers->add_option("--tokens", pers_tokens, "token table (default: tokens.mptt beside the store)");
  pers->add_option("--bank", pers_bank, "meta-personalized model file (fresh bank when omitted)");
  pers->add_option("--extra-dataset", pers_extra, "meta dataset for extra same-category instances");
  pers->add_option("--extra-transcripts", pers_extra_transcripts, "transcripts of the extra dataset");
  pers->add_option("--out", pers_out, "output model file")->required();
  pers->add_option("--seed", pers_o.seed, "training seed");
  add_training_flags(pers, pers_o, EpochTarget::kTest);

  // query
  auto* query = app.add_subcommand("query", "rank corpus shots for one personalized prompt");
  std::string q_model, q_store, q_tokens, q_prompt, q_instance, q_transcripts, q_manifest, q_out;
  std::size_t q_topk = 10;
  query->add_option("--model", q_model, "personalized model file")->required();
  query->add_option("--store", q_store, "frame embedding store");
  query->add_option("--tokens", q_tokens, "token table (default: tokens.mptt beside the store)");
  query->add_option("--transcripts", q_transcripts, "corpus transcript JSONL");
  query->add_option("--manifest", q_manifest,
                    "evaluation manifest defining the corpus (default: eval_manifest.json beside the store)");
  query->add_option("--prompt", q_prompt, "prompt with one '*' placeholder")->required();
  query->add_option("--instance", q_instance, "instance id")->required();
  query->add_option("--topk", q_topk, "results to print");
  query->add_option("--out", q_out, "write the ranking JSON here as well");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "evaluate retrieval against labelled queries");
  Overrides eval_o;
  std::string e_model, e_queries, e_manifest, e_out;
  std::vector<std::string> e_methods;
  eval->add_option("--model", e_model, "evaluate this model instead of training per seed");
  eval->add_option("--queries", e_queries, "query JSONL")->required();
  eval->add_option("--manifest", e_manifest, "evaluation manifest")->required();
  eval->add_option("--seeds", eval_o.n_seeds, "number of seeds (0..N-1)");
  eval->add_option("--out", e_out, "report JSON path");
  eval->add_option("--recall-k", eval_o.recall_k, "K of recall@K");
  eval->add_option("--methods", e_methods, "personalized, language, visual, visual+language");
  add_training_flags(eval, eval_o, EpochTarget::kNone);
  add_mining_flags(eval, eval_o);

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the loss gradients");
  std::vector<std::uint64_t> gc_seeds{1, 2, 3};
  double gc_tol = 1e-4;
  grad->add_option("--seeds", gc_seeds, "problem seeds");
  grad->add_option("--tolerance", gc_tol, "maximum relative error");

  // validate
  auto* val = app.add_subcommand("validate", "check file framing, CRCs, schemas and cross-file consistency");
  std::vector<std::string> val_paths;
  bool val_strict = false;
  val->add_option("paths", val_paths, "files to check")->required();
  val->add_flag("--strict", val_strict, "exit non-zero when any check fails");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    set_log_level(parse_log_level(g.log_level));

    if (*synth) {
      WorldSpec spec;
      if (!synth_spec.empty()) {
        try {
          from_json(json::parse(read_file(synth_spec)), spec);
        } catch (const json::parse_error& e) {
          throw Error(ErrorCode::kSchema, synth_spec + ": " + e.what());
        }
      }
      if (synth_seed) spec.seed = *synth_seed;
      const RunConfig cfg = effective_config(g, {}, EpochTarget::kNone);
      ManifestScope man("synth", cfg);
      if (!synth_spec.empty()) man.input(synth_spec);
      const World world = generate_world(spec);
      const fs::path dir = synth_out;
      world.write(dir);
      for (const auto* f : {"tokens.mptt", "store.mpes", "meta_videos.jsonl", "personal_videos.jsonl", "queries.jsonl",
                            "eval_manifest.json", "truth.json", "world.json"}) {
        man.output(dir / f);
      }
      man.write(dir / "manifest.json");
      std::cout << "world written to " << dir.string() << ": " << world.truth.instances.size() << " instances, "
                << world.queries.size() << " queries, " << world.store.count() << " frames\n";
      return 0;
    }

    if (*mine) {
      const RunConfig cfg = effective_config(g, mine_o, EpochTarget::kNone);
      ManifestScope man("mine", cfg);
      const auto store = load_store(mine_store);
      mine_tokens = tokens_path_for(mine_tokens, mine_store);
      const auto table = load_tokens(mine_tokens);
      const auto videos = load_transcripts(mine_transcripts);
      for (const auto& p : {mine_tokens, mine_store, mine_transcripts}) man.input(p);
      const ReferenceTextEncoder enc(table);
      check_dims(store, enc);
      auto result = mine_corpus(videos, enc, store, cfg.mining);
      auto examples = collect_examples(result.records, videos, store);
      assign_categories(examples, cfg.training.categories, enc);
      for (std::size_t i = 0; i < examples.size(); ++i) result.records[i].category = examples[i].category;
      const fs::path out = mine_out;
      const fs::path rejects = mine_rejects.empty() ? fs::path(mine_out + ".rejects.jsonl") : fs::path(mine_rejects);
      std::vector<json> reject_rows(result.rejects.begin(), result.rejects.end());
      write_file_atomic(out, dataset_to_jsonl(result.records));
      write_file_atomic(rejects, to_jsonl(reject_rows));
      man.output(out);
      man.output(rejects);
      man.write(manifest_for(out));
      std::cout << "mined " << result.records.size() << " instances from " << videos.size() << " videos ("
                << result.rejects.size() << " rejected candidates)\n";
      return 0;
    }

    if (*meta) {
      const RunConfig cfg = effective_config(g, meta_o, EpochTarget::kMeta);
      ManifestScope man("meta-personalize", cfg);
      const auto store = load_store(meta_store);
      meta_tokens = tokens_path_for(meta_tokens, meta_store);
      const auto table = load_tokens(meta_tokens);
      const auto videos = load_transcripts(meta_transcripts);
      const auto records = parse_dataset(read_file(meta_dataset));
      for (const auto& p : {meta_tokens, meta_store, meta_transcripts, meta_dataset}) man.input(p);
      const ReferenceTextEncoder enc(table);
      check_dims(store, enc);
      const auto examples = examples_for(records, videos, store, enc, cfg.training.categories);
      const std::uint64_t seed = cfg.seeds.front();
      PersonalizedModel model;
      model.bank = initial_bank(enc.dim(), cfg.training, seed);
      if (cfg.training.ablation == Ablation::kNoMeta || cfg.training.ablation == Ablation::kRandomC) {
        log_info("meta-personalization skipped", {{"ablation", ablation_name(cfg.training.ablation)}});
      } else {
        model.bank = meta_personalize(examples, std::move(model.bank), enc, cfg.training, seed);
      }
      model.encoder_hash = enc.hash();
      model.config = cfg.training;
      const fs::path out = meta_out;
      write_file_atomic(out, model.serialize());
      man.output(out);
      man.write(manifest_for(out));
      std::cout << "category bank for " << model.bank.matrices().size() << " categories written to " << out.string()
                << " (bank hash " << hex64(model.bank.hash()) << ")\n";
      return 0;
    }

    if (*pers) {
      const RunConfig cfg = effective_config(g, pers_o, EpochTarget::kTest);
      ManifestScope man("personalize", cfg);
      const auto store = load_store(pers_store);
      pers_tokens = tokens_path_for(pers_tokens, pers_store);
      const auto table = load_tokens(pers_tokens);
      const auto videos = load_transcripts(pers_transcripts);
      const auto records = parse_dataset(read_file(pers_dataset));
      for (const auto& p : {pers_tokens, pers_store, pers_transcripts, pers_dataset}) man.input(p);
      const ReferenceTextEncoder enc(table);
      check_dims(store, enc);
      const auto personal = examples_for(records, videos, store, enc, cfg.training.categories);
      std::vector<InstanceExamples> extra;
      if (!pers_extra.empty()) {
        if (pers_extra_transcripts.empty()) {
          throw Error(ErrorCode::kInvalidArgument, "--extra-dataset needs --extra-transcripts");
        }
        const auto extra_records = parse_dataset(read_file(pers_extra));
        const auto extra_videos = load_transcripts(pers_extra_transcripts);
        man.input(pers_extra);
        man.input(pers_extra_transcripts);
        extra = examples_for(extra_records, extra_videos, store, enc, cfg.training.categories);
      }
      const std::uint64_t seed = cfg.seeds.front();
      CategoryFeatureBank bank = initial_bank(enc.dim(), cfg.training, seed);
      if (!pers_bank.empty()) {
        const auto meta_model = load_model(pers_bank);
        check_encoder(meta_model, enc);
        man.input(pers_bank);
        bank = meta_model.bank;
      }
      const auto distractors = distractor_pool(videos, records, store);
      const auto model = test_time_personalize(personal, bank, extra, distractors, enc, cfg.training, seed);
      const fs::path out = pers_out;
      write_file_atomic(out, model.serialize());
      man.output(out);
      man.write(manifest_for(out));
      std::cout << "personalized " << model.instances.size() << " instances; model written to " << out.string()
                << "\n";
      return 0;
    }

    if (*query) {
      const RunConfig cfg = effective_config(g, {}, EpochTarget::kNone);
      std::vector<TranscriptedVideo> corpus_videos;
      std::set<std::string> exclude;
      fs::path store_path = q_store, tokens_path = q_tokens;
      if (q_manifest.empty() && q_transcripts.empty() && !q_store.empty()) {
        const auto beside = fs::path(q_store).parent_path() / "eval_manifest.json";
        if (fs::exists(beside)) q_manifest = beside.string();
      }
      if (!q_manifest.empty()) {
        const auto m = load_eval_manifest(q_manifest);
        for (const auto& t : m.transcripts) {
          auto v = load_transcripts(t);
          corpus_videos.insert(corpus_videos.end(), v.begin(), v.end());
        }
        exclude = m.exclude_shots;
        if (store_path.empty() && m.store) store_path = *m.store;
        if (tokens_path.empty() && m.tokens) tokens_path = *m.tokens;
      }
      if (!q_transcripts.empty()) {
        auto v = load_transcripts(q_transcripts);
        corpus_videos.insert(corpus_videos.end(), v.begin(), v.end());
      }
      if (store_path.empty()) throw Error(ErrorCode::kStoreNotFound, "no store given (--store or --manifest)");
      const auto store = load_store(store_path);
      if (tokens_path.empty()) tokens_path = tokens_path_for("", store_path.string());
      const auto model = load_model(q_model);
      const ReferenceTextEncoder enc(load_tokens(tokens_path));
      check_encoder(model, enc);
      check_dims(store, enc);
      if (corpus_videos.empty()) throw Error(ErrorCode::kEmptyCorpus, "no corpus (--transcripts or --manifest)");
      const auto corpus = build_corpus(corpus_videos, store, exclude);
      const auto tmpl = PromptTemplate::parse(q_prompt, enc.table());
      const auto v = model.query_embedding(tmpl, q_instance, enc);
      const auto ranked = rank_corpus(v, corpus, q_instance, cfg.threads);
      json rows = json::array();
      for (std::size_t i = 0; i < std::min(q_topk, ranked.ranking.size()); ++i) {
        rows.push_back({{"rank", i + 1}, {"shot", ranked.ranking[i].first}, {"score", ranked.ranking[i].second}});
        std::printf("%3zu  %-24s %.6f\n", i + 1, ranked.ranking[i].first.c_str(), ranked.ranking[i].second);
      }
      if (!q_out.empty()) {
        ManifestScope man("query", cfg);
        for (const auto& p : {fs::path(q_model), store_path, tokens_path}) man.input(p);
        const json out{{"instance", q_instance}, {"prompt", q_prompt}, {"results", rows}};
        write_file_atomic(q_out, out.dump(2) + "\n");
        man.output(q_out);
        man.write(manifest_for(q_out));
      }
      return 0;
    }

    if (*eval) {
      const RunConfig cfg = effective_config(g, eval_o, EpochTarget::kNone);
      ManifestScope man("evaluate", cfg);
      man.input(e_manifest);
      man.input(e_queries);
      EvaluationReport report;
      if (!e_model.empty()) {
        const auto m = load_eval_manifest(e_manifest);
        if (!m.store || !m.tokens) throw Error(ErrorCode::kSchema, "eval manifest needs training.store and training.tokens");
        const auto store = load_store(*m.store);
        const ReferenceTextEncoder enc(load_tokens(*m.tokens));
        const auto model = load_model(e_model);
        man.input(e_model);
        check_encoder(model, enc);
        check_dims(store, enc);
        std::vector<TranscriptedVideo> corpus_videos;
        for (const auto& t : m.transcripts) {
          auto v = load_transcripts(t);
          corpus_videos.insert(corpus_videos.end(), v.begin(), v.end());
        }
        std::map<std::string, InstanceExamples> training;
        if (m.personal_transcripts) {
          const auto videos = load_transcripts(*m.personal_transcripts);
          auto mined = mine_corpus(videos, enc, store, cfg.mining);
          auto examples = collect_examples(mined.records, videos, store);
          assign_categories(examples, cfg.training.categories, enc);
          for (auto& ex : examples) training.emplace(ex.id, std::move(ex));
        }
        const auto queries = parse_queries(read_file(e_queries));
        report = evaluate_model(model, enc, queries, build_corpus(corpus_videos, store, m.exclude_shots), training,
                                cfg.recall_k, cfg.threads);
      } else {
        const auto in = load_pipeline_inputs(e_manifest, e_queries);
        std::vector<QueryMethod> methods;
        for (const auto& s : e_methods) methods.push_back(parse_method(s));
        if (methods.empty()) {
          methods = {QueryMethod::kLanguage, QueryMethod::kVisual, QueryMethod::kVisionLanguage,
                     QueryMethod::kPersonalized};
        }
        report = run_pipeline(in, cfg, methods).report;
      }
      std::cout << report.to_table();
      if (!e_out.empty()) {
        write_file_atomic(e_out, report.to_json().dump(2) + "\n");
        man.output(e_out);
        man.write(manifest_for(e_out));
      }
      return 0;
    }

    if (*grad) {
      double worst = 0.0;
      json rows = json::array();
      for (auto seed : gc_seeds) {
        const auto r = run_gradcheck(seed);
        worst = std::max(worst, r.worst());
        rows.push_back({{"seed", seed},
                        {"L_l", r.loss_ll},
                        {"L_vl", r.loss_vl},
                        {"L_c", r.loss_cat},
                        {"total", r.total}});
        std::printf("seed %llu  L_l %.2e  L_vl %.2e  L_c %.2e  total %.2e\n", static_cast<unsigned long long>(seed),
                    r.loss_ll, r.loss_vl, r.loss_cat, r.total);
      }
      const bool ok = worst <= gc_tol;
      std::printf("max relative error %.3e (tolerance %.1e): %s\n", worst, gc_tol, ok ? "ok" : "FAILED");
      log_info("gradcheck", {{"results", rows}, {"worst", worst}});
      return ok ? 0 : 1;
    }

    if (*val) {
      std::vector<fs::path> paths(val_paths.begin(), val_paths.end());
      const json report = validate_inputs(paths);
      std::cout << report.dump(2) << "\n";
      return (val_strict && !report.at("ok").get<bool>()) ? 1 : 0;
    }
  } catch (const Error& e) {
    print_error(e.code_name(), e.detail());
    return 2;
  } catch (const std::exception& e) {
    print_error("INTERNAL", e.what());
    return 1;
  }
  return 0;
}
