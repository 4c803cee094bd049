#pragma once

// Config loading and stage orchestration: preprocess, synthesize, tokenize,
// schedule, verify-kernels, evaluate and cost, each writing its outputs and
// a manifest under the run's output directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "iplm/align.hpp"
#include "iplm/corpus.hpp"
#include "iplm/error.hpp"
#include "iplm/evalharness.hpp"
#include "iplm/infercost.hpp"
#include "iplm/preprocess.hpp"
#include "iplm/scheduler.hpp"
#include "iplm/synthesize.hpp"
#include "iplm/text.hpp"
#include "iplm/tokenizer.hpp"
#include "iplm/transport.hpp"

namespace iplm::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

// --- config ----------------------------------------------------------------------

struct TokenizerTargets {
  std::size_t base_new_tokens = 512;
  std::size_t learned_new_tokens = 256;
  std::optional<std::size_t> max_novel;
  std::size_t min_frequency = 2;
};

struct ScheduleSettings {
  sched::Profile profile = sched::Profile::none;
  sched::StageConfig stage1;
  sched::StageConfig stage2;
  std::uint64_t batch_token_budget1 = 0;
  std::uint64_t batch_token_budget2 = 0;
  tok::TokenId separator_id = 0;
  bool present = false;
};

struct KernelSettings {
  std::size_t grad_check_params = 50;
  double tolerance = 1e-4;
  align::TokenId sft_separator_id = 3;
};

struct EvalSettings {
  std::vector<eval::Task> tasks;
  std::string judge_endpoint;
  double tie_delta = 0.5;
  std::size_t judge_workers = 4;
  double judge_rate = 0.0;
  std::string model = "candidate";
  std::string baseline_model = "baseline";
};

struct CostSettings {
  std::vector<std::string> presets;
  std::vector<std::uint64_t> seq_lens = {1024, 2048, 4096, 8192, 16384};
  double device_flops = 3.12e14;
};

struct PipelineConfig {
  fs::path config_path;
  std::uint64_t seed = 0;
  std::map<std::string, fs::path> paths;  // documents, patents, wrappers, eval, predictions, ...
  fs::path output_dir;
  preprocess::FilterRuleSet filter;
  preprocess::MinHashConfig minhash;
  std::vector<preprocess::RewriteStyle> rewrite_styles;
  std::string rewrite_endpoint;
  TokenizerTargets tokenizer;
  ScheduleSettings schedule;
  align::PpoConfig ppo;
  KernelSettings kernels;
  EvalSettings eval;
  CostSettings cost;
  std::string hash;  // of the config file contents plus the effective seed
};

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out, std::vector<std::string>& errs, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    errs.push_back(where + "." + key + ": wrong type");
  }
}

inline sched::StageConfig read_stage(const json& j, sched::Stage stage, std::vector<std::string>& errs,
                                     std::uint64_t& batch_budget) {
  const std::string where = "schedule." + std::string(to_string(stage));
  sched::StageConfig c;
  c.stage = stage;
  read_opt(j, "token_budget", c.token_budget, errs, where);
  read_opt(j, "context_length", c.context_length, errs, where);
  read_opt(j, "warmup_steps", c.warmup_steps, errs, where);
  read_opt(j, "peak_lr", c.peak_lr, errs, where);
  read_opt(j, "final_lr_fraction", c.final_lr_fraction, errs, where);
  read_opt(j, "batch_token_budget", batch_budget, errs, where);
  if (j.contains("category_proportions")) {
    for (const auto& [name, v] : j.at("category_proportions").items()) {
      const auto cat = parse_category(name);
      if (cat == Category::Unknown) {
        errs.push_back(where + ".category_proportions." + name + ": unknown category");
        continue;
      }
      if (!v.is_number()) {
        errs.push_back(where + ".category_proportions." + name + ": not a number");
        continue;
      }
      c.category_proportions[cat] = v.get<double>();
    }
  }
  for (auto& e : sched::validate(c)) errs.push_back("schedule." + e);
  if (batch_budget == 0 || batch_budget % c.context_length != 0)
    errs.push_back(where + ".batch_token_budget: must be a positive multiple of context_length");
  return c;
}

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

inline std::string upper(std::string s) {
  for (auto& c : s)
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  return s;
}

}  // namespace detail

// Reads and validates a JSON config. Relative paths resolve against the
// config file's directory. IPLM_<PATHKEY> (e.g. IPLM_OUTPUT_DIR,
// IPLM_DOCUMENTS) and IPLM_{JUDGE,REWRITE}_ENDPOINT override the file.
inline PipelineConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config_unreadable", "cannot read config " + path.string());
  std::stringstream raw;
  raw << in.rdbuf();
  json j;
  try {
    j = json::parse(raw.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config_malformed", path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config_malformed", "config root must be an object");

  std::vector<std::string> errs;
  PipelineConfig c;
  c.config_path = path;
  const fs::path base = fs::absolute(path).parent_path();
  detail::read_opt(j, "seed", c.seed, errs, "root");
  if (seed_override) c.seed = *seed_override;

  const json paths = j.value("paths", json::object());
  for (const auto& [key, v] : paths.items()) {
    if (!v.is_string()) {
      errs.push_back("paths." + key + ": must be a string");
      continue;
    }
    fs::path p = detail::env_or(("IPLM_" + detail::upper(key)).c_str(), v.get<std::string>());
    c.paths[key] = p.is_absolute() ? p : base / p;
  }
  if (const char* o = std::getenv("IPLM_OUTPUT_DIR"); o && *o) c.paths["output_dir"] = fs::path(o).is_absolute() ? fs::path(o) : fs::absolute(o);
  if (!c.paths.count("output_dir")) errs.emplace_back("paths.output_dir: required");
  else c.output_dir = c.paths.at("output_dir");
  for (const auto& [key, p] : c.paths) {
    if (key == "output_dir") continue;
    if (!fs::exists(p)) errs.push_back("paths." + key + ": " + p.string() + " does not exist");
  }

  const json filter = j.value("filter", json::object());
  detail::read_opt(filter, "blacklist", c.filter.blacklist_keywords, errs, "filter");
  detail::read_opt(filter, "whitelist", c.filter.whitelist_keywords, errs, "filter");
  detail::read_opt(filter, "min_length_chars", c.filter.min_length_chars, errs, "filter");
  detail::read_opt(filter, "max_symbol_ratio", c.filter.max_symbol_ratio, errs, "filter");
  for (auto& e : preprocess::validate(c.filter)) errs.push_back(std::move(e));

  const json mh = j.value("minhash", json::object());
  c.minhash.seed = text::derive_seed(c.seed, "minhash");
  detail::read_opt(mh, "num_permutations", c.minhash.num_permutations, errs, "minhash");
  detail::read_opt(mh, "shingle_size_chars", c.minhash.shingle_size_chars, errs, "minhash");
  detail::read_opt(mh, "lsh_bands", c.minhash.lsh_bands, errs, "minhash");
  detail::read_opt(mh, "lsh_rows", c.minhash.lsh_rows, errs, "minhash");
  detail::read_opt(mh, "jaccard_threshold", c.minhash.jaccard_threshold, errs, "minhash");
  for (auto& e : preprocess::validate(c.minhash)) errs.push_back(std::move(e));

  const json rw = j.value("rewrite", json::object());
  for (const auto& s : rw.value("styles", std::vector<std::string>{"summary", "conversation"})) {
    try {
      c.rewrite_styles.push_back(preprocess::parse_rewrite_style(s));
    } catch (const Error& e) {
      errs.push_back("rewrite.styles: " + std::string(e.what()));
    }
  }
  c.rewrite_endpoint = detail::env_or("IPLM_REWRITE_ENDPOINT", rw.value("endpoint", ""));

  const json tk = j.value("tokenizer", json::object());
  detail::read_opt(tk, "base_new_tokens", c.tokenizer.base_new_tokens, errs, "tokenizer");
  detail::read_opt(tk, "learned_new_tokens", c.tokenizer.learned_new_tokens, errs, "tokenizer");
  detail::read_opt(tk, "min_frequency", c.tokenizer.min_frequency, errs, "tokenizer");
  if (tk.contains("max_novel") && !tk.at("max_novel").is_null()) {
    std::size_t v = 0;
    detail::read_opt(tk, "max_novel", v, errs, "tokenizer");
    c.tokenizer.max_novel = v;
  }

  const json sc = j.value("schedule", json::object());
  c.schedule.present = j.contains("schedule");
  const std::string profile = sc.value("profile", "none");
  if (profile == "paper_fig2") c.schedule.profile = sched::Profile::paper_fig2;
  else if (profile != "none") errs.push_back("schedule.profile: unknown profile '" + profile + "'");
  detail::read_opt(sc, "separator_id", c.schedule.separator_id, errs, "schedule");
  if (c.schedule.present) {
    c.schedule.stage1 =
        detail::read_stage(sc.value("stage1", json::object()), sched::Stage::stage1, errs, c.schedule.batch_token_budget1);
    c.schedule.stage2 =
        detail::read_stage(sc.value("stage2", json::object()), sched::Stage::stage2, errs, c.schedule.batch_token_budget2);
  }

  const json ppo = j.value("ppo", json::object());
  detail::read_opt(ppo, "kl_coeff", c.ppo.kl_coeff, errs, "ppo");
  detail::read_opt(ppo, "n_candidates", c.ppo.n_candidates, errs, "ppo");
  detail::read_opt(ppo, "clip_epsilon", c.ppo.clip_epsilon, errs, "ppo");
  detail::read_opt(ppo, "top_p", c.ppo.top_p, errs, "ppo");
  for (auto& e : align::validate(c.ppo)) errs.push_back(std::move(e));

  const json kn = j.value("kernels", json::object());
  detail::read_opt(kn, "grad_check_params", c.kernels.grad_check_params, errs, "kernels");
  detail::read_opt(kn, "tolerance", c.kernels.tolerance, errs, "kernels");
  detail::read_opt(kn, "sft_separator_id", c.kernels.sft_separator_id, errs, "kernels");

  const json ev = j.value("eval", json::object());
  for (const auto& t : ev.value("tasks", std::vector<std::string>{})) {
    try {
      c.eval.tasks.push_back(eval::parse_task(t));
    } catch (const Error&) {
      errs.push_back("eval.tasks: unknown task '" + t + "'");
    }
  }
  c.eval.judge_endpoint = detail::env_or("IPLM_JUDGE_ENDPOINT", ev.value("judge_endpoint", ""));
  detail::read_opt(ev, "tie_delta", c.eval.tie_delta, errs, "eval");
  detail::read_opt(ev, "judge_workers", c.eval.judge_workers, errs, "eval");
  detail::read_opt(ev, "judge_rate", c.eval.judge_rate, errs, "eval");
  detail::read_opt(ev, "model", c.eval.model, errs, "eval");
  detail::read_opt(ev, "baseline_model", c.eval.baseline_model, errs, "eval");

  const json cs = j.value("cost", json::object());
  detail::read_opt(cs, "presets", c.cost.presets, errs, "cost");
  detail::read_opt(cs, "seq_lens", c.cost.seq_lens, errs, "cost");
  detail::read_opt(cs, "device_flops", c.cost.device_flops, errs, "cost");
  if (c.cost.seq_lens.empty()) errs.emplace_back("cost.seq_lens: must be nonempty");
  if (!(c.cost.device_flops > 0.0)) errs.emplace_back("cost.device_flops: must be positive");

  if (!errs.empty()) {
    std::string msg;
    for (const auto& e : errs) msg += (msg.empty() ? "" : "\n") + e;
    throw ConfigError("invalid_config", msg);
  }
  c.hash = text::hex64(text::fnv1a64(raw.str() + "\nseed=" + std::to_string(c.seed)));
  return c;
}

// --- run plumbing ----------------------------------------------------------------

// Exclusive ownership of an output directory for one run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw Error("locked", "output directory " + dir.string() + " is in use (remove " + path_.string() + " if stale)");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

struct Manifest {
  std::string subcommand;
  std::string status = "ok";
  std::string error;
  ojson counts = ojson::object();
  ojson timings_ms = ojson::object();
};

inline void write_manifest(const PipelineConfig& cfg, const fs::path& dir, const Manifest& m) {
  ojson j;
  j["tool"] = "iplm";
  j["version"] = kToolVersion;
  j["subcommand"] = m.subcommand;
  j["config_hash"] = cfg.hash;
  j["seed"] = cfg.seed;
  j["status"] = m.status;
  if (!m.error.empty()) j["error"] = m.error;
  j["counts"] = m.counts;
  j["timings_ms"] = m.timings_ms;
  fs::create_directories(dir);
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
}

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write " + p.string());
  out << s;
}

inline const fs::path& require_path(const PipelineConfig& cfg, const std::string& key) {
  const auto it = cfg.paths.find(key);
  if (it == cfg.paths.end()) throw ConfigError("invalid_config", "paths." + key + ": required by this subcommand");
  return it->second;
}

inline std::vector<Document> load_docs_or_throw(const fs::path& p, std::vector<Rejection>* rejected = nullptr) {
  auto r = load_documents(p.string());
  if (rejected) *rejected = r.rejected;
  return std::move(r.records);
}

// --- stages ----------------------------------------------------------------------

inline void run_preprocess(const PipelineConfig& cfg, Manifest& m) {
  const fs::path dir = cfg.output_dir / "preprocess";
  fs::create_directories(dir);
  Timer t;
  std::vector<Rejection> rejected;
  const auto docs = load_docs_or_throw(require_path(cfg, "documents"), &rejected);
  m.timings_ms["load"] = t.ms();
  m.counts["input"] = docs.size();
  m.counts["rejected_records"] = rejected.size();

  Timer tf;
  const auto filtered = preprocess::filter_documents(docs, cfg.filter);
  m.timings_ms["filter"] = tf.ms();
  m.counts["filtered_out"] = filtered.removed.size();

  Timer te;
  const auto exact = preprocess::exact_dedup(filtered.kept);
  auto after_exact = preprocess::kept_documents(filtered.kept, exact);
  m.timings_ms["exact_dedup"] = te.ms();
  m.counts["exact_removed"] = exact.removed_ids.size();

  Timer tz;
  const auto fuzzy = preprocess::fuzzy_dedup(after_exact, cfg.minhash);
  auto kept = preprocess::kept_documents(after_exact, fuzzy);
  m.timings_ms["fuzzy_dedup"] = tz.ms();
  m.counts["fuzzy_removed"] = fuzzy.removed_ids.size();

  Timer tr;
  std::unique_ptr<preprocess::Rewriter> rewriter;
  if (cfg.rewrite_endpoint.empty()) {
    rewriter = std::make_unique<preprocess::TemplateRewriter>();
  } else {
    rewriter = std::make_unique<preprocess::TransportRewriter>(
        std::shared_ptr<JsonTransport>(make_http_transport(cfg.rewrite_endpoint)));
  }
  std::vector<Document> books;
  for (const auto& d : kept)
    if (d.category == Category::Book) books.push_back(d);
  const auto rewrites = preprocess::rewrite_upsample(books, cfg.rewrite_styles, *rewriter);
  m.timings_ms["rewrite"] = tr.ms();
  m.counts["rewritten"] = rewrites.new_docs.size();
  m.counts["rewrite_failures"] = rewrites.failures.size();
  kept.insert(kept.end(), rewrites.new_docs.begin(), rewrites.new_docs.end());
  m.counts["output"] = kept.size();

  write_jsonl((dir / "filtered.jsonl").string(), kept);
  std::vector<ojson> removed;
  for (const auto& r : filtered.removed) {
    ojson j;
    j["id"] = r.doc.id;
    j["reasons"] = r.reasons;
    removed.push_back(std::move(j));
  }
  write_json_lines((dir / "removed.jsonl").string(), removed);
  std::vector<ojson> rej;
  for (const auto& r : rejected) {
    ojson j;
    j["line"] = r.line;
    j["reason"] = r.reason;
    rej.push_back(std::move(j));
  }
  write_json_lines((dir / "rejected.jsonl").string(), rej);

  ojson report;
  for (const auto& [name, rep] : {std::pair<const char*, const preprocess::DedupReport*>{"exact", &exact}, {"fuzzy", &fuzzy}}) {
    ojson r;
    r["kept"] = rep->kept_ids.size();
    r["removed_ids"] = rep->removed_ids;
    r["skipped_short_ids"] = rep->skipped_short_ids;
    ojson clusters = ojson::array();
    for (const auto& c : rep->clusters) clusters.push_back(preprocess::to_json(c));
    r["clusters"] = std::move(clusters);
    report[name] = std::move(r);
  }
  write_text(dir / "dedup_report.json", report.dump(2) + "\n");
}

inline void run_synthesize(const PipelineConfig& cfg, Manifest& m) {
  const fs::path dir = cfg.output_dir / "synthesize";
  fs::create_directories(dir);
  Timer t;
  auto patents = load_patents(require_path(cfg, "patents").string());
  auto wrappers = load_wrappers(require_path(cfg, "wrappers").string());
  m.counts["patents"] = patents.records.size();
  m.counts["wrappers"] = wrappers.records.size();
  m.counts["rejected_records"] = patents.rejected.size() + wrappers.rejected.size();
  const synth::PatentIndex index(patents.records);
  const synth::TemplateStore templates =
      cfg.paths.count("templates") ? synth::TemplateStore(cfg.paths.at("templates")) : synth::TemplateStore();

  std::vector<synth::SyntheticDoc> concat, xconcat, instructions;
  std::vector<synth::XFilePair> pairs;
  std::vector<ojson> failures;
  for (const auto& w : wrappers.records) {
    try {
      const auto link = synth::link_wrapper(w, index);
      for (const auto& [number, res] : link.resolution)
        if (res == synth::Resolution::missing) spdlog::info("{}: cited {} not in the patent set", w.examined_patent_number, number);
      concat.push_back(synth::build_wrapper_concat(link));
      const auto found = synth::extract_xfile_pairs(link);
      pairs.insert(pairs.end(), found.begin(), found.end());
      for (const auto& cited : link.cited) {
        xconcat.push_back(synth::build_xfile_concat(link.examined, cited));
        std::vector<synth::XFilePair> sentence;
        for (const auto& p : found)
          if (p.level == synth::PairLevel::sentence && synth::same_patent(p.cited_pn, cited.patent_number)) sentence.push_back(p);
        if (!sentence.empty())
          instructions.push_back(synth::build_xfile_instruction(sentence, link.examined, cited, templates, "xfile_en"));
      }
    } catch (const Error& e) {
      ojson f;
      f["wrapper"] = w.examined_patent_number;
      f["code"] = e.code();
      f["message"] = e.what();
      failures.push_back(std::move(f));
    }
  }
  write_jsonl((dir / "wrapper_concat.jsonl").string(), concat);
  write_jsonl((dir / "xfile_concat.jsonl").string(), xconcat);
  write_jsonl((dir / "xfile_pairs.jsonl").string(), pairs);
  write_jsonl((dir / "xfile_instructions.jsonl").string(), instructions);
  write_json_lines((dir / "failures.jsonl").string(), failures);
  m.counts["wrapper_concat"] = concat.size();
  m.counts["xfile_concat"] = xconcat.size();
  m.counts["xfile_pairs"] = pairs.size();
  m.counts["xfile_instructions"] = instructions.size();
  m.counts["failures"] = failures.size();
  m.timings_ms["total"] = t.ms();
}

// Documents the later stages train on: preprocessed documents when present
// (raw documents otherwise) plus synthesized documents as FileWrapper data.
inline std::vector<Document> training_documents(const PipelineConfig& cfg) {
  const fs::path pre = cfg.output_dir / "preprocess" / "filtered.jsonl";
  std::vector<Document> docs = fs::exists(pre) ? load_docs_or_throw(pre) : load_docs_or_throw(require_path(cfg, "documents"));
  const fs::path sdir = cfg.output_dir / "synthesize";
  for (const char* name : {"wrapper_concat.jsonl", "xfile_concat.jsonl", "xfile_instructions.jsonl"}) {
    const fs::path p = sdir / name;
    if (!fs::exists(p)) continue;
    const auto lines = read_lines(p.string());
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (text::trim(lines[i]).empty()) continue;
      const auto j = json::parse(lines[i]);
      Document d;
      d.id = std::string("synth/") + name + "/" + std::to_string(i);
      d.text = j.at("text").get<std::string>();
      d.category = Category::FileWrapper;
      d.language = Language::Unknown;
      docs.push_back(std::move(d));
    }
  }
  return docs;
}

inline void run_tokenize(const PipelineConfig& cfg, Manifest& m) {
  const fs::path dir = cfg.output_dir / "tokenize";
  fs::create_directories(dir);
  const auto docs = training_documents(cfg);
  std::vector<std::string> en, zh;
  for (const auto& d : docs) (d.language == Language::zh ? zh : en).push_back(d.text);
  if (en.empty()) en = zh;
  tok::TrainOptions opt;
  opt.min_frequency = cfg.tokenizer.min_frequency;

  Timer tb;
  const auto base = tok::train_bpe(en, cfg.tokenizer.base_new_tokens, text::derive_seed(cfg.seed, "tokenizer/base"), opt);
  m.timings_ms["train_base"] = tb.ms();
  Timer tl;
  const auto learned = zh.empty() ? tok::Vocab::byte_level()
                                  : tok::train_bpe(zh, cfg.tokenizer.learned_new_tokens,
                                                   text::derive_seed(cfg.seed, "tokenizer/learned"), opt);
  m.timings_ms["train_learned"] = tl.ms();
  const auto merged = tok::merge_vocab(base, learned, cfg.tokenizer.max_novel);
  tok::save_vocab(base, dir / "base");
  tok::save_vocab(learned, dir / "learned");
  tok::save_vocab(merged, dir / "merged");

  const tok::Tokenizer tb_tok(base), tm_tok(merged);
  std::string zh_sample;
  for (const auto& s : zh) zh_sample += s + "\n";
  ojson stats;
  stats["base_size"] = base.size();
  stats["learned_size"] = learned.size();
  stats["merged_size"] = merged.size();
  stats["novel_tokens"] = tok::novel_token_count(base, merged);
  stats["zh_compression_ratio"] = tok::compression_ratio(zh_sample, tb_tok, tm_tok);
  write_text(dir / "stats.json", stats.dump(2) + "\n");
  m.counts["documents"] = docs.size();
  m.counts["merged_size"] = merged.size();
}

inline void run_schedule(const PipelineConfig& cfg, Manifest& m) {
  if (!cfg.schedule.present) throw ConfigError("invalid_config", "schedule: section required by this subcommand");
  const fs::path dir = cfg.output_dir / "schedule";
  fs::create_directories(dir);
  const fs::path vocab = cfg.output_dir / "tokenize" / "merged";
  if (!fs::exists(vocab.string() + ".tokens")) throw Error("missing_input", "run the tokenize stage first");
  const tok::Tokenizer tk(tok::load_vocab(vocab));
  const auto docs = training_documents(cfg);

  Timer te;
  std::map<std::string, std::vector<tok::TokenId>> encoded;
  std::vector<sched::IndexEntry> index;
  std::map<Category, std::uint64_t> totals;
  for (const auto& d : docs) {
    auto ids = tk.encode(d.text);
    const std::uint64_t n = ids.size() + 1;  // with separator
    index.push_back({d.id, d.category, n});
    totals[d.category] += n;
    encoded.emplace(d.id, std::move(ids));
  }
  m.timings_ms["encode"] = te.ms();
  ojson available;
  for (const auto& [cat, n] : totals) available[std::string(to_string(cat))] = n;
  m.counts["available_tokens"] = std::move(available);

  const auto plan = sched::plan_stages(totals, cfg.schedule.stage1, cfg.schedule.stage2, cfg.schedule.profile);
  const auto [s1, s2] = sched::sample_stages(plan, index, text::derive_seed(cfg.seed, "schedule"));
  sched::write_schedule_manifest(dir / "schedule.tsv", s1, s2);

  ojson plan_json;
  for (const auto& [name, q, s] : {std::tuple{"stage1", &plan.stage1, &s1}, std::tuple{"stage2", &plan.stage2, &s2}}) {
    ojson st;
    for (const auto& [cat, v] : *q) {
      ojson e;
      e["quota"] = v;
      e["realized"] = s->realized.count(cat) ? s->realized.at(cat) : 0;
      st[std::string(to_string(cat))] = std::move(e);
    }
    plan_json[name] = std::move(st);
  }
  ojson flags = ojson::array();
  for (const auto c : plan.not_upweighted) flags.push_back(std::string(to_string(c)));
  plan_json["not_upweighted"] = std::move(flags);
  write_text(dir / "plan.json", plan_json.dump(2) + "\n");

  for (const auto& [stage_cfg, sample, budget] :
       {std::tuple{&cfg.schedule.stage1, &s1, cfg.schedule.batch_token_budget1},
        std::tuple{&cfg.schedule.stage2, &s2, cfg.schedule.batch_token_budget2}}) {
    const std::string name(to_string(stage_cfg->stage));
    const fs::path sdir = dir / name;
    fs::create_directories(sdir);
    sched::BatchWriter writer(sdir);
    sched::SequencePacker packer(stage_cfg->context_length, budget, cfg.schedule.separator_id,
                                 [&](const sched::PackedBatch& b) { writer.write(b); });
    for (const auto& d : sample->stream) packer.push(d.id, encoded.at(d.id));
    const auto stats = packer.finish();
    m.counts[name + "_docs"] = sample->stream.size();
    m.counts[name + "_batches"] = stats.batches;
    m.counts[name + "_tokens_packed"] = stats.tokens_packed;
    m.counts[name + "_tokens_dropped_partial"] = stats.tokens_dropped_partial;

    std::ostringstream lr;
    lr.precision(17);
    lr << "step,lr\n";
    const std::uint64_t total = std::max<std::uint64_t>(stats.batches, stage_cfg->warmup_steps + 1);
    for (std::uint64_t s = 0; s <= total; ++s)
      lr << s << "," << sched::cosine_lr(s, total, stage_cfg->warmup_steps, stage_cfg->peak_lr, stage_cfg->final_lr_fraction) << "\n";
    write_text(sdir / "lr.csv", lr.str());
  }
}

struct KernelCheck {
  std::string name;
  double value = 0.0;
  double limit = 0.0;
  bool pass = false;
};

// Gradient checks for the SFT, ranking and PPO kernels plus closed-form
// identities.
inline std::vector<KernelCheck> verify_kernels(std::uint64_t seed, std::size_t params, double tol, align::TokenId sep) {
  using namespace align;
  std::vector<KernelCheck> out;
  auto add = [&](std::string name, double v, double limit) { out.push_back({std::move(name), v, limit, v < limit}); };

  for (const std::size_t layers : {std::size_t{1}, std::size_t{2}}) {
    for (const bool tied : {false, true}) {
      MicroConfig mc;
      mc.layers = layers;
      mc.tied_head = tied;
      const MicroModel model(mc, text::derive_seed(seed, "kernels/model"));
      std::mt19937_64 rng(text::derive_seed(seed, "kernels/data"));
      std::uniform_int_distribution<TokenId> tokd(4, static_cast<TokenId>(mc.vocab - 1));
      auto rand_seq = [&](std::size_t n) {
        std::vector<TokenId> v(n);
        for (auto& x : v) x = tokd(rng);
        return v;
      };
      const std::vector<SftSample> batch = {make_sft_sample(rand_seq(5), rand_seq(4), sep, Source::D_exp),
                                            make_sft_sample(rand_seq(3), rand_seq(6), sep, Source::D_gen)};
      const LossFn sft = [&](const std::vector<double>& th, std::vector<double>* g) {
        MicroModel mm = model;
        mm.params() = th;
        return sft_batch_loss(mm, batch, g);
      };
      const std::string tag = std::to_string(layers) + "layer" + (tied ? "_tied" : "_untied");
      add("sft_grad_" + tag, grad_check(sft, model.params(), params, text::derive_seed(seed, "kernels/gc")).max_rel_error, tol);

      const RewardHead head = RewardHead::random(mc.dim, 6, text::derive_seed(seed, "kernels/head"));
      const std::size_t np = model.params().size();
      const auto chosen = rand_seq(6);
      const auto rejected = rand_seq(4);
      const LossFn rank = [&](const std::vector<double>& th, std::vector<double>* g) {
        MicroModel mm = model;
        RewardHead hh = head;
        std::copy(th.begin(), th.begin() + static_cast<std::ptrdiff_t>(np), mm.params().begin());
        std::copy(th.begin() + static_cast<std::ptrdiff_t>(np), th.end(), hh.params().begin());
        return ranking_loss_under(mm, hh, chosen, rejected, 0, g);
      };
      std::vector<double> theta = model.params();
      theta.insert(theta.end(), head.params().begin(), head.params().end());
      add("ranking_grad_" + tag, grad_check(rank, theta, params, text::derive_seed(seed, "kernels/gc2")).max_rel_error, tol);
    }
  }

  const PpoConfig pc;
  std::mt19937_64 rng(text::derive_seed(seed, "kernels/ppo"));
  std::normal_distribution<double> nd(0.0, 0.3);
  std::vector<double> lo(8), la(8), lr(8), ln(8);
  for (std::size_t i = 0; i < 8; ++i) lo[i] = -1.0 + nd(rng), la[i] = nd(rng) * 3, lr[i] = lo[i] + nd(rng), ln[i] = lo[i] + nd(rng);
  const LossFn ppo = [&](const std::vector<double>& th, std::vector<double>* g) { return ppo_objective(th, lo, la, lr, pc, g); };
  add("ppo_grad", grad_check(ppo, ln, 8, text::derive_seed(seed, "kernels/gc3")).max_rel_error, tol);

  add("ranking_loss_at_zero", std::abs(ranking_loss(0.0, 0.0) - std::log(2.0)), 1e-12);
  double ident = 0.0;
  for (int k = -100; k <= 100; ++k) {
    const double d = k / 10.0;
    ident = std::max(ident, std::abs(ranking_loss(-d, 0.0) - (ranking_loss(d, 0.0) + d)));
  }
  add("ranking_identity", ident, 1e-9);
  return out;
}

inline void run_verify_kernels(const PipelineConfig& cfg, Manifest& m) {
  const fs::path dir = cfg.output_dir / "verify";
  Timer t;
  const auto checks = verify_kernels(text::derive_seed(cfg.seed, "verify"), cfg.kernels.grad_check_params,
                                     cfg.kernels.tolerance, cfg.kernels.sft_separator_id);
  ojson arr = ojson::array();
  std::size_t failed = 0;
  for (const auto& c : checks) {
    ojson j;
    j["check"] = c.name;
    j["value"] = c.value;
    j["limit"] = c.limit;
    j["pass"] = c.pass;
    arr.push_back(std::move(j));
    if (!c.pass) ++failed;
  }
  write_text(dir / "kernels.json", arr.dump(2) + "\n");
  m.counts["checks"] = checks.size();
  m.counts["failed"] = failed;
  m.timings_ms["total"] = t.ms();
  if (failed > 0) throw Error("kernel_check_failed", std::to_string(failed) + " kernel check(s) over tolerance");
}

// Predictions file lines: {"id": ..., "prediction": ...}.
inline std::map<std::string, std::string> load_predictions(const fs::path& p) {
  std::map<std::string, std::string> out;
  for (const auto& line : read_lines(p.string())) {
    if (text::trim(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      out[j.at("id").get<std::string>()] = j.at("prediction").get<std::string>();
    } catch (const json::exception& e) {
      throw Error("malformed", p.string() + ": " + e.what());
    }
  }
  return out;
}

inline std::string option_letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

inline void run_evaluate(const PipelineConfig& cfg, Manifest& m) {
  const fs::path dir = cfg.output_dir / "evaluate";
  fs::create_directories(dir);
  std::vector<eval::EvalInstance> instances;
  for (const auto& line : read_lines(require_path(cfg, "eval").string()))
    if (!text::trim(line).empty()) instances.push_back(eval::instance_from_json(json::parse(line)));
  const auto preds = load_predictions(require_path(cfg, "predictions"));
  std::optional<std::map<std::string, std::string>> baseline;
  if (cfg.paths.count("baseline_predictions")) baseline = load_predictions(cfg.paths.at("baseline_predictions"));

  std::vector<eval::Task> tasks = cfg.eval.tasks;
  if (tasks.empty())
    for (const auto& [t, n] : eval::kTaskNames) tasks.push_back(t);

  eval::MetricReport report;
  report.model = cfg.eval.model;
  report.config_hash = cfg.hash;
  std::size_t missing = 0;
  for (const auto task : tasks) {
    std::vector<const eval::EvalInstance*> items;
    for (const auto& e : instances)
      if (e.task == task) items.push_back(&e);
    if (items.empty()) continue;
    auto pred_of = [&](const eval::EvalInstance& e) {
      const auto it = preds.find(e.id);
      if (it == preds.end()) ++missing;
      return it == preds.end() ? std::string{} : it->second;
    };
    const std::string tname(eval::to_string(task));
    switch (task) {
      case eval::Task::classification: {
        std::vector<std::string> p, g;
        for (const auto* e : items) p.push_back(pred_of(*e)), g.push_back(e->reference);
        report.metrics.push_back({tname, "macro_f1", eval::f1_macro(p, g), items.size()});
        break;
      }
      case eval::Task::exam: {
        std::vector<std::string> p, k;
        for (const auto* e : items) p.push_back(std::string(text::trim(pred_of(*e)))), k.push_back(option_letter(*e->key_index));
        const auto s = eval::score_exam(p, k);
        report.metrics.push_back({tname, "points", s.points, items.size()});
        report.metrics.push_back({tname, "pass", s.pass ? 1.0 : 0.0, items.size()});
        break;
      }
      case eval::Task::translation: {
        std::vector<eval::Tokens> c;
        std::vector<std::vector<eval::Tokens>> r;
        for (const auto* e : items) {
          c.push_back(eval::bleu_tokens(pred_of(*e), e->language));
          r.push_back({eval::bleu_tokens(e->reference, e->language)});
        }
        report.metrics.push_back({tname, "bleu", eval::corpus_bleu(c, r), items.size()});
        break;
      }
      default: {
        double em = 0.0;
        for (const auto* e : items) em += eval::exact_match(pred_of(*e), e->reference);
        report.metrics.push_back({tname, "exact_match", em / static_cast<double>(items.size()), items.size()});
        break;
      }
    }
  }

  if (baseline && !cfg.eval.judge_endpoint.empty()) {
    auto transport = make_http_transport(cfg.eval.judge_endpoint);
    eval::TransportJudge judge(*transport);
    std::vector<eval::JudgeItem> items;
    for (const auto& e : instances) {
      const auto a = preds.find(e.id);
      const auto b = baseline->find(e.id);
      if (a != preds.end() && b != baseline->end()) items.push_back({e.prompt, a->second, b->second});
    }
    eval::JudgeOptions jo;
    jo.tie_delta = cfg.eval.tie_delta;
    const auto verdicts =
        eval::judge_all(items, judge, jo, cfg.eval.judge_workers, cfg.eval.judge_rate, cfg.eval.model, cfg.eval.baseline_model);
    report.judge = eval::tally(verdicts);
  }
  write_json_lines((dir / "metrics.jsonl").string(), eval::to_jsonl(report));
  write_text(dir / "metrics.txt", eval::to_table(report));
  m.counts["instances"] = instances.size();
  m.counts["missing_predictions"] = missing;
  m.counts["metrics"] = report.metrics.size();
}

inline void run_cost(const PipelineConfig& cfg, Manifest& m, const std::optional<std::string>& preset) {
  const fs::path dir = cfg.output_dir / "cost";
  fs::create_directories(dir);
  const auto presets = cost::load_presets(require_path(cfg, "cost_presets"));
  std::vector<std::string> names = preset ? std::vector<std::string>{*preset} : cfg.cost.presets;
  if (names.empty())
    for (const auto& [n, c] : presets) names.push_back(n);
  ojson summary;
  for (const auto& name : names) {
    const auto it = presets.find(name);
    if (it == presets.end()) throw ConfigError("unknown_preset", "no cost preset named '" + name + "'");
    const auto& c = it->second;
    write_text(dir / (name + "_memory.csv"), cost::to_csv(cost::total_memory_curve(c, cfg.cost.seq_lens), "bytes"));
    write_text(dir / (name + "_latency.csv"), cost::to_csv(cost::latency_curve(c, cfg.cost.seq_lens, cfg.cost.device_flops), "seconds"));
    ojson s;
    s["weight_bytes"] = cost::weight_bytes(c);
    s["kv_bytes_per_token"] = cost::memory_slope(c);
    s["kv_bytes_at_max_seq"] = cost::kv_cache_bytes(c, cfg.cost.seq_lens.back());
    summary[name] = std::move(s);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  m.counts["presets"] = names.size();
}

// --- entry -----------------------------------------------------------------------

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s = {"preprocess", "synthesize", "tokenize", "schedule",
                                             "verify-kernels", "evaluate", "cost", "all"};
  return s;
}

struct RunOptions {
  std::string subcommand;
  fs::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
};

// 0 success, 1 stage failure, 2 invalid config. Every attempted stage leaves
// a manifest, including partial counts on failure.
inline int run(const RunOptions& opt) {
  PipelineConfig cfg;
  try {
    cfg = load_config(opt.config, opt.seed);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  const auto& subs = subcommands();
  if (std::find(subs.begin(), subs.end(), opt.subcommand) == subs.end()) {
    spdlog::error("unknown subcommand '{}'", opt.subcommand);
    return 2;
  }
  std::optional<DirLock> lock;
  try {
    lock.emplace(cfg.output_dir);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  }

  const std::vector<std::string> order =
      opt.subcommand == "all" ? std::vector<std::string>{"preprocess", "synthesize", "tokenize", "schedule",
                                                         "verify-kernels", "evaluate", "cost"}
                              : std::vector<std::string>{opt.subcommand};
  for (const auto& sub : order) {
    if (opt.subcommand == "all") {
      // Optional stages drop out of a full run when their inputs are not configured.
      if (sub == "evaluate" && (!cfg.paths.count("eval") || !cfg.paths.count("predictions"))) continue;
      if (sub == "schedule" && !cfg.schedule.present) continue;
    }
    Manifest m;
    m.subcommand = sub;
    const fs::path mdir = cfg.output_dir / (sub == "verify-kernels" ? "verify" : sub);
    Timer t;
    int code = 0;
    try {
      spdlog::info("stage {} starting", sub);
      if (sub == "preprocess") run_preprocess(cfg, m);
      else if (sub == "synthesize") run_synthesize(cfg, m);
      else if (sub == "tokenize") run_tokenize(cfg, m);
      else if (sub == "schedule") run_schedule(cfg, m);
      else if (sub == "verify-kernels") run_verify_kernels(cfg, m);
      else if (sub == "evaluate") run_evaluate(cfg, m);
      else if (sub == "cost") run_cost(cfg, m, opt.preset);
    } catch (const ConfigError& e) {
      m.status = "config_error";
      m.error = e.what();
      code = 2;
    } catch (const std::exception& e) {
      m.status = "failed";
      m.error = e.what();
      code = 1;
    }
    m.timings_ms["stage"] = t.ms();
    write_manifest(cfg, mdir, m);
    if (code != 0) {
      spdlog::error("stage {} failed: {}", sub, m.error);
      return code;
    }
    spdlog::info("stage {} done in {:.1f} ms", sub, t.ms());
  }
  return 0;
}

}  // namespace iplm::pipeline
