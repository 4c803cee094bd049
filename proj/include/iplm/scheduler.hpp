#pragma once

// Two-stage data schedule: per-category token quotas, quota-driven document
// sampling, fixed-budget sequence packing and the cosine learning rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "iplm/corpus.hpp"
#include "iplm/error.hpp"
#include "iplm/text.hpp"
#include "iplm/tokenizer.hpp"

namespace iplm::sched {

enum class Stage { stage1, stage2 };

inline std::string_view to_string(Stage s) { return s == Stage::stage1 ? "stage1" : "stage2"; }

struct StageConfig {
  Stage stage = Stage::stage1;
  std::uint64_t token_budget = 0;
  std::uint32_t context_length = 4096;
  std::uint64_t warmup_steps = 0;
  double peak_lr = 2e-5;
  double final_lr_fraction = 0.1;
  std::map<Category, double> category_proportions;
};

inline std::vector<std::string> validate(const StageConfig& c) {
  std::vector<std::string> errs;
  const std::string where(to_string(c.stage));
  if (c.token_budget == 0) errs.push_back(where + ".token_budget: must be positive");
  if (c.context_length == 0 || (c.context_length & (c.context_length - 1)) != 0)
    errs.push_back(where + ".context_length: must be a positive power of two");
  double sum = 0.0;
  for (const auto& [cat, p] : c.category_proportions) {
    if (p < 0.0) errs.push_back(where + ".category_proportions." + std::string(to_string(cat)) + ": negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) errs.push_back(where + ".category_proportions: sum to " + std::to_string(sum) + ", not 1");
  if (c.final_lr_fraction < 0.0 || c.final_lr_fraction > 1.0) errs.push_back(where + ".final_lr_fraction: outside [0, 1]");
  return errs;
}

// --- planning --------------------------------------------------------------------

// Optional ordinal constraint set. paper_fig2 requires stage 2 to weight
// the long-form and instruction-like categories more than stage 1.
enum class Profile { none, paper_fig2 };

inline constexpr Category kFig2Upweighted[] = {Category::Book, Category::Chat,         Category::Exam,
                                              Category::Code, Category::FileWrapper, Category::ResearchReport};

using Quotas = std::map<Category, std::uint64_t>;

struct Plan {
  Quotas stage1;
  Quotas stage2;
  std::vector<Category> not_upweighted;  // paper_fig2 violations, reported only
};

inline Quotas quotas_for(const StageConfig& c) {
  Quotas q;
  for (const auto& [cat, p] : c.category_proportions)
    q[cat] = static_cast<std::uint64_t>(std::llround(static_cast<double>(c.token_budget) * p));
  return q;
}

inline Plan plan_stages(const std::map<Category, std::uint64_t>& totals, const StageConfig& cfg1, const StageConfig& cfg2,
                        Profile profile = Profile::none) {
  std::vector<std::string> errs = validate(cfg1);
  for (auto& e : validate(cfg2)) errs.push_back(std::move(e));
  if (!errs.empty()) throw ConfigError("invalid_stage_config", errs.front());

  Plan plan{quotas_for(cfg1), quotas_for(cfg2), {}};
  std::string deficient;
  for (const auto cat : kAllCategories) {
    const auto need = (plan.stage1.count(cat) ? plan.stage1.at(cat) : 0) + (plan.stage2.count(cat) ? plan.stage2.at(cat) : 0);
    const auto have = totals.count(cat) ? totals.at(cat) : 0;
    if (need > have) {
      if (!deficient.empty()) deficient += ", ";
      deficient += std::string(to_string(cat)) + " (needs " + std::to_string(need) + ", has " + std::to_string(have) + ")";
    }
  }
  if (!deficient.empty()) throw Error("infeasible_plan", deficient);

  if (profile == Profile::paper_fig2) {
    auto prop = [](const StageConfig& c, Category cat) {
      const auto it = c.category_proportions.find(cat);
      return it == c.category_proportions.end() ? 0.0 : it->second;
    };
    for (const auto cat : kFig2Upweighted)
      if (!(prop(cfg2, cat) > prop(cfg1, cat))) plan.not_upweighted.push_back(cat);
  }
  return plan;
}

// --- sampling --------------------------------------------------------------------

struct IndexEntry {
  std::string id;
  Category category = Category::Unknown;
  std::uint64_t tokens = 0;
};

struct ScheduledDoc {
  std::string id;
  Category category = Category::Unknown;
  std::uint64_t tokens = 0;
};

struct StageSample {
  std::vector<ScheduledDoc> stream;            // training order
  std::map<Category, std::uint64_t> realized;  // tokens per category
};

inline constexpr double kQuotaTolerance = 0.01;

// Per category: walk the documents in a seeded shuffle, taking each one that
// keeps the running total within quota + 1%, until the quota is reached.
// The union is then shuffled into training order. Documents in `exclude`
// (e.g. those used by an earlier stage) are never picked.
inline StageSample sample_schedule(const Quotas& quotas, const std::vector<IndexEntry>& index, std::uint64_t seed,
                                   const std::unordered_set<std::string>& exclude = {}) {
  std::map<Category, std::vector<const IndexEntry*>> by_cat;
  for (const auto& e : index)
    if (!exclude.count(e.id)) by_cat[e.category].push_back(&e);

  StageSample out;
  for (const auto& [cat, quota] : quotas) {
    if (quota == 0) continue;
    auto docs = by_cat[cat];
    std::mt19937_64 rng(text::derive_seed(seed, "sample/" + std::string(to_string(cat))));
    std::shuffle(docs.begin(), docs.end(), rng);
    const double ceiling = static_cast<double>(quota) * (1.0 + kQuotaTolerance);
    std::uint64_t acc = 0;
    for (const auto* d : docs) {
      if (acc >= quota) break;
      if (static_cast<double>(acc + d->tokens) > ceiling) continue;
      acc += d->tokens;
      out.stream.push_back({d->id, d->category, d->tokens});
    }
    if (std::abs(static_cast<double>(acc) - static_cast<double>(quota)) > kQuotaTolerance * static_cast<double>(quota))
      throw Error("category_exhausted", std::string(to_string(cat)) + ": reached " + std::to_string(acc) + " of " +
                                            std::to_string(quota) + " tokens");
    out.realized[cat] = acc;
  }
  std::mt19937_64 rng(text::derive_seed(seed, "sample/order"));
  std::shuffle(out.stream.begin(), out.stream.end(), rng);
  return out;
}

// Both stages; stage 2 draws from documents stage 1 did not use.
inline std::pair<StageSample, StageSample> sample_stages(const Plan& plan, const std::vector<IndexEntry>& index,
                                                         std::uint64_t seed) {
  auto s1 = sample_schedule(plan.stage1, index, text::derive_seed(seed, "stage1"));
  std::unordered_set<std::string> used;
  for (const auto& d : s1.stream) used.insert(d.id);
  auto s2 = sample_schedule(plan.stage2, index, text::derive_seed(seed, "stage2"), used);
  return {std::move(s1), std::move(s2)};
}

// --- packing ---------------------------------------------------------------------

struct DocBoundary {
  std::uint32_t start = 0;  // [start, end) within the sequence
  std::uint32_t end = 0;
  std::string doc_id;
};

struct PackedBatch {
  std::vector<std::vector<tok::TokenId>> sequences;
  std::vector<std::vector<DocBoundary>> doc_boundaries;
  std::uint64_t total_tokens = 0;
};

struct PackStats {
  std::uint64_t batches = 0;
  std::uint64_t tokens_in = 0;      // document tokens plus separators
  std::uint64_t tokens_packed = 0;  // tokens in emitted batches
  std::uint64_t tokens_dropped_partial = 0;
  std::uint64_t tokens_truncated = 0;  // only without carryover
};

// Streaming packer: documents (each followed by the separator) fill
// context-length sequences back to back; a document crossing a sequence end
// continues in the next sequence. Full batches go to the callback; the last
// partial batch is dropped and counted.
class SequencePacker {
 public:
  using Sink = std::function<void(const PackedBatch&)>;

  SequencePacker(std::uint32_t context_length, std::uint64_t batch_token_budget, tok::TokenId separator, Sink sink,
                 bool carryover = true)
      : context_(context_length), separator_(separator), carryover_(carryover), sink_(std::move(sink)) {
    if (context_length == 0) throw ConfigError("invalid_packing", "context_length must be positive");
    if (batch_token_budget == 0 || batch_token_budget % context_length != 0)
      throw ConfigError("invalid_packing", "batch token budget " + std::to_string(batch_token_budget) +
                                               " is not a multiple of context length " + std::to_string(context_length));
    per_batch_ = batch_token_budget / context_length;
  }

  void push(const std::string& doc_id, std::span<const tok::TokenId> tokens) {
    std::vector<tok::TokenId> doc(tokens.begin(), tokens.end());
    doc.push_back(separator_);
    stats_.tokens_in += doc.size();
    std::size_t pos = 0;
    while (pos < doc.size()) {
      const std::size_t room = context_ - current_.size();
      const std::size_t take = std::min(room, doc.size() - pos);
      const auto start = static_cast<std::uint32_t>(current_.size());
      current_.insert(current_.end(), doc.begin() + static_cast<std::ptrdiff_t>(pos),
                      doc.begin() + static_cast<std::ptrdiff_t>(pos + take));
      bounds_.push_back({start, static_cast<std::uint32_t>(current_.size()), doc_id});
      pos += take;
      if (current_.size() == context_) {
        close_sequence();
        if (!carryover_ && pos < doc.size()) {
          stats_.tokens_truncated += doc.size() - pos;
          break;
        }
      }
    }
  }

  PackStats finish() {
    std::uint64_t partial = current_.size();
    for (const auto& s : batch_.sequences) partial += s.size();
    stats_.tokens_dropped_partial = partial;
    current_.clear();
    bounds_.clear();
    batch_ = {};
    return stats_;
  }

  const PackStats& stats() const { return stats_; }

 private:
  void close_sequence() {
    batch_.sequences.push_back(std::move(current_));
    batch_.doc_boundaries.push_back(std::move(bounds_));
    current_ = {};
    bounds_ = {};
    if (batch_.sequences.size() == per_batch_) {
      batch_.total_tokens = per_batch_ * context_;
      ++stats_.batches;
      stats_.tokens_packed += batch_.total_tokens;
      sink_(batch_);
      batch_ = {};
    }
  }

  std::uint32_t context_;
  std::uint64_t per_batch_ = 0;
  tok::TokenId separator_;
  bool carryover_;
  Sink sink_;
  std::vector<tok::TokenId> current_;
  std::vector<DocBoundary> bounds_;
  PackedBatch batch_;
  PackStats stats_;
};

// Appends batches to "<dir>/batches.bin" (uint32 little-endian token ids)
// with one JSON line per batch in "<dir>/batches.index.jsonl".
class BatchWriter {
 public:
  explicit BatchWriter(const std::filesystem::path& dir)
      : bin_(dir / "batches.bin", std::ios::binary | std::ios::trunc), index_(dir / "batches.index.jsonl", std::ios::binary | std::ios::trunc) {
    if (!bin_ || !index_) throw Error("io_error", "cannot open batch files in " + dir.string());
  }

  void write(const PackedBatch& b) {
    ojson line;
    line["batch"] = count_++;
    line["offset"] = offset_;
    line["sequences"] = b.sequences.size();
    line["total_tokens"] = b.total_tokens;
    ojson docs = ojson::array();
    for (std::size_t s = 0; s < b.sequences.size(); ++s) {
      for (const auto id : b.sequences[s]) {
        const unsigned char le[4] = {static_cast<unsigned char>(id), static_cast<unsigned char>(id >> 8),
                                     static_cast<unsigned char>(id >> 16), static_cast<unsigned char>(id >> 24)};
        bin_.write(reinterpret_cast<const char*>(le), 4);
      }
      offset_ += b.sequences[s].size() * 4;
      for (const auto& d : b.doc_boundaries[s]) docs.push_back(ojson::array({s, d.start, d.end, d.doc_id}));
    }
    line["docs"] = std::move(docs);
    index_ << line.dump() << '\n';
  }

 private:
  std::ofstream bin_;
  std::ofstream index_;
  std::uint64_t count_ = 0;
  std::uint64_t offset_ = 0;
};

// "stage<TAB>doc_id<TAB>category<TAB>tokens" per scheduled document.
inline void write_schedule_manifest(const std::filesystem::path& path, const StageSample& s1, const StageSample& s2) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  auto dump = [&](Stage st, const StageSample& s) {
    for (const auto& d : s.stream) out << to_string(st) << '\t' << d.id << '\t' << to_string(d.category) << '\t' << d.tokens << '\n';
  };
  dump(Stage::stage1, s1);
  dump(Stage::stage2, s2);
}

// --- learning rate ---------------------------------------------------------------

// Linear warmup to `peak`, then cosine decay to final_fraction * peak, which
// is returned exactly at total_steps.
inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, std::uint64_t warmup_steps, double peak,
                        double final_fraction = 0.1) {
  const double floor = final_fraction * peak;
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step == warmup_steps) return peak;
  if (step >= total_steps) return floor;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace iplm::sched
