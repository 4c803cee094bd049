#pragma once

// Quality filtering, exact/attribute deduplication, MinHash + LSH fuzzy
// deduplication and rewrite-based up-sampling of book documents.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "iplm/corpus.hpp"
#include "iplm/error.hpp"
#include "iplm/text.hpp"
#include "iplm/transport.hpp"

namespace iplm::preprocess {

// --- filtering ---------------------------------------------------------------

struct Classifier {
  std::function<double(const Document&)> score;  // quality score in [0, 1]
  double threshold = 0.5;
};

struct FilterRuleSet {
  std::vector<std::string> blacklist_keywords;
  std::vector<std::string> whitelist_keywords;
  std::size_t min_length_chars = 1;
  double max_symbol_ratio = 1.0;
  std::optional<Classifier> classifier;
};

inline std::vector<std::string> validate(const FilterRuleSet& r) {
  std::vector<std::string> errs;
  if (r.min_length_chars < 1) errs.emplace_back("filter.min_length_chars must be >= 1");
  if (!(r.max_symbol_ratio >= 0.0 && r.max_symbol_ratio <= 1.0)) errs.emplace_back("filter.max_symbol_ratio must be in [0,1]");
  if (r.classifier && !(r.classifier->threshold >= 0.0 && r.classifier->threshold <= 1.0))
    errs.emplace_back("filter.classifier.threshold must be in [0,1]");
  return errs;
}

struct RemovedDocument {
  Document doc;
  std::vector<std::string> reasons;  // subset of blacklist, min_length, symbol_ratio, classifier
};

struct FilterResult {
  std::vector<Document> kept;
  std::vector<RemovedDocument> removed;
  std::vector<std::pair<std::string, std::string>> tags;  // (doc id, tag), e.g. classifier_error
};

namespace detail {

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

inline bool contains_any(const std::string& haystack_lower, const std::vector<std::string>& needles) {
  for (const auto& n : needles)
    if (!n.empty() && haystack_lower.find(ascii_lower(n)) != std::string::npos) return true;
  return false;
}

}  // namespace detail

// Fraction of non-space code points that are punctuation or symbols.
inline double symbol_ratio(std::string_view s) {
  std::size_t total = 0;
  std::size_t sym = 0;
  for (std::size_t i = 0; i < s.size(); i += text::utf8_seq_len(static_cast<unsigned char>(s[i]))) {
    const auto cp = text::decode_at(s, i);
    if (text::is_space(cp)) continue;
    ++total;
    if (text::is_symbol(cp)) ++sym;
  }
  return total == 0 ? 0.0 : static_cast<double>(sym) / static_cast<double>(total);
}

inline FilterResult filter_documents(const std::vector<Document>& docs, const FilterRuleSet& rules) {
  if (const auto errs = validate(rules); !errs.empty()) throw ConfigError("invalid_rules", errs.front());
  FilterResult out;
  for (const auto& doc : docs) {
    std::vector<std::string> reasons;
    const std::string lower = detail::ascii_lower(doc.text);
    if (detail::contains_any(lower, rules.blacklist_keywords) && !detail::contains_any(lower, rules.whitelist_keywords))
      reasons.emplace_back("blacklist");
    if (text::code_point_count(doc.text) < rules.min_length_chars) reasons.emplace_back("min_length");
    if (symbol_ratio(doc.text) > rules.max_symbol_ratio) reasons.emplace_back("symbol_ratio");
    if (rules.classifier) {
      try {
        const double score = rules.classifier->score(doc);
        if (score < rules.classifier->threshold) reasons.emplace_back("classifier");
      } catch (const std::exception& e) {
        // Fail open: the document is judged by the rule stage alone.
        spdlog::warn("classifier failed on document '{}': {}", doc.id, e.what());
        out.tags.emplace_back(doc.id, "classifier_error");
      }
    }
    if (reasons.empty()) {
      out.kept.push_back(doc);
    } else {
      out.removed.push_back({doc, std::move(reasons)});
    }
  }
  return out;
}

// --- dedup reports -------------------------------------------------------------

enum class MatchKind { exact_attribute, exact_substring, fuzzy };

inline std::string_view to_string(MatchKind k) {
  switch (k) {
    case MatchKind::exact_attribute: return "exact_attribute";
    case MatchKind::exact_substring: return "exact_substring";
    case MatchKind::fuzzy: return "fuzzy";
  }
  return "fuzzy";
}

struct Cluster {
  std::string representative_id;
  std::vector<std::string> member_ids;  // includes the representative, input order
  MatchKind match_kind = MatchKind::fuzzy;
};

struct DedupReport {
  std::vector<std::string> kept_ids;
  std::vector<std::string> removed_ids;
  std::vector<Cluster> clusters;
  std::vector<std::string> skipped_short_ids;  // fuzzy stage only: too short to shingle
};

inline ojson to_json(const Cluster& c) {
  ojson j;
  j["representative_id"] = c.representative_id;
  j["member_ids"] = c.member_ids;
  j["match_kind"] = std::string(to_string(c.match_kind));
  return j;
}

// Documents of `docs` whose ids are in the report's kept list, input order.
inline std::vector<Document> kept_documents(const std::vector<Document>& docs, const DedupReport& r) {
  const std::unordered_set<std::string> kept(r.kept_ids.begin(), r.kept_ids.end());
  std::vector<Document> out;
  for (const auto& d : docs)
    if (kept.count(d.id)) out.push_back(d);
  return out;
}

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  // The smaller index becomes the root, so roots are earliest members.
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::size_t> parent_;
};

inline std::map<std::size_t, std::vector<std::size_t>> components(UnionFind& uf, std::size_t n) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[uf.find(i)].push_back(i);
  return groups;
}

}  // namespace detail

// Clusters documents that share a nonempty "doi" or "patent_family"
// attribute, or whose text equals or is contained in another document's
// text. The representative of a cluster is its earliest member whose text
// is not contained in a longer member's text.
inline DedupReport exact_dedup(const std::vector<Document>& docs) {
  const std::size_t n = docs.size();
  detail::UnionFind uf(n);
  std::vector<bool> attribute_edge(n, false);
  std::vector<bool> contained(n, false);

  for (const char* key : {"doi", "patent_family"}) {
    std::unordered_map<std::string, std::size_t> first;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string v = docs[i].attribute(key);
      if (v.empty()) continue;
      const auto [it, inserted] = first.emplace(v, i);
      if (!inserted) {
        uf.unite(it->second, i);
        attribute_edge[i] = attribute_edge[it->second] = true;
      }
    }
  }

  {
    std::unordered_map<std::string_view, std::size_t> first;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [it, inserted] = first.emplace(docs[i].text, i);
      if (!inserted) {
        uf.unite(it->second, i);
        contained[i] = true;  // later copy of an identical text
      }
    }
  }

  std::vector<std::size_t> by_len(n);
  std::iota(by_len.begin(), by_len.end(), std::size_t{0});
  std::stable_sort(by_len.begin(), by_len.end(),
                   [&](std::size_t a, std::size_t b) { return docs[a].text.size() < docs[b].text.size(); });
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t i = by_len[a];
    for (std::size_t b = a + 1; b < n; ++b) {
      const std::size_t j = by_len[b];
      if (docs[j].text.size() == docs[i].text.size()) continue;  // equal-length containment means equality
      if (docs[j].text.find(docs[i].text) != std::string::npos) {
        uf.unite(i, j);
        contained[i] = true;
      }
    }
  }

  DedupReport report;
  std::unordered_set<std::size_t> removed;
  for (const auto& [root, members] : detail::components(uf, n)) {
    if (members.size() < 2) continue;
    std::size_t rep = members.front();
    for (const auto m : members) {
      if (!contained[m]) {
        rep = m;
        break;
      }
    }
    Cluster c;
    c.representative_id = docs[rep].id;
    bool any_attr = false;
    for (const auto m : members) {
      c.member_ids.push_back(docs[m].id);
      any_attr = any_attr || attribute_edge[m];
      if (m != rep) removed.insert(m);
    }
    c.match_kind = any_attr ? MatchKind::exact_attribute : MatchKind::exact_substring;
    report.clusters.push_back(std::move(c));
  }
  for (std::size_t i = 0; i < n; ++i) (removed.count(i) ? report.removed_ids : report.kept_ids).push_back(docs[i].id);
  return report;
}

// --- MinHash -------------------------------------------------------------------

struct MinHashConfig {
  std::size_t num_permutations = 256;
  std::size_t shingle_size_chars = 5;
  std::size_t lsh_bands = 32;
  std::size_t lsh_rows = 8;
  double jaccard_threshold = 0.8;
  std::uint64_t seed = 1;
};

inline std::vector<std::string> validate(const MinHashConfig& c) {
  std::vector<std::string> errs;
  if (c.num_permutations == 0) errs.emplace_back("minhash.num_permutations must be positive");
  if (c.shingle_size_chars == 0) errs.emplace_back("minhash.shingle_size_chars must be positive");
  if (c.lsh_bands * c.lsh_rows != c.num_permutations)
    errs.emplace_back("minhash.lsh_bands * minhash.lsh_rows must equal minhash.num_permutations");
  if (!(c.jaccard_threshold > 0.0 && c.jaccard_threshold <= 1.0))
    errs.emplace_back("minhash.jaccard_threshold must be in (0,1]");
  return errs;
}

using Signature = std::vector<std::uint64_t>;

namespace detail {

inline constexpr std::uint64_t kMersenne61 = (std::uint64_t{1} << 61) - 1;

inline std::uint64_t mod_mersenne61(unsigned __int128 x) {
  std::uint64_t lo = static_cast<std::uint64_t>(x & kMersenne61);
  std::uint64_t hi = static_cast<std::uint64_t>(x >> 61);
  std::uint64_t r = lo + hi;
  while (r >= kMersenne61) r -= kMersenne61;
  return r;
}

// Universal hash family h(x) = (a*x + b) mod (2^61 - 1); coefficients drawn
// once per (seed, num_permutations).
struct Permutations {
  std::vector<std::uint64_t> a;
  std::vector<std::uint64_t> b;

  Permutations(std::size_t n, std::uint64_t seed) : a(n), b(n) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint64_t> da(1, kMersenne61 - 1);
    std::uniform_int_distribution<std::uint64_t> db(0, kMersenne61 - 1);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = da(rng);
      b[i] = db(rng);
    }
  }
};

inline Signature signature_with(std::string_view text, const MinHashConfig& cfg, const Permutations& perms) {
  const auto shingles = text::shingle_set(text, cfg.shingle_size_chars, false);
  if (shingles.empty())
    throw Error("too_short_for_shingles",
                "text has fewer than " + std::to_string(cfg.shingle_size_chars) + " characters");
  std::vector<std::uint64_t> base;
  base.reserve(shingles.size());
  for (const auto& s : shingles) base.push_back(text::fnv1a64(s) % kMersenne61);
  Signature sig(cfg.num_permutations, kMersenne61);
  for (std::size_t p = 0; p < cfg.num_permutations; ++p) {
    std::uint64_t m = kMersenne61;
    const unsigned __int128 a = perms.a[p];
    const unsigned __int128 b = perms.b[p];
    for (const auto x : base) m = std::min(m, mod_mersenne61(a * x + b));
    sig[p] = m;
  }
  return sig;
}

}  // namespace detail

inline Signature minhash_signature(std::string_view text, const MinHashConfig& cfg) {
  if (const auto errs = validate(cfg); !errs.empty()) throw ConfigError("invalid_minhash", errs.front());
  return detail::signature_with(text, cfg, detail::Permutations(cfg.num_permutations, cfg.seed));
}

// Fraction of agreeing signature slots; an unbiased Jaccard estimate.
inline double estimate_jaccard(const Signature& a, const Signature& b) {
  if (a.size() != b.size() || a.empty()) throw Error("signature_mismatch", "signatures differ in length");
  std::size_t eq = 0;
  for (std::size_t i = 0; i < a.size(); ++i) eq += a[i] == b[i];
  return static_cast<double>(eq) / static_cast<double>(a.size());
}

// LSH candidate generation, signature verification, transitive closure.
// Documents too short to shingle are kept and listed in skipped_short_ids
// (the exact stage covers them).
inline DedupReport fuzzy_dedup(const std::vector<Document>& docs, const MinHashConfig& cfg) {
  if (const auto errs = validate(cfg); !errs.empty()) throw ConfigError("invalid_minhash", errs.front());
  const std::size_t n = docs.size();
  const detail::Permutations perms(cfg.num_permutations, cfg.seed);
  std::vector<std::optional<Signature>> sigs(n);
  DedupReport report;
  for (std::size_t i = 0; i < n; ++i) {
    try {
      sigs[i] = detail::signature_with(docs[i].text, cfg, perms);
    } catch (const Error&) {
      report.skipped_short_ids.push_back(docs[i].id);
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t band = 0; band < cfg.lsh_bands; ++band) {
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < n; ++i) {
      if (!sigs[i]) continue;
      std::uint64_t h = text::splitmix64(band);
      for (std::size_t r = 0; r < cfg.lsh_rows; ++r) h = text::splitmix64(h ^ (*sigs[i])[band * cfg.lsh_rows + r]);
      buckets[h].push_back(i);
    }
    for (const auto& [key, members] : buckets)
      for (std::size_t a = 0; a < members.size(); ++a)
        for (std::size_t b = a + 1; b < members.size(); ++b) candidates.emplace_back(members[a], members[b]);
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  detail::UnionFind uf(n);
  for (const auto& [a, b] : candidates)
    if (estimate_jaccard(*sigs[a], *sigs[b]) >= cfg.jaccard_threshold) uf.unite(a, b);

  std::unordered_set<std::size_t> removed;
  for (const auto& [root, members] : detail::components(uf, n)) {
    if (members.size() < 2) continue;
    Cluster c;
    c.representative_id = docs[members.front()].id;
    c.match_kind = MatchKind::fuzzy;
    for (const auto m : members) {
      c.member_ids.push_back(docs[m].id);
      if (m != members.front()) removed.insert(m);
    }
    report.clusters.push_back(std::move(c));
  }
  for (std::size_t i = 0; i < n; ++i) (removed.count(i) ? report.removed_ids : report.kept_ids).push_back(docs[i].id);
  return report;
}

// --- rewriting -------------------------------------------------------------------

enum class RewriteStyle { summary, conversation };

inline std::string_view to_string(RewriteStyle s) { return s == RewriteStyle::summary ? "summary" : "conversation"; }

inline RewriteStyle parse_rewrite_style(std::string_view s) {
  if (s == "summary") return RewriteStyle::summary;
  if (s == "conversation") return RewriteStyle::conversation;
  throw ConfigError("invalid_style", "unknown rewrite style '" + std::string(s) + "'");
}

class Rewriter {
 public:
  virtual ~Rewriter() = default;
  virtual std::string rewrite(const std::string& text, RewriteStyle style) = 0;
};

// Deterministic offline fallback: embeds the source under a fixed scaffold.
class TemplateRewriter final : public Rewriter {
 public:
  std::string rewrite(const std::string& text, RewriteStyle style) override {
    if (style == RewriteStyle::summary) return "Summary of the following material:\n" + text + "\nEnd of summary.";
    return "User: Can you walk me through the following material?\nAssistant: " + text +
           "\nUser: Thank you.\nAssistant: You are welcome.";
  }
};

// Request {"text","style"} -> response {"text"} over any JsonTransport.
class TransportRewriter final : public Rewriter {
 public:
  explicit TransportRewriter(std::shared_ptr<JsonTransport> transport) : transport_(std::move(transport)) {}

  std::string rewrite(const std::string& text, RewriteStyle style) override {
    const nlohmann::json req = {{"text", text}, {"style", std::string(to_string(style))}};
    const auto res = transport_->post(req);
    if (!res.is_object() || !res.contains("text") || !res["text"].is_string())
      throw Error("bad_response", "rewriter reply lacks a string 'text'");
    return res["text"].get<std::string>();
  }

 private:
  std::shared_ptr<JsonTransport> transport_;
};

struct RewriteFailure {
  std::string doc_id;
  RewriteStyle style = RewriteStyle::summary;
  std::string reason;
};

struct RewriteReport {
  std::vector<Document> new_docs;
  std::vector<RewriteFailure> failures;
};

// New documents carry "rewritten_from" and "rewrite_style" attributes; the
// sources are not touched and are not part of the returned list.
inline RewriteReport rewrite_upsample(const std::vector<Document>& docs, const std::vector<RewriteStyle>& styles,
                                      Rewriter& rewriter) {
  RewriteReport out;
  for (const auto& doc : docs) {
    for (const auto style : styles) {
      if (doc.category != Category::Book) {
        out.failures.push_back({doc.id, style, "not_book"});
        continue;
      }
      try {
        std::string rewritten = rewriter.rewrite(doc.text, style);
        if (text::trim(rewritten).empty() || !text::is_valid_utf8(rewritten))
          throw Error("bad_response", "empty or invalid rewrite");
        Document d;
        d.id = doc.id + "#" + std::string(to_string(style));
        d.text = std::move(rewritten);
        d.category = doc.category;
        d.language = doc.language;
        d.attributes["rewritten_from"] = doc.id;
        d.attributes["rewrite_style"] = std::string(to_string(style));
        out.new_docs.push_back(std::move(d));
      } catch (const std::exception& e) {
        spdlog::warn("rewrite of '{}' ({}) failed: {}", doc.id, to_string(style), e.what());
        out.failures.push_back({doc.id, style, e.what()});
      }
    }
  }
  return out;
}

}  // namespace iplm::preprocess
