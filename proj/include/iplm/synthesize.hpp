#pragma once

// Synthetic training documents built from patents and file wrappers:
// examined-claims + cited-patent + wrapper concatenations, X-file text pairs
// at paragraph and sentence level, and instruction samples that wrap them.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "iplm/corpus.hpp"
#include "iplm/error.hpp"
#include "iplm/text.hpp"

namespace iplm::synth {

// --- patent numbers --------------------------------------------------------------

// Canonical form: ASCII upper-case with whitespace and separators removed,
// e.g. "US 2014/0078104 A1" -> "US20140078104A1".
inline std::string normalize_patent_number(std::string_view pn) {
  std::string out;
  std::string_view s = text::trim(pn);
  if (s.substr(0, 3) == "PN:" || s.substr(0, 3) == "pn:") s = text::trim(s.substr(3));
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == ' ' || c == '\t' || c == '/' || c == '-' || c == ',' || c == '.') continue;
    if (s.substr(i, 3) == "\xE3\x80\x80") {
      i += 2;
      continue;
    }
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    out += c;
  }
  return out;
}

// Canonical number without its trailing kind code ("A1", "U", "B2", ...).
inline std::string base_patent_number(std::string_view canonical) {
  std::string s(canonical);
  std::size_t end = s.size();
  if (end > 0 && s[end - 1] >= '0' && s[end - 1] <= '9' && end > 1 && s[end - 2] >= 'A' && s[end - 2] <= 'Z') {
    // letter+digit kind code, but only when preceded by a digit
    if (end > 2 && s[end - 3] >= '0' && s[end - 3] <= '9') end -= 2;
  } else if (end > 1 && s[end - 1] >= 'A' && s[end - 1] <= 'Z' && s[end - 2] >= '0' && s[end - 2] <= '9') {
    end -= 1;
  }
  return s.substr(0, end);
}

// Read-only lookup from any spelling of a patent number to its record.
class PatentIndex {
 public:
  PatentIndex() = default;
  explicit PatentIndex(std::vector<PatentRecord> records) {
    for (auto& r : records) add(std::move(r));
  }

  void add(PatentRecord r) {
    const std::string canon = normalize_patent_number(r.patent_number);
    if (by_canonical_.count(canon)) return;
    by_canonical_[canon] = records_.size();
    by_base_[base_patent_number(canon)].push_back(records_.size());
    records_.push_back(std::move(r));
  }

  // Exact canonical match first, then a unique match ignoring kind codes.
  const PatentRecord* find(std::string_view number) const {
    const std::string canon = normalize_patent_number(number);
    if (const auto it = by_canonical_.find(canon); it != by_canonical_.end()) return &records_[it->second];
    if (const auto it = by_base_.find(base_patent_number(canon)); it != by_base_.end() && it->second.size() == 1)
      return &records_[it->second.front()];
    return nullptr;
  }

  std::size_t size() const { return records_.size(); }

 private:
  std::vector<PatentRecord> records_;
  std::unordered_map<std::string, std::size_t> by_canonical_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_base_;
};

inline bool same_patent(std::string_view a, std::string_view b) {
  const auto ca = normalize_patent_number(a);
  const auto cb = normalize_patent_number(b);
  return ca == cb || base_patent_number(ca) == base_patent_number(cb);
}

// A patent number found in free text, with the short name the examiner
// attached to it ("Lee", "对比文件1") when there is one.
struct PatentMention {
  std::string number;
  std::string alias;
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Stand-in for a learned entity recognizer; implementations return every
// patent-number mention in `text`.
class PatentNumberExtractor {
 public:
  virtual ~PatentNumberExtractor() = default;
  virtual std::vector<PatentMention> extract(std::string_view text) const = 0;
};

class RegexNumberExtractor final : public PatentNumberExtractor {
 public:
  RegexNumberExtractor()
      : number_(kNumber),
        en_alias_(std::string(R"(([A-Z][A-Za-z'\-]+(?: et al\.?)?)\s*\(\s*()") + kNumber + R"()\s*\))"),
        zh_alias_(std::string(R"((对比文件\s*\d+)\s*(?:（|\()\s*()") + kNumber + R"()\s*(?:）|\)))") {}

  std::vector<PatentMention> extract(std::string_view sv) const override {
    const std::string s(sv);
    std::vector<PatentMention> out;
    std::map<std::size_t, std::string> alias_at;  // number start -> alias
    for (const auto* re : {&en_alias_, &zh_alias_}) {
      for (auto it = std::sregex_iterator(s.begin(), s.end(), *re); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        alias_at[static_cast<std::size_t>(m.position(2))] = m.str(1);
      }
    }
    for (auto it = std::sregex_iterator(s.begin(), s.end(), number_); it != std::sregex_iterator(); ++it) {
      const auto& m = *it;
      PatentMention pm;
      pm.number = std::string(text::trim(m.str(0)));
      pm.begin = static_cast<std::size_t>(m.position(0));
      pm.end = pm.begin + static_cast<std::size_t>(m.length(0));
      if (const auto a = alias_at.find(pm.begin); a != alias_at.end()) pm.alias = a->second;
      out.push_back(std::move(pm));
    }
    return out;
  }

 private:
  static constexpr const char* kNumber =
      R"((?:US|CN|EP|WO|JP|KR|DE)\s?(?:\d{4}\s?/\s?\d{6,7}|\d{1,3}(?:,\d{3}){2,3}|\d{6,13})(?:\.\d)?(?:\s?[A-Z]\d?)?\b)";
  std::regex number_;
  std::regex en_alias_;
  std::regex zh_alias_;
};

// --- synthetic types -------------------------------------------------------------

enum class Resolution { resolved, missing };

struct WrapperLink {
  PatentRecord examined;
  std::vector<PatentRecord> cited;  // resolved cited patents, wrapper order
  FileWrapperRecord wrapper;
  std::map<std::string, Resolution> resolution;  // keyed by number as written in the wrapper
};

enum class PairLevel { paragraph, sentence };

inline std::string_view to_string(PairLevel l) { return l == PairLevel::paragraph ? "paragraph" : "sentence"; }

struct WrapperSpan {
  std::size_t section = 0;
  std::size_t begin = 0;  // byte offsets within the comment section
  std::size_t end = 0;
};

struct XFilePair {
  PairLevel level = PairLevel::sentence;
  std::string examined_text;
  std::string cited_text;
  std::string examined_pn;
  std::string cited_pn;
  WrapperSpan wrapper_span;
};

enum class SyntheticKind { wrapper_concat, xfile_concat, xfile_instruction };

inline std::string_view to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::wrapper_concat: return "wrapper_concat";
    case SyntheticKind::xfile_concat: return "xfile_concat";
    case SyntheticKind::xfile_instruction: return "xfile_instruction";
  }
  return "wrapper_concat";
}

struct SyntheticDoc {
  std::string text;
  SyntheticKind kind = SyntheticKind::wrapper_concat;
  std::vector<std::string> provenance;
};

inline ojson to_json(const XFilePair& p) {
  ojson j;
  j["level"] = std::string(to_string(p.level));
  j["examined_text"] = p.examined_text;
  j["cited_text"] = p.cited_text;
  j["examined_pn"] = p.examined_pn;
  j["cited_pn"] = p.cited_pn;
  j["wrapper_span"] = {{"section", p.wrapper_span.section}, {"begin", p.wrapper_span.begin}, {"end", p.wrapper_span.end}};
  return j;
}

inline ojson to_json(const SyntheticDoc& d) {
  ojson j;
  j["text"] = d.text;
  j["kind"] = std::string(to_string(d.kind));
  j["provenance"] = d.provenance;
  return j;
}

inline std::string wrapper_source_id(const FileWrapperRecord& w) { return "wrapper:" + w.examined_patent_number; }

// --- linking ---------------------------------------------------------------------

inline WrapperLink link_wrapper(const FileWrapperRecord& wrapper, const PatentIndex& index) {
  if (const auto v = validate_wrapper(wrapper, true); !v.empty()) throw Error("invalid_wrapper", v.front().message);
  const PatentRecord* examined = index.find(wrapper.examined_patent_number);
  if (!examined) throw Error("examined_missing", wrapper.examined_patent_number + " is not in the patent index");
  WrapperLink link;
  link.examined = *examined;
  link.wrapper = wrapper;
  for (const auto& number : wrapper.cited_patent_numbers) {
    const PatentRecord* cited = index.find(number);
    if (cited && !same_patent(cited->patent_number, examined->patent_number)) {
      link.resolution[number] = Resolution::resolved;
      const bool dup = std::any_of(link.cited.begin(), link.cited.end(),
                                   [&](const PatentRecord& c) { return c.patent_number == cited->patent_number; });
      if (!dup) link.cited.push_back(*cited);
    } else {
      link.resolution[number] = Resolution::missing;
    }
  }
  return link;
}

// --- concatenations --------------------------------------------------------------

inline std::string paragraph_marker(std::uint32_t idx) {
  std::string n = std::to_string(idx);
  if (n.size() < 4) n.insert(0, 4 - n.size(), '0');
  return "[" + n + "]";
}

namespace detail {

inline void append_claims(std::string& out, const PatentRecord& p) {
  if (p.claims.empty()) return;
  out += "Claims:\n";
  for (const auto& c : p.claims) out += c + "\n";
}

inline void append_description(std::string& out, const PatentRecord& p) {
  if (p.description.empty()) return;
  out += "Description:\n";
  for (const auto& para : p.description) out += paragraph_marker(para.idx) + para.text + "\n";
}

}  // namespace detail

// Examined claims, then each resolved cited patent's claims and description,
// then the wrapper comment sections.
inline SyntheticDoc build_wrapper_concat(const WrapperLink& link) {
  if (link.cited.empty()) throw Error("nothing_to_concat", "no cited patent of the wrapper resolved");
  SyntheticDoc doc;
  doc.kind = SyntheticKind::wrapper_concat;
  std::string& out = doc.text;
  out += "Patent under Examnation(PN:" + link.examined.patent_number + "):\n";
  detail::append_claims(out, link.examined);
  doc.provenance.push_back(link.examined.patent_number);
  for (const auto& cited : link.cited) {
    out += "Public Patent(PN:" + cited.patent_number + "):\n";
    detail::append_claims(out, cited);
    detail::append_description(out, cited);
    doc.provenance.push_back(cited.patent_number);
  }
  out += "File Wrapper:\n";
  for (const auto& section : link.wrapper.comment_sections) out += section + "\n";
  doc.provenance.push_back(wrapper_source_id(link.wrapper));
  return doc;
}

// Two patents sharing an X-file relationship, full text back to back.
inline SyntheticDoc build_xfile_concat(const PatentRecord& examined, const PatentRecord& cited) {
  SyntheticDoc doc;
  doc.kind = SyntheticKind::xfile_concat;
  doc.text += "Patent under Examnation(PN:" + examined.patent_number + "):\n";
  detail::append_claims(doc.text, examined);
  detail::append_description(doc.text, examined);
  doc.text += "Public Patent(PN:" + cited.patent_number + "):\n";
  detail::append_claims(doc.text, cited);
  detail::append_description(doc.text, cited);
  doc.provenance = {examined.patent_number, cited.patent_number};
  return doc;
}

// Claims and description as plain text, used inside instruction samples.
inline std::string render_patent_text(const PatentRecord& p) {
  std::string out;
  detail::append_claims(out, p);
  detail::append_description(out, p);
  if (!out.empty() && out.back() == '\n') out.pop_back();
  return out;
}

// --- segmentation ----------------------------------------------------------------

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

namespace detail {

inline bool starts_with_at(std::string_view s, std::size_t i, std::string_view p) { return s.substr(i, p.size()) == p; }

inline constexpr std::string_view kZhTerminators[] = {"。", "！", "？", "；"};
inline constexpr std::string_view kClosers[] = {"”", "’", "」", "』", "）", "\"", "'", ")", "]"};
inline constexpr std::string_view kClauseDelims[] = {",", ";", ":", "，", "；", "："};

inline Span trimmed(std::string_view s, Span sp) {
  const auto t = text::trim(s.substr(sp.begin, sp.size()));
  if (t.empty()) return {sp.begin, sp.begin};
  const std::size_t b = static_cast<std::size_t>(t.data() - s.data());
  return {b, b + t.size()};
}

// Length of the sentence terminator at i (including trailing closers), or 0.
inline std::size_t terminator_at(std::string_view s, std::size_t i) {
  std::size_t len = 0;
  for (const auto t : kZhTerminators)
    if (starts_with_at(s, i, t)) len = t.size();
  if (len == 0 && (s[i] == '.' || s[i] == '!' || s[i] == '?')) {
    std::size_t j = i + 1;
    for (bool more = true; more;) {
      more = false;
      for (const auto c : kClosers)
        if (starts_with_at(s, j, c)) {
          j += c.size();
          more = true;
        }
    }
    // Latin terminators only end a sentence before whitespace or the end.
    if (j == s.size() || s[j] == ' ' || s[j] == '\n' || s[j] == '\t' || s[j] == '\r') return j - i;
    return 0;
  }
  if (len > 0) {
    std::size_t j = i + len;
    for (bool more = true; more;) {
      more = false;
      for (const auto c : kClosers)
        if (starts_with_at(s, j, c)) {
          j += c.size();
          more = true;
        }
    }
    return j - i;
  }
  return 0;
}

inline std::size_t clause_delim_at(std::string_view s, std::size_t i) {
  for (const auto d : kClauseDelims)
    if (starts_with_at(s, i, d)) return d.size();
  return 0;
}

}  // namespace detail

// Byte offset where claim text proper starts, skipping a "12." / "12、" number.
inline std::size_t claim_body_offset(std::string_view claim) {
  std::size_t i = 0;
  while (i < claim.size() && (claim[i] == ' ' || claim[i] == '\t')) ++i;
  const std::size_t digits = i;
  while (i < claim.size() && claim[i] >= '0' && claim[i] <= '9') ++i;
  if (i == digits) return 0;
  if (i < claim.size() && claim[i] == '.') {
    ++i;
  } else if (detail::starts_with_at(claim, i, "．") || detail::starts_with_at(claim, i, "、")) {
    i += 3;
  } else {
    return 0;
  }
  while (i < claim.size() && claim[i] == ' ') ++i;
  return i;
}

// Sentences of s[region]: split after . ! ? (before whitespace) and after
// 。！？；, keeping terminators and closing quotes with their sentence.
inline std::vector<Span> sentence_spans(std::string_view s, Span region) {
  std::vector<Span> out;
  std::size_t start = region.begin;
  std::size_t i = region.begin;
  while (i < region.end) {
    const std::size_t t = detail::terminator_at(s.substr(0, region.end), i);
    if (t > 0) {
      const Span sp = detail::trimmed(s, {start, i + t});
      if (sp.size() > 0) out.push_back(sp);
      i += t;
      start = i;
    } else {
      i += text::utf8_seq_len(static_cast<unsigned char>(s[i]));
    }
  }
  const Span tail = detail::trimmed(s, {start, region.end});
  if (tail.size() > 0) out.push_back(tail);
  return out;
}

// Clauses of one sentence: split on , ; : and their full-width forms. The
// delimiters are dropped; the sentence terminator stays on the last clause.
inline std::vector<Span> clause_spans(std::string_view s, Span sentence) {
  std::vector<Span> out;
  std::size_t start = sentence.begin;
  std::size_t i = sentence.begin;
  while (i < sentence.end) {
    const std::size_t d = detail::clause_delim_at(s, i);
    if (d > 0) {
      const Span sp = detail::trimmed(s, {start, i});
      if (sp.size() > 0) out.push_back(sp);
      i += d;
      start = i;
    } else {
      i += text::utf8_seq_len(static_cast<unsigned char>(s[i]));
    }
  }
  const Span tail = detail::trimmed(s, {start, sentence.end});
  if (tail.size() > 0) out.push_back(tail);
  return out;
}

inline std::vector<Span> clause_units(std::string_view s, Span region) {
  std::vector<Span> out;
  for (const auto& sent : sentence_spans(s, region))
    for (const auto& c : clause_spans(s, sent)) out.push_back(c);
  return out;
}

// --- X-file pair extraction ------------------------------------------------------

struct XFileOptions {
  std::size_t shingle_size = 5;  // same character n-gram unit as MinHash dedup
  double min_match_score = 0.15;  // clause-aligned Jaccard floor for non-verbatim hints
};

namespace detail {

struct ParaRange {
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;
  bool operator<(const ParaRange& o) const { return std::tie(lo, hi) < std::tie(o.lo, o.hi); }
  bool operator==(const ParaRange& o) const { return lo == o.lo && hi == o.hi; }
};

// One examiner correspondence inside a span: a paraphrase or quotation of
// the examined claim and of the cited text.
struct Anchor {
  std::string examined_hint;
  std::string cited_hint;
  std::optional<ParaRange> locator;
  std::string cited_alias;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct ClaimSpan {
  std::size_t claim_no = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<ClaimSpan> claim_spans(const std::string& section) {
  static const std::regex kMarker(R"((?:Instant [Cc]laim|(?:^|\n)\s*[Cc]laim)\s+(\d+)\s*:|权利要求(\d+)(?:请求保护|的附加技术特征))");
  std::vector<ClaimSpan> out;
  for (auto it = std::sregex_iterator(section.begin(), section.end(), kMarker); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const std::string num = m[1].matched ? m.str(1) : m.str(2);
    ClaimSpan cs;
    cs.claim_no = static_cast<std::size_t>(std::stoul(num));
    cs.begin = static_cast<std::size_t>(m.position(0));
    if (!out.empty()) out.back().end = cs.begin;
    out.push_back(cs);
  }
  if (!out.empty()) out.back().end = section.size();
  return out;
}

inline std::vector<ParaRange> locators(std::string_view span) {
  static const std::regex kZhRange(R"(说明书(?:第)?\s*(\d+)\s*(?:-|－|~|～|至|到)\s*(\d+)\s*段)");
  static const std::regex kZhSingle(R"(说明书第?\s*(\d+)\s*段)");
  static const std::regex kEn(R"([Pp]aragraphs?\s*\[?(\d+)\]?(?:\s*(?:-|–|to)\s*\[?(\d+)\]?)?)");
  const std::string s(span);
  std::vector<ParaRange> out;
  auto add = [&](std::uint32_t lo, std::uint32_t hi) {
    if (hi < lo) std::swap(lo, hi);
    const ParaRange r{lo, hi};
    if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
  };
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kZhRange); it != std::sregex_iterator(); ++it)
    add(static_cast<std::uint32_t>(std::stoul(it->str(1))), static_cast<std::uint32_t>(std::stoul(it->str(2))));
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kZhSingle); it != std::sregex_iterator(); ++it) {
    const auto v = static_cast<std::uint32_t>(std::stoul(it->str(1)));
    add(v, v);
  }
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kEn); it != std::sregex_iterator(); ++it) {
    const auto lo = static_cast<std::uint32_t>(std::stoul(it->str(1)));
    const auto hi = (*it)[2].matched ? static_cast<std::uint32_t>(std::stoul(it->str(2))) : lo;
    add(lo, hi);
  }
  return out;
}

inline std::string strip_hint(std::string_view h) {
  std::string_view s = text::trim(h);
  bool changed = true;
  while (changed && !s.empty()) {
    changed = false;
    for (const auto d : {std::string_view(","), std::string_view(";"), std::string_view(":"), std::string_view("，"),
                         std::string_view("；"), std::string_view("："), std::string_view("、")}) {
      if (s.size() >= d.size() && s.substr(s.size() - d.size()) == d) {
        s = text::trim(s.substr(0, s.size() - d.size()));
        changed = true;
      }
      if (s.size() >= d.size() && s.substr(0, d.size()) == d) {
        s = text::trim(s.substr(d.size()));
        changed = true;
      }
    }
  }
  return std::string(s);
}

// Offset of the ')' or '）' closing the group opened at `open`, or npos.
inline std::size_t matching_close(std::string_view s, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < s.size();) {
    if (s[i] == '(') {
      ++depth;
      ++i;
    } else if (starts_with_at(s, i, "（")) {
      ++depth;
      i += 3;
    } else if (s[i] == ')' || starts_with_at(s, i, "）")) {
      --depth;
      if (depth == 0) return i;
      i += s[i] == ')' ? 1 : 3;
    } else {
      i += text::utf8_seq_len(static_cast<unsigned char>(s[i]));
    }
  }
  return std::string_view::npos;
}

inline std::size_t close_len(std::string_view s, std::size_t i) { return s[i] == ')' ? 1 : 3; }

// Quotations followed by a "(Alias, paragraph N)" citation; the examined
// hint is the claim text written before the quotation.
inline std::vector<Anchor> quoted_anchors(std::string_view span, std::size_t body_start) {
  static const std::regex kCite(R"(^\s*([^,()]+?)\s*,\s*(?:[Pp]aragraphs?|[Pp]aras?\.?|¶+)\s*\[?(\d+)\]?(?:\s*(?:-|–|to)\s*\[?(\d+)\]?)?\s*$)");
  std::vector<Anchor> out;
  std::size_t cursor = body_start;
  std::size_t i = body_start;
  while (i < span.size()) {
    std::size_t qopen_len = 0;
    std::string_view qclose;
    if (starts_with_at(span, i, "“")) {
      qopen_len = 3;
      qclose = "”";
    } else if (span[i] == '"') {
      qopen_len = 1;
      qclose = "\"";
    } else {
      i += text::utf8_seq_len(static_cast<unsigned char>(span[i]));
      continue;
    }
    const std::size_t qstart = i;
    const std::size_t qend = span.find(qclose, i + qopen_len);
    if (qend == std::string_view::npos) break;
    std::size_t k = qend + qclose.size();
    while (k < span.size() && span[k] == ' ') ++k;
    if (k >= span.size() || span[k] != '(') {
      i = qend + qclose.size();
      continue;
    }
    const std::size_t cite_close = matching_close(span, k);
    if (cite_close == std::string_view::npos) break;
    const std::string cite(span.substr(k + 1, cite_close - k - 1));
    std::smatch m;
    if (!std::regex_match(cite, m, kCite)) {
      i = qend + qclose.size();
      continue;
    }
    Anchor a;
    a.cited_hint = std::string(span.substr(qstart + qopen_len, qend - qstart - qopen_len));
    a.cited_alias = std::string(text::trim(m.str(1)));
    const auto lo = static_cast<std::uint32_t>(std::stoul(m.str(2)));
    const auto hi = m[3].matched ? static_cast<std::uint32_t>(std::stoul(m.str(3))) : lo;
    a.locator = ParaRange{std::min(lo, hi), std::max(lo, hi)};

    // The quotation usually sits inside an explanatory "( ... )" group that
    // directly follows the claim text.
    std::size_t hint_end = qstart;
    std::size_t resume = cite_close + 1;
    std::size_t back = qstart;
    while (back > cursor && span[back - 1] == ' ') --back;
    if (back > cursor && span[back - 1] == '(') {
      hint_end = back - 1;
      const std::size_t outer_close = matching_close(span, back - 1);
      if (outer_close != std::string_view::npos) resume = outer_close + 1;
    }
    a.examined_hint = strip_hint(span.substr(cursor, hint_end - cursor));
    a.begin = cursor;
    a.end = resume;
    out.push_back(std::move(a));
    cursor = resume;
    i = resume;
  }
  return out;
}

// "<cited text>（相当于“<examined feature>”）" style correspondences.
inline std::vector<Anchor> equivalence_anchors(std::string_view span, std::size_t body_start) {
  static constexpr std::string_view kMarkers[] = {"相当于“", "公开了“", "相当于\"", "公开了\""};
  static constexpr std::string_view kDelims[] = {"，", "；", "：", "。", "、", "）", ")", "\n"};
  std::vector<Anchor> out;
  std::size_t cursor = body_start;
  std::size_t i = body_start;
  while (i < span.size()) {
    const bool open_full = starts_with_at(span, i, "（");
    if (!open_full && span[i] != '(') {
      i += text::utf8_seq_len(static_cast<unsigned char>(span[i]));
      continue;
    }
    const std::size_t close = matching_close(span, i);
    if (close == std::string_view::npos) break;
    const std::size_t inner_begin = i + (open_full ? 3 : 1);
    const std::string_view inner = span.substr(inner_begin, close - inner_begin);
    std::string examined;
    for (const auto mk : kMarkers) {
      const auto p = inner.find(mk);
      if (p == std::string_view::npos) continue;
      const std::string_view quote_close = mk.back() == '"' ? std::string_view("\"") : std::string_view("”");
      const auto q = inner.find(quote_close, p + mk.size());
      if (q == std::string_view::npos) continue;
      examined = std::string(inner.substr(p + mk.size(), q - p - mk.size()));
      break;
    }
    if (!examined.empty()) {
      std::size_t start = cursor;
      for (std::size_t j = cursor; j < i;) {
        bool hit = false;
        for (const auto d : kDelims) {
          if (starts_with_at(span, j, d)) {
            start = j + d.size();
            j += d.size();
            hit = true;
            break;
          }
        }
        if (!hit) j += text::utf8_seq_len(static_cast<unsigned char>(span[j]));
      }
      Anchor a;
      a.examined_hint = strip_hint(examined);
      a.cited_hint = strip_hint(span.substr(start, i - start));
      a.begin = start;
      a.end = close + close_len(span, close);
      if (!a.cited_hint.empty() && !a.examined_hint.empty()) out.push_back(std::move(a));
    }
    cursor = close + close_len(span, close);
    i = cursor;
  }
  return out;
}

struct Region {
  const std::string* source = nullptr;  // claim or paragraph text
  Span bounds;
};

struct Match {
  std::string text;
  double score = 0.0;
};

// Locates `hint` inside the regions: verbatim when possible, otherwise the
// window of consecutive clauses, as many as the hint has, with the highest
// mean clause-by-clause shingle Jaccard. Earliest window wins ties.
inline std::optional<Match> locate(const std::string& hint, const std::vector<Region>& regions,
                                   const XFileOptions& opt) {
  if (text::trim(hint).empty()) return std::nullopt;
  for (const auto& r : regions) {
    const std::string_view body(r.source->data() + r.bounds.begin, r.bounds.size());
    if (body.find(hint) != std::string_view::npos) return Match{hint, 1.0};
  }
  const auto hint_clauses = clause_units(hint, {0, hint.size()});
  const std::size_t m = hint_clauses.size();
  if (m == 0) return std::nullopt;
  std::vector<std::unordered_set<std::string_view>> hint_sets;
  for (const auto& c : hint_clauses)
    hint_sets.push_back(text::shingle_set(std::string_view(hint).substr(c.begin, c.size()), opt.shingle_size, true));

  std::optional<Match> best;
  for (const auto& r : regions) {
    const std::string_view src(*r.source);
    const auto units = clause_units(src, r.bounds);
    std::vector<std::unordered_set<std::string_view>> unit_sets;
    for (const auto& u : units) unit_sets.push_back(text::shingle_set(src.substr(u.begin, u.size()), opt.shingle_size, true));
    for (std::size_t w = 0; w + m <= units.size(); ++w) {
      double score = 0.0;
      for (std::size_t k = 0; k < m; ++k) score += text::jaccard(unit_sets[w + k], hint_sets[k]);
      score /= static_cast<double>(m);
      if (!best || score > best->score) {
        const std::size_t b = units[w].begin;
        const std::size_t e = units[w + m - 1].end;
        best = Match{std::string(src.substr(b, e - b)), score};
      }
    }
  }
  if (!best || best->score < opt.min_match_score) return std::nullopt;
  return best;
}

inline std::vector<const Paragraph*> paragraphs_in(const PatentRecord& p, const ParaRange& r) {
  std::vector<const Paragraph*> out;
  for (const auto& para : p.description)
    if (para.idx >= r.lo && para.idx <= r.hi) out.push_back(&para);
  return out;
}

}  // namespace detail

// Three stages per wrapper: select comment spans that tie an examined claim
// to a cited patent, pair the claim with the cited paragraphs the span
// names, then pair the sentences the examiner's correspondences point at.
inline std::vector<XFilePair> extract_xfile_pairs(const WrapperLink& link, const XFileOptions& opt = {},
                                                  const PatentNumberExtractor& extractor = RegexNumberExtractor{}) {
  std::vector<XFilePair> out;
  std::set<std::tuple<int, std::string, std::string>> seen;
  auto emit = [&](XFilePair p) {
    if (p.examined_text.empty() || p.cited_text.empty()) return;
    if (seen.emplace(static_cast<int>(p.level), p.examined_text, p.cited_text).second) out.push_back(std::move(p));
  };
  if (link.cited.empty()) return out;

  // Aliases and numbers are collected across the whole wrapper: an alias is
  // usually introduced once ("anticipated by Lee (US ...)") and reused.
  std::map<std::string, std::string> alias_to_number;
  for (const auto& section : link.wrapper.comment_sections)
    for (const auto& m : extractor.extract(section))
      if (!m.alias.empty()) alias_to_number[m.alias] = m.number;

  auto cited_by_number = [&](std::string_view number) -> const PatentRecord* {
    for (const auto& c : link.cited)
      if (same_patent(c.patent_number, number)) return &c;
    return nullptr;
  };

  for (std::size_t si = 0; si < link.wrapper.comment_sections.size(); ++si) {
    const std::string& section = link.wrapper.comment_sections[si];
    for (const auto& cs : detail::claim_spans(section)) {
      const std::string_view span(section.data() + cs.begin, cs.end - cs.begin);
      if (cs.claim_no == 0 || cs.claim_no > link.examined.claims.size()) {
        spdlog::info("span references claim {} not present in {}; skipped", cs.claim_no, link.examined.patent_number);
        continue;
      }
      const std::string& claim = link.examined.claims[cs.claim_no - 1];

      // Stage 1: which cited patent does this span talk about?
      const PatentRecord* cited = nullptr;
      for (const auto& m : extractor.extract(span))
        if ((cited = cited_by_number(m.number))) break;
      if (!cited) {
        for (const auto& [alias, number] : alias_to_number) {
          if (span.find(alias) != std::string_view::npos && (cited = cited_by_number(number))) break;
        }
      }
      if (!cited) continue;

      // Stage 2: paragraph-level pairs from the cited paragraph locators.
      const std::size_t body = static_cast<std::size_t>(std::find(span.begin(), span.end(), ':') - span.begin());
      const std::size_t body_start = body < span.size() ? body + 1 : 0;
      auto anchors = detail::quoted_anchors(span, body_start);
      for (auto& a : detail::equivalence_anchors(span, 0)) anchors.push_back(std::move(a));
      std::sort(anchors.begin(), anchors.end(), [](const auto& x, const auto& y) { return x.begin < y.begin; });

      const auto ranges = detail::locators(span);
      if (ranges.empty()) continue;
      bool locatable = true;
      for (const auto& r : ranges) locatable = locatable && !detail::paragraphs_in(*cited, r).empty();
      if (!locatable) {
        spdlog::info("span in section {} names a paragraph absent from {}; skipped", si, cited->patent_number);
        continue;
      }
      const WrapperSpan whole{si, cs.begin, cs.end};
      for (const auto& r : ranges) {
        std::string joined;
        for (const auto* para : detail::paragraphs_in(*cited, r)) {
          if (!joined.empty()) joined += "\n";
          joined += para->text;
        }
        emit({PairLevel::paragraph, claim, joined, link.examined.patent_number, cited->patent_number, whole});
      }

      // Stage 3: sentence-level pairs.
      const std::vector<detail::Region> claim_region{{&claim, {claim_body_offset(claim), claim.size()}}};
      auto cited_regions = [&](const std::optional<detail::ParaRange>& loc) {
        std::vector<detail::Region> rs;
        std::vector<detail::ParaRange> use = loc ? std::vector<detail::ParaRange>{*loc} : ranges;
        std::set<std::uint32_t> added;
        for (const auto& r : use)
          for (const auto* para : detail::paragraphs_in(*cited, r))
            if (added.insert(para->idx).second) rs.push_back({&para->text, {0, para->text.size()}});
        return rs;
      };

      bool any_anchor = false;
      for (const auto& a : anchors) {
        if (!a.cited_alias.empty() && alias_to_number.count(a.cited_alias) &&
            !same_patent(alias_to_number[a.cited_alias], cited->patent_number))
          continue;
        const auto regions = cited_regions(a.locator);
        const auto ex = detail::locate(a.examined_hint, claim_region, opt);
        const auto ci = detail::locate(a.cited_hint, regions, opt);
        if (!ex || !ci) continue;
        any_anchor = true;
        emit({PairLevel::sentence, ex->text, ci->text, link.examined.patent_number, cited->patent_number,
              {si, cs.begin + a.begin, cs.begin + a.end}});
      }

      if (!any_anchor) {
        // No usable correspondence: fall back to the most similar sentences.
        const auto regions = cited_regions(std::nullopt);
        const auto ex_sents = sentence_spans(claim, claim_region.front().bounds);
        double best = -1.0;
        std::string best_ex;
        std::string best_ci;
        for (const auto& es : ex_sents) {
          const std::string_view e = std::string_view(claim).substr(es.begin, es.size());
          const auto eset = text::shingle_set(e, opt.shingle_size, true);
          for (const auto& r : regions) {
            for (const auto& cs2 : sentence_spans(*r.source, r.bounds)) {
              const std::string_view c = std::string_view(*r.source).substr(cs2.begin, cs2.size());
              const double score = text::jaccard(eset, text::shingle_set(c, opt.shingle_size, true));
              if (score > best) {
                best = score;
                best_ex = std::string(e);
                best_ci = std::string(c);
              }
            }
          }
        }
        if (best > 0.0)
          emit({PairLevel::sentence, best_ex, best_ci, link.examined.patent_number, cited->patent_number, whole});
      }
    }
  }
  return out;
}

// True iff `fragment` occurs in the patent's claims or description, each
// field joined with newlines in order. Paragraph-level cited texts spanning
// several paragraphs satisfy this through the joined description.
inline bool is_verbatim_in(const PatentRecord& p, std::string_view fragment) {
  std::string claims;
  for (const auto& c : p.claims) claims += c + "\n";
  std::string desc;
  for (const auto& d : p.description) desc += d.text + "\n";
  return claims.find(fragment) != std::string::npos || desc.find(fragment) != std::string::npos;
}

// --- templates -------------------------------------------------------------------

// A training-sample template: the main body and the per-pair item, both with
// {{placeholder}} slots.
struct Template {
  std::string body;
  std::string item;
};

inline std::string render(const std::string& tpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < tpl.size()) {
    const auto open = tpl.find("{{", i);
    if (open == std::string::npos) {
      out.append(tpl, i, std::string::npos);
      break;
    }
    const auto close = tpl.find("}}", open + 2);
    if (close == std::string::npos) throw Error("bad_template", "unterminated placeholder");
    out.append(tpl, i, open - i);
    const std::string key = tpl.substr(open + 2, close - open - 2);
    const auto it = values.find(key);
    if (it == values.end()) throw Error("unknown_placeholder", key);
    out += it->second;
    i = close + 2;
  }
  return out;
}

inline Template builtin_xfile_template() {
  return {
      "human:\n"
      "Here are two patents, compare these two patents and extract the sentence pairs from each which is technically "
      "closest in presentation.\n"
      "Here is the claims and description from Patent {{examined_pn}}:\n"
      "{{examined_text}}\n"
      "Here is the claims and description from Patent {{cited_pn}}:\n"
      "{{cited_text}}\n"
      "gpt:\n"
      "Here are the technically closest sentence pairs in these two patents：\n"
      "{{pairs}}",
      "{{n}}.\n"
      "{{examined_sentence}}（from {{examined_pn}}），\n"
      "{{cited_sentence}} （from {{cited_pn}}）；\n",
  };
}

// Templates by id: "<dir>/<id>.txt" + "<dir>/<id>.item.txt", with the
// built-in "xfile_en" always available.
class TemplateStore {
 public:
  TemplateStore() { templates_["xfile_en"] = builtin_xfile_template(); }

  explicit TemplateStore(const std::filesystem::path& dir) : TemplateStore() {
    if (!std::filesystem::is_directory(dir)) return;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
      const std::string name = path.filename().string();
      if (path.extension() != ".txt" || (name.size() > 9 && name.substr(name.size() - 9) == ".item.txt")) continue;
      const std::string id = path.stem().string();
      const auto item = dir / (id + ".item.txt");
      if (!std::filesystem::exists(item)) continue;
      templates_[id] = {slurp(path), slurp(item)};
    }
  }

  const Template& get(const std::string& id) const {
    const auto it = templates_.find(id);
    if (it == templates_.end()) throw Error("unknown_template", id);
    return it->second;
  }

  void put(const std::string& id, Template t) { templates_[id] = std::move(t); }

 private:
  static std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  std::map<std::string, Template> templates_;
};

inline SyntheticDoc build_xfile_instruction(const std::vector<XFilePair>& pairs, const PatentRecord& examined,
                                            const PatentRecord& cited, const Template& tpl) {
  if (pairs.empty()) throw Error("empty_pairs", "at least one X-file pair is required");
  for (const auto& p : pairs) {
    if (!same_patent(p.examined_pn, examined.patent_number) || !same_patent(p.cited_pn, cited.patent_number))
      throw Error("inconsistent_pairs", "pairs must all link " + examined.patent_number + " and " + cited.patent_number);
  }
  std::string items;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    items += render(tpl.item, {{"n", std::to_string(i + 1)},
                               {"examined_sentence", pairs[i].examined_text},
                               {"cited_sentence", pairs[i].cited_text},
                               {"examined_pn", examined.patent_number},
                               {"cited_pn", cited.patent_number}});
  }
  SyntheticDoc doc;
  doc.kind = SyntheticKind::xfile_instruction;
  doc.text = render(tpl.body, {{"examined_pn", examined.patent_number},
                               {"cited_pn", cited.patent_number},
                               {"examined_text", render_patent_text(examined)},
                               {"cited_text", render_patent_text(cited)},
                               {"pairs", items}});
  doc.provenance = {examined.patent_number, cited.patent_number};
  return doc;
}

inline SyntheticDoc build_xfile_instruction(const std::vector<XFilePair>& pairs, const PatentRecord& examined,
                                            const PatentRecord& cited, const TemplateStore& store,
                                            const std::string& template_id) {
  return build_xfile_instruction(pairs, examined, cited, store.get(template_id));
}

}  // namespace iplm::synth
