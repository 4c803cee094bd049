#pragma once

// Corpus data model: documents, patents and file-wrapper records, their
// validation rules and the line-delimited JSON formats they travel in.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "iplm/error.hpp"
#include "iplm/text.hpp"

namespace iplm {

using ojson = nlohmann::ordered_json;

enum class Category {
  Web,
  News,
  Patent,
  Paper,
  Book,
  Chat,
  Exam,
  Code,
  FileWrapper,
  ResearchReport,
  SupervisedData,
  Unknown,
};

inline constexpr std::array<Category, 11> kAllCategories = {
    Category::Web,  Category::News, Category::Patent,      Category::Paper,          Category::Book,
    Category::Chat, Category::Exam, Category::Code,        Category::FileWrapper,    Category::ResearchReport,
    Category::SupervisedData};

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::Web: return "Web";
    case Category::News: return "News";
    case Category::Patent: return "Patent";
    case Category::Paper: return "Paper";
    case Category::Book: return "Book";
    case Category::Chat: return "Chat";
    case Category::Exam: return "Exam";
    case Category::Code: return "Code";
    case Category::FileWrapper: return "FileWrapper";
    case Category::ResearchReport: return "ResearchReport";
    case Category::SupervisedData: return "SupervisedData";
    case Category::Unknown: break;
  }
  return "Unknown";
}

inline Category parse_category(std::string_view s) {
  for (const auto c : kAllCategories)
    if (to_string(c) == s) return c;
  return Category::Unknown;
}

enum class Language { en, zh, Unknown };

inline std::string_view to_string(Language l) {
  switch (l) {
    case Language::en: return "en";
    case Language::zh: return "zh";
    case Language::Unknown: break;
  }
  return "unknown";
}

inline Language parse_language(std::string_view s) {
  if (s == "en") return Language::en;
  if (s == "zh") return Language::zh;
  return Language::Unknown;
}

struct Document {
  std::string id;
  std::string text;
  Category category = Category::Unknown;
  Language language = Language::Unknown;
  std::map<std::string, std::string> attributes;
  std::uint64_t token_count = 0;

  std::string attribute(const std::string& key) const {
    const auto it = attributes.find(key);
    return it == attributes.end() ? std::string{} : it->second;
  }
};

struct Paragraph {
  std::uint32_t idx = 0;
  std::string text;
};

struct PatentRecord {
  std::string patent_number;
  std::vector<std::string> claims;
  std::vector<Paragraph> description;
  std::string abstract;
  std::string ipc_code;
  std::string family_id;
  Language language = Language::Unknown;

  const Paragraph* paragraph(std::uint32_t idx) const {
    for (const auto& p : description)
      if (p.idx == idx) return &p;
    return nullptr;
  }
};

struct FileWrapperRecord {
  std::string examined_patent_number;
  std::vector<std::string> cited_patent_numbers;
  std::vector<std::string> comment_sections;
  Language language = Language::Unknown;
};

// One violated invariant: the offending field and a readable description.
struct Violation {
  std::string field;
  std::string message;

  bool operator==(const Violation&) const = default;
};

inline std::vector<Violation> validate_document(const Document& doc) {
  std::vector<Violation> v;
  if (doc.id.empty()) v.push_back({"id", "empty id"});
  if (text::trim(doc.text).empty()) v.push_back({"text", "empty text"});
  if (!text::is_valid_utf8(doc.text) || !text::is_valid_utf8(doc.id)) v.push_back({"text", "invalid utf-8"});
  if (doc.category == Category::Unknown) v.push_back({"category", "unknown category"});
  if (doc.language == Language::Unknown) v.push_back({"language", "unknown language"});
  return v;
}

inline std::vector<Violation> validate_patent(const PatentRecord& p) {
  std::vector<Violation> v;
  if (text::trim(p.patent_number).empty()) v.push_back({"patent_number", "empty patent number"});
  if (p.claims.empty() && p.description.empty()) v.push_back({"claims", "no claims and no description"});
  for (std::size_t i = 1; i < p.description.size(); ++i) {
    if (p.description[i].idx <= p.description[i - 1].idx) {
      v.push_back({"description", "paragraph indices not strictly increasing"});
      break;
    }
  }
  if (p.language == Language::Unknown) v.push_back({"language", "unknown language"});
  return v;
}

// `for_synthesis` additionally requires at least one cited patent.
inline std::vector<Violation> validate_wrapper(const FileWrapperRecord& w, bool for_synthesis = true) {
  std::vector<Violation> v;
  if (text::trim(w.examined_patent_number).empty())
    v.push_back({"examined_patent_number", "empty examined patent number"});
  if (for_synthesis && w.cited_patent_numbers.empty())
    v.push_back({"cited_patent_numbers", "no cited patents"});
  if (w.language == Language::Unknown) v.push_back({"language", "unknown language"});
  return v;
}

// --- JSON ------------------------------------------------------------------

inline ojson to_json(const Document& d) {
  ojson j;
  j["id"] = d.id;
  j["text"] = d.text;
  j["category"] = std::string(to_string(d.category));
  j["language"] = std::string(to_string(d.language));
  j["attributes"] = ojson::object();
  for (const auto& [k, val] : d.attributes) j["attributes"][k] = val;
  j["token_count"] = d.token_count;
  return j;
}

inline ojson to_json(const PatentRecord& p) {
  ojson j;
  j["patent_number"] = p.patent_number;
  j["claims"] = p.claims;
  j["description"] = ojson::array();
  for (const auto& para : p.description) j["description"].push_back({{"idx", para.idx}, {"text", para.text}});
  j["abstract"] = p.abstract;
  j["ipc_code"] = p.ipc_code;
  j["family_id"] = p.family_id;
  j["language"] = std::string(to_string(p.language));
  return j;
}

inline ojson to_json(const FileWrapperRecord& w) {
  ojson j;
  j["examined_patent_number"] = w.examined_patent_number;
  j["cited_patent_numbers"] = w.cited_patent_numbers;
  j["comment_sections"] = w.comment_sections;
  j["language"] = std::string(to_string(w.language));
  return j;
}

namespace detail {

template <class J>
std::string req_string(const J& j, const char* key) {
  if (!j.contains(key)) throw Error("malformed", std::string("missing field '") + key + "'");
  if (!j.at(key).is_string()) throw Error("malformed", std::string("field '") + key + "' is not a string");
  return j.at(key).template get<std::string>();
}

template <class J>
std::string opt_string(const J& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return {};
  if (!j.at(key).is_string()) throw Error("malformed", std::string("field '") + key + "' is not a string");
  return j.at(key).template get<std::string>();
}

template <class J>
std::vector<std::string> string_list(const J& j, const char* key, bool required) {
  std::vector<std::string> out;
  if (!j.contains(key)) {
    if (required) throw Error("malformed", std::string("missing field '") + key + "'");
    return out;
  }
  if (!j.at(key).is_array()) throw Error("malformed", std::string("field '") + key + "' is not an array");
  for (const auto& e : j.at(key)) {
    if (!e.is_string()) throw Error("malformed", std::string("field '") + key + "' holds a non-string");
    out.push_back(e.template get<std::string>());
  }
  return out;
}

}  // namespace detail

template <class J>
Document document_from_json(const J& j) {
  if (!j.is_object()) throw Error("malformed", "record is not a JSON object");
  Document d;
  d.id = detail::req_string(j, "id");
  d.text = detail::req_string(j, "text");
  d.category = parse_category(detail::req_string(j, "category"));
  d.language = parse_language(detail::req_string(j, "language"));
  if (j.contains("attributes") && !j.at("attributes").is_null()) {
    if (!j.at("attributes").is_object()) throw Error("malformed", "field 'attributes' is not an object");
    for (const auto& [k, val] : j.at("attributes").items()) {
      if (!val.is_string()) throw Error("malformed", "attribute '" + k + "' is not a string");
      d.attributes[k] = val.template get<std::string>();
    }
  }
  if (j.contains("token_count") && !j.at("token_count").is_null()) {
    const auto& t = j.at("token_count");
    if (!t.is_number_unsigned()) throw Error("malformed", "field 'token_count' is not a nonnegative integer");
    d.token_count = t.template get<std::uint64_t>();
  }
  return d;
}

template <class J>
PatentRecord patent_from_json(const J& j) {
  if (!j.is_object()) throw Error("malformed", "record is not a JSON object");
  PatentRecord p;
  p.patent_number = detail::req_string(j, "patent_number");
  p.claims = detail::string_list(j, "claims", false);
  if (j.contains("description") && !j.at("description").is_null()) {
    if (!j.at("description").is_array()) throw Error("malformed", "field 'description' is not an array");
    for (const auto& e : j.at("description")) {
      if (!e.is_object() || !e.contains("idx") || !e.at("idx").is_number_unsigned())
        throw Error("malformed", "description entry needs a nonnegative integer 'idx'");
      p.description.push_back({e.at("idx").template get<std::uint32_t>(), detail::req_string(e, "text")});
    }
  }
  p.abstract = detail::opt_string(j, "abstract");
  p.ipc_code = detail::opt_string(j, "ipc_code");
  p.family_id = detail::opt_string(j, "family_id");
  p.language = parse_language(detail::req_string(j, "language"));
  return p;
}

template <class J>
FileWrapperRecord wrapper_from_json(const J& j) {
  if (!j.is_object()) throw Error("malformed", "record is not a JSON object");
  FileWrapperRecord w;
  w.examined_patent_number = detail::req_string(j, "examined_patent_number");
  w.cited_patent_numbers = detail::string_list(j, "cited_patent_numbers", true);
  w.comment_sections = detail::string_list(j, "comment_sections", true);
  w.language = parse_language(detail::req_string(j, "language"));
  return w;
}

// --- loading ---------------------------------------------------------------

enum class Schema { document, patent, wrapper };

struct Rejection {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

template <class T>
struct LoadResult {
  std::vector<T> records;
  std::vector<Rejection> rejected;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw Error("io_error", "read failure on " + path);
  return lines;
}

namespace detail {

inline std::string join_messages(const std::vector<Violation>& v) {
  std::string out;
  for (const auto& x : v) {
    if (!out.empty()) out += "; ";
    out += x.message;
  }
  return out;
}

template <class T, class Parse, class Validate>
LoadResult<T> load_lines(const std::vector<std::string>& lines, Parse parse, Validate validate) {
  LoadResult<T> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (text::trim(line).empty()) continue;
    if (!text::is_valid_utf8(line)) {
      out.rejected.push_back({i + 1, "invalid utf-8"});
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      T rec = parse(j);
      const auto violations = validate(rec, out.records);
      if (!violations.empty()) {
        out.rejected.push_back({i + 1, join_messages(violations)});
        continue;
      }
      out.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      out.rejected.push_back({i + 1, std::string("malformed json: ") + e.what()});
    } catch (const Error& e) {
      out.rejected.push_back({i + 1, e.what()});
    }
  }
  return out;
}

}  // namespace detail

inline LoadResult<Document> parse_documents(const std::vector<std::string>& lines) {
  std::unordered_set<std::string> seen;
  return detail::load_lines<Document>(
      lines, [](const auto& j) { return document_from_json(j); },
      [&seen](const Document& d, const std::vector<Document>&) {
        auto v = validate_document(d);
        if (v.empty() && !seen.insert(d.id).second) v.push_back({"id", "duplicate id"});
        return v;
      });
}

inline LoadResult<PatentRecord> parse_patents(const std::vector<std::string>& lines) {
  return detail::load_lines<PatentRecord>(
      lines, [](const auto& j) { return patent_from_json(j); },
      [](const PatentRecord& p, const std::vector<PatentRecord>&) { return validate_patent(p); });
}

inline LoadResult<FileWrapperRecord> parse_wrappers(const std::vector<std::string>& lines) {
  return detail::load_lines<FileWrapperRecord>(
      lines, [](const auto& j) { return wrapper_from_json(j); },
      [](const FileWrapperRecord& w, const std::vector<FileWrapperRecord>&) { return validate_wrapper(w, true); });
}

inline LoadResult<Document> load_documents(const std::string& path) { return parse_documents(read_lines(path)); }
inline LoadResult<PatentRecord> load_patents(const std::string& path) { return parse_patents(read_lines(path)); }
inline LoadResult<FileWrapperRecord> load_wrappers(const std::string& path) { return parse_wrappers(read_lines(path)); }

// Schema-dispatched loader; exactly one of the record vectors is filled.
struct CorpusLoad {
  Schema schema = Schema::document;
  std::vector<Document> documents;
  std::vector<PatentRecord> patents;
  std::vector<FileWrapperRecord> wrappers;
  std::vector<Rejection> rejected;
};

inline CorpusLoad load_corpus(const std::string& path, Schema schema) {
  CorpusLoad out;
  out.schema = schema;
  switch (schema) {
    case Schema::document: {
      auto r = load_documents(path);
      out.documents = std::move(r.records);
      out.rejected = std::move(r.rejected);
      break;
    }
    case Schema::patent: {
      auto r = load_patents(path);
      out.patents = std::move(r.records);
      out.rejected = std::move(r.rejected);
      break;
    }
    case Schema::wrapper: {
      auto r = load_wrappers(path);
      out.wrappers = std::move(r.records);
      out.rejected = std::move(r.rejected);
      break;
    }
  }
  return out;
}

template <class T>
void write_jsonl(const std::string& path, const std::vector<T>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write " + path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline void write_json_lines(const std::string& path, const std::vector<ojson>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write " + path);
  for (const auto& j : lines) out << j.dump() << '\n';
}

}  // namespace iplm
