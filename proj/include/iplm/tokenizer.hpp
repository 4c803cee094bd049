#pragma once

// Byte-level BPE: training, vocabulary merging, encoding with byte
// fallback, on-disk format, and embedding-matrix growth.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iplm/error.hpp"
#include "iplm/text.hpp"

namespace iplm::tok {

using TokenId = std::uint32_t;

struct Merge {
  std::string left;
  std::string right;
  bool operator==(const Merge&) const = default;
};

// Ordered token list (id = position) plus ordered merge rules. The first
// 256 tokens of every vocabulary built here are the single bytes, which
// makes encoding total on arbitrary input.
class Vocab {
 public:
  Vocab() = default;
  Vocab(std::vector<std::string> tokens, std::vector<Merge> merges) : tokens_(std::move(tokens)), merges_(std::move(merges)) {
    for (TokenId i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], i).second) throw Error("duplicate_token", "token listed twice at id " + std::to_string(i));
    }
  }

  static Vocab byte_level() {
    std::vector<std::string> tokens;
    tokens.reserve(256);
    for (int b = 0; b < 256; ++b) tokens.emplace_back(1, static_cast<char>(b));
    return Vocab(std::move(tokens), {});
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  bool contains(const std::string& t) const { return ids_.count(t) > 0; }

  std::optional<TokenId> id_of(const std::string& t) const {
    const auto it = ids_.find(t);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  // Appends a token if new; returns its id either way.
  TokenId intern(const std::string& t) {
    if (const auto it = ids_.find(t); it != ids_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(t);
    ids_.emplace(t, id);
    return id;
  }

  void add_merge(Merge m) { merges_.push_back(std::move(m)); }

 private:
  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, TokenId> ids_;
};

// --- pre-tokenization ------------------------------------------------------------

namespace detail {

enum class CharClass { space, letter, digit, punct };

inline CharClass classify(std::uint32_t cp) {
  if (text::is_space(cp)) return CharClass::space;
  if (cp >= '0' && cp <= '9') return CharClass::digit;
  if (text::is_symbol(cp)) return CharClass::punct;
  return CharClass::letter;
}

}  // namespace detail

// Splits text into chunks that merges never cross: runs of one character
// class, where a single space before a non-space run joins that run.
// Concatenating the chunks gives back the input bytes.
inline std::vector<std::string_view> pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  std::vector<std::pair<std::size_t, detail::CharClass>> cps;
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t len = std::min(text::utf8_seq_len(static_cast<unsigned char>(s[i])), s.size() - i);
    cps.emplace_back(i, detail::classify(text::decode_at(s, i)));
    i += len;
  }
  std::size_t k = 0;
  while (k < cps.size()) {
    const std::size_t start = cps[k].first;
    std::size_t j = k;
    if (cps[k].second == detail::CharClass::space) {
      while (j < cps.size() && cps[j].second == detail::CharClass::space) ++j;
      // leave the last space of the run to the following word
      if (j < cps.size() && s[cps[j - 1].first] == ' ') {
        if (j - 1 > k) {
          out.push_back(s.substr(start, cps[j - 1].first - start));
          k = j - 1;
          continue;
        }
        const auto cls = cps[j].second;
        ++j;
        while (j < cps.size() && cps[j].second == cls) ++j;
      }
    } else {
      const auto cls = cps[k].second;
      while (j < cps.size() && cps[j].second == cls) ++j;
    }
    const std::size_t end = j < cps.size() ? cps[j].first : s.size();
    out.push_back(s.substr(start, end - start));
    k = j;
  }
  return out;
}

// --- training --------------------------------------------------------------------

struct TrainOptions {
  std::size_t min_frequency = 2;
};

// Standard BPE over pre-tokenized word types: repeatedly merge the most
// frequent adjacent pair, ties to the lexicographically smallest
// (left, right) byte strings. Stops after `target_new_tokens` new tokens or
// when no pair reaches min_frequency. The result does not depend on `seed`;
// it is accepted so every stage shares one call shape.
inline Vocab train_bpe(const std::vector<std::string>& corpus_texts, std::size_t target_new_tokens,
                       std::uint64_t /*seed*/ = 0, const TrainOptions& opt = {}) {
  std::map<std::string, std::uint64_t> type_counts;
  for (const auto& t : corpus_texts)
    for (const auto chunk : pretokenize(t)) ++type_counts[std::string(chunk)];
  if (type_counts.empty()) throw Error("corpus_too_small", "corpus has no bytes to learn from");

  Vocab vocab = Vocab::byte_level();
  if (target_new_tokens == 0) return vocab;

  std::vector<std::vector<TokenId>> words;
  std::vector<std::uint64_t> freq;
  for (const auto& [w, c] : type_counts) {
    std::vector<TokenId> ids;
    for (const char ch : w) ids.push_back(static_cast<unsigned char>(ch));
    words.push_back(std::move(ids));
    freq.push_back(c);
  }

  using Pair = std::pair<TokenId, TokenId>;
  struct PairHash {
    std::size_t operator()(const Pair& p) const { return (static_cast<std::size_t>(p.first) << 32) ^ p.second; }
  };
  std::unordered_map<Pair, std::int64_t, PairHash> counts;
  std::unordered_map<Pair, std::unordered_set<std::uint32_t>, PairHash> where;
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) {
    const auto& w = words[wi];
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      counts[{w[i], w[i + 1]}] += static_cast<std::int64_t>(freq[wi]);
      where[{w[i], w[i + 1]}].insert(wi);
    }
  }

  struct Entry {
    std::int64_t count;
    Pair pair;
  };
  // Higher count first; among equal counts the smaller (left, right) strings.
  auto worse = [&vocab](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count < b.count;
    const auto& al = vocab.token(a.pair.first);
    const auto& bl = vocab.token(b.pair.first);
    if (al != bl) return al > bl;
    return vocab.token(a.pair.second) > vocab.token(b.pair.second);
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (const auto& [p, c] : counts) heap.push({c, p});

  if (heap.empty()) throw Error("corpus_too_small", "corpus has no adjacent byte pairs to merge");

  std::size_t added = 0;
  while (added < target_new_tokens && !heap.empty()) {
    const Entry top = heap.top();
    heap.pop();
    const auto it = counts.find(top.pair);
    if (it == counts.end() || it->second != top.count) continue;  // stale
    if (top.count < static_cast<std::int64_t>(opt.min_frequency)) break;

    const std::string merged = vocab.token(top.pair.first) + vocab.token(top.pair.second);
    const bool is_new = !vocab.contains(merged);
    const TokenId new_id = vocab.intern(merged);
    vocab.add_merge({vocab.token(top.pair.first), vocab.token(top.pair.second)});
    if (is_new) ++added;

    std::vector<std::uint32_t> affected(where[top.pair].begin(), where[top.pair].end());
    std::sort(affected.begin(), affected.end());
    std::unordered_map<Pair, std::int64_t, PairHash> delta;
    for (const auto wi : affected) {
      auto& w = words[wi];
      const auto f = static_cast<std::int64_t>(freq[wi]);
      for (std::size_t i = 0; i + 1 < w.size(); ++i) delta[{w[i], w[i + 1]}] -= f;
      std::vector<TokenId> next;
      next.reserve(w.size());
      for (std::size_t i = 0; i < w.size();) {
        if (i + 1 < w.size() && w[i] == top.pair.first && w[i + 1] == top.pair.second) {
          next.push_back(new_id);
          i += 2;
        } else {
          next.push_back(w[i]);
          ++i;
        }
      }
      w = std::move(next);
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        delta[{w[i], w[i + 1]}] += f;
        where[{w[i], w[i + 1]}].insert(wi);
      }
    }
    for (const auto& [p, d] : delta) {
      if (d == 0) continue;
      auto& c = counts[p];
      c += d;
      if (c <= 0) {
        counts.erase(p);
        where.erase(p);
      } else {
        heap.push({c, p});
      }
    }
    counts.erase(top.pair);
    where.erase(top.pair);
  }
  return vocab;
}

// --- merging ---------------------------------------------------------------------

// Base tokens keep their ids; learned tokens absent from the base follow in
// learned order, optionally capped at `max_novel`. Learned merges whose
// operands and result all exist in the output are appended after the base
// merges, so base segmentation is applied first.
inline Vocab merge_vocab(const Vocab& base, const Vocab& learned, std::optional<std::size_t> max_novel = std::nullopt) {
  Vocab out(base.tokens(), base.merges());
  std::size_t novel = 0;
  for (const auto& t : learned.tokens()) {
    if (out.contains(t)) continue;
    if (max_novel && novel >= *max_novel) break;
    out.intern(t);
    ++novel;
  }
  std::unordered_set<std::string> have;
  for (const auto& m : base.merges()) have.insert(m.left + '\0' + m.right);
  for (const auto& m : learned.merges()) {
    if (!out.contains(m.left) || !out.contains(m.right) || !out.contains(m.left + m.right)) continue;
    if (have.insert(m.left + '\0' + m.right).second) out.add_merge(m);
  }
  return out;
}

inline std::size_t novel_token_count(const Vocab& base, const Vocab& merged) {
  std::size_t n = 0;
  for (const auto& t : merged.tokens())
    if (!base.contains(t)) ++n;
  return n;
}

// --- encoding --------------------------------------------------------------------

class Tokenizer {
 public:
  explicit Tokenizer(Vocab vocab) : vocab_(std::move(vocab)) {
    for (int b = 0; b < 256; ++b) {
      const auto id = vocab_.id_of(std::string(1, static_cast<char>(b)));
      if (!id) throw Error("missing_byte_token", "vocabulary lacks byte " + std::to_string(b));
      byte_ids_[b] = *id;
    }
    for (std::uint32_t r = 0; r < vocab_.merges().size(); ++r) {
      const auto& m = vocab_.merges()[r];
      const auto l = vocab_.id_of(m.left);
      const auto rt = vocab_.id_of(m.right);
      const auto res = vocab_.id_of(m.left + m.right);
      if (!l || !rt || !res) throw Error("bad_merge", "merge " + std::to_string(r) + " references unknown tokens");
      ranks_.emplace(key(*l, *rt), std::make_pair(r, *res));
    }
  }

  const Vocab& vocab() const { return vocab_; }

  std::vector<TokenId> encode(std::string_view s) const {
    std::vector<TokenId> out;
    for (const auto chunk : pretokenize(s)) encode_chunk(chunk, out);
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (const auto id : ids) out += vocab_.token(id);
    return out;
  }

 private:
  static std::uint64_t key(TokenId a, TokenId b) { return (static_cast<std::uint64_t>(a) << 32) | b; }

  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
    std::vector<TokenId> ids;
    ids.reserve(chunk.size());
    for (const char c : chunk) ids.push_back(byte_ids_[static_cast<unsigned char>(c)]);
    while (ids.size() > 1) {
      std::uint32_t best_rank = UINT32_MAX;
      TokenId best_result = 0;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        const auto it = ranks_.find(key(ids[i], ids[i + 1]));
        if (it != ranks_.end() && it->second.first < best_rank) {
          best_rank = it->second.first;
          best_result = it->second.second;
        }
      }
      if (best_rank == UINT32_MAX) break;
      const auto& m = vocab_.merges()[best_rank];
      const TokenId l = *vocab_.id_of(m.left);
      const TokenId r = *vocab_.id_of(m.right);
      std::vector<TokenId> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == l && ids[i + 1] == r) {
          next.push_back(best_result);
          i += 2;
        } else {
          next.push_back(ids[i++]);
        }
      }
      ids = std::move(next);
    }
    out.insert(out.end(), ids.begin(), ids.end());
  }

  Vocab vocab_;
  TokenId byte_ids_[256]{};
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, TokenId>> ranks_;
};

// tokens under a / tokens under b; > 1 means b compresses better.
inline double compression_ratio(std::string_view text, const Tokenizer& a, const Tokenizer& b) {
  if (text.empty()) return 1.0;
  return static_cast<double>(a.encode(text).size()) / static_cast<double>(b.encode(text).size());
}

// --- files -----------------------------------------------------------------------

// Backslash escapes for control bytes, backslash and tab; bytes >= 0x80 are
// kept raw only when the whole token is valid UTF-8.
inline std::string escape_token(std::string_view t) {
  static constexpr char kHex[] = "0123456789abcdef";
  const bool raw_high = text::is_valid_utf8(t);
  std::string out;
  for (const char ch : t) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '\n') {
      out += "\\n";
    } else if (c == '\t') {
      out += "\\t";
    } else if (c == '\r') {
      out += "\\r";
    } else if (c < 0x20 || c == 0x7F || (c >= 0x80 && !raw_high)) {
      out += "\\x";
      out += kHex[c >> 4];
      out += kHex[c & 0xF];
    } else {
      out += ch;
    }
  }
  return out;
}

inline std::string unescape_token(std::string_view s) {
  auto hex = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw Error("bad_escape", "invalid hex digit");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i >= s.size()) throw Error("bad_escape", "dangling backslash");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      case 'x':
        if (i + 2 >= s.size()) throw Error("bad_escape", "short \\x escape");
        out += static_cast<char>(hex(s[i + 1]) * 16 + hex(s[i + 2]));
        i += 2;
        break;
      default: throw Error("bad_escape", std::string("unknown escape \\") + s[i]);
    }
  }
  return out;
}

// Writes "<stem>.tokens" (one escaped token per line) and "<stem>.merges"
// (escaped left, tab, escaped right).
inline void save_vocab(const Vocab& v, const std::filesystem::path& stem) {
  std::ofstream tokens(stem.string() + ".tokens", std::ios::binary);
  std::ofstream merges(stem.string() + ".merges", std::ios::binary);
  if (!tokens || !merges) throw Error("io_error", "cannot write vocabulary " + stem.string());
  for (const auto& t : v.tokens()) tokens << escape_token(t) << '\n';
  for (const auto& m : v.merges()) merges << escape_token(m.left) << '\t' << escape_token(m.right) << '\n';
}

inline Vocab load_vocab(const std::filesystem::path& stem) {
  std::ifstream tokens(stem.string() + ".tokens", std::ios::binary);
  std::ifstream merges(stem.string() + ".merges", std::ios::binary);
  if (!tokens || !merges) throw Error("io_error", "cannot read vocabulary " + stem.string());
  std::vector<std::string> ts;
  std::vector<Merge> ms;
  for (std::string line; std::getline(tokens, line);) ts.push_back(unescape_token(line));
  for (std::string line; std::getline(merges, line);) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("malformed", "merge line without tab");
    ms.push_back({unescape_token(line.substr(0, tab)), unescape_token(line.substr(tab + 1))});
  }
  return Vocab(std::move(ts), std::move(ms));
}

// --- embeddings ------------------------------------------------------------------

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

enum class RowInit { mean, zero };

// Grows the vocabulary dimension; existing rows are copied bit for bit.
inline Matrix resize_embeddings(const Matrix& m, std::size_t new_rows, RowInit init = RowInit::mean) {
  if (m.rows < 1 || m.cols < 1) throw Error("bad_shape", "embedding matrix must be at least 1x1");
  if (new_rows < m.rows) throw Error("shrink_forbidden", "cannot drop embedding rows");
  Matrix out(new_rows, m.cols);
  std::copy(m.data.begin(), m.data.end(), out.data.begin());
  if (init == RowInit::mean && new_rows > m.rows) {
    std::vector<double> mean(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t c = 0; c < m.cols; ++c) mean[c] += m.at(r, c);
    for (auto& v : mean) v /= static_cast<double>(m.rows);
    for (std::size_t r = m.rows; r < new_rows; ++r) std::copy(mean.begin(), mean.end(), out.data.begin() + r * m.cols);
  }
  return out;
}

}  // namespace iplm::tok
