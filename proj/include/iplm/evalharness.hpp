#pragma once

// Evaluation metrics (macro-F1, exam points, BLEU, exact match, PPA) and the
// pairwise judge protocol with position swapping.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "iplm/corpus.hpp"
#include "iplm/error.hpp"
#include "iplm/text.hpp"
#include "iplm/transport.hpp"

namespace iplm::eval {

// --- instances -------------------------------------------------------------------

enum class Task { qa, writing, classification, summary, reasoning, correction, translation, exam, match };

inline constexpr std::pair<Task, std::string_view> kTaskNames[] = {
    {Task::qa, "qa"},           {Task::writing, "writing"},         {Task::classification, "classification"},
    {Task::summary, "summary"}, {Task::reasoning, "reasoning"},     {Task::correction, "correction"},
    {Task::translation, "translation"}, {Task::exam, "exam"}, {Task::match, "match"}};

inline std::string_view to_string(Task t) {
  for (const auto& [k, n] : kTaskNames)
    if (k == t) return n;
  return "qa";
}

inline Task parse_task(std::string_view s) {
  for (const auto& [k, n] : kTaskNames)
    if (n == s) return k;
  throw Error("malformed", "unknown task '" + std::string(s) + "'");
}

struct EvalInstance {
  std::string id;
  Task task = Task::qa;
  std::string prompt;
  std::string reference;  // text, label, or answer key letter/index
  Language language = Language::en;
  std::vector<std::string> options;  // multiple choice only
  std::optional<std::size_t> key_index;
};

inline std::vector<std::string> validate(const EvalInstance& e) {
  std::vector<std::string> errs;
  if (e.id.empty()) errs.emplace_back("id: empty");
  if (!e.options.empty() || e.task == Task::exam) {
    if (e.options.size() < 2) errs.emplace_back("options: multiple choice needs at least 2");
    if (!e.key_index || *e.key_index >= e.options.size()) errs.emplace_back("key_index: missing or out of range");
  }
  return errs;
}

inline EvalInstance instance_from_json(const nlohmann::json& j) {
  EvalInstance e;
  try {
    e.id = j.at("id").get<std::string>();
    e.task = parse_task(j.at("task").get<std::string>());
    e.prompt = j.value("prompt", "");
    e.reference = j.value("reference", "");
    e.language = j.value("language", "en") == "zh" ? Language::zh : Language::en;
    if (j.contains("options")) e.options = j.at("options").get<std::vector<std::string>>();
    if (j.contains("key_index")) e.key_index = j.at("key_index").get<std::size_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error("malformed", ex.what());
  }
  if (const auto errs = validate(e); !errs.empty()) throw Error("malformed", errs.front());
  return e;
}

// --- classification and exam -----------------------------------------------------

// Unweighted mean of per-label F1 over labels occurring in gold or predictions.
inline double f1_macro(const std::vector<std::string>& predictions, const std::vector<std::string>& gold) {
  if (predictions.empty() || gold.empty()) throw Error("precondition", "empty input");
  if (predictions.size() != gold.size()) throw Error("precondition", "predictions and gold differ in length");
  std::map<std::string, std::array<std::uint64_t, 3>> c;  // tp, fp, fn
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predictions[i] == gold[i]) {
      ++c[gold[i]][0];
    } else {
      ++c[predictions[i]][1];
      ++c[gold[i]][2];
    }
  }
  double sum = 0.0;
  for (const auto& [label, k] : c) sum += 2.0 * static_cast<double>(k[0]) / static_cast<double>(2 * k[0] + k[1] + k[2]);
  return sum / static_cast<double>(c.size());
}

struct ExamScore {
  std::size_t correct = 0;
  double points = 0.0;
  bool pass = false;
};

inline constexpr double kPointsPerQuestion = 0.5;
inline constexpr double kPassMark = 60.0;

inline ExamScore score_exam(const std::vector<std::string>& answers, const std::vector<std::string>& key) {
  if (answers.size() != key.size())
    throw Error("precondition", "answers (" + std::to_string(answers.size()) + ") and key (" + std::to_string(key.size()) +
                                    ") differ in length");
  ExamScore s;
  for (std::size_t i = 0; i < key.size(); ++i)
    if (answers[i] == key[i]) ++s.correct;
  s.points = kPointsPerQuestion * static_cast<double>(s.correct);
  s.pass = s.points >= kPassMark;
  return s;
}

// --- BLEU ------------------------------------------------------------------------

// Whitespace tokens for English; one token per non-space character for Chinese.
inline std::vector<std::string> bleu_tokens(std::string_view s, Language lang) {
  std::vector<std::string> out;
  if (lang == Language::zh) {
    for (std::size_t i = 0; i < s.size();) {
      const std::size_t len = std::min(text::utf8_seq_len(static_cast<unsigned char>(s[i])), s.size() - i);
      if (!text::is_space(text::decode_at(s, i))) out.emplace_back(s.substr(i, len));
      i += len;
    }
    return out;
  }
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

using Tokens = std::vector<std::string>;

struct BleuStats {
  std::array<std::uint64_t, 4> matches{};
  std::array<std::uint64_t, 4> totals{};
  std::uint64_t cand_len = 0;
  std::uint64_t ref_len = 0;
};

inline std::map<std::vector<std::string>, std::uint64_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::uint64_t> c;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++c[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                            t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

inline void accumulate(BleuStats& st, const Tokens& cand, const std::vector<Tokens>& refs) {
  st.cand_len += cand.size();
  // closest reference length, shorter on ties
  std::size_t best = refs.empty() ? 0 : refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t x) { return x > cand.size() ? x - cand.size() : cand.size() - x; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  st.ref_len += best;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cc = ngram_counts(cand, n);
    std::map<Tokens, std::uint64_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
    for (const auto& [g, k] : cc) {
      const auto it = max_ref.find(g);
      st.matches[n - 1] += std::min(k, it == max_ref.end() ? 0 : it->second);
      st.totals[n - 1] += k;
    }
  }
}

// Geometric mean of modified 1..4-gram precisions times the brevity penalty.
// Orders 2-4 with no match use (matches + 1) / (total + 1); no unigram
// match gives 0.
inline double bleu_from(const BleuStats& st) {
  if (st.cand_len == 0) return 0.0;
  if (st.matches[0] == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(st.matches[n]);
    double t = static_cast<double>(st.totals[n]);
    if (n > 0 && st.matches[n] == 0) {
      m += 1.0;
      t += 1.0;
    }
    log_sum += std::log(m / t);
  }
  const double c = static_cast<double>(st.cand_len);
  const double r = static_cast<double>(st.ref_len);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

inline double bleu(const Tokens& candidate, const std::vector<Tokens>& references) {
  if (candidate.empty()) {
    spdlog::warn("bleu: empty candidate scored 0");
    return 0.0;
  }
  BleuStats st;
  accumulate(st, candidate, references);
  return bleu_from(st);
}

inline double bleu(std::string_view candidate, const std::vector<std::string>& references, Language lang = Language::en) {
  std::vector<Tokens> refs;
  for (const auto& r : references) refs.push_back(bleu_tokens(r, lang));
  return bleu(bleu_tokens(candidate, lang), refs);
}

inline double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references) {
  if (candidates.size() != references.size()) throw Error("precondition", "candidates and references differ in length");
  BleuStats st;
  for (std::size_t i = 0; i < candidates.size(); ++i) accumulate(st, candidates[i], references[i]);
  return bleu_from(st);
}

// --- exact match -----------------------------------------------------------------

inline std::string normalize_for_match(std::string_view s) {
  std::string t = text::replace_all(std::string(s), "\r\n", "\n");
  t = text::replace_all(std::move(t), "\r", "\n");
  return std::string(text::trim(t));
}

inline int exact_match(std::string_view prediction, std::string_view reference) {
  return normalize_for_match(prediction) == normalize_for_match(reference) ? 1 : 0;
}

// --- PPA -------------------------------------------------------------------------

using Ordering = std::vector<std::size_t>;  // displayed slot -> underlying option

inline std::vector<Ordering> cyclic_rotations(std::size_t k) {
  std::vector<Ordering> out;
  for (std::size_t r = 0; r < k; ++r) {
    Ordering o(k);
    for (std::size_t s = 0; s < k; ++s) o[s] = (s + r) % k;
    out.push_back(std::move(o));
  }
  return out;
}

struct PpaQuestion {
  double value = 0.0;
  std::size_t unmappable = 0;
};

// Share of orderings whose (underlying) answer equals the plurality answer;
// unmappable answers count as disagreeing.
inline PpaQuestion ppa(const std::vector<std::optional<std::size_t>>& underlying_answers) {
  if (underlying_answers.size() < 2) throw Error("precondition", "PPA needs at least 2 orderings");
  std::map<std::size_t, std::size_t> votes;
  PpaQuestion q;
  for (const auto& a : underlying_answers) {
    if (a) {
      ++votes[*a];
    } else {
      ++q.unmappable;
    }
  }
  std::size_t plurality = 0;
  for (const auto& [opt, n] : votes) plurality = std::max(plurality, n);
  q.value = static_cast<double>(plurality) / static_cast<double>(underlying_answers.size());
  return q;
}

// Chooses a displayed slot given the displayed options; nullopt if the
// model's answer cannot be mapped to a slot.
using Answerer = std::function<std::optional<std::size_t>(const std::vector<std::string>& displayed)>;

inline PpaQuestion ppa(const std::vector<std::string>& options, const std::vector<Ordering>& orderings,
                       const Answerer& answer) {
  std::vector<std::optional<std::size_t>> underlying;
  for (const auto& o : orderings) {
    std::vector<std::string> shown;
    for (const auto idx : o) shown.push_back(options.at(idx));
    const auto slot = answer(shown);
    underlying.push_back(slot && *slot < o.size() ? std::optional<std::size_t>(o[*slot]) : std::nullopt);
  }
  return ppa(underlying);
}

inline double mean_ppa(const std::vector<PpaQuestion>& qs) {
  if (qs.empty()) throw Error("precondition", "no questions");
  double s = 0.0;
  for (const auto& q : qs) s += q.value;
  return s / static_cast<double>(qs.size());
}

// --- pairwise judge --------------------------------------------------------------

// Scores two responses in slot order.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual std::pair<double, double> score(const std::string& guideline, const std::string& prompt,
                                          const std::string& response_1, const std::string& response_2) = 0;
};

// {"system_guideline","prompt","response_1","response_2"} -> {"score_1","score_2"}
class TransportJudge final : public Judge {
 public:
  explicit TransportJudge(JsonTransport& t) : transport_(t) {}

  std::pair<double, double> score(const std::string& guideline, const std::string& prompt, const std::string& r1,
                                  const std::string& r2) override {
    const auto reply = transport_.post(
        {{"system_guideline", guideline}, {"prompt", prompt}, {"response_1", r1}, {"response_2", r2}});
    if (!reply.contains("score_1") || !reply.contains("score_2") || !reply["score_1"].is_number() ||
        !reply["score_2"].is_number())
      throw Error("bad_reply", "judge reply lacks numeric score_1/score_2");
    return {reply["score_1"].get<double>(), reply["score_2"].get<double>()};
  }

 private:
  JsonTransport& transport_;
};

enum class Outcome { win, tie, lose, error };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::win: return "win";
    case Outcome::tie: return "tie";
    case Outcome::lose: return "lose";
    case Outcome::error: return "error";
  }
  return "error";
}

struct JudgeOptions {
  double tie_delta = 0.5;
  std::size_t retries = 2;
  std::string guideline =
      "Score each response from 1 to 10 for accuracy, helpfulness and fluency with respect to the patent-domain prompt.";
};

// All scores are (response_a, response_b). score_b_first is the second
// call's result mapped back from slot order.
struct JudgeVerdict {
  std::string model_a;
  std::string model_b;
  std::pair<double, double> score_a_first{};
  std::pair<double, double> score_b_first{};
  std::pair<double, double> averaged{};
  Outcome outcome = Outcome::error;
  std::string error;
};

inline JudgeVerdict judge_pair(const std::string& prompt, const std::string& response_a, const std::string& response_b,
                               Judge& judge, const JudgeOptions& opt = {}, std::string model_a = "a",
                               std::string model_b = "b") {
  JudgeVerdict v;
  v.model_a = std::move(model_a);
  v.model_b = std::move(model_b);
  auto call = [&](const std::string& r1, const std::string& r2) -> std::optional<std::pair<double, double>> {
    for (std::size_t attempt = 0; attempt <= opt.retries; ++attempt) {
      try {
        return judge.score(opt.guideline, prompt, r1, r2);
      } catch (const std::exception& e) {
        v.error = e.what();
        spdlog::warn("judge call failed (attempt {}): {}", attempt + 1, e.what());
      }
    }
    return std::nullopt;
  };
  const auto first = call(response_a, response_b);
  const auto second = first ? call(response_b, response_a) : std::nullopt;
  if (!first || !second) {
    v.outcome = Outcome::error;
    return v;
  }
  v.error.clear();
  v.score_a_first = *first;
  v.score_b_first = {second->second, second->first};
  v.averaged = {(v.score_a_first.first + v.score_b_first.first) / 2.0,
                (v.score_a_first.second + v.score_b_first.second) / 2.0};
  const double diff = v.averaged.first - v.averaged.second;
  v.outcome = std::abs(diff) > opt.tie_delta ? (diff > 0 ? Outcome::win : Outcome::lose) : Outcome::tie;
  return v;
}

struct JudgeItem {
  std::string prompt;
  std::string response_a;
  std::string response_b;
};

// Judges items on `workers` threads, starting at most `calls_per_second`
// judge_pair invocations per second (0 = unlimited). Results keep input order.
inline std::vector<JudgeVerdict> judge_all(const std::vector<JudgeItem>& items, Judge& judge, const JudgeOptions& opt,
                                           std::size_t workers, double calls_per_second, const std::string& model_a,
                                           const std::string& model_b) {
  std::vector<JudgeVerdict> out(items.size());
  std::atomic<std::size_t> next{0};
  std::mutex gate;
  auto next_slot = std::chrono::steady_clock::now();
  const auto interval = calls_per_second > 0.0
                            ? std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                  std::chrono::duration<double>(1.0 / calls_per_second))
                            : std::chrono::steady_clock::duration::zero();
  auto work = [&] {
    for (std::size_t i = next++; i < items.size(); i = next++) {
      if (interval.count() > 0) {
        std::chrono::steady_clock::time_point when;
        {
          std::lock_guard lock(gate);
          when = std::max(next_slot, std::chrono::steady_clock::now());
          next_slot = when + interval;
        }
        std::this_thread::sleep_until(when);
      }
      out[i] = judge_pair(items[i].prompt, items[i].response_a, items[i].response_b, judge, opt, model_a, model_b);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::max<std::size_t>(workers, 1); ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return out;
}

struct Tally {
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
  std::size_t errors = 0;
};

inline Tally tally(const std::vector<JudgeVerdict>& verdicts) {
  Tally t;
  for (const auto& v : verdicts) {
    if (v.model_a != verdicts.front().model_a || v.model_b != verdicts.front().model_b)
      throw Error("mixed_pairs", "verdicts compare different model pairs");
    switch (v.outcome) {
      case Outcome::win: ++t.wins; break;
      case Outcome::tie: ++t.ties; break;
      case Outcome::lose: ++t.losses; break;
      case Outcome::error: ++t.errors; break;
    }
  }
  return t;
}

// --- reporting -------------------------------------------------------------------

struct Metric {
  std::string task;
  std::string name;
  double value = 0.0;
  std::size_t count = 0;
};

struct MetricReport {
  std::string model;
  std::string config_hash;
  std::vector<Metric> metrics;
  std::optional<Tally> judge;
};

inline std::vector<ojson> to_jsonl(const MetricReport& r) {
  std::vector<ojson> lines;
  for (const auto& m : r.metrics) {
    ojson j;
    j["model"] = r.model;
    j["config_hash"] = r.config_hash;
    j["task"] = m.task;
    j["metric"] = m.name;
    j["value"] = m.value;
    j["count"] = m.count;
    lines.push_back(std::move(j));
  }
  if (r.judge) {
    ojson j;
    j["model"] = r.model;
    j["config_hash"] = r.config_hash;
    j["task"] = "judge";
    j["wins"] = r.judge->wins;
    j["ties"] = r.judge->ties;
    j["losses"] = r.judge->losses;
    j["errors"] = r.judge->errors;
    lines.push_back(std::move(j));
  }
  return lines;
}

inline std::string to_table(const MetricReport& r) {
  std::ostringstream out;
  out << "model " << r.model << "  config " << r.config_hash << "\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %-12s %12s %8s\n", "task", "metric", "value", "n");
  out << buf;
  for (const auto& m : r.metrics) {
    std::snprintf(buf, sizeof buf, "%-16s %-12s %12.6f %8zu\n", m.task.c_str(), m.name.c_str(), m.value, m.count);
    out << buf;
  }
  if (r.judge)
    out << "judge wins " << r.judge->wins << " ties " << r.judge->ties << " losses " << r.judge->losses << " errors "
        << r.judge->errors << "\n";
  return out.str();
}

}  // namespace iplm::eval
