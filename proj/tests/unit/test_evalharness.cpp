#include <gtest/gtest.h>

#include <atomic>

#include "iplm/evalharness.hpp"

using namespace iplm;
using namespace iplm::eval;

namespace {

// Prefers whichever response sits in slot 1.
class SlotBiasedJudge final : public Judge {
 public:
  std::pair<double, double> score(const std::string&, const std::string&, const std::string&, const std::string&) override {
    return {8.0, 5.0};
  }
};

class LengthJudge final : public Judge {
 public:
  std::atomic<int> calls{0};
  std::pair<double, double> score(const std::string&, const std::string&, const std::string& a, const std::string& b) override {
    ++calls;
    return {static_cast<double>(a.size()), static_cast<double>(b.size())};
  }
};

class FlakyJudge final : public Judge {
 public:
  int failures_left;
  explicit FlakyJudge(int f) : failures_left(f) {}
  std::pair<double, double> score(const std::string&, const std::string&, const std::string&, const std::string&) override {
    if (failures_left-- > 0) throw std::runtime_error("timeout");
    return {6.0, 6.0};
  }
};

}  // namespace

TEST(Classification, MacroF1ByHand) {
  // a: tp1 fp1 fn1 -> 0.5; b: tp1 fp0 fn1 -> 2/3; c: tp0 fp1 fn0 -> 0
  const double f = f1_macro({"a", "b", "a", "c"}, {"a", "b", "b", "a"});
  EXPECT_NEAR(f, (0.5 + 2.0 / 3.0 + 0.0) / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(f1_macro({"x", "y"}, {"x", "y"}), 1.0);
  EXPECT_THROW(f1_macro({"x"}, {}), Error);
}

TEST(Exam, PointsAndPassMark) {
  std::vector<std::string> key(200, "A"), answers(200, "B");
  for (int i = 0; i < 130; ++i) answers[i] = "A";
  auto s = score_exam(answers, key);
  EXPECT_EQ(s.correct, 130u);
  EXPECT_DOUBLE_EQ(s.points, 65.0);
  EXPECT_TRUE(s.pass);
  answers[120] = answers[121] = "B";
  for (int i = 120; i < 130; ++i) answers[i] = "B";
  s = score_exam(answers, key);
  EXPECT_DOUBLE_EQ(s.points, 60.0);
  EXPECT_TRUE(s.pass);
  answers[0] = "B";
  EXPECT_FALSE(score_exam(answers, key).pass);
  EXPECT_THROW(score_exam({"A"}, key), Error);
}

TEST(Bleu, IdentityAndChineseTokens) {
  EXPECT_DOUBLE_EQ(bleu("the display panel includes a touch sensor", {"the display panel includes a touch sensor"}), 1.0);
  EXPECT_DOUBLE_EQ(bleu("光电转换元件固定", {"光电转换元件固定"}, Language::zh), 1.0);
  EXPECT_EQ(bleu_tokens("光 电a", Language::zh).size(), 3u);
  EXPECT_EQ(bleu("", {"x"}), 0.0);
  EXPECT_EQ(bleu("zzz", {"a b c"}), 0.0);
  const double partial = bleu("the display panel has a sensor", {"the display panel includes a touch sensor"});
  EXPECT_GT(partial, 0.0);
  EXPECT_LT(partial, 1.0);
}

TEST(Bleu, CorpusLevelPoolsCounts) {
  const std::vector<Tokens> c = {{"a", "b", "c", "d"}, {"e", "f", "g", "h"}};
  const std::vector<std::vector<Tokens>> r = {{{"a", "b", "c", "d"}}, {{"e", "f", "g", "h"}}};
  EXPECT_DOUBLE_EQ(corpus_bleu(c, r), 1.0);
  EXPECT_THROW(corpus_bleu(c, {}), Error);
}

TEST(ExactMatch, StrictAfterLineEndings) {
  EXPECT_EQ(exact_match("A\r\nB ", "A\nB"), 1);
  EXPECT_EQ(exact_match("a", "A"), 0);
}

TEST(Ppa, InvariantAndBiasedAnswerers) {
  const std::vector<std::string> opts = {"w", "x", "y", "z"};
  const auto rot = cyclic_rotations(4);
  ASSERT_EQ(rot.size(), 4u);
  EXPECT_EQ(rot[1], (Ordering{1, 2, 3, 0}));
  const auto by_content = ppa(opts, rot, [](const std::vector<std::string>& shown) -> std::optional<std::size_t> {
    return static_cast<std::size_t>(std::find(shown.begin(), shown.end(), "y") - shown.begin());
  });
  EXPECT_DOUBLE_EQ(by_content.value, 1.0);
  const auto first_slot = ppa(opts, rot, [](const std::vector<std::string>&) { return std::optional<std::size_t>(0); });
  EXPECT_DOUBLE_EQ(first_slot.value, 0.25);
  const auto none = ppa(opts, rot, [](const std::vector<std::string>&) { return std::optional<std::size_t>(); });
  EXPECT_EQ(none.unmappable, 4u);
  EXPECT_DOUBLE_EQ(mean_ppa({by_content, first_slot}), 0.625);
}

TEST(Judge, SwappingCancelsSlotBias) {
  SlotBiasedJudge j;
  const auto v = judge_pair("p", "short", "a much longer answer", j);
  EXPECT_EQ(v.outcome, Outcome::tie);
  EXPECT_DOUBLE_EQ(v.averaged.first, 6.5);
  LengthJudge lj;
  EXPECT_EQ(judge_pair("p", "longer one", "short", lj).outcome, Outcome::win);
  EXPECT_EQ(judge_pair("p", "s", "longer one", lj).outcome, Outcome::lose);
}

TEST(Judge, RetriesThenError) {
  FlakyJudge ok(2);
  EXPECT_EQ(judge_pair("p", "a", "b", ok).outcome, Outcome::tie);
  FlakyJudge dead(100);
  const auto v = judge_pair("p", "a", "b", dead);
  EXPECT_EQ(v.outcome, Outcome::error);
  EXPECT_NE(v.error.find("timeout"), std::string::npos);
}

TEST(Judge, ParallelKeepsOrderAndTallies) {
  LengthJudge lj;
  std::vector<JudgeItem> items;
  for (int i = 0; i < 20; ++i) items.push_back({"p", std::string(static_cast<std::size_t>(i % 3 + 1), 'x'), "xx"});
  const auto vs = judge_all(items, lj, {}, 4, 0.0, "ours", "base");
  ASSERT_EQ(vs.size(), 20u);
  EXPECT_EQ(lj.calls.load(), 40);
  for (std::size_t i = 0; i < vs.size(); ++i)
    EXPECT_EQ(vs[i].outcome, i % 3 == 0 ? Outcome::lose : (i % 3 == 1 ? Outcome::tie : Outcome::win));
  const auto t = tally(vs);
  EXPECT_EQ(t.wins + t.ties + t.losses, 20u);
  auto mixed = vs;
  mixed[3].model_b = "other";
  EXPECT_THROW(tally(mixed), Error);
}

TEST(Judge, TransportJudgeValidatesReply) {
  FunctionTransport good([](const nlohmann::json& r) {
    EXPECT_TRUE(r.contains("system_guideline"));
    return nlohmann::json{{"score_1", 7}, {"score_2", 3}};
  });
  TransportJudge tj(good);
  EXPECT_EQ(judge_pair("p", "a", "b", tj).outcome, Outcome::tie);
  FunctionTransport bad([](const nlohmann::json&) { return nlohmann::json{{"score_1", "high"}}; });
  TransportJudge bj(bad);
  EXPECT_EQ(judge_pair("p", "a", "b", bj).outcome, Outcome::error);
}

TEST(Instances, ParsingAndReports) {
  const auto e = instance_from_json({{"id", "q1"}, {"task", "exam"}, {"options", {"a", "b"}}, {"key_index", 1}});
  EXPECT_EQ(e.task, Task::exam);
  EXPECT_THROW(instance_from_json({{"id", "q1"}, {"task", "exam"}, {"options", {"a", "b"}}}), Error);
  EXPECT_THROW(instance_from_json({{"id", "q1"}, {"task", "poetry"}}), Error);
  MetricReport r{"m", "abc", {{"qa", "exact_match", 0.5, 2}}, Tally{1, 2, 3, 0}};
  const auto lines = to_jsonl(r);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[1]["ties"], 2);
  EXPECT_NE(to_table(r).find("exact_match"), std::string::npos);
}
