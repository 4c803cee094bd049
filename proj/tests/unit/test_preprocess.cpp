#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "iplm/preprocess.hpp"

using namespace iplm;
using namespace iplm::preprocess;

namespace {

Document doc(std::string id, std::string text, Category c = Category::Web) {
  Document d;
  d.id = std::move(id);
  d.text = std::move(text);
  d.category = c;
  d.language = Language::en;
  return d;
}

std::string words(std::mt19937_64& rng, std::size_t n) {
  static const char* vocab[] = {"sensor", "layer", "display", "electrode", "current", "signal", "panel", "touch",
                                "driver", "amplifier", "filter", "noise", "device", "circuit", "coil", "field"};
  std::uniform_int_distribution<std::size_t> pick(0, 15);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += std::string(i ? " " : "") + vocab[pick(rng)] + std::to_string(pick(rng));
  return s;
}

bool has(const std::vector<std::string>& v, const std::string& x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

TEST(Filter, ReasonsAreReportedTogether) {
  FilterRuleSet rules;
  rules.blacklist_keywords = {"casino"};
  rules.whitelist_keywords = {"patent"};
  rules.min_length_chars = 10;
  rules.max_symbol_ratio = 0.3;
  const auto r = filter_documents({doc("a", "Casino!!"), doc("b", "casino patent law review"), doc("c", "clean document text")}, rules);
  ASSERT_EQ(r.removed.size(), 1u);
  EXPECT_EQ(r.removed[0].doc.id, "a");
  EXPECT_TRUE(has(r.removed[0].reasons, "blacklist"));
  EXPECT_TRUE(has(r.removed[0].reasons, "min_length"));
  EXPECT_EQ(r.kept.size(), 2u);  // whitelist rescues b
}

TEST(Filter, ClassifierFailsOpen) {
  FilterRuleSet rules;
  rules.classifier = Classifier{[](const Document& d) -> double {
                                  if (d.id == "boom") throw std::runtime_error("model down");
                                  return d.id == "low" ? 0.1 : 0.9;
                                },
                                0.5};
  const auto r = filter_documents({doc("boom", "text one"), doc("low", "text two"), doc("ok", "text three")}, rules);
  EXPECT_EQ(r.kept.size(), 2u);
  ASSERT_EQ(r.tags.size(), 1u);
  EXPECT_EQ(r.tags[0].second, "classifier_error");
}

TEST(Filter, InvalidRulesRejected) {
  FilterRuleSet rules;
  rules.max_symbol_ratio = 2.0;
  EXPECT_THROW(filter_documents({}, rules), ConfigError);
}

TEST(ExactDedup, IdenticalTextAttributeAndContainment) {
  auto a = doc("a", "the same body of text");
  auto b = doc("b", "the same body of text");
  auto c = doc("c", "prefix: the same body of text and more");
  auto d = doc("d", "unrelated");
  auto e = doc("e", "family member one");
  auto f = doc("f", "family member two");
  e.attributes["patent_family"] = "F9";
  f.attributes["patent_family"] = "F9";
  const auto r = exact_dedup({a, b, c, d, e, f});
  EXPECT_TRUE(has(r.kept_ids, "c"));  // the containing text represents its cluster
  EXPECT_TRUE(has(r.removed_ids, "a"));
  EXPECT_TRUE(has(r.removed_ids, "b"));
  EXPECT_TRUE(has(r.kept_ids, "d"));
  EXPECT_EQ(r.kept_ids.size() + r.removed_ids.size(), 6u);
  ASSERT_EQ(r.clusters.size(), 2u);
  const auto family = std::find_if(r.clusters.begin(), r.clusters.end(), [](const Cluster& k) { return k.match_kind == MatchKind::exact_attribute; });
  ASSERT_NE(family, r.clusters.end());
  EXPECT_EQ(family->representative_id, "e");
}

TEST(MinHash, IdenticalTextsAgreeAndSeedMatters) {
  MinHashConfig cfg;
  const auto s1 = minhash_signature("a reasonably long piece of text", cfg);
  EXPECT_EQ(s1.size(), 256u);
  EXPECT_DOUBLE_EQ(estimate_jaccard(s1, minhash_signature("a reasonably long piece of text", cfg)), 1.0);
  cfg.seed = 2;
  EXPECT_NE(s1, minhash_signature("a reasonably long piece of text", cfg));
  EXPECT_THROW(minhash_signature("abc", cfg), Error);
}

TEST(MinHash, ConfigValidation) {
  MinHashConfig cfg;
  cfg.lsh_rows = 7;
  EXPECT_FALSE(validate(cfg).empty());
  EXPECT_THROW(fuzzy_dedup({}, cfg), ConfigError);
}

TEST(FuzzyDedup, FindsNearDuplicatesOnly) {
  std::mt19937_64 rng(3);
  std::vector<Document> docs;
  for (int i = 0; i < 30; ++i) docs.push_back(doc("d" + std::to_string(i), words(rng, 80)));
  std::string near = docs[4].text;
  near.replace(near.size() / 2, 3, "XYZ");
  docs.push_back(doc("near4", near));
  docs.push_back(doc("tiny", "abc"));
  const auto r = fuzzy_dedup(docs, MinHashConfig{});
  EXPECT_EQ(r.removed_ids, std::vector<std::string>{"near4"});
  EXPECT_EQ(r.skipped_short_ids, std::vector<std::string>{"tiny"});
  ASSERT_EQ(r.clusters.size(), 1u);
  EXPECT_EQ(r.clusters[0].representative_id, "d4");

  const auto again = fuzzy_dedup(kept_documents(docs, r), MinHashConfig{});
  EXPECT_TRUE(again.removed_ids.empty());
}

TEST(Rewrite, OnlyBooksAndFailuresRecorded) {
  TemplateRewriter tr;
  const auto r = rewrite_upsample({doc("b", "book text", Category::Book), doc("w", "web text")},
                                  {RewriteStyle::summary, RewriteStyle::conversation}, tr);
  ASSERT_EQ(r.new_docs.size(), 2u);
  EXPECT_EQ(r.new_docs[0].id, "b#summary");
  EXPECT_EQ(r.new_docs[0].attribute("rewritten_from"), "b");
  EXPECT_NE(r.new_docs[1].text.find("book text"), std::string::npos);
  EXPECT_EQ(r.failures.size(), 2u);

  auto bad = std::make_shared<FunctionTransport>([](const nlohmann::json&) { return nlohmann::json{{"nope", 1}}; });
  TransportRewriter rw(bad);
  const auto r2 = rewrite_upsample({doc("b", "book", Category::Book)}, {RewriteStyle::summary}, rw);
  EXPECT_TRUE(r2.new_docs.empty());
  ASSERT_EQ(r2.failures.size(), 1u);
}

TEST(Rewrite, StyleParsing) {
  EXPECT_EQ(parse_rewrite_style("conversation"), RewriteStyle::conversation);
  EXPECT_THROW(parse_rewrite_style("poem"), ConfigError);
}
