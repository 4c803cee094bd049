#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "iplm/tokenizer.hpp"

using namespace iplm;
using namespace iplm::tok;

namespace {

const std::vector<std::string> kEnglish = {"the sensor layer on the display layer", "the display panel and the touch panel",
                                           "a sensor and a display", "the layer the layer the layer"};
const std::vector<std::string> kChinese = {"光电转换元件固定于承载部", "光电转换元件与跨阻放大器", "承载部设有光电转换元件"};

}  // namespace

TEST(Bpe, ByteVocabAndDeterminism) {
  const auto v = Vocab::byte_level();
  EXPECT_EQ(v.size(), 256u);
  const auto a = train_bpe(kEnglish, 20, 1);
  const auto b = train_bpe(kEnglish, 20, 99);
  EXPECT_EQ(a.tokens(), b.tokens());
  EXPECT_LE(a.size(), 276u);
  EXPECT_GT(a.size(), 256u);
  EXPECT_EQ(a.merges().size(), a.size() - 256);
  EXPECT_THROW(train_bpe({}, 10), Error);
}

TEST(Bpe, MinFrequencyStopsEarly) {
  const auto v = train_bpe({"abcdef"}, 100, 0, TrainOptions{2});
  EXPECT_EQ(v.size(), 256u);
}

TEST(Bpe, RoundTripAndCompression) {
  const Tokenizer bytes(Vocab::byte_level());
  const Tokenizer trained(train_bpe(kEnglish, 40));
  for (const auto& s : kEnglish) {
    EXPECT_EQ(trained.decode(trained.encode(s)), s);
    EXPECT_LT(trained.encode(s).size(), bytes.encode(s).size());
  }
  const std::string odd("\x00\xff 光 \t\n", 9);
  EXPECT_EQ(trained.decode(trained.encode(odd)), odd);
  EXPECT_GT(compression_ratio(kEnglish[0], bytes, trained), 1.0);
}

TEST(MergeVocab, PreservesBaseIdsAndCapsNovel) {
  const auto base = train_bpe(kEnglish, 30);
  const auto learned = train_bpe(kChinese, 30);
  const auto merged = merge_vocab(base, learned);
  for (TokenId i = 0; i < base.size(); ++i) EXPECT_EQ(merged.token(i), base.token(i));
  EXPECT_EQ(novel_token_count(base, merged), merged.size() - base.size());
  EXPECT_GT(novel_token_count(base, merged), 0u);

  const auto capped = merge_vocab(base, learned, 3);
  EXPECT_EQ(capped.size(), base.size() + 3);
  EXPECT_NO_THROW(Tokenizer{capped});

  const Tokenizer tb(base), tm(merged);
  for (const auto& s : kChinese) {
    EXPECT_EQ(tm.decode(tm.encode(s)), s);
    EXPECT_GT(compression_ratio(s, tb, tm), 1.0);
  }
}

TEST(MergeVocab, DuplicateTokenRejected) {
  EXPECT_THROW(Vocab({"a", "a"}, {}), Error);
  EXPECT_THROW(Tokenizer(Vocab({"a"}, {})), Error);
}

TEST(VocabFiles, SaveLoadRoundTrip) {
  const auto v = merge_vocab(train_bpe(kEnglish, 20), train_bpe(kChinese, 20));
  const auto stem = std::filesystem::temp_directory_path() / "iplm_vocab_test";
  save_vocab(v, stem);
  const auto back = load_vocab(stem);
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.merges(), v.merges());
  std::filesystem::remove(stem.string() + ".tokens");
  std::filesystem::remove(stem.string() + ".merges");
  EXPECT_THROW(load_vocab(stem), Error);
}

TEST(Embeddings, ResizeKeepsRowsAndFillsMean) {
  Matrix m(2, 3);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = 0.1 * static_cast<double>(i) + 1e-17;
  const auto r = resize_embeddings(m, 5);
  EXPECT_EQ(r.rows, 5u);
  EXPECT_EQ(0, std::memcmp(r.data.data(), m.data.data(), m.data.size() * sizeof(double)));
  EXPECT_DOUBLE_EQ(r.at(4, 0), (m.at(0, 0) + m.at(1, 0)) / 2);
  EXPECT_EQ(resize_embeddings(m, 3, RowInit::zero).at(2, 1), 0.0);
  EXPECT_THROW(resize_embeddings(m, 1), Error);
  EXPECT_THROW(resize_embeddings(Matrix(), 4), Error);
}
