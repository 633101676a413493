#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "stnet/model.hpp"

using namespace stnet;

namespace {

ModelConfig tiny_config(int vocab_size) {
  ModelConfig c;
  c.image_height = 32;
  c.image_width = 32;
  c.patch = 8;
  c.dim = 16;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.heads = 2;
  c.vocab_size = vocab_size;
  c.max_len = 24;
  return c;
}

Mat<double> random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat<double> m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

std::vector<TokenId> random_ids(int n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> id(0, vocab - 1);
  std::vector<TokenId> out;
  for (int i = 0; i < n; ++i) out.push_back(id(rng));
  return out;
}

}  // namespace

TEST(Model, ConfigValidation) {
  ModelConfig c = tiny_config(1100);
  EXPECT_NO_THROW(c.validate());
  c.patch = 7;
  EXPECT_THROW(c.validate(), ModelError);
  c = tiny_config(1100);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ModelError);
  c = tiny_config(10);
  EXPECT_THROW(c.validate(), ModelError);
}

TEST(Model, DefaultsMatchDeskScale) {
  const ModelConfig c;
  EXPECT_EQ(c.image_height, 256);
  EXPECT_EQ(c.image_width, 256);
  EXPECT_EQ(c.patch, 32);
  EXPECT_EQ(c.dim, 128);
  EXPECT_EQ(c.enc_layers, 2);
  EXPECT_EQ(c.dec_layers, 2);
  EXPECT_EQ(c.heads, 4);
  EXPECT_EQ(c.max_len, 256);
  EXPECT_EQ(c.num_patches(), 64);
}

TEST(Model, EncoderShapeAndErrors) {
  const auto m = Model<double>::init(tiny_config(1100), 1);
  std::mt19937_64 rng(1);
  const Mat<double> z = encode_image(m, random_image(32, 32, rng));
  EXPECT_EQ(z.rows(), 16);
  EXPECT_EQ(z.cols(), 16);
  EXPECT_TRUE(z.allFinite());
  EXPECT_THROW(encode_image(m, random_image(32, 40, rng)), ModelError);
}

TEST(Model, ZeroImageRowsDifferOnlyThroughPosition) {
  ModelConfig c = tiny_config(1100);
  c.positional_encoding = false;
  const auto flat = Model<double>::init(c, 2);
  const Mat<double> z0 = encode_image(flat, Mat<double>(Mat<double>::Zero(32, 32)));
  ASSERT_TRUE(z0.allFinite());
  for (Eigen::Index r = 1; r < z0.rows(); ++r) EXPECT_LT((z0.row(r) - z0.row(0)).cwiseAbs().maxCoeff(), 1e-12);
  c.positional_encoding = true;
  const auto pos = Model<double>::init(c, 2);
  const Mat<double> z1 = encode_image(pos, Mat<double>(Mat<double>::Zero(32, 32)));
  for (Eigen::Index r = 1; r < z1.rows(); ++r) EXPECT_GT((z1.row(r) - z1.row(0)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Model, EncoderDeterministic) {
  const auto m = Model<float>::init(tiny_config(1100), 3);
  std::mt19937_64 rng(3);
  const Mat<float> img = random_image(32, 32, rng).cast<float>();
  const Mat<float> a = encode_image(m, img), b = encode_image(m, img);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())), 0);
}

TEST(Model, PatchPerturbationReachesItsRow) {
  const auto m = Model<double>::init(tiny_config(1100), 4);
  std::mt19937_64 rng(4);
  const Mat<double> img = random_image(32, 32, rng);
  Mat<double> img2 = img;
  img2.block(8, 16, 8, 8).array() += 0.5;  // grid cell (1, 2) -> patch 6
  const Mat<double> a = encode_image(m, img), b = encode_image(m, img2);
  EXPECT_GT((a.row(6) - b.row(6)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Model, PositionalEncodingBreaksPermutationSymmetry) {
  std::mt19937_64 rng(5);
  const Mat<double> img = random_image(32, 32, rng);
  Mat<double> swapped = img;
  swapped.block(0, 0, 8, 8) = img.block(24, 24, 8, 8);
  swapped.block(24, 24, 8, 8) = img.block(0, 0, 8, 8);
  const std::vector<TokenId> ids{1, 1050, 1060, 1070};
  for (bool pe : {false, true}) {
    ModelConfig c = tiny_config(1100);
    c.positional_encoding = pe;
    const auto m = Model<double>::init(c, 5);
    const auto a = decode_tokens(m, encode_image(m, img), ids);
    const auto b = decode_tokens(m, encode_image(m, swapped), ids);
    const double diff = (a.logits - b.logits).cwiseAbs().maxCoeff();
    if (pe) EXPECT_GT(diff, 1e-6);
    else EXPECT_LT(diff, 1e-9);
  }
}

TEST(Model, DecoderCausality) {
  const auto m = Model<double>::init(tiny_config(1100), 6);
  std::mt19937_64 rng(6);
  const Mat<double> z = encode_image(m, random_image(32, 32, rng));
  std::vector<TokenId> ids = random_ids(10, 1100, rng);
  const auto full = decode_tokens(m, z, ids);
  std::vector<TokenId> longer = ids;
  longer.push_back(77);
  const auto ext = decode_tokens(m, z, longer);
  EXPECT_LT((ext.logits.topRows(10) - full.logits).cwiseAbs().maxCoeff(), 1e-12);
  std::vector<TokenId> edited = ids;
  edited[9] = 5;
  edited[8] = 6;
  const auto ed = decode_tokens(m, z, edited);
  EXPECT_LT((ed.logits.topRows(8) - full.logits.topRows(8)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(full.hidden.rows(), 10);
}

TEST(Model, DecoderRejectsBadInput) {
  const auto m = Model<double>::init(tiny_config(1100), 7);
  const Mat<double> z = encode_image(m, Mat<double>(Mat<double>::Zero(32, 32)));
  const std::vector<TokenId> bad{1, 1100};
  EXPECT_THROW(decode_tokens(m, z, bad), ModelError);
  const std::vector<TokenId> neg{-1};
  EXPECT_THROW(decode_tokens(m, z, neg), ModelError);
  const std::vector<TokenId> too_long(25, 1);
  EXPECT_THROW(decode_tokens(m, z, too_long), ModelError);
  EXPECT_THROW(decode_tokens(m, z, std::vector<TokenId>{}), ModelError);
}

TEST(Model, SoftmaxRowsNormalize) {
  const auto m = Model<double>::init(tiny_config(1100), 8);
  std::mt19937_64 rng(8);
  const auto out = decode_tokens(m, encode_image(m, random_image(32, 32, rng)), random_ids(12, 1100, rng));
  const Mat<double> p = softmax_rows<double>(out.logits);
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
}

TEST(Model, UntrainedEntropyNearUniform) {
  ModelConfig c;
  c.vocab_size = 1103;
  const double ln_v = std::log(static_cast<double>(c.vocab_size));
  std::mt19937_64 rng(9);
  for (int seed = 0; seed < 100; ++seed) {
    const auto m = Model<float>::init(c, static_cast<std::uint64_t>(seed));
    const Mat<float> img = random_image(256, 256, rng).cast<float>();
    const auto out = decode_tokens(m, encode_image(m, img), random_ids(6, c.vocab_size, rng));
    const Mat<double> p = softmax_rows<double>(out.logits.cast<double>());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const double h = -(p.row(r).array() * p.row(r).array().log()).sum();
      EXPECT_NEAR(h, ln_v, 0.1 * ln_v);
    }
  }
}

TEST(Model, LmLossExamples) {
  const int v = 50;
  Mat<double> logits = Mat<double>::Zero(3, v);
  const std::vector<TokenId> targets{3, 7, 11};
  const bool mask[] = {true, true, true};
  EXPECT_NEAR(lm_loss(logits, targets, mask), std::log(50.0), 1e-12);
  for (int t = 0; t < 3; ++t) logits(t, targets[static_cast<std::size_t>(t)]) = 100.0;
  EXPECT_LT(lm_loss(logits, targets, mask), 1e-30 + 1e-40);
  const bool none[] = {false, false, false};
  EXPECT_THROW(lm_loss(logits, targets, none), ModelError);
}

TEST(Model, LmLossMatchesLongDoubleOracle) {
  std::mt19937_64 rng(10);
  const int v = 300, T = 9;
  for (int trial = 0; trial < 50; ++trial) {
    const Mat<double> logits = normal_matrix<double>(T, v, 4.0, rng);
    const std::vector<TokenId> targets = random_ids(T, v, rng);
    bool mask[T];
    for (int t = 0; t < T; ++t) mask[t] = (t % 3) != 0;
    long double total = 0.0L;
    int n = 0;
    for (int t = 0; t < T; ++t) {
      if (!mask[t]) continue;
      long double s = 0.0L;
      for (int k = 0; k < v; ++k) s += std::exp(static_cast<long double>(logits(t, k)));
      total += std::log(s) - static_cast<long double>(logits(t, targets[static_cast<std::size_t>(t)]));
      ++n;
    }
    EXPECT_NEAR(lm_loss(logits, targets, std::span<const bool>(mask, T)), static_cast<double>(total / n), 1e-10);
  }
}

TEST(Model, GreedyGenerateTerminatesAndIsDeterministic) {
  const auto m = Model<double>::init(tiny_config(1100), 11);
  std::mt19937_64 rng(11);
  const Mat<double> z = encode_image(m, random_image(32, 32, rng));
  const std::vector<TokenId> prompt{Vocabulary::vqa};
  const auto a = greedy_generate(m, z, prompt, 100);
  const auto b = greedy_generate(m, z, prompt, 100);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_LE(static_cast<int>(a.tokens.size()) + 2, m.config.max_len + 1);
  if (a.tokens.empty() || a.tokens.back() != Vocabulary::eos) {
    EXPECT_TRUE(a.truncated);
  }
}

TEST(Model, ArgmaxTiesGoToLowestId) {
  RowVec<double> r = RowVec<double>::Zero(6);
  r(2) = 1.0;
  r(4) = 1.0;
  EXPECT_EQ(argmax_lowest<double>(r), 2);
  EXPECT_EQ(argmax_lowest<double>(RowVec<double>::Zero(6)), 0);
}

TEST(Model, CastAndShellPreserveShapes) {
  auto m = Model<double>::init(tiny_config(1100), 12);
  auto f = m.cast<float>();
  auto names = m.parameter_names();
  EXPECT_EQ(names, f.parameter_names());
  auto pd = m.parameters();
  auto pf = f.parameters();
  for (std::size_t i = 0; i < pd.size(); ++i) {
    EXPECT_EQ(pd[i]->rows(), pf[i]->rows());
    EXPECT_LT((pd[i]->cast<float>() - *pf[i]).cwiseAbs().maxCoeff(), 1e-6f);
  }
  EXPECT_EQ(m.loc().rows(), 1000);
  EXPECT_EQ(m.loc()(0, 0), m.tok_embed(Vocabulary::loc_begin, 0));
}
