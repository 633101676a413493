#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "stnet/dataset.hpp"

using namespace stnet;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stnet_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<CorpusRecord> make_records(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CorpusRecord> out;
  for (int i = 0; i < n; ++i) {
    TableShape shape;
    shape.warp_probability = 0.3;
    CorpusRecord r;
    r.id = "doc" + std::to_string(i);
    r.source = i % 2 ? Source::downstream : Source::auxiliary;
    r.sample = render_document(random_table_spec(rng, shape), seed + static_cast<std::uint64_t>(i));
    r.qas = gen_qa_deterministic(r.sample, static_cast<std::uint64_t>(i));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST(Dataset, PnmRoundTrip) {
  const fs::path dir = fresh_dir("pnm");
  fs::create_directories(dir);
  Image g = Image::filled(5, 3, 1, 7);
  g.at(4, 2) = 200;
  write_pnm(g, (dir / "g.pgm").string());
  const Image g2 = read_pnm((dir / "g.pgm").string());
  EXPECT_EQ(g2.pixels, g.pixels);
  EXPECT_EQ(g2.channels, 1);
  Image c = g.to_rgb();
  c.at(0, 0, 2) = 99;
  write_pnm(c, (dir / "c.ppm").string());
  const Image c2 = read_pnm((dir / "c.ppm").string());
  EXPECT_EQ(c2.pixels, c.pixels);
  EXPECT_EQ(c2.channels, 3);
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_ANY_THROW(read_pnm((dir / "bad.pgm").string()));
  fs::remove_all(dir);
}

TEST(Dataset, RoundTripHundredRecords) {
  const fs::path dir = fresh_dir("roundtrip");
  const auto recs = make_records(100, 5);
  write_corpus(dir, recs);
  const auto back = read_corpus(dir);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].id, recs[i].id);
    EXPECT_EQ(back[i].source, recs[i].source);
    EXPECT_EQ(back[i].qas, recs[i].qas);
    EXPECT_EQ(back[i].sample.html, recs[i].sample.html);
    EXPECT_EQ(back[i].sample.warped, recs[i].sample.warped);
    EXPECT_EQ(back[i].sample.image.pixels, recs[i].sample.image.pixels);
    ASSERT_EQ(back[i].sample.cells.size(), recs[i].sample.cells.size());
    for (std::size_t k = 0; k < recs[i].sample.cells.size(); ++k) {
      EXPECT_EQ(back[i].sample.cells[k].text, recs[i].sample.cells[k].text);
      EXPECT_EQ(back[i].sample.cells[k].polygon, recs[i].sample.cells[k].polygon);
      EXPECT_EQ(back[i].sample.cells[k].row, recs[i].sample.cells[k].row);
    }
  }
  fs::remove_all(dir);
}

TEST(Dataset, EmptyCorpus) {
  const fs::path dir = fresh_dir("empty");
  write_corpus(dir, {});
  EXPECT_TRUE(read_corpus(dir).empty());
  std::ifstream is(dir / "records.jsonl");
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(first, corpus_header);
  fs::remove_all(dir);
}

TEST(Dataset, TruncatedFileNamesTheLine) {
  const fs::path dir = fresh_dir("truncated");
  write_corpus(dir, make_records(3, 9));
  std::string text;
  {
    std::ifstream is(dir / "records.jsonl", std::ios::binary);
    text.assign(std::istreambuf_iterator<char>(is), {});
  }
  text.resize(text.size() - 40);
  std::ofstream(dir / "records.jsonl", std::ios::binary) << text;
  try {
    read_corpus(dir);
    FAIL() << "expected an error";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("records.jsonl:4"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Dataset, MissingDirectoryAndBadRecords) {
  EXPECT_THROW(read_corpus(fresh_dir("nowhere")), DatasetError);
  nlohmann::json q = qa_to_json(QARecord{"q", "a", QuestionType::numerical, std::nullopt, std::nullopt, false});
  q["grounded"] = true;
  EXPECT_THROW(qa_from_json(q), DatasetError);
  q["grounded"] = false;
  q["qtype"] = "bogus";
  EXPECT_ANY_THROW(qa_from_json(q));
  const nlohmann::json clockwise = nlohmann::json::array({{0, 0}, {0, 2}, {2, 2}, {2, 0}});
  EXPECT_THROW(polygon_from_json(clockwise), DatasetError);
}
