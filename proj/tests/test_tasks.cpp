#include <gtest/gtest.h>

#include <random>

#include "stnet/train.hpp"

using namespace stnet;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::build(printable_ascii());
  return v;
}

Placement identity_placement() {
  Placement p;
  p.canvas_width = 256;
  p.canvas_height = 256;
  return p;
}

DocumentSample small_doc() {
  TableSpec s;
  s.rows = 2;
  s.cols = 2;
  s.cells = {"Item", "Qty", "Tea", "4"};
  s.numeric_cols = {1};
  return render_document(s, 3);
}

}  // namespace

TEST(Tasks, OcrExample) {
  const DocumentSample d = small_doc();
  const Placement p = identity_placement();
  const TrainingExample ex = make_ocr_example(vocab(), d.cells[2], p);
  ASSERT_EQ(ex.prompt_ids.size(), 9u);
  EXPECT_EQ(ex.prompt_ids[0], Vocabulary::ocr);
  const std::vector<TokenId> loc(ex.prompt_ids.begin() + 1, ex.prompt_ids.end());
  EXPECT_EQ(decode_polygon_tokens(loc), quantize_polygon(d.cells[2].polygon, 256, 256));
  EXPECT_EQ(vocab().detokenize(std::vector<TokenId>(ex.target_ids.begin(), ex.target_ids.end() - 1)), "Tea");
  EXPECT_EQ(ex.target_ids.back(), Vocabulary::eos);
  EXPECT_TRUE(ex.see_targets.empty());
}

TEST(Tasks, ReadExampleInterleavesSeeTokens) {
  const DocumentSample d = small_doc();
  const TrainingExample ex = make_read_example(vocab(), d, identity_placement());
  EXPECT_EQ(ex.prompt_ids, std::vector<TokenId>{Vocabulary::read});
  ASSERT_EQ(ex.see_targets.size(), 4u);
  std::string text;
  for (TokenId id : ex.target_ids) {
    if (id == Vocabulary::see) text += "[S]";
    else if (id == Vocabulary::sep) text += "|";
    else if (id == Vocabulary::eos) text += "$";
    else text += vocab().token(id);
  }
  EXPECT_EQ(text, "[S]Item|[S]Qty|[S]Tea|[S]4|$");
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(ex.target_ids[static_cast<std::size_t>(ex.see_targets[k].position)], Vocabulary::see);
    EXPECT_EQ(ex.see_targets[k].polygon, quantize_polygon(d.cells[k].polygon, 256, 256));
  }
}

TEST(Tasks, ReadingOrderGeometricMatchesGridForUpright) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const DocumentSample d = render_document(random_table_spec(rng), static_cast<std::uint64_t>(i));
    std::vector<CellRecord> shuffled = d.cells;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto geo = reading_order(shuffled, ReadingOrder::geometric);
    const auto grid = reading_order(shuffled, ReadingOrder::grid);
    ASSERT_EQ(geo.size(), grid.size());
    for (std::size_t k = 0; k < geo.size(); ++k) {
      EXPECT_EQ(geo[k].row, grid[k].row);
      EXPECT_EQ(geo[k].col, grid[k].col);
    }
  }
}

TEST(Tasks, VqaModes) {
  const DocumentSample d = small_doc();
  QARecord qa{"Qty of Tea?", "4", QuestionType::simple_reasoning, LogicalLoc{2, 2}, d.cells[3].polygon, true};
  const Placement p = identity_placement();
  const TrainingExample first = make_vqa_example(vocab(), qa, p, GroundingMode::see_first);
  EXPECT_EQ(first.prompt_ids.front(), Vocabulary::vqa);
  EXPECT_EQ(first.target_ids, (std::vector<TokenId>{Vocabulary::see, vocab().id("4"), Vocabulary::eos}));
  ASSERT_EQ(first.see_targets.size(), 1u);
  EXPECT_EQ(first.see_targets[0].position, 0);

  const TrainingExample last = make_vqa_example(vocab(), qa, p, GroundingMode::see_last);
  EXPECT_EQ(last.target_ids, (std::vector<TokenId>{vocab().id("4"), Vocabulary::see, Vocabulary::eos}));
  EXPECT_EQ(last.see_targets.at(0).position, 1);

  const TrainingExample none = make_vqa_example(vocab(), qa, p, GroundingMode::none);
  EXPECT_EQ(none.target_ids, (std::vector<TokenId>{vocab().id("4"), Vocabulary::eos}));
  EXPECT_TRUE(none.see_targets.empty());

  qa.grounded = false;
  qa.polygon.reset();
  const TrainingExample ungrounded = make_vqa_example(vocab(), qa, p, GroundingMode::see_first);
  EXPECT_EQ(ungrounded.target_ids.front(), Vocabulary::see);
  EXPECT_TRUE(ungrounded.see_targets.empty());
}

TEST(Tasks, PlacementMapsPolygonsOntoCanvas) {
  std::mt19937_64 rng(4);
  const Placement p = plan_placement(512, 256, 256, 256, PaddingMode::random, &rng);
  EXPECT_DOUBLE_EQ(p.scale, 0.5);
  EXPECT_DOUBLE_EQ(p.offset_x, 0.0);
  EXPECT_GE(p.offset_y, 0.0);
  EXPECT_LE(p.offset_y, 128.0);
  const Placement c = plan_placement(100, 50, 256, 256, PaddingMode::centered, nullptr);
  EXPECT_DOUBLE_EQ(c.scale, 1.0);
  EXPECT_DOUBLE_EQ(c.offset_x, 78.0);
  EXPECT_DOUBLE_EQ(c.offset_y, 103.0);
  const Point back = c.to_document(c.to_canvas(Point{12.5, 7.25}));
  EXPECT_DOUBLE_EQ(back.x, 12.5);
  EXPECT_DOUBLE_EQ(back.y, 7.25);
  const PixelPolygon q = c.to_canvas(make_rect(0, 0, 10, 10));
  EXPECT_EQ(q, make_rect(78, 103, 88, 113));
}

TEST(Tasks, SeePositionsPointAtSeeInputs) {
  // For every example, the decoder input at the computed position is <see>.
  std::mt19937_64 rng(6);
  for (int i = 0; i < 40; ++i) {
    const DocumentSample d = render_document(random_table_spec(rng), static_cast<std::uint64_t>(i));
    std::vector<TrainingExample> exs{make_read_example(vocab(), d, identity_placement())};
    for (const auto& qa : gen_qa_deterministic(d, static_cast<std::uint64_t>(i)))
      for (auto mode : {GroundingMode::see_first, GroundingMode::see_last})
        exs.push_back(make_vqa_example(vocab(), qa, identity_placement(), mode));
    for (const auto& ex : exs) {
      const SequenceLayout lay = layout_sequence(ex);
      ASSERT_EQ(lay.inputs.size(), ex.prompt_ids.size() + ex.target_ids.size());
      for (std::size_t t = 0; t < lay.labels.size(); ++t) EXPECT_EQ(lay.mask()[t], t >= ex.prompt_ids.size());
      for (const auto& st : ex.see_targets) {
        const auto pos = see_input_position(lay.prompt_len, st.position);
        EXPECT_EQ(lay.inputs[pos], Vocabulary::see);
        EXPECT_EQ(lay.labels[pos - 1], Vocabulary::see);
      }
    }
  }
}
