#pragma once

// Prompt/target grammars for the three pre-training tasks:
//
//   OCR   prompt  <ocr> <x1> <y1> ... <x4> <y4>     target  text <eos>
//   READ  prompt  <read>                            target  (<see> text <sep>)* <eos>
//   VQA   prompt  <vqa> question                    target  <see> answer <eos>   (see_first)
//                                                           answer <eos>         (none)
//                                                           answer <see> <eos>   (see_last)
//
// Location tokens are quantized in model-canvas coordinates.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "stnet/datagen.hpp"
#include "stnet/geometry.hpp"
#include "stnet/image.hpp"
#include "stnet/vocab.hpp"

namespace stnet {

enum class Task { ocr, read, vqa };
enum class GroundingMode { none, see_first, see_last };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::ocr: return "ocr";
    case Task::read: return "read";
    case Task::vqa: return "vqa";
  }
  return "unknown";
}

inline std::string to_string(GroundingMode m) {
  switch (m) {
    case GroundingMode::none: return "none";
    case GroundingMode::see_first: return "see_first";
    case GroundingMode::see_last: return "see_last";
  }
  return "unknown";
}

inline GroundingMode grounding_mode_from_string(std::string_view s) {
  if (s == "none") return GroundingMode::none;
  if (s == "see_first") return GroundingMode::see_first;
  if (s == "see_last") return GroundingMode::see_last;
  throw std::invalid_argument("unknown grounding mode: " + std::string(s));
}

struct SeeTarget {
  int position = 0;  // index into target_ids
  QuantPolygon polygon;
  friend bool operator==(const SeeTarget&, const SeeTarget&) = default;
};

struct TrainingExample {
  Task task = Task::vqa;
  std::vector<TokenId> prompt_ids;
  std::vector<TokenId> target_ids;  // ends with <eos>
  std::vector<SeeTarget> see_targets;
  std::string source_id;
};

inline QuantPolygon canvas_quant(const PixelPolygon& doc_poly, const Placement& p) {
  return quantize_polygon(p.to_canvas(doc_poly), p.canvas_width, p.canvas_height);
}

inline TrainingExample make_ocr_example(const Vocabulary& vocab, const CellRecord& cell, const Placement& p) {
  TrainingExample ex;
  ex.task = Task::ocr;
  ex.prompt_ids.push_back(Vocabulary::ocr);
  for (TokenId id : encode_polygon_tokens(vocab, canvas_quant(cell.polygon, p))) ex.prompt_ids.push_back(id);
  ex.target_ids = vocab.tokenize(cell.text);
  ex.target_ids.push_back(Vocabulary::eos);
  return ex;
}

enum class ReadingOrder { grid, geometric };

/// Grid order sorts by (row, col). Geometric order groups cell centroids into
/// horizontal bands one median cell height tall, then sorts each band by x.
inline std::vector<CellRecord> reading_order(std::vector<CellRecord> cells, ReadingOrder mode = ReadingOrder::grid) {
  if (mode == ReadingOrder::grid) {
    std::stable_sort(cells.begin(), cells.end(),
                     [](const CellRecord& a, const CellRecord& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); });
    return cells;
  }
  if (cells.empty()) return cells;
  std::vector<double> heights;
  double min_cy = cells.front().polygon.centroid().y;
  for (const auto& c : cells) {
    heights.push_back(c.polygon.max_y() - c.polygon.min_y());
    min_cy = std::min(min_cy, c.polygon.centroid().y);
  }
  std::nth_element(heights.begin(), heights.begin() + static_cast<std::ptrdiff_t>(heights.size() / 2), heights.end());
  const double band_h = std::max(1e-9, heights[heights.size() / 2]);
  auto band = [&](const CellRecord& c) {
    return static_cast<long>(std::floor((c.polygon.centroid().y - min_cy) / band_h + 0.5));
  };
  std::stable_sort(cells.begin(), cells.end(), [&](const CellRecord& a, const CellRecord& b) {
    const long ba = band(a), bb = band(b);
    if (ba != bb) return ba < bb;
    return a.polygon.centroid().x < b.polygon.centroid().x;
  });
  return cells;
}

inline TrainingExample make_read_example(const Vocabulary& vocab, const DocumentSample& sample, const Placement& p) {
  if (sample.cells.empty()) throw std::invalid_argument("document has no cells");
  TrainingExample ex;
  ex.task = Task::read;
  ex.prompt_ids.push_back(Vocabulary::read);
  for (const auto& cell : reading_order(sample.cells, sample.warped ? ReadingOrder::geometric : ReadingOrder::grid)) {
    ex.see_targets.push_back(SeeTarget{static_cast<int>(ex.target_ids.size()), canvas_quant(cell.polygon, p)});
    ex.target_ids.push_back(Vocabulary::see);
    for (TokenId id : vocab.tokenize(cell.text)) ex.target_ids.push_back(id);
    ex.target_ids.push_back(Vocabulary::sep);
  }
  ex.target_ids.push_back(Vocabulary::eos);
  return ex;
}

inline TrainingExample make_vqa_example(const Vocabulary& vocab, const QARecord& qa, const Placement& p,
                                        GroundingMode mode) {
  TrainingExample ex;
  ex.task = Task::vqa;
  ex.prompt_ids.push_back(Vocabulary::vqa);
  for (TokenId id : vocab.tokenize(qa.question)) ex.prompt_ids.push_back(id);
  const std::vector<TokenId> answer = vocab.tokenize(qa.answer);
  const bool supervise = qa.grounded && qa.polygon.has_value();
  switch (mode) {
    case GroundingMode::see_first:
      if (supervise) ex.see_targets.push_back(SeeTarget{0, canvas_quant(*qa.polygon, p)});
      ex.target_ids.push_back(Vocabulary::see);
      ex.target_ids.insert(ex.target_ids.end(), answer.begin(), answer.end());
      break;
    case GroundingMode::none:
      ex.target_ids = answer;
      break;
    case GroundingMode::see_last:
      ex.target_ids = answer;
      if (supervise) ex.see_targets.push_back(SeeTarget{static_cast<int>(ex.target_ids.size()), canvas_quant(*qa.polygon, p)});
      ex.target_ids.push_back(Vocabulary::see);
      break;
    default:
      throw std::invalid_argument("unknown grounding mode");
  }
  ex.target_ids.push_back(Vocabulary::eos);
  return ex;
}

}  // namespace stnet
