#pragma once

// Synthetic table documents with exact ground truth: rendering with a bundled
// bitmap font, HTML serialization, deterministic question generation in five
// categories, and verification of candidate QA pairs against located cells.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stnet/font.hpp"
#include "stnet/geometry.hpp"
#include "stnet/image.hpp"

namespace stnet {

class DatagenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LayoutError : public DatagenError {
 public:
  using DatagenError::DatagenError;
};

// ---------------------------------------------------------------- types

struct TableStyle {
  int font_scale = 1;   // glyph cell is 6x11 pixels times this
  int padding = 3;      // pixels between border and text
  double warp = 0.0;    // max corner displacement as a fraction of the image side
};

struct TableSpec {
  int rows = 0;
  int cols = 0;
  std::vector<std::string> cells;  // row-major, rows x cols
  std::set<int> numeric_cols;      // 0-based column indices
  TableStyle style;

  const std::string& cell(int r, int c) const { return cells[static_cast<std::size_t>(r * cols + c)]; }
};

struct CellRecord {
  std::string text;
  PixelPolygon polygon;
  int row = 0;  // 1-based
  int col = 0;  // 1-based
};

struct DocumentSample {
  Image image;
  std::vector<CellRecord> cells;
  std::string html;
  bool warped = false;

  const CellRecord* find(int row, int col) const {
    for (const auto& c : cells)
      if (c.row == row && c.col == col) return &c;
    return nullptr;
  }
  int rows() const {
    int r = 0;
    for (const auto& c : cells) r = std::max(r, c.row);
    return r;
  }
  int cols() const {
    int r = 0;
    for (const auto& c : cells) r = std::max(r, c.col);
    return r;
  }
};

enum class QuestionType { specific_extraction, simple_reasoning, complex_reasoning, numerical, content_summary };

inline constexpr std::array<QuestionType, 5> all_question_types = {
    QuestionType::specific_extraction, QuestionType::simple_reasoning, QuestionType::complex_reasoning,
    QuestionType::numerical, QuestionType::content_summary};

/// Question-type proportions of the reference corpus (thousands of questions).
inline constexpr std::array<double, 5> reference_type_weights = {244, 293, 191, 166, 64};

inline std::string to_string(QuestionType t) {
  switch (t) {
    case QuestionType::specific_extraction: return "specific_extraction";
    case QuestionType::simple_reasoning: return "simple_reasoning";
    case QuestionType::complex_reasoning: return "complex_reasoning";
    case QuestionType::numerical: return "numerical";
    case QuestionType::content_summary: return "content_summary";
  }
  return "unknown";
}

inline QuestionType question_type_from_string(std::string_view s) {
  for (auto t : all_question_types)
    if (to_string(t) == s) return t;
  throw DatagenError("unknown question type: " + std::string(s));
}

struct LogicalLoc {
  int row = 0;  // 1-based
  int col = 0;  // 1-based
  friend bool operator==(const LogicalLoc&, const LogicalLoc&) = default;
};

struct QARecord {
  std::string question;
  std::string answer;
  QuestionType qtype = QuestionType::specific_extraction;
  std::optional<LogicalLoc> logical_loc;
  std::optional<PixelPolygon> polygon;
  bool grounded = false;

  friend bool operator==(const QARecord&, const QARecord&) = default;
};

// ---------------------------------------------------------------- text helpers

/// Trims and maps Unicode space characters (UTF-8) to ASCII space.
inline std::string normalize_answer(std::string_view s) {
  static const std::vector<std::string> unicode_spaces = {
      "\xC2\xA0",     "\xE2\x80\x80", "\xE2\x80\x81", "\xE2\x80\x82", "\xE2\x80\x83", "\xE2\x80\x84",
      "\xE2\x80\x85", "\xE2\x80\x86", "\xE2\x80\x87", "\xE2\x80\x88", "\xE2\x80\x89", "\xE2\x80\x8A",
      "\xE2\x80\xAF", "\xE2\x81\x9F", "\xE3\x80\x80"};
  std::string out(s);
  for (const auto& u : unicode_spaces) {
    std::size_t pos = 0;
    while ((pos = out.find(u, pos)) != std::string::npos) out.replace(pos, u.size(), " ");
  }
  auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  std::size_t b = 0, e = out.size();
  while (b < e && is_ws(out[b])) ++b;
  while (e > b && is_ws(out[e - 1])) --e;
  return out.substr(b, e - b);
}

/// Decimal with at most two fractional digits and an optional leading '$',
/// as an exact integer count of hundredths.
inline std::optional<std::int64_t> parse_hundredths(std::string_view s) {
  if (!s.empty() && s.front() == '$') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  std::int64_t whole = 0, frac = 0;
  int frac_digits = -1;
  for (char c : s) {
    if (c == '.') {
      if (frac_digits >= 0) return std::nullopt;
      frac_digits = 0;
    } else if (c >= '0' && c <= '9') {
      if (frac_digits < 0) {
        whole = whole * 10 + (c - '0');
        if (whole > 1'000'000'000) return std::nullopt;
      } else {
        if (++frac_digits > 2) return std::nullopt;
        frac = frac * 10 + (c - '0');
      }
    } else {
      return std::nullopt;
    }
  }
  if (frac_digits == 0) return std::nullopt;
  if (frac_digits == 1) frac *= 10;
  return whole * 100 + frac;
}

inline std::string format_hundredths(std::int64_t v, bool integral, bool dollar) {
  std::string out = dollar ? "$" : "";
  if (integral && v % 100 == 0) return out + std::to_string(v / 100);
  const std::string frac = std::to_string(v % 100);
  return out + std::to_string(v / 100) + "." + (frac.size() == 1 ? "0" + frac : frac);
}

// ---------------------------------------------------------------- HTML

inline std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string html_unescape(std::string_view s) {
  static const std::map<std::string, std::string, std::less<>> named = {
      {"amp", "&"}, {"lt", "<"}, {"gt", ">"}, {"quot", "\""}, {"apos", "'"}, {"nbsp", " "}};
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '&') {
      out += s[i];
      continue;
    }
    const auto semi = s.find(';', i);
    if (semi == std::string_view::npos || semi - i > 10) {
      out += s[i];
      continue;
    }
    const std::string_view ent = s.substr(i + 1, semi - i - 1);
    if (!ent.empty() && ent[0] == '#') {
      const bool hex = ent.size() > 1 && (ent[1] == 'x' || ent[1] == 'X');
      const long code = std::strtol(std::string(ent.substr(hex ? 2 : 1)).c_str(), nullptr, hex ? 16 : 10);
      if (code > 0 && code < 128) {
        out += static_cast<char>(code);
        i = semi;
        continue;
      }
    } else if (auto it = named.find(ent); it != named.end()) {
      out += it->second;
      i = semi;
      continue;
    }
    out += s[i];
  }
  return out;
}

inline std::string table_to_html(const TableSpec& spec) {
  std::string out = "<table>";
  for (int r = 0; r < spec.rows; ++r) {
    out += "<tr>";
    for (int c = 0; c < spec.cols; ++c) out += "<td>" + html_escape(spec.cell(r, c)) + "</td>";
    out += "</tr>";
  }
  out += "</table>";
  return out;
}

/// Parses <table>/<tr>/<td>|<th> markup into a row-major grid of unescaped
/// cell texts. Attributes are ignored; tags are case-insensitive.
inline std::vector<std::vector<std::string>> parse_html_table(std::string_view html) {
  std::vector<std::vector<std::string>> grid;
  bool in_table = false, in_row = false, in_cell = false, closed = false;
  std::string cell;
  std::size_t i = 0;
  while (i < html.size()) {
    if (html[i] != '<') {
      if (in_cell) cell += html[i];
      else if (!std::isspace(static_cast<unsigned char>(html[i])))
        throw DatagenError("unexpected text outside a cell at offset " + std::to_string(i));
      ++i;
      continue;
    }
    const auto end = html.find('>', i);
    if (end == std::string_view::npos) throw DatagenError("unterminated tag at offset " + std::to_string(i));
    std::string tag(html.substr(i + 1, end - i - 1));
    i = end + 1;
    const bool closing = !tag.empty() && tag[0] == '/';
    if (closing) tag.erase(0, 1);
    tag = tag.substr(0, tag.find_first_of(" \t\n/"));
    std::transform(tag.begin(), tag.end(), tag.begin(), [](unsigned char c) { return std::tolower(c); });
    if (tag == "table") {
      if (!closing) {
        if (in_table || closed) throw DatagenError("nested or repeated <table>");
        in_table = true;
      } else {
        if (!in_table || in_row) throw DatagenError("misplaced </table>");
        in_table = false;
        closed = true;
      }
    } else if (tag == "tr") {
      if (!closing) {
        if (!in_table || in_row) throw DatagenError("misplaced <tr>");
        in_row = true;
        grid.emplace_back();
      } else {
        if (!in_row || in_cell) throw DatagenError("misplaced </tr>");
        in_row = false;
      }
    } else if (tag == "td" || tag == "th") {
      if (!closing) {
        if (!in_row || in_cell) throw DatagenError("misplaced <td>");
        in_cell = true;
        cell.clear();
      } else {
        if (!in_cell) throw DatagenError("misplaced </td>");
        in_cell = false;
        grid.back().push_back(html_unescape(cell));
      }
    } else if (tag == "thead" || tag == "tbody") {
      continue;
    } else {
      throw DatagenError("unsupported tag <" + tag + ">");
    }
  }
  if (in_table || !closed) throw DatagenError("missing </table>");
  return grid;
}

// ---------------------------------------------------------------- spec generation

inline void validate_spec(const TableSpec& spec) {
  if (spec.rows <= 0 || spec.cols <= 0) throw DatagenError("table must have at least one row and column");
  if (spec.cells.size() != static_cast<std::size_t>(spec.rows * spec.cols))
    throw DatagenError("cell_texts must hold rows x cols entries");
  for (const auto& t : spec.cells)
    if (t.empty()) throw DatagenError("empty cell text");
  for (int c : spec.numeric_cols) {
    if (c < 0 || c >= spec.cols) throw DatagenError("numeric column out of range");
    for (int r = 1; r < spec.rows; ++r)
      if (!parse_hundredths(spec.cell(r, c))) throw DatagenError("non-numeric cell in numeric column: " + spec.cell(r, c));
  }
}

struct TableShape {
  int min_rows = 3, max_rows = 5;  // including the header row
  int min_cols = 2, max_cols = 3;
  double warp_probability = 0.0;
  double warp = 0.04;
};

/// Random header + key column + numeric/text columns with unique row keys.
inline TableSpec random_table_spec(std::mt19937_64& rng, const TableShape& shape = {}) {
  static const std::vector<std::string> items = {"Apple", "Bread", "Milk",  "Tea",   "Rice",  "Salt",  "Eggs",
                                                 "Soap",  "Jam",   "Honey", "Pasta", "Beans", "Corn",  "Fish",
                                                 "Cake",  "Juice", "Nuts",  "Oats",  "Plum",  "Lime",  "Pear"};
  static const std::vector<std::string> key_headers = {"Item", "Name", "Product", "Desc"};
  static const std::vector<std::string> num_headers = {"Qty", "Price", "Total", "Cost", "Units", "Tax"};
  static const std::vector<std::string> text_headers = {"Code", "Unit", "Grade"};
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  TableSpec spec;
  spec.rows = std::uniform_int_distribution<int>(shape.min_rows, shape.max_rows)(rng);
  spec.cols = std::uniform_int_distribution<int>(shape.min_cols, shape.max_cols)(rng);
  spec.cells.assign(static_cast<std::size_t>(spec.rows * spec.cols), "");

  std::vector<std::string> keys = items;
  std::shuffle(keys.begin(), keys.end(), rng);
  spec.cells[0] = pick(key_headers);
  for (int r = 1; r < spec.rows; ++r) spec.cells[static_cast<std::size_t>(r * spec.cols)] = keys[static_cast<std::size_t>(r - 1)];

  std::vector<std::string> used_headers = {spec.cells[0]};
  for (int c = 1; c < spec.cols; ++c) {
    // the last column is always numeric so numerical questions are available
    const bool numeric = c == spec.cols - 1 || std::bernoulli_distribution(0.6)(rng);
    std::string header;
    do header = pick(numeric ? num_headers : text_headers);
    while (std::find(used_headers.begin(), used_headers.end(), header) != used_headers.end());
    used_headers.push_back(header);
    spec.cells[static_cast<std::size_t>(c)] = header;
    const bool decimal = numeric && std::bernoulli_distribution(0.5)(rng);
    for (int r = 1; r < spec.rows; ++r) {
      std::string v;
      if (numeric && decimal) {
        const int cents = std::uniform_int_distribution<int>(5, 4999)(rng);
        v = format_hundredths(cents, false, false);
      } else if (numeric) {
        v = std::to_string(std::uniform_int_distribution<int>(1, 99)(rng));
      } else {
        v = std::string(1, static_cast<char>('A' + std::uniform_int_distribution<int>(0, 25)(rng))) +
            std::to_string(std::uniform_int_distribution<int>(1, 99)(rng));
      }
      spec.cells[static_cast<std::size_t>(r * spec.cols + c)] = v;
    }
    if (numeric) spec.numeric_cols.insert(c);
  }
  if (std::bernoulli_distribution(shape.warp_probability)(rng)) spec.style.warp = shape.warp;
  return spec;
}

// ---------------------------------------------------------------- rendering

inline void draw_text(Image& img, int x, int y, std::string_view text, int scale, std::uint8_t ink) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int gx = x + static_cast<int>(i) * font::glyph_width * scale;
    for (int py = 0; py < font::glyph_height; ++py)
      for (int px = 0; px < font::glyph_width; ++px)
        if (font::glyph_pixel(text[i], px, py))
          for (int sy = 0; sy < scale; ++sy)
            for (int sx = 0; sx < scale; ++sx)
              if (img.contains(gx + px * scale + sx, y + py * scale + sy)) img.at(gx + px * scale + sx, y + py * scale + sy) = ink;
  }
}

/// Renders a bordered grid at a seed-drawn position. Each cell polygon is the
/// cell's border rectangle (or its image under the warp).
inline DocumentSample render_document(const TableSpec& spec, std::uint64_t seed, int width = 256, int height = 256) {
  validate_spec(spec);
  const int scale = spec.style.font_scale;
  const int pad = spec.style.padding;
  if (scale < 1 || pad < 0) throw DatagenError("invalid table style");
  for (const auto& t : spec.cells)
    for (char ch : t)
      if (!font::has_glyph(ch)) throw DatagenError(std::string("no glyph for character '") + ch + "'");

  std::vector<int> col_w(static_cast<std::size_t>(spec.cols), 0);
  for (int c = 0; c < spec.cols; ++c)
    for (int r = 0; r < spec.rows; ++r)
      col_w[static_cast<std::size_t>(c)] =
          std::max(col_w[static_cast<std::size_t>(c)],
                   static_cast<int>(spec.cell(r, c).size()) * font::glyph_width * scale + 2 * pad);
  const int row_h = font::glyph_height * scale + 2 * pad;
  const int table_w = std::accumulate(col_w.begin(), col_w.end(), 0);
  const int table_h = row_h * spec.rows;
  const int margin = 2;
  if (table_w + 2 * margin > width || table_h + 2 * margin > height)
    throw LayoutError("table of " + std::to_string(table_w) + "x" + std::to_string(table_h) +
                      " px does not fit a " + std::to_string(width) + "x" + std::to_string(height) + " image");

  std::mt19937_64 rng(seed);
  const int x0 = std::uniform_int_distribution<int>(margin, width - margin - table_w)(rng);
  const int y0 = std::uniform_int_distribution<int>(margin, height - margin - table_h)(rng);

  DocumentSample doc;
  doc.image = Image::filled(width, height, 1, 255);
  doc.html = table_to_html(spec);
  std::vector<int> col_x(static_cast<std::size_t>(spec.cols) + 1, x0);
  for (int c = 0; c < spec.cols; ++c) col_x[static_cast<std::size_t>(c) + 1] = col_x[static_cast<std::size_t>(c)] + col_w[static_cast<std::size_t>(c)];

  for (int r = 0; r <= spec.rows; ++r)
    draw_line(doc.image, Point{static_cast<double>(x0), static_cast<double>(y0 + r * row_h)},
              Point{static_cast<double>(x0 + table_w), static_cast<double>(y0 + r * row_h)}, Rgb{0, 0, 0});
  for (int c = 0; c <= spec.cols; ++c)
    draw_line(doc.image, Point{static_cast<double>(col_x[static_cast<std::size_t>(c)]), static_cast<double>(y0)},
              Point{static_cast<double>(col_x[static_cast<std::size_t>(c)]), static_cast<double>(y0 + table_h)}, Rgb{0, 0, 0});

  for (int r = 0; r < spec.rows; ++r)
    for (int c = 0; c < spec.cols; ++c) {
      const int cx = col_x[static_cast<std::size_t>(c)];
      const int cy = y0 + r * row_h;
      draw_text(doc.image, cx + pad, cy + pad, spec.cell(r, c), scale, 0);
      doc.cells.push_back(CellRecord{spec.cell(r, c),
                                     make_rect(cx, cy, cx + col_w[static_cast<std::size_t>(c)], cy + row_h), r + 1,
                                     c + 1});
    }

  if (spec.style.warp > 0.0) {
    const double mag = spec.style.warp * std::min(width, height);
    std::uniform_real_distribution<double> jitter(0.0, mag);
    const std::array<Point, 4> src = {Point{0, 0}, Point{static_cast<double>(width), 0},
                                      Point{static_cast<double>(width), static_cast<double>(height)},
                                      Point{0, static_cast<double>(height)}};
    std::array<Point, 4> dst = src;
    // corners only move inward, so the warped page stays inside the image
    dst[0] = Point{jitter(rng), jitter(rng)};
    dst[1] = Point{width - jitter(rng), jitter(rng)};
    dst[2] = Point{width - jitter(rng), height - jitter(rng)};
    dst[3] = Point{jitter(rng), height - jitter(rng)};
    const Homography h = homography_from_points(src, dst);
    doc.image = warp_image(doc.image, h, 255);
    for (auto& cell : doc.cells) {
      std::array<Point, 4> pts{};
      for (std::size_t i = 0; i < 4; ++i) pts[i] = apply(h, cell.polygon[i]);
      cell.polygon = canonicalize(pts);
    }
    doc.warped = true;
  }
  return doc;
}

// ---------------------------------------------------------------- deterministic QA

struct QaOptions {
  int questions_per_doc = 15;
  std::array<double, 5> type_weights = reference_type_weights;
  std::set<QuestionType> allowed_types = {all_question_types.begin(), all_question_types.end()};
};

struct QaNotice {
  std::string message;
};

namespace detail {

struct TableView {
  int rows = 0, cols = 0;
  std::vector<std::string> text;  // row-major, 0-based
  std::vector<int> numeric_cols;  // 0-based, data rows all parse

  const std::string& at(int r, int c) const { return text[static_cast<std::size_t>(r * cols + c)]; }

  explicit TableView(const DocumentSample& s) : rows(s.rows()), cols(s.cols()) {
    text.assign(static_cast<std::size_t>(rows * cols), "");
    for (const auto& c : s.cells) text[static_cast<std::size_t>((c.row - 1) * cols + (c.col - 1))] = c.text;
    for (int c = 1; c < cols; ++c) {
      bool ok = rows >= 2;
      for (int r = 1; r < rows && ok; ++r) ok = parse_hundredths(at(r, c)).has_value();
      if (ok) numeric_cols.push_back(c);
    }
  }

  // Row index of the unique extreme value in column c, if any.
  std::optional<int> unique_extreme(int c, bool maximum) const {
    std::optional<int> best;
    std::int64_t best_v = 0;
    bool tie = false;
    for (int r = 1; r < rows; ++r) {
      const std::int64_t v = *parse_hundredths(at(r, c));
      if (!best || (maximum ? v > best_v : v < best_v)) {
        best = r;
        best_v = v;
        tie = false;
      } else if (v == best_v) {
        tie = true;
      }
    }
    if (tie) return std::nullopt;
    return best;
  }

  bool unique_in_table(const std::string& t) const { return std::count(text.begin(), text.end(), t) == 1; }
};

inline QARecord grounded_qa(const DocumentSample& s, QuestionType t, std::string q, int r0, int c0) {
  const CellRecord* cell = s.find(r0 + 1, c0 + 1);
  QARecord qa{std::move(q), cell->text, t, LogicalLoc{r0 + 1, c0 + 1}, cell->polygon, true};
  return qa;
}

inline QARecord plain_qa(QuestionType t, std::string q, std::string a) {
  return QARecord{std::move(q), std::move(a), t, std::nullopt, std::nullopt, false};
}

template <class Rng>
int uniform(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace detail

/// Emits templated questions whose answers are computed from the cell grid.
/// Row 1 is the header and column 1 the row key. Only answers equal to the
/// text of a single identifiable cell are grounded.
inline std::vector<QARecord> gen_qa_deterministic(const DocumentSample& sample, std::uint64_t seed,
                                                  const QaOptions& opt = {}, std::vector<QaNotice>* notices = nullptr) {
  using detail::uniform;
  const detail::TableView tv(sample);
  std::mt19937_64 rng(seed);
  const bool reasoning_ok = tv.rows >= 2 && tv.cols >= 2;
  const bool numeric_ok = !tv.numeric_cols.empty();
  std::array<double, 5> weights{};
  for (std::size_t i = 0; i < 5; ++i) {
    const QuestionType t = all_question_types[i];
    bool possible = opt.allowed_types.count(t) > 0;
    if ((t == QuestionType::simple_reasoning || t == QuestionType::complex_reasoning) && !reasoning_ok) possible = false;
    if (t == QuestionType::complex_reasoning && tv.rows < 3) possible = false;
    if (t == QuestionType::numerical && !numeric_ok) {
      if (possible && notices) notices->push_back({"numerical questions skipped: no numeric columns"});
      possible = false;
    }
    weights[i] = possible ? opt.type_weights[i] : 0.0;
  }
  if (std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) return {};
  std::discrete_distribution<std::size_t> type_dist(weights.begin(), weights.end());

  std::vector<QARecord> out;
  std::set<std::string> seen;
  auto data_row = [&]() { return uniform(rng, 1, tv.rows - 1); };
  auto num_col = [&]() { return tv.numeric_cols[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(tv.numeric_cols.size()) - 1))]; };
  const std::string& key_header = tv.at(0, 0);

  for (int n = 0; n < opt.questions_per_doc; ++n) {
    const QuestionType t = all_question_types[type_dist(rng)];
    for (int attempt = 0; attempt < 10; ++attempt) {
      std::optional<QARecord> qa;
      switch (t) {
        case QuestionType::specific_extraction: {
          const int r = uniform(rng, 0, tv.rows - 1);
          const int c = uniform(rng, 0, tv.cols - 1);
          if (uniform(rng, 0, 1) == 0 || r == 0)
            qa = detail::grounded_qa(sample, t,
                                     "What is the value at row " + std::to_string(r + 1) + ", column " +
                                         std::to_string(c + 1) + "?",
                                     r, c);
          else
            qa = detail::grounded_qa(sample, t,
                                     "What is the value under " + tv.at(0, c) + " in row " + std::to_string(r + 1) + "?",
                                     r, c);
          break;
        }
        case QuestionType::simple_reasoning: {
          if (uniform(rng, 0, 1) == 0) {
            const int r = data_row();
            const int c = uniform(rng, 1, tv.cols - 1);
            qa = detail::grounded_qa(sample, t, "What is the " + tv.at(0, c) + " of " + tv.at(r, 0) + "?", r, c);
          } else {
            const int r = data_row();
            const int c = uniform(rng, 0, tv.cols - 1);
            if (!tv.unique_in_table(tv.at(r, c))) break;
            qa = detail::grounded_qa(sample, t, "Which column header is above " + tv.at(r, c) + "?", 0, c);
          }
          break;
        }
        case QuestionType::complex_reasoning: {
          const int kind = uniform(rng, 0, numeric_ok ? 2 : 0);
          if (kind == 0) {
            std::string list;
            for (int r = 1; r < tv.rows; ++r) list += (r > 1 ? ", " : "") + tv.at(r, 0);
            qa = detail::plain_qa(t, "List every " + key_header + " in order.", list);
          } else if (kind == 1) {
            const int c = num_col();
            const bool maximum = uniform(rng, 0, 1) == 1;
            const auto r = tv.unique_extreme(c, maximum);
            if (!r) break;
            qa = detail::grounded_qa(sample, t,
                                     "Which " + key_header + " has the " + (maximum ? "highest " : "lowest ") +
                                         tv.at(0, c) + "?",
                                     *r, 0);
          } else {
            const int c = num_col();
            const int pivot = data_row();
            const std::int64_t v = *parse_hundredths(tv.at(pivot, c));
            int count = 0;
            for (int r = 1; r < tv.rows; ++r) count += *parse_hundredths(tv.at(r, c)) > v ? 1 : 0;
            qa = detail::plain_qa(t, "How many rows have " + tv.at(0, c) + " above " + tv.at(pivot, c) + "?",
                                  std::to_string(count));
          }
          break;
        }
        case QuestionType::numerical: {
          const int c = num_col();
          const std::string& h = tv.at(0, c);
          std::vector<std::int64_t> vals;
          std::string joined;
          bool integral = true, dollar = false;
          for (int r = 1; r < tv.rows; ++r) {
            vals.push_back(*parse_hundredths(tv.at(r, c)));
            integral = integral && tv.at(r, c).find('.') == std::string::npos;
            dollar = dollar || tv.at(r, c).front() == '$';
          }
          auto cell_list = [&](const char* sep) {
            std::string s;
            for (int r = 1; r < tv.rows; ++r) s += (r > 1 ? sep : "") + tv.at(r, c);
            return s;
          };
          const std::int64_t sum = std::accumulate(vals.begin(), vals.end(), std::int64_t{0});
          switch (uniform(rng, 0, 3)) {
            case 0:
              qa = detail::plain_qa(t, "What is the sum of " + h + "?",
                                    cell_list("+") + "=" + format_hundredths(sum, integral, dollar));
              break;
            case 1:
              qa = detail::plain_qa(t, "What is the maximum " + h + "?",
                                    "max(" + cell_list(",") + ")=" +
                                        format_hundredths(*std::max_element(vals.begin(), vals.end()), integral, dollar));
              break;
            case 2:
              qa = detail::plain_qa(t, "What is the minimum " + h + "?",
                                    "min(" + cell_list(",") + ")=" +
                                        format_hundredths(*std::min_element(vals.begin(), vals.end()), integral, dollar));
              break;
            default: {
              // exact rational mean rounded half-up to two decimals
              const auto n_vals = static_cast<std::int64_t>(vals.size());
              const std::int64_t avg = (2 * sum + n_vals) / (2 * n_vals);
              qa = detail::plain_qa(t, "What is the average " + h + "?",
                                    "(" + cell_list("+") + ")/" + std::to_string(n_vals) + "=" +
                                        format_hundredths(avg, false, dollar));
            }
          }
          break;
        }
        case QuestionType::content_summary: {
          std::string headers;
          for (int c = 0; c < tv.cols; ++c) headers += (c > 0 ? (c + 1 == tv.cols ? " and " : ", ") : "") + tv.at(0, c);
          if (uniform(rng, 0, 1) == 0)
            qa = detail::plain_qa(t, "Summarize the table.",
                                  "The table lists " + std::to_string(tv.rows - 1) + " rows of " + headers + ".");
          else
            qa = detail::plain_qa(t, "What does the table describe?",
                                  std::to_string(tv.cols) + " columns (" + headers + ") for " +
                                      std::to_string(tv.rows - 1) + " entries.");
          break;
        }
      }
      if (qa && seen.insert(qa->question).second) {
        out.push_back(std::move(*qa));
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- verification

struct VerifyStats {
  int retained = 0;
  int passed_ungrounded = 0;
  int mismatched = 0;
  int out_of_range = 0;
  int missing_location = 0;
};

/// Keeps a located candidate only when its answer equals the text of the
/// referenced cell (after normalization) and attaches that cell's polygon.
/// Candidates without a location pass through ungrounded, except specific
/// extraction, which must reference a cell.
inline std::vector<QARecord> verify_and_ground(const std::vector<QARecord>& candidates, const DocumentSample& sample,
                                               VerifyStats* stats = nullptr) {
  VerifyStats local;
  VerifyStats& st = stats ? *stats : local;
  std::vector<QARecord> out;
  for (const auto& cand : candidates) {
    if (!cand.logical_loc) {
      if (cand.qtype == QuestionType::specific_extraction) {
        ++st.missing_location;
        continue;
      }
      QARecord qa = cand;
      qa.polygon.reset();
      qa.grounded = false;
      out.push_back(std::move(qa));
      ++st.passed_ungrounded;
      continue;
    }
    const CellRecord* cell = sample.find(cand.logical_loc->row, cand.logical_loc->col);
    if (!cell) {
      ++st.out_of_range;
      continue;
    }
    if (normalize_answer(cand.answer) != normalize_answer(cell->text)) {
      ++st.mismatched;
      continue;
    }
    QARecord qa = cand;
    qa.answer = normalize_answer(cand.answer);
    qa.polygon = cell->polygon;
    qa.grounded = true;
    out.push_back(std::move(qa));
    ++st.retained;
  }
  return out;
}

}  // namespace stnet
