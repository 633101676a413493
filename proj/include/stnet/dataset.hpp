#pragma once

// Corpus on disk: <dir>/images/<id>.pgm plus <dir>/records.jsonl, one JSON
// record per document. The first line of records.jsonl is a '#' header
// comment; blank lines and further comments are skipped.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stnet/datagen.hpp"
#include "stnet/image.hpp"

namespace stnet {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* corpus_header = "# stnet corpus v1";

enum class Source { auxiliary, downstream };

inline std::string to_string(Source s) { return s == Source::auxiliary ? "auxiliary" : "downstream"; }

inline Source source_from_string(std::string_view s) {
  if (s == "auxiliary") return Source::auxiliary;
  if (s == "downstream") return Source::downstream;
  throw DatasetError("unknown source: " + std::string(s));
}

struct CorpusRecord {
  std::string id;
  Source source = Source::auxiliary;
  DocumentSample sample;
  std::vector<QARecord> qas;
};

inline nlohmann::json polygon_to_json(const PixelPolygon& p) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& pt : p.points()) j.push_back({pt.x, pt.y});
  return j;
}

inline PixelPolygon polygon_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw DatasetError("polygon must be 4 [x, y] points");
  std::array<Point, 4> pts{};
  for (std::size_t i = 0; i < 4; ++i) pts[i] = Point{j.at(i).at(0).get<double>(), j.at(i).at(1).get<double>()};
  PixelPolygon p = canonicalize(pts);
  if (p.points() != pts) throw DatasetError("polygon is not in canonical order");
  return p;
}

inline nlohmann::json qa_to_json(const QARecord& qa) {
  nlohmann::json j = {{"question", qa.question}, {"answer", qa.answer}, {"qtype", to_string(qa.qtype)},
                      {"grounded", qa.grounded}};
  j["logical_loc"] = qa.logical_loc ? nlohmann::json{qa.logical_loc->row, qa.logical_loc->col} : nlohmann::json(nullptr);
  j["polygon"] = qa.polygon ? polygon_to_json(*qa.polygon) : nlohmann::json(nullptr);
  return j;
}

inline QARecord qa_from_json(const nlohmann::json& j) {
  QARecord qa;
  qa.question = j.at("question").get<std::string>();
  qa.answer = j.at("answer").get<std::string>();
  qa.qtype = question_type_from_string(j.at("qtype").get<std::string>());
  qa.grounded = j.at("grounded").get<bool>();
  if (!j.at("logical_loc").is_null())
    qa.logical_loc = LogicalLoc{j.at("logical_loc").at(0).get<int>(), j.at("logical_loc").at(1).get<int>()};
  if (!j.at("polygon").is_null()) qa.polygon = polygon_from_json(j.at("polygon"));
  if (qa.grounded && !qa.polygon) throw DatasetError("grounded QA without polygon");
  if (qa.qtype == QuestionType::specific_extraction && !qa.logical_loc)
    throw DatasetError("specific extraction QA without logical location");
  return qa;
}

inline nlohmann::json record_to_json(const CorpusRecord& r, const std::string& image_path) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.sample.cells)
    cells.push_back({{"text", c.text}, {"row", c.row}, {"col", c.col}, {"polygon", polygon_to_json(c.polygon)}});
  nlohmann::json qas = nlohmann::json::array();
  for (const auto& qa : r.qas) qas.push_back(qa_to_json(qa));
  return {{"id", r.id},
          {"source", to_string(r.source)},
          {"image", image_path},
          {"width", r.sample.image.width},
          {"height", r.sample.image.height},
          {"warped", r.sample.warped},
          {"html", r.sample.html},
          {"cells", cells},
          {"qas", qas}};
}

/// Writes images and records; overwrites an existing records file.
inline void write_corpus(const std::filesystem::path& dir, const std::vector<CorpusRecord>& records) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DatasetError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  std::ofstream os(dir / "records.jsonl", std::ios::binary);
  if (!os) throw DatasetError("cannot write " + (dir / "records.jsonl").string());
  os << corpus_header << '\n';
  for (const auto& r : records) {
    const std::string rel = "images/" + r.id + ".pgm";
    write_pnm(r.sample.image, (dir / rel).string());
    os << record_to_json(r, rel).dump() << '\n';
  }
  if (!os) throw DatasetError("failed writing corpus records");
}

/// Reads records.jsonl and its images. Errors name the offending line.
inline std::vector<CorpusRecord> read_corpus(const std::filesystem::path& dir, bool load_images = true) {
  const auto path = dir / "records.jsonl";
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot read " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusRecord r;
      r.id = j.at("id").get<std::string>();
      r.source = source_from_string(j.at("source").get<std::string>());
      r.sample.html = j.at("html").get<std::string>();
      r.sample.warped = j.at("warped").get<bool>();
      for (const auto& c : j.at("cells"))
        r.sample.cells.push_back(CellRecord{c.at("text").get<std::string>(), polygon_from_json(c.at("polygon")),
                                            c.at("row").get<int>(), c.at("col").get<int>()});
      for (const auto& q : j.at("qas")) r.qas.push_back(qa_from_json(q));
      const int w = j.at("width").get<int>();
      const int h = j.at("height").get<int>();
      if (load_images) {
        r.sample.image = read_pnm((dir / j.at("image").get<std::string>()).string());
        if (r.sample.image.width != w || r.sample.image.height != h) throw DatasetError("image size disagrees with record");
      } else {
        r.sample.image.width = w;
        r.sample.image.height = h;
      }
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace stnet
