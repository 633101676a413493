#pragma once

// Inference on documents and scoring of predictions against a corpus.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stnet/dataset.hpp"
#include "stnet/image.hpp"
#include "stnet/metrics.hpp"
#include "stnet/model.hpp"
#include "stnet/vocab.hpp"

namespace stnet {

struct Prediction {
  std::string answer;
  std::vector<TokenId> tokens;
  std::optional<QuantPolygon> quant;  // model-canvas bins of the first <see>
  PredictedPolygon polygon;           // document pixel coordinates
  bool truncated = false;
};

/// Answers one question about a document: centered placement, greedy
/// decoding, and the polygon of the first emitted <see>.
template <class S>
Prediction predict_vqa(const Model<S>& m, const Vocabulary& vocab, const Image& doc, const std::string& question,
                       int max_new = 64, const Mat<S>* encoded = nullptr) {
  const Placement p = plan_placement(doc.width, doc.height, m.config.image_width, m.config.image_height,
                                     PaddingMode::centered, nullptr);
  Mat<S> z_local;
  if (!encoded) z_local = encode_image(m, place_on_canvas<S>(doc, p));
  const Mat<S>& z = encoded ? *encoded : z_local;
  std::vector<TokenId> prompt{Vocabulary::vqa};
  for (TokenId id : vocab.tokenize(question)) prompt.push_back(id);
  const Generation<S> g = greedy_generate(m, z, prompt, max_new);
  Prediction out;
  out.tokens = g.tokens;
  out.truncated = g.truncated;
  out.answer = vocab.detokenize(g.tokens);
  if (!g.see_hiddens.empty()) {
    out.quant = decode_polygon<S>(m.query_proj, m.loc(), g.see_hiddens.front());
    std::array<Point, 4> pts = dequantize_points(*out.quant, p.canvas_width, p.canvas_height);
    for (auto& pt : pts) pt = p.to_document(pt);
    out.polygon = pts;
  }
  return out;
}

/// Predictions for every QA of every record, in corpus order. Each document
/// is encoded once.
template <class S>
std::vector<std::vector<Prediction>> predict_corpus(const Model<S>& m, const Vocabulary& vocab,
                                                    const std::vector<CorpusRecord>& records, int max_new = 64) {
  std::vector<std::vector<Prediction>> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const Placement p = plan_placement(r.sample.image.width, r.sample.image.height, m.config.image_width,
                                       m.config.image_height, PaddingMode::centered, nullptr);
    const Mat<S> z = encode_image(m, place_on_canvas<S>(r.sample.image, p));
    std::vector<Prediction> preds;
    for (const auto& qa : r.qas) preds.push_back(predict_vqa(m, vocab, r.sample.image, qa.question, max_new, &z));
    out.push_back(std::move(preds));
  }
  return out;
}

/// Scores predictions aligned with records[i].qas[j]. Field metrics treat each
/// question as a field name and its answer as the value.
inline MetricsReport evaluate_predictions(const std::vector<CorpusRecord>& records,
                                          const std::vector<std::vector<Prediction>>& preds,
                                          const std::vector<double>& thresholds) {
  if (preds.size() != records.size()) throw std::invalid_argument("predictions do not align with the corpus");
  MetricsReport rep;
  int hit = 0, n_pred = 0, n_gold = 0, ted_docs = 0, exact = 0;
  double ted_sum = 0.0, anls_sum = 0.0, iou_sum = 0.0;
  std::vector<PredictedPolygon> pred_polys;
  std::vector<PixelPolygon> gold_polys;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& qas = records[i].qas;
    if (preds[i].size() != qas.size()) throw std::invalid_argument("predictions do not align with record " + records[i].id);
    FieldSet gold_fields, pred_fields;
    for (std::size_t j = 0; j < qas.size(); ++j) {
      const auto& gold = qas[j];
      const auto& pred = preds[i][j];
      const std::string pa = normalize_answer(pred.answer);
      const std::string ga = normalize_answer(gold.answer);
      ++rep.sample_count;
      exact += pa == ga ? 1 : 0;
      anls_sum += anls(pa, {ga});
      gold_fields.emplace_back(gold.question, ga);
      if (!pa.empty()) pred_fields.emplace_back(gold.question, pa);
      if (gold.polygon) {
        ++rep.grounded_count;
        pred_polys.push_back(pred.polygon);
        gold_polys.push_back(*gold.polygon);
        iou_sum += pred.polygon ? prediction_iou(*pred.polygon, *gold.polygon) : 0.0;
      }
    }
    hit += matched_pairs(pred_fields, gold_fields);
    n_pred += static_cast<int>(pred_fields.size());
    n_gold += static_cast<int>(gold_fields.size());
    const AnswerTree gold_tree = answer_tree(gold_fields);
    if (gold_tree) {
      ted_sum += ted_accuracy(answer_tree(pred_fields), gold_tree);
      ++ted_docs;
    }
  }
  const PrecisionRecall pr = f1_from_counts(hit, n_pred, n_gold);
  rep.precision = pr.precision;
  rep.recall = pr.recall;
  rep.f1 = pr.f1;
  rep.ted_acc = ted_docs ? ted_sum / ted_docs : 0.0;
  rep.anls = rep.sample_count ? anls_sum / rep.sample_count : 0.0;
  rep.exact_match = rep.sample_count ? static_cast<double>(exact) / rep.sample_count : 0.0;
  rep.mean_iou = rep.grounded_count ? iou_sum / rep.grounded_count : 0.0;
  for (double t : thresholds) rep.iou_acc.emplace_back(t, iou_accuracy(pred_polys, gold_polys, t));
  return rep;
}

inline nlohmann::json prediction_to_json(const Prediction& p) {
  nlohmann::json j = {{"answer", p.answer}, {"truncated", p.truncated}};
  if (p.polygon) {
    nlohmann::json poly = nlohmann::json::array();
    for (const auto& pt : *p.polygon) poly.push_back({pt.x, pt.y});
    j["polygon"] = poly;
  }
  return j;
}

inline Prediction prediction_from_json(const nlohmann::json& j) {
  Prediction p;
  p.answer = j.at("answer").get<std::string>();
  p.truncated = j.value("truncated", false);
  if (j.contains("polygon") && !j.at("polygon").is_null()) {
    std::array<Point, 4> pts{};
    for (std::size_t i = 0; i < 4; ++i)
      pts[i] = Point{j.at("polygon").at(i).at(0).get<double>(), j.at("polygon").at(i).at(1).get<double>()};
    p.polygon = pts;
  }
  return p;
}

}  // namespace stnet
