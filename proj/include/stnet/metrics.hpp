#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stnet/geometry.hpp"

namespace stnet {

// ---------------------------------------------------------------- field F1

using FieldSet = std::vector<std::pair<std::string, std::string>>;

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Number of exact (field, value) matches, counting multiplicity.
inline int matched_pairs(const FieldSet& pred, const FieldSet& gold) {
  std::map<std::pair<std::string, std::string>, int> counts;
  for (const auto& p : gold) ++counts[p];
  int hit = 0;
  for (const auto& p : pred) {
    auto it = counts.find(p);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++hit;
    }
  }
  return hit;
}

inline PrecisionRecall f1_from_counts(int hit, int n_pred, int n_gold) {
  PrecisionRecall r;
  r.precision = n_pred > 0 ? static_cast<double>(hit) / n_pred : 0.0;
  r.recall = n_gold > 0 ? static_cast<double>(hit) / n_gold : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline PrecisionRecall field_f1(const FieldSet& pred, const FieldSet& gold) {
  return f1_from_counts(matched_pairs(pred, gold), static_cast<int>(pred.size()), static_cast<int>(gold.size()));
}

// ---------------------------------------------------------------- tree edit distance

struct TreeNode {
  std::string label;
  std::vector<TreeNode> children;
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

/// Ordered labeled tree; an empty optional is the empty tree.
using AnswerTree = std::optional<TreeNode>;

inline int tree_size(const AnswerTree& t) {
  if (!t) return 0;
  int n = 1;
  for (const auto& c : t->children) n += tree_size(AnswerTree(c));
  return n;
}

namespace detail {

struct PostOrder {
  std::vector<std::string> labels;
  std::vector<int> leftmost;  // leftmost leaf descendant, postorder index
  std::vector<int> keyroots;
};

inline int flatten(const TreeNode& n, PostOrder& po) {
  int first_leaf = -1;
  for (const auto& c : n.children) {
    const int l = flatten(c, po);
    if (first_leaf < 0) first_leaf = l;
  }
  po.labels.push_back(n.label);
  const int self = static_cast<int>(po.labels.size()) - 1;
  po.leftmost.push_back(first_leaf < 0 ? self : first_leaf);
  return po.leftmost.back();
}

inline PostOrder postorder(const TreeNode& root) {
  PostOrder po;
  flatten(root, po);
  const int n = static_cast<int>(po.labels.size());
  // keyroots: the highest node for each distinct leftmost leaf
  std::map<int, int> by_leaf;
  for (int i = 0; i < n; ++i) by_leaf[po.leftmost[static_cast<std::size_t>(i)]] = i;
  for (const auto& [leaf, node] : by_leaf) po.keyroots.push_back(node);
  std::sort(po.keyroots.begin(), po.keyroots.end());
  return po;
}

}  // namespace detail

/// Zhang-Shasha keyroot dynamic program; unit insert, delete and relabel costs.
inline int tree_edit_distance(const AnswerTree& a, const AnswerTree& b) {
  if (!a) return tree_size(b);
  if (!b) return tree_size(a);
  const detail::PostOrder A = detail::postorder(*a);
  const detail::PostOrder B = detail::postorder(*b);
  const int n = static_cast<int>(A.labels.size());
  const int m = static_cast<int>(B.labels.size());
  std::vector<std::vector<int>> td(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(m), 0));
  std::vector<std::vector<int>> fd(static_cast<std::size_t>(n + 1), std::vector<int>(static_cast<std::size_t>(m + 1), 0));
  auto la = [&](int i) { return A.leftmost[static_cast<std::size_t>(i)]; };
  auto lb = [&](int j) { return B.leftmost[static_cast<std::size_t>(j)]; };
  for (int ki : A.keyroots)
    for (int kj : B.keyroots) {
      const int li = la(ki), lj = lb(kj);
      // fd indexed with offsets: row r <-> node li + r - 1, r = 0 is the empty forest
      auto F = [&](int i, int j) -> int& {
        return fd[static_cast<std::size_t>(i - li + 1)][static_cast<std::size_t>(j - lj + 1)];
      };
      F(li - 1, lj - 1) = 0;
      for (int i = li; i <= ki; ++i) F(i, lj - 1) = F(i - 1, lj - 1) + 1;
      for (int j = lj; j <= kj; ++j) F(li - 1, j) = F(li - 1, j - 1) + 1;
      for (int i = li; i <= ki; ++i)
        for (int j = lj; j <= kj; ++j) {
          const int del = F(i - 1, j) + 1;
          const int ins = F(i, j - 1) + 1;
          if (la(i) == li && lb(j) == lj) {
            const int rel = F(i - 1, j - 1) + (A.labels[static_cast<std::size_t>(i)] == B.labels[static_cast<std::size_t>(j)] ? 0 : 1);
            F(i, j) = std::min({del, ins, rel});
            td[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = F(i, j);
          } else {
            const int sub = F(la(i) - 1, lb(j) - 1) + td[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            F(i, j) = std::min({del, ins, sub});
          }
        }
    }
  return td[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(m - 1)];
}

/// max(0, 1 - TED(pred, gold) / TED(empty, gold))
inline double ted_accuracy(const AnswerTree& pred, const AnswerTree& gold) {
  const int denom = tree_size(gold);
  if (denom == 0) throw std::invalid_argument("ted_accuracy needs a non-empty gold tree");
  return std::max(0.0, 1.0 - static_cast<double>(tree_edit_distance(pred, gold)) / denom);
}

/// root -> one node per field -> value leaf. Fields with empty values are
/// omitted; no fields gives the empty tree.
inline AnswerTree answer_tree(const FieldSet& fields) {
  TreeNode root{"root", {}};
  for (const auto& [name, value] : fields) {
    if (value.empty()) continue;
    root.children.push_back(TreeNode{name, {TreeNode{value, {}}}});
  }
  if (root.children.empty()) return std::nullopt;
  return root;
}

// ---------------------------------------------------------------- ANLS

inline int levenshtein(std::string_view a, std::string_view b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Best over golds of (1 - NL) where NL < 0.5, else 0; case-insensitive.
inline double anls(std::string_view pred, const std::vector<std::string>& golds, double threshold = 0.5) {
  if (golds.empty()) throw std::invalid_argument("anls needs at least one gold answer");
  const std::string p = ascii_lower(pred);
  double best = 0.0;
  for (const auto& g : golds) {
    const std::string gl = ascii_lower(g);
    const std::size_t len = std::max(p.size(), gl.size());
    const double nl = len == 0 ? 0.0 : static_cast<double>(levenshtein(p, gl)) / static_cast<double>(len);
    best = std::max(best, nl < threshold ? 1.0 - nl : 0.0);
  }
  return best;
}

// ---------------------------------------------------------------- IoU accuracy

using PredictedPolygon = std::optional<std::array<Point, 4>>;

/// Fraction of pairs with IoU strictly above the threshold; a missing
/// prediction counts as wrong.
inline double iou_accuracy(const std::vector<PredictedPolygon>& pred, const std::vector<PixelPolygon>& gold,
                           double threshold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("iou_accuracy: prediction and gold lists differ in length");
  if (threshold < 0.0 || threshold > 1.0) throw std::invalid_argument("iou_accuracy: threshold must lie in [0, 1]");
  if (gold.empty()) return 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (pred[i] && prediction_iou(*pred[i], gold[i]) > threshold) ++correct;
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

// ---------------------------------------------------------------- report

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double ted_acc = 0.0;
  double anls = 0.0;
  double exact_match = 0.0;
  double mean_iou = 0.0;
  std::vector<std::pair<double, double>> iou_acc;  // (threshold, accuracy)
  int sample_count = 0;
  int grounded_count = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"f1", f1},           {"precision", precision}, {"recall", recall},
                        {"ted_acc", ted_acc}, {"anls", anls},           {"exact_match", exact_match},
                        {"mean_iou", mean_iou}, {"sample_count", sample_count}, {"grounded_count", grounded_count}};
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& [t, a] : iou_acc) {
      std::ostringstream key;
      key << t;
      acc[key.str()] = a;
    }
    j["iou_acc"] = acc;
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "samples         " << sample_count << " (" << grounded_count << " grounded)\n"
       << "field F1        " << f1 << "  (P " << precision << ", R " << recall << ")\n"
       << "TED accuracy    " << ted_acc << "\n"
       << "ANLS            " << anls << "\n"
       << "exact match     " << exact_match << "\n"
       << "mean IoU        " << mean_iou << "\n";
    for (const auto& [t, a] : iou_acc) {
      std::ostringstream key;
      key << t;
      os << "IoU acc @" << key.str() << std::string(key.str().size() < 6 ? 6 - key.str().size() : 0, ' ') << a << "\n";
    }
    return os.str();
  }
};

}  // namespace stnet
