#pragma once

// Physical decoder. A <see> hidden state h is mapped by one affine projection
// to eight queries; each query is scored against the location embeddings
// Loc (1000 x D), softmaxed into a distribution over bins, and reduced to its
// expectation. Training regresses the expectations onto the ground-truth
// bins with a mean squared error; inference rounds them.

#include <array>
#include <cmath>
#include <span>

#include "stnet/nn.hpp"
#include "stnet/vocab.hpp"

namespace stnet {

inline constexpr int num_coords = 8;

template <class S>
using LocRef = Eigen::Ref<const Mat<S>>;

/// One affine map D -> 8D, split into the eight queries in polygon layout order.
template <class S>
Mat<S> project_queries(const Linear<S>& proj, const RowVec<S>& h) {
  const Eigen::Index d = h.cols();
  RowVec<S> flat = h * proj.w + proj.b;
  return Eigen::Map<const Mat<S>>(flat.data(), num_coords, d);
}

template <class S>
RowVec<S> coord_logits(const RowVec<S>& query, const LocRef<S>& loc) {
  return query * loc.transpose();
}

template <class S>
RowVec<S> coord_distribution(const RowVec<S>& query, const LocRef<S>& loc) {
  RowVec<S> z = coord_logits<S>(query, loc);
  z = (z.array() - z.maxCoeff()).exp();
  return z / z.sum();
}

/// Sum_i i * b_i; deliberately the expectation, not the argmax.
template <class S>
S expected_coord(const RowVec<S>& b) {
  S e = 0;
  for (Eigen::Index i = 0; i < b.cols(); ++i) e += static_cast<S>(i) * b(i);
  return e;
}

/// (1/8) * sum_j (E_j - p*_j)^2
inline double see_loss(std::span<const double, num_coords> expected, const QuantPolygon& gt) {
  double s = 0.0;
  for (std::size_t j = 0; j < num_coords; ++j) {
    const double d = expected[j] - gt.bins[j].value();
    s += d * d;
  }
  return s / num_coords;
}

/// dL/dE_j of see_loss.
inline std::array<double, num_coords> see_loss_grad(std::span<const double, num_coords> expected,
                                                    const QuantPolygon& gt) {
  std::array<double, num_coords> g{};
  for (std::size_t j = 0; j < num_coords; ++j) g[j] = 2.0 / num_coords * (expected[j] - gt.bins[j].value());
  return g;
}

template <class S>
struct SeeForward {
  Mat<S> queries;  // 8 x D
  Mat<S> probs;    // 8 x 1000
  std::array<double, num_coords> expected{};
};

template <class S>
SeeForward<S> see_forward(const Linear<S>& proj, const LocRef<S>& loc, const RowVec<S>& h) {
  SeeForward<S> f;
  f.queries = project_queries(proj, h);
  f.probs.resize(num_coords, loc.rows());
  for (int j = 0; j < num_coords; ++j) {
    f.probs.row(j) = coord_distribution<S>(f.queries.row(j), loc);
    f.expected[static_cast<std::size_t>(j)] = static_cast<double>(expected_coord<S>(f.probs.row(j)));
  }
  return f;
}

/// Gradient of a loss with respect to the 8 x 1000 pre-softmax scores, given
/// dL/dE_j: dz_jk = dE_j * b_jk * (k - E_j).
template <class S>
Mat<S> see_logit_grad(const SeeForward<S>& f, std::span<const double, num_coords> d_expected) {
  Mat<S> dz(f.probs.rows(), f.probs.cols());
  for (Eigen::Index j = 0; j < f.probs.rows(); ++j) {
    const S e = static_cast<S>(f.expected[static_cast<std::size_t>(j)]);
    const S de = static_cast<S>(d_expected[static_cast<std::size_t>(j)]);
    for (Eigen::Index k = 0; k < f.probs.cols(); ++k) dz(j, k) = de * f.probs(j, k) * (static_cast<S>(k) - e);
  }
  return dz;
}

/// Backpropagates dL/dE through scores, Loc, and the projection. Accumulates
/// into `g_proj` and `g_loc`; returns dL/dh.
template <class S>
RowVec<S> see_backward(const Linear<S>& proj, const LocRef<S>& loc, const RowVec<S>& h, const SeeForward<S>& f,
                       std::span<const double, num_coords> d_expected, Linear<S>& g_proj,
                       Eigen::Ref<Mat<S>> g_loc) {
  const Mat<S> dz = see_logit_grad(f, d_expected);
  Mat<S> dq(num_coords, loc.cols());
  dq.noalias() = dz * loc;
  g_loc.noalias() += dz.transpose() * f.queries;
  const Eigen::Map<const RowVec<S>> dq_flat(dq.data(), num_coords * loc.cols());
  g_proj.w.noalias() += h.transpose() * dq_flat;
  g_proj.b += dq_flat;
  return dq_flat * proj.w.transpose();
}

/// Rounds each expectation half-up to an integer bin, clamped to [0, 999].
inline QuantPolygon round_expected(std::span<const double, num_coords> expected) {
  QuantPolygon p;
  for (std::size_t j = 0; j < num_coords; ++j) {
    const double r = std::floor(expected[j] + 0.5);
    p.bins[j] = QuantBin(static_cast<int>(std::clamp(r, 0.0, static_cast<double>(num_bins - 1))));
  }
  return p;
}

template <class S>
QuantPolygon decode_polygon(const Linear<S>& proj, const LocRef<S>& loc, const RowVec<S>& h) {
  return round_expected(see_forward(proj, loc, h).expected);
}

}  // namespace stnet
