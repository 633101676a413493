#pragma once

// Transformer building blocks with hand-written backward passes. Parameters
// and their gradients share one struct type, so a zero-initialized copy of a
// layer serves as its gradient accumulator. Forward calls that receive a cache
// record what the matching backward call needs.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace stnet {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <class S>
Mat<S> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

// ---------------------------------------------------------------- Linear

template <class S>
struct Linear {
  Mat<S> w;  // in x out
  Mat<S> b;  // 1 x out

  static Linear init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
    return {normal_matrix<S>(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng), Mat<S>::Zero(1, out)};
  }
  Linear zeros_like() const { return {Mat<S>::Zero(w.rows(), w.cols()), Mat<S>::Zero(1, b.cols())}; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }

  Mat<S> forward(const Mat<S>& x) const {
    Mat<S> y(x.rows(), w.cols());
    y.noalias() = x * w;
    y.rowwise() += b.row(0);
    return y;
  }

  // Accumulates dW, db into `g`; returns dx when requested.
  void backward(const Mat<S>& x, const Mat<S>& dy, Linear& g, Mat<S>* dx) const {
    g.w.noalias() += x.transpose() * dy;
    g.b += dy.colwise().sum();
    if (dx) dx->noalias() = dy * w.transpose();
  }
};

// ---------------------------------------------------------------- LayerNorm

template <class S>
struct LayerNorm {
  Mat<S> gamma;  // 1 x D
  Mat<S> beta;   // 1 x D

  struct Cache {
    Mat<S> xhat;
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
  };

  static LayerNorm init(Eigen::Index d) { return {Mat<S>::Ones(1, d), Mat<S>::Zero(1, d)}; }
  LayerNorm zeros_like() const { return {Mat<S>::Zero(1, gamma.cols()), Mat<S>::Zero(1, beta.cols())}; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }

  Mat<S> forward(const Mat<S>& x, Cache* cache) const {
    constexpr S eps = S(1e-5);
    const Eigen::Index d = x.cols();
    Mat<S> xhat(x.rows(), d);
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const S mean = x.row(i).mean();
      const S var = (x.row(i).array() - mean).square().mean();
      rstd(i) = S(1) / std::sqrt(var + eps);
      xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
    }
    Mat<S> y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Mat<S> backward(const Cache& c, const Mat<S>& dy, LayerNorm& g) const {
    g.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    g.beta += dy.colwise().sum();
    const Mat<S> dxhat = dy.array().rowwise() * gamma.row(0).array();
    Mat<S> dx(dy.rows(), dy.cols());
    const S inv_d = S(1) / static_cast<S>(dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const S m1 = dxhat.row(i).sum() * inv_d;
      const S m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).sum() * inv_d;
      dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
    return dx;
  }
};

// ---------------------------------------------------------------- Attention

template <class S>
struct Attention {
  Linear<S> q, k, v, o;

  struct Cache {
    Mat<S> xq, xkv;  // inputs
    Mat<S> Q, K, V, ctx;
    std::vector<Mat<S>> probs;  // per head, T x M
  };

  static Attention init(Eigen::Index d, std::mt19937_64& rng) {
    return {Linear<S>::init(d, d, rng), Linear<S>::init(d, d, rng), Linear<S>::init(d, d, rng),
            Linear<S>::init(d, d, rng)};
  }
  Attention zeros_like() const { return {q.zeros_like(), k.zeros_like(), v.zeros_like(), o.zeros_like()}; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    q.visit(prefix + ".q", f);
    k.visit(prefix + ".k", f);
    v.visit(prefix + ".v", f);
    o.visit(prefix + ".o", f);
  }

  Mat<S> forward(const Mat<S>& xq, const Mat<S>& xkv, int heads, bool causal, Cache* cache) const {
    const Eigen::Index T = xq.rows();
    const Eigen::Index M = xkv.rows();
    const Eigen::Index d = xq.cols();
    const Eigen::Index dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> Q = q.forward(xq);
    Mat<S> K = k.forward(xkv);
    Mat<S> V = v.forward(xkv);
    Mat<S> ctx(T, d);
    std::vector<Mat<S>> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Mat<S> P(T, M);
      P.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
      P *= scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, M) : M;
        auto row = P.row(i);
        const S mx = row.head(visible).maxCoeff();
        row.head(visible) = (row.head(visible).array() - mx).exp();
        row.head(visible) /= row.head(visible).sum();
        if (visible < M) row.tail(M - visible).setZero();
      }
      ctx.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
      if (cache) probs.push_back(std::move(P));
    }
    Mat<S> out = o.forward(ctx);
    if (cache) {
      cache->xq = xq;
      cache->xkv = xkv;
      cache->Q = std::move(Q);
      cache->K = std::move(K);
      cache->V = std::move(V);
      cache->ctx = std::move(ctx);
      cache->probs = std::move(probs);
    }
    return out;
  }

  // Returns (dxq, dxkv).
  std::pair<Mat<S>, Mat<S>> backward(const Cache& c, const Mat<S>& dout, int heads, Attention& g) const {
    const Eigen::Index d = c.Q.cols();
    const Eigen::Index dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> dctx;
    o.backward(c.ctx, dout, g.o, &dctx);
    Mat<S> dQ(c.Q.rows(), d), dK(c.K.rows(), d), dV(c.V.rows(), d);
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& P = c.probs[static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      Mat<S> dP(P.rows(), P.cols());
      dP.noalias() = dctx_h * c.V.middleCols(h * dh, dh).transpose();
      dV.middleCols(h * dh, dh).noalias() = P.transpose() * dctx_h;
      const Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
      Mat<S> dS = P.array() * (dP.array().colwise() - rowdot.array());
      dS *= scale;
      dQ.middleCols(h * dh, dh).noalias() = dS * c.K.middleCols(h * dh, dh);
      dK.middleCols(h * dh, dh).noalias() = dS.transpose() * c.Q.middleCols(h * dh, dh);
    }
    Mat<S> dxq, dxkv, tmp;
    q.backward(c.xq, dQ, g.q, &dxq);
    k.backward(c.xkv, dK, g.k, &dxkv);
    v.backward(c.xkv, dV, g.v, &tmp);
    dxkv += tmp;
    return {std::move(dxq), std::move(dxkv)};
  }
};

// ---------------------------------------------------------------- FeedForward

template <class S>
struct FeedForward {
  Linear<S> fc1, fc2;

  struct Cache {
    Mat<S> x, pre, act;
  };

  static FeedForward init(Eigen::Index d, Eigen::Index hidden, std::mt19937_64& rng) {
    return {Linear<S>::init(d, hidden, rng), Linear<S>::init(hidden, d, rng)};
  }
  FeedForward zeros_like() const { return {fc1.zeros_like(), fc2.zeros_like()}; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }

  // tanh-approximated GELU
  static constexpr double gelu_c = 0.7978845608028654;  // sqrt(2/pi)

  Mat<S> forward(const Mat<S>& x, Cache* cache) const {
    Mat<S> pre = fc1.forward(x);
    Mat<S> act = pre.unaryExpr([](S u) {
      return S(0.5) * u * (S(1) + std::tanh(S(gelu_c) * (u + S(0.044715) * u * u * u)));
    });
    Mat<S> y = fc2.forward(act);
    if (cache) {
      cache->x = x;
      cache->pre = std::move(pre);
      cache->act = std::move(act);
    }
    return y;
  }

  Mat<S> backward(const Cache& c, const Mat<S>& dy, FeedForward& g) const {
    Mat<S> dact;
    fc2.backward(c.act, dy, g.fc2, &dact);
    const Mat<S> dgelu = c.pre.unaryExpr([](S u) {
      const S t = std::tanh(S(gelu_c) * (u + S(0.044715) * u * u * u));
      return S(0.5) * (S(1) + t) + S(0.5) * u * (S(1) - t * t) * S(gelu_c) * (S(1) + S(3 * 0.044715) * u * u);
    });
    const Mat<S> dpre = dact.cwiseProduct(dgelu);
    Mat<S> dx;
    fc1.backward(c.x, dpre, g.fc1, &dx);
    return dx;
  }
};

// ---------------------------------------------------------------- blocks

/// Pre-norm self-attention block.
template <class S>
struct EncoderBlock {
  LayerNorm<S> ln1, ln2;
  Attention<S> attn;
  FeedForward<S> ffn;

  struct Cache {
    typename LayerNorm<S>::Cache ln1, ln2;
    typename Attention<S>::Cache attn;
    typename FeedForward<S>::Cache ffn;
  };

  static EncoderBlock init(Eigen::Index d, std::mt19937_64& rng) {
    return {LayerNorm<S>::init(d), LayerNorm<S>::init(d), Attention<S>::init(d, rng),
            FeedForward<S>::init(d, 4 * d, rng)};
  }
  EncoderBlock zeros_like() const { return {ln1.zeros_like(), ln2.zeros_like(), attn.zeros_like(), ffn.zeros_like()}; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    attn.visit(prefix + ".attn", f);
    ln2.visit(prefix + ".ln2", f);
    ffn.visit(prefix + ".ffn", f);
  }

  Mat<S> forward(const Mat<S>& x, int heads, Cache* c) const {
    const Mat<S> a_in = ln1.forward(x, c ? &c->ln1 : nullptr);
    Mat<S> x1 = x + attn.forward(a_in, a_in, heads, false, c ? &c->attn : nullptr);
    const Mat<S> f_in = ln2.forward(x1, c ? &c->ln2 : nullptr);
    x1 += ffn.forward(f_in, c ? &c->ffn : nullptr);
    return x1;
  }

  Mat<S> backward(const Cache& c, const Mat<S>& dy, int heads, EncoderBlock& g) const {
    Mat<S> dx = dy + ln2.backward(c.ln2, ffn.backward(c.ffn, dy, g.ffn), g.ln2);
    auto [dq, dkv] = attn.backward(c.attn, dx, heads, g.attn);
    dx += ln1.backward(c.ln1, dq + dkv, g.ln1);
    return dx;
  }
};

/// Pre-norm causal self-attention, cross-attention over encoder memory, FFN.
template <class S>
struct DecoderBlock {
  LayerNorm<S> ln1, ln2, ln3;
  Attention<S> self_attn, cross_attn;
  FeedForward<S> ffn;

  struct Cache {
    typename LayerNorm<S>::Cache ln1, ln2, ln3;
    typename Attention<S>::Cache self_attn, cross_attn;
    typename FeedForward<S>::Cache ffn;
  };

  static DecoderBlock init(Eigen::Index d, std::mt19937_64& rng) {
    return {LayerNorm<S>::init(d),          LayerNorm<S>::init(d),          LayerNorm<S>::init(d),
            Attention<S>::init(d, rng),     Attention<S>::init(d, rng),     FeedForward<S>::init(d, 4 * d, rng)};
  }
  DecoderBlock zeros_like() const {
    return {ln1.zeros_like(),       ln2.zeros_like(),        ln3.zeros_like(),
            self_attn.zeros_like(), cross_attn.zeros_like(), ffn.zeros_like()};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    self_attn.visit(prefix + ".self_attn", f);
    ln2.visit(prefix + ".ln2", f);
    cross_attn.visit(prefix + ".cross_attn", f);
    ln3.visit(prefix + ".ln3", f);
    ffn.visit(prefix + ".ffn", f);
  }

  Mat<S> forward(const Mat<S>& x, const Mat<S>& memory, int heads, Cache* c) const {
    const Mat<S> s_in = ln1.forward(x, c ? &c->ln1 : nullptr);
    Mat<S> x1 = x + self_attn.forward(s_in, s_in, heads, true, c ? &c->self_attn : nullptr);
    const Mat<S> c_in = ln2.forward(x1, c ? &c->ln2 : nullptr);
    x1 += cross_attn.forward(c_in, memory, heads, false, c ? &c->cross_attn : nullptr);
    const Mat<S> f_in = ln3.forward(x1, c ? &c->ln3 : nullptr);
    x1 += ffn.forward(f_in, c ? &c->ffn : nullptr);
    return x1;
  }

  // Returns dx; accumulates the memory gradient into dmemory.
  Mat<S> backward(const Cache& c, const Mat<S>& dy, int heads, DecoderBlock& g, Mat<S>& dmemory) const {
    Mat<S> dx = dy + ln3.backward(c.ln3, ffn.backward(c.ffn, dy, g.ffn), g.ln3);
    auto [dq_c, dmem] = cross_attn.backward(c.cross_attn, dx, heads, g.cross_attn);
    dmemory += dmem;
    dx += ln2.backward(c.ln2, dq_c, g.ln2);
    auto [dq_s, dkv_s] = self_attn.backward(c.self_attn, dx, heads, g.self_attn);
    dx += ln1.backward(c.ln1, dq_s + dkv_s, g.ln1);
    return dx;
  }
};

/// Numerically stable row softmax.
template <class S>
Mat<S> softmax_rows(const Mat<S>& logits) {
  Mat<S> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const S mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace stnet
