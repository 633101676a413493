#pragma once

// Patch-embedding vision encoder and autoregressive text decoder. The token
// embedding rows <0>..<999> double as the location vocabulary Loc used by the
// grounding head.

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stnet/grounding.hpp"
#include "stnet/nn.hpp"
#include "stnet/vocab.hpp"

namespace stnet {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int image_height = 256;
  int image_width = 256;
  int patch = 32;  // downsample factor
  int dim = 128;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int vocab_size = 0;
  int max_len = 256;
  bool positional_encoding = true;

  int grid_rows() const { return image_height / patch; }
  int grid_cols() const { return image_width / patch; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int patch_pixels() const { return patch * patch; }

  void validate() const {
    if (patch <= 0 || image_height % patch != 0 || image_width % patch != 0)
      throw ModelError("image size must be divisible by the downsample factor");
    if (heads <= 0 || dim % heads != 0) throw ModelError("dim must be divisible by the head count");
    if (dim % 4 != 0) throw ModelError("dim must be a multiple of 4 for 2-D positional encoding");
    if (vocab_size <= Vocabulary::loc_end) throw ModelError("vocab_size must cover the location block");
    if (enc_layers < 0 || dec_layers < 1 || max_len < 2) throw ModelError("invalid layer counts or max_len");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Standard sinusoid table: pe[p][2i] = sin(p / 10000^(2i/d)), pe[p][2i+1] = cos(...).
inline Mat<double> sinusoid_table(int positions, int d) {
  Mat<double> pe(positions, d);
  for (int p = 0; p < positions; ++p)
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(p, i) = std::sin(p * freq);
      if (i + 1 < d) pe(p, i + 1) = std::cos(p * freq);
    }
  return pe;
}

/// 2-D patch-grid encoding: row sinusoid in the first half, column sinusoid in the second.
inline Mat<double> grid_positional_encoding(int rows, int cols, int d) {
  const Mat<double> r = sinusoid_table(rows, d / 2);
  const Mat<double> c = sinusoid_table(cols, d / 2);
  Mat<double> pe(rows * cols, d);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      pe.row(i * cols + j).head(d / 2) = r.row(i);
      pe.row(i * cols + j).tail(d / 2) = c.row(j);
    }
  return pe;
}

template <class S>
struct Model {
  ModelConfig config;
  Linear<S> patch_embed;
  std::vector<EncoderBlock<S>> encoder;
  LayerNorm<S> encoder_norm;
  Mat<S> tok_embed;  // vocab x D; rows [loc_begin, loc_end) are Loc
  std::vector<DecoderBlock<S>> decoder;
  LayerNorm<S> decoder_norm;
  Linear<S> lm_head;
  Linear<S> query_proj;  // D -> 8D
  Mat<S> grid_pe;        // fixed, not a parameter
  Mat<S> seq_pe;         // fixed, not a parameter

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Model m;
    m.config = cfg;
    const Eigen::Index d = cfg.dim;
    m.patch_embed = Linear<S>::init(cfg.patch_pixels(), d, rng);
    for (int i = 0; i < cfg.enc_layers; ++i) m.encoder.push_back(EncoderBlock<S>::init(d, rng));
    m.encoder_norm = LayerNorm<S>::init(d);
    m.tok_embed = normal_matrix<S>(cfg.vocab_size, d, 1.0, rng);
    // Location rows start as a cosine basis over the bin index, so that a query
    // can tilt the bin distribution smoothly toward either edge.
    for (int k = 0; k < num_bins; ++k)
      for (Eigen::Index m_ = 0; m_ < d; ++m_)
        m.tok_embed(Vocabulary::loc_begin + k, m_) =
            static_cast<S>(std::cos(std::numbers::pi * static_cast<double>(m_ + 1) * (k + 0.5) / num_bins));
    for (int i = 0; i < cfg.dec_layers; ++i) m.decoder.push_back(DecoderBlock<S>::init(d, rng));
    m.decoder_norm = LayerNorm<S>::init(d);
    m.lm_head = Linear<S>::init(d, cfg.vocab_size, rng);
    m.lm_head.w *= S(0.1);
    m.query_proj = Linear<S>::init(d, num_coords * d, rng);
    m.query_proj.w *= S(0.01);
    m.build_fixed();
    return m;
  }

  void build_fixed() {
    grid_pe = grid_positional_encoding(config.grid_rows(), config.grid_cols(), config.dim).template cast<S>();
    seq_pe = sinusoid_table(config.max_len, config.dim).template cast<S>();
  }

  Model zeros_like() const {
    Model g;
    g.config = config;
    g.patch_embed = patch_embed.zeros_like();
    for (const auto& b : encoder) g.encoder.push_back(b.zeros_like());
    g.encoder_norm = encoder_norm.zeros_like();
    g.tok_embed = Mat<S>::Zero(tok_embed.rows(), tok_embed.cols());
    for (const auto& b : decoder) g.decoder.push_back(b.zeros_like());
    g.decoder_norm = decoder_norm.zeros_like();
    g.lm_head = lm_head.zeros_like();
    g.query_proj = query_proj.zeros_like();
    return g;
  }

  /// Calls f(name, matrix) for every trainable array in a fixed order.
  template <class F>
  void visit(F&& f) {
    patch_embed.visit("patch_embed", f);
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("encoder." + std::to_string(i), f);
    encoder_norm.visit("encoder_norm", f);
    f(std::string("tok_embed"), tok_embed);
    for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("decoder." + std::to_string(i), f);
    decoder_norm.visit("decoder_norm", f);
    lm_head.visit("lm_head", f);
    query_proj.visit("query_proj", f);
  }

  std::vector<Mat<S>*> parameters() {
    std::vector<Mat<S>*> out;
    visit([&](const std::string&, Mat<S>& m) { out.push_back(&m); });
    return out;
  }

  std::vector<std::string> parameter_names() {
    std::vector<std::string> out;
    visit([&](const std::string& n, Mat<S>&) { out.push_back(n); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Mat<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  void set_zero() {
    visit([](const std::string&, Mat<S>& m) { m.setZero(); });
  }

  template <class T>
  Model<T> cast() const {
    Model<T> out = Model<T>::init_shell(config);
    Model copy = *this;
    auto dst = out.parameters();
    auto src = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<T>();
    return out;
  }

  /// Correctly shaped model with zero parameters (used for loading and casting).
  static Model init_shell(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(0);
    Model m;
    m.config = cfg;
    const Eigen::Index d = cfg.dim;
    m.patch_embed = Linear<S>{Mat<S>::Zero(cfg.patch_pixels(), d), Mat<S>::Zero(1, d)};
    for (int i = 0; i < cfg.enc_layers; ++i) m.encoder.push_back(EncoderBlock<S>::init(d, rng).zeros_like());
    m.encoder_norm = LayerNorm<S>::init(d).zeros_like();
    m.tok_embed = Mat<S>::Zero(cfg.vocab_size, d);
    for (int i = 0; i < cfg.dec_layers; ++i) m.decoder.push_back(DecoderBlock<S>::init(d, rng).zeros_like());
    m.decoder_norm = LayerNorm<S>::init(d).zeros_like();
    m.lm_head = Linear<S>{Mat<S>::Zero(d, cfg.vocab_size), Mat<S>::Zero(1, cfg.vocab_size)};
    m.query_proj = Linear<S>{Mat<S>::Zero(d, num_coords * d), Mat<S>::Zero(1, num_coords * d)};
    m.build_fixed();
    return m;
  }

  Eigen::Ref<const Mat<S>> loc() const { return tok_embed.middleRows(Vocabulary::loc_begin, num_bins); }
};

// ---------------------------------------------------------------- encoder

template <class S>
struct EncoderCache {
  Mat<S> patches;
  std::vector<typename EncoderBlock<S>::Cache> blocks;
  typename LayerNorm<S>::Cache norm;
};

/// Rearranges an H x W image into N x (f*f) patch rows, row-major over the grid.
template <class S>
Mat<S> patchify(const Mat<S>& image, int patch) {
  const int gr = static_cast<int>(image.rows()) / patch;
  const int gc = static_cast<int>(image.cols()) / patch;
  Mat<S> out(gr * gc, patch * patch);
  for (int r = 0; r < gr; ++r)
    for (int c = 0; c < gc; ++c)
      for (int y = 0; y < patch; ++y)
        out.row(r * gc + c).segment(y * patch, patch) = image.row(r * patch + y).segment(c * patch, patch);
  return out;
}

/// Image values are expected in [0, 1]; returns Z (N x D).
template <class S>
Mat<S> encode_image(const Model<S>& m, const Mat<S>& image, EncoderCache<S>* cache = nullptr) {
  const auto& cfg = m.config;
  if (image.rows() != cfg.image_height || image.cols() != cfg.image_width)
    throw ModelError("image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                     ", model expects " + std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
  Mat<S> patches = patchify(image, cfg.patch);
  Mat<S> x = m.patch_embed.forward(patches);
  if (cfg.positional_encoding) x += m.grid_pe;
  if (cache) cache->blocks.resize(m.encoder.size());
  for (std::size_t i = 0; i < m.encoder.size(); ++i)
    x = m.encoder[i].forward(x, cfg.heads, cache ? &cache->blocks[i] : nullptr);
  Mat<S> z = m.encoder_norm.forward(x, cache ? &cache->norm : nullptr);
  if (cache) cache->patches = std::move(patches);
  return z;
}

template <class S>
void backward_encoder(const Model<S>& m, const EncoderCache<S>& c, const Mat<S>& dz, Model<S>& g) {
  Mat<S> dx = m.encoder_norm.backward(c.norm, dz, g.encoder_norm);
  for (std::size_t i = m.encoder.size(); i-- > 0;) dx = m.encoder[i].backward(c.blocks[i], dx, m.config.heads, g.encoder[i]);
  m.patch_embed.backward(c.patches, dx, g.patch_embed, nullptr);
}

// ---------------------------------------------------------------- decoder

template <class S>
struct DecoderOutput {
  Mat<S> logits;  // T x v
  Mat<S> hidden;  // T x D, final layer after the output norm
};

template <class S>
struct DecoderCache {
  std::vector<TokenId> ids;
  std::vector<typename DecoderBlock<S>::Cache> blocks;
  typename LayerNorm<S>::Cache norm;
};

template <class S>
DecoderOutput<S> decode_tokens(const Model<S>& m, const Mat<S>& z, std::span<const TokenId> ids,
                               DecoderCache<S>* cache = nullptr) {
  const auto& cfg = m.config;
  const auto T = static_cast<Eigen::Index>(ids.size());
  if (T == 0) throw ModelError("decode_tokens needs at least one token");
  if (T > cfg.max_len) throw ModelError("sequence length " + std::to_string(T) + " exceeds max_len");
  Mat<S> x(T, cfg.dim);
  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) throw ModelError("token id out of range: " + std::to_string(id));
    x.row(t) = m.tok_embed.row(id) + m.seq_pe.row(t);
  }
  if (cache) cache->blocks.resize(m.decoder.size());
  for (std::size_t i = 0; i < m.decoder.size(); ++i)
    x = m.decoder[i].forward(x, z, cfg.heads, cache ? &cache->blocks[i] : nullptr);
  DecoderOutput<S> out;
  out.hidden = m.decoder_norm.forward(x, cache ? &cache->norm : nullptr);
  out.logits = m.lm_head.forward(out.hidden);
  if (cache) cache->ids.assign(ids.begin(), ids.end());
  return out;
}

/// dhidden carries extra gradient on the hidden states (from the grounding head).
/// Returns dZ.
template <class S>
Mat<S> backward_decoder(const Model<S>& m, const DecoderCache<S>& c, const DecoderOutput<S>& out,
                        const Mat<S>& dlogits, const Mat<S>& dhidden, Model<S>& g, Eigen::Index memory_rows) {
  Mat<S> dh;
  m.lm_head.backward(out.hidden, dlogits, g.lm_head, &dh);
  dh += dhidden;
  Mat<S> dx = m.decoder_norm.backward(c.norm, dh, g.decoder_norm);
  Mat<S> dz = Mat<S>::Zero(memory_rows, m.config.dim);
  for (std::size_t i = m.decoder.size(); i-- > 0;)
    dx = m.decoder[i].backward(c.blocks[i], dx, m.config.heads, g.decoder[i], dz);
  for (std::size_t t = 0; t < c.ids.size(); ++t) g.tok_embed.row(c.ids[t]) += dx.row(static_cast<Eigen::Index>(t));
  return dz;
}

// ---------------------------------------------------------------- losses

/// Mean over masked positions of -log softmax(logits)[target].
template <class S>
double lm_loss(const Mat<S>& logits, std::span<const TokenId> targets, std::span<const bool> mask) {
  if (targets.size() != static_cast<std::size_t>(logits.rows()) || mask.size() != targets.size())
    throw ModelError("lm_loss: logits, targets and mask must align");
  double total = 0.0;
  int count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(t)).template cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(targets[t]);
    ++count;
  }
  if (count == 0) throw ModelError("lm_loss: empty mask");
  return total / count;
}

/// Gradient of lm_loss with respect to the logits.
template <class S>
Mat<S> lm_loss_grad(const Mat<S>& logits, std::span<const TokenId> targets, std::span<const bool> mask) {
  Mat<S> g = Mat<S>::Zero(logits.rows(), logits.cols());
  int count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  if (count == 0) throw ModelError("lm_loss: empty mask");
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    const auto i = static_cast<Eigen::Index>(t);
    const S mx = logits.row(i).maxCoeff();
    RowVec<S> p = (logits.row(i).array() - mx).exp();
    p /= p.sum();
    p(targets[t]) -= S(1);
    g.row(i) = p / static_cast<S>(count);
  }
  return g;
}

// ---------------------------------------------------------------- generation

template <class S>
struct Generation {
  std::vector<TokenId> tokens;           // emitted tokens, including <eos> when reached
  std::vector<RowVec<S>> see_hiddens;    // hidden state at each emitted <see>
  bool truncated = false;
};

/// Lowest index among the maxima.
template <class S>
TokenId argmax_lowest(const Eigen::Ref<const RowVec<S>>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < row.cols(); ++i)
    if (row(i) > row(best)) best = i;
  return static_cast<TokenId>(best);
}

/// Greedy decoding from <bos> + prompt. The hidden state of a <see> token is
/// the final-layer state at the position where <see> is the input.
template <class S>
Generation<S> greedy_generate(const Model<S>& m, const Mat<S>& z, std::span<const TokenId> prompt, int max_new) {
  std::vector<TokenId> seq;
  seq.reserve(prompt.size() + static_cast<std::size_t>(max_new) + 1);
  seq.push_back(Vocabulary::bos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  if (static_cast<int>(seq.size()) > m.config.max_len) throw ModelError("prompt longer than max_len");
  Generation<S> g;
  std::vector<std::size_t> see_positions;
  bool done = false;
  while (!done) {
    if (static_cast<int>(g.tokens.size()) >= max_new || static_cast<int>(seq.size()) >= m.config.max_len) {
      g.truncated = true;
      break;
    }
    const DecoderOutput<S> out = decode_tokens(m, z, seq);
    for (std::size_t p : see_positions)
      if (static_cast<Eigen::Index>(p) == out.hidden.rows() - 1) g.see_hiddens.push_back(out.hidden.row(static_cast<Eigen::Index>(p)));
    const TokenId next = argmax_lowest<S>(out.logits.row(out.logits.rows() - 1));
    g.tokens.push_back(next);
    if (next == Vocabulary::eos) {
      done = true;
    } else {
      if (next == Vocabulary::see) see_positions.push_back(seq.size());
      seq.push_back(next);
    }
  }
  // A trailing <see> that never became an input position still gets its state.
  if (!see_positions.empty() && g.see_hiddens.size() < see_positions.size()) {
    const DecoderOutput<S> out = decode_tokens(m, z, seq);
    for (std::size_t i = g.see_hiddens.size(); i < see_positions.size(); ++i)
      g.see_hiddens.push_back(out.hidden.row(static_cast<Eigen::Index>(see_positions[i])));
  }
  return g;
}

}  // namespace stnet
