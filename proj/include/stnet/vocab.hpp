#pragma once

// Character-level vocabulary with a contiguous block of 1000 location tokens
// <0>..<999>, plus the pixel <-> bin quantization shared by prompts and the
// grounding head.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace stnet {

inline constexpr int num_bins = 1000;

using TokenId = std::int32_t;

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A quantized coordinate bin in [0, 999].
class QuantBin {
 public:
  constexpr QuantBin() = default;
  explicit QuantBin(int value) : value_(value) {
    if (value < 0 || value >= num_bins) throw VocabError("bin out of range: " + std::to_string(value));
  }
  constexpr int value() const { return value_; }
  friend constexpr bool operator==(QuantBin, QuantBin) = default;

 private:
  int value_ = 0;
};

/// bin = clamp(floor(pixel / extent * 1000), 0, 999)
inline QuantBin quantize_coord(double pixel, int extent) {
  if (extent < 1) throw VocabError("extent must be positive");
  if (!(pixel >= 0.0) || !std::isfinite(pixel)) throw VocabError("pixel must be finite and non-negative");
  const double scaled = std::floor(pixel / static_cast<double>(extent) * num_bins);
  return QuantBin(static_cast<int>(std::clamp(scaled, 0.0, static_cast<double>(num_bins - 1))));
}

/// Bin-center pixel: (bin + 0.5) / 1000 * extent.
inline double dequantize_coord(QuantBin bin, int extent) {
  return (bin.value() + 0.5) / num_bins * static_cast<double>(extent);
}

inline const std::array<std::string, 8>& special_token_names() {
  static const std::array<std::string, 8> names = {"<pad>", "<bos>", "<eos>", "<see>",
                                                   "<sep>", "<ocr>", "<read>", "<vqa>"};
  return names;
}

/// Printable ASCII 32..126, the default charset of the synthetic corpus.
inline std::string printable_ascii() {
  std::string s;
  for (char c = 32; c < 127; ++c) s.push_back(c);
  return s;
}

class Vocabulary {
 public:
  // Fixed ids: specials first, then the location block, then the charset.
  static constexpr TokenId pad = 0;
  static constexpr TokenId bos = 1;
  static constexpr TokenId eos = 2;
  static constexpr TokenId see = 3;
  static constexpr TokenId sep = 4;
  static constexpr TokenId ocr = 5;
  static constexpr TokenId read = 6;
  static constexpr TokenId vqa = 7;
  static constexpr TokenId num_specials = 8;
  static constexpr TokenId loc_begin = num_specials;
  static constexpr TokenId loc_end = loc_begin + num_bins;

  Vocabulary() = default;

  static Vocabulary build(std::string_view charset) {
    if (charset.empty()) throw VocabError("charset must not be empty");
    Vocabulary v;
    v.id_to_token_.reserve(static_cast<std::size_t>(loc_end) + charset.size());
    for (const auto& s : special_token_names()) v.id_to_token_.push_back(s);
    for (int k = 0; k < num_bins; ++k) v.id_to_token_.push_back("<" + std::to_string(k) + ">");
    v.char_to_id_.fill(-1);
    for (char c : charset) {
      const auto u = static_cast<unsigned char>(c);
      if (v.char_to_id_[u] >= 0) throw VocabError(std::string("duplicate character in charset: '") + c + "'");
      v.char_to_id_[u] = static_cast<TokenId>(v.id_to_token_.size());
      v.id_to_token_.emplace_back(1, c);
    }
    v.charset_ = std::string(charset);
    for (std::size_t i = 0; i < v.id_to_token_.size(); ++i)
      v.token_to_id_.emplace(v.id_to_token_[i], static_cast<TokenId>(i));
    return v;
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }
  const std::string& charset() const { return charset_; }

  TokenId loc_id(int k) const {
    if (k < 0 || k >= num_bins) throw VocabError("location index out of range: " + std::to_string(k));
    return loc_begin + k;
  }
  TokenId loc_id(QuantBin b) const { return loc_begin + b.value(); }
  static bool is_loc(TokenId id) { return id >= loc_begin && id < loc_end; }
  bool is_text(TokenId id) const { return id >= loc_end && id < size(); }
  static bool is_special(TokenId id) { return id >= 0 && id < num_specials; }

  const std::string& token(TokenId id) const {
    if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  TokenId id(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) throw VocabError("unknown token: " + std::string(token));
    return it->second;
  }

  bool can_encode(std::string_view text) const {
    return std::all_of(text.begin(), text.end(),
                       [&](char c) { return char_to_id_[static_cast<unsigned char>(c)] >= 0; });
  }

  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) {
      const TokenId t = char_to_id_[static_cast<unsigned char>(c)];
      if (t < 0) throw VocabError(std::string("character not in vocabulary: '") + c + "'");
      out.push_back(t);
    }
    return out;
  }

  /// Concatenates the text tokens; special and location tokens are skipped.
  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids)
      if (is_text(t)) out += id_to_token_[static_cast<std::size_t>(t)];
    return out;
  }

  /// Manifest: one `id<TAB>token` line per entry.
  void save_manifest(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw VocabError("cannot write vocabulary manifest: " + path);
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) os << i << '\t' << id_to_token_[i] << '\n';
  }

  static Vocabulary load_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw VocabError("cannot read vocabulary manifest: " + path);
    std::string line, charset;
    std::size_t expected = 0;
    while (std::getline(is, line)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw VocabError("malformed manifest line " + std::to_string(expected + 1));
      if (std::stoul(line.substr(0, tab)) != expected)
        throw VocabError("non-sequential id at manifest line " + std::to_string(expected + 1));
      const std::string tok = line.substr(tab + 1);
      if (expected >= static_cast<std::size_t>(loc_end)) {
        if (tok.size() != 1) throw VocabError("text token must be one character: " + tok);
        charset += tok;
      }
      ++expected;
    }
    if (expected < static_cast<std::size_t>(loc_end)) throw VocabError("manifest is missing reserved tokens");
    Vocabulary v = build(charset);
    return v;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::array<TokenId, 256> char_to_id_{};
  std::string charset_;
};

/// Eight bins laid out [x1,y1,x2,y2,x3,y3,x4,y4] in canonical point order.
struct QuantPolygon {
  std::array<QuantBin, 8> bins{};
  friend bool operator==(const QuantPolygon&, const QuantPolygon&) = default;
};

inline std::array<TokenId, 8> encode_polygon_tokens(const Vocabulary& vocab, const QuantPolygon& poly) {
  std::array<TokenId, 8> ids{};
  for (std::size_t j = 0; j < 8; ++j) ids[j] = vocab.loc_id(poly.bins[j]);
  return ids;
}

inline QuantPolygon decode_polygon_tokens(std::span<const TokenId> ids) {
  if (ids.size() != 8) throw VocabError("polygon needs exactly 8 location tokens");
  QuantPolygon p;
  for (std::size_t j = 0; j < 8; ++j) {
    if (!Vocabulary::is_loc(ids[j])) throw VocabError("not a location token: " + std::to_string(ids[j]));
    p.bins[j] = QuantBin(ids[j] - Vocabulary::loc_begin);
  }
  return p;
}

}  // namespace stnet
