"""Regenerates include/stnet/font.hpp from Pillow's built-in bitmap font."""
from PIL import Image, ImageDraw, ImageFont

W, H = 6, 11
font = ImageFont.load_default_imagefont()

rows = []
for code in range(32, 127):
    im = Image.new("L", (W, H), 0)
    ImageDraw.Draw(im).text((0, 0), chr(code), font=font, fill=255)
    bits = []
    for y in range(H):
        v = 0
        for x in range(W):
            if im.getpixel((x, y)) > 127:
                v |= 1 << (W - 1 - x)
        bits.append(f"0x{v:02x}")
    rows.append(f"    {{{', '.join(bits)}}},  // {code:3d} {chr(code)!r}")

print("""#pragma once

// Generated by tools/gen_font.py. Fixed 6x11 cell, printable ASCII 32..126.
// Each row is a 6-bit mask, most significant bit is the leftmost pixel.

#include <array>
#include <cstdint>

namespace stnet::font {

inline constexpr int glyph_width = 6;
inline constexpr int glyph_height = 11;
inline constexpr char first_char = 32;
inline constexpr char last_char = 126;

inline constexpr std::array<std::array<std::uint8_t, glyph_height>, 95> glyphs = {{""")
print("\n".join(rows))
print("""}};

inline bool has_glyph(char c) { return c >= first_char && c <= last_char; }

// Bit test for pixel (x, y) of glyph c; false outside the cell.
inline bool glyph_pixel(char c, int x, int y) {
  if (!has_glyph(c) || x < 0 || y < 0 || x >= glyph_width || y >= glyph_height) return false;
  return (glyphs[static_cast<std::size_t>(c - first_char)][static_cast<std::size_t>(y)] >> (glyph_width - 1 - x)) & 1u;
}

}  // namespace stnet::font""")
