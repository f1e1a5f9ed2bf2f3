// Deterministic raster plots (PNG via zlib) for mel spectrograms and
// alignment matrices. No text, axes or anti-aliasing: pixels are a direct
// function of the input values, so images are byte-reproducible.

#pragma once

#include "portaspeech/corpus.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace ps {

namespace detail {

inline void png_chunk(std::ofstream& f, const char type[4],
                      const std::vector<std::uint8_t>& data) {
  auto be32 = [&f](std::uint32_t v) {
    std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16),
                         std::uint8_t(v >> 8), std::uint8_t(v)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  be32(std::uint32_t(data.size()));
  f.write(type, 4);
  if (!data.empty())
    f.write(reinterpret_cast<const char*>(data.data()),
            std::streamsize(data.size()));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
  be32(std::uint32_t(crc));
}

// rgb: H*W*3 bytes, row-major top to bottom.
inline void write_png(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& rgb) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write image: " + path);
  const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<std::uint8_t> ihdr(13);
  auto put32 = [&](int at, std::uint32_t v) {
    ihdr[at] = std::uint8_t(v >> 24);
    ihdr[at + 1] = std::uint8_t(v >> 16);
    ihdr[at + 2] = std::uint8_t(v >> 8);
    ihdr[at + 3] = std::uint8_t(v);
  };
  put32(0, std::uint32_t(width));
  put32(4, std::uint32_t(height));
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 2;   // RGB
  ihdr[10] = ihdr[11] = ihdr[12] = 0;
  png_chunk(f, "IHDR", ihdr);

  // raw scanlines with filter byte 0, then one zlib stream
  std::vector<std::uint8_t> raw;
  raw.reserve(std::size_t(height) * (std::size_t(width) * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const std::uint8_t* row = rgb.data() + std::size_t(y) * width * 3;
    raw.insert(raw.end(), row, row + std::size_t(width) * 3);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> comp(bound);
  if (compress2(comp.data(), &bound, raw.data(), uLong(raw.size()), 9) != Z_OK)
    throw std::runtime_error("png compression failed");
  comp.resize(bound);
  png_chunk(f, "IDAT", comp);
  png_chunk(f, "IEND", {});
  if (!f) throw std::runtime_error("image write failed: " + path);
}

// fixed warm colormap over [0,1]
inline void heat(double v, std::uint8_t* px) {
  v = std::clamp(v, 0.0, 1.0);
  px[0] = std::uint8_t(255.0 * std::sqrt(v) + 0.5);
  px[1] = std::uint8_t(255.0 * v * v * v + 0.5);
  px[2] = std::uint8_t(255.0 * std::max(0.0, std::sin(v * 3.14159265)) * 0.35 +
                       0.5);
}

}  // namespace detail

// Mel heat map: frequency on the vertical axis (lowest band at the bottom),
// time left to right, values min-max normalized.
inline void plot_mel(const Mat<float>& mel, const std::string& path) {
  if (!mel.allFinite()) throw std::invalid_argument("plot_mel: non-finite mel");
  int W = int(mel.rows()), H = int(mel.cols());
  float lo = mel.minCoeff(), hi = mel.maxCoeff();
  float span = hi - lo > 1e-9f ? hi - lo : 1.0f;
  std::vector<std::uint8_t> rgb(std::size_t(W) * H * 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = double((mel(x, H - 1 - y) - lo) / span);
      detail::heat(v, &rgb[(std::size_t(y) * W + x) * 3]);
    }
  detail::write_png(path, W, H, rgb);
}

// Alignment matrix: queries (frames) on the vertical axis, keys (phonemes)
// horizontally; values taken as probabilities in [0,1].
inline void plot_attention(const Mat<float>& attn, const std::string& path) {
  if (!attn.allFinite())
    throw std::invalid_argument("plot_attention: non-finite attention");
  int H = int(attn.rows()), W = int(attn.cols());
  std::vector<std::uint8_t> rgb(std::size_t(W) * H * 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      detail::heat(double(attn(y, x)), &rgb[(std::size_t(y) * W + x) * 3]);
  detail::write_png(path, W, H, rgb);
}

}  // namespace ps
