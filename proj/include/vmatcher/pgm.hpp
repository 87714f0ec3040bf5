#pragma once

// Binary 8-bit grayscale PGM (P5) images as [1, H, W] tensors in [0, 1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "vmatcher/error.hpp"
#include "vmatcher/tensor.hpp"

namespace vmatcher {

namespace detail {

// Next header token, skipping whitespace and '#' comments.
inline std::string pgm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw ParseError(path + ": truncated PGM header");
  return tok;
}

inline std::size_t pgm_number(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = pgm_token(in, path);
  if (tok.empty() || tok.size() > 9 || !std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }))
    throw ParseError(path + ": invalid PGM " + std::string(what) + " '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace detail

inline Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  if (detail::pgm_token(in, path) != "P5") throw ParseError(path + ": not a binary PGM (expected P5)");
  const std::size_t w = detail::pgm_number(in, path, "width");
  const std::size_t h = detail::pgm_number(in, path, "height");
  const std::size_t maxval = detail::pgm_number(in, path, "maxval");
  if (w == 0 || h == 0) throw ParseError(path + ": empty PGM");
  if (maxval == 0 || maxval > 255) throw ParseError(path + ": only 8-bit PGM is supported (maxval " + std::to_string(maxval) + ")");
  std::string pixels(w * h, '\0');
  in.read(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != pixels.size()) throw ParseError(path + ": truncated PGM pixel data");
  Tensor img({1, h, w});
  auto d = img.mutable_data();
  for (std::size_t i = 0; i < pixels.size(); ++i)
    d[i] = static_cast<float>(static_cast<unsigned char>(pixels[i])) / static_cast<float>(maxval);
  return img;
}

inline void write_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 1) throw DimensionError("write_pgm: expected [1,H,W], got " + to_string(img.shape()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << img.dim(2) << " " << img.dim(1) << "\n255\n";
  for (float v : img.data())
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace vmatcher
