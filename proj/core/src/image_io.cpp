#include "nrgs/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace nrgs {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const char* what) {
  throw std::runtime_error(std::string("png: ") + what + ": " + path);
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

void readRows(const std::string& path, int wantDepth, int wantColor, std::vector<uint8_t>& bytes, int& w, int& h,
              int& rowBytes) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open");
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) fail(path, "alloc");
  r.info = png_create_info_struct(r.png);
  if (!r.info) fail(path, "alloc");
  if (setjmp(png_jmpbuf(r.png))) fail(path, "decode error");
  png_init_io(r.png, fp.get());
  png_read_info(r.png, r.info);

  w = png_get_image_width(r.png, r.info);
  h = png_get_image_height(r.png, r.info);
  int depth = png_get_bit_depth(r.png, r.info);
  int color = png_get_color_type(r.png, r.info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  if (wantDepth == 8 && depth == 16) png_set_strip_16(r.png);
  if (wantDepth == 16 && depth == 8) fail(path, "expected 16-bit data");
  if (wantColor == PNG_COLOR_TYPE_RGB) {
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(r.png);
    png_set_strip_alpha(r.png);
  } else {
    if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(r.png, 1, -1, -1);
    png_set_strip_alpha(r.png);
  }
  if (wantDepth == 16) png_set_swap(r.png);
  png_read_update_info(r.png, r.info);

  rowBytes = static_cast<int>(png_get_rowbytes(r.png, r.info));
  bytes.assign(static_cast<size_t>(rowBytes) * h, 0);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = bytes.data() + static_cast<size_t>(y) * rowBytes;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
}

void writeRows(const std::string& path, int w, int h, int depth, int color, const std::vector<uint8_t>& bytes,
               int rowBytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot write");
  PngWriter wr;
  wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!wr.png) fail(path, "alloc");
  wr.info = png_create_info_struct(wr.png);
  if (!wr.info) fail(path, "alloc");
  if (setjmp(png_jmpbuf(wr.png))) fail(path, "encode error");
  png_init_io(wr.png, fp.get());
  png_set_IHDR(wr.png, wr.info, w, h, depth, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);
  if (depth == 16) png_set_swap(wr.png);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(bytes.data() + static_cast<size_t>(y) * rowBytes);
  png_write_image(wr.png, rows.data());
  png_write_end(wr.png, nullptr);
}

uint8_t to8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

}  // namespace

Image loadPng8(const std::string& path) {
  std::vector<uint8_t> bytes;
  int w, h, rowBytes;
  readRows(path, 8, PNG_COLOR_TYPE_RGB, bytes, w, h, rowBytes);
  Image img(w, h, 3);
  for (int y = 0; y < h; ++y) {
    const uint8_t* row = bytes.data() + static_cast<size_t>(y) * rowBytes;
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[x * 3 + c] / 255.0;
  }
  return img;
}

void savePng8(const std::string& path, const Image& img) {
  if (img.channels() != 1 && img.channels() != 3) throw std::invalid_argument("savePng8: 1 or 3 channels");
  const int w = img.width(), h = img.height(), c = img.channels();
  const int rowBytes = w * c;
  std::vector<uint8_t> bytes(static_cast<size_t>(rowBytes) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) bytes[static_cast<size_t>(y) * rowBytes + x * c + ch] = to8(img.at(x, y, ch));
  writeRows(path, w, h, 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, bytes, rowBytes);
}

Image loadDepthPng16(const std::string& path) {
  std::vector<uint8_t> bytes;
  int w, h, rowBytes;
  readRows(path, 16, PNG_COLOR_TYPE_GRAY, bytes, w, h, rowBytes);
  Image img(w, h, 1);
  for (int y = 0; y < h; ++y) {
    const uint16_t* row = reinterpret_cast<const uint16_t*>(bytes.data() + static_cast<size_t>(y) * rowBytes);
    for (int x = 0; x < w; ++x) img.at(x, y) = row[x] * kDepthPngScale;
  }
  return img;
}

void saveDepthPng16(const std::string& path, const Image& depthMm) {
  if (depthMm.channels() != 1) throw std::invalid_argument("saveDepthPng16: 1 channel expected");
  const int w = depthMm.width(), h = depthMm.height();
  const int rowBytes = w * 2;
  std::vector<uint8_t> bytes(static_cast<size_t>(rowBytes) * h);
  for (int y = 0; y < h; ++y) {
    uint16_t* row = reinterpret_cast<uint16_t*>(bytes.data() + static_cast<size_t>(y) * rowBytes);
    for (int x = 0; x < w; ++x) {
      const double q = std::clamp(depthMm.at(x, y) / kDepthPngScale, 0.0, 65535.0);
      row[x] = static_cast<uint16_t>(std::lround(q));
    }
  }
  writeRows(path, w, h, 16, PNG_COLOR_TYPE_GRAY, bytes, rowBytes);
}

}  // namespace nrgs
