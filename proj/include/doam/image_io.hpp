#pragma once

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "doam/tensor.hpp"

namespace doam {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& p, const char* mode) {
  FilePtr f(std::fopen(p.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + p.string());
  return f;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}
}  // namespace detail

// Writes a [3,H,W] or [1,H,W] image with values in [0,1] as 8-bit PNG.
inline void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
    throw ShapeError("write_png: expected [3,H,W] or [1,H,W], got " + shape_str(image.shape()));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: libpng init failed");
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) row[x * 3 + ch] = detail::to_byte(image.at(c == 3 ? ch : 0, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Tensor<float> read_png(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: failed reading " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
  Tensor<float> out({3, h, w});
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = row[x * 3 + ch] / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

namespace detail {
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};
}  // namespace detail

inline Tensor<float> read_jpeg(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = [](j_common_ptr c) { std::longjmp(reinterpret_cast<detail::JpegError*>(c->err)->jump, 1); };
  Tensor<float> out;
  std::vector<std::uint8_t> row;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("read_jpeg: failed reading " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width), h = static_cast<int>(cinfo.output_height);
  row.resize(static_cast<std::size_t>(w) * 3);
  out = Tensor<float>({3, h, w});
  for (int y = 0; y < h; ++y) {
    JSAMPROW r = row.data();
    jpeg_read_scanlines(&cinfo, &r, 1);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = row[x * 3 + ch] / 255.0f;
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

inline Tensor<float> read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  throw IoError("unsupported image format: " + path.string());
}

// Width and height from the file header, without decoding pixels.
inline std::pair<int, int> image_size(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") {
    auto f = detail::open_file(path, "rb");
    unsigned char hdr[24];
    if (std::fread(hdr, 1, 24, f.get()) != 24 || png_sig_cmp(hdr, 0, 8) != 0)
      throw IoError("not a PNG file: " + path.string());
    auto be32 = [&](int o) { return (hdr[o] << 24) | (hdr[o + 1] << 16) | (hdr[o + 2] << 8) | hdr[o + 3]; };
    return {be32(16), be32(20)};
  }
  auto img = read_image(path);
  return {img.dim(2), img.dim(1)};
}

// Bilinear resize of [C,H,W] with half-pixel centres.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int out_h, int out_w) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Tensor<T> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double top = img.at(ch, y0, x0) * (1 - wx) + img.at(ch, y0, x1) * wx;
        const double bot = img.at(ch, y1, x0) * (1 - wx) + img.at(ch, y1, x1) * wx;
        out.at(ch, y, x) = static_cast<T>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

}  // namespace doam
