// SPDX-License-Identifier: Apache-2.0
#include "triedit/image_io.hpp"

#include <png.h>
#include <sodium.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

namespace triedit {

Tensorf quantize_u8(const Tensorf& img) {
  Tensorf out = img;
  for (auto& v : out.storage()) v = std::round(std::clamp(v, 0.f, 1.f) * 255.f) / 255.f;
  return out;
}

namespace {

struct PngWriteBuffer {
  std::string data;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->data.append(reinterpret_cast<const char*>(data), len);
}

void png_flush_cb(png_structp) {}

struct PngReadBuffer {
  const std::string* data;
  std::size_t pos;
};

void png_read_cb(png_structp png, png_bytep out, png_size_t len) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + len > buf->data->size()) png_error(png, "truncated PNG");
  std::memcpy(out, buf->data->data() + buf->pos, len);
  buf->pos += len;
}

void png_error_cb(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

void png_warning_cb(png_structp, png_const_charp) {}

}  // namespace

std::string encode_png(const Tensorf& img) {
  require(img.rank() == 3 && img.dim(2) == 3, "encode_png: image must be [H, W, 3]");
  const int h = img.dim(0), w = img.dim(1);
  std::vector<unsigned char> rows(static_cast<std::size_t>(h) * w * 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows[i] = static_cast<unsigned char>(std::lround(std::clamp(img[i], 0.f, 1.f) * 255.f));
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warning_cb);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  PngWriteBuffer buf;
  std::vector<png_bytep> ptrs(h);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &buf, png_write_cb, png_flush_cb);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  for (int i = 0; i < h; ++i) ptrs[i] = rows.data() + static_cast<std::size_t>(i) * w * 3;
  png_set_rows(png, info, ptrs.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buf.data);
}

Tensorf decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw ValidationError("not a PNG image");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warning_cb);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngReadBuffer buf{&bytes, 0};
  std::vector<unsigned char> rows;
  std::vector<png_bytep> ptrs;
  png_uint_32 w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("malformed PNG: " + err);
  }
  png_set_read_fn(png, &buf, png_read_cb);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (w == 0 || h == 0 || w > 8192 || h > 8192) png_error(png, "unsupported PNG dimensions");
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != w * 3) png_error(png, "unexpected PNG row layout");
  rows.resize(static_cast<std::size_t>(w) * h * 3);
  ptrs.resize(h);
  for (png_uint_32 i = 0; i < h; ++i) ptrs[i] = rows.data() + static_cast<std::size_t>(i) * w * 3;
  png_read_image(png, ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  Tensorf img({static_cast<int>(h), static_cast<int>(w), 3});
  for (std::size_t i = 0; i < rows.size(); ++i) img[i] = static_cast<float>(rows[i]) / 255.f;
  return img;
}

void write_png(const std::string& path, const Tensorf& img) { write_file_atomic(path, encode_png(img)); }

Tensorf read_png(const std::string& path) {
  try {
    return decode_png(read_file(path));
  } catch (const ValidationError& e) {
    throw IoError(path + ": " + e.what());
  }
}


std::string base64_encode(const std::string& bytes) {
  std::string out(sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                    sodium_base64_VARIANT_ORIGINAL);
  out.resize(out.size() - 1);  // drop the terminating NUL
  return out;
}

std::string base64_decode(const std::string& text) {
  std::string out(text.size() / 4 * 3 + 3, '\0');
  std::size_t len = 0;
  const char* end = nullptr;
  // Whitespace is skipped; anything else outside the alphabet, or bad padding, is an error.
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), text.data(), text.size(), " \t\r\n",
                        &len, &end, sodium_base64_VARIANT_ORIGINAL) != 0 ||
      end != text.data() + text.size())
    throw ValidationError("base64: malformed input");
  out.resize(len);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace triedit
