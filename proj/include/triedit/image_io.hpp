// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB PNG encode/decode for [H, W, 3] float images in [0, 1], plus base64.
#pragma once

#include <string>

#include "triedit/tensor.hpp"

namespace triedit {

/// Rounds to the nearest 8-bit level: round(clamp(v, 0, 1) * 255) / 255.
Tensorf quantize_u8(const Tensorf& img);

std::string encode_png(const Tensorf& img);
/// Throws ValidationError on malformed data. Grayscale and RGBA inputs are converted to RGB.
Tensorf decode_png(const std::string& bytes);
void write_png(const std::string& path, const Tensorf& img);
Tensorf read_png(const std::string& path);

std::string base64_encode(const std::string& bytes);
/// Throws ValidationError on characters outside the standard alphabet or bad padding.
std::string base64_decode(const std::string& text);

/// Reads a whole file into memory (IoError when unreadable).
std::string read_file(const std::string& path);
/// Writes via a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace triedit
