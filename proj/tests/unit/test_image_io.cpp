// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "triedit/image_io.hpp"

using namespace triedit;

namespace {

Tensorf random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Tensorf t({h, w, 3});
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("quantize_u8 snaps to 1/255 levels and clamps") {
  Tensorf t({1, 2, 3}, std::vector<float>{-0.5f, 0.f, 0.5f, 1.f, 2.f, 0.1f});
  const Tensorf q = quantize_u8(t);
  CHECK(q[0] == 0.f);
  CHECK(q[1] == 0.f);
  CHECK(q[2] == 128.f / 255.f);
  CHECK(q[3] == 1.f);
  CHECK(q[4] == 1.f);
  CHECK(q[5] == 26.f / 255.f);
}

TEST_CASE("PNG round trip is exact for 8-bit images") {
  const Tensorf img = quantize_u8(random_image(13, 7, 3));
  const Tensorf back = decode_png(encode_png(img));
  CHECK(back == img);
  const auto path = (std::filesystem::temp_directory_path() / "triedit_test_roundtrip.png").string();
  write_png(path, img);
  CHECK(read_png(path) == img);
  std::filesystem::remove(path);
}

TEST_CASE("PNG encoding is deterministic") {
  const Tensorf img = random_image(8, 8, 1);
  CHECK(encode_png(img) == encode_png(img));
}

TEST_CASE("malformed PNG data is rejected") {
  CHECK_THROWS_AS(decode_png("not a png"), ValidationError);
  std::string png = encode_png(random_image(4, 4, 2));
  CHECK_THROWS_AS(decode_png(png.substr(0, png.size() / 2)), ValidationError);
  CHECK_THROWS_AS(read_png("/nonexistent/file.png"), IoError);
  CHECK_THROWS_AS(encode_png(Tensorf({4, 4})), ValidationError);
}

TEST_CASE("base64 matches the standard test vectors") {
  const std::pair<std::string, std::string> vectors[] = {
      {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"}};
  for (const auto& [plain, enc] : vectors) {
    CHECK(base64_encode(plain) == enc);
    CHECK(base64_decode(enc) == plain);
  }
}

TEST_CASE("base64 round trips binary data and rejects garbage") {
  std::string bytes;
  for (int i = 0; i < 256; ++i) bytes += static_cast<char>(i);
  CHECK(base64_decode(base64_encode(bytes)) == bytes);
  CHECK_THROWS_AS(base64_decode("abc"), ValidationError);
  CHECK_THROWS_AS(base64_decode("ab!d"), ValidationError);
  CHECK_THROWS_AS(base64_decode("a==b"), ValidationError);
  CHECK_THROWS_AS(base64_decode("Zg==Zg=="), ValidationError);
}
