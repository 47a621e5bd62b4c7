#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "backbone/backbone.hpp"
#include "fusion/dfa.hpp"

namespace stldm {

struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
};

// Binary P6/P5 with maxval 255. Pixel values are quantised as round(255 v).
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes, const std::string& origin = "<memory>");
std::string encode_pgm(const GrayImage& image);
GrayImage decode_pgm(const std::string& bytes, const std::string& origin = "<memory>");

GrayImage to_gray(const GuidanceMap& g);
std::uint8_t quantize(double v);

std::string read_file(const std::filesystem::path& path);
// Write to a sibling temp file, then rename over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace stldm
