#include "data/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "common/error.hpp"

namespace stldm {

std::uint8_t quantize(double v) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, "cannot quantise a non-finite pixel");
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace {

std::string header(const char* magic, std::size_t width, std::size_t height) {
    return std::string(magic) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
}

struct Parsed {
    std::size_t width = 0, height = 0;
    std::size_t offset = 0;
};

Parsed parse_header(const std::string& bytes, const char* magic, const std::string& origin) {
    if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
        fail(ErrorKind::Data, origin + ": expected " + magic + " image");
    }
    std::size_t pos = 2;
    std::size_t fields[3] = {0, 0, 0};
    for (auto& field : fields) {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) fail(ErrorKind::Data, origin + ": malformed image header");
        field = std::stoul(bytes.substr(start, pos - start));
    }
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        fail(ErrorKind::Data, origin + ": malformed image header");
    }
    if (fields[2] != 255) fail(ErrorKind::Data, origin + ": only maxval 255 is supported");
    if (fields[0] == 0 || fields[1] == 0) fail(ErrorKind::Data, origin + ": empty image");
    return Parsed{fields[0], fields[1], pos + 1};
}

}  // namespace

std::string encode_ppm(const Image& image) {
    std::string out = header("P6", image.width, image.height);
    out.reserve(out.size() + image.pixels.size());
    for (double v : image.pixels.values()) out.push_back(static_cast<char>(quantize(v)));
    return out;
}

Image decode_ppm(const std::string& bytes, const std::string& origin) {
    Parsed p = parse_header(bytes, "P6", origin);
    const std::size_t n = p.width * p.height * 3;
    if (bytes.size() - p.offset < n) fail(ErrorKind::Data, origin + ": truncated pixel data");
    Image image(p.height, p.width);
    for (std::size_t i = 0; i < n; ++i)
        image.pixels[i] = static_cast<double>(static_cast<unsigned char>(bytes[p.offset + i])) / 255.0;
    return image;
}

std::string encode_pgm(const GrayImage& image) {
    std::string out = header("P5", image.width, image.height);
    out.append(image.pixels.begin(), image.pixels.end());
    return out;
}

GrayImage decode_pgm(const std::string& bytes, const std::string& origin) {
    Parsed p = parse_header(bytes, "P5", origin);
    const std::size_t n = p.width * p.height;
    if (bytes.size() - p.offset < n) fail(ErrorKind::Data, origin + ": truncated pixel data");
    GrayImage image{p.height, p.width, {}};
    image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(p.offset),
                        bytes.begin() + static_cast<std::ptrdiff_t>(p.offset + n));
    return image;
}

GrayImage to_gray(const GuidanceMap& g) {
    GrayImage out{g.height, g.width, {}};
    for (double v : g.values.values()) out.pixels.push_back(quantize(v));
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(ErrorKind::Io, "cannot read " + path.string());
    return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::Io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace stldm
