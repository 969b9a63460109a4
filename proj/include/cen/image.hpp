#pragma once

// 8-bit RGB images held as normalized floats, with PNG and binary PPM codecs.
//
// Decoding validates every length and checksum and reports the byte offset
// of the first problem. PNG support covers non-interlaced 8-bit RGB and RGBA
// (alpha is dropped); zlib provides inflate/deflate and CRC-32.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cen/log.hpp"
#include "cen/tensor.hpp"

namespace cen {

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t offset, const std::string& reason)
        : std::runtime_error(reason + " at byte " + std::to_string(offset)), offset_(offset), reason_(reason) {}
    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }
    [[nodiscard]] const std::string& reason() const noexcept { return reason_; }

private:
    std::size_t offset_;
    std::string reason_;
};

class UnsupportedFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Row-major interleaved RGB, each sample in [0, 1].
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(3 * w * h, fill) {}

    float& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    [[nodiscard]] float at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Clamp to [0, 1], scale to 255 and round half up.
inline std::uint8_t to_byte(float v) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(clamped * 255.0 + 0.5));
}

inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

enum class ImageFormat { png, ppm };

inline ImageFormat format_for_path(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") return ImageFormat::png;
    if (ext == ".ppm") return ImageFormat::ppm;
    throw UnsupportedFormatError("unsupported image extension '" + ext + "' (expected .png or .ppm)");
}

struct ImageSize {
    std::size_t width = 0;
    std::size_t height = 0;
};

namespace detail {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes, std::uint32_t crc = 0) {
    return static_cast<std::uint32_t>(::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::uint32_t read_be32(const std::uint8_t* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

constexpr std::array<std::uint8_t, 8> kPngSignature{137, 80, 78, 71, 13, 10, 26, 10};

struct PpmHeader {
    ImageSize size;
    std::size_t data_offset = 0;
};

inline PpmHeader parse_ppm_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError(0, "PPM: missing P6 magic");
    std::size_t pos = 2;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_number = [&](const char* what) -> std::size_t {
        skip_space();
        const std::size_t start = pos;
        std::size_t value = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
            if (value > (1u << 30)) throw ParseError(start, std::string("PPM: ") + what + " out of range");
            ++pos;
        }
        if (pos == start) throw ParseError(pos, std::string("PPM: expected ") + what);
        if (pos == bytes.size()) throw ParseError(pos, "PPM: header truncated");
        return value;
    };
    PpmHeader h;
    h.size.width = read_number("width");
    h.size.height = read_number("height");
    const std::size_t maxval_pos = pos;
    const std::size_t maxval = read_number("maxval");
    if (h.size.width == 0 || h.size.height == 0) throw ParseError(maxval_pos, "PPM: zero image extent");
    if (maxval == 0 || maxval > 65535) throw ParseError(maxval_pos, "PPM: invalid maxval");
    if (maxval != 255) throw UnsupportedFormatError("PPM: maxval " + std::to_string(maxval) + " (only 255 supported)");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError(pos, "PPM: expected whitespace after maxval");
    h.data_offset = pos + 1;
    return h;
}

struct PngHeader {
    ImageSize size;
    std::uint8_t color_type = 0;
};

inline PngHeader parse_png_ihdr(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || !std::equal(kPngSignature.begin(), kPngSignature.end(), bytes.begin())) {
        throw ParseError(0, "PNG: bad signature");
    }
    if (bytes.size() < 8 + 8 + 13 + 4) throw ParseError(bytes.size(), "PNG: truncated IHDR");
    const std::uint8_t* p = bytes.data() + 8;
    if (read_be32(p) != 13 || std::string(reinterpret_cast<const char*>(p + 4), 4) != "IHDR") {
        throw ParseError(8, "PNG: first chunk is not a 13-byte IHDR");
    }
    const std::uint8_t* d = p + 8;
    PngHeader h;
    h.size.width = read_be32(d);
    h.size.height = read_be32(d + 4);
    const std::uint8_t depth = d[8];
    h.color_type = d[9];
    if (h.size.width == 0 || h.size.height == 0 || h.size.width > (1u << 24) || h.size.height > (1u << 24)) {
        throw ParseError(16, "PNG: invalid image extent");
    }
    if (depth != 8) throw UnsupportedFormatError("PNG: bit depth " + std::to_string(depth) + " (only 8 supported)");
    if (h.color_type != 2 && h.color_type != 6) {
        throw UnsupportedFormatError("PNG: color type " + std::to_string(h.color_type) + " (only RGB and RGBA supported)");
    }
    if (d[10] != 0) throw ParseError(26, "PNG: unknown compression method");
    if (d[11] != 0) throw ParseError(27, "PNG: unknown filter method");
    if (d[12] != 0) throw UnsupportedFormatError("PNG: interlaced images are not supported");
    return h;
}

inline std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a);
    const int pb = std::abs(p - b);
    const int pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
    if (pb <= pc) return static_cast<std::uint8_t>(b);
    return static_cast<std::uint8_t>(c);
}

}  // namespace detail

inline Image decode_ppm(std::span<const std::uint8_t> bytes) {
    const auto h = detail::parse_ppm_header(bytes);
    const std::size_t need = 3 * h.size.width * h.size.height;
    if (bytes.size() - h.data_offset < need) {
        throw ParseError(bytes.size(), "PPM: truncated raster, expected " + std::to_string(need) + " bytes");
    }
    Image img(h.size.width, h.size.height);
    for (std::size_t i = 0; i < need; ++i) img.pixels[i] = from_byte(bytes[h.data_offset + i]);
    return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.pixels.size());
    for (float v : img.pixels) out.push_back(to_byte(v));
    return out;
}

inline Image decode_png(std::span<const std::uint8_t> bytes) {
    const auto header = detail::parse_png_ihdr(bytes);
    const std::size_t channels = header.color_type == 6 ? 4 : 3;
    const std::size_t width = header.size.width;
    const std::size_t height = header.size.height;

    std::vector<std::uint8_t> compressed;
    std::size_t first_idat = 0;
    bool seen_end = false;
    std::size_t pos = 8;
    while (pos < bytes.size()) {
        if (bytes.size() - pos < 12) throw ParseError(pos, "PNG: truncated chunk header");
        const std::uint32_t length = detail::read_be32(bytes.data() + pos);
        const std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
        if (length > bytes.size() - pos - 12) throw ParseError(pos, "PNG: truncated " + type + " chunk");
        const auto body = bytes.subspan(pos + 4, 4 + length);
        const std::uint32_t stored = detail::read_be32(bytes.data() + pos + 8 + length);
        if (detail::crc32_of(body) != stored) throw ParseError(pos + 8 + length, "PNG: CRC mismatch in " + type + " chunk");
        const auto data = bytes.subspan(pos + 8, length);
        if (type == "IDAT") {
            if (first_idat == 0) first_idat = pos;
            compressed.insert(compressed.end(), data.begin(), data.end());
        } else if (type == "IEND") {
            seen_end = true;
            break;
        } else if (type != "IHDR" && type != "PLTE" && std::isupper(static_cast<unsigned char>(type[0]))) {
            throw UnsupportedFormatError("PNG: unknown critical chunk " + type);
        }
        pos += 12 + length;
    }
    if (!seen_end) throw ParseError(bytes.size(), "PNG: missing IEND chunk");
    if (compressed.empty()) throw ParseError(pos, "PNG: no IDAT chunk");

    const std::size_t stride = width * channels;
    std::vector<std::uint8_t> raw((stride + 1) * height);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    const int rc = ::uncompress(raw.data(), &raw_len, compressed.data(), static_cast<uLong>(compressed.size()));
    if (rc != Z_OK || raw_len != raw.size()) throw ParseError(first_idat, "PNG: corrupt or truncated image data");

    std::vector<std::uint8_t> prev(stride, 0), cur(stride);
    Image img(width, height);
    for (std::size_t y = 0; y < height; ++y) {
        const std::uint8_t* row = raw.data() + y * (stride + 1);
        const std::uint8_t filter = row[0];
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= channels ? cur[i - channels] : 0;
            const int b = prev[i];
            const int c = i >= channels ? prev[i - channels] : 0;
            int pred = 0;
            switch (filter) {
                case 0: pred = 0; break;
                case 1: pred = a; break;
                case 2: pred = b; break;
                case 3: pred = (a + b) / 2; break;
                case 4: pred = detail::paeth(a, b, c); break;
                default: throw ParseError(first_idat, "PNG: invalid filter type " + std::to_string(filter) + " in row " + std::to_string(y));
            }
            cur[i] = static_cast<std::uint8_t>(row[1 + i] + pred);
        }
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = from_byte(cur[x * channels + c]);
        std::swap(prev, cur);
    }
    if (channels == 4) log::warn("PNG alpha channel dropped");
    return img;
}

inline std::vector<std::uint8_t> encode_png(const Image& img) {
    const std::size_t stride = 3 * img.width;
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        for (std::size_t i = 0; i < stride; ++i) raw.push_back(to_byte(img.pixels[y * stride + i]));
    }
    uLongf zlen = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zlen);
    if (::compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw std::runtime_error("PNG: deflate failed");
    }
    z.resize(zlen);

    std::vector<std::uint8_t> out(detail::kPngSignature.begin(), detail::kPngSignature.end());
    auto chunk = [&out](const char* type, std::span<const std::uint8_t> data) {
        detail::put_be32(out, static_cast<std::uint32_t>(data.size()));
        const std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), data.begin(), data.end());
        detail::put_be32(out, detail::crc32_of(std::span<const std::uint8_t>(out).subspan(start)));
    };
    std::vector<std::uint8_t> ihdr;
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
    chunk("IHDR", ihdr);
    chunk("IDAT", z);
    chunk("IEND", {});
    return out;
}

inline Image decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 8 && std::equal(detail::kPngSignature.begin(), detail::kPngSignature.end(), bytes.begin())) {
        return decode_png(bytes);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    throw ParseError(0, "unrecognized image signature");
}

inline std::vector<std::uint8_t> encode_image(const Image& img, ImageFormat format) {
    return format == ImageFormat::png ? encode_png(img) : encode_ppm(img);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline Image read_image(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_image(bytes);
    } catch (const ParseError& e) {
        throw ParseError(e.offset(), path.filename().string() + ": " + e.reason());
    }
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
    write_file(path, encode_image(img, format_for_path(path)));
}

/// Image extents from the header alone.
inline ImageSize probe_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> head(512);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    if (head.size() >= 8 && std::equal(detail::kPngSignature.begin(), detail::kPngSignature.end(), head.begin())) {
        return detail::parse_png_ihdr(head).size;
    }
    if (head.size() >= 2 && head[0] == 'P' && head[1] == '6') return detail::parse_ppm_header(head).size;
    throw ParseError(0, path.filename().string() + ": unrecognized image signature");
}

// ---------------------------------------------------------------------------
// Geometry

inline Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
    if (x0 + w > img.width || y0 + h > img.height) throw DimensionError("crop window exceeds image");
    Image out(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        const float* src = img.pixels.data() + ((y0 + y) * img.width + x0) * 3;
        std::copy(src, src + 3 * w, out.pixels.data() + y * w * 3);
    }
    return out;
}

/// Mirror left-right.
inline Image flip_horizontal(const Image& img) {
    Image out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
    return out;
}

/// Mirror top-bottom.
inline Image flip_vertical(const Image& img) {
    Image out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        std::copy_n(img.pixels.data() + y * img.width * 3, img.width * 3,
                    out.pixels.data() + (img.height - 1 - y) * img.width * 3);
    return out;
}

/// Counter-clockwise rotation by quarter_turns * 90 degrees.
inline Image rotate90(const Image& img, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return img;
    if (k == 2) return flip_vertical(flip_horizontal(img));
    Image out(img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                if (k == 1)
                    out.at(y, img.width - 1 - x, c) = img.at(x, y, c);
                else
                    out.at(img.height - 1 - y, x, c) = img.at(x, y, c);
            }
    return out;
}

/// Centre the image in a canvas of at least (min_w, min_h), filling the
/// border by mirror reflection.
inline Image reflect_pad_to(const Image& img, std::size_t min_w, std::size_t min_h) {
    const std::size_t w = std::max(img.width, min_w);
    const std::size_t h = std::max(img.height, min_h);
    if (w == img.width && h == img.height) return img;
    const auto left = static_cast<std::ptrdiff_t>((w - img.width) / 2);
    const auto top = static_cast<std::ptrdiff_t>((h - img.height) / 2);
    auto reflect = [](std::ptrdiff_t i, std::size_t n) -> std::size_t {
        if (n == 1) return 0;
        const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
        i %= period;
        if (i < 0) i += period;
        return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
    };
    Image out(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y) - top, img.height);
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = reflect(static_cast<std::ptrdiff_t>(x) - left, img.width);
            for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(sx, sy, c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tensor conversion

/// Packs images of identical size into an (N, 3, H, W) tensor.
template <typename T = float>
Tensor<T> images_to_tensor(std::span<const Image> images) {
    if (images.empty()) throw DimensionError("no images to pack");
    const std::size_t w = images[0].width;
    const std::size_t h = images[0].height;
    Tensor<T> t(Shape{images.size(), 3, h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n].width != w || images[n].height != h) throw DimensionError("images in a batch differ in size");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) t.at(n, c, y, x) = static_cast<T>(images[n].at(x, y, c));
    }
    return t;
}

template <typename T = float>
Tensor<T> image_to_tensor(const Image& img) {
    return images_to_tensor<T>(std::span<const Image>(&img, 1));
}

/// Batch item `n` of an (N, 3, H, W) tensor, clamped to [0, 1].
template <typename T>
Image tensor_to_image(const Tensor<T>& t, std::size_t n = 0) {
    const Shape& s = t.shape();
    if (s.c != 3) throw DimensionError("image tensor needs 3 channels, got " + s.str());
    Image img(s.w, s.h);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x)
                img.at(x, y, c) = std::clamp(static_cast<float>(t.at(n, c, y, x)), 0.0f, 1.0f);
    return img;
}

}  // namespace cen
