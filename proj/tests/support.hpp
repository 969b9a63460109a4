#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "cen/image.hpp"
#include "cen/log.hpp"
#include "cen/random.hpp"

namespace cen::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "cen") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

/// Captures log lines for the lifetime of the object.
class LogCapture {
public:
    LogCapture() {
        previous_ = log::set_sink([this](std::string_view level, std::string_view msg) {
            lines.push_back(std::string(level) + ": " + std::string(msg));
        });
    }
    ~LogCapture() { log::set_sink(previous_); }

    [[nodiscard]] bool contains(std::string_view needle) const {
        for (const auto& l : lines)
            if (l.find(needle) != std::string::npos) return true;
        return false;
    }

    std::vector<std::string> lines;

private:
    log::Sink previous_;
};

/// Random image on the 8-bit grid, so codec round trips are exact.
inline Image random_image(Rng& rng, std::size_t w, std::size_t h) {
    Image img(w, h);
    for (auto& v : img.pixels) v = from_byte(static_cast<std::uint8_t>(rng.below(256)));
    return img;
}

/// Smooth, textured reference image and a darkened, gamma-bent input.
inline std::pair<Image, Image> synthetic_pair(std::size_t w, std::size_t h, double phase = 0.0) {
    Image target(w, h), input(w, h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double checker = ((x / 16 + y / 16) % 2) ? 0.1 : -0.1;
                const double v = 0.5 + 0.3 * std::sin(0.15 * x + c + phase) * std::cos(0.11 * y + phase) + checker;
                target.at(x, y, c) = from_byte(to_byte(static_cast<float>(v)));
                input.at(x, y, c) = from_byte(to_byte(static_cast<float>(0.2 * v * v)));
            }
    return {input, target};
}

/// Writes root/input/<id>.png and root/target/<id>.png.
inline void write_pair(const std::filesystem::path& root, const std::string& id, const Image& input,
                       const Image& target) {
    std::filesystem::create_directories(root / "input");
    std::filesystem::create_directories(root / "target");
    write_image(root / "input" / (id + ".png"), input);
    write_image(root / "target" / (id + ".png"), target);
}

}  // namespace cen::test
