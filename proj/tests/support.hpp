#pragma once

#include "expofuse/image.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

namespace testing {

inline expofuse::Image random_image(int w, int h, int c, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
    expofuse::Image img(w, h, c);
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> d(lo, hi);
    for (float& v : img.data) v = d(gen);
    return img;
}

inline expofuse::Image constant_image(int w, int h, int c, float v) {
    return expofuse::Image(w, h, c, v);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("expofuse-" + tag + "-" + std::to_string(rd()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace testing
