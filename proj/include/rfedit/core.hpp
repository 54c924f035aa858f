#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfedit {

// Error categories map to CLI exit codes (config=2, numeric=3, io=4).
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// H x W grid of C-channel tokens, row-major tokens, channel innermost.
struct LatentGrid {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> values;

    LatentGrid() = default;
    LatentGrid(int h, int w, int c)
        : height(h), width(w), channels(c), values(static_cast<size_t>(h) * w * c, 0.0f) {}

    int tokens() const { return height * width; }
    size_t size() const { return values.size(); }

    float& at(int y, int x, int c) {
        return values[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return values[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    const float* token(int i) const { return values.data() + static_cast<size_t>(i) * channels; }
    float* token(int i) { return values.data() + static_cast<size_t>(i) * channels; }

    bool same_shape(const LatentGrid& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    bool all_finite() const {
        for (float v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const LatentGrid& a, const LatentGrid& b, const char* op) {
    if (!a.same_shape(b)) throw InputError(std::string(op) + ": shape mismatch");
}

// Per-token scalar field on the token grid (divergence maps, edit masks,
// adapter inputs).
struct TokenMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    TokenMap() = default;
    TokenMap(int h, int w, float fill = 0.0f)
        : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {}

    size_t size() const { return values.size(); }
    float& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
    float at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
    bool same_shape(const TokenMap& o) const { return height == o.height && width == o.width; }
};

// Interleaved pixel image, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, int c)
        : height(h), width(w), channels(c), pixels(static_cast<size_t>(h) * w * c, 0.0f) {}

    float& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// FNV-1a, used for config hashes and directory digests.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}
inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace rfedit
