#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace wpl {

// 8-bit image, row-major h×w×c. c==3 for RGB renders, c==1 for masks
// (values restricted to {0,255} on disk).
struct Image {
    int h = 0, w = 0, c = 1;
    std::vector<uint8_t> px;

    Image() = default;
    Image(int h_, int w_, int c_, uint8_t fill = 0) : h(h_), w(w_), c(c_), px(size_t(h_) * w_ * c_, fill) {}

    bool empty() const { return px.empty(); }
    uint8_t& at(int y, int x, int ch = 0) { return px[(size_t(y) * w + x) * c + ch]; }
    uint8_t at(int y, int x, int ch = 0) const { return px[(size_t(y) * w + x) * c + ch]; }

    void set_rgb(int y, int x, const std::array<uint8_t, 3>& rgb) {
        at(y, x, 0) = rgb[0];
        at(y, x, 1) = rgb[1];
        at(y, x, 2) = rgb[2];
    }
    std::array<uint8_t, 3> rgb(int y, int x) const { return {at(y, x, 0), at(y, x, 1), at(y, x, 2)}; }

    bool operator==(const Image& o) const { return h == o.h && w == o.w && c == o.c && px == o.px; }
};

// mask helpers: a pixel is "on" iff nonzero
inline bool mask_on(const Image& m, int y, int x) { return m.at(y, x) != 0; }
inline int mask_count(const Image& m) {
    int n = 0;
    for (uint8_t v : m.px) n += v != 0;
    return n;
}

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

} // namespace wpl
