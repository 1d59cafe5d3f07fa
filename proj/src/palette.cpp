#include "wpl/palette.hpp"

#include <cmath>
#include <cstdlib>

namespace wpl {
namespace palette {

const std::array<Rgb, kNumBackgrounds> kBackgrounds = {{
    {250, 250, 250}, // white
    {30, 30, 30},    // charcoal
    {250, 120, 200}, // orchid
    {115, 115, 200}, // periwinkle
    {115, 200, 115}, // mint
    {200, 200, 85},  // sand
}};

const std::array<std::string, kNumBackgrounds> kBackgroundNames = {
    "white", "charcoal", "orchid", "periwinkle", "mint", "sand",
};

const std::array<Rgb, kNumSkinTones> kSkinTones = {{
    {250, 210, 170},
    {230, 180, 130},
    {205, 150, 95},
    {175, 120, 65},
    {140, 90, 45},
    {105, 65, 30},
}};

const std::array<Rgb, kNumHairColors> kHairColors = {{
    {25, 25, 75},   // ink
    {90, 55, 30},   // brown
    {150, 90, 50},  // chestnut
    {245, 215, 65}, // blonde
    {170, 60, 40},  // auburn
    {85, 95, 115},  // slate
}};

const std::array<Rgb, kNumGarmentColors> kGarmentColors = {{
    {190, 30, 45},  // crimson
    {235, 120, 20}, // orange
    {240, 200, 30}, // gold
    {40, 170, 60},  // green
    {25, 180, 170}, // teal
    {40, 80, 220},  // blue
    {130, 45, 190}, // purple
    {225, 50, 160}, // magenta
}};

Rgb shade(const Rgb& c) {
    return {uint8_t(c[0] * 55 / 100), uint8_t(c[1] * 55 / 100), uint8_t(c[2] * 55 / 100)};
}

int linf(const Rgb& a, const Rgb& b) {
    int d = 0;
    for (int i = 0; i < 3; ++i) d = std::max(d, std::abs(int(a[i]) - int(b[i])));
    return d;
}

int background_index(const std::string& name) {
    for (int i = 0; i < kNumBackgrounds; ++i)
        if (kBackgroundNames[size_t(i)] == name) return i;
    return -1;
}

std::vector<Rgb> foreground_colors() {
    std::vector<Rgb> out;
    for (const auto& c : kSkinTones) out.push_back(c);
    for (const auto& c : kHairColors) out.push_back(c);
    for (const auto& c : kGarmentColors) {
        out.push_back(c);
        out.push_back(shade(c));
    }
    return out;
}

} // namespace palette
} // namespace wpl
