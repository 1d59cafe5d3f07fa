#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace wpl {

using Rgb = std::array<uint8_t, 3>;

// Fixed color system shared by the renderer, the composer and the metrics.
// Backgrounds are pairwise >= 80/255 apart (L-inf) and every foreground
// color stays > 40/255 away from every background, so background detection
// by nearest-palette match is unambiguous on clean renders.
namespace palette {

inline constexpr int kNumBackgrounds = 6;
inline constexpr int kNumSkinTones = 6;
inline constexpr int kNumHairColors = 6;
inline constexpr int kNumGarmentColors = 8;

extern const std::array<Rgb, kNumBackgrounds> kBackgrounds;
extern const std::array<std::string, kNumBackgrounds> kBackgroundNames;
extern const std::array<Rgb, kNumSkinTones> kSkinTones;
extern const std::array<Rgb, kNumHairColors> kHairColors;
extern const std::array<Rgb, kNumGarmentColors> kGarmentColors;

inline constexpr Rgb kNeutralGray{128, 128, 128};

// secondary pattern color: darkened base
Rgb shade(const Rgb& c);

int linf(const Rgb& a, const Rgb& b);

// index into kBackgrounds, or -1 if no name matches
int background_index(const std::string& name);

// all foreground colors a render may contain (skins, hairs, garments, shades)
std::vector<Rgb> foreground_colors();

} // namespace palette
} // namespace wpl
