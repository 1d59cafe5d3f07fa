#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wpl/image.hpp"
#include "wpl/palette.hpp"
#include "wpl/rng.hpp"

namespace wpl {

constexpr int kViewH = 64;
constexpr int kViewW = 48;
constexpr int kPartCount = 3; // face, upper, lower

extern const std::array<std::string, kPartCount> kPartNames;

enum class Pose { Stand = 0, LeanLeft = 1, LeanRight = 2 };
constexpr int kPoseCount = 3;
const std::string& pose_name(Pose p);
std::optional<Pose> pose_from_name(const std::string& name);

// --- figure geometry, shared with part localization in the metrics ---------
// Vertical bands are fixed; a lean shears columns toward the top of the
// figure. All drawn pixels stay inside the 64×48 view for any offset/lean.
int band_top(int part);
int band_bottom(int part);
int band_half_width(int part);
int pose_shear(Pose pose, int row);
constexpr int kFigureCenter = kViewW / 2;
constexpr int kHairBottomRow = 9; // face band rows above this are hair

struct FaceAttrs {
    int skin = 0; // index into palette::kSkinTones
    int hair = 0; // index into palette::kHairColors
};

struct GarmentAttrs {
    int color = 0;   // index into palette::kGarmentColors
    int pattern = 0; // 0 solid, 1 h-stripes, 2 v-stripes, 3 checker
};

constexpr int kPatternCount = 4;

struct PersonaSpec {
    int identity = 0;
    int family = 0;
    FaceAttrs face;
    GarmentAttrs upper;
    GarmentAttrs lower;

    std::array<int, 6> attr_tuple() const {
        return {face.skin, face.hair, upper.color, upper.pattern, lower.color, lower.pattern};
    }
};

struct ViewParams {
    int view = 0;
    Pose pose = Pose::Stand;
    int offset = 0;     // horizontal shift in [-4, 4]
    int background = 0; // index into palette::kBackgrounds

    bool operator==(const ViewParams& o) const {
        return view == o.view && pose == o.pose && offset == o.offset && background == o.background;
    }
};

struct RenderedView {
    int identity = 0;
    ViewParams params;
    Image image;                             // 64×48 RGB
    std::array<Image, kPartCount> part_masks; // 64×48 single channel {0,255}
};

struct DatasetConfig {
    uint64_t seed = 0;
    int n_ids = 36;
    int families = 6;
    int views_min = 3;
    int views_max = 5;
    int n_train = 24;
    int n_test = 12;
};

struct ManifestView {
    int identity = 0;
    ViewParams params;
    std::string image_path;
    std::array<std::string, kPartCount> mask_paths;
};

struct DatasetManifest {
    int schema = 1;
    uint64_t seed = 0;
    int n_ids = 0;
    int families = 0;
    int views_min = 0;
    int views_max = 0;
    std::vector<int> family_of;
    std::vector<int> train_ids;
    std::vector<int> test_ids;
    std::vector<ManifestView> views;
};

struct Dataset {
    DatasetManifest manifest;
    std::map<int, std::vector<RenderedView>> views;

    const std::vector<RenderedView>& views_of(int identity) const;
    int view_count(int identity) const;
    bool is_train(int identity) const;
};

PersonaSpec make_identity(uint64_t dataset_seed, int identity_id, int family_id);
RenderedView render_view(const PersonaSpec& spec, const ViewParams& view);

std::vector<ViewParams> draw_view_params(uint64_t dataset_seed, int identity_id, int views_min, int views_max);

DatasetManifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);
Dataset load_dataset(const std::filesystem::path& manifest_path);

std::string manifest_to_json(const DatasetManifest& m);

} // namespace wpl
