#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "wpl/image.hpp"
#include "wpl/persona.hpp"
#include "wpl/rng.hpp"

namespace wpl {

// --- wardrobe/canvas template ----------------------------------------------

struct PolyptychLayout {
    int frame = 64;
    int patch = 4;
    int wardrobe_w = 16; // pixels, left column
    int m_parts = 3;
    std::vector<int> cell_y0, cell_y1; // pixel bounds of wardrobe cells

    int grid() const { return frame / patch; }
    int canvas_w() const { return frame - wardrobe_w; }
    bool in_canvas(int x) const { return x >= wardrobe_w; }
    int wardrobe_token_cols() const { return wardrobe_w / patch; }
    // wardrobe cell index of a token, or -1 for canvas tokens
    int token_cell(int token_row, int token_col) const;
};

PolyptychLayout build_layout(int frame, int m_parts, double canvas_fraction, int patch = 4);

// --- prompts ----------------------------------------------------------------

constexpr int kVocabSize = 64;
constexpr int kPromptLen = 16;

// token ids of the fixed vocabulary
namespace vocab {
constexpr int kPad = 0;
constexpr int kSep = 1;
constexpr int kGlobal0 = 2; // 4-token template: polyptych wardrobe canvas person
constexpr int kFace = 6;
constexpr int kUpper = 7;
constexpr int kLower = 8;
constexpr int kBackground0 = 9; // 6 background words
constexpr int kPose0 = 15;      // 3 pose words

int word_id(const std::string& word); // throws on unknown word
const std::string& word_of(int id);
} // namespace vocab

struct PromptBundle {
    std::array<int, kPromptLen> ids{};

    std::vector<int> as_vector() const { return {ids.begin(), ids.end()}; }
    bool operator==(const PromptBundle& o) const { return ids == o.ids; }
};

// Global + per-part + composition segments; identity-free by construction.
// `include_subject_segments` off leaves global/part slots padded (used by the
// plain inpainting pretraining task).
PromptBundle build_prompts(const std::string& background_word, const std::string& pose_word,
                           bool include_subject_segments = true);

// --- token-space masks --------------------------------------------------------

struct TokenMask {
    int rows = 0, cols = 0;
    double theta = 0.0;
    std::vector<uint8_t> on;

    bool at(int r, int c) const { return on[size_t(r) * cols + c] != 0; }
    int count() const;
    std::vector<int> token_indices() const; // row-major indices of set tokens
};

TokenMask mask_to_tokens(const Image& pixel_mask, int patch = 4, double theta = 0.25);

// --- selective subject mask (the stochastic union over parts) ---------------

struct SubjectSelection {
    Image mask_union; // pixel mask; empty when nothing selected
    std::array<bool, kPartCount> selected{};
};

// Draws p_j ~ U(0,1) per part, in part order; part j enters the union iff
// p_j < p_drop.
SubjectSelection select_subject_mask(const std::array<Image, kPartCount>& subject_masks, double p_drop,
                                     RngStream& rng);

// --- sample composition -------------------------------------------------------

struct Provenance {
    std::array<int, kPartCount> source_identity{-1, -1, -1};
    std::array<int, kPartCount> source_view{-1, -1, -1};
    int target_identity = -1;
    int target_view = -1;
};

struct PolyptychSample {
    Image composite;                              // frame×frame RGB
    Image inpaint;                                // frame×frame, 255 = generate (canvas)
    std::array<Image, kPartCount> subject_masks;  // frame coords; empty at inference
    PromptBundle prompt;
    Provenance prov;
    int background = 0;
    Pose pose = Pose::Stand;
    bool training = false;
};

using PartSource = std::pair<int, int>; // (identity, part)

// Training-mode composition: canvas holds the target view, reference views
// are drawn from rng with t_j != i enforced for same-identity sources.
PolyptychSample compose_sample(const Dataset& ds, const std::array<PartSource, kPartCount>& part_sources,
                               std::pair<int, int> target, const PolyptychLayout& layout, RngStream& rng);

// Inference-mode composition: empty canvas, scene given explicitly.
PolyptychSample compose_inference_sample(const Dataset& ds, const std::array<PartSource, kPartCount>& part_sources,
                                         int background, Pose pose, const PolyptychLayout& layout, RngStream& rng);

void export_sample(const PolyptychSample& sample, const std::filesystem::path& dir);

} // namespace wpl
