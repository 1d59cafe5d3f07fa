#include "wpl/polyptych.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "wpl/errors.hpp"

namespace wpl {

using nlohmann::json;

// --- layout -------------------------------------------------------------------

int PolyptychLayout::token_cell(int token_row, int token_col) const {
    if (token_col >= wardrobe_token_cols()) return -1;
    const int y = token_row * patch;
    for (int j = 0; j < m_parts; ++j)
        if (y >= cell_y0[size_t(j)] && y < cell_y1[size_t(j)]) return j;
    return -1;
}

PolyptychLayout build_layout(int frame, int m_parts, double canvas_fraction, int patch) {
    if (frame <= 0 || patch <= 0 || frame % patch != 0)
        throw std::invalid_argument("layout: frame " + std::to_string(frame) + " not divisible by patch " +
                                    std::to_string(patch));
    if (m_parts < 1) throw std::invalid_argument("layout: need at least one part");
    const double ww = frame * (1.0 - canvas_fraction);
    const int wardrobe_w = int(std::lround(ww));
    if (std::fabs(ww - wardrobe_w) > 1e-9 || wardrobe_w % patch != 0 || wardrobe_w <= 0 || wardrobe_w >= frame)
        throw std::invalid_argument("layout: canvas fraction " + std::to_string(canvas_fraction) +
                                    " is not patch-alignable at frame " + std::to_string(frame));
    const int rows = frame / patch;
    if (m_parts > rows) throw std::invalid_argument("layout: more parts than token rows");

    PolyptychLayout lo;
    lo.frame = frame;
    lo.patch = patch;
    lo.wardrobe_w = wardrobe_w;
    lo.m_parts = m_parts;
    const int base = rows / m_parts;
    int y = 0;
    for (int j = 0; j < m_parts; ++j) {
        const int h = (j == m_parts - 1 ? rows - base * (m_parts - 1) : base) * patch;
        lo.cell_y0.push_back(y);
        lo.cell_y1.push_back(y + h);
        y += h;
    }
    return lo;
}

// --- prompts ------------------------------------------------------------------

namespace vocab {

namespace {
std::vector<std::string> make_words() {
    std::vector<std::string> w(kVocabSize);
    w[kPad] = "<pad>";
    w[kSep] = "<sep>";
    w[kGlobal0] = "polyptych";
    w[kGlobal0 + 1] = "wardrobe";
    w[kGlobal0 + 2] = "canvas";
    w[kGlobal0 + 3] = "person";
    w[kFace] = "face";
    w[kUpper] = "upper";
    w[kLower] = "lower";
    for (int i = 0; i < palette::kNumBackgrounds; ++i) w[size_t(kBackground0 + i)] = palette::kBackgroundNames[size_t(i)];
    for (int i = 0; i < kPoseCount; ++i) w[size_t(kPose0 + i)] = pose_name(Pose(i));
    for (int i = kPose0 + kPoseCount; i < kVocabSize; ++i) w[size_t(i)] = "<unused" + std::to_string(i) + ">";
    return w;
}
const std::vector<std::string>& words() {
    static const std::vector<std::string> w = make_words();
    return w;
}
} // namespace

int word_id(const std::string& word) {
    const auto& w = words();
    for (int i = 0; i < kVocabSize; ++i)
        if (w[size_t(i)] == word) return i;
    throw std::invalid_argument("prompt word not in vocabulary: '" + word + "'");
}

const std::string& word_of(int id) { return words().at(size_t(id)); }

} // namespace vocab

PromptBundle build_prompts(const std::string& background_word, const std::string& pose_word,
                           bool include_subject_segments) {
    const int bg = vocab::word_id(background_word);
    const int pose = vocab::word_id(pose_word);
    if (bg < vocab::kBackground0 || bg >= vocab::kBackground0 + palette::kNumBackgrounds)
        throw std::invalid_argument("'" + background_word + "' is not a background word");
    if (pose < vocab::kPose0 || pose >= vocab::kPose0 + kPoseCount)
        throw std::invalid_argument("'" + pose_word + "' is not a pose word");

    PromptBundle b;
    b.ids.fill(vocab::kPad);
    if (include_subject_segments) {
        for (int i = 0; i < 4; ++i) b.ids[size_t(i)] = vocab::kGlobal0 + i;
        b.ids[4] = vocab::kFace;
        b.ids[5] = vocab::kSep;
        b.ids[6] = vocab::kUpper;
        b.ids[7] = vocab::kSep;
        b.ids[8] = vocab::kLower;
        b.ids[9] = vocab::kSep;
    }
    b.ids[10] = bg;
    b.ids[11] = pose;
    return b;
}

// --- token masks ----------------------------------------------------------------

int TokenMask::count() const {
    int n = 0;
    for (uint8_t v : on) n += v != 0;
    return n;
}

std::vector<int> TokenMask::token_indices() const {
    std::vector<int> idx;
    for (int i = 0; i < rows * cols; ++i)
        if (on[size_t(i)]) idx.push_back(i);
    return idx;
}

TokenMask mask_to_tokens(const Image& pixel_mask, int patch, double theta) {
    if (pixel_mask.h % patch != 0 || pixel_mask.w % patch != 0)
        throw std::invalid_argument("mask_to_tokens: mask " + std::to_string(pixel_mask.h) + "x" +
                                    std::to_string(pixel_mask.w) + " not divisible by patch " + std::to_string(patch));
    TokenMask tm;
    tm.rows = pixel_mask.h / patch;
    tm.cols = pixel_mask.w / patch;
    tm.theta = theta;
    tm.on.assign(size_t(tm.rows) * tm.cols, 0);
    for (int r = 0; r < tm.rows; ++r)
        for (int c = 0; c < tm.cols; ++c) {
            int cnt = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) cnt += mask_on(pixel_mask, r * patch + dy, c * patch + dx);
            if (double(cnt) >= theta * patch * patch) tm.on[size_t(r) * tm.cols + c] = 255;
        }
    return tm;
}

// --- selective subject mask -----------------------------------------------------

SubjectSelection select_subject_mask(const std::array<Image, kPartCount>& subject_masks, double p_drop,
                                     RngStream& rng) {
    if (p_drop < 0.0 || p_drop > 1.0) throw std::invalid_argument("select_subject_mask: p_drop outside [0,1]");
    SubjectSelection sel;
    for (int j = 0; j < kPartCount; ++j) sel.selected[size_t(j)] = rng.uniform() < p_drop;
    for (int j = 0; j < kPartCount; ++j) {
        if (!sel.selected[size_t(j)] || subject_masks[size_t(j)].empty()) continue;
        const Image& m = subject_masks[size_t(j)];
        if (sel.mask_union.empty()) sel.mask_union = Image(m.h, m.w, 1);
        if (sel.mask_union.h != m.h || sel.mask_union.w != m.w)
            throw std::invalid_argument("select_subject_mask: mask dimensions disagree");
        for (size_t i = 0; i < m.px.size(); ++i)
            if (m.px[i]) sel.mask_union.px[i] = 255;
    }
    return sel;
}

// --- composition -------------------------------------------------------------------

namespace {

struct Box {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0; // half-open
    int h() const { return y1 - y0; }
    int w() const { return x1 - x0; }
};

Box bounding_box(const Image& mask) {
    Box b{mask.h, mask.w, 0, 0};
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask_on(mask, y, x)) {
                b.y0 = std::min(b.y0, y);
                b.x0 = std::min(b.x0, x);
                b.y1 = std::max(b.y1, y + 1);
                b.x1 = std::max(b.x1, x + 1);
            }
    if (b.y1 <= b.y0) throw std::invalid_argument("compose: empty part mask");
    return b;
}

// masked crop, aspect-preserving nearest-neighbour fit, centered in the cell;
// pixels outside the (rescaled) subject stay exactly neutral gray
void place_in_cell(Image& composite, const RenderedView& src, int part, const PolyptychLayout& lo) {
    const Image& mask = src.part_masks[size_t(part)];
    const Box bb = bounding_box(mask);
    const int cw = lo.wardrobe_w;
    const int ch = lo.cell_y1[size_t(part)] - lo.cell_y0[size_t(part)];
    const double s = std::min(1.0, std::min(double(cw) / bb.w(), double(ch) / bb.h()));
    const int tw = std::max(1, int(bb.w() * s));
    const int th = std::max(1, int(bb.h() * s));
    const int ox = (cw - tw) / 2;
    const int oy = lo.cell_y0[size_t(part)] + (ch - th) / 2;
    for (int ty = 0; ty < th; ++ty)
        for (int tx = 0; tx < tw; ++tx) {
            const int sy = bb.y0 + int(int64_t(ty) * bb.h() / th);
            const int sx = bb.x0 + int(int64_t(tx) * bb.w() / tw);
            if (mask_on(mask, sy, sx)) composite.set_rgb(oy + ty, ox + tx, src.image.rgb(sy, sx));
        }
}

int pick_reference_view(const Dataset& ds, int source_identity, int avoid_view, RngStream& rng) {
    const int n = ds.view_count(source_identity);
    if (avoid_view < 0) return int(rng.below(uint32_t(n)));
    if (n < 2)
        throw std::invalid_argument("compose: identity " + std::to_string(source_identity) +
                                    " has no alternative view for a same-identity reference");
    int v = int(rng.below(uint32_t(n - 1)));
    return v >= avoid_view ? v + 1 : v;
}

PolyptychSample compose_common(const Dataset& ds, const std::array<PartSource, kPartCount>& part_sources,
                               int target_identity, int target_view, int background, Pose pose,
                               const PolyptychLayout& lo, RngStream& rng) {
    if (lo.m_parts != kPartCount) throw std::invalid_argument("compose: layout parts != 3");
    PolyptychSample s;
    s.background = background;
    s.pose = pose;
    s.prov.target_identity = target_identity;
    s.prov.target_view = target_view;

    s.composite = Image(lo.frame, lo.frame, 3);
    // wardrobe column starts at neutral gray; canvas stays zero until filled
    for (int y = 0; y < lo.frame; ++y)
        for (int x = 0; x < lo.wardrobe_w; ++x) s.composite.set_rgb(y, x, palette::kNeutralGray);

    for (int j = 0; j < kPartCount; ++j) {
        const auto [src_id, src_part] = part_sources[size_t(j)];
        if (src_part != j)
            throw std::invalid_argument("compose: slot " + std::to_string(j) + " given part " + std::to_string(src_part));
        const int avoid = src_id == target_identity ? target_view : -1;
        const int ref_view = pick_reference_view(ds, src_id, avoid, rng);
        place_in_cell(s.composite, ds.views_of(src_id)[size_t(ref_view)], j, lo);
        s.prov.source_identity[size_t(j)] = src_id;
        s.prov.source_view[size_t(j)] = ref_view;
    }

    s.inpaint = Image(lo.frame, lo.frame, 1);
    for (int y = 0; y < lo.frame; ++y)
        for (int x = lo.wardrobe_w; x < lo.frame; ++x) s.inpaint.at(y, x) = 255;

    s.prompt = build_prompts(palette::kBackgroundNames[size_t(background)], pose_name(pose));
    return s;
}

} // namespace

PolyptychSample compose_sample(const Dataset& ds, const std::array<PartSource, kPartCount>& part_sources,
                               std::pair<int, int> target, const PolyptychLayout& lo, RngStream& rng) {
    const auto [tid, tview] = target;
    const RenderedView& tv = ds.views_of(tid).at(size_t(tview));
    PolyptychSample s = compose_common(ds, part_sources, tid, tview, tv.params.background, tv.params.pose, lo, rng);
    s.training = true;
    for (int y = 0; y < kViewH; ++y)
        for (int x = 0; x < kViewW; ++x) s.composite.set_rgb(y, lo.wardrobe_w + x, tv.image.rgb(y, x));
    for (int j = 0; j < kPartCount; ++j) {
        Image m(lo.frame, lo.frame, 1);
        for (int y = 0; y < kViewH; ++y)
            for (int x = 0; x < kViewW; ++x)
                if (mask_on(tv.part_masks[size_t(j)], y, x)) m.at(y, lo.wardrobe_w + x) = 255;
        s.subject_masks[size_t(j)] = std::move(m);
    }
    return s;
}

PolyptychSample compose_inference_sample(const Dataset& ds, const std::array<PartSource, kPartCount>& part_sources,
                                         int background, Pose pose, const PolyptychLayout& lo, RngStream& rng) {
    PolyptychSample s = compose_common(ds, part_sources, -1, -1, background, pose, lo, rng);
    s.training = false;
    return s;
}

void export_sample(const PolyptychSample& s, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    write_png(dir / "composite.png", s.composite);
    write_png(dir / "inpaint.png", s.inpaint);
    for (int j = 0; j < kPartCount; ++j)
        if (!s.subject_masks[size_t(j)].empty())
            write_png(dir / ("subject_" + kPartNames[size_t(j)] + ".png"), s.subject_masks[size_t(j)]);
    json j;
    j["prompt_ids"] = s.prompt.as_vector();
    json words = json::array();
    for (int id : s.prompt.ids) words.push_back(vocab::word_of(id));
    j["prompt_words"] = words;
    j["background"] = palette::kBackgroundNames[size_t(s.background)];
    j["pose"] = pose_name(s.pose);
    j["training"] = s.training;
    j["target_identity"] = s.prov.target_identity;
    j["target_view"] = s.prov.target_view;
    j["source_identities"] = s.prov.source_identity;
    j["source_views"] = s.prov.source_view;
    std::ofstream out(dir / "sample.json", std::ios::binary);
    if (!out) throw IoError("cannot write sample sidecar under " + dir.string());
    out << j.dump(2) << "\n";
}

} // namespace wpl
