#include "wpl/persona.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "wpl/errors.hpp"

namespace wpl {

using nlohmann::json;

const std::array<std::string, kPartCount> kPartNames = {"face", "upper", "lower"};

namespace {
const std::array<std::string, kPoseCount> kPoseNames = {"stand", "lean-left", "lean-right"};

// rng stream namespaces; identity attribute draws stay independent of views
constexpr uint64_t kStreamIdentity = 0x1000000;
constexpr uint64_t kStreamViews = 0x2000000;
constexpr uint64_t kStreamSplit = 0x3;

constexpr int kFigureTop = 4;
constexpr int kFigureBottom = 60;
constexpr int kMaxLean = 5;
} // namespace

const std::string& pose_name(Pose p) { return kPoseNames[size_t(p)]; }

std::optional<Pose> pose_from_name(const std::string& name) {
    for (int i = 0; i < kPoseCount; ++i)
        if (kPoseNames[size_t(i)] == name) return Pose(i);
    return std::nullopt;
}

int band_top(int part) {
    static constexpr int tops[kPartCount] = {kFigureTop, 20, 42};
    return tops[part];
}

int band_bottom(int part) {
    static constexpr int bottoms[kPartCount] = {20, 42, kFigureBottom};
    return bottoms[part];
}

int band_half_width(int part) {
    static constexpr int half[kPartCount] = {7, 11, 8};
    return half[part];
}

int pose_shear(Pose pose, int row) {
    if (pose == Pose::Stand) return 0;
    int mag = (kMaxLean * (kFigureBottom - row) + (kFigureBottom - kFigureTop) / 2) / (kFigureBottom - kFigureTop);
    return pose == Pose::LeanLeft ? -mag : mag;
}

namespace {

Rgb part_pixel(const PersonaSpec& spec, int part, int row, int local_r, int local_c) {
    if (part == 0) {
        return row < kHairBottomRow ? palette::kHairColors[size_t(spec.face.hair)]
                                    : palette::kSkinTones[size_t(spec.face.skin)];
    }
    const GarmentAttrs& g = part == 1 ? spec.upper : spec.lower;
    const Rgb base = palette::kGarmentColors[size_t(g.color)];
    switch (g.pattern) {
        case 0: return base;
        case 1: return (local_r / 2) % 2 ? palette::shade(base) : base;
        case 2: return (local_c / 2) % 2 ? palette::shade(base) : base;
        default: return ((local_r / 3 + local_c / 3) % 2) ? palette::shade(base) : base;
    }
}

PersonaSpec draw_attrs(RngStream& r) {
    PersonaSpec s;
    s.face.skin = int(r.below(palette::kNumSkinTones));
    s.face.hair = int(r.below(palette::kNumHairColors));
    s.upper.color = int(r.below(palette::kNumGarmentColors));
    s.upper.pattern = int(r.below(kPatternCount));
    s.lower.color = int(r.below(palette::kNumGarmentColors));
    s.lower.pattern = int(r.below(kPatternCount));
    return s;
}

// Attributes for identities 0..count-1 under the dataset seed. A collision
// with an earlier identity re-draws from child streams of that identity's
// own stream, so the result is a pure function of (seed, id).
std::vector<PersonaSpec> make_attr_sequence(uint64_t seed, int count) {
    std::vector<PersonaSpec> out;
    std::set<std::array<int, 6>> used;
    for (int id = 0; id < count; ++id) {
        RngStream r(seed, kStreamIdentity + uint64_t(id));
        PersonaSpec s = draw_attrs(r);
        int guard = 0;
        while (used.count(s.attr_tuple())) {
            if (++guard > 100000) throw std::runtime_error("persona: attribute space exhausted");
            RngStream child = r.split();
            s = draw_attrs(child);
        }
        used.insert(s.attr_tuple());
        s.identity = id;
        out.push_back(s);
    }
    return out;
}

} // namespace

PersonaSpec make_identity(uint64_t dataset_seed, int identity_id, int family_id) {
    if (family_id < 0) throw std::invalid_argument("make_identity: negative family id");
    auto seq = make_attr_sequence(dataset_seed, identity_id + 1);
    PersonaSpec s = seq.back();
    s.family = family_id;
    return s;
}

RenderedView render_view(const PersonaSpec& spec, const ViewParams& view) {
    RenderedView rv;
    rv.identity = spec.identity;
    rv.params = view;
    const Rgb bg = palette::kBackgrounds[size_t(view.background)];
    rv.image = Image(kViewH, kViewW, 3);
    for (int y = 0; y < kViewH; ++y)
        for (int x = 0; x < kViewW; ++x) rv.image.set_rgb(y, x, bg);
    for (auto& m : rv.part_masks) m = Image(kViewH, kViewW, 1);

    const int cx = kFigureCenter + view.offset;
    for (int part = 0; part < kPartCount; ++part) {
        const int half = band_half_width(part);
        for (int row = band_top(part); row < band_bottom(part); ++row) {
            const int sh = pose_shear(view.pose, row);
            const int x0 = cx - half + sh;
            for (int local_c = 0; local_c < 2 * half; ++local_c) {
                const int x = x0 + local_c;
                rv.image.set_rgb(row, x, part_pixel(spec, part, row, row - band_top(part), local_c));
                rv.part_masks[size_t(part)].at(row, x) = 255;
            }
        }
    }
    return rv;
}

std::vector<ViewParams> draw_view_params(uint64_t dataset_seed, int identity_id, int views_min, int views_max) {
    RngStream r(dataset_seed, kStreamViews + uint64_t(identity_id));
    const int n = views_min + int(r.below(uint32_t(views_max - views_min + 1)));
    std::vector<ViewParams> out;
    for (int v = 0; v < n; ++v) {
        ViewParams p;
        p.view = v;
        int guard = 0;
        do {
            p.pose = Pose(r.below(kPoseCount));
            p.offset = -4 + int(r.below(9));
            p.background = int(r.below(palette::kNumBackgrounds));
            if (++guard > 1000) throw std::runtime_error("persona: cannot draw distinct view params");
        } while (std::any_of(out.begin(), out.end(), [&](const ViewParams& q) {
            return q.pose == p.pose && q.offset == p.offset && q.background == p.background;
        }));
        out.push_back(p);
    }
    return out;
}

namespace {

std::string view_stem(int identity, int view) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d_%02d", identity, view);
    return buf;
}

// stratified split: every family ends with >=2 train and >=1 test identities
void split_identities(const DatasetConfig& cfg, const std::vector<int>& family_of, std::vector<int>& train,
                      std::vector<int>& test) {
    std::vector<std::vector<int>> members(size_t(cfg.families));
    for (int id = 0; id < cfg.n_ids; ++id) members[size_t(family_of[size_t(id)])].push_back(id);
    RngStream r(cfg.seed, kStreamSplit);
    std::vector<int> quota(size_t(cfg.families));
    int assigned = 0;
    for (int f = 0; f < cfg.families; ++f) {
        quota[size_t(f)] = int(members[size_t(f)].size()) * cfg.n_train / cfg.n_ids;
        assigned += quota[size_t(f)];
    }
    for (int f = 0; assigned < cfg.n_train; f = (f + 1) % cfg.families) {
        if (quota[size_t(f)] < int(members[size_t(f)].size())) {
            ++quota[size_t(f)];
            ++assigned;
        }
    }
    for (int f = 0; f < cfg.families; ++f) {
        const int size = int(members[size_t(f)].size());
        if (quota[size_t(f)] < 2 || size - quota[size_t(f)] < 1)
            throw std::invalid_argument("dataset split cannot give every family >=2 train and >=1 test identities");
        // seeded shuffle
        for (int i = size - 1; i > 0; --i) std::swap(members[size_t(f)][size_t(i)], members[size_t(f)][r.below(uint32_t(i + 1))]);
        for (int i = 0; i < size; ++i)
            (i < quota[size_t(f)] ? train : test).push_back(members[size_t(f)][size_t(i)]);
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
}

void check_view_invariants(const RenderedView& rv, const std::string& where) {
    const Rgb bg = palette::kBackgrounds[size_t(rv.params.background)];
    for (int y = 0; y < kViewH; ++y)
        for (int x = 0; x < kViewW; ++x) {
            int on = 0;
            for (const auto& m : rv.part_masks) on += mask_on(m, y, x);
            if (on > 1) throw IoError("part masks overlap at " + where);
            if (on == 1 && rv.image.rgb(y, x) == bg)
                throw IoError("part mask covers a background pixel at " + where);
        }
    for (int part = 0; part < kPartCount; ++part)
        if (mask_count(rv.part_masks[size_t(part)]) < 16)
            throw IoError("part mask '" + kPartNames[size_t(part)] + "' under 16 pixels at " + where);
}

} // namespace

std::string manifest_to_json(const DatasetManifest& m) {
    json j;
    j["schema"] = m.schema;
    j["seed"] = m.seed;
    j["n_identities"] = m.n_ids;
    j["families"] = m.families;
    j["views_min"] = m.views_min;
    j["views_max"] = m.views_max;
    j["family_of"] = m.family_of;
    j["train_ids"] = m.train_ids;
    j["test_ids"] = m.test_ids;
    j["views"] = json::array();
    for (const auto& v : m.views) {
        json e;
        e["identity"] = v.identity;
        e["view"] = v.params.view;
        e["pose"] = pose_name(v.params.pose);
        e["offset"] = v.params.offset;
        e["background"] = palette::kBackgroundNames[size_t(v.params.background)];
        e["image"] = v.image_path;
        json masks;
        for (int p = 0; p < kPartCount; ++p) masks[kPartNames[size_t(p)]] = v.mask_paths[size_t(p)];
        e["masks"] = masks;
        j["views"].push_back(e);
    }
    return j.dump(2) + "\n";
}

DatasetManifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.n_train + cfg.n_test != cfg.n_ids)
        throw std::invalid_argument("dataset split " + std::to_string(cfg.n_train) + "+" + std::to_string(cfg.n_test) +
                                    " does not sum to " + std::to_string(cfg.n_ids));
    if (cfg.families < 1 || cfg.families > cfg.n_ids) throw std::invalid_argument("dataset: invalid family count");
    if (cfg.views_min < 1 || cfg.views_min > cfg.views_max) throw std::invalid_argument("dataset: invalid view range");

    DatasetManifest m;
    m.seed = cfg.seed;
    m.n_ids = cfg.n_ids;
    m.families = cfg.families;
    m.views_min = cfg.views_min;
    m.views_max = cfg.views_max;
    for (int id = 0; id < cfg.n_ids; ++id) m.family_of.push_back(id % cfg.families);
    split_identities(cfg, m.family_of, m.train_ids, m.test_ids);

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "views", ec);
    std::filesystem::create_directories(out_dir / "masks", ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir.string());

    auto attrs = make_attr_sequence(cfg.seed, cfg.n_ids);
    for (int id = 0; id < cfg.n_ids; ++id) {
        attrs[size_t(id)].family = m.family_of[size_t(id)];
        for (const ViewParams& vp : draw_view_params(cfg.seed, id, cfg.views_min, cfg.views_max)) {
            RenderedView rv = render_view(attrs[size_t(id)], vp);
            ManifestView mv;
            mv.identity = id;
            mv.params = vp;
            mv.image_path = "views/" + view_stem(id, vp.view) + ".png";
            write_png(out_dir / mv.image_path, rv.image);
            for (int p = 0; p < kPartCount; ++p) {
                mv.mask_paths[size_t(p)] = "masks/" + view_stem(id, vp.view) + "_" + kPartNames[size_t(p)] + ".png";
                write_png(out_dir / mv.mask_paths[size_t(p)], rv.part_masks[size_t(p)]);
            }
            m.views.push_back(std::move(mv));
        }
    }

    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot write manifest under " + out_dir.string());
    out << manifest_to_json(m);
    return m;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    if (!std::filesystem::exists(manifest_path))
        throw ArtifactError("dataset manifest not found: " + manifest_path.string());
    std::ifstream in(manifest_path, std::ios::binary);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("manifest parse error: " + std::string(e.what()));
    }
    if (j.value("schema", 0) != 1) throw IoError("unsupported manifest schema in " + manifest_path.string());

    Dataset ds;
    auto& m = ds.manifest;
    m.schema = 1;
    m.seed = j.at("seed").get<uint64_t>();
    m.n_ids = j.at("n_identities").get<int>();
    m.families = j.at("families").get<int>();
    m.views_min = j.at("views_min").get<int>();
    m.views_max = j.at("views_max").get<int>();
    m.family_of = j.at("family_of").get<std::vector<int>>();
    m.train_ids = j.at("train_ids").get<std::vector<int>>();
    m.test_ids = j.at("test_ids").get<std::vector<int>>();
    for (int id : m.train_ids)
        if (std::count(m.test_ids.begin(), m.test_ids.end(), id))
            throw IoError("identity " + std::to_string(id) + " appears in both splits");

    const auto base = manifest_path.parent_path();
    for (const auto& e : j.value("views", json::array())) {
        ManifestView mv;
        mv.identity = e.at("identity").get<int>();
        mv.params.view = e.at("view").get<int>();
        auto pose = pose_from_name(e.at("pose").get<std::string>());
        if (!pose) throw IoError("unknown pose in manifest view");
        mv.params.pose = *pose;
        mv.params.offset = e.at("offset").get<int>();
        mv.params.background = palette::background_index(e.at("background").get<std::string>());
        if (mv.params.background < 0) throw IoError("unknown background in manifest view");
        mv.image_path = e.at("image").get<std::string>();

        RenderedView rv;
        rv.identity = mv.identity;
        rv.params = mv.params;
        if (!std::filesystem::exists(base / mv.image_path))
            throw IoError("missing view image " + mv.image_path);
        rv.image = read_png(base / mv.image_path);
        for (int p = 0; p < kPartCount; ++p) {
            mv.mask_paths[size_t(p)] = e.at("masks").at(kPartNames[size_t(p)]).get<std::string>();
            if (!std::filesystem::exists(base / mv.mask_paths[size_t(p)]))
                throw IoError("missing mask " + mv.mask_paths[size_t(p)]);
            rv.part_masks[size_t(p)] = read_png(base / mv.mask_paths[size_t(p)]);
        }
        check_view_invariants(rv, "identity " + std::to_string(mv.identity) + " view " + std::to_string(mv.params.view));
        m.views.push_back(mv);
        ds.views[mv.identity].push_back(std::move(rv));
    }
    return ds;
}

const std::vector<RenderedView>& Dataset::views_of(int identity) const {
    auto it = views.find(identity);
    if (it == views.end()) throw std::invalid_argument("dataset has no identity " + std::to_string(identity));
    return it->second;
}

int Dataset::view_count(int identity) const { return int(views_of(identity).size()); }

bool Dataset::is_train(int identity) const {
    return std::count(manifest.train_ids.begin(), manifest.train_ids.end(), identity) > 0;
}

} // namespace wpl
