#pragma once

#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wpl/errors.hpp"
#include "wpl/image.hpp"
#include "wpl/optim.hpp"
#include "wpl/tensor.hpp"

namespace wpl {

struct LoRAConfig {
    int rank = 8;
    int alpha = 16;
    double scaling() const { return double(alpha) / double(rank); }
};

struct ModelConfig {
    int d_model = 128;
    int heads = 4;
    int blocks = 6;
    int patch = 4;
    int frame = 64;
    int text_len = 16;
    int vocab = 64;
    int mlp_ratio = 4;
    int time_dim = 128;

    int grid() const { return frame / patch; }
    int image_tokens() const { return grid() * grid(); }
    int patch_ch() const { return patch * patch * 3; }
    int mask_ch() const { return patch * patch; }
    int in_ch() const { return 2 * patch_ch() + mask_ch(); }
    int seq_len() const { return text_len + image_tokens(); }

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// --- patchify ----------------------------------------------------------------

// Raw byte values as floats; token (r,c) covers pixel block
// [patch·r, patch·r+patch) × [patch·c, patch·c+patch), channel index
// (py·patch+px)·3+ch. Exact inverse of unpatchify.
template <typename S>
TensorT<S> patchify(const Image& img, int patch = 4) {
    if (img.c != 3 || img.h % patch || img.w % patch)
        throw std::invalid_argument("patchify: need RGB image with dimensions divisible by " + std::to_string(patch));
    const int gr = img.h / patch, gc = img.w / patch;
    const int ch = patch * patch * 3;
    auto out = TensorT<S>::zeros({gr * gc, ch});
    auto& v = out.mutable_data();
    for (int r = 0; r < gr; ++r)
        for (int c = 0; c < gc; ++c)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int k = 0; k < 3; ++k)
                        v[size_t(r * gc + c) * ch + (py * patch + px) * 3 + k] = S(img.at(r * patch + py, c * patch + px, k));
    return out;
}

template <typename S>
Image unpatchify(const TensorT<S>& tokens, int h, int w, int patch = 4) {
    const int gr = h / patch, gc = w / patch;
    const int ch = patch * patch * 3;
    if (tokens.ndim() != 2 || tokens.rows() != gr * gc || tokens.cols() != ch)
        throw std::invalid_argument("unpatchify: token shape " + shape_str(tokens.shape()) + " does not cover " +
                                    std::to_string(h) + "x" + std::to_string(w));
    Image img(h, w, 3);
    const auto& v = tokens.data();
    for (int r = 0; r < gr; ++r)
        for (int c = 0; c < gc; ++c)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int k = 0; k < 3; ++k) {
                        S x = v[size_t(r * gc + c) * ch + (py * patch + px) * 3 + k];
                        img.at(r * patch + py, c * patch + px, k) = uint8_t(std::clamp<S>(std::round(x), S(0), S(255)));
                    }
    return img;
}

// single-channel mask to per-token {0,1} bit channels
template <typename S>
TensorT<S> patchify_mask(const Image& mask, int patch = 4) {
    if (mask.c != 1 || mask.h % patch || mask.w % patch)
        throw std::invalid_argument("patchify_mask: need aligned single-channel mask");
    const int gr = mask.h / patch, gc = mask.w / patch;
    const int ch = patch * patch;
    auto out = TensorT<S>::zeros({gr * gc, ch});
    auto& v = out.mutable_data();
    for (int r = 0; r < gr; ++r)
        for (int c = 0; c < gc; ++c)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    v[size_t(r * gc + c) * ch + py * patch + px] = mask.at(r * patch + py, c * patch + px) ? S(1) : S(0);
    return out;
}

// --- the model ----------------------------------------------------------------

// per-block softmax rows captured during a probed forward: [block][head][T*T]
template <typename S>
using AttentionRecordT = std::vector<std::vector<std::vector<S>>>;
using AttentionRecord = AttentionRecordT<float>;

template <typename S>
struct LoRAEntryT {
    std::string target; // frozen weight parameter path
    int a_index = -1;   // registry indices of the A/B parameters
    int b_index = -1;
};

// Timestep-modulated transformer over [text ++ image] tokens with
// inpainting-style conditioning channels. Blocks use pre-norm attention/MLP
// with shift/scale/gate modulation from a sinusoidal timestep embedding
// (modulation projections zero-initialized), a learned text/positional
// embedding, and a linear velocity head over image tokens only.
template <typename S>
class DiTT {
public:
    explicit DiTT(ModelConfig cfg = {}) : cfg_(cfg) {
        if (cfg_.d_model % cfg_.heads) throw std::invalid_argument("model: d_model not divisible by heads");
        build_params();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry<S>& params() { return params_; }
    const ParamRegistry<S>& params() const { return params_; }

    void init_weights(RngStream& rng) {
        const S std_small = S(0.02);
        for (auto& p : params_.all()) {
            auto& v = p.tensor.mutable_data();
            const bool zero_init = p.name.ends_with(".mod.weight") || p.name.ends_with(".mod.bias") ||
                                   p.name.starts_with("head.") || p.name.ends_with(".bias");
            if (zero_init) {
                std::fill(v.begin(), v.end(), S(0));
            } else {
                for (auto& x : v) x = S(rng.normal()) * std_small;
            }
        }
    }

    // --- forward -------------------------------------------------------------
    TensorT<S> forward(const TensorT<S>& z_t, const TensorT<S>& clean_masked, const TensorT<S>& mask_bits,
                       const std::vector<int>& prompt_ids, S t, AttentionRecordT<S>* record = nullptr) const {
        check_input(z_t, cfg_.patch_ch(), "z_t");
        check_input(clean_masked, cfg_.patch_ch(), "clean_masked");
        check_input(mask_bits, cfg_.mask_ch(), "mask_bits");
        if (int(prompt_ids.size()) != cfg_.text_len)
            throw std::invalid_argument("forward: prompt length " + std::to_string(prompt_ids.size()) + " != " +
                                        std::to_string(cfg_.text_len));
        if (!std::isfinite(double(t))) throw NumericError("forward: non-finite timestep");
        if (record) record->assign(size_t(cfg_.blocks), {});

        auto x_img = add_bias(matmul(concat(1, std::vector<TensorT<S>>{z_t, clean_masked, mask_bits}),
                                     weight("embed.patch.weight")),
                              weight("embed.patch.bias"));
        x_img = add(x_img, add(gather_rows(weight("embed.pos_row.table"), row_ids_),
                               gather_rows(weight("embed.pos_col.table"), col_ids_)));
        auto x_text = add(embedding(weight("embed.text.table"), prompt_ids),
                          gather_rows(weight("embed.pos_text.table"), text_pos_ids_));
        auto h = concat(0, std::vector<TensorT<S>>{x_text, x_img});

        auto temb = time_embedding(t);
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            auto mod = add_bias(matmul(temb, weight(pre + "mod.weight")), weight(pre + "mod.bias"));
            auto chunk = [&](int i) { return reshape(slice(mod, 1, i * cfg_.d_model, (i + 1) * cfg_.d_model), {cfg_.d_model}); };
            auto shift1 = chunk(0), scale1 = chunk(1), gate1 = chunk(2);
            auto shift2 = chunk(3), scale2 = chunk(4), gate2 = chunk(5);

            auto y = modulate(layer_norm(h, unit_gain_, zero_bias_), shift1, scale1);
            auto q = linear_lora(y, pre + "attn.q");
            auto k = linear_lora(y, pre + "attn.k");
            auto v = linear_lora(y, pre + "attn.v");
            std::vector<std::vector<S>>* rec = record ? &(*record)[size_t(b)] : nullptr;
            auto attn = linear_lora(multi_head_attention(q, k, v, cfg_.heads, rec), pre + "attn.o");
            h = add(h, mul_channels(attn, gate1));

            auto y2 = modulate(layer_norm(h, unit_gain_, zero_bias_), shift2, scale2);
            auto m1 = gelu(add_bias(matmul(y2, weight(pre + "mlp.fc1.weight")), weight(pre + "mlp.fc1.bias")));
            auto m2 = add_bias(matmul(m1, weight(pre + "mlp.fc2.weight")), weight(pre + "mlp.fc2.bias"));
            h = add(h, mul_channels(m2, gate2));
        }

        auto img_rows = slice(layer_norm(h, weight("final.norm.gain"), weight("final.norm.bias")), 0, cfg_.text_len,
                              cfg_.seq_len());
        return add_bias(matmul(img_rows, weight("head.weight")), weight("head.bias"));
    }

    // --- LoRA ------------------------------------------------------------------
    bool lora_attached() const { return !adapters_.empty(); }
    const LoRAConfig& lora_config() const { return lora_cfg_; }
    const std::vector<LoRAEntryT<S>>& adapters() const { return adapters_; }

    static std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
        std::vector<std::string> t;
        for (int b = 0; b < cfg.blocks; ++b)
            for (const char* proj : {"q", "k", "v", "o"})
                t.push_back("block" + std::to_string(b) + ".attn." + proj + ".weight");
        return t;
    }

    // Freezes every base parameter and adds trainable zero-delta adapters on
    // the given frozen weights. A is small Gaussian, B starts at zero.
    void attach_lora(LoRAConfig cfg, RngStream& rng, std::vector<std::string> targets = {}) {
        if (lora_attached()) throw std::invalid_argument("attach_lora: adapters already attached");
        if (targets.empty()) targets = default_lora_targets(cfg_);
        lora_cfg_ = cfg;
        for (auto& p : params_.all()) p.set_frozen(true);
        for (const auto& target : targets) {
            auto* base = params_.find(target);
            if (!base) throw std::invalid_argument("attach_lora: no parameter named " + target);
            const int d_in = base->tensor.rows(), d_out = base->tensor.cols();
            LoRAEntryT<S> e;
            e.target = target;
            auto a = TensorT<S>::randn({d_in, cfg.rank}, rng, 0.02);
            auto b = TensorT<S>::zeros({cfg.rank, d_out});
            params_.add("lora." + target + ".A", std::move(a));
            params_.add("lora." + target + ".B", std::move(b));
            e.a_index = int(params_.all().size()) - 2;
            e.b_index = int(params_.all().size()) - 1;
            adapters_.push_back(std::move(e));
        }
    }

    // W ← W + (α/r)·A·B, adapters removed; the merged model is plain again.
    void merge_lora() {
        if (!lora_attached()) throw std::invalid_argument("merge_lora: no adapters attached");
        for (const auto& e : adapters_) {
            auto& w = params_.find(e.target)->tensor;
            const auto& a = params_.all()[size_t(e.a_index)].tensor;
            const auto& b = params_.all()[size_t(e.b_index)].tensor;
            MapMat<S> wm(w.mutable_data().data(), w.rows(), w.cols());
            wm.noalias() += S(lora_cfg_.scaling()) * (detail::mat(a) * detail::mat(b));
        }
        adapters_.clear();
        drop_params_with_prefix("lora.");
        for (auto& p : params_.all()) p.set_frozen(false);
    }

    int64_t trainable_count() const { return params_.trainable_count(); }

    // --- persistence -----------------------------------------------------------
    void save_checkpoint(const std::filesystem::path& path, bool include_base, bool include_adapters) const;
    static DiTT<S> load_base(const std::filesystem::path& path);
    void load_adapters(const std::filesystem::path& path, RngStream& init_rng);

    std::vector<std::vector<S>> snapshot_base() const {
        std::vector<std::vector<S>> out;
        for (const auto& p : params_.all())
            if (!p.name.starts_with("lora.")) out.push_back(p.tensor.data());
        return out;
    }

private:
    void check_input(const TensorT<S>& t, int ch, const char* what) const {
        if (t.ndim() != 2 || t.rows() != cfg_.image_tokens() || t.cols() != ch)
            throw std::invalid_argument(std::string("forward: ") + what + " shape " + shape_str(t.shape()) +
                                        " != [" + std::to_string(cfg_.image_tokens()) + "x" + std::to_string(ch) + "]");
    }

    const TensorT<S>& weight(const std::string& name) const {
        const auto* p = params_.find(name);
        if (!p) throw std::invalid_argument("model: no parameter named " + name);
        return p->tensor;
    }

    TensorT<S> modulate(const TensorT<S>& x, const TensorT<S>& shift, const TensorT<S>& scale) const {
        return add_bias(mul_channels(x, add(scale, unit_gain_)), shift);
    }

    TensorT<S> linear_lora(const TensorT<S>& x, const std::string& prefix) const {
        auto y = add_bias(matmul(x, weight(prefix + ".weight")), weight(prefix + ".bias"));
        for (const auto& e : adapters_)
            if (e.target == prefix + ".weight") {
                const auto& a = params_.all()[size_t(e.a_index)].tensor;
                const auto& b = params_.all()[size_t(e.b_index)].tensor;
                y = add(y, scale(matmul(matmul(x, a), b), S(lora_cfg_.scaling())));
                break;
            }
        return y;
    }

    TensorT<S> time_embedding(S t) const {
        const int half = cfg_.time_dim / 2;
        auto sinus = TensorT<S>::zeros({1, cfg_.time_dim});
        auto& v = sinus.mutable_data();
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max(1, half - 1)));
            v[size_t(i)] = S(std::sin(double(t) * 1000.0 * freq));
            v[size_t(half + i)] = S(std::cos(double(t) * 1000.0 * freq));
        }
        auto h = gelu(add_bias(matmul(sinus, weight("time.fc1.weight")), weight("time.fc1.bias")));
        return add_bias(matmul(h, weight("time.fc2.weight")), weight("time.fc2.bias"));
    }

    void build_params() {
        const int d = cfg_.d_model;
        auto addp = [&](const std::string& name, Shape shape) { params_.add(name, TensorT<S>::zeros(std::move(shape))); };
        addp("embed.patch.weight", {cfg_.in_ch(), d});
        addp("embed.patch.bias", {d});
        addp("embed.text.table", {cfg_.vocab, d});
        addp("embed.pos_text.table", {cfg_.text_len, d});
        addp("embed.pos_row.table", {cfg_.grid(), d});
        addp("embed.pos_col.table", {cfg_.grid(), d});
        addp("time.fc1.weight", {cfg_.time_dim, d});
        addp("time.fc1.bias", {d});
        addp("time.fc2.weight", {d, d});
        addp("time.fc2.bias", {d});
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            for (const char* proj : {"q", "k", "v", "o"}) {
                addp(pre + "attn." + proj + ".weight", {d, d});
                addp(pre + "attn." + proj + ".bias", {d});
            }
            addp(pre + "mlp.fc1.weight", {d, d * cfg_.mlp_ratio});
            addp(pre + "mlp.fc1.bias", {d * cfg_.mlp_ratio});
            addp(pre + "mlp.fc2.weight", {d * cfg_.mlp_ratio, d});
            addp(pre + "mlp.fc2.bias", {d});
            addp(pre + "mod.weight", {d, 6 * d});
            addp(pre + "mod.bias", {6 * d});
        }
        addp("final.norm.gain", {d});
        addp("final.norm.bias", {d});
        addp("head.weight", {d, cfg_.patch_ch()});
        addp("head.bias", {cfg_.patch_ch()});
        // final norm gain starts at one
        auto& gain = params_.find("final.norm.gain")->tensor.mutable_data();
        std::fill(gain.begin(), gain.end(), S(1));

        unit_gain_ = TensorT<S>::filled({d}, S(1));
        zero_bias_ = TensorT<S>::zeros({d});
        for (int i = 0; i < cfg_.image_tokens(); ++i) {
            row_ids_.push_back(i / cfg_.grid());
            col_ids_.push_back(i % cfg_.grid());
        }
        for (int i = 0; i < cfg_.text_len; ++i) text_pos_ids_.push_back(i);
    }

    void drop_params_with_prefix(const std::string& prefix) {
        auto& v = params_.all();
        v.erase(std::remove_if(v.begin(), v.end(), [&](const ParameterT<S>& p) { return p.name.starts_with(prefix); }),
                v.end());
    }

    ModelConfig cfg_;
    ParamRegistry<S> params_;
    LoRAConfig lora_cfg_;
    std::vector<LoRAEntryT<S>> adapters_;
    TensorT<S> unit_gain_, zero_bias_;
    std::vector<int> row_ids_, col_ids_, text_pos_ids_;
};

using DiT = DiTT<float>;

// --- checkpoint container -------------------------------------------------------
// header: magic "WPLORA1", u8 zero, u64 json length, config JSON; then a u32
// section count; each section has a name, a tensor directory, and raw
// little-endian f32 payloads. Base weights and adapters live in separate
// sections so either loads without the other.

namespace ckpt {

constexpr char kMagic[8] = {'W', 'P', 'L', 'O', 'R', 'A', '1', '\0'};

struct TensorBlob {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Section {
    std::string name; // "base" or "adapters"
    std::vector<TensorBlob> tensors;
};

struct File {
    nlohmann::json config;
    std::vector<Section> sections;

    const Section* find(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return &s;
        return nullptr;
    }
};

void write_file(const std::filesystem::path& path, const File& f);
File read_file(const std::filesystem::path& path);

} // namespace ckpt

// --- template method definitions -------------------------------------------------

template <typename S>
void DiTT<S>::save_checkpoint(const std::filesystem::path& path, bool include_base, bool include_adapters) const {
    ckpt::File f;
    f.config["model"] = cfg_;
    if (lora_attached()) {
        f.config["lora"] = {{"rank", lora_cfg_.rank}, {"alpha", lora_cfg_.alpha}};
        nlohmann::json targets = nlohmann::json::array();
        for (const auto& e : adapters_) targets.push_back(e.target);
        f.config["lora"]["targets"] = targets;
    }
    auto blob_of = [](const ParameterT<S>& p) {
        ckpt::TensorBlob b;
        b.name = p.name;
        b.shape = p.tensor.shape();
        b.data.assign(p.tensor.data().begin(), p.tensor.data().end());
        return b;
    };
    if (include_base) {
        ckpt::Section s;
        s.name = "base";
        for (const auto& p : params_.all())
            if (!p.name.starts_with("lora.")) s.tensors.push_back(blob_of(p));
        f.sections.push_back(std::move(s));
    }
    if (include_adapters) {
        if (!lora_attached()) throw std::invalid_argument("save_checkpoint: no adapters to save");
        ckpt::Section s;
        s.name = "adapters";
        for (const auto& p : params_.all())
            if (p.name.starts_with("lora.")) s.tensors.push_back(blob_of(p));
        f.sections.push_back(std::move(s));
    }
    ckpt::write_file(path, f);
}

template <typename S>
DiTT<S> DiTT<S>::load_base(const std::filesystem::path& path) {
    auto f = ckpt::read_file(path);
    DiTT<S> model(f.config.at("model").get<ModelConfig>());
    const auto* base = f.find("base");
    if (!base) throw ArtifactError("checkpoint " + path.string() + " has no base section");
    for (const auto& b : base->tensors) {
        auto* p = model.params_.find(b.name);
        if (!p) throw ArtifactError("checkpoint tensor " + b.name + " has no matching parameter");
        if (p->tensor.shape() != b.shape)
            throw ArtifactError("checkpoint tensor " + b.name + " shape mismatch " + shape_str(b.shape) + " vs " +
                                shape_str(p->tensor.shape()));
        p->tensor.mutable_data().assign(b.data.begin(), b.data.end());
    }
    return model;
}

template <typename S>
void DiTT<S>::load_adapters(const std::filesystem::path& path, RngStream& init_rng) {
    auto f = ckpt::read_file(path);
    if (!f.config.contains("lora")) throw ArtifactError("checkpoint " + path.string() + " carries no adapter config");
    if (f.config.contains("model") && f.config.at("model").get<ModelConfig>() != cfg_)
        throw ArtifactError("adapter checkpoint was written for a different model config");
    LoRAConfig lc;
    lc.rank = f.config["lora"].at("rank").get<int>();
    lc.alpha = f.config["lora"].at("alpha").get<int>();
    std::vector<std::string> targets = f.config["lora"].at("targets").get<std::vector<std::string>>();
    attach_lora(lc, init_rng, targets);
    const auto* sec = f.find("adapters");
    if (!sec) throw ArtifactError("checkpoint " + path.string() + " has no adapters section");
    for (const auto& b : sec->tensors) {
        auto* p = params_.find(b.name);
        if (!p) throw ArtifactError("adapter tensor " + b.name + " has no matching parameter");
        if (p->tensor.shape() != b.shape) throw ArtifactError("adapter tensor " + b.name + " shape mismatch");
        p->tensor.mutable_data().assign(b.data.begin(), b.data.end());
    }
}

} // namespace wpl
