#include "wpl/model.hpp"

namespace wpl {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
    j = json{{"d_model", c.d_model}, {"heads", c.heads},         {"blocks", c.blocks},
             {"patch", c.patch},     {"frame", c.frame},         {"text_len", c.text_len},
             {"vocab", c.vocab},     {"mlp_ratio", c.mlp_ratio}, {"time_dim", c.time_dim}};
}

void from_json(const json& j, ModelConfig& c) {
    j.at("d_model").get_to(c.d_model);
    j.at("heads").get_to(c.heads);
    j.at("blocks").get_to(c.blocks);
    j.at("patch").get_to(c.patch);
    j.at("frame").get_to(c.frame);
    j.at("text_len").get_to(c.text_len);
    j.at("vocab").get_to(c.vocab);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("time_dim").get_to(c.time_dim);
}

namespace ckpt {

namespace {

template <typename T>
void put(std::ostream& out, T v) {
    // payloads are little-endian; this targets LE hosts
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw IoError("checkpoint: truncated file");
    return v;
}

void put_string(std::ostream& out, const std::string& s) {
    put<uint16_t>(out, uint16_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

std::string take_string(std::istream& in) {
    auto n = take<uint16_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw IoError("checkpoint: truncated string");
    return s;
}

} // namespace

void write_file(const std::filesystem::path& path, const File& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof kMagic);
    const std::string cfg = f.config.dump();
    put<uint64_t>(out, cfg.size());
    out.write(cfg.data(), std::streamsize(cfg.size()));
    put<uint32_t>(out, uint32_t(f.sections.size()));
    for (const auto& s : f.sections) {
        put_string(out, s.name);
        put<uint32_t>(out, uint32_t(s.tensors.size()));
        for (const auto& t : s.tensors) {
            put_string(out, t.name);
            put<uint8_t>(out, uint8_t(t.shape.size()));
            for (int d : t.shape) put<uint32_t>(out, uint32_t(d));
            out.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(float)));
        }
    }
    if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

File read_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ArtifactError("checkpoint not found: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path.string());
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw ArtifactError("checkpoint: bad magic in " + path.string());
    auto cfg_len = take<uint64_t>(in);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), std::streamsize(cfg_len));
    if (!in) throw IoError("checkpoint: truncated config");
    File f;
    try {
        f.config = json::parse(cfg);
    } catch (const json::exception& e) {
        throw IoError("checkpoint: config parse error: " + std::string(e.what()));
    }
    auto n_sections = take<uint32_t>(in);
    for (uint32_t si = 0; si < n_sections; ++si) {
        Section s;
        s.name = take_string(in);
        auto n_tensors = take<uint32_t>(in);
        for (uint32_t ti = 0; ti < n_tensors; ++ti) {
            TensorBlob b;
            b.name = take_string(in);
            auto ndim = take<uint8_t>(in);
            int64_t numel = 1;
            for (uint8_t d = 0; d < ndim; ++d) {
                b.shape.push_back(int(take<uint32_t>(in)));
                numel *= b.shape.back();
            }
            b.data.resize(size_t(numel));
            in.read(reinterpret_cast<char*>(b.data.data()), std::streamsize(b.data.size() * sizeof(float)));
            if (!in) throw IoError("checkpoint: truncated tensor payload for " + b.name);
            s.tensors.push_back(std::move(b));
        }
        f.sections.push_back(std::move(s));
    }
    return f;
}

} // namespace ckpt
} // namespace wpl
