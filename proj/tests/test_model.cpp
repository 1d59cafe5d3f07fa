#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "wpl/model.hpp"

using namespace wpl;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 16;
    c.heads = 4;
    c.blocks = 1;
    c.frame = 16; // 4x4 token grid
    c.time_dim = 16;
    return c;
}

template <typename S>
struct Inputs {
    TensorT<S> z, clean, bits;
    std::vector<int> prompt;
};

template <typename S>
Inputs<S> random_inputs(const ModelConfig& cfg, RngStream& rng) {
    Inputs<S> in;
    in.z = TensorT<S>::randn({cfg.image_tokens(), cfg.patch_ch()}, rng);
    in.clean = TensorT<S>::randn({cfg.image_tokens(), cfg.patch_ch()}, rng);
    in.bits = TensorT<S>::zeros({cfg.image_tokens(), cfg.mask_ch()});
    for (auto& v : in.bits.mutable_data()) v = rng.uniform() < 0.5 ? S(1) : S(0);
    for (int i = 0; i < cfg.text_len; ++i) in.prompt.push_back(int(rng.below(uint32_t(cfg.vocab))));
    return in;
}

fs::path temp_file(const std::string& name) {
    auto p = fs::temp_directory_path() / ("wpl_model_" + name);
    fs::remove(p);
    return p;
}

} // namespace

TEST_SUITE("patchify") {
    TEST_CASE("round-trip identity on a random image") {
        RngStream rng(5, 1);
        Image img(64, 64, 3);
        for (auto& v : img.px) v = uint8_t(rng.below(256));
        auto tokens = patchify<float>(img);
        CHECK(tokens.shape() == Shape{256, 48});
        CHECK(unpatchify(tokens, 64, 64) == img);
    }

    TEST_CASE("constant image gives equal patch vectors") {
        Image img(64, 64, 3, 77);
        auto tokens = patchify<float>(img);
        for (int r = 1; r < 256; ++r)
            for (int c = 0; c < 48; ++c) CHECK(tokens.data()[size_t(r) * 48 + c] == tokens.data()[size_t(c)]);
    }

    TEST_CASE("token (r,c) covers pixel block [4r,4r+4) x [4c,4c+4)") {
        Image img(64, 64, 3, 0);
        img.at(9, 22, 1) = 201; // token (2, 5), py=1 px=2, channel 1
        auto tokens = patchify<float>(img);
        const int token = 2 * 16 + 5;
        const int ch = (1 * 4 + 2) * 3 + 1;
        CHECK(tokens.data()[size_t(token) * 48 + ch] == 201.0f);
        int nonzero = 0;
        for (float v : tokens.data()) nonzero += v != 0.0f;
        CHECK(nonzero == 1);
    }

    TEST_CASE("mask bits carry one channel per pixel") {
        Image m(64, 64, 1, 0);
        m.at(0, 1) = 255;
        auto bits = patchify_mask<float>(m);
        CHECK(bits.shape() == Shape{256, 16});
        CHECK(bits.data()[1] == 1.0f); // py=0 px=1
        float total = 0;
        for (float v : bits.data()) total += v;
        CHECK(total == 1.0f);
    }
}

TEST_SUITE("forward") {
    TEST_CASE("attention rows at every layer and head sum to one") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(7, 0);
        model.init_weights(rng);
        auto in = random_inputs<float>(cfg, rng);
        AttentionRecord rec;
        model.forward(in.z, in.clean, in.bits, in.prompt, 0.5f, &rec);
        REQUIRE(rec.size() == 1);
        REQUIRE(rec[0].size() == 4);
        const int T = cfg.seq_len();
        for (const auto& head : rec[0]) {
            REQUIRE(int(head.size()) == T * T);
            for (int r = 0; r < T; ++r) {
                float s = 0;
                for (int c = 0; c < T; ++c) s += head[size_t(r) * T + c];
                CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
            }
        }
    }

    TEST_CASE("text tokens with tied ids and positional entries commute bit-exactly") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(11, 0);
        model.init_weights(rng);
        auto in = random_inputs<float>(cfg, rng);
        in.prompt[2] = in.prompt[3] = 9;
        auto& pos = model.params().find("embed.pos_text.table")->tensor.mutable_data();
        for (int c = 0; c < cfg.d_model; ++c) pos[size_t(3) * cfg.d_model + c] = pos[size_t(2) * cfg.d_model + c];
        auto a = model.forward(in.z, in.clean, in.bits, in.prompt, 0.3f);
        std::swap(in.prompt[2], in.prompt[3]);
        auto b = model.forward(in.z, in.clean, in.bits, in.prompt, 0.3f);
        CHECK(a.data() == b.data());
    }

    TEST_CASE("distinct tied-position ids commute up to float reassociation") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(13, 0);
        model.init_weights(rng);
        auto in = random_inputs<float>(cfg, rng);
        in.prompt[4] = 10;
        in.prompt[5] = 20;
        auto& pos = model.params().find("embed.pos_text.table")->tensor.mutable_data();
        for (int c = 0; c < cfg.d_model; ++c) pos[size_t(5) * cfg.d_model + c] = pos[size_t(4) * cfg.d_model + c];
        auto a = model.forward(in.z, in.clean, in.bits, in.prompt, 0.3f);
        std::swap(in.prompt[4], in.prompt[5]);
        auto b = model.forward(in.z, in.clean, in.bits, in.prompt, 0.3f);
        for (size_t i = 0; i < a.data().size(); ++i)
            CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-4));
    }

    TEST_CASE("bad shapes and prompts are rejected") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(17, 0);
        model.init_weights(rng);
        auto in = random_inputs<float>(cfg, rng);
        auto bad = TensorT<float>::zeros({3, 3});
        CHECK_THROWS_AS(model.forward(bad, in.clean, in.bits, in.prompt, 0.5f), std::invalid_argument);
        std::vector<int> short_prompt(4, 0);
        CHECK_THROWS_AS(model.forward(in.z, in.clean, in.bits, short_prompt, 0.5f), std::invalid_argument);
    }
}

TEST_SUITE("lora") {
    TEST_CASE("zero-init adapters leave the forward bit-identical") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(19, 0);
        model.init_weights(rng);
        auto in = random_inputs<float>(cfg, rng);
        auto base_out = model.forward(in.z, in.clean, in.bits, in.prompt, 0.7f);
        RngStream lrng(19, 1);
        model.attach_lora({8, 16}, lrng);
        auto adapted_out = model.forward(in.z, in.clean, in.bits, in.prompt, 0.7f);
        CHECK(base_out.data() == adapted_out.data());
    }

    TEST_CASE("trainable parameter count matches the adapter arithmetic") {
        DiT model; // default config: 6 blocks x 4 targets, d=128, r=8
        RngStream rng(23, 0);
        model.init_weights(rng);
        const auto total = model.params().trainable_count();
        RngStream lrng(23, 1);
        model.attach_lora({8, 16}, lrng);
        CHECK(model.trainable_count() == 24 * 8 * 256);
        CHECK(model.trainable_count() < total);
        CHECK_THROWS_AS(model.attach_lora({8, 16}, lrng), std::invalid_argument);
    }

    TEST_CASE("merged weights reproduce the adapted forward within 1e-5") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(29, 0);
        model.init_weights(rng);
        RngStream lrng(29, 1);
        model.attach_lora({4, 8}, lrng);
        // give the adapters real content
        for (auto& p : model.params().all())
            if (p.name.starts_with("lora."))
                for (auto& v : p.tensor.mutable_data()) v = float(lrng.normal()) * 0.1f;
        RngStream irng(29, 2);
        for (int trial = 0; trial < 10; ++trial) {
            auto in = random_inputs<float>(cfg, irng);
            auto adapted = model.forward(in.z, in.clean, in.bits, in.prompt, 0.4f);
            DiTT<float> merged(cfg);
            for (auto& p : merged.params().all())
                p.tensor.mutable_data() = model.params().find(p.name)->tensor.data();
            // re-attach with identical values, then merge
            RngStream r2(29, 1);
            merged.attach_lora({4, 8}, r2);
            for (auto& p : merged.params().all())
                if (p.name.starts_with("lora.")) p.tensor.mutable_data() = model.params().find(p.name)->tensor.data();
            merged.merge_lora();
            CHECK_FALSE(merged.lora_attached());
            auto plain = merged.forward(in.z, in.clean, in.bits, in.prompt, 0.4f);
            for (size_t i = 0; i < plain.data().size(); ++i)
                CHECK(std::fabs(plain.data()[i] - adapted.data()[i]) < 1e-5f);
        }
    }

    TEST_CASE("merging zero adapters reproduces the base exactly") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(31, 0);
        model.init_weights(rng);
        auto before = model.snapshot_base();
        RngStream lrng(31, 1);
        model.attach_lora({8, 16}, lrng);
        model.merge_lora();
        CHECK(model.snapshot_base() == before);
    }

    TEST_CASE("adapter training never touches frozen base weights") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(37, 0);
        model.init_weights(rng);
        RngStream lrng(37, 1);
        model.attach_lora({8, 16}, lrng);
        auto before = model.snapshot_base();

        AdamW<float> opt({1e-3, 0.9, 0.999, 1e-8, 0.01});
        RngStream irng(37, 2);
        bool adapters_moved = false;
        for (int step = 0; step < 5; ++step) {
            auto in = random_inputs<float>(cfg, irng);
            model.params().zero_grad();
            mean_all(model.forward(in.z, in.clean, in.bits, in.prompt, 0.5f)).backward();
            opt.step(model.params());
        }
        for (auto& p : model.params().all())
            if (p.name.starts_with("lora.B")) {
            }
        for (auto& p : model.params().all())
            if (p.name.starts_with("lora."))
                for (float v : p.tensor.data()) adapters_moved |= v != 0.0f;
        CHECK(adapters_moved);
        CHECK(model.snapshot_base() == before);
    }
}

TEST_SUITE("gradients") {
    TEST_CASE("full tiny-config model passes finite differences in 64-bit") {
        auto cfg = tiny_config();
        DiTT<double> model(cfg);
        RngStream rng(41, 0);
        model.init_weights(rng);
        // randomize every parameter so gates/modulation/head paths all carry signal
        for (auto& p : model.params().all())
            for (auto& v : p.tensor.mutable_data()) v = rng.normal() * 0.05;

        auto in = random_inputs<double>(cfg, rng);
        auto w = TensorT<double>::randn({cfg.image_tokens(), cfg.patch_ch()}, rng);
        auto loss_fn = [&] { return sum_all(mul(model.forward(in.z, in.clean, in.bits, in.prompt, 0.37), w)); };

        model.params().zero_grad();
        loss_fn().backward();
        double worst = 0;
        const double h = 1e-4;
        for (auto& p : model.params().all()) {
            std::vector<double> analytic =
                p.tensor.has_grad() ? p.tensor.grad() : std::vector<double>(size_t(p.tensor.numel()), 0.0);
            auto& data = p.tensor.mutable_data();
            // probe a spread of coordinates in every tensor
            const size_t stride = std::max<size_t>(1, data.size() / 25);
            for (size_t i = 0; i < data.size(); i += stride) {
                const double orig = data[i];
                data[i] = orig + h;
                const double lp = loss_fn().item();
                data[i] = orig - h;
                const double lm = loss_fn().item();
                data[i] = orig;
                const double fd = (lp - lm) / (2 * h);
                const double rel = std::fabs(fd - analytic[i]) / std::max({1.0, std::fabs(fd), std::fabs(analytic[i])});
                worst = std::max(worst, rel);
            }
        }
        CHECK(worst < 1e-3);
    }

    TEST_CASE("adapter parameters pass finite differences") {
        auto cfg = tiny_config();
        DiTT<double> model(cfg);
        RngStream rng(43, 0);
        model.init_weights(rng);
        for (auto& p : model.params().all())
            for (auto& v : p.tensor.mutable_data()) v = rng.normal() * 0.05;
        RngStream lrng(43, 1);
        model.attach_lora({4, 8}, lrng);
        for (auto& p : model.params().all())
            if (p.name.starts_with("lora."))
                for (auto& v : p.tensor.mutable_data()) v = rng.normal() * 0.05;

        auto in = random_inputs<double>(cfg, rng);
        auto w = TensorT<double>::randn({cfg.image_tokens(), cfg.patch_ch()}, rng);
        auto loss_fn = [&] { return sum_all(mul(model.forward(in.z, in.clean, in.bits, in.prompt, 0.8), w)); };
        model.params().zero_grad();
        loss_fn().backward();
        double worst = 0;
        const double h = 1e-4;
        for (auto& p : model.params().all()) {
            if (!p.name.starts_with("lora.")) continue;
            auto& data = p.tensor.mutable_data();
            const auto& analytic = p.tensor.grad();
            for (size_t i = 0; i < data.size(); i += 7) {
                const double orig = data[i];
                data[i] = orig + h;
                const double lp = loss_fn().item();
                data[i] = orig - h;
                const double lm = loss_fn().item();
                data[i] = orig;
                const double fd = (lp - lm) / (2 * h);
                worst = std::max(worst, std::fabs(fd - analytic[i]) / std::max({1.0, std::fabs(fd), std::fabs(analytic[i])}));
            }
        }
        CHECK(worst < 1e-3);
    }
}

TEST_SUITE("checkpoints") {
    TEST_CASE("base and adapters round-trip bit-exactly") {
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        RngStream rng(47, 0);
        model.init_weights(rng);
        RngStream lrng(47, 1);
        model.attach_lora({4, 8}, lrng);
        for (auto& p : model.params().all())
            if (p.name.starts_with("lora."))
                for (auto& v : p.tensor.mutable_data()) v = float(lrng.normal());

        auto base_path = temp_file("base.ckpt");
        auto adapter_path = temp_file("adapters.ckpt");
        model.save_checkpoint(base_path, true, false);
        model.save_checkpoint(adapter_path, false, true);

        auto fresh = DiTT<float>::load_base(base_path);
        CHECK(fresh.config() == cfg);
        RngStream arng(47, 2);
        fresh.load_adapters(adapter_path, arng);
        for (const auto& p : model.params().all()) {
            const auto* q = fresh.params().find(p.name);
            REQUIRE(q != nullptr);
            CHECK(q->tensor.data() == p.tensor.data());
        }

        RngStream irng(47, 3);
        auto in = random_inputs<float>(cfg, irng);
        auto a = model.forward(in.z, in.clean, in.bits, in.prompt, 0.25f);
        auto b = fresh.forward(in.z, in.clean, in.bits, in.prompt, 0.25f);
        CHECK(a.data() == b.data());
    }

    TEST_CASE("bad files are rejected") {
        auto p = temp_file("garbage.ckpt");
        std::ofstream(p) << "not a checkpoint";
        CHECK_THROWS_AS(ckpt::read_file(p), ArtifactError);
        CHECK_THROWS_AS(ckpt::read_file(temp_file("missing.ckpt")), ArtifactError);
        auto cfg = tiny_config();
        DiTT<float> model(cfg);
        CHECK_THROWS_AS(model.save_checkpoint(temp_file("x.ckpt"), false, true), std::invalid_argument);
    }
}
