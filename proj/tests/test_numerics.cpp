#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "wpl/optim.hpp"
#include "wpl/rng.hpp"
#include "wpl/tensor.hpp"

using oracle::DTensor;
using oracle::fd_max_rel_err;
using oracle::random_tensor;
using oracle::weighted_sum;

namespace {
wpl::RngStream test_rng(uint64_t stream) { return wpl::RngStream(0xC0FFEE, stream); }
}

TEST_SUITE("rng") {
    TEST_CASE("same seed and stream replay bit-identically") {
        wpl::RngStream a(42, 7), b(42, 7);
        for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
        wpl::RngStream c(42, 7), d(42, 7);
        for (int i = 0; i < 100; ++i) {
            CHECK(c.normal() == d.normal());
            CHECK(c.uniform() == d.uniform());
        }
    }

    TEST_CASE("distinct streams are empirically uncorrelated") {
        wpl::RngStream a(42, 1), b(42, 2);
        const int n = 100000;
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < n; ++i) {
            double x = a.uniform(), y = b.uniform();
            sa += x; sb += y; saa += x * x; sbb += y * y; sab += x * y;
        }
        double cov = sab / n - (sa / n) * (sb / n);
        double rho = cov / std::sqrt((saa / n - sa / n * (sa / n)) * (sbb / n - sb / n * (sb / n)));
        CHECK(std::fabs(rho) < 0.05);
    }

    TEST_CASE("split yields distinct, reproducible children") {
        wpl::RngStream parent(9, 3);
        auto c1 = parent.split();
        auto c2 = parent.split();
        CHECK(c1.stream() != c2.stream());
        CHECK(c1.stream() != parent.stream());
        wpl::RngStream parent2(9, 3);
        auto c1b = parent2.split();
        CHECK(c1.stream() == c1b.stream());
        CHECK(c1.next_u64() == c1b.next_u64());
    }

    TEST_CASE("uniform stays in [0,1) and below(n) in range") {
        wpl::RngStream r(1, 1);
        for (int i = 0; i < 10000; ++i) {
            double u = r.uniform();
            CHECK(u >= 0.0);
            CHECK(u < 1.0);
            CHECK(r.below(7) < 7);
        }
    }
}

TEST_SUITE("matmul") {
    TEST_CASE("identity case") {
        auto eye = DTensor::from_data({2, 2}, {1, 0, 0, 1});
        auto m = DTensor::from_data({2, 2}, {1, 2, 3, 4});
        auto c = wpl::matmul(eye, m);
        CHECK(c.data() == std::vector<double>{1, 2, 3, 4});
    }

    TEST_CASE("hand arithmetic 1x2 by 2x1") {
        auto a = DTensor::from_data({1, 2}, {1, 2});
        auto b = DTensor::from_data({2, 1}, {3, 4});
        CHECK(wpl::matmul(a, b).item() == doctest::Approx(11.0));
    }

    TEST_CASE("shape mismatch names both shapes") {
        auto a = DTensor::zeros({2, 3});
        auto b = DTensor::zeros({2, 3});
        CHECK_THROWS_WITH_AS(wpl::matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
    }

    TEST_CASE("gradients vs central finite differences") {
        auto rng = test_rng(1);
        auto a = random_tensor({5, 4}, rng);
        auto b = random_tensor({4, 3}, rng);
        auto w = random_tensor({5, 3}, rng);
        double err = fd_max_rel_err({&a, &b}, [&] { return weighted_sum(wpl::matmul(a, b), w); });
        CHECK(err < 1e-4);
    }
}

TEST_SUITE("softmax_rows") {
    TEST_CASE("symmetry and overflow safety") {
        auto x = DTensor::from_data({2, 2}, {0, 0, 1000, 1000});
        auto y = wpl::softmax_rows(x);
        for (double v : y.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-9));
    }

    TEST_CASE("rows sum to one and shift invariance") {
        auto rng = test_rng(2);
        auto x = random_tensor({6, 9}, rng, 3.0);
        auto y = wpl::softmax_rows(x);
        for (int r = 0; r < 6; ++r) {
            double s = 0;
            for (int c = 0; c < 9; ++c) s += y.data()[size_t(r) * 9 + c];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
        auto shifted = x;
        auto xs = shifted.mutable_data();
        auto x2 = DTensor::from_data(x.shape(), x.data());
        for (int r = 0; r < 6; ++r)
            for (int c = 0; c < 9; ++c) x2.mutable_data()[size_t(r) * 9 + c] += 17.25;
        auto y2 = wpl::softmax_rows(x2);
        for (size_t i = 0; i < y.data().size(); ++i)
            CHECK(std::fabs(y.data()[i] - y2.data()[i]) <= 1e-6);
    }

    TEST_CASE("NaN input raises numeric error") {
        auto x = DTensor::from_data({1, 2}, {0.0, std::nan("")});
        CHECK_THROWS_AS(wpl::softmax_rows(x), wpl::NumericError);
    }

    TEST_CASE("gradient vs finite differences") {
        auto rng = test_rng(3);
        auto x = random_tensor({4, 7}, rng);
        auto w = random_tensor({4, 7}, rng);
        double err = fd_max_rel_err({&x}, [&] { return weighted_sum(wpl::softmax_rows(x), w); });
        CHECK(err < 1e-4);
    }
}

TEST_SUITE("layer_norm") {
    TEST_CASE("constant vector maps to zeros before affine") {
        auto x = DTensor::from_data({1, 4}, {3, 3, 3, 3});
        auto g = DTensor::filled({4}, 1.0);
        auto b = DTensor::zeros({4});
        auto y = wpl::layer_norm(x, g, b);
        for (double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
    }

    TEST_CASE("two-point standardization") {
        auto x = DTensor::from_data({1, 2}, {1, 3});
        auto g = DTensor::filled({2}, 1.0);
        auto b = DTensor::zeros({2});
        auto y = wpl::layer_norm(x, g, b);
        CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
        CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-4));
    }

    TEST_CASE("pre-affine rows have mean 0 variance 1") {
        auto rng = test_rng(4);
        auto x = random_tensor({5, 32}, rng, 2.0);
        auto g = DTensor::filled({32}, 1.0);
        auto b = DTensor::zeros({32});
        auto y = wpl::layer_norm(x, g, b);
        for (int r = 0; r < 5; ++r) {
            double mean = 0, var = 0;
            for (int c = 0; c < 32; ++c) mean += y.data()[size_t(r) * 32 + c];
            mean /= 32;
            for (int c = 0; c < 32; ++c) {
                double d = y.data()[size_t(r) * 32 + c] - mean;
                var += d * d;
            }
            var /= 32;
            CHECK(std::fabs(mean) < 1e-5);
            CHECK(std::fabs(var - 1.0) < 1e-3);
        }
    }

    TEST_CASE("gradient vs finite differences incl. affine") {
        auto rng = test_rng(5);
        auto x = random_tensor({3, 8}, rng);
        auto g = random_tensor({8}, rng);
        auto b = random_tensor({8}, rng);
        auto w = random_tensor({3, 8}, rng);
        double err = fd_max_rel_err({&x, &g, &b}, [&] { return weighted_sum(wpl::layer_norm(x, g, b), w); });
        CHECK(err < 1e-4);
    }
}

TEST_SUITE("elementwise and structural ops") {
    TEST_CASE("gradients vs finite differences on 10 random shapes") {
        auto rng = test_rng(6);
        for (int trial = 0; trial < 10; ++trial) {
            int r = 1 + int(rng.below(5));
            int c = 1 + int(rng.below(6));
            auto a = random_tensor({r, c}, rng);
            auto b = random_tensor({r, c}, rng);
            auto w = random_tensor({r, c}, rng);
            double err = fd_max_rel_err({&a, &b}, [&] {
                auto s = wpl::add(wpl::mul(a, b), wpl::scale(wpl::sub(a, b), 0.5));
                return weighted_sum(wpl::gelu(s), w);
            });
            CAPTURE(trial);
            CHECK(err < 1e-4);
        }
    }

    TEST_CASE("broadcast helpers match finite differences") {
        auto rng = test_rng(7);
        auto x = random_tensor({4, 6}, rng);
        auto bias = random_tensor({6}, rng);
        auto gain = random_tensor({6}, rng);
        auto rows = random_tensor({4}, rng);
        auto w = random_tensor({4, 6}, rng);
        double err = fd_max_rel_err({&x, &bias, &gain, &rows}, [&] {
            return weighted_sum(wpl::scale_rows(wpl::mul_channels(wpl::add_bias(x, bias), gain), rows), w);
        });
        CHECK(err < 1e-4);
    }

    TEST_CASE("reshape transpose concat slice gradients") {
        auto rng = test_rng(8);
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({3, 2}, rng);
        auto w = random_tensor({2, 9}, rng);
        double err = fd_max_rel_err({&a, &b}, [&] {
            auto cat = wpl::concat(1, std::vector<DTensor>{a, b});          // 3x6
            auto tr = wpl::transpose(cat);                                   // 6x3
            auto sl = wpl::slice(tr, 0, 1, 4);                               // 3x3
            auto rs = wpl::reshape(wpl::concat(0, std::vector<DTensor>{sl, sl}), {2, 9});
            return weighted_sum(rs, w);
        });
        CHECK(err < 1e-4);
    }

    TEST_CASE("slice and concat round out exact values") {
        auto a = DTensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
        auto top = wpl::slice(a, 0, 0, 1);
        CHECK(top.data() == std::vector<double>{1, 2, 3});
        auto cols = wpl::slice(a, 1, 1, 3);
        CHECK(cols.data() == std::vector<double>{2, 3, 5, 6});
        auto back = wpl::concat(1, std::vector<DTensor>{wpl::slice(a, 1, 0, 1), cols});
        CHECK(back.data() == a.data());
    }

    TEST_CASE("embedding lookup and scatter gradient") {
        auto rng = test_rng(9);
        auto table = random_tensor({5, 3}, rng);
        auto w = random_tensor({4, 3}, rng);
        std::vector<int> ids{2, 0, 2, 4};
        double err = fd_max_rel_err({&table}, [&] { return weighted_sum(wpl::embedding(table, ids), w); });
        CHECK(err < 1e-4);

        table.zero_grad();
        auto ones = DTensor::filled({4, 3}, 1.0);
        wpl::sum_all(wpl::mul(wpl::embedding(table, ids), ones)).backward();
        // row 2 hit twice, rows 1 and 3 never
        CHECK(table.grad()[size_t(2) * 3] == doctest::Approx(2.0));
        CHECK(table.grad()[size_t(1) * 3] == doctest::Approx(0.0));
        CHECK_THROWS_AS(wpl::embedding(table, std::vector<int>{5}), std::invalid_argument);
    }

    TEST_CASE("reductions") {
        auto x = DTensor::from_data({2, 2}, {1, 2, 3, 4});
        CHECK(wpl::sum_all(x).item() == doctest::Approx(10.0));
        CHECK(wpl::mean_all(x).item() == doctest::Approx(2.5));
    }
}

TEST_SUITE("attention op") {
    TEST_CASE("fused attention matches composed ops") {
        auto rng = test_rng(10);
        const int T = 6, D = 8, H = 2, hd = D / H;
        auto q = random_tensor({T, D}, rng);
        auto k = random_tensor({T, D}, rng);
        auto v = random_tensor({T, D}, rng);
        auto fused = wpl::multi_head_attention(q, k, v, H);
        std::vector<DTensor> outs;
        for (int h = 0; h < H; ++h) {
            auto qh = wpl::slice(q, 1, h * hd, (h + 1) * hd);
            auto kh = wpl::slice(k, 1, h * hd, (h + 1) * hd);
            auto vh = wpl::slice(v, 1, h * hd, (h + 1) * hd);
            auto p = wpl::softmax_rows(wpl::scale(wpl::matmul(qh, wpl::transpose(kh)), 1.0 / std::sqrt(double(hd))));
            outs.push_back(wpl::matmul(p, vh));
        }
        auto composed = wpl::concat(1, outs);
        for (size_t i = 0; i < fused.data().size(); ++i)
            CHECK(fused.data()[i] == doctest::Approx(composed.data()[i]).epsilon(1e-10));
    }

    TEST_CASE("fused attention gradient vs finite differences") {
        auto rng = test_rng(11);
        const int T = 5, D = 6;
        auto q = random_tensor({T, D}, rng);
        auto k = random_tensor({T, D}, rng);
        auto v = random_tensor({T, D}, rng);
        auto w = random_tensor({T, D}, rng);
        double err = fd_max_rel_err({&q, &k, &v}, [&] { return weighted_sum(wpl::multi_head_attention(q, k, v, 3), w); });
        CHECK(err < 1e-4);
    }

    TEST_CASE("recorded rows are probability distributions") {
        auto rng = test_rng(12);
        auto q = random_tensor({7, 8}, rng);
        std::vector<std::vector<double>> rec;
        wpl::multi_head_attention(q, q, q, 4, &rec);
        CHECK(rec.size() == 4);
        for (auto& headrows : rec) {
            REQUIRE(headrows.size() == 49);
            for (int r = 0; r < 7; ++r) {
                double s = 0;
                for (int c = 0; c < 7; ++c) {
                    CHECK(headrows[size_t(r) * 7 + c] >= 0.0);
                    s += headrows[size_t(r) * 7 + c];
                }
                CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
            }
        }
    }
}

TEST_SUITE("graph") {
    TEST_CASE("composed graph matches finite differences") {
        auto rng = test_rng(13);
        auto a = random_tensor({4, 5}, rng);
        auto b = random_tensor({5, 4}, rng);
        auto g = random_tensor({4}, rng);
        auto bias = random_tensor({4}, rng);
        double err = fd_max_rel_err({&a, &b, &g, &bias}, [&] {
            auto h = wpl::gelu(wpl::matmul(a, b));
            auto n = wpl::layer_norm(h, g, bias);
            auto p = wpl::softmax_rows(n);
            return wpl::mean_all(wpl::mul(p, h));
        });
        CHECK(err < 1e-4);
    }

    TEST_CASE("backward accumulates across calls") {
        auto x = DTensor::from_data({2}, {1, 2});
        x.set_requires_grad(true);
        wpl::sum_all(x).backward();
        wpl::sum_all(x).backward();
        CHECK(x.grad() == std::vector<double>{2, 2});
        x.zero_grad();
        wpl::sum_all(x).backward();
        CHECK(x.grad() == std::vector<double>{1, 1});
    }

    TEST_CASE("grad sink leaves persistent grads untouched") {
        auto x = DTensor::from_data({3}, {1, 2, 3});
        x.set_requires_grad(true);
        wpl::GradSink<double> sink;
        wpl::sum_all(wpl::mul(x, x)).backward(&sink);
        CHECK_FALSE(x.has_grad());
        auto& g = sink.at(x.node());
        CHECK(g == std::vector<double>{2, 4, 6});
    }

    TEST_CASE("no-grad guard suppresses taping") {
        auto x = DTensor::from_data({2}, {1, 2});
        x.set_requires_grad(true);
        wpl::NoGradGuard guard;
        auto y = wpl::sum_all(x);
        CHECK_FALSE(y.requires_grad());
    }

    TEST_CASE("backward requires scalar root") {
        auto x = DTensor::zeros({2, 2});
        x.set_requires_grad(true);
        auto y = wpl::scale(x, 2.0);
        CHECK_THROWS_AS(y.backward(), std::invalid_argument);
    }
}

TEST_SUITE("adamw") {
    TEST_CASE("hand-evaluated first step") {
        wpl::ParamRegistry<double> reg;
        auto& p = reg.add("theta", DTensor::from_data({1}, {1.0}));
        p.tensor.node()->grad = {0.5};
        wpl::AdamW<double> opt({5e-5, 0.9, 0.999, 0.0, 0.01});
        opt.step(reg);
        CHECK(p.tensor.data()[0] == doctest::Approx(0.9999495).epsilon(1e-12));
    }

    TEST_CASE("zero grad and zero decay is a fixed point") {
        wpl::ParamRegistry<double> reg;
        auto& p = reg.add("w", DTensor::from_data({3}, {1, -2, 3}));
        p.tensor.node()->grad = {0, 0, 0};
        wpl::AdamW<double> opt({1e-3, 0.9, 0.999, 1e-8, 0.0});
        for (int i = 0; i < 5; ++i) opt.step(reg);
        CHECK(p.tensor.data() == std::vector<double>{1, -2, 3});
    }

    TEST_CASE("frozen parameter with nonzero grad is untouched") {
        wpl::ParamRegistry<double> reg;
        auto& p = reg.add("frozen", DTensor::from_data({2}, {5, 6}));
        p.set_frozen(true);
        p.tensor.node()->grad = {1, 1};
        wpl::AdamW<double> opt({1e-2, 0.9, 0.999, 1e-8, 0.1});
        opt.step(reg);
        CHECK(p.tensor.data() == std::vector<double>{5, 6});
    }

    TEST_CASE("frozen parameters receive no gradient from backward") {
        wpl::ParamRegistry<double> reg;
        auto& p = reg.add("w", DTensor::from_data({2}, {1, 2}));
        p.set_frozen(true);
        auto y = wpl::sum_all(p.tensor);
        CHECK_FALSE(y.requires_grad());
        wpl::ParamRegistry<double> reg2;
        CHECK_THROWS_AS(reg.add("w", DTensor::zeros({1})), std::invalid_argument);
    }

    TEST_CASE("grad shape mismatch is rejected") {
        wpl::ParamRegistry<double> reg;
        auto& p = reg.add("w", DTensor::from_data({2}, {1, 2}));
        p.tensor.node()->grad = {1.0};
        wpl::AdamW<double> opt;
        CHECK_THROWS_AS(opt.step(reg), std::invalid_argument);
    }
}
