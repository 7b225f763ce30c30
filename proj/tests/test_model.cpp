#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <memory>

#include "gtfmn/model.hpp"
#include "test_helpers.hpp"

using namespace gtfmn;
using gtfmn::testing::check_gradients;
using gtfmn::testing::close;

namespace {

GtfmnConfig tiny_config(std::size_t c = 4, std::size_t n = 1, std::size_t s = 2) {
    GtfmnConfig cfg;
    cfg.scale = s;
    cfg.channels = c;
    cfg.num_blocks = n;
    return cfg;
}

// Independent per-layer audit: enumerate every expected parameter shape
// straight from the config and sum the products.
std::size_t audit_parameter_count(const GtfmnConfig& cfg) {
    std::size_t total = 0;
    auto conv = [&](std::size_t cout, std::size_t cin_per_group, std::size_t k) {
        total += cout * cin_per_group * k * k + cout;
    };
    const std::size_t C = cfg.channels;
    if (cfg.use_illumination_stream) {
        conv(C, 3, 3);
        conv(C, C, 3);
        conv(C, C, 3);
        conv(1, C, 3);                                   // structure decoder
        const std::size_t hidden = std::max<std::size_t>(1, C / 2);
        conv(hidden, C, 1);                              // global predictor
        conv(1, hidden, 1);
    }
    conv(C, 3, 3);                                       // texture head
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        total += 2 * C;                                  // norm affine
        for (std::size_t k : cfg.msa_kernels) conv(C, 1, k);  // depthwise
        conv(C, C, 1);                                   // msa projection
        if (cfg.guided()) {
            conv(C, 1, 1);
            conv(C, C, 1);
        }
        conv(cfg.ffn_expansion * C, C, 1);
        conv(C, cfg.ffn_expansion * C, 1);
    }
    conv(3 * cfg.scale * cfg.scale, C, 3);               // reconstruction
    return total;
}

} // namespace

TEST_CASE("forward obeys the shape contract for both scales") {
    Rng rng(1);
    for (std::size_t s : {std::size_t{2}, std::size_t{4}}) {
        GtfmnModel<float> model(tiny_config(8, 2, s), 7);
        auto x = Tensor<float>::rand_uniform({1, 3, 24, 16}, rng);
        auto out = model.forward(x);
        CHECK(out.sr.shape() == Shape{1, 3, 24 * s, 16 * s});
        CHECK(out.map.values.shape() == Shape{1, 1, 24, 16});
        for (std::size_t i = 0; i < out.map.values.numel(); ++i) {
            CHECK(out.map.values.data()[i] >= 0.f);
            CHECK(out.map.values.data()[i] <= 1.f);
        }
    }
}

TEST_CASE("forward rejects bad inputs with diagnostics") {
    GtfmnModel<float> model(tiny_config(), 7);
    CHECK_THROWS_AS(model.forward(Tensor<float>::ones({1, 1, 16, 16})), std::invalid_argument);
    // Smaller than the largest attention kernel (7).
    CHECK_THROWS_AS(model.forward(Tensor<float>::ones({1, 3, 6, 6})), std::invalid_argument);
}

TEST_CASE("forward is deterministic for fixed weights and input") {
    Rng rng(3);
    GtfmnModel<float> model(tiny_config(8, 2), 11);
    auto x = Tensor<float>::rand_uniform({2, 3, 16, 16}, rng);
    auto a = model.forward(x);
    auto b = model.forward(x);
    for (std::size_t i = 0; i < a.sr.numel(); ++i) {
        CHECK(a.sr.data()[i] == b.sr.data()[i]);
    }
    for (std::size_t i = 0; i < a.map.values.numel(); ++i) {
        CHECK(a.map.values.data()[i] == b.map.values.data()[i]);
    }
}

TEST_CASE("identical seeds build identical models") {
    GtfmnModel<float> a(tiny_config(8, 2), 5);
    GtfmnModel<float> b(tiny_config(8, 2), 5);
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        for (std::size_t k = 0; k < pa[i].tensor.numel(); ++k) {
            CHECK(pa[i].tensor.data()[k] == pb[i].tensor.data()[k]);
        }
    }
}

TEST_CASE("parameter count matches the independent per-layer audit") {
    SUBCASE("desk default") {
        GtfmnConfig cfg;  // C=32, N=4, s=2
        GtfmnModel<float> model(cfg, 0);
        CHECK(model.count_parameters() == audit_parameter_count(cfg));
    }
    SUBCASE("tiny, scale 4, no illumination") {
        GtfmnConfig cfg = tiny_config(6, 2, 4);
        cfg.use_illumination_stream = false;
        GtfmnModel<float> model(cfg, 0);
        CHECK(model.count_parameters() == audit_parameter_count(cfg));
    }
    SUBCASE("const1 guide keeps the adapter parameters") {
        GtfmnConfig cfg = tiny_config(6, 2);
        cfg.use_illumination_stream = false;
        cfg.guide_mode = GuideMode::kConst1;
        GtfmnModel<float> model(cfg, 0);
        CHECK(model.count_parameters() == audit_parameter_count(cfg));
    }
    SUBCASE("count grows superlinearly in width and monotonically in depth") {
        auto params_at = [](std::size_t c, std::size_t n) {
            return GtfmnModel<float>(tiny_config(c, n), 0).count_parameters();
        };
        CHECK(params_at(16, 2) > 2 * params_at(8, 2));   // quadratic conv terms
        CHECK(params_at(8, 4) > params_at(8, 2));
        CHECK(params_at(8, 2) == params_at(8, 2));       // pure function of config
    }
}

TEST_CASE("illumination map synthesis follows the normalization formula") {
    SUBCASE("uniform map at the fixed point") {
        auto ms = Tensor<double>::full({1, 1, 3, 3}, 0.5);
        auto g = Tensor<double>::full({1, 1, 1, 1}, 0.5);
        auto m = GtfmnModel<double>::synthesize_illumination_map(ms, g, 1e-12);
        for (std::size_t i = 0; i < m.numel(); ++i) CHECK(close(m.data()[i], 0.5, 0, 1e-9));
    }
    SUBCASE("two-pixel clamped example") {
        auto ms = Tensor<double>::from({0.2, 0.6}, {1, 1, 1, 2});
        auto g = Tensor<double>::full({1, 1, 1, 1}, 0.8);
        auto m = GtfmnModel<double>::synthesize_illumination_map(ms, g, 1e-15);
        CHECK(close(m.data()[0], 0.4, 0, 1e-9));
        CHECK(close(m.data()[1], 1.0, 0, 1e-9));
    }
    SUBCASE("all-zero spatial map stays zero through the stabilizer") {
        auto ms = Tensor<double>::zeros({1, 1, 4, 4});
        auto g = Tensor<double>::full({1, 1, 1, 1}, 0.9);
        auto m = GtfmnModel<double>::synthesize_illumination_map(ms, g, 1e-4);
        for (std::size_t i = 0; i < m.numel(); ++i) CHECK(m.data()[i] == 0.0);
    }
    SUBCASE("unclamped mean tracks the global intensity") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            auto ms = Tensor<double>::rand_uniform({1, 1, 8, 8}, rng, 0.4, 0.6);
            auto g = Tensor<double>::rand_uniform({1, 1, 1, 1}, rng, 0.05, 0.6);
            auto m = GtfmnModel<double>::synthesize_illumination_map(ms, g, 1e-4);
            double mean = 0;
            for (std::size_t i = 0; i < m.numel(); ++i) mean += m.data()[i];
            mean /= double(m.numel());
            CHECK(std::abs(mean - g.data()[0]) <= 2e-3);
        }
    }
}

TEST_CASE("zeroed block weights make each IGM block the identity") {
    GtfmnConfig cfg = tiny_config(4, 2);
    GtfmnModel<float> model(cfg, 23);
    // Zero every texture-block parameter including the norm affine.
    for (auto& p : model.named_parameters()) {
        if (p.name.find(".block") != std::string::npos) {
            std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.f);
        }
    }
    Rng rng(24);
    auto x = Tensor<float>::rand_uniform({1, 3, 12, 12}, rng);

    GtfmnTrace<float> trace;
    auto out = model.forward(x, &trace);
    CHECK(out.sr.all_finite());

    // With zeroed blocks the texture stream is head -> recon; compare
    // against a freshly built model with the same seed and the same zeroing,
    // but depth 1 vs 2 must now agree because each block is the identity.
    GtfmnConfig cfg1 = tiny_config(4, 1);
    GtfmnModel<float> one(cfg1, 23);
    auto src = model.named_parameters();
    for (auto& p : one.named_parameters()) {
        if (p.name.find(".block") != std::string::npos) {
            std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.f);
        } else {
            for (const auto& q : src) {
                if (q.name == p.name) p.tensor.values() = q.tensor.values();
            }
        }
    }
    auto out1 = one.forward(x);
    REQUIRE(out1.sr.shape() == out.sr.shape());
    for (std::size_t i = 0; i < out.sr.numel(); ++i) {
        CHECK(out.sr.data()[i] == doctest::Approx(out1.sr.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("attention fusion is additive and drops exactly the guide term") {
    GtfmnConfig cfg = tiny_config(4, 1);
    GtfmnModel<float> guided(cfg, 31);

    GtfmnConfig cfg_off = cfg;
    cfg_off.use_illumination_stream = false;
    GtfmnModel<float> unguided(cfg_off, 31);
    // Copy every shared (non-adapter, non-illum) weight from the guided model.
    auto src = guided.named_parameters();
    for (auto& p : unguided.named_parameters()) {
        for (const auto& q : src) {
            if (q.name == p.name) p.tensor.values() = q.tensor.values();
        }
    }

    Rng rng(32);
    auto x = Tensor<float>::rand_uniform({1, 3, 10, 10}, rng);
    GtfmnTrace<float> tg, tu;
    guided.forward(x, &tg);
    unguided.forward(x, &tu);

    REQUIRE(tg.a_final.size() == 1);
    REQUIRE(tu.a_final.size() == 1);
    // Same head weights and same input: the first block sees identical
    // features, so A_self agrees and A_final differs by exactly A_guide.
    for (std::size_t i = 0; i < tg.a_self[0].numel(); ++i) {
        CHECK(tu.a_self[0].data()[i] == doctest::Approx(tg.a_self[0].data()[i]).epsilon(1e-6));
        CHECK(tg.a_final[0].data()[i] ==
              doctest::Approx(tg.a_self[0].data()[i] + tg.a_guide[0].data()[i]).epsilon(1e-6));
        CHECK(tu.a_final[0].data()[i] == tu.a_self[0].data()[i]);
    }
}

TEST_CASE("guidance instrumentation counts map reads") {
    Rng rng(41);
    auto x = Tensor<float>::rand_uniform({1, 3, 10, 10}, rng);

    SUBCASE("guided model reads once per block per forward") {
        GtfmnModel<float> model(tiny_config(4, 3), 5);
        model.forward(x);
        model.forward(x);
        CHECK(model.guidance_read_count() == 6);
    }
    SUBCASE("drop variant never reads the map") {
        GtfmnConfig cfg = tiny_config(4, 3);
        cfg.use_illumination_stream = false;
        GtfmnModel<float> model(cfg, 5);
        model.forward(x);
        CHECK(model.guidance_read_count() == 0);
    }
    SUBCASE("const1 variant keeps reading the constant map") {
        GtfmnConfig cfg = tiny_config(4, 3);
        cfg.use_illumination_stream = false;
        cfg.guide_mode = GuideMode::kConst1;
        GtfmnModel<float> model(cfg, 5);
        auto out = model.forward(x);
        CHECK(model.guidance_read_count() == 3);
        // The reported map is the constant-one map.
        for (std::size_t i = 0; i < out.map.values.numel(); ++i) {
            CHECK(out.map.values.data()[i] == 1.f);
        }
    }
}

TEST_CASE("zeroed illumination heads emit the sigmoid midpoint") {
    GtfmnModel<float> model(tiny_config(8, 1), 3);
    for (auto& p : model.named_parameters()) {
        if (p.name.rfind("illum.struct_dec", 0) == 0 || p.name.rfind("illum.global", 0) == 0) {
            std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.f);
        }
    }
    Rng rng(4);
    auto x = Tensor<float>::rand_uniform({2, 3, 12, 12}, rng);
    GtfmnTrace<float> trace;
    model.forward(x, &trace);
    // Structure decoder with zero weights and bias: sigmoid(0) = 0.5 map.
    for (std::size_t i = 0; i < trace.m_spatial.numel(); ++i) {
        CHECK(trace.m_spatial.data()[i] == doctest::Approx(0.5f));
    }
    // Global predictor likewise collapses to g = 0.5 per sample.
    REQUIRE(trace.global_intensity.numel() == 2);
    CHECK(trace.global_intensity.data()[0] == doctest::Approx(0.5f));
    CHECK(trace.global_intensity.data()[1] == doctest::Approx(0.5f));
}

TEST_CASE("illumination stream produces bounded outputs") {
    Rng rng(51);
    GtfmnModel<float> model(tiny_config(8, 1), 77);
    auto x = Tensor<float>::rand_uniform({2, 3, 16, 16}, rng);
    GtfmnTrace<float> trace;
    model.forward(x, &trace);
    for (std::size_t i = 0; i < trace.m_spatial.numel(); ++i) {
        CHECK(trace.m_spatial.data()[i] >= 0.f);
        CHECK(trace.m_spatial.data()[i] <= 1.f);
    }
    CHECK(trace.global_intensity.shape() == Shape{2, 1, 1, 1});
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(trace.global_intensity.data()[i] >= 0.f);
        CHECK(trace.global_intensity.data()[i] <= 1.f);
    }
}

namespace {

// Distance of the pre-clamp map values from the saturation kink at 1. Finite
// differences are only valid where the function is locally smooth, so the
// probe point must stay clear of the clamp boundary.
double map_clamp_margin(const GtfmnTrace<double>& trace, double eps) {
    const auto& ms = trace.m_spatial;
    const std::size_t N = ms.extent(0);
    const std::size_t plane = ms.extent(2) * ms.extent(3);
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < N; ++n) {
        double mean = 0;
        for (std::size_t i = 0; i < plane; ++i) mean += ms.data()[n * plane + i];
        mean /= double(plane);
        const double g = trace.global_intensity.data()[n];
        for (std::size_t i = 0; i < plane; ++i) {
            const double pre = ms.data()[n * plane + i] / (mean + eps) * g;
            margin = std::min(margin, std::abs(pre - 1.0));
        }
    }
    return margin;
}

} // namespace

TEST_CASE("end-to-end gradients match finite differences on the tiny model") {
    // C=4, N=1, 8x8 input, 64-bit; every parameter group and the input.
    GtfmnConfig cfg = tiny_config(4, 1);
    cfg.msa_kernels = {3, 5, 7};

    // Pick the first seed whose forward keeps the map synthesis away from
    // the clamp kink; the L1 target is then offset from the prediction by a
    // tie-free margin, so the probe point is locally smooth.
    std::unique_ptr<GtfmnModel<double>> model;
    Tensor<double> x;
    for (std::uint64_t seed = 99; seed < 160; ++seed) {
        auto candidate = std::make_unique<GtfmnModel<double>>(cfg, seed);
        Rng rng(seed + 7);
        auto probe = Tensor<double>::rand_uniform({1, 3, 8, 8}, rng, 0.05, 0.95);
        GtfmnTrace<double> trace;
        candidate->forward(probe, &trace);
        if (map_clamp_margin(trace, cfg.epsilon) > 2e-2) {
            model = std::move(candidate);
            x = probe;
            break;
        }
    }
    REQUIRE(model != nullptr);

    Rng trng(555);
    auto pred = model->forward(x).sr;
    auto target = Tensor<double>::zeros(pred.shape());
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const double offset = trng.uniform(0.05, 0.15) * (trng.below(2) ? 1.0 : -1.0);
        target.data()[i] = pred.data()[i] + offset;
    }

    std::vector<Tensor<double>> leaves;
    leaves.push_back(x);
    for (auto& p : model->named_parameters()) leaves.push_back(p.tensor);

    check_gradients(leaves, [&] {
        auto out = model->forward(x);
        return l1_loss(out.sr, target);
    });

    // Guidance actually flows: some parameter of the illumination stream
    // must carry nonzero gradient.
    double illum_grad_norm = 0;
    for (auto& p : model->named_parameters()) {
        if (p.name.rfind("illum.", 0) == 0) {
            for (double g : p.tensor.grad()) illum_grad_norm += g * g;
        }
    }
    CHECK(illum_grad_norm > 0.0);
}

TEST_CASE("IGM block output shape, map mismatch rejection and map gradient") {
    GtfmnConfig cfg = tiny_config(4, 1);
    GtfmnModel<double> model(cfg, 7);
    Rng rng(8);
    auto f_in = Tensor<double>::rand_uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
    auto map = Tensor<double>::rand_uniform({1, 1, 4, 4}, rng, 0.1, 0.9);

    auto out = model.igm_block_forward(0, f_in, map);
    CHECK(out.shape() == f_in.shape());

    CHECK_THROWS_AS(model.igm_block_forward(0, f_in, Tensor<double>::ones({1, 1, 3, 4})),
                    std::invalid_argument);

    // Guidance actually flows: d(output)/d(M) is nonzero for generic random
    // weights, cross-checked against finite differences on a 1x4x4x4 probe.
    auto wgt = Tensor<double>::rand_uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
    check_gradients({map, f_in}, [&] {
        return sum(mul(model.igm_block_forward(0, f_in, map), wgt));
    });
    double map_grad_norm = 0;
    for (double g : map.grad()) map_grad_norm += g * g;
    CHECK(map_grad_norm > 0.0);
}

TEST_CASE("checkpoint save/load reproduces forward outputs bit-exactly") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "gtfmn_test_ckpt.bin").string();

    GtfmnConfig cfg = tiny_config(6, 2);
    GtfmnModel<float> model(cfg, 13);
    Rng rng(14);
    auto probe = Tensor<float>::rand_uniform({1, 3, 12, 12}, rng);
    auto before = model.forward(probe);

    save_checkpoint(path, model);
    GtfmnModel<float> loaded = load_checkpoint<float>(path);
    CHECK(loaded.config() == cfg);
    auto after = loaded.forward(probe);

    for (std::size_t i = 0; i < before.sr.numel(); ++i) {
        CHECK(before.sr.data()[i] == after.sr.data()[i]);  // bit-exact
    }
    for (std::size_t i = 0; i < before.map.values.numel(); ++i) {
        CHECK(before.map.values.data()[i] == after.map.values.data()[i]);
    }
    fs::remove(path);
}

TEST_CASE("checkpoint loading rejects mismatches") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "gtfmn_test_ckpt2.bin").string();
    GtfmnModel<float> model(tiny_config(4, 1), 3);
    save_checkpoint(path, model);
    CHECK_THROWS_AS(load_checkpoint<double>(path), std::runtime_error);  // dtype mismatch
    fs::remove(path);
}

TEST_CASE("config validation rejects out-of-range values") {
    GtfmnConfig cfg;
    cfg.scale = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = GtfmnConfig{};
    cfg.epsilon = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = GtfmnConfig{};
    cfg.msa_kernels = {4};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = GtfmnConfig{};
    cfg.num_blocks = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
