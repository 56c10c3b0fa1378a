#include <gtest/gtest.h>

#include <filesystem>

#include "decoy/checkpoint.hpp"
#include "decoy/sampler.hpp"
#include "decoy/training.hpp"

using namespace decoy;

namespace {

Tensor<float> random_image(std::uint64_t seed) {
    Rng rng = make_rng(seed, 0x1316);
    return rand_uniform<float>({kImageSide, kImageSide, kImageChannels}, rng, 0.0f, 1.0f);
}

Tensor<float> ones_mask() { return Tensor<float>::full({kImageSide, kImageSide}, 1.0f); }

/// Small model so sampler tests stay fast; marked trained for the sampler's sake.
Model<float> small_model() {
    ModelConfig mc;
    mc.predictor.width = 16;
    mc.seed = 5;
    auto m = init_model<float>(mc);
    m.trained = true;
    return m;
}

/// Straight transcription of the guided DDIM loop with both passes always run.
Tensor<float> reference_sample(const Model<float>& m, const Tensor<float>& x, const Tensor<float>& mask,
                               const std::string& prompt, const SamplerConfig& cfg) {
    NoGrad<float> off;
    const auto grid = timestep_grid(m.schedule.steps, cfg.inference_steps);
    const std::size_t run = steps_for_strength(cfg.strength, cfg.inference_steps);
    Rng rng = make_rng(cfg.seed, 0x5A3D);
    Tensor<float> z = randn<float>({kLatentTokens, kLatentChannels}, rng);
    if (run < cfg.inference_steps) z = q_sample(m.schedule, m.codec.encode(x), grid[run - 1], z);
    const auto ec = m.embed(prompt), eu = m.embed("");
    const float w = static_cast<float>(cfg.cfg_scale);
    for (std::size_t i = run; i-- > 0;) {
        const auto ctx = make_inpaint_context<float>(m.codec, x, mask, nullptr, z);
        const auto c = predict_noise(m.predictor, ctx.input(), grid[i], ec).eps;
        const auto u = predict_noise(m.predictor, ctx.input(), grid[i], eu).eps;
        std::vector<float> eps(c.numel());
        for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = (1 + w) * c[k] - w * u[k];
        const double ab = m.schedule.alpha_bar(grid[i]), ap = m.schedule.alpha_bar(i ? grid[i - 1] : 0);
        std::vector<float> next(z.numel());
        for (std::size_t k = 0; k < next.size(); ++k) {
            const float x0 = (z[k] - eps[k] * static_cast<float>(std::sqrt(1 - ab))) * static_cast<float>(1 / std::sqrt(ab));
            next[k] = x0 * static_cast<float>(std::sqrt(ap)) + eps[k] * static_cast<float>(std::sqrt(1 - ap));
        }
        z = Tensor<float>(z.shape(), std::move(next));
    }
    const auto gen = m.codec.decode(z);
    std::vector<float> px(x.numel());
    for (std::size_t p = 0; p < 256; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            px[p * 3 + c] = mask[p] >= 0.5f ? x[p * 3 + c] : std::clamp(gen[p * 3 + c], 0.0f, 1.0f);
    return Tensor<float>(x.shape(), std::move(px));
}

}  // namespace

TEST(Schedule, BetasIncreasingAndTerminalAlphaBarSmall) {
    const auto s = NoiseSchedule::linear();
    ASSERT_EQ(s.betas.size(), 100u);
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        EXPECT_GT(s.betas[i], 0.0);
        EXPECT_LT(s.betas[i], 1.0);
        if (i) { EXPECT_GT(s.betas[i], s.betas[i - 1]); }
    }
    EXPECT_LT(s.alpha_bar(100), 0.01);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_THROW(NoiseSchedule::linear(100, 0.1, 0.01), ConfigError);
}

TEST(QSample, FirstStepStaysNearClean) {
    const auto s = NoiseSchedule::linear();
    Rng rng = make_rng(1);
    const auto z0 = randn<float>({64, 8}, rng), eps = randn<float>({64, 8}, rng);
    const auto z1 = q_sample(s, z0, 1, eps);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < z0.numel(); ++i) {
        num += std::pow(z1[i] - z0[i], 2);
        den += std::pow(z0[i], 2);
    }
    EXPECT_LT(std::sqrt(num / den), 0.02);
}

TEST(QSample, TimestepOutOfRangeRejected) {
    const auto s = NoiseSchedule::linear();
    const auto z = Tensor<float>::zeros({64, 8});
    EXPECT_THROW(q_sample(s, z, 0, z), ConfigError);
    EXPECT_THROW(q_sample(s, z, 101, z), ConfigError);
}

TEST(QSample, TerminalStepDecorrelatesFromClean) {
    const auto s = NoiseSchedule::linear();
    Rng rng = make_rng(2);
    const auto z0 = randn<double>({64, 8}, rng);
    double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0;
    std::size_t n = 0;
    for (int d = 0; d < 1000; ++d) {
        const auto zt = q_sample(s, z0, 100, randn<double>({64, 8}, rng));
        for (std::size_t i = 0; i < z0.numel(); ++i, ++n) {
            sx += z0[i];
            sy += zt[i];
            sxy += z0[i] * zt[i];
            sxx += z0[i] * z0[i];
            syy += zt[i] * zt[i];
        }
    }
    const double N = static_cast<double>(n);
    const double cov = sxy / N - sx / N * sy / N;
    const double corr = cov / std::sqrt((sxx / N - std::pow(sx / N, 2)) * (syy / N - std::pow(sy / N, 2)));
    EXPECT_LT(std::abs(corr), 0.15);
}

TEST(QSample, MonteCarloMomentsMatchClosedForm) {
    const auto s = NoiseSchedule::linear();
    Rng rng = make_rng(3);
    const auto z0 = randn<double>({64, 8}, rng);
    for (std::size_t t : {5u, 50u, 95u}) {
        const double ab = s.alpha_bar(t);
        const int draws = 10000;
        std::vector<double> sum(8, 0), sq(8, 0);
        for (int d = 0; d < draws; ++d) {
            const auto zt = q_sample(s, z0, t, randn<double>({64, 8}, rng));
            for (std::size_t k = 0; k < 8; ++k) {
                sum[k] += zt[k];
                sq[k] += zt[k] * zt[k];
            }
        }
        const double var = 1 - ab;
        for (std::size_t k = 0; k < 8; ++k) {
            const double mean = sum[k] / draws, v = sq[k] / draws - mean * mean;
            EXPECT_LT(std::abs(mean - std::sqrt(ab) * z0[k]), 3 * std::sqrt(var / draws)) << t << " " << k;
            // Var of the sample variance of a Gaussian is 2 sigma^4 / n.
            EXPECT_LT(std::abs(v - var), 3 * std::sqrt(2 * var * var / draws)) << t << " " << k;
        }
    }
}

TEST(Codec, ProjectionIdempotentAndLinear) {
    for (double gain : {1.0, 7.0}) {
        const auto c = LatentCodec<float>::make(17, gain);
        const auto x = random_image(4), y = random_image(5);
        const auto z = c.encode(x);
        EXPECT_LT(max_abs_diff(c.encode(c.decode(z)), z), 1e-5f);
        const auto sum = c.encode(ops::add(x, ops::scale(y, 2.0f)));
        EXPECT_LT(max_abs_diff(sum, ops::add(z, ops::scale(c.encode(y), 2.0f))), 1e-5f);
    }
}

TEST(Codec, FlatColoursRoundTrip) {
    const auto c = LatentCodec<float>::make(17, 7.0);
    const auto flat = Tensor<float>::full({kImageSide, kImageSide, kImageChannels}, 0.25f);
    EXPECT_LT(max_abs_diff(c.decode(c.encode(flat)), flat), 1e-6f);
}

TEST(Context, MaskExtremesAndChannelOrder) {
    const auto codec = LatentCodec<float>::make(17);
    const auto x = random_image(6);
    Rng rng = make_rng(6);
    const auto zt = randn<float>({64, 8}, rng);
    const auto keep = make_inpaint_context<float>(codec, x, ones_mask(), nullptr, zt);
    EXPECT_TRUE(bit_equal(keep.z0_masked, codec.encode(x)));
    const auto none = make_inpaint_context<float>(codec, x, Tensor<float>::zeros({16, 16}), nullptr, zt);
    EXPECT_TRUE(bit_equal(none.z0_masked, codec.encode(Tensor<float>::zeros({16, 16, 3}))));
    const auto in = keep.input();
    ASSERT_EQ(in.shape(), (Shape{64, 17}));
    for (std::size_t r = 0; r < 64; ++r) {
        for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(in.at(r, c), zt.at(r, c));
        EXPECT_EQ(in.at(r, 8), 1.0f);
        for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(in.at(r, 9 + c), keep.z0_masked.at(r, c));
    }
}

TEST(Context, CheckerboardTiesKeep) {
    std::vector<float> m(256);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) m[y * 16 + x] = static_cast<float>((x + y) % 2);
    const auto mp = downsample_mask(Tensor<float>({16, 16}, m));
    for (float v : mp) EXPECT_EQ(v, 1.0f);
}

TEST(Context, PyramidLevelsMatchResolutions) {
    std::vector<float> mp(64);
    Rng rng = make_rng(7);
    for (auto& v : mp) v = static_cast<float>(uniform_int(rng, 0, 1));
    const auto pyr = mask_pyramid(mp);
    for (const auto& id : list_cross_attention_layers(PredictorConfig{})) {
        ASSERT_TRUE(pyr.count(id.resolution));
        EXPECT_EQ(pyr.at(id.resolution).size(), id.resolution);
        for (float v : pyr.at(id.resolution)) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(Context, PerturbationReachesOnlyMaskedLatentChannels) {
    const auto codec = LatentCodec<double>::make(17);
    const auto x = random_image(8).cast<double>();
    std::vector<double> m(256, 1.0);
    for (std::size_t i = 0; i < 64; ++i) m[i] = 0.0;
    const Tensor<double> mask({16, 16}, m);
    Rng rng = make_rng(8);
    const auto zt = randn<double>({64, 8}, rng);
    const auto delta = Tensor<double>::full({16, 16, 3}, 0.01).with_grad();
    for (std::size_t ch = 0; ch < 17; ++ch) {
        Tape<double> tape;
        Tensor<double> y;
        {
            Recording<double> rec(tape);
            const auto in = make_inpaint_context<double>(codec, x, mask, &delta, zt).input();
            y = ops::sum(ops::slice(in, 1, ch, ch + 1));
        }
        double g = 0;
        if (y.requires_grad()) {
            tape.backward(y);
            const auto gd = tape.grad(delta);
            for (double v : gd.data()) g += std::abs(v);
        }
        if (ch < 9) { EXPECT_EQ(g, 0.0) << ch; }
        // Rows 0-3 are masked out, so only the kept pixels carry gradient.
        if (ch >= 9 && ch < 12) { EXPECT_GT(g, 0.0) << ch; }
    }
    EXPECT_THROW(make_inpaint_context<double>(codec, x, mask, nullptr, Tensor<double>::zeros({64, 7})), ShapeError);
}

TEST(Sampler, GridAndStrengthRounding) {
    EXPECT_EQ(timestep_grid(100, 25).front(), 4u);
    EXPECT_EQ(timestep_grid(100, 25).back(), 100u);
    EXPECT_EQ(timestep_grid(100, 100).front(), 1u);
    EXPECT_EQ(steps_for_strength(1.0, 25), 25u);
    EXPECT_EQ(steps_for_strength(0.9, 25), 23u);  // 22.5 rounds up
    EXPECT_EQ(steps_for_strength(0.8, 10), 8u);
    EXPECT_EQ(steps_for_strength(0.01, 10), 1u);
}

TEST(Sampler, InvalidConfigRejected) {
    auto m = small_model();
    SamplerConfig bad;
    bad.inference_steps = 0;
    EXPECT_THROW(sample_inpaint(m, random_image(1), ones_mask(), m.tokens(""), bad), ConfigError);
    bad = {};
    bad.cfg_scale = -1;
    EXPECT_THROW(bad.validate(100), ConfigError);
    bad = {};
    bad.strength = 0;
    EXPECT_THROW(bad.validate(100), ConfigError);
}

TEST(Sampler, MatchesTwoPassReferenceIncludingZeroGuidance) {
    auto m = small_model();
    const auto x = random_image(9);
    std::vector<float> mv(256, 1.0f);
    for (std::size_t y = 4; y < 12; ++y)
        for (std::size_t c = 4; c < 12; ++c) mv[y * 16 + c] = 0.0f;
    const Tensor<float> mask({16, 16}, mv);
    for (double w : {0.0, 7.5})
        for (double s : {1.0, 0.6}) {
            SamplerConfig sc;
            sc.inference_steps = 5;
            sc.cfg_scale = w;
            sc.strength = s;
            sc.seed = 11;
            const auto got = sample_inpaint(m, x, mask, m.tokens("a red circle"), sc).image;
            EXPECT_TRUE(bit_equal(got, reference_sample(m, x, mask, "a red circle", sc))) << w << " " << s;
        }
}

TEST(Sampler, AllKeepMaskReturnsInput) {
    auto m = small_model();
    const auto x = random_image(10);
    SamplerConfig sc;
    sc.inference_steps = 3;
    EXPECT_TRUE(bit_equal(sample_inpaint(m, x, ones_mask(), m.tokens("a blue square"), sc).image, x));
}

TEST(Sampler, FullStrengthIgnoresMaskedPixels) {
    auto m = small_model();
    auto x = random_image(12);
    std::vector<float> mv(256, 1.0f), alt(x.data().begin(), x.data().end());
    for (std::size_t y = 2; y < 9; ++y)
        for (std::size_t c = 3; c < 10; ++c) {
            mv[y * 16 + c] = 0.0f;
            for (std::size_t k = 0; k < 3; ++k) alt[(y * 16 + c) * 3 + k] = 1.0f - alt[(y * 16 + c) * 3 + k];
        }
    const Tensor<float> mask({16, 16}, mv);
    SamplerConfig sc;
    sc.inference_steps = 4;
    const auto a = sample_inpaint(m, x, mask, m.tokens("a red circle"), sc).image;
    const auto b = sample_inpaint(m, Tensor<float>(x.shape(), alt), mask, m.tokens("a red circle"), sc).image;
    for (std::size_t p = 0; p < 256; ++p)
        if (mv[p] == 0.0f)
            for (std::size_t k = 0; k < 3; ++k) { EXPECT_EQ(a[p * 3 + k], b[p * 3 + k]); }
}

TEST(Sampler, TracesComeFromConditionalPassesOnly) {
    auto m = small_model();
    SamplerConfig sc;
    sc.inference_steps = 4;
    const auto res = sample_inpaint(m, random_image(13), ones_mask(), m.tokens("a red circle"), sc, true);
    ASSERT_EQ(res.traces.size(), 4u);
    for (const auto& t : res.traces) EXPECT_EQ(t.layers.size(), 5u);
}

TEST(Guidance, AffineInScale) {
    Rng rng = make_rng(14);
    const auto c = randn<float>({64, 8}, rng), u = randn<float>({64, 8}, rng);
    for (auto [w1, w2] : {std::pair{0.0f, 7.5f}, {5.0f, 15.0f}, {2.5f, 12.5f}}) {
        const auto lhs = ops::add(guided_noise(c, u, w1), guided_noise(c, u, w2));
        const auto rhs = ops::scale(guided_noise(c, u, (w1 + w2) / 2), 2.0f);
        EXPECT_LT(max_abs_diff(lhs, rhs), 1e-5f);
    }
    EXPECT_TRUE(bit_equal(guided_noise(c, u, 0.0f), c));
}

TEST(Training, ZeroStepsKeepsInitialWeights) {
    ModelConfig mc;
    mc.predictor.width = 16;
    auto m = init_model<float>(mc);
    const auto before = model_hash(m);
    TrainConfig tc;
    tc.steps = 0;
    const auto rep = train(m, tc);
    EXPECT_TRUE(rep.loss.empty());
    m.trained = false;
    EXPECT_EQ(model_hash(m), before);
}

TEST(Training, InitialLossNearUnitVariance) {
    auto m = init_model<float>(ModelConfig{});
    TrainConfig tc;
    tc.steps = 1;
    const auto rep = train(m, tc);
    ASSERT_EQ(rep.loss.size(), 1u);
    EXPECT_GE(rep.loss[0], 0.5);
    EXPECT_LE(rep.loss[0], 1.5);
}

TEST(Training, SeededRunsAreBitIdentical) {
    auto run = [] {
        ModelConfig mc;
        mc.predictor.width = 16;
        auto m = init_model<float>(mc);
        TrainConfig tc;
        tc.steps = 2;
        tc.batch = 2;
        train(m, tc);
        return model_hash(m);
    };
    EXPECT_EQ(run(), run());
}

TEST(Training, DivergenceAborts) {
    ModelConfig mc;
    mc.predictor.width = 16;
    auto m = init_model<float>(mc);
    TrainConfig tc;
    tc.steps = 10;
    tc.batch = 1;
    tc.divergence_factor = 1e-3;  // every later step counts as diverged
    tc.divergence_window = 3;
    try {
        train(m, tc);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.step(), 2u);  // step 0 already counts toward the window
    }
}

TEST(Training, LearningRateWarmupAndFloor) {
    TrainConfig tc;
    tc.steps = 1000;
    EXPECT_NEAR(learning_rate(tc, 0), tc.lr / 200, 1e-12);
    EXPECT_NEAR(learning_rate(tc, 199), tc.lr, 1e-12);
    EXPECT_NEAR(learning_rate(tc, 999), tc.lr * 0.1, 1e-6);
    for (std::size_t s = 200; s < 999; ++s) EXPECT_GE(learning_rate(tc, s), learning_rate(tc, s + 1));
}

TEST(Checkpoint, RoundTripAndTamperDetection) {
    auto m = small_model();
    const auto dir = std::filesystem::temp_directory_path() / "decoy_ckpt_test";
    std::filesystem::remove_all(dir);
    const auto hash = save_checkpoint(m, dir);
    const auto back = load_checkpoint(dir);
    EXPECT_EQ(model_hash(back), hash);
    EXPECT_TRUE(back.trained);
    EXPECT_EQ(back.vocab.tokens(), m.vocab.tokens());
    EXPECT_EQ(back.config.predictor.width, 16u);

    Rng rng = make_rng(1);
    tnsr::save((dir / tensor_file_name("enc.lnf_g")).string(), randn<float>({32}, rng));
    EXPECT_THROW(load_checkpoint(dir), ConfigError);
    tnsr::save((dir / tensor_file_name("enc.lnf_g")).string(), randn<float>({31}, rng));
    EXPECT_THROW(load_checkpoint(dir), ConfigError);
    EXPECT_THROW(load_checkpoint(dir / "missing"), ConfigError);
    std::filesystem::remove_all(dir);
}
