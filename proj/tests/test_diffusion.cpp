#include <cmath>

#include "doctest.h"
#include "s2rd/diffusion.hpp"

using namespace s2rd;

namespace {

UNetModel tiny_unet(Rng& rng, int d_cond = 8) {
    UNetConfig cfg;
    cfg.width0 = 16;
    cfg.width1 = 24;
    cfg.groups = 4;
    cfg.res_blocks = 1;
    cfg.d_cond = d_cond;
    cfg.time_dim = 8;
    cfg.time_mlp = 16;
    UNetModel u;
    u.init(cfg, rng);
    return u;
}

}  // namespace

TEST_CASE("linear schedule invariants and pinned values") {
    auto s = NoiseSchedule::make_linear(1000, 1e-4, 0.02);
    CHECK(s.alpha_bar[0] == 1.0f);
    CHECK(s.alpha_bar[1] == doctest::Approx(0.9999).epsilon(1e-7));
    CHECK(s.alpha_bar[1000] < 0.01f);
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.beta[t] > 0.0f);
        CHECK(s.beta[t] < 1.0f);
        if (t > 1) CHECK(s.beta[t] >= s.beta[t - 1]);
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }

    auto s1 = NoiseSchedule::make_linear(1, 0.25, 0.25);
    CHECK(s1.alpha_bar[1] == doctest::Approx(0.75));

    CHECK_THROWS_AS(NoiseSchedule::make_linear(0, 1e-4, 0.02), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make_linear(10, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make_linear(10, 0.3, 0.2), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make_linear(10, 0.1, 1.0), ConfigError);
}

TEST_CASE("q_sample closed forms and variance preservation") {
    auto s = NoiseSchedule::make_linear(1000, 1e-4, 0.02);
    Rng rng(11);
    auto z0 = Tensor::randn({1, 4, 8, 8}, rng);
    auto eps = Tensor::randn({1, 4, 8, 8}, rng);

    // t = 0 convention: no noise
    auto zt0 = q_sample(z0, 0, eps, s);
    CHECK(zt0.data() == z0.data());

    // zero signal: pure scaled noise
    auto ztn = q_sample(Tensor::zeros({1, 4, 8, 8}), 700, eps, s);
    const float sb = std::sqrt(1.0f - s.alpha_bar[700]);
    for (std::int64_t i = 0; i < ztn.numel(); ++i)
        CHECK(ztn.data()[i] == doctest::Approx(sb * eps.data()[i]).epsilon(1e-6));

    CHECK_THROWS_AS(q_sample(z0, 1001, eps, s), UsageError);

    // Monte-Carlo: unit-variance input stays unit-variance at any t
    for (int t : {50, 500, 950}) {
        double sum = 0, sumsq = 0;
        std::int64_t n = 0;
        for (int draw = 0; draw < 200; ++draw) {
            auto z = Tensor::randn({1, 4, 8, 8}, rng);
            auto e = Tensor::randn({1, 4, 8, 8}, rng);
            auto zt = q_sample(z, t, e, s);
            for (float v : zt.data()) {
                sum += v;
                sumsq += static_cast<double>(v) * v;
                ++n;
            }
        }
        const double mean = sum / n;
        const double var = sumsq / n - mean * mean;
        CHECK(std::abs(var - 1.0) < 0.03);
    }
}

TEST_CASE("diffusion loss modes") {
    Rng rng(12);
    auto s = NoiseSchedule::make_linear(100, 1e-4, 0.02);
    auto unet = tiny_unet(rng);

    DiffusionBatch batch;
    batch.z0 = Tensor::randn({2, 4, 8, 8}, rng);
    batch.ts = {10, 90};
    batch.eps = Tensor::randn({2, 4, 8, 8}, rng);
    batch.cond_txt = Tensor::randn({2, 3, 8}, rng);
    batch.cond_img = Tensor::randn({2, 4, 8}, rng);

    SUBCASE("oracle denoiser: zero noise predicted perfectly, unit noise costs ~1") {
        // test double: zero the output head so the net predicts exactly zero
        std::vector<Tensor> params;
        unet.collect(params);
        for (auto& p : params)
            if (p.rank() == 4 && p.dim(0) == 4 && p.dim(1) == unet.config().width0)
                std::fill(p.data_mut().begin(), p.data_mut().end(), 0.0f);

        DiffusionBatch b0 = batch;
        b0.eps = Tensor::zeros({2, 4, 8, 8});
        CHECK(diffusion_loss(unet, s, b0, LossMode::LDM, 0.0f).item() == 0.0f);

        DiffusionBatch b1 = batch;
        double acc = 0;
        Rng r2(99);
        b1.z0 = Tensor::randn({2, 4, 8, 8}, r2);
        for (int i = 0; i < 40; ++i) {
            b1.eps = Tensor::randn({2, 4, 8, 8}, r2);
            acc += diffusion_loss(unet, s, b1, LossMode::LDM, 0.0f).item();
        }
        CHECK(acc / 40.0 == doctest::Approx(1.0).epsilon(0.05));
    }

    SUBCASE("brute-force oracle for the conditional objective") {
        const auto loss = diffusion_loss(unet, s, batch, LossMode::CLDM, 0.0f).item();
        // oracle: scalar loops for the noising and the squared error
        double acc = 0;
        const std::int64_t per = batch.z0.numel() / 2;
        std::vector<float> zt(batch.z0.numel());
        for (int b = 0; b < 2; ++b) {
            const float sa = std::sqrt(s.alpha_bar[batch.ts[b]]);
            const float sb = std::sqrt(1.0f - s.alpha_bar[batch.ts[b]]);
            for (std::int64_t i = 0; i < per; ++i)
                zt[b * per + i] =
                    sa * batch.z0.data()[b * per + i] + sb * batch.eps.data()[b * per + i];
        }
        auto eps_hat =
            unet.predict(Tensor::from_data(batch.z0.shape(), zt), batch.ts, batch.cond_txt);
        for (std::int64_t i = 0; i < batch.eps.numel(); ++i) {
            const double d = static_cast<double>(batch.eps.data()[i]) - eps_hat.data()[i];
            acc += d * d;
        }
        acc /= static_cast<double>(batch.eps.numel());
        CHECK(loss == doctest::Approx(acc).epsilon(1e-6));
    }

    SUBCASE("IPC-LDM with lambda 0 equals C-LDM bit for bit") {
        const float a = diffusion_loss(unet, s, batch, LossMode::IPCLDM, 0.0f).item();
        const float b = diffusion_loss(unet, s, batch, LossMode::CLDM, 0.0f).item();
        CHECK(a == b);
    }

    SUBCASE("missing conditions raise usage errors") {
        DiffusionBatch b = batch;
        b.cond_txt = Tensor();
        CHECK_THROWS_AS(diffusion_loss(unet, s, b, LossMode::CLDM, 0.0f), UsageError);
        DiffusionBatch b2 = batch;
        b2.cond_img = Tensor();
        CHECK_THROWS_AS(diffusion_loss(unet, s, b2, LossMode::IPCLDM, 1.0f), UsageError);
        DiffusionBatch b3 = batch;
        b3.ts = {0, 5};
        CHECK_THROWS_AS(diffusion_loss(unet, s, b3, LossMode::LDM, 0.0f), UsageError);
    }
}

TEST_CASE("ddpm step contracts") {
    Rng rng(13);
    auto s = NoiseSchedule::make_linear(100, 1e-4, 0.02);
    auto z = Tensor::randn({1, 4, 8, 8}, rng);
    auto eps_hat = Tensor::randn({1, 4, 8, 8}, rng);

    // final step injects no noise: two different rngs agree
    Rng ra(1), rb(2);
    auto za = ddpm_step(z, 1, eps_hat, s, ra);
    auto zb = ddpm_step(z, 1, eps_hat, s, rb);
    CHECK(za.data() == zb.data());
    CHECK(za.shape() == z.shape());

    // interior steps are stochastic
    Rng rc(1), rd(2);
    auto zc = ddpm_step(z, 50, eps_hat, s, rc);
    auto zd = ddpm_step(z, 50, eps_hat, s, rd);
    CHECK(zc.data() != zd.data());

    CHECK_THROWS_AS(ddpm_step(z, 0, eps_hat, s, ra), UsageError);
    CHECK_THROWS_AS(ddpm_step(z, 101, eps_hat, s, ra), UsageError);
}

TEST_CASE("oracle denoiser round-trips the full chain within 1e-4") {
    Rng rng(14);
    auto s = NoiseSchedule::make_linear(1000, 1e-4, 0.02);
    auto z0 = Tensor::randn({1, 4, 8, 8}, rng);
    auto eps = Tensor::randn({1, 4, 8, 8}, rng);
    auto z_T = q_sample(z0, s.T, eps, s);
    // cheating denoiser: hand the true noise back at every step
    int iters = 0;
    auto z = sample_chain(s, z_T, s.T, s.T, [&](const Tensor&, int) { return eps; }, &iters);
    CHECK(iters == s.T);
    double max_err = 0;
    for (std::int64_t i = 0; i < z0.numel(); ++i)
        max_err = std::max(max_err, std::abs(static_cast<double>(z.data()[i]) - z0.data()[i]));
    CHECK(max_err < 1e-4);

    // single ddim_step inversion at a moderate timestep
    auto z500 = q_sample(z0, 500, eps, s);
    auto back = ddim_step(z500, 500, 0, eps, s);
    double err1 = 0;
    for (std::int64_t i = 0; i < z0.numel(); ++i)
        err1 = std::max(err1, std::abs(static_cast<double>(back.data()[i]) - z0.data()[i]));
    CHECK(err1 < 1e-5);
}

TEST_CASE("sampler guidance and validation") {
    Rng rng(15);
    auto s = NoiseSchedule::make_linear(50, 1e-4, 0.02);
    auto unet = tiny_unet(rng);
    auto init = Tensor::randn({1, 4, 8, 8}, rng);
    auto cond = Tensor::randn({1, 3, 8}, rng);

    // guidance 0 with cond == uncond reduces to unconditional sampling
    auto a = sample(unet, s, init, 50, 10, cond, cond, Tensor(), 0.0f, 0.0f);
    auto b = sample(unet, s, init, 50, 10, cond, cond, Tensor(), 1.0f, 0.0f);
    CHECK(a.data() == b.data());

    // deterministic given the same init
    auto c1 = sample(unet, s, init, 50, 10, cond, cond, Tensor(), 3.0f, 0.0f);
    auto c2 = sample(unet, s, init, 50, 10, cond, cond, Tensor(), 3.0f, 0.0f);
    CHECK(c1.data() == c2.data());

    int iters = 0;
    sample(unet, s, init, 50, 7, cond, cond, Tensor(), 1.0f, 0.0f, &iters);
    CHECK(iters == 7);

    CHECK_THROWS_AS(sample(unet, s, init, 50, 51, cond, cond, Tensor(), 1.0f, 0.0f), ConfigError);
    CHECK_THROWS_AS(sample(unet, s, init, 0, 5, cond, cond, Tensor(), 1.0f, 0.0f), ConfigError);
}
