#include <cmath>

#include "doctest.h"
#include "s2rd/autoencoder.hpp"

using namespace s2rd;

namespace {

Image noise_image(int n, Rng& rng) {
    Image img(n, n);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return img;
}

}  // namespace

TEST_CASE("autoencoder shape contracts") {
    AutoencoderModel::Config cfg;
    cfg.latent_channels = 4;
    cfg.downsample_factor = 8;
    AutoencoderModel ae;
    Rng rng(31);
    ae.init(cfg, rng);

    Rng data_rng(1);
    auto x = images_to_tensor({noise_image(64, data_rng)});
    auto z = ae.encode(x);
    CHECK(z.shape() == Shape{1, 4, 8, 8});

    // compression actually happens
    CHECK(z.numel() < x.numel());

    auto x2 = ae.decode(z);
    CHECK(x2.shape() == Shape{1, 3, 64, 64});
    for (float v : x2.data()) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }

    // zero latent decodes to a valid image
    auto xz = ae.decode(Tensor::zeros({1, 4, 8, 8}));
    for (float v : xz.data()) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }

    // determinism
    auto z2 = ae.encode(x);
    CHECK(z.data() == z2.data());

    // indivisible sizes are rejected
    CHECK_THROWS_AS(ae.encode(images_to_tensor({noise_image(60, data_rng)})), ShapeError);
    CHECK_THROWS_AS(ae.decode(Tensor::zeros({1, 3, 8, 8})), ShapeError);

    // batch result equals per-image result (no cross-image state)
    auto a = noise_image(64, data_rng);
    auto b = noise_image(64, data_rng);
    auto zbatch = ae.encode(images_to_tensor({a, b}));
    auto za = ae.encode(images_to_tensor({a}));
    for (std::int64_t i = 0; i < za.numel(); ++i) CHECK(zbatch.data()[i] == za.data()[i]);
}

TEST_CASE("autoencoder memorizes a single image") {
    AutoencoderModel::Config cfg;
    cfg.downsample_factor = 4;  // small model keeps this test quick
    AutoencoderModel ae;
    Rng rng(32);
    ae.init(cfg, rng);

    // a structured target: smooth gradient plus a dark band
    Image target(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c)
                target.at(y, x, c) =
                    0.8f * (x / 31.0f * 2 - 1) * (c == 0 ? 1 : 0.3f) + (y > 20 ? -0.5f : 0.2f);
    for (auto& v : target.px) v = std::clamp(v, -1.0f, 1.0f);

    AutoencoderTrainConfig tcfg;
    tcfg.steps = 260;
    tcfg.batch = 1;
    tcfg.lr = 3e-3f;
    tcfg.feature_weight = 0.0f;
    auto curve = train_autoencoder(ae, {target}, tcfg, nullptr);
    REQUIRE(curve.points.size() == 260);

    // the curve trends down and ends near zero reconstruction error
    CHECK(curve.points.back().second < 0.3f * curve.points.front().second);
    NoGradGuard ng;
    auto recon = ae.decode(ae.encode(image_to_tensor(target)));
    const double err = mse(recon, image_to_tensor(target)).item();
    CHECK(err < 0.01);

    // 20-step moving average is monotone non-increasing up to a small slack
    auto avg = [&](size_t i) {
        double s = 0;
        for (size_t k = i; k < i + 20; ++k) s += curve.points[k].second;
        return s / 20.0;
    };
    int violations = 0;
    for (size_t i = 0; i + 40 < curve.points.size(); i += 20)
        if (avg(i + 20) > avg(i) * 1.02) ++violations;
    CHECK(violations <= 1);

    // empty dataset and bad config are rejected
    CHECK_THROWS_AS(train_autoencoder(ae, {}, tcfg, nullptr), UsageError);
    AutoencoderTrainConfig bad = tcfg;
    bad.batch = 0;
    CHECK_THROWS_AS(train_autoencoder(ae, {target}, bad, nullptr), ConfigError);
}

TEST_CASE("fixed seed reproduces the training byte-for-byte") {
    auto run = [] {
        AutoencoderModel::Config cfg;
        cfg.downsample_factor = 4;
        AutoencoderModel ae;
        Rng rng(33);
        ae.init(cfg, rng);
        Rng drng(2);
        std::vector<Image> data = {noise_image(16, drng), noise_image(16, drng)};
        AutoencoderTrainConfig tcfg;
        tcfg.steps = 8;
        tcfg.batch = 2;
        tcfg.seed = 5;
        train_autoencoder(ae, data, tcfg, nullptr);
        Checkpoint ck;
        ae.save(ck, "ae.");
        return ck.serialize();
    };
    CHECK(run() == run());
}
