#include <algorithm>

#include "doctest.h"
#include "s2rd/conditioning.hpp"

using namespace s2rd;

TEST_CASE("tokenizer framing, padding and triggers") {
    auto vocab = Vocabulary::base();
    const int m = 16;

    auto empty = tokenize(vocab, "", m);
    CHECK(static_cast<int>(empty.size()) == m);
    CHECK(empty[0] == Vocabulary::kBos);
    CHECK(empty[1] == Vocabulary::kEos);
    for (int i = 2; i < m; ++i) CHECK(empty[i] == Vocabulary::kPad);

    // unknown words map to UNK
    auto ids = tokenize(vocab, "photo of zorbulon road", m);
    CHECK(std::count(ids.begin(), ids.end(), Vocabulary::kUnk) == 1);

    // trigger token contributes exactly one id once registered
    TextEncoder enc;
    Rng rng(1);
    enc.init(ConditioningConfig{}, vocab.size(), rng);
    const int trig = add_trigger_token(vocab, enc, "<autodrive_small_onroad>", rng);
    auto tids = tokenize(vocab, "photo of <autodrive_small_onroad> road", m);
    CHECK(std::count(tids.begin(), tids.end(), trig) == 1);
    CHECK(std::count(tids.begin(), tids.end(), Vocabulary::kUnk) == 0);

    // round trip for known words
    const std::string prompt = "photo of road";
    CHECK(detokenize(vocab, tokenize(vocab, prompt, m)) == prompt);
    auto again = tokenize(vocab, detokenize(vocab, tokenize(vocab, prompt, m)), m);
    CHECK(again == tokenize(vocab, prompt, m));
}

TEST_CASE("vocabulary persistence and trigger rules") {
    auto vocab = Vocabulary::base();
    TextEncoder enc;
    Rng rng(2);
    enc.init(ConditioningConfig{}, vocab.size(), rng);

    const int before = vocab.size();
    add_trigger_token(vocab, enc, "<autodrive_small_racing>", rng);
    CHECK(vocab.size() == before + 1);
    CHECK(enc.token_table().dim(0) == vocab.size());

    CHECK_THROWS_AS(add_trigger_token(vocab, enc, "<autodrive_small_racing>", rng), UsageError);
    CHECK_THROWS_AS(add_trigger_token(vocab, enc, "no_brackets", rng), UsageError);
    CHECK_THROWS_AS(add_trigger_token(vocab, enc, "<Bad-Caps>", rng), UsageError);

    const std::string path = "/tmp/s2rd_vocab_test.tsv";
    vocab.save(path);
    auto loaded = Vocabulary::load(path);
    CHECK(loaded.size() == vocab.size());
    CHECK(loaded.id("<autodrive_small_racing>") == vocab.id("<autodrive_small_racing>"));
}

TEST_CASE("text encoder determinism, shape and positional sensitivity") {
    auto vocab = Vocabulary::base();
    TextEncoder enc;
    Rng rng(3);
    ConditioningConfig cfg;
    enc.init(cfg, vocab.size(), rng);

    auto ids = tokenize(vocab, "photo of road on track", cfg.m_txt);
    auto e1 = enc.encode(ids, 1);
    auto e2 = enc.encode(ids, 1);
    CHECK(e1.shape() == Shape{1, cfg.m_txt, cfg.d_cond});
    CHECK(e1.data() == e2.data());

    // swapping two distinct tokens changes the embedding
    auto swapped = ids;
    std::swap(swapped[1], swapped[2]);
    REQUIRE(swapped != ids);
    auto e3 = enc.encode(swapped, 1);
    double diff = 0;
    for (std::int64_t i = 0; i < e1.numel(); ++i)
        diff += std::abs(static_cast<double>(e1.data()[i]) - e3.data()[i]);
    CHECK(diff > 1e-6);

    // out-of-vocabulary id is a usage error
    auto bad = ids;
    bad[1] = vocab.size() + 7;
    CHECK_THROWS_AS(enc.encode(bad, 1), UsageError);

    // trigger registration changes the encoding vs the UNK form
    auto pre = enc.encode(tokenize(vocab, "photo of <autodrive_small_offroad> road", cfg.m_txt), 1);
    add_trigger_token(vocab, enc, "<autodrive_small_offroad>", rng);
    auto post = enc.encode(tokenize(vocab, "photo of <autodrive_small_offroad> road", cfg.m_txt), 1);
    double tdiff = 0;
    for (std::int64_t i = 0; i < pre.numel(); ++i)
        tdiff += std::abs(static_cast<double>(pre.data()[i]) - post.data()[i]);
    CHECK(tdiff > 1e-6);
}

TEST_CASE("image prompt encoder shapes and patch oracle") {
    ConditioningConfig cfg;
    ImagePromptEncoder enc;
    Rng rng(4);
    enc.init(cfg, rng);

    auto img = Tensor::randn({1, 3, 64, 64}, rng);
    auto e = enc.encode(img);
    CHECK(e.shape() == Shape{1, 64, cfg.d_cond});  // 8x8 patches of a 64x64 image

    auto zero = enc.encode(Tensor::zeros({1, 3, 64, 64}));
    auto one = enc.encode(Tensor::full({1, 3, 64, 64}, 1.0f));
    double diff = 0;
    for (std::int64_t i = 0; i < zero.numel(); ++i)
        diff += std::abs(static_cast<double>(zero.data()[i]) - one.data()[i]);
    CHECK(diff > 1e-6);

    CHECK_THROWS_AS(enc.encode(Tensor::zeros({1, 3, 32, 32})), ShapeError);

    // patch extraction against a brute-force gather
    auto x = Tensor::randn({2, 3, 8, 8}, rng);
    auto patches = extract_patches(x, 4);
    CHECK(patches.shape() == Shape{2, 4, 48});
    for (int n = 0; n < 2; ++n)
        for (int p = 0; p < 4; ++p)
            for (int c = 0; c < 3; ++c)
                for (int py = 0; py < 4; ++py)
                    for (int px = 0; px < 4; ++px) {
                        const int gy = p / 2, gx = p % 2;
                        const float expect =
                            x.data()[((n * 3 + c) * 8 + gy * 4 + py) * 8 + gx * 4 + px];
                        const float got =
                            patches.data()[(n * 4 + p) * 48 + (c * 16 + py * 4 + px)];
                        CHECK(got == expect);
                    }
}
