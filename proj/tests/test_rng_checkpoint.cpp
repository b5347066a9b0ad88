#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "s2rd/checkpoint.hpp"
#include "s2rd/rng.hpp"
#include "s2rd/tensor.hpp"

using namespace s2rd;

TEST_CASE("checkpoint container round-trips byte-identically") {
    Rng rng(5);
    Checkpoint ck;
    ck.put("unet.conv_in.w", Tensor::randn({8, 4, 3, 3}, rng));
    ck.put("unet.conv_in.b", Tensor::zeros({8}));
    ck.put("ae.enc.0.w", Tensor::randn({16, 3, 3, 3}, rng));
    ck.put("scalar", Tensor::full({1}, 2.5f));

    const auto bytes = ck.serialize();
    // header: magic + version + count
    CHECK(bytes[0] == 'S');
    CHECK(bytes[1] == '2');
    CHECK(bytes[2] == 'R');
    CHECK(bytes[3] == 'D');
    CHECK(bytes[4] == 1);  // version u32 LE
    CHECK(bytes[8] == 4);  // tensor count u32 LE

    auto ck2 = Checkpoint::deserialize(bytes);
    const auto bytes2 = ck2.serialize();
    CHECK(bytes == bytes2);

    auto t = ck2.get("unet.conv_in.w");
    CHECK(t.shape() == Shape{8, 4, 3, 3});
    CHECK(t.data() == ck.get("unet.conv_in.w").data());

    const auto unet_names = ck2.names_with_prefix("unet.");
    CHECK(unet_names.size() == 2);

    CHECK_THROWS_AS(ck2.get("missing"), LoadError);

    auto corrupted = bytes;
    corrupted[0] = 'X';
    CHECK_THROWS_AS(Checkpoint::deserialize(corrupted), LoadError);

    const auto path = std::filesystem::temp_directory_path() / "s2rd_ck_test.s2rd";
    ck.save(path.string());
    auto ck3 = Checkpoint::load(path.string());
    CHECK(ck3.serialize() == bytes);
    std::filesystem::remove(path);
}

TEST_CASE("fnv1a64 is stable") {
    const std::uint8_t data[] = {'a', 'b', 'c'};
    CHECK(fnv1a64(data, 3) == 0xe71fa2190541574bull);
}
