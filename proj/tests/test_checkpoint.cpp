#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "wadi/checkpoint.hpp"
#include "wadi/rng.hpp"
#include "wadi/tensor.hpp"

using namespace wadi;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "wadi_ckpt_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Checkpoint, RoundTripIsBitExactForBothDtypes) {
    RngStream rng(60);
    NamedTensors tensors;
    tensors.add("w64", Tensor::randn({5, 3}, rng));
    tensors.add("w32", Tensor::randn({4, 4}, rng, 1.0, DType::Float32));
    tensors.add("bias", Tensor::randn({7}, rng));
    tensors.add("scalar", Tensor::scalar(0.123456789012345678));

    const auto path = temp_file("roundtrip.wadi");
    save_checkpoint(path, tensors);
    NamedTensors loaded = load_checkpoint(path);

    ASSERT_EQ(loaded.size(), tensors.size());
    for (const auto& [name, t] : tensors.items()) {
        const Tensor& l = loaded.get(name);
        EXPECT_EQ(l.shape(), t.shape());
        EXPECT_EQ(l.dtype(), t.dtype());
        for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(l.data()[i], t.data()[i]);
    }

    // the file itself round-trips byte for byte
    const auto path2 = temp_file("roundtrip2.wadi");
    save_checkpoint(path2, loaded);
    EXPECT_EQ(slurp(path), slurp(path2));
}

TEST(Checkpoint, PreservesInsertionOrder) {
    NamedTensors tensors;
    tensors.add("zzz", Tensor::ones({1}));
    tensors.add("aaa", Tensor::ones({1}));
    const auto path = temp_file("order.wadi");
    save_checkpoint(path, tensors);
    NamedTensors loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.items()[0].first, "zzz");
    EXPECT_EQ(loaded.items()[1].first, "aaa");
}

TEST(Checkpoint, DuplicateNamesRejected) {
    NamedTensors tensors;
    tensors.add("w", Tensor::ones({2}));
    EXPECT_THROW(tensors.add("w", Tensor::ones({2})), CheckpointError);
}

TEST(Checkpoint, EmptyDimensionRejectedOnSave) {
    NamedTensors tensors;
    tensors.add("w", Tensor::zeros({2, 0}));
    EXPECT_THROW(save_checkpoint(temp_file("empty.wadi"), tensors), CheckpointError);
}

TEST(Checkpoint, BadMagicRejected) {
    const auto path = temp_file("bad.wadi");
    std::ofstream(path, std::ios::binary) << "NOPE    garbage";
    EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST(Checkpoint, TruncatedFileRejected) {
    NamedTensors tensors;
    tensors.add("w", Tensor::ones({8, 8}));
    const auto path = temp_file("trunc.wadi");
    save_checkpoint(path, tensors);
    auto bytes = slurp(path);
    bytes.resize(bytes.size() / 2);
    const auto cut = temp_file("trunc_cut.wadi");
    std::ofstream(cut, std::ios::binary).write(bytes.data(), bytes.size());
    EXPECT_THROW(load_checkpoint(cut), CheckpointError);
}

TEST(Checkpoint, MissingFileRejected) {
    EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.wadi")), CheckpointError);
}

TEST(Checkpoint, Float32PayloadIsHalfTheWidth) {
    NamedTensors t32, t64;
    t32.add("w", Tensor::zeros({64}, DType::Float32));
    t64.add("w", Tensor::zeros({64}, DType::Float64));
    const auto p32 = temp_file("w32.wadi");
    const auto p64 = temp_file("w64.wadi");
    save_checkpoint(p32, t32);
    save_checkpoint(p64, t64);
    EXPECT_EQ(std::filesystem::file_size(p64) - std::filesystem::file_size(p32), 64u * 4u);
}
