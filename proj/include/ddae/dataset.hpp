#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddae/image_batch.hpp"
#include "ddae/rng.hpp"

namespace ddae {

// CIFAR-10 binary layout: records of 3073 bytes, one label byte followed by
// 3x32x32 channel-planar, row-major pixel bytes. Pixels map to [-1, 1].
constexpr std::size_t kCifarRecordBytes = 3073;
ImageBatch load_cifar10_binary(const std::filesystem::path& path, int max_records = -1);
ImageBatch decode_cifar10_records(const std::string& bytes, const std::string& origin, int max_records = -1);

// Standard CIFAR-10 directory (data_batch_1..5.bin, test_batch.bin). The
// train split is truncated to `max_train` images when positive.
Dataset load_cifar10_dir(const std::filesystem::path& dir, int max_train = -1, int max_test = -1);

// PNG files listed in a "filename,label" CSV (paths relative to `dir`),
// center-cropped to square, resized to `image_size` and scaled to [-1, 1].
ImageBatch load_png_directory(const std::filesystem::path& dir, const std::filesystem::path& labels_csv,
                              int image_size, int channels = 3);

// Procedural ten-class shape images (disk, ring, square, frame, triangle,
// plus, cross, horizontal bars, vertical bars, diamond) at random position,
// scale and colours with pixel noise. A stand-in for natural images when
// none are available locally.
ImageBatch make_synthetic_shapes(int n, int image_size, std::uint64_t seed);

// Random horizontal flip and/or zero-pad-and-crop (pad = image_size / 8);
// padding uses the black level -1.
Tensor augment(const Tensor& images, bool horizontal_flip, bool pad_crop, Rng& rng);

struct HoldoutIndices {
  std::vector<int> train, test;  // sorted
};
HoldoutIndices holdout_indices(int n, double holdout_fraction, std::uint64_t seed);

// Seeded split holding out `holdout_fraction` of the rows as the test split.
Dataset split_holdout(const ImageBatch& all, double holdout_fraction, std::uint64_t seed);

// Writes image `index` of an NCHW batch as an RGB PNG of the same size.
void write_png(const std::filesystem::path& path, const Tensor& images, int index = 0);

// Writes images (NCHW in [-1, 1], clamped) as a single PNG grid.
void write_png_grid(const std::filesystem::path& path, const Tensor& images, int columns = 8);

}  // namespace ddae
