#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ymask/box.h"
#include "ymask/rng.h"
#include "ymask/tensor.h"

namespace ymask {

// 8-bit interleaved RGB.
struct Image {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb;
};

// Binary PPM (P6, maxval 255).
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

// [3, size, size] in [0, 1], nearest-neighbour resampled when the image is
// not already size×size.
Tensor<float> image_to_tensor(const Image& image, std::size_t size);

struct Sample {
    std::string name;
    Tensor<float> image;
    std::vector<GroundTruth> labels;
};

// Every *.ppm in `dir` (sorted by file name) with its sibling .txt labels; a
// missing label file means no objects.
std::vector<Sample> load_dataset(const std::filesystem::path& dir, std::size_t input_size);

// Noise background with 1-3 non-overlapping objects of 15-40% image size:
// a filled ellipse ("face", class 0) or an ellipse crossed by a horizontal
// bar over its lower half ("mask", class 1).
std::pair<Image, std::vector<GroundTruth>> synth_image(Rng& rng, std::size_t size);

// Writes img_NNNN.ppm and img_NNNN.txt for i in [0, n). Same seed, same bytes.
void write_synthetic_dataset(const std::filesystem::path& dir, std::size_t n, std::uint64_t seed,
                             std::size_t size = 160);

}  // namespace ymask
