#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace drnet {

// Images are stored channel-major (3,H,W per instance) with values in
// [0,1] before normalization. Normalization statistics come from the
// training split only.
struct Dataset {
    int num_classes = 0;
    int height = 0, width = 0;
    std::vector<float> images;  // N * 3 * H * W
    std::vector<int> labels;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t pixels_per_image() const { return 3LL * height * width; }
    const float* image(std::int64_t i) const { return images.data() + i * pixels_per_image(); }
    float* image(std::int64_t i) { return images.data() + i * pixels_per_image(); }
};

// Public CIFAR-10 binary layout: whole 3073-byte records, one label byte
// then 1024 red, 1024 green, 1024 blue row-major bytes. Record order is
// preserved; pixels scale to [0,1].
Dataset load_cifar10_binary(const std::vector<std::string>& paths);

// Inverse of the loader, for byte-exactness checks and fixture files.
std::vector<std::uint8_t> serialize_cifar10(const Dataset& ds);

// Class-conditioned colored blobs with positional jitter, per-instance
// contrast, and pixel noise; separable by a small convnet, deterministic
// given the seed. Instances are laid out class-major. first_instance
// offsets the per-class instance stream, so disjoint train/test splits
// share the same class recipes (train: offset 0; test: offset per_class
// of the training set).
Dataset make_synthetic(int num_classes, int per_class, int height, int width, std::uint64_t seed,
                       int first_instance = 0);

// Per-channel statistics over every pixel of ds; call on the train split.
void compute_normalization(Dataset& ds);

// Training augmentation pieces: 4-pixel zero padding with a random crop
// offset, then a coin-flip horizontal mirror.
void crop_from_padded(const float* src, float* dst, int h, int w, int pad, int dy, int dx);
void hflip_image(float* img, int h, int w);

// Gathers `indices` into an NCHW batch. Training mode applies the seeded
// crop+flip augmentation; both modes then normalize with the dataset's
// statistics. rng may be null in eval mode.
template <typename S>
Tensor<S> assemble_batch(const Dataset& ds, const std::vector<int>& indices, bool training,
                         Rng* rng);

std::vector<int> gather_labels(const Dataset& ds, const std::vector<int>& indices);

// y = (x - mean) / std and back, per channel.
float normalize_pixel(float v, double mean, double stddev);
float denormalize_pixel(float v, double mean, double stddev);

}  // namespace drnet
