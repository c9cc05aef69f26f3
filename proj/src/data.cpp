#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "errors.hpp"

namespace drnet {

namespace {
constexpr std::int64_t kCifarRecord = 3073;
constexpr std::int64_t kCifarPlane = 1024;
}  // namespace

Dataset load_cifar10_binary(const std::vector<std::string>& paths) {
    Dataset ds;
    ds.num_classes = 10;
    ds.height = 32;
    ds.width = 32;
    for (const auto& path : paths) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open " + path);
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
        const std::int64_t n = static_cast<std::int64_t>(bytes.size());
        if (n % kCifarRecord != 0)
            throw DataError(path + ": truncated record, file size " + std::to_string(n) +
                            " is not a multiple of 3073 (error at byte offset " +
                            std::to_string((n / kCifarRecord) * kCifarRecord) + ")");
        const std::int64_t records = n / kCifarRecord;
        const std::int64_t base_record = ds.size();
        ds.labels.reserve(static_cast<std::size_t>(base_record + records));
        ds.images.reserve(ds.images.size() + static_cast<std::size_t>(records * 3 * kCifarPlane));
        for (std::int64_t r = 0; r < records; ++r) {
            const std::uint8_t* rec =
                reinterpret_cast<const std::uint8_t*>(bytes.data()) + r * kCifarRecord;
            if (rec[0] > 9)
                throw DataError(path + ": corrupt record " + std::to_string(base_record + r) +
                                ": label byte " + std::to_string(rec[0]) + " > 9");
            ds.labels.push_back(rec[0]);
            for (std::int64_t i = 0; i < 3 * kCifarPlane; ++i)
                ds.images.push_back(static_cast<float>(rec[1 + i]) / 255.0f);
        }
    }
    return ds;
}

std::vector<std::uint8_t> serialize_cifar10(const Dataset& ds) {
    if (ds.height != 32 || ds.width != 32)
        throw DataError("serialize_cifar10: dataset is not 32x32");
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(ds.size() * kCifarRecord));
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        out.push_back(static_cast<std::uint8_t>(ds.labels[static_cast<std::size_t>(i)]));
        const float* img = ds.image(i);
        for (std::int64_t p = 0; p < 3 * kCifarPlane; ++p)
            out.push_back(static_cast<std::uint8_t>(std::lround(img[p] * 255.0f)));
    }
    return out;
}

Dataset make_synthetic(int num_classes, int per_class, int height, int width, std::uint64_t seed,
                       int first_instance) {
    if (num_classes < 1 || per_class < 1 || height < 1 || width < 1)
        throw ConfigError("make_synthetic: all arguments must be positive");
    Dataset ds;
    ds.num_classes = num_classes;
    ds.height = height;
    ds.width = width;
    ds.images.resize(static_cast<std::size_t>(num_classes) * per_class * 3 * height * width);
    ds.labels.resize(static_cast<std::size_t>(num_classes) * per_class);

    struct ClassRecipe {
        double color[3];
        double cx, cy, radius;
    };
    std::vector<ClassRecipe> recipes(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
        Rng crng(derive_seed(seed, "synthetic-class", static_cast<std::uint64_t>(c)));
        auto& r = recipes[static_cast<std::size_t>(c)];
        for (double& v : r.color) v = crng.uniform(0.25, 1.0);
        r.cx = crng.uniform(width * 0.25, width * 0.75);
        r.cy = crng.uniform(height * 0.25, height * 0.75);
        r.radius = crng.uniform(std::min(height, width) * 0.12, std::min(height, width) * 0.28);
    }

    std::int64_t idx = 0;
    for (int c = 0; c < num_classes; ++c) {
        const auto& r = recipes[static_cast<std::size_t>(c)];
        for (int j = 0; j < per_class; ++j, ++idx) {
            Rng rng(derive_seed(seed, "synthetic-instance", static_cast<std::uint64_t>(c),
                                static_cast<std::uint64_t>(first_instance + j)));
            const double cx = r.cx + rng.normal(0.0, 2.0);
            const double cy = r.cy + rng.normal(0.0, 2.0);
            const double rad = r.radius * rng.uniform(0.75, 1.25);
            const double contrast = rng.uniform(0.35, 1.0);
            const double bg = rng.uniform(0.0, 0.15);
            float* img = ds.image(idx);
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                        const double blob = contrast * r.color[ch] *
                                            std::exp(-d2 / (2.0 * rad * rad));
                        const double noise = rng.normal(0.0, 0.04);
                        double v = bg + blob + noise;
                        img[(ch * height + y) * width + x] =
                            static_cast<float>(std::clamp(v, 0.0, 1.0));
                    }
            ds.labels[static_cast<std::size_t>(idx)] = c;
        }
    }
    return ds;
}

void compute_normalization(Dataset& ds) {
    const std::int64_t plane = static_cast<std::int64_t>(ds.height) * ds.width;
    for (int ch = 0; ch < 3; ++ch) {
        double sum = 0, sq = 0;
        for (std::int64_t i = 0; i < ds.size(); ++i) {
            const float* p = ds.image(i) + ch * plane;
            for (std::int64_t k = 0; k < plane; ++k) {
                sum += p[k];
                sq += static_cast<double>(p[k]) * p[k];
            }
        }
        const double n = static_cast<double>(ds.size() * plane);
        const double mean = sum / n;
        const double var = std::max(0.0, sq / n - mean * mean);
        ds.mean[static_cast<std::size_t>(ch)] = mean;
        ds.stddev[static_cast<std::size_t>(ch)] = std::max(std::sqrt(var), 1e-8);
    }
}

float normalize_pixel(float v, double mean, double stddev) {
    return static_cast<float>((v - mean) / stddev);
}

float denormalize_pixel(float v, double mean, double stddev) {
    return static_cast<float>(v * stddev + mean);
}

void crop_from_padded(const float* src, float* dst, int h, int w, int pad, int dy, int dx) {
    // src is a 3*h*w image; conceptually zero-padded to (h+2p, w+2p), then
    // the (h, w) window at (dy, dx) is taken. (dy, dx) = (pad, pad) is the
    // identity.
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = y + dy - pad;
                const int sx = x + dx - pad;
                float v = 0.0f;
                if (sy >= 0 && sy < h && sx >= 0 && sx < w) v = src[(ch * h + sy) * w + sx];
                dst[(ch * h + y) * w + x] = v;
            }
}

void hflip_image(float* img, int h, int w) {
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < h; ++y) {
            float* row = img + (ch * h + y) * w;
            std::reverse(row, row + w);
        }
}

template <typename S>
Tensor<S> assemble_batch(const Dataset& ds, const std::vector<int>& indices, bool training,
                         Rng* rng) {
    const int n = static_cast<int>(indices.size());
    const int h = ds.height, w = ds.width;
    Tensor<S> batch({n, 3, h, w});
    std::vector<float> scratch(static_cast<std::size_t>(3 * h * w));
    for (int i = 0; i < n; ++i) {
        const float* src = ds.image(indices[static_cast<std::size_t>(i)]);
        const float* use = src;
        if (training) {
            if (!rng) throw Error("assemble_batch: training mode needs an rng");
            const int dy = static_cast<int>(rng->next_below(9));  // pad 4 -> offsets 0..8
            const int dx = static_cast<int>(rng->next_below(9));
            crop_from_padded(src, scratch.data(), h, w, 4, dy, dx);
            if (rng->bernoulli(0.5)) hflip_image(scratch.data(), h, w);
            use = scratch.data();
        }
        S* dst = batch.data() + static_cast<std::int64_t>(i) * 3 * h * w;
        for (int ch = 0; ch < 3; ++ch) {
            const double m = ds.mean[static_cast<std::size_t>(ch)];
            const double sd = ds.stddev[static_cast<std::size_t>(ch)];
            const float* p = use + static_cast<std::int64_t>(ch) * h * w;
            S* q = dst + static_cast<std::int64_t>(ch) * h * w;
            for (int k = 0; k < h * w; ++k)
                q[k] = static_cast<S>(normalize_pixel(p[k], m, sd));
        }
    }
    return batch;
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<int>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(ds.labels[static_cast<std::size_t>(i)]);
    return out;
}

template Tensor<float> assemble_batch<float>(const Dataset&, const std::vector<int>&, bool, Rng*);
template Tensor<double> assemble_batch<double>(const Dataset&, const std::vector<int>&, bool,
                                               Rng*);

}  // namespace drnet
