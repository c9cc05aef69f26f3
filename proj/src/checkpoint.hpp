#pragma once

#include <memory>
#include <optional>

#include "backbone.hpp"
#include "train.hpp"

namespace drnet {

// Everything a checkpoint carries besides the architecture and blobs.
struct CheckpointMeta {
    int version = 1;
    std::string stage = "none";  // none | pretrain | finetune
    double final_tau = 3.0;
    std::string router_mode = "gumbel";
    std::uint64_t init_seed = 0;
    std::uint64_t train_seed = 0;
    std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
    std::array<double, 3> norm_std{1.0, 1.0, 1.0};
};

// Optimizer state to persist alongside the parameters, keyed like them.
struct OptimizerStateRef {
    const std::vector<Parameter<float>>* params = nullptr;   // for naming/order
    const std::vector<Tensor<float>>* velocity = nullptr;
};

// Container layout: a human-readable header (config, topology, stage, tau,
// seeds, normalization stats, a named-tensor index with shapes and byte
// offsets), a DATA marker, little-endian float32 blobs, and a trailing
// crc32 line covering every preceding byte.
void save_checkpoint(const std::string& path, const Network<float>& net,
                     const CheckpointMeta& meta,
                     const std::vector<Tensor<float>>* velocity = nullptr);

// Restores parameters into `net`; the stored config must match the
// network's bit for bit (differing fields are listed). Velocity buffers
// are restored when present in the file and requested.
CheckpointMeta load_checkpoint(const std::string& path, Network<float>& net,
                               std::vector<Tensor<float>>* velocity = nullptr);

// Reads only the stored BackboneConfig + meta, so callers can construct a
// matching network first.
BackboneConfig peek_checkpoint_config(const std::string& path, CheckpointMeta* meta = nullptr);

// Convenience: build the network the checkpoint describes and load into it.
std::unique_ptr<Network<float>> load_network(const std::string& path, CheckpointMeta* meta);

}  // namespace drnet
