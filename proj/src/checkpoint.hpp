#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace vce {

// PHSR checkpoint container: magic "PHSR", little-endian u32 header length,
// JSON header (config snapshot, step, rng state, tensor manifest with byte
// offsets into the payload), then the concatenated little-endian f32
// payload. save -> load -> save is byte-identical.

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json config;  // TrainConfig snapshot
    std::int64_t step = 0;
    std::int64_t adam_t = 0;
    std::string rng_state;
    std::vector<CheckpointTensor> tensors;  // params then optimizer moments

    const CheckpointTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vce
