#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "ymask/model.h"
#include "ymask/module.h"

namespace ymask {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;  // bytes into the blob
};

// Text header (format line, "option" lines, one "tensor name f32 shape offset"
// line per entry, "end") followed by the little-endian float32 blob.
void save_checkpoint(const std::filesystem::path& path, const ParamList<float>& params, const ModelOptions& options);

struct CheckpointHeader {
    ModelOptions options;
    std::vector<CheckpointEntry> entries;
};

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

// Fills `params` in place. Every parameter must appear with its exact shape
// and the checkpoint may hold nothing else.
void load_checkpoint(const std::filesystem::path& path, ParamList<float>& params);

}  // namespace ymask
