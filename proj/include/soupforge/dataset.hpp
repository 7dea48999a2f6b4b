#pragma once

#include <cstdint>
#include <string>

#include "soupforge/model.hpp"

namespace soupforge {

// Seeded class-blob image generator. Every class owns a Gaussian-bump
// constellation (the coarse, robust half of its signal) plus `modes` fixed
// high-frequency textures, of which each sample draws one. Multi-modal
// texture evidence forces classifiers to learn an either/or over templates
// instead of a single linear one, which is what gives the loss surface
// structure worth averaging over, while the bump backbone keeps the classes
// recognizable to differently shaped models. Samples add pixel
// noise and clip to [0,1]; margin scales the whole class signal, so large
// margins give trivially separable data and small ones a dataset worth
// attacking.
struct SynthSpec {
    int classes = 10;
    int channels = 1;
    int height = 28;
    int width = 28;
    int count = 2000;
    int modes = 3;
    double margin = 1.0;
    double noise = 0.18;
    double texture = 0.28;  // texture amplitude relative to the bumps
};

ImageBatch synth_dataset(const SynthSpec& spec, std::uint64_t seed);

// IDX image/label files (big-endian headers, u8 payload). Pixels map to
// [0,1] by dividing by 255.
ImageBatch load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const ImageBatch& batch, const std::string& images_path, const std::string& labels_path);

}  // namespace soupforge
