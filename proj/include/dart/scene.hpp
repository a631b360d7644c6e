// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dart/tensor.hpp"

namespace dart {

/// Synthetic test scene: colored rectangles on a noisy background.
struct SceneParams {
    std::uint64_t seed = 0;
    std::size_t image_size = 64;
    std::size_t num_rects = 3;
    double noise = 0.05;
};

struct PlantedRect {
    std::string label;
    std::array<double, 4> box{};  // cx, cy, w, h in [0, 1]
    std::array<double, 3> color{};
};

struct Scene {
    Tensor image;  // [image_size, image_size, 3] in [0, 1]
    std::vector<PlantedRect> rects;
};

/// Labels drawn for planted rectangles.
const std::vector<std::string>& scene_labels();

/// Deterministic in `params` alone.
Scene render_scene(const SceneParams& params);

/// `count` scenes with seeds base_seed, base_seed+1, ...
std::vector<Tensor> synthetic_images(std::uint64_t base_seed, std::size_t count,
                                     std::size_t image_size = 64);

}  // namespace dart
