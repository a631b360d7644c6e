// SPDX-License-Identifier: Apache-2.0
#include "dart/scene.hpp"

#include <algorithm>

#include "dart/rng.hpp"

namespace dart {

const std::vector<std::string>& scene_labels() {
    static const std::vector<std::string> labels = {"car", "person", "bicycle", "dog", "bus", "tree"};
    return labels;
}

Scene render_scene(const SceneParams& params) {
    if (params.image_size == 0) throw std::invalid_argument("scene image_size must be positive");
    if (params.noise < 0.0) throw std::invalid_argument("scene noise must be non-negative");
    const CounterRng layout(params.seed, "scene.layout");
    const CounterRng noise(params.seed, "scene.noise");
    const std::size_t s = params.image_size;

    Scene scene;
    std::vector<double> px(s * s * 3);
    for (std::size_t c = 0; c < 3; ++c) {
        const double base = 0.3 + 0.4 * layout.uniform(c);
        for (std::size_t i = 0; i < s * s; ++i) px[i * 3 + c] = base;
    }

    std::uint64_t draw = 3;
    const auto& labels = scene_labels();
    for (std::size_t r = 0; r < params.num_rects; ++r) {
        PlantedRect rect;
        rect.label = labels[layout.bits(draw++) % labels.size()];
        const double w = 0.15 + 0.35 * layout.uniform(draw++);
        const double h = 0.15 + 0.35 * layout.uniform(draw++);
        const double cx = w / 2 + (1.0 - w) * layout.uniform(draw++);
        const double cy = h / 2 + (1.0 - h) * layout.uniform(draw++);
        rect.box = {cx, cy, w, h};
        for (auto& c : rect.color) c = layout.uniform(draw++);

        const auto x0 = static_cast<std::size_t>((cx - w / 2) * static_cast<double>(s));
        const auto x1 = std::min(s, static_cast<std::size_t>((cx + w / 2) * static_cast<double>(s)));
        const auto y0 = static_cast<std::size_t>((cy - h / 2) * static_cast<double>(s));
        const auto y1 = std::min(s, static_cast<std::size_t>((cy + h / 2) * static_cast<double>(s)));
        for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x)
                for (std::size_t c = 0; c < 3; ++c) px[(y * s + x) * 3 + c] = rect.color[c];
        scene.rects.push_back(rect);
    }

    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = std::clamp(px[i] + params.noise * noise.symmetric(i), 0.0, 1.0);
    }
    scene.image = Tensor({s, s, 3}, std::move(px));
    return scene;
}

std::vector<Tensor> synthetic_images(std::uint64_t base_seed, std::size_t count,
                                     std::size_t image_size) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < count; ++i) {
        SceneParams params;
        params.seed = base_seed + i;
        params.image_size = image_size;
        out.push_back(render_scene(params).image);
    }
    return out;
}

}  // namespace dart
