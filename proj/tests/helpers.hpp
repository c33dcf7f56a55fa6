#pragma once

#include "davqa/backbone.hpp"

namespace davqa::testing {

// Small geometry used where full desk scale would just slow the suite down.
inline BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.d_v = 16;
    cfg.d_q = 16;
    cfg.vision_layers = 3;
    cfg.decoder_layers = 2;
    cfg.heads = 4;
    cfg.vocab_size = 12;
    cfg.max_answer_len = 4;
    cfg.max_text_len = 16;
    return cfg;
}

// Reduced-depth geometry that still accepts the generated 32x32 samples and
// their 64-token vocabulary.
inline BackboneConfig small_config() {
    BackboneConfig cfg;
    cfg.d_v = 32;
    cfg.d_q = 32;
    cfg.vision_layers = 4;
    cfg.decoder_layers = 2;
    cfg.heads = 4;
    cfg.max_text_len = 32;
    return cfg;
}

inline Image ramp_image(std::size_t side) {
    Image img(side * side);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 17) / 17.0;
    return img;
}

}  // namespace davqa::testing
