#pragma once

#include "usis/model.hpp"

namespace oracle {

/// Same wiring as the default model, much narrower, so model-level tests
/// run in well under a second per step.
inline usis::ModelConfig tiny_model_config(std::uint64_t seed = 1)
{
    usis::ModelConfig c;
    c.encoder.depth = 4;
    c.encoder.dim = 32;
    c.encoder.heads = 2;
    c.encoder.mlp_ratio = 2;
    c.encoder.replace_start = 2;
    c.encoder.replace_stride = 1;
    c.encoder.neck_dim = 16;
    c.sfpg.in_channels = 32;
    c.sfpg.fusion_channels = 8;
    c.sfpg.prompt_dim = 16;
    c.sfpg.prompt_hidden = 32;
    c.sfpg.roi_size = 4;
    c.decoder.dim = 16;
    c.decoder.heads = 2;
    c.decoder.mlp_dim = 32;
    c.decoder.upscale_channels = 8;
    c.seed = seed;
    return c;
}

} // namespace oracle
