#pragma once

#include <string>
#include <vector>

#include "hybridlm/tensor.hpp"
#include "hybridlm/layers.hpp"

namespace hlm::vision {

struct Image {
    size_t height = 0, width = 0, channels = 3;
    std::vector<double> pixels;  // h*w*c, row-major, values clamped to [0,1]

    static Image create(size_t h, size_t w, size_t c = 3, double fill = 0.0);
    double& at(size_t y, size_t x, size_t c) { return pixels[(y * width + x) * channels + c]; }
    double at(size_t y, size_t x, size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
    void clamp();
};

// uncompressed raster format: "HIMG", u32 width, u32 height, u32 channels,
// little-endian float32 payload
void save_image(const Image& img, const std::string& path);
Image load_image(const std::string& path);

struct PatchGrid {
    size_t g = 0;         // grid side
    size_t d_vision = 0;  // feature width
    Tensor tokens;        // [g*g, d_vision] raster order

    size_t count() const { return g * g; }
};

struct TokenSeq {
    size_t d_vision = 0;
    Tensor tokens;  // [n, d_vision]
};

struct EncoderConfig {
    size_t input_side = 96;
    size_t patch = 4;        // -> g = 24, 576 tokens
    size_t d_vision = 64;
    size_t n_layers = 2;
    size_t n_heads = 4;
    uint64_t seed = 0;

    size_t grid_side() const { return input_side / patch; }
    void validate() const;
};

// Small bidirectional attention encoder over patch embeddings. Frozen in all
// training stages; forward only needs to be deterministic per seed.
struct VisionEncoder {
    EncoderConfig cfg;
    Tensor patch_embed;  // [patch*patch*channels, d_vision]
    struct Block {
        RMSNormLayer norm_attn, norm_mlp;
        Tensor w_q, w_k, w_v, w_o;  // full multi-head, bidirectional
        SwiGLUMLP mlp;
    };
    std::vector<Block> blocks;
    RMSNormLayer final_norm;

    static VisionEncoder init(const EncoderConfig& cfg);
    PatchGrid encode(const Image& img) const;
    // patch embeddings before the attention stack (translation-symmetric)
    Tensor patchify_embed(const Image& img) const;
    NamedParams named_params() const;
};

enum class PoolKind { Mean, Max };

PatchGrid pool2d(const PatchGrid& grid, size_t factor = 2, PoolKind kind = PoolKind::Mean);
TokenSeq pool1d(const PatchGrid& grid, size_t factor = 4);

struct Projector {
    Tensor w1, b1;  // d_vision -> d_hidden
    Tensor w2, b2;  // d_hidden -> d_model

    static Projector init(Rng& rng, size_t d_vision, size_t d_hidden, size_t d_model);
    Tensor forward(const Tensor& tokens) const;  // tokenwise two-layer MLP, GELU between
    NamedParams named_params() const;
};

struct Segmented {
    Image main;                   // whole image resized to one tile
    std::vector<Image> subimages; // raster order over the padded canvas
    size_t rows = 0, cols = 0;
};

Segmented segment_image(const Image& img, size_t tile_side);

Image resize(const Image& img, size_t out_h, size_t out_w);

} // namespace hlm::vision
