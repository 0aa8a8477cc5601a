#include "hybridlm/vision.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace hlm::vision {

Image Image::create(size_t h, size_t w, size_t c, double fill) {
    Image img;
    img.height = h;
    img.width = w;
    img.channels = c;
    img.pixels.assign(h * w * c, fill);
    return img;
}

void Image::clamp() {
    for (auto& p : pixels) p = std::clamp(p, 0.0, 1.0);
}

void save_image(const Image& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write image: " + path);
    os.write("HIMG", 4);
    uint32_t w = uint32_t(img.width), h = uint32_t(img.height), c = uint32_t(img.channels);
    os.write(reinterpret_cast<char*>(&w), 4);
    os.write(reinterpret_cast<char*>(&h), 4);
    os.write(reinterpret_cast<char*>(&c), 4);
    for (double p : img.pixels) {
        float f = float(p);
        os.write(reinterpret_cast<char*>(&f), 4);
    }
}

Image load_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "HIMG", 4) != 0)
        throw std::runtime_error("not a raster image file: " + path);
    uint32_t w, h, c;
    is.read(reinterpret_cast<char*>(&w), 4);
    is.read(reinterpret_cast<char*>(&h), 4);
    is.read(reinterpret_cast<char*>(&c), 4);
    if (!is) throw std::runtime_error("image header truncated: " + path);
    Image img = Image::create(h, w, c);
    for (auto& p : img.pixels) {
        float f;
        if (!is.read(reinterpret_cast<char*>(&f), 4))
            throw std::runtime_error("image payload truncated: " + path);
        p = double(f);
    }
    img.clamp();
    return img;
}

void EncoderConfig::validate() const {
    if (patch == 0 || input_side == 0 || input_side % patch != 0)
        throw ShapeError("EncoderConfig: input_side " + std::to_string(input_side) +
                         " not divisible by patch " + std::to_string(patch));
    if (d_vision % n_heads != 0)
        throw ShapeError("EncoderConfig: d_vision not divisible by n_heads");
}

VisionEncoder VisionEncoder::init(const EncoderConfig& cfg) {
    cfg.validate();
    VisionEncoder e;
    e.cfg = cfg;
    Rng rng(cfg.seed ^ 0x5649534e);  // vision stream
    size_t pvec = cfg.patch * cfg.patch * 3;
    e.patch_embed = Tensor::randn(rng, {pvec, cfg.d_vision}, 1.0 / std::sqrt(double(pvec)));
    double out_scale = 0.02 / std::sqrt(2.0 * double(cfg.n_layers));
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        Block b;
        b.norm_attn = RMSNormLayer::init(cfg.d_vision);
        b.norm_mlp = RMSNormLayer::init(cfg.d_vision);
        b.w_q = Tensor::randn(rng, {cfg.d_vision, cfg.d_vision}, 0.02);
        b.w_k = Tensor::randn(rng, {cfg.d_vision, cfg.d_vision}, 0.02);
        b.w_v = Tensor::randn(rng, {cfg.d_vision, cfg.d_vision}, 0.02);
        b.w_o = Tensor::randn(rng, {cfg.d_vision, cfg.d_vision}, out_scale);
        b.mlp = SwiGLUMLP::init(rng, cfg.d_vision, 2 * cfg.d_vision, out_scale);
        e.blocks.push_back(std::move(b));
    }
    e.final_norm = RMSNormLayer::init(cfg.d_vision);
    return e;
}

Tensor VisionEncoder::patchify_embed(const Image& img) const {
    if (img.height != cfg.input_side || img.width != cfg.input_side || img.channels != 3)
        throw ShapeError("encode: image " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " does not match encoder side " +
                         std::to_string(cfg.input_side));
    size_t g = cfg.grid_side(), P = cfg.patch;
    size_t pvec = P * P * 3;
    std::vector<double> patches(g * g * pvec);
    for (size_t py = 0; py < g; ++py)
        for (size_t px = 0; px < g; ++px) {
            double* dst = patches.data() + (py * g + px) * pvec;
            for (size_t y = 0; y < P; ++y)
                for (size_t x = 0; x < P; ++x)
                    for (size_t c = 0; c < 3; ++c)
                        dst[(y * P + x) * 3 + c] = img.at(py * P + y, px * P + x, c);
        }
    return matmul(Tensor::make({g * g, pvec}, std::move(patches)), patch_embed);
}

static Tensor bidir_attention(const Tensor& x, const VisionEncoder::Block& b, size_t n_heads) {
    size_t d = x.cols();
    size_t hd = d / n_heads;
    Tensor q = matmul(x, b.w_q), k = matmul(x, b.w_k), v = matmul(x, b.w_v);
    double inv_sqrt = 1.0 / std::sqrt(double(hd));
    std::vector<Tensor> outs;
    for (size_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * hd, hd);
        Tensor kh = slice_cols(k, h * hd, hd);
        Tensor vh = slice_cols(v, h * hd, hd);
        Tensor probs = softmax_lastdim(scale(matmul(qh, transpose(kh)), inv_sqrt));
        outs.push_back(matmul(probs, vh));
    }
    return matmul(concat_cols(outs), b.w_o);
}

PatchGrid VisionEncoder::encode(const Image& img) const {
    Tensor x = patchify_embed(img);
    for (const auto& b : blocks) {
        x = add(x, bidir_attention(b.norm_attn.forward(x), b, cfg.n_heads));
        x = add(x, b.mlp.forward(b.norm_mlp.forward(x)));
    }
    PatchGrid grid;
    grid.g = cfg.grid_side();
    grid.d_vision = cfg.d_vision;
    grid.tokens = final_norm.forward(x);
    return grid;
}

NamedParams VisionEncoder::named_params() const {
    NamedParams out;
    out.emplace_back("patch_embed", patch_embed);
    for (size_t i = 0; i < blocks.size(); ++i) {
        std::string p = "block" + std::to_string(i);
        blocks[i].norm_attn.collect(out, p + ".norm_attn");
        blocks[i].norm_mlp.collect(out, p + ".norm_mlp");
        out.emplace_back(p + ".w_q", blocks[i].w_q);
        out.emplace_back(p + ".w_k", blocks[i].w_k);
        out.emplace_back(p + ".w_v", blocks[i].w_v);
        out.emplace_back(p + ".w_o", blocks[i].w_o);
        blocks[i].mlp.collect(out, p + ".mlp");
    }
    final_norm.collect(out, "final_norm");
    return out;
}

PatchGrid pool2d(const PatchGrid& grid, size_t factor, PoolKind kind) {
    if (factor == 0 || grid.g % factor != 0)
        throw ShapeError("pool2d: grid side " + std::to_string(grid.g) +
                         " not divisible by factor " + std::to_string(factor));
    size_t go = grid.g / factor, d = grid.d_vision;
    std::vector<double> out(go * go * d, kind == PoolKind::Max ? -1e300 : 0.0);
    const auto& in = grid.tokens.data();
    for (size_t y = 0; y < grid.g; ++y)
        for (size_t x = 0; x < grid.g; ++x) {
            size_t oy = y / factor, ox = x / factor;
            for (size_t j = 0; j < d; ++j) {
                double v = in[(y * grid.g + x) * d + j];
                double& o = out[(oy * go + ox) * d + j];
                if (kind == PoolKind::Max)
                    o = std::max(o, v);
                else
                    o += v;
            }
        }
    if (kind == PoolKind::Mean) {
        double inv = 1.0 / double(factor * factor);
        for (auto& v : out) v *= inv;
    }
    PatchGrid res;
    res.g = go;
    res.d_vision = d;
    res.tokens = Tensor::make({go * go, d}, std::move(out));
    return res;
}

TokenSeq pool1d(const PatchGrid& grid, size_t factor) {
    size_t n = grid.count();
    if (factor == 0 || n % factor != 0)
        throw ShapeError("pool1d: token count " + std::to_string(n) +
                         " not divisible by factor " + std::to_string(factor));
    size_t no = n / factor, d = grid.d_vision;
    std::vector<double> out(no * d, 0.0);
    const auto& in = grid.tokens.data();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) out[(i / factor) * d + j] += in[i * d + j];
    double inv = 1.0 / double(factor);
    for (auto& v : out) v *= inv;
    TokenSeq seq;
    seq.d_vision = d;
    seq.tokens = Tensor::make({no, d}, std::move(out));
    return seq;
}

Projector Projector::init(Rng& rng, size_t d_vision, size_t d_hidden, size_t d_model) {
    Projector p;
    p.w1 = Tensor::randn(rng, {d_vision, d_hidden}, 0.02);
    p.b1 = Tensor::zeros({d_hidden});
    p.w2 = Tensor::randn(rng, {d_hidden, d_model}, 0.02);
    p.b2 = Tensor::zeros({d_model});
    return p;
}

Tensor Projector::forward(const Tensor& tokens) const {
    if (tokens.cols() != w1.rows())
        throw ShapeError("project: feature width " + std::to_string(tokens.cols()) +
                         " vs d_vision " + std::to_string(w1.rows()));
    return add_bias(matmul(gelu(add_bias(matmul(tokens, w1), b1)), w2), b2);
}

NamedParams Projector::named_params() const {
    return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
}

Image resize(const Image& img, size_t out_h, size_t out_w) {
    Image out = Image::create(out_h, out_w, img.channels);
    for (size_t y = 0; y < out_h; ++y)
        for (size_t x = 0; x < out_w; ++x) {
            // bilinear sample at the source-space center of the target pixel
            double sy = (double(y) + 0.5) * double(img.height) / double(out_h) - 0.5;
            double sx = (double(x) + 0.5) * double(img.width) / double(out_w) - 0.5;
            sy = std::clamp(sy, 0.0, double(img.height - 1));
            sx = std::clamp(sx, 0.0, double(img.width - 1));
            size_t y0 = size_t(sy), x0 = size_t(sx);
            size_t y1 = std::min(y0 + 1, img.height - 1);
            size_t x1 = std::min(x0 + 1, img.width - 1);
            double fy = sy - double(y0), fx = sx - double(x0);
            for (size_t c = 0; c < img.channels; ++c) {
                double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                           fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
                out.at(y, x, c) = v;
            }
        }
    return out;
}

Segmented segment_image(const Image& img, size_t tile_side) {
    if (tile_side == 0) throw ShapeError("segment_image: tile_side must be positive");
    Segmented seg;
    seg.rows = (img.height + tile_side - 1) / tile_side;
    seg.cols = (img.width + tile_side - 1) / tile_side;
    // zero-pad right/bottom to tile multiples
    Image padded = Image::create(seg.rows * tile_side, seg.cols * tile_side, img.channels);
    for (size_t y = 0; y < img.height; ++y)
        for (size_t x = 0; x < img.width; ++x)
            for (size_t c = 0; c < img.channels; ++c)
                padded.at(y, x, c) = img.at(y, x, c);
    for (size_t r = 0; r < seg.rows; ++r)
        for (size_t cc = 0; cc < seg.cols; ++cc) {
            Image tile = Image::create(tile_side, tile_side, img.channels);
            for (size_t y = 0; y < tile_side; ++y)
                for (size_t x = 0; x < tile_side; ++x)
                    for (size_t c = 0; c < img.channels; ++c)
                        tile.at(y, x, c) = padded.at(r * tile_side + y, cc * tile_side + x, c);
            seg.subimages.push_back(std::move(tile));
        }
    seg.main = resize(img, tile_side, tile_side);
    return seg;
}

} // namespace hlm::vision
