#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hybridlm/layers.hpp"

namespace hlm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class MixerKind { Mamba, Attention };
enum class MlpKind { Dense, MoE };

struct LayerSpec {
    MixerKind mixer = MixerKind::Mamba;
    MlpKind mlp = MlpKind::Dense;
    size_t layer_index = 0;
};

// Structural description of the hybrid stack. Defaults give 4 stacks of 8
// layers with one attention layer each (7:1 Mamba:attention) and MoE on every
// other layer.
struct HybridConfig {
    size_t d_model = 256;
    size_t d_ff = 704;
    size_t vocab_size = 512;
    size_t n_stacks = 4;
    size_t layers_per_stack = 8;
    size_t attn_position_in_stack = 3;  // 4th layer of each stack
    size_t moe_stride = 2;              // 0 = dense everywhere
    size_t n_experts = 16;
    size_t top_k = 2;
    size_t n_heads = 8;
    size_t n_kv_heads = 2;
    size_t head_dim = 32;
    size_t d_state = 16;
    size_t d_conv = 4;
    size_t d_inner = 0;                 // 0 = 2*d_model
    size_t tokens_per_image = 144;

    size_t n_layers() const { return n_stacks * layers_per_stack; }
    size_t inner_dim() const { return d_inner ? d_inner : 2 * d_model; }
    size_t n_attn_layers() const { return n_stacks; }
    size_t n_mamba_layers() const { return n_layers() - n_stacks; }
    size_t n_moe_layers() const;
    void validate() const;  // throws ConfigError naming the violated invariant
    std::vector<LayerSpec> layer_specs() const;

    std::string to_kv_text() const;
    static HybridConfig from_kv_text(const std::string& text);
};

struct HybridLayer {
    LayerSpec spec;
    RMSNormLayer norm_mixer;
    RMSNormLayer norm_mlp;
    std::optional<GQAAttention> attn;
    std::optional<SelectiveSSM> ssm;
    std::optional<SwiGLUMLP> dense_mlp;
    std::optional<MoELayer> moe;
};

struct ParamCounts {
    size_t total = 0;
    size_t active = 0;
};

struct HybridModel {
    HybridConfig cfg;
    Tensor embedding;  // [vocab, d_model]; output head is tied to this
    std::vector<HybridLayer> layers;
    RMSNormLayer final_norm;

    NamedParams named_params() const;
    void set_requires_grad(bool b);
};

HybridModel build_model(const HybridConfig& cfg, uint64_t seed);

// Per-sequence mutable inference state: KV caches grow with position_count,
// SSM states stay constant-size.
struct DecodeSession {
    const HybridModel* model = nullptr;
    std::vector<KVCacheLayer> kv;    // one per layer; used only for attention layers
    std::vector<SSMState> ssm;       // one per layer; used only for Mamba layers
    size_t position_count = 0;

    explicit DecodeSession(const HybridModel& m);
    size_t bytes() const;
    size_t kv_bytes() const;
    size_t ssm_bytes() const;
};

// token ids with optional image-slot embeddings scattered over slot_rows
struct ModelInput {
    std::vector<int> tokens;
    std::vector<size_t> slot_rows;
    Tensor slot_embeddings;  // [slot_rows.size(), d_model] when slots present

    static ModelInput text(std::vector<int> ids) { return {std::move(ids), {}, {}}; }
};

Tensor forward_full(const HybridModel& m, const ModelInput& input,
                    ScanMode scan = ScanMode::Sequential);
// advances all caches/states by input length; returns last-position logits [vocab_size]
std::vector<double> prefill(DecodeSession& s, const ModelInput& input);
std::vector<double> decode_step(DecodeSession& s, int token_id);

struct PruneResult {
    HybridModel model;
    bool changed = false;  // false: input was already dense (no-op with warning)
};
PruneResult prune_to_expert0(const HybridModel& m);

ParamCounts count_params(const HybridModel& m);

struct QuantizedTensorInfo {
    std::string name;
    std::vector<double> scales;      // per output channel
    std::vector<int8_t> values;      // row-major like the source
};

struct QuantizedModel {
    HybridModel model;  // weights replaced by their dequantized values
    std::vector<QuantizedTensorInfo> tensors;
};

// per-output-channel symmetric absmax int8 on all matmul weights; embeddings
// and norm gains stay full precision
QuantizedModel quantize_int8_weights(const HybridModel& m);

struct GreedyTrace {
    std::vector<int> prompt;      // prompt token ids (slots included as placeholders)
    std::vector<int> generated;
};

// temperature-zero decoding; allowed_ids restricts the argmax when non-empty
GreedyTrace greedy_decode(const HybridModel& m, const ModelInput& input,
                          size_t max_new_tokens,
                          const std::vector<int>& allowed_ids = {},
                          int eos_id = -1);

// side-by-side greedy runs; returns first step where outputs differ, or -1
long first_divergence(const HybridModel& a, const HybridModel& b,
                      const ModelInput& input, size_t steps);

// ---- checkpoint I/O (little-endian, versioned, per-tensor checksums) ----

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void save_params(const std::string& path, const std::string& config_text,
                 const NamedParams& params);
struct LoadedParams {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> params;
};
LoadedParams load_params(const std::string& path);

void save_checkpoint(const HybridModel& m, const std::string& path);
HybridModel load_checkpoint(const std::string& path);

// content hash used for manifests and report chaining
uint64_t fnv1a_file(const std::string& path);
uint64_t params_hash(const NamedParams& params);

} // namespace hlm
