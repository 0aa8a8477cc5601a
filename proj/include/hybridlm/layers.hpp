#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hybridlm/tensor.hpp"

namespace hlm {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct RMSNormLayer {
    Tensor gain;   // [d_model]
    double eps = 1e-6;

    static RMSNormLayer init(size_t d_model);
    Tensor forward(const Tensor& x) const { return rmsnorm_op(x, gain, eps); }
    void collect(NamedParams& out, const std::string& prefix) const;
};

struct SwiGLUMLP {
    Tensor w_gate;  // [d_model, d_ff]
    Tensor w_up;    // [d_model, d_ff]
    Tensor w_down;  // [d_ff, d_model]

    static SwiGLUMLP init(Rng& rng, size_t d_model, size_t d_ff, double out_scale);
    Tensor forward(const Tensor& x) const;
    size_t param_count() const { return w_gate.numel() + w_up.numel() + w_down.numel(); }
    void collect(NamedParams& out, const std::string& prefix) const;
};

// Append-only K/V store for one attention layer. Plain buffers, never part of
// the autodiff graph.
struct KVCacheLayer {
    size_t kv_dim = 0;     // n_kv_heads * head_dim
    size_t t_so_far = 0;
    std::vector<double> k; // t_so_far * kv_dim
    std::vector<double> v;

    size_t bytes() const { return (k.size() + v.size()) * sizeof(double); }
};

struct GQAAttention {
    size_t n_heads = 0, n_kv_heads = 0, head_dim = 0;
    Tensor w_q;  // [d_model, n_heads*head_dim]
    Tensor w_k;  // [d_model, n_kv_heads*head_dim]
    Tensor w_v;
    Tensor w_o;  // [n_heads*head_dim, d_model]

    static GQAAttention init(Rng& rng, size_t d_model, size_t n_heads, size_t n_kv_heads,
                             size_t head_dim, double out_scale);
    // cache == nullptr: plain causal forward over x alone.
    // cache != nullptr: x continues after the cached positions; cache is extended.
    Tensor forward(const Tensor& x, KVCacheLayer* cache = nullptr) const;
    void collect(NamedParams& out, const std::string& prefix) const;
};

// Constant-size recurrent state of one selective-SSM layer.
struct SSMState {
    std::vector<double> h;            // d_inner * d_state
    std::vector<double> conv_window;  // (d_conv-1) * d_inner, oldest first

    size_t bytes() const { return (h.size() + conv_window.size()) * sizeof(double); }
};

enum class ScanMode { Sequential, Parallel };

struct SelectiveSSM {
    size_t d_model = 0, d_inner = 0, d_state = 16, d_conv = 4;
    Tensor in_proj;   // [d_model, 2*d_inner]  (stream | gate)
    Tensor conv_w;    // [d_inner, d_conv]
    Tensor w_dt;      // [d_inner, d_inner]
    Tensor b_dt;      // [d_inner]
    Tensor w_b;       // [d_inner, d_state]
    Tensor w_c;       // [d_inner, d_state]
    Tensor a_log;     // [d_inner, d_state], A = -exp(a_log)
    Tensor d_skip;    // [d_inner]
    Tensor out_proj;  // [d_inner, d_model]

    static SelectiveSSM init(Rng& rng, size_t d_model, size_t d_inner, size_t d_state,
                             size_t d_conv, double out_scale);
    SSMState fresh_state() const;
    // whole-sequence forward; state==nullptr starts from zeros and is not advanced
    Tensor forward(const Tensor& x, ScanMode mode = ScanMode::Sequential,
                   SSMState* state = nullptr) const;
    Tensor step(const Tensor& x_t, SSMState& state) const;
    void collect(NamedParams& out, const std::string& prefix) const;
};

struct RoutingRecord {
    // per token: (expert index, combination weight), top_k entries each
    std::vector<std::vector<std::pair<size_t, double>>> tokens;
};

struct MoELayer {
    size_t n_experts = 16, top_k = 2;
    Tensor w_router;                // [d_model, n_experts]
    std::vector<SwiGLUMLP> experts;

    static MoELayer init(Rng& rng, size_t d_model, size_t d_ff, size_t n_experts,
                         size_t top_k, double out_scale);
    std::pair<Tensor, RoutingRecord> forward(const Tensor& x) const;
    void collect(NamedParams& out, const std::string& prefix) const;
};

} // namespace hlm
