#include "hybridlm/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hlm {

static constexpr double kInitScale = 0.02;

RMSNormLayer RMSNormLayer::init(size_t d_model) {
    RMSNormLayer l;
    l.gain = Tensor::full({d_model}, 1.0);
    return l;
}

void RMSNormLayer::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
}

SwiGLUMLP SwiGLUMLP::init(Rng& rng, size_t d_model, size_t d_ff, double out_scale) {
    SwiGLUMLP m;
    m.w_gate = Tensor::randn(rng, {d_model, d_ff}, kInitScale);
    m.w_up = Tensor::randn(rng, {d_model, d_ff}, kInitScale);
    m.w_down = Tensor::randn(rng, {d_ff, d_model}, out_scale);
    return m;
}

Tensor SwiGLUMLP::forward(const Tensor& x) const {
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

void SwiGLUMLP::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w_gate", w_gate);
    out.emplace_back(prefix + ".w_up", w_up);
    out.emplace_back(prefix + ".w_down", w_down);
}

GQAAttention GQAAttention::init(Rng& rng, size_t d_model, size_t n_heads, size_t n_kv_heads,
                                size_t head_dim, double out_scale) {
    if (n_kv_heads == 0 || n_heads % n_kv_heads != 0)
        throw ShapeError("GQAAttention: n_heads " + std::to_string(n_heads) +
                         " not divisible by n_kv_heads " + std::to_string(n_kv_heads));
    GQAAttention a;
    a.n_heads = n_heads;
    a.n_kv_heads = n_kv_heads;
    a.head_dim = head_dim;
    a.w_q = Tensor::randn(rng, {d_model, n_heads * head_dim}, kInitScale);
    a.w_k = Tensor::randn(rng, {d_model, n_kv_heads * head_dim}, kInitScale);
    a.w_v = Tensor::randn(rng, {d_model, n_kv_heads * head_dim}, kInitScale);
    a.w_o = Tensor::randn(rng, {n_heads * head_dim, d_model}, out_scale);
    return a;
}

Tensor GQAAttention::forward(const Tensor& x, KVCacheLayer* cache) const {
    size_t T = x.rows();
    size_t kv_dim = n_kv_heads * head_dim;
    Tensor q = matmul(x, w_q);
    Tensor k_new = matmul(x, w_k);
    Tensor v_new = matmul(x, w_v);

    size_t offset = cache ? cache->t_so_far : 0;
    Tensor k_all = k_new, v_all = v_new;
    if (cache && cache->t_so_far > 0) {
        Tensor k_old = Tensor::make({cache->t_so_far, kv_dim}, cache->k);
        Tensor v_old = Tensor::make({cache->t_so_far, kv_dim}, cache->v);
        k_all = concat_rows({k_old, k_new});
        v_all = concat_rows({v_old, v_new});
    }

    size_t group = n_heads / n_kv_heads;
    double inv_sqrt = 1.0 / std::sqrt(double(head_dim));
    std::vector<Tensor> head_outs;
    head_outs.reserve(n_heads);
    for (size_t h = 0; h < n_heads; ++h) {
        size_t kvh = h / group;
        Tensor qh = slice_cols(q, h * head_dim, head_dim);
        Tensor kh = slice_cols(k_all, kvh * head_dim, head_dim);
        Tensor vh = slice_cols(v_all, kvh * head_dim, head_dim);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        Tensor probs = causal_softmax(scores, offset);
        head_outs.push_back(matmul(probs, vh));
    }
    Tensor out = matmul(concat_cols(head_outs), w_o);

    if (cache) {
        cache->kv_dim = kv_dim;
        cache->k.insert(cache->k.end(), k_new.data().begin(), k_new.data().end());
        cache->v.insert(cache->v.end(), v_new.data().begin(), v_new.data().end());
        cache->t_so_far += T;
    }
    return out;
}

void GQAAttention::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w_q", w_q);
    out.emplace_back(prefix + ".w_k", w_k);
    out.emplace_back(prefix + ".w_v", w_v);
    out.emplace_back(prefix + ".w_o", w_o);
}

SelectiveSSM SelectiveSSM::init(Rng& rng, size_t d_model, size_t d_inner, size_t d_state,
                                size_t d_conv, double out_scale) {
    SelectiveSSM s;
    s.d_model = d_model;
    s.d_inner = d_inner;
    s.d_state = d_state;
    s.d_conv = d_conv;
    s.in_proj = Tensor::randn(rng, {d_model, 2 * d_inner}, kInitScale);
    s.conv_w = Tensor::randn(rng, {d_inner, d_conv}, 0.2);
    s.w_dt = Tensor::randn(rng, {d_inner, d_inner}, kInitScale);
    // bias so that softplus lands near a small positive step size
    s.b_dt = Tensor::full({d_inner}, -3.0);
    s.w_b = Tensor::randn(rng, {d_inner, d_state}, kInitScale);
    s.w_c = Tensor::randn(rng, {d_inner, d_state}, kInitScale);
    // A = -exp(a_log); init a_log = log(1..d_state) style ramp, kept simple: log(s+1)
    {
        std::vector<double> al(d_inner * d_state);
        for (size_t c = 0; c < d_inner; ++c)
            for (size_t st = 0; st < d_state; ++st)
                al[c * d_state + st] = std::log(double(st + 1));
        s.a_log = Tensor::make({d_inner, d_state}, std::move(al));
    }
    s.d_skip = Tensor::full({d_inner}, 1.0);
    s.out_proj = Tensor::randn(rng, {d_inner, d_model}, out_scale);
    return s;
}

SSMState SelectiveSSM::fresh_state() const {
    SSMState st;
    st.h.assign(d_inner * d_state, 0.0);
    st.conv_window.assign((d_conv - 1) * d_inner, 0.0);
    return st;
}

Tensor SelectiveSSM::forward(const Tensor& x, ScanMode mode, SSMState* state) const {
    if (x.ndim() != 2 || x.dim(1) != d_model)
        throw ShapeError("SelectiveSSM: input " + shape_str(x.shape()) + " vs d_model " +
                         std::to_string(d_model));
    size_t T = x.rows();
    Tensor xz = matmul(x, in_proj);
    Tensor u = slice_cols(xz, 0, d_inner);
    Tensor z = slice_cols(xz, d_inner, d_inner);

    const std::vector<double>* window = state ? &state->conv_window : nullptr;
    Tensor uc = silu(conv_causal(u, conv_w, window));

    Tensor delta = softplus(add_bias(matmul(uc, w_dt), b_dt));
    Tensor b_in = matmul(uc, w_b);
    Tensor c_out = matmul(uc, w_c);
    Tensor a_mat = neg(exp_(a_log));
    Tensor decay = exp_(outer_mul(delta, a_mat));
    Tensor inc = chan_state_mul(mul(delta, uc), b_in);

    const std::vector<double>* h0 = state ? &state->h : nullptr;
    Tensor h = (mode == ScanMode::Parallel) ? linear_scan_parallel(decay, inc, h0)
                                            : linear_scan(decay, inc, h0);
    Tensor y = add(state_readout(h, c_out, d_state), col_scale(uc, d_skip));
    Tensor out = matmul(mul(y, silu(z)), out_proj);

    if (state) {
        std::copy_n(h.data().begin() + (T - 1) * d_inner * d_state, d_inner * d_state,
                    state->h.begin());
        // conv window holds the last d_conv-1 pre-conv stream values, oldest first
        size_t W = d_conv - 1;
        std::vector<double> nw(W * d_inner);
        for (size_t j = 0; j < W; ++j) {
            long src = long(T) - long(W) + long(j);
            for (size_t c = 0; c < d_inner; ++c) {
                nw[j * d_inner + c] = (src >= 0)
                    ? u.data()[size_t(src) * d_inner + c]
                    : state->conv_window[size_t(src + long(W)) * d_inner + c];
            }
        }
        state->conv_window = std::move(nw);
    }
    return out;
}

Tensor SelectiveSSM::step(const Tensor& x_t, SSMState& state) const {
    Tensor x2 = x_t.ndim() == 1 ? reshape(x_t, {1, d_model}) : x_t;
    return forward(x2, ScanMode::Sequential, &state);
}

void SelectiveSSM::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".in_proj", in_proj);
    out.emplace_back(prefix + ".conv_w", conv_w);
    out.emplace_back(prefix + ".w_dt", w_dt);
    out.emplace_back(prefix + ".b_dt", b_dt);
    out.emplace_back(prefix + ".w_b", w_b);
    out.emplace_back(prefix + ".w_c", w_c);
    out.emplace_back(prefix + ".a_log", a_log);
    out.emplace_back(prefix + ".d_skip", d_skip);
    out.emplace_back(prefix + ".out_proj", out_proj);
}

MoELayer MoELayer::init(Rng& rng, size_t d_model, size_t d_ff, size_t n_experts, size_t top_k,
                        double out_scale) {
    if (top_k == 0 || top_k > n_experts)
        throw ShapeError("MoELayer: top_k " + std::to_string(top_k) + " vs n_experts " +
                         std::to_string(n_experts));
    MoELayer m;
    m.n_experts = n_experts;
    m.top_k = top_k;
    m.w_router = Tensor::randn(rng, {d_model, n_experts}, kInitScale);
    m.experts.reserve(n_experts);
    for (size_t e = 0; e < n_experts; ++e)
        m.experts.push_back(SwiGLUMLP::init(rng, d_model, d_ff, out_scale));
    return m;
}

std::pair<Tensor, RoutingRecord> MoELayer::forward(const Tensor& x) const {
    size_t T = x.rows();
    Tensor logits = matmul(x, w_router);
    RoutingRecord rec;
    rec.tokens.resize(T);
    std::vector<Tensor> out_rows;
    out_rows.reserve(T);
    for (size_t t = 0; t < T; ++t) {
        // top_k by logit, ties broken toward the lower expert index
        std::vector<size_t> idx(n_experts);
        std::iota(idx.begin(), idx.end(), 0);
        const double* lrow = logits.data().data() + t * n_experts;
        std::stable_sort(idx.begin(), idx.end(),
                         [&](size_t a, size_t b) { return lrow[a] > lrow[b]; });
        idx.resize(top_k);

        Tensor row = slice_rows(x, t, 1);
        Tensor lrow_t = slice_rows(logits, t, 1);
        std::vector<Tensor> sel;
        for (size_t e : idx) sel.push_back(slice_cols(lrow_t, e, 1));
        Tensor weights = softmax_lastdim(concat_cols(sel));  // [1, top_k], sums to 1

        Tensor acc;
        for (size_t i = 0; i < top_k; ++i) {
            Tensor contrib = mul_scalar_t(experts[idx[i]].forward(row),
                                          slice_cols(weights, i, 1));
            acc = acc.defined() ? add(acc, contrib) : contrib;
            rec.tokens[t].emplace_back(idx[i], weights.data()[i]);
        }
        out_rows.push_back(acc);
    }
    return {concat_rows(out_rows), rec};
}

void MoELayer::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w_router", w_router);
    for (size_t e = 0; e < experts.size(); ++e)
        experts[e].collect(out, prefix + ".expert" + std::to_string(e));
}

} // namespace hlm
