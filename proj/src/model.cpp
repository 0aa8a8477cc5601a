#include "hybridlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hlm {

size_t HybridConfig::n_moe_layers() const {
    if (moe_stride == 0) return 0;
    size_t n = 0;
    for (size_t i = 0; i < layers_per_stack; ++i)
        if (i % moe_stride == 1 % moe_stride) ++n;
    return n * n_stacks;
}

void HybridConfig::validate() const {
    auto positive = [](size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string("HybridConfig: ") + name + " must be positive");
    };
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(n_stacks, "n_stacks");
    positive(layers_per_stack, "layers_per_stack");
    positive(n_heads, "n_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_dim, "head_dim");
    positive(d_state, "d_state");
    positive(d_conv, "d_conv");
    positive(tokens_per_image, "tokens_per_image");
    if (n_heads % n_kv_heads != 0)
        throw ConfigError("HybridConfig: n_heads " + std::to_string(n_heads) +
                          " not divisible by n_kv_heads " + std::to_string(n_kv_heads));
    if (attn_position_in_stack >= layers_per_stack)
        throw ConfigError("HybridConfig: attn_position_in_stack " +
                          std::to_string(attn_position_in_stack) + " >= layers_per_stack " +
                          std::to_string(layers_per_stack));
    if (moe_stride != 0) {
        positive(n_experts, "n_experts");
        positive(top_k, "top_k");
        if (top_k > n_experts)
            throw ConfigError("HybridConfig: top_k " + std::to_string(top_k) +
                              " > n_experts " + std::to_string(n_experts));
    }
}

std::vector<LayerSpec> HybridConfig::layer_specs() const {
    std::vector<LayerSpec> specs;
    specs.reserve(n_layers());
    for (size_t s = 0; s < n_stacks; ++s)
        for (size_t i = 0; i < layers_per_stack; ++i) {
            LayerSpec spec;
            spec.layer_index = s * layers_per_stack + i;
            spec.mixer = (i == attn_position_in_stack) ? MixerKind::Attention : MixerKind::Mamba;
            spec.mlp = (moe_stride != 0 && i % moe_stride == 1 % moe_stride) ? MlpKind::MoE
                                                                             : MlpKind::Dense;
            specs.push_back(spec);
        }
    return specs;
}

std::string HybridConfig::to_kv_text() const {
    std::ostringstream os;
    os << "d_model=" << d_model << "\nd_ff=" << d_ff << "\nvocab_size=" << vocab_size
       << "\nn_stacks=" << n_stacks << "\nlayers_per_stack=" << layers_per_stack
       << "\nattn_position_in_stack=" << attn_position_in_stack << "\nmoe_stride=" << moe_stride
       << "\nn_experts=" << n_experts << "\ntop_k=" << top_k << "\nn_heads=" << n_heads
       << "\nn_kv_heads=" << n_kv_heads << "\nhead_dim=" << head_dim << "\nd_state=" << d_state
       << "\nd_conv=" << d_conv << "\nd_inner=" << d_inner
       << "\ntokens_per_image=" << tokens_per_image << "\n";
    return os.str();
}

HybridConfig HybridConfig::from_kv_text(const std::string& text) {
    HybridConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::map<std::string, size_t*> fields = {
        {"d_model", &cfg.d_model},
        {"d_ff", &cfg.d_ff},
        {"vocab_size", &cfg.vocab_size},
        {"n_stacks", &cfg.n_stacks},
        {"layers_per_stack", &cfg.layers_per_stack},
        {"attn_position_in_stack", &cfg.attn_position_in_stack},
        {"moe_stride", &cfg.moe_stride},
        {"n_experts", &cfg.n_experts},
        {"top_k", &cfg.top_k},
        {"n_heads", &cfg.n_heads},
        {"n_kv_heads", &cfg.n_kv_heads},
        {"head_dim", &cfg.head_dim},
        {"d_state", &cfg.d_state},
        {"d_conv", &cfg.d_conv},
        {"d_inner", &cfg.d_inner},
        {"tokens_per_image", &cfg.tokens_per_image},
    };
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto it = fields.find(line.substr(0, eq));
        if (it != fields.end()) *it->second = std::stoull(line.substr(eq + 1));
    }
    return cfg;
}

HybridModel build_model(const HybridConfig& cfg, uint64_t seed) {
    cfg.validate();
    HybridModel m;
    m.cfg = cfg;
    Rng rng(seed);
    m.embedding = Tensor::randn(rng, {cfg.vocab_size, cfg.d_model}, 0.02);
    double out_scale = 0.02 / std::sqrt(2.0 * double(cfg.n_layers()));
    for (const LayerSpec& spec : cfg.layer_specs()) {
        HybridLayer layer;
        layer.spec = spec;
        layer.norm_mixer = RMSNormLayer::init(cfg.d_model);
        layer.norm_mlp = RMSNormLayer::init(cfg.d_model);
        if (spec.mixer == MixerKind::Attention)
            layer.attn = GQAAttention::init(rng, cfg.d_model, cfg.n_heads, cfg.n_kv_heads,
                                            cfg.head_dim, out_scale);
        else
            layer.ssm = SelectiveSSM::init(rng, cfg.d_model, cfg.inner_dim(), cfg.d_state,
                                           cfg.d_conv, out_scale);
        if (spec.mlp == MlpKind::MoE)
            layer.moe = MoELayer::init(rng, cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k,
                                       out_scale);
        else
            layer.dense_mlp = SwiGLUMLP::init(rng, cfg.d_model, cfg.d_ff, out_scale);
        m.layers.push_back(std::move(layer));
    }
    m.final_norm = RMSNormLayer::init(cfg.d_model);
    return m;
}

NamedParams HybridModel::named_params() const {
    NamedParams out;
    out.emplace_back("embedding", embedding);
    for (size_t i = 0; i < layers.size(); ++i) {
        std::string p = "layer" + std::to_string(i);
        layers[i].norm_mixer.collect(out, p + ".norm_mixer");
        layers[i].norm_mlp.collect(out, p + ".norm_mlp");
        if (layers[i].attn) layers[i].attn->collect(out, p + ".attn");
        if (layers[i].ssm) layers[i].ssm->collect(out, p + ".ssm");
        if (layers[i].moe) layers[i].moe->collect(out, p + ".moe");
        if (layers[i].dense_mlp) layers[i].dense_mlp->collect(out, p + ".mlp");
    }
    final_norm.collect(out, "final_norm");
    return out;
}

void HybridModel::set_requires_grad(bool b) {
    for (auto& [name, t] : named_params()) const_cast<Tensor&>(t).set_requires_grad(b);
}

DecodeSession::DecodeSession(const HybridModel& m) : model(&m) {
    kv.resize(m.layers.size());
    ssm.resize(m.layers.size());
    for (size_t i = 0; i < m.layers.size(); ++i)
        if (m.layers[i].ssm) ssm[i] = m.layers[i].ssm->fresh_state();
}

size_t DecodeSession::kv_bytes() const {
    size_t b = 0;
    for (auto& c : kv) b += c.bytes();
    return b;
}

size_t DecodeSession::ssm_bytes() const {
    size_t b = 0;
    for (size_t i = 0; i < ssm.size(); ++i)
        if (model->layers[i].ssm) b += ssm[i].bytes();
    return b;
}

size_t DecodeSession::bytes() const { return kv_bytes() + ssm_bytes(); }

static Tensor forward_impl(const HybridModel& m, const ModelInput& input, DecodeSession* session,
                           ScanMode scan) {
    if (input.tokens.empty()) throw ShapeError("forward: empty input");
    size_t n_slots = input.slot_embeddings.defined() ? input.slot_embeddings.rows() : 0;
    if (input.slot_rows.size() != n_slots)
        throw ShapeError("forward: " + std::to_string(input.slot_rows.size()) +
                         " slot rows vs " + std::to_string(n_slots) + " slot embeddings");
    Tensor x = embedding_rows(m.embedding, input.tokens);
    if (n_slots) x = row_scatter(x, input.slot_embeddings, input.slot_rows);
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const HybridLayer& L = m.layers[i];
        Tensor h = L.norm_mixer.forward(x);
        Tensor mixed;
        if (L.attn) {
            mixed = L.attn->forward(h, session ? &session->kv[i] : nullptr);
        } else {
            mixed = L.ssm->forward(h, scan, session ? &session->ssm[i] : nullptr);
        }
        x = add(x, mixed);
        Tensor h2 = L.norm_mlp.forward(x);
        Tensor mlp_out = L.moe ? L.moe->forward(h2).first : L.dense_mlp->forward(h2);
        x = add(x, mlp_out);
    }
    x = m.final_norm.forward(x);
    if (session) session->position_count += input.tokens.size();
    return matmul(x, transpose(m.embedding));
}

Tensor forward_full(const HybridModel& m, const ModelInput& input, ScanMode scan) {
    return forward_impl(m, input, nullptr, scan);
}

std::vector<double> prefill(DecodeSession& s, const ModelInput& input) {
    Tensor logits = forward_impl(*s.model, input, &s, ScanMode::Sequential);
    size_t V = logits.cols();
    size_t last = logits.rows() - 1;
    return std::vector<double>(logits.data().begin() + last * V,
                               logits.data().begin() + (last + 1) * V);
}

std::vector<double> decode_step(DecodeSession& s, int token_id) {
    ModelInput one;
    one.tokens = {token_id};
    Tensor logits = forward_impl(*s.model, one, &s, ScanMode::Sequential);
    return logits.data();
}

PruneResult prune_to_expert0(const HybridModel& m) {
    PruneResult res;
    res.changed = m.cfg.n_moe_layers() > 0;
    HybridConfig cfg = m.cfg;
    cfg.moe_stride = 0;
    res.model.cfg = cfg;
    res.model.embedding = m.embedding;
    res.model.final_norm = m.final_norm;
    for (const auto& L : m.layers) {
        HybridLayer nl;
        nl.spec = L.spec;
        nl.spec.mlp = MlpKind::Dense;
        nl.norm_mixer = L.norm_mixer;
        nl.norm_mlp = L.norm_mlp;
        nl.attn = L.attn;
        nl.ssm = L.ssm;
        nl.dense_mlp = L.moe ? L.moe->experts[0] : *L.dense_mlp;
        res.model.layers.push_back(std::move(nl));
    }
    return res;
}

ParamCounts count_params(const HybridModel& m) {
    ParamCounts pc;
    for (auto& [name, t] : m.named_params()) pc.total += t.numel();
    pc.active = pc.total;
    for (const auto& L : m.layers) {
        if (!L.moe) continue;
        size_t expert_params = 0;
        for (const auto& e : L.moe->experts) expert_params += e.param_count();
        size_t active_share = L.moe->top_k * L.moe->experts[0].param_count();
        pc.active -= expert_params;
        pc.active += active_share;
    }
    return pc;
}

static void quantize_tensor(Tensor& t, const std::string& name,
                            std::vector<QuantizedTensorInfo>& infos) {
    // per-output-channel (last dim) symmetric absmax
    size_t cols = t.shape().back();
    size_t rows = t.numel() / cols;
    QuantizedTensorInfo info;
    info.name = name;
    info.scales.assign(cols, 1.0);
    info.values.resize(t.numel());
    for (size_t j = 0; j < cols; ++j) {
        double amax = 0.0;
        for (size_t r = 0; r < rows; ++r)
            amax = std::max(amax, std::fabs(t.data()[r * cols + j]));
        info.scales[j] = amax > 0.0 ? amax / 127.0 : 1.0;
    }
    auto& data = t.mutable_data();
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < cols; ++j) {
            double q = std::nearbyint(data[r * cols + j] / info.scales[j]);
            q = std::clamp(q, -127.0, 127.0);
            info.values[r * cols + j] = int8_t(q);
            data[r * cols + j] = q * info.scales[j];
        }
    infos.push_back(std::move(info));
}

static bool is_matmul_weight(const std::string& name) {
    static const char* suffixes[] = {"w_gate", "w_up", "w_down", "w_q", "w_k", "w_v",
                                     "w_o", "w_router", "in_proj", "w_dt", "w_b",
                                     "w_c", "out_proj"};
    for (const char* s : suffixes) {
        std::string suf = std::string(".") + s;
        if (name.size() > suf.size() &&
            name.compare(name.size() - suf.size(), suf.size(), suf) == 0)
            return true;
    }
    return false;
}

QuantizedModel quantize_int8_weights(const HybridModel& m) {
    QuantizedModel qm;
    // fresh structure, then copy values so the source stays untouched
    qm.model = build_model(m.cfg, 0);
    NamedParams src = m.named_params();
    NamedParams dst = qm.model.named_params();
    for (size_t i = 0; i < src.size(); ++i) {
        Tensor& d = const_cast<Tensor&>(dst[i].second);
        d.mutable_data() = src[i].second.data();
    }
    for (auto& [name, t] : dst)
        if (is_matmul_weight(name)) quantize_tensor(const_cast<Tensor&>(t), name, qm.tensors);
    return qm;
}

GreedyTrace greedy_decode(const HybridModel& m, const ModelInput& input, size_t max_new_tokens,
                          const std::vector<int>& allowed_ids, int eos_id) {
    GreedyTrace trace;
    trace.prompt = input.tokens;
    DecodeSession s(m);
    std::vector<double> logits = prefill(s, input);
    for (size_t i = 0; i < max_new_tokens; ++i) {
        int best = -1;
        double bv = -1e300;
        if (allowed_ids.empty()) {
            for (size_t j = 0; j < logits.size(); ++j)
                if (logits[j] > bv) { bv = logits[j]; best = int(j); }
        } else {
            for (int j : allowed_ids)
                if (logits[size_t(j)] > bv) { bv = logits[size_t(j)]; best = j; }
        }
        trace.generated.push_back(best);
        if (best == eos_id) break;
        if (i + 1 < max_new_tokens) logits = decode_step(s, best);
    }
    return trace;
}

long first_divergence(const HybridModel& a, const HybridModel& b, const ModelInput& input,
                      size_t steps) {
    auto ta = greedy_decode(a, input, steps);
    auto tb = greedy_decode(b, input, steps);
    for (size_t i = 0; i < std::min(ta.generated.size(), tb.generated.size()); ++i)
        if (ta.generated[i] != tb.generated[i]) return long(i);
    return -1;
}

} // namespace hlm
