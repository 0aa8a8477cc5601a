#include "hybridlm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "hybridlm/kvconfig.hpp"

namespace hlm::train {

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Text: return "text";
        case Stage::Align: return "align";
        case Stage::SingleSFT: return "single_sft";
        case Stage::MultiSFT: return "multi_sft";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    if (name == "text") return Stage::Text;
    if (name == "align") return Stage::Align;
    if (name == "single_sft") return Stage::SingleSFT;
    if (name == "multi_sft") return Stage::MultiSFT;
    throw TrainError("unknown stage: " + name);
}

bool encoder_trainable(Stage) { return false; }
bool projector_trainable(Stage s) { return s != Stage::Text; }
bool llm_trainable(Stage s) { return s != Stage::Align; }

double lr_schedule(size_t step, size_t total_steps, double peak, double warmup_fraction) {
    if (total_steps == 0) return 0.0;
    double warmup_steps = warmup_fraction * double(total_steps);
    double t = double(step);
    if (t <= warmup_steps) return warmup_steps > 0 ? peak * t / warmup_steps : peak;
    double progress = (t - warmup_steps) / (double(total_steps) - warmup_steps);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

size_t TrainState::tokens_per_image() const {
    size_t g = encoder.cfg.grid_side() / 2;
    return g * g;
}

NamedParams TrainState::all_params() const {
    NamedParams out;
    for (auto& [n, t] : model.named_params()) out.emplace_back("llm." + n, t);
    for (auto& [n, t] : encoder.named_params()) out.emplace_back("encoder." + n, t);
    for (auto& [n, t] : projector.named_params()) out.emplace_back("projector." + n, t);
    return out;
}

Tensor TrainState::project_images(const std::vector<vision::Image>& images) const {
    size_t tpi = tokens_per_image();
    size_t dv = encoder.cfg.d_vision;
    std::vector<double> pooled;
    pooled.reserve(images.size() * tpi * dv);
    for (auto& img : images) {
        auto grid = vision::pool2d(encoder.encode(img), 2);
        auto& d = grid.tokens.data();
        pooled.insert(pooled.end(), d.begin(), d.end());
    }
    // constant copy: no gradient flows into the encoder
    Tensor feat = Tensor::make({images.size() * tpi, dv}, std::move(pooled));
    return projector.forward(feat);
}

TrainState make_train_state(const HybridConfig& model_cfg, const vision::EncoderConfig& enc_cfg,
                            size_t proj_hidden, uint64_t seed) {
    TrainState st{build_model(model_cfg, seed), vision::VisionEncoder::init(enc_cfg), {}, {}};
    Rng rng(seed ^ 0x50524f4aull);
    st.projector =
        vision::Projector::init(rng, enc_cfg.d_vision, proj_hidden, model_cfg.d_model);
    st.vocab = protocol::Vocabulary::build(model_cfg.vocab_size);
    return st;
}

void save_train_state(const TrainState& st, const std::string& path) {
    kv::KvConfig cfg;
    for (auto& [k, v] : kv::KvConfig::parse(st.model.cfg.to_kv_text()).values)
        cfg.set("model." + k, v);
    const auto& ec = st.encoder.cfg;
    cfg.set_uint("encoder.input_side", ec.input_side);
    cfg.set_uint("encoder.patch", ec.patch);
    cfg.set_uint("encoder.d_vision", ec.d_vision);
    cfg.set_uint("encoder.n_layers", ec.n_layers);
    cfg.set_uint("encoder.n_heads", ec.n_heads);
    cfg.set_uint("encoder.seed", size_t(ec.seed));
    cfg.set_uint("projector.hidden", st.projector.w1.cols());
    save_params(path, cfg.to_text(), st.all_params());
}

TrainState load_train_state(const std::string& path) {
    LoadedParams lp = load_params(path);
    kv::KvConfig cfg = kv::KvConfig::parse(lp.config_text);
    HybridConfig mc = HybridConfig::from_kv_text(cfg.with_prefix("model").to_text());
    vision::EncoderConfig ec;
    ec.input_side = cfg.get_uint("encoder.input_side", ec.input_side);
    ec.patch = cfg.get_uint("encoder.patch", ec.patch);
    ec.d_vision = cfg.get_uint("encoder.d_vision", ec.d_vision);
    ec.n_layers = cfg.get_uint("encoder.n_layers", ec.n_layers);
    ec.n_heads = cfg.get_uint("encoder.n_heads", ec.n_heads);
    ec.seed = cfg.get_uint("encoder.seed", 0);
    size_t hidden = cfg.get_uint("projector.hidden", 0);
    if (hidden == 0) throw TrainError("checkpoint missing projector.hidden");
    TrainState st = make_train_state(mc, ec, hidden, 0);
    NamedParams dst = st.all_params();
    if (dst.size() != lp.params.size())
        throw TrainError("state tensor count mismatch: file has " +
                         std::to_string(lp.params.size()) + ", config needs " +
                         std::to_string(dst.size()));
    for (size_t i = 0; i < dst.size(); ++i) {
        auto& [dn, dt] = dst[i];
        auto& [sn, stt] = lp.params[i];
        if (dn != sn) throw TrainError("state tensor name mismatch: " + sn + " vs " + dn);
        if (stt.shape() != dt.shape())
            throw TrainError("state tensor shape mismatch for " + sn);
        Tensor(dt).mutable_data() = stt.data();
    }
    return st;
}

std::map<std::string, bool> freeze_mask(const TrainState& st, Stage stage) {
    std::map<std::string, bool> mask;
    for (auto& [name, t] : st.all_params()) {
        bool trainable = false;
        if (name.rfind("llm.", 0) == 0) trainable = llm_trainable(stage);
        else if (name.rfind("encoder.", 0) == 0) trainable = encoder_trainable(stage);
        else if (name.rfind("projector.", 0) == 0) trainable = projector_trainable(stage);
        mask[name] = trainable;
    }
    return mask;
}

void Optimizer::step(const NamedParams& params, const std::map<std::string, bool>& trainable,
                     double lr) {
    for (auto& [name, t] : params) {
        auto it = trainable.find(name);
        if (it == trainable.end() || !it->second) continue;
        Tensor p = t;
        const auto& g = p.grad();
        if (g.empty()) continue;
        auto& vt = v[name];
        if (vt.empty()) vt.assign(g.size(), 0.0);
        auto& w = p.mutable_data();
        for (size_t i = 0; i < g.size(); ++i) {
            vt[i] = beta * vt[i] + (1.0 - beta) * g[i] * g[i];
            w[i] -= lr * g[i] / (std::sqrt(vt[i]) + eps);
        }
    }
}

namespace {

uint64_t mix_hash(uint64_t a, uint64_t b) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&](uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xff;
            h *= 0x100000001b3ull;
        }
    };
    feed(a);
    feed(b);
    return h;
}

NamedParams select_params(const NamedParams& all, const std::map<std::string, bool>& mask,
                          bool want_trainable) {
    NamedParams out;
    for (auto& [n, t] : all)
        if (mask.at(n) == want_trainable) out.emplace_back(n, t);
    return out;
}

struct Batch {
    std::vector<int> tokens;
    std::vector<size_t> slot_rows;
    std::vector<const vision::Image*> images;  // stream order
    std::vector<int> targets;
    std::vector<uint8_t> mask;
    std::vector<size_t> item_indices;
};

std::vector<Batch> build_batches(const std::vector<TrainItem>& corpus,
                                 const std::vector<size_t>& order, const TrainState& st,
                                 const StageConfig& cfg) {
    bool sft = cfg.stage == Stage::SingleSFT || cfg.stage == Stage::MultiSFT;
    size_t tpi = st.tokens_per_image();
    std::vector<size_t> lengths;
    lengths.reserve(order.size());
    for (size_t idx : order) lengths.push_back(corpus[idx].seq.rendered_length());
    auto plan = protocol::pack_plan(lengths, cfg.pack_len);

    std::vector<Batch> batches;
    for (auto& group : plan.batches) {
        Batch b;
        for (size_t k = 0; k < group.size(); ++k) {
            const TrainItem& item = corpus[order[group[k]]];
            if (k > 0) b.tokens.push_back(st.vocab.eos);
            auto rendered = item.seq.render(st.vocab);
            b.tokens.insert(b.tokens.end(), rendered.begin(), rendered.end());
            b.item_indices.push_back(order[group[k]]);
            for (auto& seg : item.seq.segments) {
                if (seg.kind != protocol::Segment::Kind::ImageSlot) continue;
                if (seg.slot_len != tpi)
                    throw TrainError("slot length " + std::to_string(seg.slot_len) +
                                     " does not match encoder tokens per image " +
                                     std::to_string(tpi));
                if (seg.image_index >= item.images.size())
                    throw TrainError("image index out of range in training item");
                b.images.push_back(&item.images[seg.image_index]);
            }
        }
        for (size_t p = 0; p < b.tokens.size(); ++p)
            if (b.tokens[p] == st.vocab.img_token) b.slot_rows.push_back(p);

        // next-token targets with per-position loss mask
        size_t T = b.tokens.size();
        b.targets.assign(T, 0);
        b.mask.assign(T, 0);
        // recompute item spans for masking
        size_t off = 0;
        for (size_t k = 0; k < b.item_indices.size(); ++k) {
            const TrainItem& item = corpus[b.item_indices[k]];
            if (k > 0) off += 1;  // separator
            size_t len = item.seq.rendered_length();
            size_t first_target = sft ? off + item.response_start : off;
            for (size_t p = off; p + 1 < off + len; ++p) {
                int tgt = b.tokens[p + 1];
                if (p + 1 < first_target) continue;
                if (st.vocab.is_special(tgt)) continue;  // never score specials
                b.targets[p] = tgt;
                b.mask[p] = 1;
            }
            off += len;
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

} // namespace

TrainingReport train_stage(TrainState& st, const StageConfig& cfg,
                           const std::vector<TrainItem>& corpus, uint64_t seed,
                           uint64_t chain_in) {
    if (corpus.empty()) throw TrainError("empty corpus");
    TrainingReport rep;
    rep.stage = cfg.stage;
    rep.chain_in = chain_in;

    auto mask = freeze_mask(st, cfg.stage);
    NamedParams all = st.all_params();
    NamedParams frozen = select_params(all, mask, false);
    NamedParams live = select_params(all, mask, true);
    rep.frozen_hash_before = params_hash(frozen);
    rep.params_hash_before = params_hash(all);
    for (auto& [n, t] : all) Tensor(t).set_requires_grad(mask.at(n));

    Rng rng(seed);
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    // precompute step count across epochs for the schedule
    std::vector<std::vector<Batch>> epochs;
    size_t total_steps = 0;
    for (size_t e = 0; e < cfg.epochs; ++e) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        epochs.push_back(build_batches(corpus, order, st, cfg));
        total_steps += epochs.back().size();
    }

    Optimizer opt;
    size_t step = 0;
    for (auto& batch_list : epochs) {
        for (auto& b : batch_list) {
            double lr = lr_schedule(step, total_steps, cfg.peak_lr, cfg.warmup_fraction);
            for (auto& [n, t] : live) Tensor(t).zero_grad();

            ModelInput input;
            input.tokens = b.tokens;
            input.slot_rows = b.slot_rows;
            if (!b.slot_rows.empty()) {
                std::vector<vision::Image> imgs;
                imgs.reserve(b.images.size());
                for (auto* p : b.images) imgs.push_back(*p);
                input.slot_embeddings = st.project_images(imgs);
            }
            Tensor logits = forward_full(st.model, input);
            bool any = false;
            for (uint8_t m : b.mask) any |= m != 0;
            if (!any) { ++step; continue; }
            Tensor loss = cross_entropy(logits, b.targets, b.mask);
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw TrainError("non-finite loss at step " + std::to_string(step) + " (" +
                                 std::to_string(b.tokens.size()) + " tokens, " +
                                 std::to_string(b.item_indices.size()) + " items)");
            backward(loss);
            opt.step(live, mask, lr);
            rep.steps.push_back({step, lv, lr});
            ++step;
        }
    }

    if (!rep.steps.empty()) {
        size_t q = std::max<size_t>(1, rep.steps.size() / 4);
        double a = 0, z = 0;
        for (size_t i = 0; i < q; ++i) {
            a += rep.steps[i].loss;
            z += rep.steps[rep.steps.size() - 1 - i].loss;
        }
        rep.initial_loss = a / double(q);
        rep.final_loss = z / double(q);
    }

    rep.frozen_hash_after = params_hash(frozen);
    rep.params_hash_after = params_hash(all);
    rep.chain_out = mix_hash(chain_in, rep.params_hash_after);
    for (auto& [n, t] : all) Tensor(t).set_requires_grad(false);
    return rep;
}

std::string TrainingReport::to_jsonl() const {
    std::ostringstream os;
    for (auto& s : steps) {
        nlohmann::json j;
        j["step"] = s.step;
        j["loss"] = s.loss;
        j["lr"] = s.lr;
        j["stage"] = stage_name(stage);
        os << j.dump() << '\n';
    }
    nlohmann::json j;
    j["stage"] = stage_name(stage);
    j["summary"] = true;
    j["initial_loss"] = initial_loss;
    j["final_loss"] = final_loss;
    char buf[32];
    auto hex = [&](uint64_t h) {
        std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
        return std::string(buf);
    };
    j["frozen_hash_before"] = hex(frozen_hash_before);
    j["frozen_hash_after"] = hex(frozen_hash_after);
    j["params_hash_before"] = hex(params_hash_before);
    j["params_hash_after"] = hex(params_hash_after);
    j["chain_in"] = hex(chain_in);
    j["chain_out"] = hex(chain_out);
    os << j.dump() << '\n';
    return os.str();
}

void save_report_jsonl(const std::string& path, const TrainingReport& r) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw TrainError("cannot open report for writing: " + path);
    os << r.to_jsonl();
}

MixtureSpec MixtureSpec::multi_sft_default() {
    return {{{"multi_image_a", 200}, {"multi_image_b", 200}, {"video_caption", 50},
             {"single_replay", 200}, {"text_replay", 50}, {"subimage", 50}}};
}

std::vector<size_t> sample_mixture(const MixtureSpec& spec, size_t n, uint64_t seed) {
    if (spec.sources.empty()) throw TrainError("mixture has no sources");
    double total = 0;
    for (auto& [name, w] : spec.sources) {
        if (w <= 0) throw TrainError("non-positive mixture weight for source " + name);
        total += w;
    }
    Rng rng(seed);
    std::vector<size_t> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        double u = rng.uniform() * total, acc = 0;
        size_t pick = spec.sources.size() - 1;
        for (size_t s = 0; s < spec.sources.size(); ++s) {
            acc += spec.sources[s].second;
            if (u < acc) { pick = s; break; }
        }
        out.push_back(pick);
    }
    return out;
}

vision::Image draw_shape(const std::string& color, const std::string& shape, size_t side,
                         Rng& rng) {
    double r = 0, g = 0, b = 0;
    if (color == "red") r = 1;
    else if (color == "green") g = 1;
    else if (color == "blue") b = 1;
    else if (color == "yellow") r = g = 1;
    else if (color == "white") r = g = b = 1;
    else throw TrainError("unknown color: " + color);

    vision::Image img = vision::Image::create(side, side, 3, 0.0);
    long jx = long(rng.below(side / 4)) - long(side / 8);
    long jy = long(rng.below(side / 4)) - long(side / 8);
    double cx = double(side) / 2 + double(jx), cy = double(side) / 2 + double(jy);
    // sized so lit-pixel counts stay disjoint across colors: squares light
    // (side/3+1)^2 pixels, circles ~pi*(side/3)^2, a >2x gap
    double half = double(side) / 6;     // square half-width
    double radius = double(side) / 3;   // circle radius
    for (size_t y = 0; y < side; ++y) {
        for (size_t x = 0; x < side; ++x) {
            double dx = double(x) - cx, dy = double(y) - cy;
            bool inside;
            if (shape == "square") inside = std::fabs(dx) <= half && std::fabs(dy) <= half;
            else if (shape == "circle") inside = dx * dx + dy * dy <= radius * radius;
            else throw TrainError("unknown shape: " + shape);
            if (!inside) continue;
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
    }
    return img;
}

std::vector<TrainItem> gen_caption_task(const SynthSpec& spec, const protocol::Vocabulary& v,
                                        size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainItem> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const auto& color = spec.colors[rng.below(spec.colors.size())];
        const auto& shape = spec.shapes[rng.below(spec.shapes.size())];
        TrainItem item;
        item.images.push_back(draw_shape(color, shape, spec.image_side, rng));
        std::string answer = color + " " + shape;
        item.seq = protocol::assemble_single(v, "what is this? answer: " + answer, spec.slot_len);
        item.response_start = item.seq.rendered_length() - v.tokenize(answer).size();
        item.label = answer;
        item.source = "caption";
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<TrainItem> gen_needle_task(const SynthSpec& spec, const protocol::Vocabulary& v,
                                       size_t n_frames, size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainItem> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const auto& color = spec.colors[rng.below(spec.colors.size())];
        size_t depth = rng.below(n_frames);
        TrainItem item;
        for (size_t f = 0; f < n_frames; ++f) {
            if (f == depth) item.images.push_back(draw_shape(color, "square", spec.image_side, rng));
            else item.images.push_back(vision::Image::create(spec.image_side, spec.image_side, 3, 0.0));
        }
        item.seq = protocol::assemble_video(
            v, n_frames, "what color is the needle answer: " + color, spec.slot_len);
        item.response_start = item.seq.rendered_length() - 1;
        item.label = color;
        item.source = "needle";
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<TrainItem> gen_pair_caption_task(const SynthSpec& spec,
                                             const protocol::Vocabulary& v, size_t n,
                                             uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainItem> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        TrainItem item;
        size_t sa = rng.below(spec.shapes.size()), sb = rng.below(spec.shapes.size());
        size_t ca = rng.below(spec.colors.size()), cb = rng.below(spec.colors.size());
        item.images.push_back(draw_shape(spec.colors[ca], spec.shapes[sa], spec.image_side, rng));
        item.images.push_back(draw_shape(spec.colors[cb], spec.shapes[sb], spec.image_side, rng));
        std::vector<std::string> interleaved = {
            "", "", "shapes " + spec.shapes[sa] + " " + spec.shapes[sb]};
        item.seq = protocol::assemble_multi(v, 2, interleaved, spec.slot_len);
        item.response_start = item.seq.rendered_length() - 2;  // the two shape tokens
        item.label = spec.shapes[sa] + " " + spec.shapes[sb];
        item.source = "pair_caption";
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<TrainItem> gen_icl_task(const SynthSpec& spec, const protocol::Vocabulary& v,
                                    size_t k_shots, size_t n, uint64_t seed,
                                    const std::string& relation) {
    if (relation != "same_shape" && relation != "same_color")
        throw TrainError("unknown relation: " + relation);
    bool by_shape = relation == "same_shape";
    Rng rng(seed);
    std::vector<TrainItem> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        TrainItem item;
        std::string query_label;
        // text slot after image j sits at interleaved[j+1]
        std::vector<std::string> interleaved(2 * (k_shots + 1) + 1, "");
        for (size_t s = 0; s <= k_shots; ++s) {
            bool same = rng.below(2) == 0;
            size_t sa = rng.below(spec.shapes.size());
            size_t ca = rng.below(spec.colors.size());
            size_t sb, cb;
            if (by_shape) {
                sb = same ? sa : (sa + 1 + rng.below(spec.shapes.size() - 1)) %
                                     spec.shapes.size();
                cb = rng.below(spec.colors.size());
            } else {
                cb = same ? ca : (ca + 1 + rng.below(spec.colors.size() - 1)) %
                                     spec.colors.size();
                sb = rng.below(spec.shapes.size());
            }
            item.images.push_back(
                draw_shape(spec.colors[ca], spec.shapes[sa], spec.image_side, rng));
            item.images.push_back(
                draw_shape(spec.colors[cb], spec.shapes[sb], spec.image_side, rng));
            std::string label = same ? "yes" : "no";
            interleaved[2 * s + 2] = "match " + label;
            if (s == k_shots) query_label = label;
        }
        item.seq = protocol::assemble_multi(v, 2 * (k_shots + 1), interleaved, spec.slot_len);
        item.response_start = item.seq.rendered_length() - 1;  // final yes/no token
        item.label = query_label;
        item.source = "icl";
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<TrainItem> gen_text_task(const protocol::Vocabulary& v, size_t n, uint64_t seed) {
    Rng rng(seed);
    static const char* sentences[] = {
        "this is a cat.", "this is a dog.", "the bird is blue",
        "the ball is red", "a tree is green", "the house is white",
    };
    std::vector<TrainItem> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        TrainItem item;
        std::string text;
        size_t reps = 2 + rng.below(3);
        const char* s = sentences[rng.below(6)];
        for (size_t r = 0; r < reps; ++r) text += std::string(r ? " " : "") + s;
        protocol::Segment seg;
        seg.tokens = v.tokenize(text);
        item.seq.segments.push_back(std::move(seg));
        item.source = "text";
        out.push_back(std::move(item));
    }
    return out;
}

} // namespace hlm::train
