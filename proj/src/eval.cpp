#include "hybridlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace hlm::eval {

size_t needle_index(size_t haystack_size, double depth_fraction) {
    if (haystack_size == 0) throw EvalError("haystack must hold at least one frame");
    if (depth_fraction < 0.0 || depth_fraction > 1.0)
        throw EvalError("depth fraction must be in [0,1]");
    return size_t(std::llround(depth_fraction * double(haystack_size - 1)));
}

EvalInstance gen_niah(const NIAHSpec& spec, const protocol::Vocabulary& v) {
    if (spec.needle_class >= spec.classes.size()) throw EvalError("needle class out of range");
    // salted away from the training generators' seed range
    Rng rng(spec.seed ^ 0x4e49414845564cull);
    size_t at = needle_index(spec.haystack_size, spec.depth_fraction);
    EvalInstance inst;
    inst.needle_at = at;
    inst.answer = spec.classes[spec.needle_class];
    inst.answer_set = spec.classes;
    for (size_t f = 0; f < spec.haystack_size; ++f) {
        if (f == at)
            inst.images.push_back(
                train::draw_shape(inst.answer, "square", spec.image_side, rng));
        else
            inst.images.push_back(vision::Image::create(spec.image_side, spec.image_side, 3, 0.0));
    }
    inst.seq = protocol::assemble_video(v, spec.haystack_size,
                                        "what color is the needle answer:", spec.slot_len);
    return inst;
}

EvalInstance gen_icl_matching(const ICLSpec& spec, const protocol::Vocabulary& v) {
    if (spec.relation != "same_shape" && spec.relation != "same_color")
        throw EvalError("unknown relation: " + spec.relation);
    Rng rng(spec.seed ^ 0x49434c4d41544348ull);
    bool by_shape = spec.relation == "same_shape";

    // balanced support labels (exactly k/2 each when k is even), shuffled
    std::vector<bool> same(spec.k);
    for (size_t i = 0; i < spec.k; ++i) same[i] = i < (spec.k + 1) / 2;
    for (size_t i = spec.k; i > 1; --i) {
        size_t j = rng.below(i);
        std::swap(same[i - 1], same[j]);
    }
    same.push_back(rng.below(2) == 0);  // query label

    EvalInstance inst;
    std::vector<std::string> interleaved(2 * (spec.k + 1) + 1, "");
    for (size_t s = 0; s <= spec.k; ++s) {
        size_t ca = rng.below(spec.colors.size()), sa = rng.below(spec.shapes.size());
        size_t cb, sb;
        if (by_shape) {
            sb = same[s] ? sa : (sa + 1 + rng.below(spec.shapes.size() - 1)) % spec.shapes.size();
            cb = rng.below(spec.colors.size());
        } else {
            cb = same[s] ? ca : (ca + 1 + rng.below(spec.colors.size() - 1)) % spec.colors.size();
            sb = rng.below(spec.shapes.size());
        }
        inst.images.push_back(
            train::draw_shape(spec.colors[ca], spec.shapes[sa], spec.image_side, rng));
        inst.images.push_back(
            train::draw_shape(spec.colors[cb], spec.shapes[sb], spec.image_side, rng));
        // support pairs carry their label; the query ends at the cue word
        interleaved[2 * s + 2] =
            s < spec.k ? std::string("match ") + (same[s] ? "yes" : "no") : "match";
    }
    inst.seq = protocol::assemble_multi(v, 2 * (spec.k + 1), interleaved, spec.slot_len);
    inst.answer = same[spec.k] ? "yes" : "no";
    inst.answer_set = {"yes", "no"};
    return inst;
}

Runner oracle_runner() {
    return [](const EvalInstance& inst, uint64_t) { return inst.answer; };
}

Runner random_runner() {
    return [](const EvalInstance& inst, uint64_t seed) {
        Rng rng(seed ^ 0x52414e44ull);
        return inst.answer_set[rng.below(inst.answer_set.size())];
    };
}

Runner frame_scan_runner() {
    return [](const EvalInstance& inst, uint64_t seed) -> std::string {
        for (auto& img : inst.images) {
            double ch[3] = {0, 0, 0};
            for (size_t i = 0; i < img.pixels.size(); ++i) ch[i % 3] += img.pixels[i];
            if (ch[0] + ch[1] + ch[2] == 0) continue;
            std::string color;
            if (ch[0] > 0 && ch[1] > 0) color = "yellow";
            else if (ch[0] > 0) color = "red";
            else if (ch[1] > 0) color = "green";
            else color = "blue";
            for (auto& a : inst.answer_set)
                if (a == color) return a;
        }
        Rng rng(seed ^ 0x5343414eull);  // needle lost in sampling: chance
        return inst.answer_set[rng.below(inst.answer_set.size())];
    };
}

Runner model_runner(const train::TrainState& st) {
    const train::TrainState* stp = &st;
    return [stp](const EvalInstance& inst, uint64_t) -> std::string {
        const auto& v = stp->vocab;
        ModelInput input;
        input.tokens = inst.seq.render(v);
        for (size_t p = 0; p < input.tokens.size(); ++p)
            if (input.tokens[p] == v.img_token) input.slot_rows.push_back(p);
        if (!input.slot_rows.empty()) {
            // images in slot order
            std::vector<vision::Image> ordered;
            for (auto& seg : inst.seq.segments)
                if (seg.kind == protocol::Segment::Kind::ImageSlot)
                    ordered.push_back(inst.images.at(seg.image_index));
            input.slot_embeddings = stp->project_images(ordered);
        }
        std::vector<int> allowed;
        for (auto& a : inst.answer_set) {
            auto ids = v.tokenize(a);
            if (ids.size() != 1)
                throw EvalError("answer label is not a single token: " + a);
            allowed.push_back(ids[0]);
        }
        auto trace = greedy_decode(stp->model, input, 1, allowed);
        if (trace.generated.empty()) throw EvalError("decoder produced no answer token");
        for (size_t i = 0; i < allowed.size(); ++i)
            if (allowed[i] == trace.generated[0]) return inst.answer_set[i];
        throw EvalError("constrained decode escaped the answer set");
    };
}

size_t EvalGrid::cells() const {
    size_t n = 1;
    for (auto& ax : axis_values) n *= ax.size();
    return n;
}

static uint64_t cell_seed(uint64_t master, size_t cell, size_t trial) {
    Rng rng(master ^ (0x9E3779B97F4A7C15ull * (cell + 1)));
    uint64_t base = rng.next_u64();
    return base + 0x632be59bd9b4e019ull * trial;
}

EvalGrid score_grid(const Runner& runner, const Generator& gen,
                    const std::vector<std::string>& axis_names,
                    const std::vector<std::vector<double>>& axis_values, size_t trials,
                    uint64_t master_seed) {
    if (axis_names.size() != axis_values.size()) throw EvalError("axis name/value mismatch");
    if (trials == 0) throw EvalError("trials must be positive");
    EvalGrid g;
    g.axis_names = axis_names;
    g.axis_values = axis_values;
    size_t n = g.cells();
    g.accuracy.assign(n, 0.0);
    g.trials.assign(n, trials);
    g.valid.assign(n, 1);

    for (size_t cell = 0; cell < n; ++cell) {
        // unravel row-major cell index into axis coordinates
        std::vector<double> coords(axis_values.size());
        size_t rem = cell;
        for (size_t a = axis_values.size(); a-- > 0;) {
            coords[a] = axis_values[a][rem % axis_values[a].size()];
            rem /= axis_values[a].size();
        }
        size_t correct = 0;
        try {
            for (size_t t = 0; t < trials; ++t) {
                uint64_t s = cell_seed(master_seed, cell, t);
                EvalInstance inst = gen(coords, s);
                correct += runner(inst, s ^ 0x52554eull) == inst.answer;
            }
            g.accuracy[cell] = double(correct) / double(trials);
        } catch (const std::exception&) {
            g.valid[cell] = 0;
        }
    }
    return g;
}

std::vector<size_t> sample_frame_indices(size_t total, size_t budget) {
    if (total == 0 || budget == 0) throw EvalError("frame counts must be positive");
    if (budget >= total) {
        std::vector<size_t> all(total);
        for (size_t i = 0; i < total; ++i) all[i] = i;
        return all;
    }
    std::vector<size_t> idx;
    if (budget == 1) return {0};
    for (size_t j = 0; j < budget; ++j) {
        size_t i = size_t(std::llround(double(j) * double(total - 1) / double(budget - 1)));
        if (idx.empty() || i != idx.back()) idx.push_back(i);
    }
    return idx;
}

EvalGrid sweep_frames(const Runner& runner, const std::vector<size_t>& frame_counts,
                      const NIAHSpec& base, const protocol::Vocabulary& v, size_t trials,
                      uint64_t master_seed) {
    for (size_t i = 1; i < frame_counts.size(); ++i)
        if (frame_counts[i] < frame_counts[i - 1])
            throw EvalError("frame counts must be sorted ascending");
    std::vector<double> axis;
    for (size_t f : frame_counts) axis.push_back(double(f));

    Generator gen = [&base, &v](const std::vector<double>& cell, uint64_t seed) {
        size_t budget = size_t(cell.at(0));
        NIAHSpec spec = base;
        Rng rng(seed);
        spec.seed = seed;
        spec.needle_class = rng.below(spec.classes.size());
        spec.depth_fraction = rng.uniform();
        EvalInstance full = gen_niah(spec, v);
        auto keep = sample_frame_indices(spec.haystack_size, budget);
        EvalInstance inst;
        inst.answer = full.answer;
        inst.answer_set = full.answer_set;
        inst.needle_at = full.needle_at;
        for (size_t i : keep) inst.images.push_back(full.images[i]);
        inst.seq = protocol::assemble_video(v, inst.images.size(),
                                            "what color is the needle answer:", spec.slot_len);
        return inst;
    };
    return score_grid(runner, gen, {"frames"}, {axis}, trials, master_seed);
}

void save_grid_csv(const std::string& path, const EvalGrid& g) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw EvalError("cannot open for writing: " + path);
    for (auto& n : g.axis_names) os << n << ',';
    os << "accuracy,trials,valid\n";
    os.precision(10);
    size_t n = g.cells();
    for (size_t cell = 0; cell < n; ++cell) {
        size_t rem = cell;
        std::vector<double> coords(g.axis_values.size());
        for (size_t a = g.axis_values.size(); a-- > 0;) {
            coords[a] = g.axis_values[a][rem % g.axis_values[a].size()];
            rem /= g.axis_values[a].size();
        }
        for (double c : coords) os << c << ',';
        os << g.accuracy[cell] << ',' << g.trials[cell] << ',' << int(g.valid[cell]) << '\n';
    }
}

} // namespace hlm::eval
