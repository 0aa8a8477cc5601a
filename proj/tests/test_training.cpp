#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "hybridlm/training.hpp"

using namespace hlm;
using namespace hlm::train;

static HybridConfig tiny_cfg() {
    HybridConfig cfg;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.vocab_size = 512;
    cfg.n_stacks = 1;
    cfg.layers_per_stack = 4;
    cfg.attn_position_in_stack = 3;
    cfg.moe_stride = 2;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 8;
    cfg.d_state = 4;
    cfg.tokens_per_image = 9;
    return cfg;
}

static vision::EncoderConfig tiny_enc() {
    vision::EncoderConfig ec;
    ec.input_side = 24;
    ec.patch = 4;
    ec.d_vision = 16;
    ec.n_layers = 1;
    ec.n_heads = 2;
    return ec;
}

TEST_CASE("lr schedule: endpoints, warmup peak, cosine midpoint") {
    CHECK(lr_schedule(0, 1000, 1e-5) == 0.0);
    CHECK(lr_schedule(30, 1000, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
    // warmup ends at 30; cosine spans 970 steps; midpoint at 515
    CHECK(std::fabs(lr_schedule(515, 1000, 1e-5) - 0.5e-5) < 1e-12);
    CHECK(lr_schedule(1000, 1000, 1e-5) <= 1e-12 * 1e-5);
    // continuity and single peak
    double prev = 0.0;
    bool rising = true;
    size_t peaks = 0;
    for (size_t s = 1; s <= 1000; ++s) {
        double lr = lr_schedule(s, 1000, 1e-5);
        if (rising && lr < prev) {
            ++peaks;
            rising = false;
        }
        if (!rising) CHECK(lr <= prev + 1e-18);
        prev = lr;
    }
    CHECK(peaks == 1);
}

TEST_CASE("freeze mask per stage") {
    auto st = make_train_state(tiny_cfg(), tiny_enc(), 24, 1);
    struct Row {
        Stage stage;
        bool enc, proj, llm;
    };
    for (Row r : {Row{Stage::Text, false, false, true}, Row{Stage::Align, false, true, false},
                  Row{Stage::SingleSFT, false, true, true},
                  Row{Stage::MultiSFT, false, true, true}}) {
        auto mask = freeze_mask(st, r.stage);
        size_t checked = 0;
        for (auto& [name, trainable] : mask) {
            ++checked;
            if (name.rfind("encoder.", 0) == 0) CHECK(trainable == r.enc);
            else if (name.rfind("projector.", 0) == 0) CHECK(trainable == r.proj);
            else if (name.rfind("llm.", 0) == 0) CHECK(trainable == r.llm);
            else FAIL("unprefixed parameter ", name);
        }
        CHECK(checked == st.all_params().size());
    }
}

TEST_CASE("mixture sampling: proportions, determinism, edge cases") {
    auto spec = MixtureSpec::multi_sft_default();
    REQUIRE(spec.sources.size() == 6);
    double total = 0;
    for (auto& [n, w] : spec.sources) total += w;
    CHECK(total == 750.0);

    auto draws = sample_mixture(spec, 75000, 9);
    std::vector<size_t> counts(6, 0);
    for (size_t s : draws) counts[s]++;
    for (size_t i = 0; i < 6; ++i) {
        double share = double(counts[i]) / 75000.0;
        double want = spec.sources[i].second / total;
        CHECK(std::fabs(share - want) < 0.01);
    }
    CHECK(sample_mixture(spec, 1000, 9) ==
          std::vector<size_t>(draws.begin(), draws.begin() + 1000));

    MixtureSpec one{{{"only", 3.0}}};
    for (size_t s : sample_mixture(one, 50, 1)) CHECK(s == 0);
    CHECK(sample_mixture(spec, 0, 1).empty());
    CHECK_THROWS_AS(sample_mixture(MixtureSpec{}, 5, 1), TrainError);
    MixtureSpec bad{{{"a", 1.0}, {"b", 0.0}}};
    CHECK_THROWS_AS(sample_mixture(bad, 5, 1), TrainError);
}

TEST_CASE("caption task: labels cover color x shape, self-consistent") {
    SynthSpec spec;
    auto v = protocol::Vocabulary::build(512);
    auto items = gen_caption_task(spec, v, 200, 3);
    REQUIRE(items.size() == 200);
    std::set<std::string> labels;
    for (auto& it : items) {
        labels.insert(it.label);
        REQUIRE(it.images.size() == 1);
        CHECK(it.seq.n_images() == 1);
        // answer tokens sit at the tail of the rendered stream
        auto r = it.seq.render(v);
        auto ans = v.tokenize(it.label);
        REQUIRE(it.response_start + ans.size() == r.size());
        for (size_t k = 0; k < ans.size(); ++k)
            CHECK(r[it.response_start + k] == ans[k]);
    }
    CHECK(labels.size() == spec.colors.size() * spec.shapes.size());
}

TEST_CASE("needle task: planted frame matches label, others blank") {
    SynthSpec spec;
    auto v = protocol::Vocabulary::build(512);
    auto items = gen_needle_task(spec, v, 6, 50, 4);
    for (auto& it : items) {
        REQUIRE(it.images.size() == 6);
        size_t nonblank = 0, planted = 0;
        for (size_t f = 0; f < 6; ++f) {
            double s = 0;
            for (double p : it.images[f].pixels) s += p;
            if (s > 0) {
                ++nonblank;
                planted = f;
            }
        }
        CHECK(nonblank == 1);
        // recover planted color from pixels: channel sums
        double ch[3] = {0, 0, 0};
        auto& img = it.images[planted];
        for (size_t i = 0; i < img.pixels.size(); ++i) ch[i % 3] += img.pixels[i];
        std::string color;
        if (ch[0] > 0 && ch[1] > 0) color = "yellow";
        else if (ch[0] > 0) color = "red";
        else if (ch[1] > 0) color = "green";
        else color = "blue";
        CHECK(color == it.label);
        // one <t> fewer than frames
        size_t t_count = 0;
        for (int id : it.seq.render(v)) t_count += id == v.t_sep;
        CHECK(t_count == 5);
    }
}

TEST_CASE("pair caption task: labels name both images' shapes, scored at the end") {
    SynthSpec spec;
    auto v = protocol::Vocabulary::build(512);
    auto items = gen_pair_caption_task(spec, v, 30, 11);
    auto shape_of = [&](const vision::Image& img) {
        size_t lit = 0;
        for (size_t i = 0; i < img.pixels.size(); i += 3)
            lit += img.pixels[i] + img.pixels[i + 1] + img.pixels[i + 2] > 0;
        double square_area = std::pow(double(spec.image_side) / 3.0 + 1.0, 2);
        return double(lit) > square_area * 1.7 ? std::string("circle") : std::string("square");
    };
    for (auto& it : items) {
        REQUIRE(it.images.size() == 2);
        CHECK(it.label == shape_of(it.images[0]) + " " + shape_of(it.images[1]));
        auto toks = it.seq.render(v);
        REQUIRE(it.response_start == toks.size() - 2);
        // the two scored positions are exactly the two shape words
        std::vector<int> want = v.tokenize(it.label);
        REQUIRE(want.size() == 2);
        CHECK(toks[it.response_start] == want[0]);
        CHECK(toks[it.response_start + 1] == want[1]);
    }
}

TEST_CASE("icl task: pixel-area oracle recovers every pair label") {
    SynthSpec spec;
    auto v = protocol::Vocabulary::build(512);
    auto items = gen_icl_task(spec, v, 2, 40, 5);
    // squares light (side/3+1)^2 pixels, circles ~pi*(side/3)^2: separable by count
    auto shape_of = [&](const vision::Image& img) {
        size_t lit = 0;
        for (size_t y = 0; y < img.height; ++y)
            for (size_t x = 0; x < img.width; ++x)
                lit += img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2) > 0;
        double square_area = std::pow(double(spec.image_side) / 3.0 + 1.0, 2);
        return double(lit) > square_area * 1.7 ? "circle" : "square";
    };
    for (auto& it : items) {
        REQUIRE(it.images.size() == 6);  // 2 shots + query, 2 images each
        std::string want =
            shape_of(it.images[4]) == shape_of(it.images[5]) ? "yes" : "no";
        CHECK(want == it.label);
        // label token is last in the stream
        auto r = it.seq.render(v);
        CHECK(r.back() == v.tokenize(it.label)[0]);
    }
}

TEST_CASE("align stage: frozen params bitwise unchanged, loss decreases") {
    auto st = make_train_state(tiny_cfg(), tiny_enc(), 24, 7);
    SynthSpec spec;
    auto items = gen_caption_task(spec, st.vocab, 48, 11);

    auto mask = freeze_mask(st, Stage::Align);
    NamedParams frozen_before;
    for (auto& [n, t] : st.all_params())
        if (!mask.at(n)) frozen_before.emplace_back(n, t);
    uint64_t llm_enc_hash = params_hash(frozen_before);
    uint64_t all_hash = params_hash(st.all_params());

    StageConfig cfg;
    cfg.stage = Stage::Align;
    cfg.peak_lr = 3e-3;
    cfg.epochs = 4;
    cfg.pack_len = 128;
    auto rep = train_stage(st, cfg, items, 13);

    CHECK(rep.frozen_hash_before == llm_enc_hash);
    CHECK(rep.frozen_hash_after == llm_enc_hash);
    CHECK(rep.params_hash_before == all_hash);
    CHECK(rep.params_hash_after != all_hash);
    REQUIRE(rep.steps.size() >= 8);
    CHECK(rep.final_loss < rep.initial_loss);
    for (auto& s : rep.steps) CHECK(std::isfinite(s.loss));
    CHECK(rep.steps.front().lr == 0.0);
}

TEST_CASE("text stage leaves projector and encoder untouched; chain hashes link") {
    auto st = make_train_state(tiny_cfg(), tiny_enc(), 24, 8);
    auto text_items = gen_text_task(st.vocab, 40, 21);
    SynthSpec spec;
    auto cap_items = gen_caption_task(spec, st.vocab, 24, 22);

    NamedParams visual;
    for (auto& [n, t] : st.all_params())
        if (n.rfind("llm.", 0) != 0) visual.emplace_back(n, t);
    uint64_t visual_hash = params_hash(visual);

    StageConfig tcfg;
    tcfg.stage = Stage::Text;
    tcfg.peak_lr = 3e-3;
    tcfg.epochs = 2;
    tcfg.pack_len = 128;
    auto rep0 = train_stage(st, tcfg, text_items, 31);
    CHECK(params_hash(visual) == visual_hash);

    StageConfig acfg;
    acfg.stage = Stage::Align;
    acfg.peak_lr = 3e-3;
    acfg.epochs = 1;
    acfg.pack_len = 128;
    auto rep1 = train_stage(st, acfg, cap_items, 32, rep0.chain_out);
    CHECK(rep1.chain_in == rep0.chain_out);
    CHECK(rep1.chain_out != rep0.chain_out);
    CHECK(rep0.chain_out != rep0.chain_in);
}

TEST_CASE("training report serializes one record per step plus summary") {
    auto st = make_train_state(tiny_cfg(), tiny_enc(), 24, 9);
    auto items = gen_text_task(st.vocab, 16, 5);
    StageConfig cfg;
    cfg.stage = Stage::Text;
    cfg.peak_lr = 1e-3;
    cfg.pack_len = 128;
    auto rep = train_stage(st, cfg, items, 2);
    std::istringstream is(rep.to_jsonl());
    std::string line;
    size_t lines = 0;
    while (std::getline(is, line)) {
        ++lines;
        CHECK(line.front() == '{');
    }
    CHECK(lines == rep.steps.size() + 1);
    CHECK(rep.to_jsonl().find("frozen_hash_before") != std::string::npos);
    CHECK(rep.to_jsonl().find(stage_name(Stage::Text)) != std::string::npos);
}

TEST_CASE("train state checkpoint round-trip preserves every tensor") {
    auto st = make_train_state(tiny_cfg(), tiny_enc(), 24, 12);
    std::string path = "/tmp/hlm_state_test.bin";
    save_train_state(st, path);
    auto back = load_train_state(path);
    auto a = st.all_params(), b = back.all_params();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second.data() == b[i].second.data());
    }
    CHECK(back.encoder.cfg.input_side == 24u);
    CHECK(back.tokens_per_image() == st.tokens_per_image());
    std::remove(path.c_str());
}

TEST_CASE("empty corpus and slot mismatch rejected") {
    auto st = make_train_state(tiny_cfg(), tiny_enc(), 24, 10);
    StageConfig cfg;
    cfg.stage = Stage::Align;
    CHECK_THROWS_AS(train_stage(st, cfg, {}, 1), TrainError);

    SynthSpec bad;
    bad.slot_len = 5;  // encoder produces 9 tokens per image
    auto items = gen_caption_task(bad, st.vocab, 2, 1);
    cfg.pack_len = 128;
    CHECK_THROWS_AS(train_stage(st, cfg, items, 1), TrainError);
}
