#include "hybridlm/capi.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "hybridlm/bench.hpp"
#include "hybridlm/eval.hpp"
#include "hybridlm/kvconfig.hpp"
#include "hybridlm/model.hpp"
#include "hybridlm/training.hpp"

using namespace hlm;

extern "C" {
struct hlm_model {
    HybridModel m;
};
struct hlm_session {
    DecodeSession s;
    explicit hlm_session(const HybridModel& m) : s(m) {}
};
}

namespace {

thread_local std::string g_last_error;

struct PrecondError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class F>
int wrap(F&& f) {
    try {
        f();
        g_last_error.clear();
        return HLM_OK;
    } catch (const kv::KvError& e) {
        g_last_error = e.what();
        return HLM_ERR_CONFIG;
    } catch (const ConfigError& e) {
        g_last_error = e.what();
        return HLM_ERR_CONFIG;
    } catch (const bench::BenchError& e) {
        g_last_error = e.what();
        return HLM_ERR_CONFIG;
    } catch (const PrecondError& e) {
        g_last_error = e.what();
        return HLM_ERR_PRECONDITION;
    } catch (const CheckpointError& e) {
        g_last_error = e.what();
        return HLM_ERR_PRECONDITION;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return HLM_ERR_RUNTIME;
    }
}

int invalid_arg(const char* msg) {
    g_last_error = msg;
    return HLM_ERR_INVALID_ARG;
}

HybridConfig model_config_from(const kv::KvConfig& cfg) {
    HybridConfig mc = HybridConfig::from_kv_text(cfg.with_prefix("model").to_text());
    mc.validate();
    return mc;
}

vision::EncoderConfig encoder_config_from(const kv::KvConfig& cfg) {
    vision::EncoderConfig ec;
    ec.input_side = cfg.get_uint("encoder.input_side", 24);
    ec.patch = cfg.get_uint("encoder.patch", 4);
    ec.d_vision = cfg.get_uint("encoder.d_vision", 16);
    ec.n_layers = cfg.get_uint("encoder.n_layers", 1);
    ec.n_heads = cfg.get_uint("encoder.n_heads", 2);
    ec.seed = cfg.get_uint("encoder.seed", 0);
    ec.validate();
    return ec;
}

std::filesystem::path prepare_run_dir(const char* out_dir) {
    std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    return dir;
}

train::TrainState load_state_checked(const std::string& path, const char* what) {
    if (!std::filesystem::exists(path))
        throw PrecondError(std::string(what) + " checkpoint not found: " + path);
    return train::load_train_state(path);
}

std::vector<size_t> parse_uint_list(const std::string& text) {
    std::vector<size_t> out;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        out.push_back(std::stoull(text.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

std::vector<train::TrainItem> corpus_for_stage(train::Stage stage, const train::TrainState& st,
                                               size_t items, uint64_t seed) {
    train::SynthSpec spec;
    spec.slot_len = st.tokens_per_image();
    switch (stage) {
        case train::Stage::Text:
            return train::gen_text_task(st.vocab, items, seed);
        case train::Stage::Align:
        case train::Stage::SingleSFT:
            return train::gen_caption_task(spec, st.vocab, items, seed);
        case train::Stage::MultiSFT: {
            auto mix = train::MixtureSpec::multi_sft_default();
            auto draws = train::sample_mixture(mix, items, seed);
            std::vector<train::TrainItem> out;
            uint64_t sub = seed;
            for (size_t src : draws) {
                ++sub;
                const std::string& name = mix.sources[src].first;
                std::vector<train::TrainItem> one;
                if (name == "video_caption")
                    one = train::gen_needle_task(spec, st.vocab, 4, 1, sub);
                else if (name == "text_replay")
                    one = train::gen_text_task(st.vocab, 1, sub);
                else if (name == "multi_image_a" || name == "multi_image_b")
                    one = train::gen_icl_task(spec, st.vocab, 1, 1, sub);
                else  // single_replay, subimage
                    one = train::gen_caption_task(spec, st.vocab, 1, sub);
                out.push_back(std::move(one[0]));
            }
            return out;
        }
    }
    throw PrecondError("unreachable stage");
}

} // namespace

extern "C" {

const char* hlm_last_error(void) { return g_last_error.c_str(); }

int hlm_model_build(const char* config_kv_text, uint64_t seed, hlm_model** out) {
    if (!out) return invalid_arg("null output handle");
    return wrap([&] {
        kv::KvConfig cfg = kv::KvConfig::parse(config_kv_text ? config_kv_text : "");
        HybridConfig mc = HybridConfig::from_kv_text(cfg.to_text());
        *out = new hlm_model{build_model(mc, seed)};
    });
}

int hlm_model_load(const char* path, hlm_model** out) {
    if (!out || !path) return invalid_arg("null argument");
    return wrap([&] {
        if (!std::filesystem::exists(path))
            throw PrecondError(std::string("checkpoint not found: ") + path);
        *out = new hlm_model{load_checkpoint(path)};
    });
}

int hlm_model_save(const hlm_model* m, const char* path) {
    if (!m || !path) return invalid_arg("null argument");
    return wrap([&] { save_checkpoint(m->m, path); });
}

void hlm_model_free(hlm_model* m) { delete m; }

int hlm_model_param_counts(const hlm_model* m, uint64_t* total, uint64_t* active) {
    if (!m || !total || !active) return invalid_arg("null argument");
    return wrap([&] {
        ParamCounts c = count_params(m->m);
        *total = c.total;
        *active = c.active;
    });
}

int hlm_model_prune_expert0(const hlm_model* m, hlm_model** out, int* changed) {
    if (!m || !out) return invalid_arg("null argument");
    return wrap([&] {
        PruneResult r = prune_to_expert0(m->m);
        if (changed) *changed = r.changed ? 1 : 0;
        *out = new hlm_model{std::move(r.model)};
    });
}

int hlm_model_quantize_int8(const hlm_model* m, hlm_model** out) {
    if (!m || !out) return invalid_arg("null argument");
    return wrap([&] {
        QuantizedModel q = quantize_int8_weights(m->m);
        *out = new hlm_model{std::move(q.model)};
    });
}

int hlm_session_create(const hlm_model* m, hlm_session** out) {
    if (!m || !out) return invalid_arg("null argument");
    return wrap([&] { *out = new hlm_session(m->m); });
}

void hlm_session_free(hlm_session* s) { delete s; }

static int32_t argmax_of(const std::vector<double>& logits) {
    size_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return int32_t(best);
}

int hlm_session_prefill(hlm_session* s, const int32_t* tokens, size_t n, int32_t* argmax_out) {
    if (!s || (!tokens && n)) return invalid_arg("null argument");
    return wrap([&] {
        std::vector<int> ids(tokens, tokens + n);
        auto logits = prefill(s->s, ModelInput::text(std::move(ids)));
        if (argmax_out) *argmax_out = argmax_of(logits);
    });
}

int hlm_session_decode(hlm_session* s, int32_t token, int32_t* argmax_out) {
    if (!s) return invalid_arg("null session");
    return wrap([&] {
        auto logits = decode_step(s->s, token);
        if (argmax_out) *argmax_out = argmax_of(logits);
    });
}

int hlm_session_bytes(const hlm_session* s, uint64_t* bytes_out) {
    if (!s || !bytes_out) return invalid_arg("null argument");
    g_last_error.clear();
    *bytes_out = s->s.bytes();
    return HLM_OK;
}

int hlm_generate(const hlm_model* m, const int32_t* prompt, size_t n, size_t max_new,
                 int32_t* out_tokens, size_t* out_n) {
    if (!m || (!prompt && n) || !out_tokens || !out_n) return invalid_arg("null argument");
    return wrap([&] {
        ModelInput input = ModelInput::text(std::vector<int>(prompt, prompt + n));
        GreedyTrace t = greedy_decode(m->m, input, max_new);
        *out_n = t.generated.size();
        for (size_t i = 0; i < t.generated.size(); ++i) out_tokens[i] = t.generated[i];
    });
}

int hlm_run_train(const char* config_kv_text, const char* out_dir) {
    if (!config_kv_text || !out_dir) return invalid_arg("null argument");
    return wrap([&] {
        kv::KvConfig cfg = kv::KvConfig::parse(config_kv_text);
        train::Stage stage = train::stage_from_name(cfg.require("stage"));
        uint64_t seed = cfg.get_uint("seed", 0);
        std::string resume = cfg.get("resume");

        train::TrainState st{};
        uint64_t chain_in = 0xcbf29ce484222325ull;
        if (!resume.empty()) {
            st = load_state_checked(resume, "resume");
            chain_in = fnv1a_file(resume);
        } else if (stage != train::Stage::Text && cfg.get_uint("enforce_chain", 1)) {
            static const char* prior[] = {"", "text", "align", "single_sft"};
            throw PrecondError(std::string(train::stage_name(stage)) + " requires the " +
                               prior[int(stage)] + " stage checkpoint: set resume=<path>");
        } else {
            st = train::make_train_state(model_config_from(cfg), encoder_config_from(cfg),
                                         cfg.get_uint("projector.hidden", 32), seed);
        }

        train::StageConfig sc;
        sc.stage = stage;
        sc.peak_lr = cfg.get_num("peak_lr", 1e-3);
        sc.warmup_fraction = cfg.get_num("warmup_fraction", 0.03);
        sc.epochs = cfg.get_uint("epochs", 1);
        sc.pack_len = cfg.get_uint("pack_len", 256);
        size_t items = cfg.get_uint("items", 64);

        auto corpus = corpus_for_stage(stage, st, items, seed + 0x434f5250ull);
        auto rep = train::train_stage(st, sc, corpus, seed, chain_in);

        auto dir = prepare_run_dir(out_dir);
        train::save_train_state(st, (dir / "checkpoint.bin").string());
        train::save_report_jsonl((dir / "report.jsonl").string(), rep);
        std::vector<std::string> inputs;
        if (!resume.empty()) inputs.push_back(resume);
        kv::write_manifest((dir / "manifest.txt").string(), cfg, inputs);
    });
}

int hlm_run_generate(const char* config_kv_text, const char* out_dir) {
    if (!config_kv_text || !out_dir) return invalid_arg("null argument");
    return wrap([&] {
        kv::KvConfig cfg = kv::KvConfig::parse(config_kv_text);
        auto st = load_state_checked(cfg.require("checkpoint"), "generate");
        std::string prompt = cfg.get("prompt", "this is");
        size_t max_new = cfg.get_uint("max_new", 16);

        ModelInput input = ModelInput::text(st.vocab.tokenize(prompt));
        if (input.tokens.empty()) throw PrecondError("prompt tokenized to nothing");
        GreedyTrace t = greedy_decode(st.model, input, max_new, {}, st.vocab.eos);

        auto dir = prepare_run_dir(out_dir);
        std::ofstream txt(dir / "generate.txt", std::ios::trunc);
        txt << st.vocab.detokenize(t.generated) << '\n';
        std::ofstream trace(dir / "trace.txt", std::ios::trunc);
        for (int id : t.prompt) trace << id << ' ';
        trace << "|";
        for (int id : t.generated) trace << ' ' << id;
        trace << '\n';
        kv::write_manifest((dir / "manifest.txt").string(), cfg,
                           {cfg.require("checkpoint")});
    });
}

int hlm_run_bench(const char* config_kv_text, const char* out_dir) {
    if (!config_kv_text || !out_dir) return invalid_arg("null argument");
    return wrap([&] {
        kv::KvConfig cfg = kv::KvConfig::parse(config_kv_text);
        std::string mode = cfg.require("mode");
        uint64_t seed = cfg.get_uint("seed", 0);
        HybridModel model = cfg.has("checkpoint")
                                ? load_state_checked(cfg.require("checkpoint"), "bench").model
                                : build_model(model_config_from(cfg), seed);
        auto dir = prepare_run_dir(out_dir);
        size_t T = cfg.get_uint("context", 64);
        size_t trials = cfg.get_uint("trials", 5);

        if (mode == "prefill") {
            auto r = bench::measure_prefill(model, T, trials, cfg.get_uint("warmups", 3), seed);
            std::vector<std::vector<double>> rows;
            for (double s : r.samples) rows.push_back({double(T), s});
            bench::save_csv((dir / "prefill.csv").string(), {"tokens", "seconds"}, rows);
        } else if (mode == "throughput") {
            auto r = bench::measure_throughput(model, T, cfg.get_uint("n", 64), seed);
            std::vector<std::pair<double, double>> xy;
            for (size_t k = 0; k < r.time_k.size(); ++k)
                xy.push_back({double(k + 1), r.time_k[k]});
            bench::save_xy_series((dir / "decode_times.csv").string(), xy, "token", "seconds");
            std::ofstream os(dir / "throughput.csv", std::ios::trunc);
            os << "tokens_per_second\n" << r.tokens_per_second << '\n';
        } else if (mode == "sweep-tokens") {
            bench::CostModelConfig cm;
            cm.active_params = cfg.get_num("cost.active_params", 1e6);
            auto budgets = parse_uint_list(cfg.get("budgets", "9,36,144"));
            auto rows = bench::sweep_tokens_per_image(model, cm, budgets,
                                                      cfg.get_uint("images", 2), trials, seed);
            std::vector<std::vector<double>> out;
            for (auto& r : rows)
                out.push_back({double(r.tokens_per_image), r.prefill_seconds, r.flops});
            bench::save_csv((dir / "sweep_tokens.csv").string(),
                            {"tokens_per_image", "prefill_seconds", "flops"}, out);
        } else if (mode == "memory") {
            std::vector<std::pair<double, double>> xy;
            for (size_t t = T; t <= 4 * T; t *= 2)
                xy.push_back({double(t), double(bench::measured_session_bytes(model, t, seed))});
            bench::save_xy_series((dir / "memory.csv").string(), xy, "tokens", "session_bytes");
        } else {
            throw kv::KvError("unknown bench mode: " + mode);
        }
        kv::write_manifest((dir / "manifest.txt").string(), cfg, {});
    });
}

int hlm_run_costmodel(const char* config_kv_text, const char* out_dir) {
    if (!config_kv_text || !out_dir) return invalid_arg("null argument");
    return wrap([&] {
        kv::KvConfig cfg = kv::KvConfig::parse(config_kv_text);
        bench::CostModelConfig cm;
        cm.total_params = cfg.get_num("cost.total_params", cm.total_params);
        cm.active_params = cfg.get_num("cost.active_params", cm.active_params);
        cm.n_attn_layers = cfg.get_uint("cost.n_attn_layers", cm.n_attn_layers);
        cm.n_kv_heads = cfg.get_uint("cost.n_kv_heads", cm.n_kv_heads);
        cm.head_dim = cfg.get_uint("cost.head_dim", cm.head_dim);
        cm.bytes_per_scalar = cfg.get_num("cost.bytes_per_scalar", cm.bytes_per_scalar);
        cm.tokens_per_image = cfg.get_uint("cost.tokens_per_image", cm.tokens_per_image);
        cm.kappa = int(cfg.get_uint("cost.kappa", 1));
        cm.validate();

        double budget = cfg.get_num("budget_bytes", 80e9);
        bench::OverheadModel ov;
        ov.weights_bytes = cfg.get_num("weights_bytes", 9e9);
        ov.per_token_bytes = bench::calibrate_per_token_overhead(
            budget, cm, ov.weights_bytes, 0.0, cfg.get_uint("calibration_images", 1173));
        auto mi = bench::max_images(budget, cm, ov);

        auto dir = prepare_run_dir(out_dir);
        std::ofstream os(dir / "costmodel.csv", std::ios::trunc);
        os.precision(12);
        os << "quantity,value\n";
        os << "video_tokens_3min_1fps_576," << bench::video_tokens(3, 1, 576) << '\n';
        os << "video_tokens_3min_1fps_144," << bench::video_tokens(3, 1, 144) << '\n';
        os << "kv_cache_bytes_262144," << bench::kv_cache_bytes(cm, 262144.0) << '\n';
        os << "flops_128_images," << bench::flops_estimate(cm, 128) << '\n';
        os << "flops_54_images," << bench::flops_estimate(cm, 54) << '\n';
        os << "overhead_bytes_per_token," << ov.per_token_bytes << '\n';
        os << "max_images_at_budget," << (mi.feasible ? double(mi.n_images) : -1.0) << '\n';
        kv::write_manifest((dir / "manifest.txt").string(), cfg, {});
    });
}

int hlm_run_eval(const char* config_kv_text, const char* out_dir) {
    if (!config_kv_text || !out_dir) return invalid_arg("null argument");
    return wrap([&] {
        kv::KvConfig cfg = kv::KvConfig::parse(config_kv_text);
        std::string suite = cfg.require("suite");
        if (suite != "niah" && suite != "icl" && suite != "frames")
            throw kv::KvError("unknown eval suite: " + suite);
        uint64_t seed = cfg.get_uint("seed", 0);
        size_t trials = cfg.get_uint("trials", 20);

        bool oracle = cfg.get_uint("oracle", 0) != 0;
        bool random = cfg.get("runner") == "random";
        train::TrainState st{};
        eval::Runner runner;
        protocol::Vocabulary vocab = protocol::Vocabulary::build(512);
        size_t slot_len = 9;
        if (oracle) runner = eval::oracle_runner();
        else if (random) runner = eval::random_runner();
        else {
            st = load_state_checked(cfg.require("checkpoint"), "eval");
            vocab = st.vocab;
            slot_len = st.tokens_per_image();
            runner = eval::model_runner(st);
        }

        eval::EvalGrid grid;
        if (suite == "niah") {
            std::vector<double> depths = {0.0, 0.25, 0.5, 0.75, 1.0};
            size_t frames = cfg.get_uint("frames", 8);
            eval::Generator gen = [&vocab, frames, slot_len](const std::vector<double>& cell,
                                                             uint64_t s) {
                eval::NIAHSpec spec;
                spec.haystack_size = frames;
                spec.depth_fraction = cell.at(0);
                spec.slot_len = slot_len;
                Rng rng(s);
                spec.needle_class = rng.below(spec.classes.size());
                spec.seed = s;
                return eval::gen_niah(spec, vocab);
            };
            grid = eval::score_grid(runner, gen, {"depth"}, {depths}, trials, seed);
        } else if (suite == "icl") {
            std::vector<double> shots = {1, 2, 4, 5};
            eval::Generator gen = [&vocab, slot_len](const std::vector<double>& cell,
                                                     uint64_t s) {
                eval::ICLSpec spec;
                spec.k = size_t(cell.at(0));
                spec.seed = s;
                spec.slot_len = slot_len;
                return eval::gen_icl_matching(spec, vocab);
            };
            grid = eval::score_grid(runner, gen, {"shots"}, {shots}, trials, seed);
        } else {
            eval::NIAHSpec base;
            base.haystack_size = cfg.get_uint("frames", 16);
            base.slot_len = slot_len;
            auto counts = parse_uint_list(cfg.get("frame_counts", "2,4,8,16"));
            grid = eval::sweep_frames(runner, counts, base, vocab, trials, seed);
        }

        auto dir = prepare_run_dir(out_dir);
        eval::save_grid_csv((dir / "grid.csv").string(), grid);
        kv::write_manifest((dir / "manifest.txt").string(), cfg, {});
    });
}

} // extern "C"
