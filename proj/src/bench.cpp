#include "hybridlm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

namespace hlm::bench {

using Clock = std::chrono::steady_clock;

static double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void CostModelConfig::validate() const {
    if (total_params <= 0 || active_params <= 0) throw BenchError("param counts must be positive");
    if (n_attn_layers == 0 || n_kv_heads == 0 || head_dim == 0)
        throw BenchError("KV geometry must be positive");
    if (bytes_per_scalar <= 0) throw BenchError("bytes_per_scalar must be positive");
    if (tokens_per_image == 0) throw BenchError("tokens_per_image must be positive");
    if (kappa != 1 && kappa != 2) throw BenchError("kappa must be 1 or 2");
}

size_t video_tokens(size_t minutes, size_t fps, size_t tokens_per_image) {
    return minutes * 60 * fps * tokens_per_image;
}

double kv_cache_bytes(const CostModelConfig& cfg, double T) {
    return 2.0 * double(cfg.n_attn_layers) * double(cfg.n_kv_heads) * double(cfg.head_dim) * T *
           cfg.bytes_per_scalar;
}

double flops_estimate(const CostModelConfig& cfg, double n_images) {
    return double(cfg.kappa) * cfg.active_params * n_images * double(cfg.tokens_per_image);
}

MaxImagesResult max_images(double budget_bytes, const CostModelConfig& cfg,
                           const OverheadModel& ov) {
    cfg.validate();
    double avail = budget_bytes - ov.weights_bytes - ov.fixed_bytes;
    if (avail < 0) return {false, 0};
    double per_token = kv_cache_bytes(cfg, 1.0) + ov.per_token_bytes;
    double per_image = per_token * double(cfg.tokens_per_image);
    return {true, size_t(std::floor(avail / per_image))};
}

double calibrate_per_token_overhead(double budget_bytes, const CostModelConfig& cfg,
                                    double weights_bytes, double fixed_bytes,
                                    size_t target_images) {
    if (target_images == 0) throw BenchError("calibration target must be positive");
    double avail = budget_bytes - weights_bytes - fixed_bytes;
    if (avail <= 0) throw BenchError("budget below weights: nothing to calibrate");
    // aim at target+0.5 so the floor lands exactly on target
    double per_token = avail / ((double(target_images) + 0.5) * double(cfg.tokens_per_image));
    double ov = per_token - kv_cache_bytes(cfg, 1.0);
    if (ov < 0) throw BenchError("calibration target exceeds what the KV cache alone allows");
    return ov;
}

double median(std::vector<double> v) {
    if (v.empty()) throw BenchError("median of empty sample set");
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

static std::vector<int> random_tokens(size_t T, size_t vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> ids(T);
    for (auto& id : ids) id = int(rng.below(vocab));
    return ids;
}

PrefillResult measure_prefill(const HybridModel& m, size_t T, size_t trials, size_t warmups,
                              uint64_t seed) {
    if (T == 0 || trials == 0) throw BenchError("T and trials must be positive");
    auto input = ModelInput::text(random_tokens(T, m.cfg.vocab_size, seed));
    PrefillResult res;
    res.T = T;
    for (size_t i = 0; i < warmups + trials; ++i) {
        DecodeSession s(m);
        auto t0 = Clock::now();
        prefill(s, input);
        double dt = seconds_since(t0);
        if (i >= warmups) res.samples.push_back(dt);
    }
    res.seconds = median(res.samples);
    return res;
}

double throughput_formula(double time_1, double time_N, size_t N) {
    if (N < 2) throw BenchError("throughput needs N >= 2");
    if (time_N <= time_1) throw BenchError("non-increasing timestamps");
    return (double(N) - 1.0) / (time_N - time_1);
}

ThroughputResult measure_throughput(const HybridModel& m, size_t context_T, size_t N,
                                    uint64_t seed) {
    if (N < 2) throw BenchError("throughput needs N >= 2");
    DecodeSession s(m);
    auto ctx = random_tokens(context_T ? context_T : 1, m.cfg.vocab_size, seed);
    auto logits = prefill(s, ModelInput::text(ctx));
    ThroughputResult res;
    res.context_T = context_T;
    res.N = N;
    auto t0 = Clock::now();
    int next = int(std::max_element(logits.begin(), logits.end()) - logits.begin());
    for (size_t k = 0; k < N; ++k) {
        logits = decode_step(s, next);
        next = int(std::max_element(logits.begin(), logits.end()) - logits.begin());
        res.time_k.push_back(seconds_since(t0));
    }
    res.tokens_per_second = throughput_formula(res.time_k.front(), res.time_k.back(), N);
    res.seconds_per_step = 1.0 / res.tokens_per_second;
    return res;
}

size_t measured_session_bytes(const HybridModel& m, size_t T, uint64_t seed) {
    DecodeSession s(m);
    prefill(s, ModelInput::text(random_tokens(T, m.cfg.vocab_size, seed)));
    return s.bytes();
}

EfficiencyReport measure_efficiency(const HybridModel& m, size_t T, size_t N, size_t trials,
                                    size_t warmups, uint64_t seed) {
    EfficiencyReport r;
    r.context_T = T;
    auto pf = measure_prefill(m, T, trials, warmups, seed);
    r.prefill_seconds = pf.seconds;
    r.prefill_samples = pf.samples;
    auto tp = measure_throughput(m, T, N, seed);
    r.tokens_per_second = tp.tokens_per_second;
    r.decode_time_k = tp.time_k;
    r.peak_session_bytes = measured_session_bytes(m, T + N, seed);
    r.config_echo = m.cfg.to_kv_text();
    return r;
}

std::vector<SweepRow> sweep_tokens_per_image(const HybridModel& m, const CostModelConfig& base,
                                             const std::vector<size_t>& budgets, size_t n_images,
                                             size_t trials, uint64_t seed) {
    std::vector<SweepRow> rows;
    for (size_t budget : budgets) {
        CostModelConfig cfg = base;
        cfg.tokens_per_image = budget;
        SweepRow row;
        row.tokens_per_image = budget;
        row.flops = flops_estimate(cfg, double(n_images));
        row.prefill_seconds = measure_prefill(m, n_images * budget, trials, 1, seed).seconds;
        rows.push_back(row);
    }
    return rows;
}

double fit_power_exponent(const std::vector<std::pair<double, double>>& xy) {
    if (xy.size() < 2) throw BenchError("power fit needs at least two points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto& [x, y] : xy) {
        if (x <= 0 || y <= 0) throw BenchError("power fit needs positive samples");
        double lx = std::log(x), ly = std::log(y);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    double n = double(xy.size());
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void save_csv(const std::string& path, const std::vector<std::string>& header,
              const std::vector<std::vector<double>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw BenchError("cannot open for writing: " + path);
    for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << '\n';
    os.precision(12);
    for (auto& row : rows) {
        if (row.size() != header.size()) throw BenchError("csv row width mismatch");
        for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
        os << '\n';
    }
}

void save_xy_series(const std::string& path, const std::vector<std::pair<double, double>>& xy,
                    const std::string& xname, const std::string& yname) {
    std::vector<std::vector<double>> rows;
    rows.reserve(xy.size());
    for (auto& [x, y] : xy) rows.push_back({x, y});
    save_csv(path, {xname, yname}, rows);
}

void save_efficiency_csv(const std::string& path, const EfficiencyReport& r) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw BenchError("cannot open for writing: " + path);
    os.precision(12);
    os << "metric,value\n";
    os << "context_tokens," << r.context_T << '\n';
    os << "prefill_seconds," << r.prefill_seconds << '\n';
    os << "tokens_per_second," << r.tokens_per_second << '\n';
    os << "peak_session_bytes," << r.peak_session_bytes << '\n';
    for (size_t i = 0; i < r.prefill_samples.size(); ++i)
        os << "prefill_sample_" << i << ',' << r.prefill_samples[i] << '\n';
    for (size_t i = 0; i < r.decode_time_k.size(); ++i)
        os << "decode_time_" << (i + 1) << ',' << r.decode_time_k[i] << '\n';
}

} // namespace hlm::bench
