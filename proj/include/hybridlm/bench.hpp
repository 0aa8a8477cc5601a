#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hybridlm/model.hpp"

namespace hlm::bench {

struct BenchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Analytic cost-model inputs for a full-scale hybrid configuration.
struct CostModelConfig {
    double total_params = 53e9;
    double active_params = 13e9;
    size_t n_attn_layers = 4;
    size_t n_kv_heads = 8;
    size_t head_dim = 128;
    double bytes_per_scalar = 2.0;  // bf16 KV cache
    size_t tokens_per_image = 144;
    int kappa = 1;                  // FLOPs multiplier on params*tokens; 1 or 2

    void validate() const;
};

size_t video_tokens(size_t minutes, size_t fps, size_t tokens_per_image);
double kv_cache_bytes(const CostModelConfig& cfg, double T);
double flops_estimate(const CostModelConfig& cfg, double n_images);

// memory budget = weights + fixed + context_tokens * (kv/token + overhead/token)
struct OverheadModel {
    double weights_bytes = 9e9;     // dense variant at int8
    double fixed_bytes = 0.0;
    double per_token_bytes = 0.0;   // calibrated activation/runtime overhead
};

struct MaxImagesResult {
    bool feasible = false;
    size_t n_images = 0;
};

MaxImagesResult max_images(double budget_bytes, const CostModelConfig& cfg,
                           const OverheadModel& ov);

// solve per_token_bytes so max_images(budget) == target exactly, then freeze
double calibrate_per_token_overhead(double budget_bytes, const CostModelConfig& cfg,
                                    double weights_bytes, double fixed_bytes,
                                    size_t target_images);

// ---- empirical measurements (monotonic clock, warmups excluded) ----

double median(std::vector<double> v);

struct PrefillResult {
    size_t T = 0;
    double seconds = 0.0;             // median over trials
    std::vector<double> samples;      // raw, warmups excluded
};

PrefillResult measure_prefill(const HybridModel& m, size_t T, size_t trials = 5,
                              size_t warmups = 3, uint64_t seed = 0);

// (N-1)/(time_N - time_1); throws on N < 2 or non-increasing timestamps
double throughput_formula(double time_1, double time_N, size_t N);

struct ThroughputResult {
    size_t context_T = 0;
    size_t N = 0;
    double tokens_per_second = 0.0;
    double seconds_per_step = 0.0;
    std::vector<double> time_k;       // cumulative wall time after k emitted tokens
};

ThroughputResult measure_throughput(const HybridModel& m, size_t context_T, size_t N,
                                    uint64_t seed = 0);

// DecodeSession footprint after prefilling T tokens
size_t measured_session_bytes(const HybridModel& m, size_t T, uint64_t seed = 0);

struct EfficiencyReport {
    size_t context_T = 0;
    double prefill_seconds = 0.0;
    double tokens_per_second = 0.0;
    size_t peak_session_bytes = 0;
    std::string config_echo;
    std::vector<double> prefill_samples;
    std::vector<double> decode_time_k;
};

EfficiencyReport measure_efficiency(const HybridModel& m, size_t T, size_t N,
                                    size_t trials = 5, size_t warmups = 3, uint64_t seed = 0);

struct SweepRow {
    size_t tokens_per_image = 0;
    double prefill_seconds = 0.0;
    double flops = 0.0;
};

// fixed image count, varying per-image token budget
std::vector<SweepRow> sweep_tokens_per_image(const HybridModel& m, const CostModelConfig& base,
                                             const std::vector<size_t>& budgets,
                                             size_t n_images, size_t trials = 3,
                                             uint64_t seed = 0);

// least-squares slope of log y vs log x; the fitted exponent of y ~ x^b
double fit_power_exponent(const std::vector<std::pair<double, double>>& xy);

// ---- report files ----

void save_csv(const std::string& path, const std::vector<std::string>& header,
              const std::vector<std::vector<double>>& rows);
// two-column (x, y) plot-data series
void save_xy_series(const std::string& path, const std::vector<std::pair<double, double>>& xy,
                    const std::string& xname, const std::string& yname);
void save_efficiency_csv(const std::string& path, const EfficiencyReport& r);

} // namespace hlm::bench
