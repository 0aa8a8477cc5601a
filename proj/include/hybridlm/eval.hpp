#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hybridlm/training.hpp"

namespace hlm::eval {

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// needle position for a given haystack size and depth fraction in [0,1]
size_t needle_index(size_t haystack_size, double depth_fraction);

struct NIAHSpec {
    size_t haystack_size = 8;
    double depth_fraction = 0.5;
    size_t needle_class = 0;  // index into classes
    uint64_t seed = 0;
    size_t image_side = 24;
    size_t slot_len = 9;
    std::vector<std::string> classes = {"red", "green", "blue", "yellow"};
};

// one self-labeled instance with a closed answer set
struct EvalInstance {
    protocol::MultimodalSequence seq;
    std::vector<vision::Image> images;
    std::vector<std::string> answer_set;
    std::string answer;  // ground truth from generation parameters
    size_t needle_at = 0;
};

EvalInstance gen_niah(const NIAHSpec& spec, const protocol::Vocabulary& v);

struct ICLSpec {
    std::string relation = "same_shape";  // or "same_color"
    size_t k = 4;
    uint64_t seed = 0;
    size_t image_side = 24;
    size_t slot_len = 9;
    std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
    std::vector<std::string> shapes = {"square", "circle"};
};

// k support pairs (balanced yes/no when k is even) + query, multi-image template
EvalInstance gen_icl_matching(const ICLSpec& spec, const protocol::Vocabulary& v);

// a runner predicts one label from the closed answer set
using Runner = std::function<std::string(const EvalInstance&, uint64_t cell_seed)>;

Runner oracle_runner();   // reads the generation-side ground truth
Runner random_runner();   // uniform over the answer set
// constrained greedy decoding through the trained stack
Runner model_runner(const train::TrainState& st);
// classifies by scanning the provided frames; chance when the needle is absent
Runner frame_scan_runner();

using Generator = std::function<EvalInstance(const std::vector<double>& cell, uint64_t seed)>;

struct EvalGrid {
    std::vector<std::string> axis_names;
    std::vector<std::vector<double>> axis_values;
    // row-major over the axis product
    std::vector<double> accuracy;
    std::vector<size_t> trials;
    std::vector<uint8_t> valid;

    size_t cells() const;
};

// deterministic per seed; per-cell seeds derive from (master seed, cell index)
// so serial and parallel evaluation agree; a failing cell is marked invalid
EvalGrid score_grid(const Runner& runner, const Generator& gen,
                    const std::vector<std::string>& axis_names,
                    const std::vector<std::vector<double>>& axis_values, size_t trials,
                    uint64_t master_seed);

// fixed underlying video; each budget uniform-samples that many frames
EvalGrid sweep_frames(const Runner& runner, const std::vector<size_t>& frame_counts,
                      const NIAHSpec& base, const protocol::Vocabulary& v, size_t trials,
                      uint64_t master_seed);

// uniform sampling of `budget` indices from `total` frames (always keeps ends)
std::vector<size_t> sample_frame_indices(size_t total, size_t budget);

void save_grid_csv(const std::string& path, const EvalGrid& g);

} // namespace hlm::eval
