#pragma once

#include <map>
#include <string>
#include <vector>

#include "hybridlm/model.hpp"
#include "hybridlm/protocol.hpp"
#include "hybridlm/vision.hpp"

namespace hlm::train {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Stage { Text, Align, SingleSFT, MultiSFT };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

// per-stage trainable component sets
bool encoder_trainable(Stage s);    // never true
bool projector_trainable(Stage s);  // Align, SingleSFT, MultiSFT
bool llm_trainable(Stage s);        // Text, SingleSFT, MultiSFT

struct StageConfig {
    Stage stage = Stage::Align;
    double peak_lr = 1e-5;
    double warmup_fraction = 0.03;
    size_t epochs = 1;
    size_t pack_len = 512;  // desk-scale; full-scale constant lives in protocol
};

// linear warmup to peak over warmup_fraction*total steps, then cosine to 0
double lr_schedule(size_t step, size_t total_steps, double peak, double warmup_fraction = 0.03);

// one corpus item: a multimodal sequence plus the images its slots refer to
struct TrainItem {
    protocol::MultimodalSequence seq;
    std::vector<vision::Image> images;  // indexed by ImageSlot::image_index
    size_t response_start = 0;          // rendered position where the answer begins
    std::string source;
    std::string label;  // ground-truth answer text for self-labeled tasks
};

// everything that trains or feeds the decoder
struct TrainState {
    HybridModel model;
    vision::VisionEncoder encoder;
    vision::Projector projector;
    protocol::Vocabulary vocab;

    size_t tokens_per_image() const;  // after 2x2 pooling of encoder output
    NamedParams all_params() const;   // "llm." / "encoder." / "projector." prefixes
    // pooled+projected embeddings for a list of images (no grad through encoder)
    Tensor project_images(const std::vector<vision::Image>& images) const;
};

TrainState make_train_state(const HybridConfig& model_cfg, const vision::EncoderConfig& enc_cfg,
                            size_t proj_hidden, uint64_t seed);

// whole-state checkpoint (decoder + encoder + projector) in the versioned
// tensor-file format; the embedded config rebuilds all three on load
void save_train_state(const TrainState& st, const std::string& path);
TrainState load_train_state(const std::string& path);

std::map<std::string, bool> freeze_mask(const TrainState& st, Stage stage);

// RMSProp-style per-parameter adaptive optimizer, no momentum, no weight decay
struct Optimizer {
    double beta = 0.99;
    double eps = 1e-8;
    std::map<std::string, std::vector<double>> v;  // grad-square EMA per tensor

    void step(const NamedParams& params, const std::map<std::string, bool>& trainable,
              double lr);
};

struct StepLog {
    size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainingReport {
    Stage stage = Stage::Align;
    std::vector<StepLog> steps;
    uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
    uint64_t params_hash_before = 0, params_hash_after = 0;
    uint64_t chain_in = 0, chain_out = 0;  // hash chain across progressive stages
    double initial_loss = 0.0, final_loss = 0.0;  // smoothed over first/last quarter

    std::string to_jsonl() const;
};

void save_report_jsonl(const std::string& path, const TrainingReport& r);

// Packs the corpus (epochs=1: each item exactly once), runs next-token
// cross-entropy, updates trainable params only. SFT stages mask loss to
// response tokens; Text/Align to all non-special targets.
TrainingReport train_stage(TrainState& st, const StageConfig& cfg,
                           const std::vector<TrainItem>& corpus, uint64_t seed,
                           uint64_t chain_in = 0xcbf29ce484222325ull);

struct MixtureSpec {
    std::vector<std::pair<std::string, double>> sources;  // name, relative weight

    // multi_image_a : multi_image_b : video_caption : single_replay :
    // text_replay : subimage = 200 : 200 : 50 : 200 : 50 : 50
    static MixtureSpec multi_sft_default();
};

// i.i.d. draws of source indices proportional to weights; deterministic per seed
std::vector<size_t> sample_mixture(const MixtureSpec& spec, size_t n, uint64_t seed);

struct SynthSpec {
    size_t image_side = 24;
    std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
    std::vector<std::string> shapes = {"square", "circle"};
    size_t slot_len = 9;  // must match TrainState::tokens_per_image()
};

// solid geometric shape on a black background; deterministic per (color, shape, rng)
vision::Image draw_shape(const std::string& color, const std::string& shape, size_t side,
                         Rng& rng);

std::vector<TrainItem> gen_caption_task(const SynthSpec& spec, const protocol::Vocabulary& v,
                                        size_t n, uint64_t seed);
// video with one marked frame; answer = planted color class
std::vector<TrainItem> gen_needle_task(const SynthSpec& spec, const protocol::Vocabulary& v,
                                       size_t n_frames, size_t n, uint64_t seed);
// image pair followed by both shape names ("shapes square circle"); bridges
// single-image captioning into the pair format the matching task uses
std::vector<TrainItem> gen_pair_caption_task(const SynthSpec& spec,
                                             const protocol::Vocabulary& v, size_t n,
                                             uint64_t seed);
// k support image-pairs with relation yes/no labels, then one query pair; the
// prompt never names the relation, so at zero shots it is only inferable from
// the support examples
std::vector<TrainItem> gen_icl_task(const SynthSpec& spec, const protocol::Vocabulary& v,
                                    size_t k_shots, size_t n, uint64_t seed,
                                    const std::string& relation = "same_shape");
std::vector<TrainItem> gen_text_task(const protocol::Vocabulary& v, size_t n, uint64_t seed);

} // namespace hlm::train
