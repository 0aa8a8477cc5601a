#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace hlm::protocol {

struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fixed-length packing targets: desk-scale default and the paper-scale
// constant used only in arithmetic tests.
constexpr size_t kPackLenDesk = 4096;
constexpr size_t kPackLenFull = 176000;

constexpr size_t kTokensPerImage = 144;

// 512-id toy vocabulary: 8 specials, 256 byte-fallback ids, word pieces.
struct Vocabulary {
    int img_open = 0;    // <img>
    int img_close = 1;   // </img>
    int img_token = 2;   // placeholder filled by projected image embeddings
    int vid_open = 3;    // <vid>
    int vid_close = 4;   // </vid>
    int t_sep = 5;       // <t> between video frames
    int eos = 6;         // <eos> packing separator
    int newline = 7;     // \n

    size_t size = 0;
    std::vector<std::string> id_to_str;
    std::unordered_map<std::string, int> word_to_id;

    static Vocabulary build(size_t vocab_size = 512);
    // whitespace split with byte fallback; '\n' maps to the newline token
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;
    bool is_special(int id) const { return id >= 0 && id < 8; }
};

struct Segment {
    enum class Kind { Text, ImageSlot };
    Kind kind = Kind::Text;
    std::vector<int> tokens;   // Text only; may include specials other than <img>/</img>
    size_t image_index = 0;    // ImageSlot only
    size_t slot_len = kTokensPerImage;

    bool operator==(const Segment& o) const {
        return kind == o.kind && tokens == o.tokens && image_index == o.image_index &&
               (kind == Kind::Text || slot_len == o.slot_len);
    }
};

struct MultimodalSequence {
    std::vector<Segment> segments;

    size_t n_images() const;
    // each ImageSlot renders as <img> slot_len*<img_token> </img>
    std::vector<int> render(const Vocabulary& v) const;
    size_t rendered_length() const;

    bool operator==(const MultimodalSequence& o) const { return segments == o.segments; }
};

// Template assembly. Image content is referenced by index; the protocol layer
// never touches pixels or embeddings.
MultimodalSequence assemble_single(const Vocabulary& v, const std::string& text,
                                   size_t slot_len = kTokensPerImage);
// texts.size() must be n_images+1: text_0 img_0 \n text_1 img_1 \n ... text_n
MultimodalSequence assemble_multi(const Vocabulary& v, size_t n_images,
                                  const std::vector<std::string>& texts,
                                  size_t slot_len = kTokensPerImage);
// <vid> f1 <t> f2 <t> ... fn </vid> \n text
MultimodalSequence assemble_video(const Vocabulary& v, size_t n_frames, const std::string& text,
                                  size_t slot_len = kTokensPerImage);
// main \n (row of subimages \n) x rows, then text
MultimodalSequence assemble_patched(const Vocabulary& v, size_t n_subimages, size_t rows,
                                    size_t cols, const std::string& text,
                                    size_t slot_len = kTokensPerImage);

// Linear-scan bracket check; throws ProtocolError on imbalance, bad nesting,
// or stray placeholder ids outside <img>...</img>.
void check_brackets(const std::vector<int>& stream, const Vocabulary& v);

// Inverse of render: recovers the segment structure (adjacent text merged,
// image indices assigned in stream order).
MultimodalSequence parse_stream(const std::vector<int>& stream, const Vocabulary& v);

struct PackedBatch {
    std::vector<int> tokens;
    std::vector<size_t> seq_indices;  // source sequences, in placement order
};

struct PackPlan {
    std::vector<std::vector<size_t>> batches;  // sequence indices per batch
    std::vector<size_t> batch_lengths;         // incl. separators
};

// Greedy first-fit over open batches; <eos> between sequences, none trailing.
// Arithmetic-only planner; rejects any single sequence longer than L.
PackPlan pack_plan(const std::vector<size_t>& lengths, size_t L);
std::vector<PackedBatch> pack(const std::vector<std::vector<int>>& streams, size_t L,
                              const Vocabulary& v);

// Line-delimited dataset records.
struct DatasetRecord {
    std::string task_type;  // single | multi | video | patched | text
    std::vector<std::string> image_refs;
    std::vector<std::string> texts;
    size_t rows = 0, cols = 0;

    bool operator==(const DatasetRecord& o) const {
        return task_type == o.task_type && image_refs == o.image_refs && texts == o.texts &&
               rows == o.rows && cols == o.cols;
    }
};

std::string to_json_line(const DatasetRecord& r);
DatasetRecord from_json_line(const std::string& line);
void save_jsonl(const std::string& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> load_jsonl(const std::string& path);

} // namespace hlm::protocol
