#include "hybridlm/protocol.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace hlm::protocol {

static const char* kSpecialNames[8] = {"<img>", "</img>", "<img_token>", "<vid>",
                                       "</vid>", "<t>",    "<eos>",       "\n"};

// curated word pieces; the tail of the table is filled with numbered filler
static const char* kWords[] = {
    "this",  "is",     "a",     "an",   "the",  "what",  "which", "where", "who",   "color",
    "colour","of",     "in",    "on",   "at",   "to",    "and",   "or",    "not",   "it",
    "cat",   "dog",    "bird",  "fish", "tree", "house", "car",   "ball",  "frame", "image",
    "video", "picture","answer","question:",    "answer:","yes",  "no",    "red",   "green",
    "blue",  "yellow", "black", "white","gray", "square","circle","needle","shows", "contains",
    "first", "second", "third", "last", "next", "match", "label", "pair",  "shot",  "example",
    "cat.",  "dog.",   "this?", "this:","a:",   "0",     "1",     "2",     "3",     "4",
    "5",     "6",      "7",     "8",    "9",    ".",     ",",     "?",     ":",     "=",
};

Vocabulary Vocabulary::build(size_t vocab_size) {
    if (vocab_size < 8 + 256 + 1)
        throw ProtocolError("vocab_size too small: " + std::to_string(vocab_size));
    Vocabulary v;
    v.size = vocab_size;
    v.id_to_str.reserve(vocab_size);
    for (auto* s : kSpecialNames) v.id_to_str.emplace_back(s);
    for (int b = 0; b < 256; ++b) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
        v.id_to_str.emplace_back(buf);
    }
    size_t n_words = sizeof(kWords) / sizeof(kWords[0]);
    for (size_t i = 0; i < n_words && v.id_to_str.size() < vocab_size; ++i) {
        v.word_to_id[kWords[i]] = int(v.id_to_str.size());
        v.id_to_str.emplace_back(kWords[i]);
    }
    for (size_t i = 0; v.id_to_str.size() < vocab_size; ++i) {
        std::string w = "w" + std::to_string(i);
        v.word_to_id[w] = int(v.id_to_str.size());
        v.id_to_str.push_back(std::move(w));
    }
    return v;
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
    std::vector<int> out;
    auto flush_word = [&](const std::string& w) {
        if (w.empty()) return;
        auto it = word_to_id.find(w);
        if (it != word_to_id.end()) {
            out.push_back(it->second);
        } else {
            for (unsigned char c : w) out.push_back(8 + int(c));
        }
    };
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            flush_word(cur);
            cur.clear();
            out.push_back(newline);
        } else if (c == ' ' || c == '\t' || c == '\r') {
            flush_word(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    flush_word(cur);
    return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    bool prev_word = false;
    for (int id : ids) {
        if (id < 0 || size_t(id) >= size)
            throw ProtocolError("token id out of range: " + std::to_string(id));
        if (id == newline) {
            out += '\n';
            prev_word = false;
        } else if (id >= 8 && id < 8 + 256) {
            out += char(id - 8);
            prev_word = false;  // bytes concatenate without spaces
        } else {
            if (prev_word) out += ' ';
            out += id_to_str[size_t(id)];
            prev_word = id >= 8 + 256;
        }
    }
    return out;
}

size_t MultimodalSequence::n_images() const {
    size_t n = 0;
    for (auto& s : segments)
        if (s.kind == Segment::Kind::ImageSlot) ++n;
    return n;
}

std::vector<int> MultimodalSequence::render(const Vocabulary& v) const {
    std::vector<int> out;
    out.reserve(rendered_length());
    for (auto& s : segments) {
        if (s.kind == Segment::Kind::Text) {
            out.insert(out.end(), s.tokens.begin(), s.tokens.end());
        } else {
            out.push_back(v.img_open);
            out.insert(out.end(), s.slot_len, v.img_token);
            out.push_back(v.img_close);
        }
    }
    return out;
}

size_t MultimodalSequence::rendered_length() const {
    size_t n = 0;
    for (auto& s : segments)
        n += s.kind == Segment::Kind::Text ? s.tokens.size() : s.slot_len + 2;
    return n;
}

namespace {

// keep segment lists normalized: adjacent text segments merged, no empties
void push_text(MultimodalSequence& seq, std::vector<int> toks) {
    if (toks.empty()) return;
    if (!seq.segments.empty() && seq.segments.back().kind == Segment::Kind::Text) {
        auto& t = seq.segments.back().tokens;
        t.insert(t.end(), toks.begin(), toks.end());
    } else {
        Segment s;
        s.tokens = std::move(toks);
        seq.segments.push_back(std::move(s));
    }
}

void push_slot(MultimodalSequence& seq, size_t index, size_t slot_len) {
    Segment s;
    s.kind = Segment::Kind::ImageSlot;
    s.image_index = index;
    s.slot_len = slot_len;
    seq.segments.push_back(std::move(s));
}

} // namespace

MultimodalSequence assemble_single(const Vocabulary& v, const std::string& text,
                                   size_t slot_len) {
    MultimodalSequence seq;
    push_slot(seq, 0, slot_len);
    push_text(seq, {v.newline});
    push_text(seq, v.tokenize(text));
    return seq;
}

MultimodalSequence assemble_multi(const Vocabulary& v, size_t n_images,
                                  const std::vector<std::string>& texts, size_t slot_len) {
    if (texts.size() != n_images + 1)
        throw ProtocolError("interleave mismatch: " + std::to_string(n_images) + " images need " +
                            std::to_string(n_images + 1) + " texts, got " +
                            std::to_string(texts.size()));
    MultimodalSequence seq;
    for (size_t i = 0; i < n_images; ++i) {
        push_text(seq, v.tokenize(texts[i]));
        push_slot(seq, i, slot_len);
        push_text(seq, {v.newline});
    }
    push_text(seq, v.tokenize(texts[n_images]));
    return seq;
}

MultimodalSequence assemble_video(const Vocabulary& v, size_t n_frames, const std::string& text,
                                  size_t slot_len) {
    if (n_frames == 0) throw ProtocolError("video needs at least one frame");
    MultimodalSequence seq;
    push_text(seq, {v.vid_open});
    for (size_t i = 0; i < n_frames; ++i) {
        if (i > 0) push_text(seq, {v.t_sep});
        push_slot(seq, i, slot_len);
    }
    push_text(seq, {v.vid_close, v.newline});
    push_text(seq, v.tokenize(text));
    return seq;
}

MultimodalSequence assemble_patched(const Vocabulary& v, size_t n_subimages, size_t rows,
                                    size_t cols, const std::string& text, size_t slot_len) {
    if (rows * cols != n_subimages)
        throw ProtocolError("subimage grid mismatch: " + std::to_string(rows) + "x" +
                            std::to_string(cols) + " != " + std::to_string(n_subimages));
    MultimodalSequence seq;
    push_slot(seq, 0, slot_len);  // whole image resized to one tile
    push_text(seq, {v.newline});
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c) push_slot(seq, 1 + r * cols + c, slot_len);
        push_text(seq, {v.newline});
    }
    push_text(seq, v.tokenize(text));
    return seq;
}

void check_brackets(const std::vector<int>& stream, const Vocabulary& v) {
    bool in_img = false, in_vid = false;
    for (size_t i = 0; i < stream.size(); ++i) {
        int id = stream[i];
        if (id == v.img_open) {
            if (in_img) throw ProtocolError("nested <img> at position " + std::to_string(i));
            in_img = true;
        } else if (id == v.img_close) {
            if (!in_img) throw ProtocolError("unmatched </img> at position " + std::to_string(i));
            in_img = false;
        } else if (id == v.img_token) {
            if (!in_img)
                throw ProtocolError("image placeholder outside <img> at position " +
                                    std::to_string(i));
        } else if (in_img) {
            throw ProtocolError("non-placeholder token inside <img> at position " +
                                std::to_string(i));
        } else if (id == v.vid_open) {
            if (in_vid) throw ProtocolError("nested <vid> at position " + std::to_string(i));
            in_vid = true;
        } else if (id == v.vid_close) {
            if (!in_vid) throw ProtocolError("unmatched </vid> at position " + std::to_string(i));
            in_vid = false;
        }
    }
    if (in_img) throw ProtocolError("unterminated <img>");
    if (in_vid) throw ProtocolError("unterminated <vid>");
}

MultimodalSequence parse_stream(const std::vector<int>& stream, const Vocabulary& v) {
    check_brackets(stream, v);
    MultimodalSequence seq;
    size_t img_index = 0;
    std::vector<int> text;
    for (size_t i = 0; i < stream.size(); ++i) {
        if (stream[i] == v.img_open) {
            push_text(seq, std::move(text));
            text.clear();
            size_t len = 0;
            for (++i; stream[i] != v.img_close; ++i) ++len;  // bracket check guarantees bounds
            push_slot(seq, img_index++, len);
        } else {
            text.push_back(stream[i]);
        }
    }
    push_text(seq, std::move(text));
    return seq;
}

PackPlan pack_plan(const std::vector<size_t>& lengths, size_t L) {
    PackPlan plan;
    for (size_t i = 0; i < lengths.size(); ++i) {
        size_t len = lengths[i];
        if (len > L)
            throw ProtocolError("sequence " + std::to_string(i) + " of length " +
                                std::to_string(len) + " exceeds pack length " + std::to_string(L));
        size_t b = 0;
        for (; b < plan.batches.size(); ++b)
            if (plan.batch_lengths[b] + 1 + len <= L) break;
        if (b == plan.batches.size()) {
            plan.batches.emplace_back();
            plan.batch_lengths.push_back(0);
            plan.batches[b].push_back(i);
            plan.batch_lengths[b] = len;
        } else {
            plan.batches[b].push_back(i);
            plan.batch_lengths[b] += 1 + len;  // <eos> separator then the sequence
        }
    }
    return plan;
}

std::vector<PackedBatch> pack(const std::vector<std::vector<int>>& streams, size_t L,
                              const Vocabulary& v) {
    std::vector<size_t> lengths(streams.size());
    for (size_t i = 0; i < streams.size(); ++i) lengths[i] = streams[i].size();
    PackPlan plan = pack_plan(lengths, L);
    std::vector<PackedBatch> out(plan.batches.size());
    for (size_t b = 0; b < plan.batches.size(); ++b) {
        auto& batch = out[b];
        batch.seq_indices = plan.batches[b];
        for (size_t k = 0; k < batch.seq_indices.size(); ++k) {
            if (k > 0) batch.tokens.push_back(v.eos);
            auto& s = streams[batch.seq_indices[k]];
            batch.tokens.insert(batch.tokens.end(), s.begin(), s.end());
        }
        if (batch.tokens.size() != plan.batch_lengths[b])
            throw ProtocolError("pack length accounting mismatch");
    }
    return out;
}

std::string to_json_line(const DatasetRecord& r) {
    nlohmann::json j;
    j["task_type"] = r.task_type;
    j["image_refs"] = r.image_refs;
    j["texts"] = r.texts;
    if (r.rows || r.cols) {
        j["rows"] = r.rows;
        j["cols"] = r.cols;
    }
    return j.dump();
}

DatasetRecord from_json_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("bad dataset record: ") + e.what());
    }
    DatasetRecord r;
    r.task_type = j.at("task_type").get<std::string>();
    if (j.contains("image_refs")) r.image_refs = j["image_refs"].get<std::vector<std::string>>();
    if (j.contains("texts")) r.texts = j["texts"].get<std::vector<std::string>>();
    r.rows = j.value("rows", size_t(0));
    r.cols = j.value("cols", size_t(0));
    return r;
}

void save_jsonl(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ProtocolError("cannot open for writing: " + path);
    for (auto& r : records) os << to_json_line(r) << '\n';
}

std::vector<DatasetRecord> load_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ProtocolError("cannot open dataset: " + path);
    std::vector<DatasetRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(from_json_line(line));
    }
    return out;
}

} // namespace hlm::protocol
