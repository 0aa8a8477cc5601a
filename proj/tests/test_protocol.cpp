#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "hybridlm/protocol.hpp"
#include "hybridlm/rng.hpp"

using namespace hlm::protocol;

#ifndef HLM_SOURCE_DIR
#define HLM_SOURCE_DIR "."
#endif

static std::vector<int> read_fixture(const std::string& name) {
    std::ifstream is(std::string(HLM_SOURCE_DIR) + "/tests/fixtures/" + name);
    REQUIRE(bool(is));
    std::vector<int> ids;
    int v;
    while (is >> v) ids.push_back(v);
    return ids;
}

TEST_CASE("vocabulary: size, unique ids, byte fallback round-trip") {
    auto v = Vocabulary::build(512);
    CHECK(v.size == 512);
    CHECK(v.id_to_str.size() == 512);
    for (size_t i = 0; i < v.id_to_str.size(); ++i)
        for (size_t j = i + 1; j < v.id_to_str.size(); ++j)
            if (v.id_to_str[i] == v.id_to_str[j]) FAIL("duplicate token string at ", i, ",", j);

    auto ids = v.tokenize("what is this?");
    CHECK(ids.size() == 3);  // all in word table
    CHECK(v.detokenize(ids) == "what is this?");

    auto odd = v.tokenize("zxqv");  // not in table -> bytes
    CHECK(odd.size() == 4);
    for (int id : odd) CHECK((id >= 8 && id < 8 + 256));
    CHECK(v.detokenize(odd) == "zxqv");

    auto nl = v.tokenize("a\nb");
    REQUIRE(nl.size() == 3);
    CHECK(nl[1] == v.newline);

    CHECK_THROWS_AS(Vocabulary::build(100), ProtocolError);
}

TEST_CASE("single-image template: layout, lengths, golden fixture") {
    auto v = Vocabulary::build(512);
    auto seq = assemble_single(v, "what is this?");
    auto r = seq.render(v);
    size_t text_len = v.tokenize("what is this?").size();
    CHECK(r.size() == 144 + 2 + 1 + text_len);
    CHECK(r.size() == seq.rendered_length());
    CHECK(r[0] == v.img_open);
    CHECK(r[145] == v.img_close);
    CHECK(r[146] == v.newline);
    CHECK(r == read_fixture("single_image.txt"));

    auto empty = assemble_single(v, "");
    CHECK(empty.rendered_length() == 147);
}

TEST_CASE("multi-image template: interleave, degenerate, golden fixture") {
    auto v = Vocabulary::build(512);
    auto seq = assemble_multi(v, 2, {"this is a cat.", "this is a:", ""});
    auto r = seq.render(v);
    CHECK(r == read_fixture("multi_image.txt"));
    CHECK(seq.n_images() == 2);

    auto one = assemble_multi(v, 1, {"", "what is this?"});
    CHECK(one.render(v) == assemble_single(v, "what is this?").render(v));

    auto bare = assemble_multi(v, 3, {"", "", "", ""});
    CHECK(bare.rendered_length() == 3 * 147);

    CHECK_THROWS_AS(assemble_multi(v, 2, {"a", "b"}), ProtocolError);
}

TEST_CASE("video template: <t> count, lengths, golden fixture") {
    auto v = Vocabulary::build(512);
    for (size_t n : {size_t(1), size_t(3), size_t(8)}) {
        auto seq = assemble_video(v, n, "what color is the needle");
        auto r = seq.render(v);
        size_t t_count = 0;
        for (int id : r) t_count += id == v.t_sep;
        CHECK(t_count == n - 1);
        size_t text_len = v.tokenize("what color is the needle").size();
        CHECK(r.size() == 2 + n * 146 + (n - 1) + 1 + text_len);
        CHECK(r.front() == v.vid_open);
    }
    CHECK(assemble_video(v, 3, "what color is the needle").render(v) ==
          read_fixture("video.txt"));
    CHECK_THROWS_AS(assemble_video(v, 0, "x"), ProtocolError);
}

TEST_CASE("patched template: row newlines, lengths, golden fixture") {
    auto v = Vocabulary::build(512);
    auto seq = assemble_patched(v, 6, 2, 3, "what is this?");
    auto r = seq.render(v);
    size_t nl_count = 0;
    for (int id : r) nl_count += id == v.newline;
    CHECK(nl_count == 1 + 2);  // after main + after each of 2 rows
    size_t text_len = v.tokenize("what is this?").size();
    CHECK(r.size() == 146 + 1 + 2 * (3 * 146 + 1) + text_len);
    CHECK(r == read_fixture("patched_image.txt"));

    auto one = assemble_patched(v, 1, 1, 1, "x");
    CHECK(one.n_images() == 2);  // main + single tile

    CHECK_THROWS_AS(assemble_patched(v, 5, 2, 3, "x"), ProtocolError);
}

TEST_CASE("bracket integrity and parser round-trip") {
    auto v = Vocabulary::build(512);
    std::vector<MultimodalSequence> cases = {
        assemble_single(v, "what is this?"),
        assemble_multi(v, 2, {"this is a cat.", "this is a:", ""}),
        assemble_video(v, 4, "answer: red"),
        assemble_patched(v, 4, 2, 2, "which color"),
    };
    for (auto& seq : cases) {
        auto r = seq.render(v);
        CHECK_NOTHROW(check_brackets(r, v));
        auto back = parse_stream(r, v);
        CHECK(back == seq);
        CHECK(back.render(v) == r);
    }

    CHECK_THROWS_AS(check_brackets({v.img_open}, v), ProtocolError);
    CHECK_THROWS_AS(check_brackets({v.img_close}, v), ProtocolError);
    CHECK_THROWS_AS(check_brackets({v.img_open, v.img_open}, v), ProtocolError);
    CHECK_THROWS_AS(check_brackets({v.img_token}, v), ProtocolError);
    CHECK_THROWS_AS(check_brackets({v.img_open, v.newline, v.img_close}, v), ProtocolError);
    CHECK_THROWS_AS(check_brackets({v.vid_open, v.vid_open, v.vid_close}, v), ProtocolError);
    CHECK_THROWS_AS(check_brackets({v.vid_close}, v), ProtocolError);
    CHECK_NOTHROW(check_brackets(
        {v.vid_open, v.img_open, v.img_token, v.img_close, v.vid_close}, v));
}

TEST_CASE("packing: boundary cases and conservation") {
    auto v = Vocabulary::build(512);

    auto plan = pack_plan({10, 10}, 25);
    REQUIRE(plan.batches.size() == 1);
    CHECK(plan.batch_lengths[0] == 21);

    auto full = pack_plan({25}, 25);
    REQUIRE(full.batches.size() == 1);
    CHECK(full.batch_lengths[0] == 25);  // no trailing separator

    CHECK_THROWS_AS(pack_plan({26}, 25), ProtocolError);

    // materialized packing matches the plan, <eos> only between sequences
    std::vector<std::vector<int>> streams = {{300, 301}, {302}, {303, 304, 305}};
    auto batches = pack(streams, 5, v);
    REQUIRE(batches.size() == 2);
    CHECK(batches[0].tokens == std::vector<int>{300, 301, v.eos, 302});
    CHECK(batches[1].tokens == std::vector<int>{303, 304, 305});
    CHECK(batches[0].tokens.back() != v.eos);

    // random corpus conservation: sum of batch lengths = sum lengths + separators
    hlm::Rng rng(42);
    std::vector<size_t> lens;
    size_t total = 0;
    for (int i = 0; i < 200; ++i) {
        lens.push_back(1 + rng.below(400));
        total += lens.back();
    }
    auto p = pack_plan(lens, 1000);
    size_t packed = 0, seps = 0, placed = 0;
    for (size_t b = 0; b < p.batches.size(); ++b) {
        packed += p.batch_lengths[b];
        seps += p.batches[b].size() - 1;
        placed += p.batches[b].size();
        CHECK(p.batch_lengths[b] <= 1000);
    }
    CHECK(placed == lens.size());
    CHECK(packed == total + seps);
}

TEST_CASE("packing never splits an image slot") {
    auto v = Vocabulary::build(512);
    std::vector<std::vector<int>> streams;
    for (int i = 0; i < 7; ++i)
        streams.push_back(assemble_single(v, "what is this?").render(v));
    auto batches = pack(streams, 400, v);
    for (auto& b : batches) CHECK_NOTHROW(check_brackets(b.tokens, v));
}

TEST_CASE("full-scale pack length arithmetic without allocation") {
    // synthetic length distribution packed to the full-scale constant
    hlm::Rng rng(7);
    std::vector<size_t> lens;
    size_t total = 0;
    for (int i = 0; i < 5000; ++i) {
        lens.push_back(100 + rng.below(8000));
        total += lens.back();
    }
    auto p = pack_plan(lens, kPackLenFull);
    CHECK(kPackLenFull == 176000u);
    size_t packed = 0, seps = 0;
    for (size_t b = 0; b < p.batches.size(); ++b) {
        CHECK(p.batch_lengths[b] <= kPackLenFull);
        packed += p.batch_lengths[b];
        seps += p.batches[b].size() - 1;
    }
    CHECK(packed == total + seps);
    // lower bound on batch count from pure arithmetic
    CHECK(p.batches.size() >= (total + kPackLenFull - 1) / kPackLenFull);
}

TEST_CASE("dataset records: json line round-trip") {
    DatasetRecord r;
    r.task_type = "patched";
    r.image_refs = {"imgs/a.bin", "imgs/b.bin"};
    r.texts = {"what is this?"};
    r.rows = 2;
    r.cols = 3;
    auto line = to_json_line(r);
    CHECK(from_json_line(line) == r);

    std::string path = "/tmp/hlm_test_records.jsonl";
    DatasetRecord t;
    t.task_type = "text";
    t.texts = {"this is a cat."};
    save_jsonl(path, {r, t});
    auto back = load_jsonl(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0] == r);
    CHECK(back[1] == t);
    std::remove(path.c_str());

    CHECK_THROWS_AS(from_json_line("{not json"), ProtocolError);
    CHECK_THROWS_AS(load_jsonl("/tmp/definitely_missing.jsonl"), ProtocolError);
}
