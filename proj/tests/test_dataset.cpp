#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vla/dataset.hpp"

using namespace vla;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("dataset round trip is bitwise") {
    Dataset ds = generate_dataset(0, 10);
    CHECK(ds.episodes.size() == 10);
    CHECK(ds.manifest.episodes == 10);
    std::string path = tmp_path("ds_roundtrip.bin");
    write_dataset(ds, path);
    Dataset back = read_dataset(path);
    REQUIRE(back.episodes.size() == ds.episodes.size());
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        CHECK(back.episodes[i].image == ds.episodes[i].image);
        CHECK(back.episodes[i].depth == ds.episodes[i].depth);
        CHECK(back.episodes[i].state == ds.episodes[i].state);
        CHECK(back.episodes[i].actions == ds.episodes[i].actions);
        CHECK(back.episodes[i].instruction == ds.episodes[i].instruction);
        CHECK(back.episodes[i].cot == ds.episodes[i].cot);
        CHECK(back.episodes[i].template_id == ds.episodes[i].template_id);
    }
    CHECK(back.manifest.teacher_mu == ds.manifest.teacher_mu);
    CHECK(back.manifest.teacher_sigma == ds.manifest.teacher_sigma);

    // write(read(x)) reproduces the file byte for byte.
    std::string path2 = tmp_path("ds_roundtrip2.bin");
    write_dataset(back, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("manifest counts equal header counts equal list length") {
    Dataset ds = generate_dataset(3, 25);
    CHECK(ds.manifest.episodes == 25);
    CHECK(static_cast<int>(ds.episodes.size()) == 25);
    int total = ds.manifest.template_counts[0] + ds.manifest.template_counts[1] +
                ds.manifest.template_counts[2];
    CHECK(total == 25);
}

TEST_CASE("truncated file raises a format error naming the offset") {
    Dataset ds = generate_dataset(1, 4);
    std::string path = tmp_path("ds_trunc.bin");
    write_dataset(ds, path);
    auto bytes = slurp(path);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    os.close();
    try {
        read_dataset(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
}

TEST_CASE("bad magic raises a format error") {
    std::string path = tmp_path("ds_badmagic.bin");
    std::ofstream os(path, std::ios::binary);
    os << "NOPEnotavalidfileatall_____________";
    os.close();
    CHECK_THROWS_AS(read_dataset(path), FormatError);
}

TEST_CASE("determinism: same seed gives identical files") {
    std::string a = tmp_path("ds_det_a.bin"), b = tmp_path("ds_det_b.bin");
    write_dataset(generate_dataset(42, 12), a);
    write_dataset(generate_dataset(42, 12), b);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(a + ".json") == slurp(b + ".json"));
}

TEST_CASE("episode invariants") {
    Dataset ds = generate_dataset(5, 30);
    Vocabulary vocab = Vocabulary::from_json(ds.manifest.vocab);
    for (const Episode& ep : ds.episodes) {
        for (float d : ep.depth) {
            CHECK(d >= 0.0f);
            CHECK(d <= 1.0f);
        }
        for (int a = 0; a < kChunkLen; ++a) {
            CHECK(std::abs(ep.actions[static_cast<std::size_t>(a) * 3]) <= 0.1f);
            CHECK(std::abs(ep.actions[static_cast<std::size_t>(a) * 3 + 1]) <= 0.1f);
        }
        std::vector<int> ids(ep.cot.begin(), ep.cot.end());
        std::string text = vocab.detokenize(ids);
        CHECK(text.find("STATE:") != std::string::npos);
        CHECK(text.find("LOCATION:") != std::string::npos);
        CHECK(text.find("PLAN:") != std::string::npos);
        CHECK(static_cast<int>(ep.cot.size()) <= kCotMaxLen);
    }
}

TEST_CASE("pgm round trip") {
    std::vector<double> img(32 * 32);
    for (int i = 0; i < 32 * 32; ++i) img[static_cast<std::size_t>(i)] = (i % 256) / 255.0;
    std::string path = tmp_path("depth.pgm");
    write_pgm(path, img, 32, 32);
    int w = 0, h = 0;
    std::vector<double> back = read_pgm(path, w, h);
    CHECK(w == 32);
    CHECK(h == 32);
    for (int i = 0; i < 32 * 32; ++i)
        CHECK(back[static_cast<std::size_t>(i)] == doctest::Approx(img[static_cast<std::size_t>(i)]).epsilon(1e-9));
}

TEST_CASE("checkpoint container round trip preserves f64 bits") {
    Checkpoint ck;
    ck.meta = {{"step", 7}, {"note", "x"}};
    Rng rng(9);
    std::vector<double> a(31), b(8);
    for (double& v : a) v = rng.normal() * 1e3;
    for (double& v : b) v = rng.normal() * 1e-7;
    ck.tensors.emplace("alpha", std::make_pair(Shape{31}, a));
    ck.tensors.emplace("beta.w", std::make_pair(Shape{2, 4}, b));
    std::string path = tmp_path("ck.bin");
    write_checkpoint(ck, path);
    Checkpoint back = read_checkpoint(path);
    CHECK(back.meta.at("step").get<int>() == 7);
    CHECK(back.tensors.at("alpha").second == a);  // bitwise
    CHECK(back.tensors.at("beta.w").second == b);
    CHECK(back.tensors.at("beta.w").first == Shape{2, 4});

    std::string path2 = tmp_path("ck2.bin");
    write_checkpoint(back, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("vocabulary fits the budget and round-trips all generated text") {
    Vocabulary vocab = Vocabulary::standard();
    CHECK(vocab.size() <= 96 + 3);  // words plus pad/bos/eos specials
    // 10k generations re-tokenize with zero out-of-vocabulary words and
    // detokenize back to the identical string.
    int strings = 0;
    for (int r = 0; strings < 10000; ++r) {
        Rng rng = Rng::stream(123, static_cast<std::uint64_t>(r));
        SceneSample s = sample_scene(rng, static_cast<TaskTemplate>(r % 3));
        Rollout ro = expert_rollout(s.scene, s.task);
        for (const RolloutFrame& f : ro.frames) {
            std::vector<int> ids = vocab.tokenize(f.cot);
            CHECK(static_cast<int>(ids.size()) <= 63);
            CHECK(vocab.detokenize(ids) == f.cot);
            ++strings;
        }
        std::vector<int> instr = vocab.tokenize(s.task.instruction);
        CHECK(static_cast<int>(instr.size()) <= kInstrLen);
    }
}

TEST_CASE("vocabulary errors") {
    Vocabulary vocab = Vocabulary::standard();
    CHECK_THROWS_AS(vocab.tokenize("zebra"), VocabError);
    try {
        vocab.tokenize("red zebra block");
    } catch (const VocabError& e) {
        CHECK(std::string(e.what()).find("zebra") != std::string::npos);
    }
    CHECK(vocab.tokenize("").empty());
    CHECK(vocab.detokenize({}) == "");
}
