#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vla/backbone.hpp"
#include "vla/linguistic_cot.hpp"

using namespace vla;

namespace {

struct Fixture {
    Vocabulary vocab = Vocabulary::standard();
    ParamStore store;
    Rng rng{17};
    BackboneParams params{BackboneParams::create(store, "backbone", vocab.size(), rng)};
    QueryTokens queries{QueryTokens::create(store, "queries", kDvlm, rng)};
    std::vector<double> image;
    std::vector<int> instr;

    Fixture() {
        Rng srng(55);
        SceneSample s = sample_scene(srng, TaskTemplate::place_single);
        std::vector<double> depth;
        render(s.scene, image, depth);
        instr = vocab.tokenize(s.task.instruction);
    }
};

}  // namespace

TEST_CASE("assemble_input segment layout") {
    Fixture f;
    Tape t;
    UnifiedSequence seq = assemble_input(t, f.image, f.instr, f.queries, f.params);
    REQUIRE(static_cast<int>(seq.segments.size()) == kSeqLen);
    for (int i = 0; i < kSeqLen; ++i) {
        Segment want = Segment::vision;
        if (i >= kLinQueryStart) want = Segment::lin_query;
        else if (i >= kTextStart) want = Segment::text;
        else if (i >= kVisQueryStart) want = Segment::vis_query;
        CHECK(seq.segments[static_cast<std::size_t>(i)] == want);
        CHECK(seq.position_ids[static_cast<std::size_t>(i)] == i);
    }
    CHECK(seq.embeddings.shape() == Shape{kSeqLen, kDvlm});
}

TEST_CASE("instruction does not affect image/query embedding rows") {
    Fixture f;
    Tape t;
    std::vector<int> other = f.vocab.tokenize("place the white bowl on the red plate .");
    UnifiedSequence a = assemble_input(t, f.image, f.instr, f.queries, f.params);
    UnifiedSequence b = assemble_input(t, f.image, other, f.queries, f.params);
    for (int i = 0; i < kTextStart; ++i)
        for (int c = 0; c < kDvlm; ++c)
            CHECK(a.embeddings.value()[static_cast<std::size_t>(i) * kDvlm + c] ==
                  b.embeddings.value()[static_cast<std::size_t>(i) * kDvlm + c]);
}

TEST_CASE("overlong instruction is rejected") {
    Fixture f;
    Tape t;
    std::vector<int> too_long(kInstrLen + 1, 5);
    CHECK_THROWS_AS(assemble_input(t, f.image, too_long, f.queries, f.params), ContractError);
}

TEST_CASE("pad-only instruction: pads attendable only from themselves") {
    Fixture f;
    Tape t;
    UnifiedSequence seq = assemble_input(t, f.image, {}, f.queries, f.params);
    for (int j = kTextStart; j < kLinQueryStart; ++j) {
        CHECK(seq.is_pad[static_cast<std::size_t>(j)] == 1);
        for (int i = 0; i < kSeqLen; ++i) {
            bool attendable = seq.mask[static_cast<std::size_t>(i) * kSeqLen + j] != 0;
            CHECK(attendable == (i == j));
        }
    }
    // Non-pad keys stay causally attendable.
    CHECK(seq.mask[static_cast<std::size_t>(kLinQueryStart) * kSeqLen + 0] == 1);
}

TEST_CASE("forward counter counts calls and resets atomically") {
    Fixture f;
    count_forwards_reset();
    Tape t(false);
    UnifiedSequence seq = assemble_input(t, f.image, f.instr, f.queries, f.params);
    for (int i = 0; i < 3; ++i) backbone_forward(t, seq, f.params);
    CHECK(count_forwards_reset() == 3);
    CHECK(count_forwards_reset() == 0);
}

TEST_CASE("slice identity: h_vis and h_lin are exact slices of h_vlm") {
    Fixture f;
    Tape t(false);
    UnifiedSequence seq = assemble_input(t, f.image, f.instr, f.queries, f.params);
    BackboneOutput out = backbone_forward(t, seq, f.params);
    CHECK(out.h_vlm.shape() == Shape{kSeqLen, kDvlm});
    CHECK(out.h_vis.shape() == Shape{kVisQueries, kDvlm});
    CHECK(out.h_lin.shape() == Shape{kLinQueries, kDvlm});
    for (int i = 0; i < kVisQueries * kDvlm; ++i)
        CHECK(out.h_vis.value()[static_cast<std::size_t>(i)] ==
              out.h_vlm.value()[static_cast<std::size_t>(kVisQueryStart) * kDvlm + i]);
    for (int i = 0; i < kLinQueries * kDvlm; ++i)
        CHECK(out.h_lin.value()[static_cast<std::size_t>(i)] ==
              out.h_vlm.value()[static_cast<std::size_t>(kLinQueryStart) * kDvlm + i]);
}

TEST_CASE("causal shadowing: h_vis is bitwise invariant to instruction content") {
    Fixture f;
    auto run = [&](const std::vector<int>& instr) {
        Tape t(false);
        UnifiedSequence seq = assemble_input(t, f.image, instr, f.queries, f.params);
        return backbone_forward(t, seq, f.params).h_vis.value();
    };
    auto a = run(f.instr);
    auto b = run(f.vocab.tokenize("place the cyan fruit on the green bowl ."));
    CHECK(a == b);  // bitwise
}

TEST_CASE("perturbing any input position changes h_lin") {
    Fixture f;
    auto run = [&](const std::vector<double>& image, const std::vector<int>& instr) {
        Tape t(false);
        UnifiedSequence seq = assemble_input(t, image, instr, f.queries, f.params);
        return backbone_forward(t, seq, f.params).h_lin.value();
    };
    auto base = run(f.image, f.instr);

    std::vector<double> img2 = f.image;
    img2[0] = std::min(1.0, img2[0] + 0.5);  // perturb the image
    auto v_img = run(img2, f.instr);
    double d_img = 0;
    for (std::size_t i = 0; i < base.size(); ++i)
        d_img += (base[i] - v_img[i]) * (base[i] - v_img[i]);
    CHECK(d_img > 0.0);

    std::vector<int> instr2 = f.instr;
    instr2[1] = f.vocab.id("white");  // perturb the instruction
    auto v_ins = run(f.image, instr2);
    double d_ins = 0;
    for (std::size_t i = 0; i < base.size(); ++i)
        d_ins += (base[i] - v_ins[i]) * (base[i] - v_ins[i]);
    CHECK(d_ins > 0.0);
}

TEST_CASE("batched forward equals per-element forward") {
    Fixture f;
    Rng srng(77);
    SceneSample s2 = sample_scene(srng, TaskTemplate::place_two);
    std::vector<double> img2, depth2;
    render(s2.scene, img2, depth2);
    std::vector<int> instr2 = f.vocab.tokenize(s2.task.instruction);

    Tape t(false);
    UnifiedSequence a = assemble_input(t, f.image, f.instr, f.queries, f.params);
    UnifiedSequence b = assemble_input(t, img2, instr2, f.queries, f.params);
    std::vector<BackboneOutput> batched = backbone_forward_batched(t, {a, b}, f.params);
    BackboneOutput ea = backbone_forward(t, a, f.params);
    BackboneOutput eb = backbone_forward(t, b, f.params);
    for (std::size_t i = 0; i < ea.h_vlm.value().size(); ++i) {
        CHECK(batched[0].h_vlm.value()[i] == doctest::Approx(ea.h_vlm.value()[i]).epsilon(1e-13));
        CHECK(batched[1].h_vlm.value()[i] == doctest::Approx(eb.h_vlm.value()[i]).epsilon(1e-13));
    }
}
