#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vla/action_flow.hpp"
#include "vla/gradcheck.hpp"

using namespace vla;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double s = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal() * s;
    return v;
}

struct Fixture {
    ParamStore store;
    Rng rng{41};
    DiTParams dit{DiTParams::create(store, "dit", rng)};
    std::vector<double> h_vlm = random_vec(rng, static_cast<std::size_t>(kSeqLen) * kDvlm, 0.5);
    std::array<double, kStateDim> state{0.4, 0.6, 0.8, 1.0};
};

}  // namespace

TEST_CASE("interpolate endpoints are exact") {
    Rng rng(1);
    std::vector<double> target = random_vec(rng, kChunkValues);
    std::vector<double> noise = random_vec(rng, kChunkValues);
    CHECK(interpolate(target, noise, 0.0) == noise);
    CHECK(interpolate(target, noise, 1.0) == target);
    std::vector<double> ones(kChunkValues, 1.0), zeros(kChunkValues, 0.0);
    std::vector<double> mid = interpolate(ones, zeros, 0.5);
    for (double v : mid) CHECK(v == 0.5);
    CHECK_THROWS_AS(interpolate(target, noise, 1.5), ContractError);
    CHECK_THROWS_AS(interpolate(target, noise, -0.1), ContractError);
}

TEST_CASE("zero output projection gives a zero field") {
    Fixture f;
    std::fill(f.dit.out_w->value.begin(), f.dit.out_w->value.end(), 0.0);
    std::fill(f.dit.out_b->value.begin(), f.dit.out_b->value.end(), 0.0);
    Tape t;
    Tensor h = t.constant({kSeqLen, kDvlm}, f.h_vlm);
    Tensor v = dit_forward(t, random_vec(f.rng, kChunkValues), 0.3, f.state, h, f.dit);
    CHECK(v.shape() == Shape{kChunkLen, kActionDim});
    for (double x : v.value()) CHECK(x == 0.0);
}

TEST_CASE("dit gradient vs finite differences through h_vlm") {
    Fixture f;
    std::vector<double> a_t = random_vec(f.rng, kChunkValues);
    auto fn = [&](Tape& tape, Tensor h) {
        Tensor v = dit_forward(tape, a_t, 0.37, f.state, h, f.dit);
        return tape.mean_all(tape.mul(v, v));
    };
    // Smaller h_vlm for oracle speed: still the full path (tk = 6 rows).
    ParamStore store2;
    Rng rng2(5);
    (void)store2;
    std::vector<double> h_small = random_vec(rng2, static_cast<std::size_t>(6) * kDvlm, 0.5);
    CHECK(grad_check(fn, {6, kDvlm}, h_small, 1e-5) < 1e-4);
}

TEST_CASE("permuting h_vlm rows changes the field") {
    Fixture f;
    std::vector<double> a_t = random_vec(f.rng, kChunkValues);
    auto run = [&](const std::vector<double>& h) {
        Tape t(false);
        return dit_forward(t, a_t, 0.5, f.state, t.constant({kSeqLen, kDvlm}, h), f.dit).value();
    };
    auto base = run(f.h_vlm);
    std::vector<double> permuted = f.h_vlm;
    for (int c = 0; c < kDvlm; ++c)
        std::swap(permuted[static_cast<std::size_t>(0) * kDvlm + c],
                  permuted[static_cast<std::size_t>(50) * kDvlm + c]);
    auto swapped = run(permuted);
    double d = 0;
    for (std::size_t i = 0; i < base.size(); ++i) d += (base[i] - swapped[i]) * (base[i] - swapped[i]);
    CHECK(d > 0.0);
}

TEST_CASE("action loss closed forms") {
    Fixture f;
    Rng draw_rng(7);
    std::vector<std::vector<double>> chunks;
    std::vector<std::array<double, kStateDim>> states;
    for (int b = 0; b < 3; ++b) {
        std::vector<double> raw(kChunkValues);
        for (int i = 0; i < kChunkValues; ++i)
            raw[static_cast<std::size_t>(i)] =
                (i % 3 == 2) ? draw_rng.uniform(-1, 1) : draw_rng.uniform(-0.1, 0.1);
        chunks.push_back(raw);
        states.push_back(f.state);
    }
    FlowDraws draws = draw_flow(draw_rng, 3);

    SUBCASE("zero field gives mean squared target norm") {
        std::fill(f.dit.out_w->value.begin(), f.dit.out_w->value.end(), 0.0);
        std::fill(f.dit.out_b->value.begin(), f.dit.out_b->value.end(), 0.0);
        Tape t;
        Tensor h = t.constant({3 * kSeqLen, kDvlm},
                              random_vec(f.rng, static_cast<std::size_t>(3) * kSeqLen * kDvlm));
        Tensor loss = action_loss_batched(t, chunks, states, h, kSeqLen, f.dit, draws);
        // Closed-form recomputation on the sampled batch.
        double acc = 0;
        for (int b = 0; b < 3; ++b) {
            std::vector<double> a = normalize_chunk(chunks[static_cast<std::size_t>(b)]);
            for (int i = 0; i < kChunkValues; ++i) {
                double tgt = a[static_cast<std::size_t>(i)] -
                             draws.noise[static_cast<std::size_t>(b) * kChunkValues + i];
                acc += tgt * tgt;
            }
        }
        CHECK(loss.item() == doctest::Approx(acc / (3.0 * kChunkValues)).epsilon(1e-12));
    }
    SUBCASE("loss equals the mse oracle on (v, target)") {
        Tape t;
        Tensor h = t.constant({3 * kSeqLen, kDvlm},
                              random_vec(f.rng, static_cast<std::size_t>(3) * kSeqLen * kDvlm));
        Tensor loss = action_loss_batched(t, chunks, states, h, kSeqLen, f.dit, draws);

        std::vector<double> a_t_all(static_cast<std::size_t>(3) * kChunkValues);
        std::vector<double> target_all(static_cast<std::size_t>(3) * kChunkValues);
        for (int b = 0; b < 3; ++b) {
            std::vector<double> a = normalize_chunk(chunks[static_cast<std::size_t>(b)]);
            for (int i = 0; i < kChunkValues; ++i) {
                std::size_t k = static_cast<std::size_t>(b) * kChunkValues + i;
                a_t_all[k] = draws.t[static_cast<std::size_t>(b)] * a[static_cast<std::size_t>(i)] +
                             (1 - draws.t[static_cast<std::size_t>(b)]) * draws.noise[k];
                target_all[k] = a[static_cast<std::size_t>(i)] - draws.noise[k];
            }
        }
        Tensor v = dit_forward_batched(t, a_t_all, draws.t, states, h, 3, kSeqLen, f.dit);
        Tensor oracle = t.mse_loss(v, t.constant({3 * kChunkLen, kActionDim}, target_all));
        CHECK(loss.item() == doctest::Approx(oracle.item()).epsilon(1e-13));
    }
}

TEST_CASE("euler sampler contracts") {
    Fixture f;
    SUBCASE("zero field returns the initial noise") {
        std::fill(f.dit.out_w->value.begin(), f.dit.out_w->value.end(), 0.0);
        std::fill(f.dit.out_b->value.begin(), f.dit.out_b->value.end(), 0.0);
        Rng r1(99), r2(99);
        std::vector<double> a0(kChunkValues);
        for (double& v : a0) v = r1.normal();
        std::vector<double> out = sample_actions(f.state, f.h_vlm, kSeqLen, f.dit,
                                                 SamplerConfig{10}, r2);
        std::vector<double> expect = denormalize_chunk(a0);
        for (int i = 0; i < kChunkValues; ++i)
            CHECK(out[static_cast<std::size_t>(i)] == expect[static_cast<std::size_t>(i)]);
    }
    SUBCASE("constant field adds exactly c for any step count") {
        // Zero everything feeding the blocks' outputs, then set the output
        // projection bias: v(a,t) = c identically.
        std::fill(f.dit.out_w->value.begin(), f.dit.out_w->value.end(), 0.0);
        for (int i = 0; i < kActionDim; ++i) f.dit.out_b->value[static_cast<std::size_t>(i)] = 0.25 * (i + 1);
        for (int n : {1, 4, 10}) {
            Rng r1(123), r2(123);
            std::vector<double> a0(kChunkValues);
            for (double& v : a0) v = r1.normal();
            std::vector<double> out =
                sample_actions(f.state, f.h_vlm, kSeqLen, f.dit, SamplerConfig{n}, r2);
            for (int i = 0; i < kChunkValues; ++i) {
                double unit = a0[static_cast<std::size_t>(i)] + 0.25 * (i % kActionDim + 1);
                CHECK(out[static_cast<std::size_t>(i)] ==
                      doctest::Approx(unit * kActionScale[static_cast<std::size_t>(i) % kActionDim])
                          .epsilon(1e-12));
            }
        }
    }
    SUBCASE("n_steps must be positive") {
        Rng r(1);
        CHECK_THROWS_AS(sample_actions(f.state, f.h_vlm, kSeqLen, f.dit, SamplerConfig{0}, r),
                        ContractError);
    }
}

TEST_CASE("normalize/denormalize are inverse") {
    Rng rng(17);
    std::vector<double> raw(kChunkValues);
    for (int i = 0; i < kChunkValues; ++i)
        raw[static_cast<std::size_t>(i)] =
            (i % 3 == 2) ? rng.uniform(-1, 1) : rng.uniform(-0.1, 0.1);
    std::vector<double> back = denormalize_chunk(normalize_chunk(raw));
    for (int i = 0; i < kChunkValues; ++i)
        CHECK(back[static_cast<std::size_t>(i)] == doctest::Approx(raw[static_cast<std::size_t>(i)]).epsilon(1e-15));
}
