#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "vla/world.hpp"

using namespace vla;

namespace {

// Brute-force per-pixel max over objects, independent of render()'s loop.
double depth_oracle(const Scene& scene, int x, int y) {
    double px = (x + 0.5) / kImageHW, py = (y + 0.5) / kImageHW;
    double best = 0.0;
    for (const SceneObject& o : scene.objects) {
        double h = 0.0;
        double dx = px - o.cx, dy = py - o.cy;
        switch (o.kind) {
            case ObjectKind::block:
            case ObjectKind::bread:
                if (std::abs(dx) <= o.radius && std::abs(dy) <= o.radius) h = o.height;
                break;
            case ObjectKind::plate:
            case ObjectKind::fruit:
                if (dx * dx + dy * dy <= o.radius * o.radius) h = o.height;
                break;
            case ObjectKind::bowl: {
                double rr = dx * dx + dy * dy;
                if (rr <= o.radius * o.radius)
                    h = rr > 0.36 * o.radius * o.radius ? o.height : 0.55 * o.height;
                break;
            }
        }
        best = std::max(best, h);
    }
    return best;
}

int count_marker(const std::string& s, const std::string& marker) {
    int n = 0;
    std::size_t pos = 0;
    while ((pos = s.find(marker, pos)) != std::string::npos) {
        ++n;
        pos += marker.size();
    }
    return n;
}

}  // namespace

TEST_CASE("sample_scene determinism and template contract") {
    Rng a(0), b(0);
    SceneSample s1 = sample_scene(a, TaskTemplate::place_single);
    SceneSample s2 = sample_scene(b, TaskTemplate::place_single);
    CHECK(s1.task.instruction == s2.task.instruction);
    REQUIRE(s1.scene.objects.size() == s2.scene.objects.size());
    for (std::size_t i = 0; i < s1.scene.objects.size(); ++i) {
        CHECK(s1.scene.objects[i].cx == s2.scene.objects[i].cx);
        CHECK(s1.scene.objects[i].cy == s2.scene.objects[i].cy);
        CHECK(s1.scene.objects[i].radius == s2.scene.objects[i].radius);
    }

    Rng c(7);
    SceneSample s3 = sample_scene(c, TaskTemplate::place_three);
    CHECK(s3.task.sources.size() == 3);
    CHECK(s3.scene.objects.size() == 4);
    ObjectKind tk = s3.scene.objects[static_cast<std::size_t>(s3.task.target)].kind;
    CHECK((tk == ObjectKind::plate || tk == ObjectKind::bowl));
}

TEST_CASE("1000 sampled scenes have no overlapping pair") {
    int checked = 0;
    for (int i = 0; i < 1000; ++i) {
        Rng rng(static_cast<std::uint64_t>(i));
        SceneSample s = sample_scene(rng, static_cast<TaskTemplate>(i % 3));
        for (std::size_t a = 0; a < s.scene.objects.size(); ++a)
            for (std::size_t b = a + 1; b < s.scene.objects.size(); ++b) {
                const auto& oa = s.scene.objects[a];
                const auto& ob = s.scene.objects[b];
                double d = std::hypot(oa.cx - ob.cx, oa.cy - ob.cy);
                CHECK(d > oa.radius + ob.radius);
                ++checked;
            }
    }
    CHECK(checked > 0);
}

TEST_CASE("render basics") {
    SUBCASE("empty scene is table gray with zero depth") {
        Scene s;
        s.gripper = {2.0, 2.0, 0.8, true};  // off-canvas cross clamps to the border
        std::vector<double> rgb, depth;
        render(s, rgb, depth);
        // Interior pixels away from the clamped cross are untouched.
        CHECK(rgb[(16 * 32 + 16) * 3] == 0.5);
        CHECK(depth[16 * 32 + 16] == 0.0);
        int nonzero = 0;
        for (double d : depth) nonzero += d != 0.0;
        CHECK(nonzero <= 9);  // only the clamped gripper cross
    }
    SUBCASE("block height becomes its pixel depth") {
        Scene s;
        s.gripper = {0.05, 0.05, 0.8, true};
        SceneObject o;
        o.kind = ObjectKind::block;
        o.cx = o.cy = 16.5 / 32.0;
        o.radius = 0.06;
        o.height = 0.5;
        o.color = ColorName::red;
        s.objects.push_back(o);
        std::vector<double> rgb, depth;
        render(s, rgb, depth);
        CHECK(depth[16 * 32 + 16] == 0.5);
        CHECK(rgb[(16 * 32 + 16) * 3] == doctest::Approx(0.85));
    }
    SUBCASE("overlapping objects take the per-pixel max height") {
        Rng rng(3);
        Scene s;
        s.gripper = {0.9, 0.9, 0.8, true};
        for (int i = 0; i < 2; ++i) {
            SceneObject o;
            o.kind = i == 0 ? ObjectKind::plate : ObjectKind::block;
            o.cx = 0.5 + 0.02 * i;
            o.cy = 0.5;
            o.radius = 0.1;
            o.height = i == 0 ? 0.2 : 0.7;
            o.color = i == 0 ? ColorName::blue : ColorName::red;
            s.objects.push_back(o);
        }
        std::vector<double> rgb, depth;
        render(s, rgb, depth);
        for (int y = 12; y < 20; ++y)
            for (int x = 12; x < 20; ++x)
                CHECK(depth[static_cast<std::size_t>(y) * 32 + x] == doctest::Approx(depth_oracle(s, x, y)));
    }
}

TEST_CASE("teacher features") {
    SUBCASE("all-zero depth") {
        std::vector<double> depth(32 * 32, 0.0);
        std::vector<double> f = teacher_features(depth);
        for (int p = 0; p < 64; ++p) {
            const double* fp = f.data() + p * 16;
            for (int i = 0; i < 7; ++i) CHECK(fp[i] == 0.0);
            CHECK(fp[7] == doctest::Approx(1.0));  // first histogram bin
            for (int i = 8; i < 15; ++i) CHECK(fp[i] == doctest::Approx(0.0));
            CHECK(fp[15] == 1.0);
        }
    }
    SUBCASE("constant depth 0.5") {
        std::vector<double> depth(32 * 32, 0.5);
        std::vector<double> f = teacher_features(depth);
        for (int p = 0; p < 64; ++p) {
            const double* fp = f.data() + p * 16;
            CHECK(fp[0] == doctest::Approx(0.5));
            CHECK(fp[1] == doctest::Approx(0.5));
            CHECK(fp[2] == doctest::Approx(0.5));
            CHECK(fp[3] == doctest::Approx(0.0));
            CHECK(fp[4] == doctest::Approx(1.0));
            CHECK(fp[5] == doctest::Approx(0.0));
            CHECK(fp[6] == doctest::Approx(0.0));
        }
    }
    SUBCASE("random patch matches per-statistic recomputation") {
        Rng rng(11);
        std::vector<double> depth(32 * 32);
        for (double& d : depth) d = rng.uniform();
        std::vector<double> f = teacher_features(depth);
        // Patch (2,3): recompute each statistic independently.
        int pr = 2, pc = 3;
        std::vector<double> px;
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) px.push_back(depth[(pr * 4 + y) * 32 + pc * 4 + x]);
        double mean = 0, mn = 1, mx = 0, occ = 0;
        for (double v : px) {
            mean += v / 16.0;
            mn = std::min(mn, v);
            mx = std::max(mx, v);
            occ += (v > 0.05) / 16.0;
        }
        double var = 0;
        for (double v : px) var += (v - mean) * (v - mean) / 16.0;
        double hg = 0, vg = 0;
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 3; ++x)
                hg += (px[static_cast<std::size_t>(y * 4 + x + 1)] - px[static_cast<std::size_t>(y * 4 + x)]) / 12.0;
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 4; ++x)
                vg += (px[static_cast<std::size_t>((y + 1) * 4 + x)] - px[static_cast<std::size_t>(y * 4 + x)]) / 12.0;
        const double* fp = f.data() + (pr * 8 + pc) * 16;
        CHECK(fp[0] == doctest::Approx(mean).epsilon(1e-12));
        CHECK(fp[1] == doctest::Approx(mn).epsilon(1e-12));
        CHECK(fp[2] == doctest::Approx(mx).epsilon(1e-12));
        CHECK(fp[3] == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
        CHECK(fp[4] == doctest::Approx(occ).epsilon(1e-12));
        CHECK(fp[5] == doctest::Approx(hg).epsilon(1e-12));
        CHECK(fp[6] == doctest::Approx(vg).epsilon(1e-12));
        double hist_sum = 0;
        for (int b = 7; b < 15; ++b) hist_sum += fp[b];
        CHECK(hist_sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("mean/min/max are 1-Lipschitz under bounded perturbation") {
        Rng rng(13);
        std::vector<double> depth(32 * 32);
        for (double& d : depth) d = rng.uniform(0.2, 0.8);
        double eps = 0.01;
        std::vector<double> depth2 = depth;
        for (double& d : depth2) d += rng.uniform(-eps, eps);
        std::vector<double> a = teacher_features(depth), b = teacher_features(depth2);
        for (int p = 0; p < 64; ++p)
            for (int i = 0; i < 3; ++i)
                CHECK(std::abs(a[static_cast<std::size_t>(p) * 16 + i] - b[static_cast<std::size_t>(p) * 16 + i]) <=
                      eps + 1e-12);
    }
}

TEST_CASE("expert phase rules") {
    Rng rng(21);
    SceneSample s = sample_scene(rng, TaskTemplate::place_single);
    SUBCASE("already above source -> next phase is descend") {
        Scene sc = s.scene;
        const SceneObject& src = sc.objects[static_cast<std::size_t>(s.task.sources[0])];
        sc.gripper.x = src.cx + 0.005;
        sc.gripper.y = src.cy;
        ExpertState st;
        Action a = expert_action(sc, s.task, st);
        CHECK(st.phase == Phase::descend_grasp);
        CHECK(a.grip == 1.0);
    }
    SUBCASE("move phase clamps the proportional step") {
        Scene sc = s.scene;
        SceneObject& src = sc.objects[static_cast<std::size_t>(s.task.sources[0])];
        sc.gripper.x = src.cx - 0.3;
        sc.gripper.y = src.cy;
        ExpertState st;
        Action a = expert_action(sc, s.task, st);
        CHECK(a.dx == doctest::Approx(0.1));  // clamp(0.5*0.3)
        CHECK(a.dy == doctest::Approx(0.0));
    }
}

TEST_CASE("expert succeeds on every template within the step budget") {
    std::array<double, 3> mean_len{};
    for (int t = 0; t < 3; ++t) {
        long total = 0;
        for (int i = 0; i < 100; ++i) {
            Rng rng(static_cast<std::uint64_t>(1000 * t + i));
            SceneSample s = sample_scene(rng, static_cast<TaskTemplate>(t));
            Rollout r = expert_rollout(s.scene, s.task);
            CHECK(r.success);
            if (t == 0) CHECK(r.total_steps <= 120);
            total += r.total_steps;
        }
        mean_len[static_cast<std::size_t>(t)] = total / 100.0;
    }
    // Horizon classes are ordered: short < medium < long.
    CHECK(mean_len[0] < mean_len[1]);
    CHECK(mean_len[1] < mean_len[2]);
}

TEST_CASE("env_step rules") {
    Rng rng(31);
    SceneSample s = sample_scene(rng, TaskTemplate::place_single);
    SUBCASE("open gripper far from objects only moves") {
        Env env(s.scene, s.task);
        Scene before = env.scene();
        env.step({0.05, -0.03, 0.0});
        CHECK(env.scene().gripper.x == doctest::Approx(before.gripper.x + 0.05));
        CHECK(env.scene().gripper.y == doctest::Approx(before.gripper.y - 0.03));
        for (std::size_t i = 0; i < before.objects.size(); ++i) {
            CHECK(env.scene().objects[i].cx == before.objects[i].cx);
            CHECK(env.scene().objects[i].held == false);
        }
    }
    SUBCASE("closing at the source center grasps it") {
        Scene sc = s.scene;
        const SceneObject& src = sc.objects[static_cast<std::size_t>(s.task.sources[0])];
        sc.gripper.x = src.cx;
        sc.gripper.y = src.cy;
        Env env(sc, s.task);
        env.step({0.0, 0.0, 1.0});
        CHECK(env.scene().objects[static_cast<std::size_t>(s.task.sources[0])].held);
    }
    SUBCASE("oversized action components are clamped") {
        Env env(s.scene, s.task);
        double x0 = env.scene().gripper.x;
        env.step({5.0, 0.0, 0.0});
        CHECK(env.scene().gripper.x == doctest::Approx(std::min(1.0, x0 + 0.1)));
    }
    SUBCASE("scripted expert through env_step succeeds on all templates") {
        for (int t = 0; t < 3; ++t) {
            int ok = 0;
            for (int i = 0; i < 100; ++i) {
                Rng r2(static_cast<std::uint64_t>(7000 + 100 * t + i));
                SceneSample sx = sample_scene(r2, static_cast<TaskTemplate>(t));
                Env env(sx.scene, sx.task);
                ExpertState st;
                while (!env.done()) env.step(expert_action(env.scene(), env.task(), st));
                ok += env.success();
            }
            CHECK(ok == 100);
        }
    }
}

TEST_CASE("cot text structure") {
    SUBCASE("first chunk of place_single starts with task started") {
        Rng rng(41);
        SceneSample s = sample_scene(rng, TaskTemplate::place_single);
        ExpertState st;
        std::string cot = generate_cot_text(s.scene, s.task, st, 0);
        CHECK(cot.rfind("STATE: task started , gripper open , done 0 of 1 .", 0) == 0);
        CHECK(count_marker(cot, "STATE:") == 1);
        CHECK(count_marker(cot, "LOCATION:") == 1);
        CHECK(count_marker(cot, "PLAN:") == 1);
        CHECK(cot.find("STATE:") < cot.find("LOCATION:"));
        CHECK(cot.find("LOCATION:") < cot.find("PLAN:"));
    }
    SUBCASE("completed task plans stop") {
        Rng rng(43);
        SceneSample s = sample_scene(rng, TaskTemplate::place_single);
        ExpertState st;
        st.phase = Phase::complete;
        std::string cot = generate_cot_text(s.scene, s.task, st, 50);
        CHECK(cot.find("PLAN: stop .") != std::string::npos);
    }
    SUBCASE("markers appear exactly once and in order over full rollouts") {
        for (int i = 0; i < 30; ++i) {
            Rng rng(static_cast<std::uint64_t>(500 + i));
            SceneSample s = sample_scene(rng, static_cast<TaskTemplate>(i % 3));
            Rollout r = expert_rollout(s.scene, s.task);
            for (const RolloutFrame& f : r.frames) {
                CHECK(count_marker(f.cot, "STATE:") == 1);
                CHECK(count_marker(f.cot, "LOCATION:") == 1);
                CHECK(count_marker(f.cot, "PLAN:") == 1);
                CHECK(f.cot.find("STATE:") < f.cot.find("LOCATION:"));
                CHECK(f.cot.find("LOCATION:") < f.cot.find("PLAN:"));
            }
        }
    }
}

TEST_CASE("determinism of full rollouts") {
    Rng a(77), b(77);
    SceneSample s1 = sample_scene(a, TaskTemplate::place_two);
    SceneSample s2 = sample_scene(b, TaskTemplate::place_two);
    Rollout r1 = expert_rollout(s1.scene, s1.task);
    Rollout r2 = expert_rollout(s2.scene, s2.task);
    REQUIRE(r1.frames.size() == r2.frames.size());
    for (std::size_t i = 0; i < r1.frames.size(); ++i) {
        CHECK(r1.frames[i].cot == r2.frames[i].cot);
        CHECK(r1.frames[i].rgb == r2.frames[i].rgb);
        CHECK(r1.frames[i].depth == r2.frames[i].depth);
    }
}
