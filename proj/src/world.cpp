#include "vla/world.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vla/error.hpp"

namespace vla {

namespace {

constexpr double kLattice[] = {0.20, 0.35, 0.50, 0.65, 0.80};
constexpr int kLatticeN = 5;
constexpr double kSourceHeights[] = {0.30, 0.50, 0.70};
constexpr double kTargetHeight = 0.20;
constexpr double kTableGray = 0.5;
constexpr double kOccupancyThreshold = 0.05;

struct Rgb {
    double r, g, b;
};

Rgb color_rgb(ColorName c) {
    switch (c) {
        case ColorName::red: return {0.85, 0.10, 0.10};
        case ColorName::green: return {0.10, 0.75, 0.10};
        case ColorName::blue: return {0.10, 0.20, 0.85};
        case ColorName::yellow: return {0.90, 0.85, 0.10};
        case ColorName::purple: return {0.55, 0.15, 0.80};
        case ColorName::orange: return {0.95, 0.55, 0.10};
        case ColorName::cyan: return {0.10, 0.80, 0.80};
        case ColorName::white: return {0.95, 0.95, 0.95};
    }
    return {0, 0, 0};
}

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// Height of `o` at world point (px,py); 0 when not covered. Blocks and bread
// are squares, plates and fruit are disks, bowls are disks with a raised rim.
double coverage_height(const SceneObject& o, double px, double py) {
    double dx = px - o.cx, dy = py - o.cy;
    switch (o.kind) {
        case ObjectKind::block:
        case ObjectKind::bread:
            if (std::abs(dx) <= o.radius && std::abs(dy) <= o.radius) return o.height;
            return 0.0;
        case ObjectKind::plate:
        case ObjectKind::fruit: {
            if (dx * dx + dy * dy <= o.radius * o.radius) return o.height;
            return 0.0;
        }
        case ObjectKind::bowl: {
            double rr = dx * dx + dy * dy;
            if (rr > o.radius * o.radius) return 0.0;
            double inner = 0.6 * o.radius;
            return rr > inner * inner ? o.height : 0.55 * o.height;
        }
    }
    return 0.0;
}

// Quantized hundredths on the 0.05 lattice.
int quant05(double v) { return static_cast<int>(llround(clampd(v, 0.0, 1.0) * 20.0)) * 5; }

// "0 . 3 5" digit rendering of a quantized coordinate.
void append_coord(std::ostringstream& os, double v) {
    int n = quant05(v);
    os << ' ' << n / 100 << " . " << (n / 10) % 10 << ' ' << n % 10;
}

const char* phase_words(Phase p, int env_steps) {
    switch (p) {
        case Phase::move_above_source: return env_steps == 0 ? "task started" : "moving above source";
        case Phase::descend_grasp: return "descending to grasp";
        case Phase::lift: return "lifting object";
        case Phase::move_above_target: return "moving above target";
        case Phase::descend_place: return "descending to place";
        case Phase::complete: return "task complete";
    }
    return "";
}

int current_source_index(const Task& task, const ExpertState& st) {
    int i = std::min(st.source_idx, static_cast<int>(task.sources.size()) - 1);
    return task.sources[static_cast<std::size_t>(std::max(0, i))];
}

}  // namespace

const char* kind_word(ObjectKind k) {
    switch (k) {
        case ObjectKind::block: return "block";
        case ObjectKind::plate: return "plate";
        case ObjectKind::bowl: return "bowl";
        case ObjectKind::bread: return "bread";
        case ObjectKind::fruit: return "fruit";
    }
    return "";
}

const char* color_word(ColorName c) {
    switch (c) {
        case ColorName::red: return "red";
        case ColorName::green: return "green";
        case ColorName::blue: return "blue";
        case ColorName::yellow: return "yellow";
        case ColorName::purple: return "purple";
        case ColorName::orange: return "orange";
        case ColorName::cyan: return "cyan";
        case ColorName::white: return "white";
    }
    return "";
}

int source_count(TaskTemplate t) {
    switch (t) {
        case TaskTemplate::place_single: return 1;
        case TaskTemplate::place_two: return 2;
        case TaskTemplate::place_three: return 3;
    }
    return 0;
}

const char* template_name(TaskTemplate t) {
    switch (t) {
        case TaskTemplate::place_single: return "place_single";
        case TaskTemplate::place_two: return "place_two";
        case TaskTemplate::place_three: return "place_three";
    }
    return "";
}

SceneSample sample_scene(Rng& rng, TaskTemplate tmpl) {
    int n_src = source_count(tmpl);
    int n_obj = n_src + 1;

    // Distinct colors, distinct lattice cells.
    std::vector<int> colors_left{0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<std::uint8_t> cell_taken(kLatticeN * kLatticeN, 0);

    Scene scene;
    scene.gripper = Gripper{0.5, 0.5, 0.8, true};
    Task task;
    task.tmpl = tmpl;

    int attempts = 0;
    for (int i = 0; i < n_obj; ++i) {
        bool is_target = (i == n_src);
        SceneObject o;
        int cell;
        do {
            if (++attempts > 1000)
                throw GenerationError("scene placement failed after 1000 attempts");
            cell = static_cast<int>(rng.range(kLatticeN * kLatticeN));
        } while (cell_taken[static_cast<std::size_t>(cell)]);
        cell_taken[static_cast<std::size_t>(cell)] = 1;
        o.cx = kLattice[cell % kLatticeN];
        o.cy = kLattice[cell / kLatticeN];
        int ci = static_cast<int>(rng.range(colors_left.size()));
        o.color = static_cast<ColorName>(colors_left[static_cast<std::size_t>(ci)]);
        colors_left.erase(colors_left.begin() + ci);
        if (is_target) {
            o.kind = rng.range(2) == 0 ? ObjectKind::plate : ObjectKind::bowl;
            o.radius = rng.uniform(0.055, 0.070);
            o.height = kTargetHeight;
            task.target = i;
        } else {
            constexpr ObjectKind src_kinds[] = {ObjectKind::block, ObjectKind::bread,
                                                ObjectKind::fruit};
            o.kind = src_kinds[rng.range(3)];
            o.radius = rng.uniform(0.035, 0.055);
            o.height = kSourceHeights[rng.range(3)];
            task.sources.push_back(i);
        }
        scene.objects.push_back(o);
    }

    for (std::size_t a = 0; a < scene.objects.size(); ++a)
        for (std::size_t b = a + 1; b < scene.objects.size(); ++b) {
            const auto& oa = scene.objects[a];
            const auto& ob = scene.objects[b];
            double d = std::hypot(oa.cx - ob.cx, oa.cy - ob.cy);
            if (d <= oa.radius + ob.radius)
                throw GenerationError("overlapping spawn despite lattice placement");
        }

    std::ostringstream os;
    os << "place";
    for (std::size_t s = 0; s < task.sources.size(); ++s) {
        const auto& o = scene.objects[static_cast<std::size_t>(task.sources[s])];
        os << (s == 0 ? " the " : " and the ") << color_word(o.color) << ' ' << kind_word(o.kind);
    }
    const auto& tgt = scene.objects[static_cast<std::size_t>(task.target)];
    os << " on the " << color_word(tgt.color) << ' ' << kind_word(tgt.kind) << " .";
    task.instruction = os.str();
    return SceneSample{std::move(scene), std::move(task)};
}

void render(const Scene& scene, std::vector<double>& rgb, std::vector<double>& depth) {
    rgb.assign(static_cast<std::size_t>(kImageHW) * kImageHW * 3, kTableGray);
    depth.assign(static_cast<std::size_t>(kImageHW) * kImageHW, 0.0);
    for (int y = 0; y < kImageHW; ++y)
        for (int x = 0; x < kImageHW; ++x) {
            double px = (x + 0.5) / kImageHW;
            double py = (y + 0.5) / kImageHW;
            std::size_t pi = static_cast<std::size_t>(y) * kImageHW + x;
            for (const SceneObject& o : scene.objects) {
                double h = coverage_height(o, px, py);
                if (h > depth[pi]) {
                    depth[pi] = h;
                    Rgb c = color_rgb(o.color);
                    rgb[pi * 3] = c.r;
                    rgb[pi * 3 + 1] = c.g;
                    rgb[pi * 3 + 2] = c.b;
                }
            }
        }
    // Gripper: cross with 2-pixel arms, overlaid at its own depth.
    int gx = std::clamp(static_cast<int>(scene.gripper.x * kImageHW), 0, kImageHW - 1);
    int gy = std::clamp(static_cast<int>(scene.gripper.y * kImageHW), 0, kImageHW - 1);
    double shade = scene.gripper.open ? 0.15 : 0.05;
    auto paint = [&](int x, int y) {
        if (x < 0 || x >= kImageHW || y < 0 || y >= kImageHW) return;
        std::size_t pi = static_cast<std::size_t>(y) * kImageHW + x;
        depth[pi] = scene.gripper.z;
        rgb[pi * 3] = shade;
        rgb[pi * 3 + 1] = shade;
        rgb[pi * 3 + 2] = shade;
    };
    for (int k = -2; k <= 2; ++k) paint(gx + k, gy);
    for (int k = -2; k <= 2; ++k) paint(gx, gy + k);
}

std::vector<double> teacher_features(const std::vector<double>& depth) {
    if (depth.size() != static_cast<std::size_t>(kImageHW) * kImageHW)
        throw ShapeError("teacher_features: depth length " + std::to_string(depth.size()));
    std::vector<double> out(static_cast<std::size_t>(kNumPatches) * kTeacherDim, 0.0);
    for (int pr = 0; pr < kPatchesPerSide; ++pr)
        for (int pc = 0; pc < kPatchesPerSide; ++pc) {
            double* f = out.data() +
                        (static_cast<std::size_t>(pr) * kPatchesPerSide + pc) * kTeacherDim;
            double mean = 0.0, mn = 1.0, mx = 0.0, occ = 0.0;
            for (int py = 0; py < kPatch; ++py)
                for (int px = 0; px < kPatch; ++px) {
                    double d = depth[(static_cast<std::size_t>(pr * kPatch + py)) * kImageHW +
                                     pc * kPatch + px];
                    mean += d;
                    mn = std::min(mn, d);
                    mx = std::max(mx, d);
                    if (d > kOccupancyThreshold) occ += 1.0;
                }
            int n = kPatch * kPatch;
            mean /= n;
            occ /= n;
            double var = 0.0;
            for (int py = 0; py < kPatch; ++py)
                for (int px = 0; px < kPatch; ++px) {
                    double d = depth[(static_cast<std::size_t>(pr * kPatch + py)) * kImageHW +
                                     pc * kPatch + px];
                    var += (d - mean) * (d - mean);
                }
            var /= n;
            double hgrad = 0.0;
            for (int py = 0; py < kPatch; ++py)
                for (int px = 0; px + 1 < kPatch; ++px) {
                    std::size_t base =
                        (static_cast<std::size_t>(pr * kPatch + py)) * kImageHW + pc * kPatch + px;
                    hgrad += depth[base + 1] - depth[base];
                }
            hgrad /= kPatch * (kPatch - 1);
            double vgrad = 0.0;
            for (int py = 0; py + 1 < kPatch; ++py)
                for (int px = 0; px < kPatch; ++px) {
                    std::size_t base =
                        (static_cast<std::size_t>(pr * kPatch + py)) * kImageHW + pc * kPatch + px;
                    vgrad += depth[base + kImageHW] - depth[base];
                }
            vgrad /= kPatch * (kPatch - 1);
            f[0] = mean;
            f[1] = mn;
            f[2] = mx;
            f[3] = std::sqrt(var);
            f[4] = occ;
            f[5] = hgrad;
            f[6] = vgrad;
            // Soft 8-bin histogram with linear (triangular) assignment between
            // neighbouring bin centers, averaged over the patch.
            for (int py = 0; py < kPatch; ++py)
                for (int px = 0; px < kPatch; ++px) {
                    double d = depth[(static_cast<std::size_t>(pr * kPatch + py)) * kImageHW +
                                     pc * kPatch + px];
                    double u = clampd(d, 0.0, 1.0) * 8.0 - 0.5;
                    int b0 = static_cast<int>(std::floor(u));
                    double w = u - b0;
                    int lo = std::clamp(b0, 0, 7);
                    int hi = std::clamp(b0 + 1, 0, 7);
                    f[7 + lo] += (1.0 - w) / n;
                    f[7 + hi] += w / n;
                }
            f[15] = 1.0;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

Env::Env(Scene scene, Task task) : scene_(std::move(scene)), task_(std::move(task)) {}

int Env::placed_count() const {
    int n = 0;
    for (int s : task_.sources)
        if (scene_.objects[static_cast<std::size_t>(s)].placed) ++n;
    return n;
}

std::array<double, kStateDim> Env::state() const {
    return {scene_.gripper.x, scene_.gripper.y, scene_.gripper.z,
            scene_.gripper.open ? 1.0 : 0.0};
}

void Env::try_grasp() {
    int best = -1;
    double best_d = 1e9;
    for (int s : task_.sources) {
        const SceneObject& o = scene_.objects[static_cast<std::size_t>(s)];
        if (o.placed || o.held) continue;
        double d = std::hypot(o.cx - scene_.gripper.x, o.cy - scene_.gripper.y);
        if (d <= o.radius && d < best_d) {
            best = s;
            best_d = d;
        }
    }
    if (best >= 0) scene_.objects[static_cast<std::size_t>(best)].held = true;
}

void Env::release() {
    for (SceneObject& o : scene_.objects) {
        if (!o.held) continue;
        o.held = false;
        o.cx = scene_.gripper.x;
        o.cy = scene_.gripper.y;
        const SceneObject& tgt = scene_.objects[static_cast<std::size_t>(task_.target)];
        double d = std::hypot(o.cx - tgt.cx, o.cy - tgt.cy);
        if (d <= tgt.radius) o.placed = true;
    }
}

void Env::step(const Action& a) {
    if (done_) return;
    double dx = clampd(a.dx, -kMaxStep, kMaxStep);
    double dy = clampd(a.dy, -kMaxStep, kMaxStep);
    double g = clampd(a.grip, -1.0, 1.0);

    scene_.gripper.x = clampd(scene_.gripper.x + dx, 0.0, 1.0);
    scene_.gripper.y = clampd(scene_.gripper.y + dy, 0.0, 1.0);
    for (SceneObject& o : scene_.objects)
        if (o.held) {
            o.cx = scene_.gripper.x;
            o.cy = scene_.gripper.y;
        }

    bool was_open = scene_.gripper.open;
    bool now_open = was_open;
    if (g >= 0.5) now_open = false;
    else if (g <= -0.5) now_open = true;
    if (was_open && !now_open) {
        scene_.gripper.open = false;
        try_grasp();
    } else if (!was_open && now_open) {
        scene_.gripper.open = true;
        release();
    }

    double z_goal = std::abs(g) >= 0.5 ? 0.30 : 0.80;
    scene_.gripper.z = clampd(scene_.gripper.z + clampd(z_goal - scene_.gripper.z, -kMaxStep, kMaxStep),
                              0.0, 1.0);

    ++steps_;
    success_ = placed_count() == static_cast<int>(task_.sources.size());
    done_ = success_ || steps_ >= kMaxEnvSteps;
}

// ---------------------------------------------------------------------------
// Scripted expert
// ---------------------------------------------------------------------------

namespace {

void resolve_phase(const Scene& scene, const Task& task, ExpertState& st) {
    int n = static_cast<int>(task.sources.size());
    for (int guard = 0; guard < 16; ++guard) {
        // Skip sources that are already placed.
        while (st.source_idx < n &&
               scene.objects[static_cast<std::size_t>(task.sources[static_cast<std::size_t>(
                                 st.source_idx)])]
                   .placed) {
            ++st.source_idx;
            st.phase = Phase::move_above_source;
        }
        if (st.source_idx >= n) {
            st.phase = Phase::complete;
            return;
        }
        const SceneObject& src =
            scene.objects[static_cast<std::size_t>(task.sources[static_cast<std::size_t>(st.source_idx)])];
        const SceneObject& tgt = scene.objects[static_cast<std::size_t>(task.target)];
        const Gripper& g = scene.gripper;
        switch (st.phase) {
            case Phase::move_above_source:
                if (std::max(std::abs(src.cx - g.x), std::abs(src.cy - g.y)) <= 0.01) {
                    st.phase = Phase::descend_grasp;
                    continue;
                }
                return;
            case Phase::descend_grasp:
                if (src.held) {
                    st.phase = Phase::lift;
                    continue;
                }
                return;
            case Phase::lift:
                if (g.z >= 0.75) {
                    st.phase = Phase::move_above_target;
                    continue;
                }
                return;
            case Phase::move_above_target:
                if (std::max(std::abs(tgt.cx - g.x), std::abs(tgt.cy - g.y)) <= 0.01) {
                    st.phase = Phase::descend_place;
                    continue;
                }
                return;
            case Phase::descend_place:
                // Completion of the place is observed via the placed flag,
                // handled by the skip loop above on the next resolution.
                return;
            case Phase::complete:
                return;
        }
    }
}

}  // namespace

Action expert_action(const Scene& scene, const Task& task, ExpertState& st) {
    resolve_phase(scene, task, st);
    const Gripper& g = scene.gripper;
    auto step_toward = [&](double tx, double ty) {
        return Action{clampd(kExpertKp * (tx - g.x), -kMaxStep, kMaxStep),
                      clampd(kExpertKp * (ty - g.y), -kMaxStep, kMaxStep), 0.0};
    };
    switch (st.phase) {
        case Phase::move_above_source: {
            const SceneObject& src =
                scene.objects[static_cast<std::size_t>(task.sources[static_cast<std::size_t>(st.source_idx)])];
            return step_toward(src.cx, src.cy);
        }
        case Phase::descend_grasp:
            return {0.0, 0.0, 1.0};
        case Phase::lift:
            return {0.0, 0.0, 0.0};
        case Phase::move_above_target: {
            const SceneObject& tgt = scene.objects[static_cast<std::size_t>(task.target)];
            return step_toward(tgt.cx, tgt.cy);
        }
        case Phase::descend_place:
            return {0.0, 0.0, -1.0};
        case Phase::complete:
            return {0.0, 0.0, 0.0};
    }
    return {};
}

std::string generate_cot_text(const Scene& scene, const Task& task, const ExpertState& st,
                              int env_steps) {
    const SceneObject& src = scene.objects[static_cast<std::size_t>(current_source_index(task, st))];
    const SceneObject& tgt = scene.objects[static_cast<std::size_t>(task.target)];
    const Gripper& g = scene.gripper;
    int placed = 0;
    for (int s : task.sources)
        if (scene.objects[static_cast<std::size_t>(s)].placed) ++placed;
    int n = static_cast<int>(task.sources.size());

    std::ostringstream os;
    os << "STATE: " << phase_words(st.phase, env_steps) << " , gripper "
       << (g.open ? "open" : "closed") << " , done " << placed << " of " << n << " .";

    os << " LOCATION: source " << color_word(src.color) << ' ' << kind_word(src.kind);
    append_coord(os, src.cx);
    append_coord(os, src.cy);
    os << " h";
    append_coord(os, src.height);
    os << " ; target " << color_word(tgt.color) << ' ' << kind_word(tgt.kind);
    append_coord(os, tgt.cx);
    append_coord(os, tgt.cy);
    os << " ; gripper";
    append_coord(os, g.x);
    append_coord(os, g.y);
    append_coord(os, g.z);
    os << " .";

    os << " PLAN: ";
    switch (st.phase) {
        case Phase::move_above_source:
            os << "move above " << color_word(src.color) << ' ' << kind_word(src.kind);
            break;
        case Phase::descend_grasp:
            os << "descend and close gripper";
            break;
        case Phase::lift:
            os << "lift " << color_word(src.color) << ' ' << kind_word(src.kind);
            break;
        case Phase::move_above_target:
            os << "move above " << color_word(tgt.color) << ' ' << kind_word(tgt.kind);
            break;
        case Phase::descend_place:
            os << "descend and open gripper";
            break;
        case Phase::complete:
            os << "stop";
            break;
    }
    os << " .";
    return os.str();
}

const std::vector<std::string>& grammar_words() {
    static const std::vector<std::string> words = {
        "STATE:", "LOCATION:", "PLAN:", ".", ",", ";",
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
        "task", "started", "complete", "moving", "above", "source", "descending", "to",
        "grasp", "lifting", "object", "target", "place", "gripper", "open", "closed",
        "done", "of", "h",
        "move", "descend", "and", "close", "lift", "stop",
        "red", "green", "blue", "yellow", "purple", "orange", "cyan", "white",
        "block", "plate", "bowl", "bread", "fruit",
        "the", "on"};
    return words;
}

Rollout expert_rollout(const Scene& scene, const Task& task) {
    Env env(scene, task);
    ExpertState st;
    Rollout out;
    while (!env.done()) {
        Action a = expert_action(env.scene(), env.task(), st);
        if (env.steps() % kChunkLen == 0) {
            RolloutFrame f;
            render(env.scene(), f.rgb, f.depth);
            f.state = env.state();
            f.cot = generate_cot_text(env.scene(), env.task(), st, env.steps());
            out.frames.push_back(std::move(f));
        }
        out.frames.back().actions.push_back(a);
        env.step(a);
    }
    for (RolloutFrame& f : out.frames)
        while (f.actions.size() < kChunkLen) f.actions.push_back(Action{0.0, 0.0, 0.0});
    out.total_steps = env.steps();
    out.success = env.success();
    return out;
}

}  // namespace vla
