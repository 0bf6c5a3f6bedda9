#pragma once

#include <array>
#include <string>
#include <vector>

#include "vla/rng.hpp"

namespace vla {

// World / model geometry shared across the repo.
inline constexpr int kImageHW = 32;
inline constexpr int kPatch = 4;
inline constexpr int kPatchesPerSide = kImageHW / kPatch;  // 8
inline constexpr int kNumPatches = kPatchesPerSide * kPatchesPerSide;  // 64
inline constexpr int kTeacherDim = 16;
inline constexpr int kChunkLen = 7;
inline constexpr int kActionDim = 3;
inline constexpr int kStateDim = 4;
inline constexpr int kInstrLen = 24;
inline constexpr int kCotMaxLen = 64;
inline constexpr int kMaxEnvSteps = 200;
inline constexpr double kMaxStep = 0.1;
inline constexpr double kExpertKp = 0.5;

enum class ObjectKind : int { block = 0, plate, bowl, bread, fruit };
enum class ColorName : int { red = 0, green, blue, yellow, purple, orange, cyan, white };

const char* kind_word(ObjectKind k);
const char* color_word(ColorName c);

struct SceneObject {
    ObjectKind kind;
    double cx = 0.0, cy = 0.0;
    double radius = 0.05;
    double height = 0.5;
    ColorName color;
    bool held = false;
    bool placed = false;
};

struct Gripper {
    double x = 0.5, y = 0.5, z = 0.8;
    bool open = true;
};

struct Scene {
    std::vector<SceneObject> objects;
    Gripper gripper;
};

enum class TaskTemplate : int { place_single = 0, place_two = 1, place_three = 2 };

int source_count(TaskTemplate t);
const char* template_name(TaskTemplate t);

struct Task {
    TaskTemplate tmpl;
    std::vector<int> sources;  // indices into Scene::objects, execution order
    int target = 0;
    std::string instruction;
};

struct SceneSample {
    Scene scene;
    Task task;
};

// Non-overlapping spawn on the coordinate lattice; deterministic given rng.
SceneSample sample_scene(Rng& rng, TaskTemplate tmpl);

// Top-down orthographic raster. rgb: 32×32×3 row-major (y,x,c) in [0,1];
// depth: 32×32, table 0, per-pixel max object height, gripper cross overlaid
// at depth z.
void render(const Scene& scene, std::vector<double>& rgb, std::vector<double>& depth);

// Frozen analytic geometric teacher: per 4×4 patch a 16-dim descriptor
// [mean,min,max,std, occupancy>0.05, hgrad,vgrad, soft 8-bin histogram, 1].
// Returns 64×16 row-major.
std::vector<double> teacher_features(const std::vector<double>& depth);

struct Action {
    double dx = 0.0, dy = 0.0, grip = 0.0;
};

enum class Phase : int {
    move_above_source = 0,
    descend_grasp,
    lift,
    move_above_target,
    descend_place,
    complete
};

struct ExpertState {
    int source_idx = 0;  // position within task.sources
    Phase phase = Phase::move_above_source;
};

// Steppable environment. Owns scene + task + progress flags.
class Env {
public:
    Env(Scene scene, Task task);
    const Scene& scene() const { return scene_; }
    const Task& task() const { return task_; }
    int steps() const { return steps_; }
    bool done() const { return done_; }
    bool success() const { return success_; }
    int placed_count() const;
    std::array<double, kStateDim> state() const;  // x, y, z, open
    void step(const Action& a);

private:
    void try_grasp();
    void release();
    Scene scene_;
    Task task_;
    int steps_ = 0;
    bool done_ = false;
    bool success_ = false;
};

// Waypoint controller toward the next sub-goal. Resolves phase transitions in
// `st` first, then emits the action for the resolved phase.
Action expert_action(const Scene& scene, const Task& task, ExpertState& st);

// Three-section CoT string: STATE / LOCATION / PLAN, closed grammar,
// coordinates quantized to the 0.05 lattice and rendered digit-wise.
std::string generate_cot_text(const Scene& scene, const Task& task, const ExpertState& st,
                              int env_steps);

// The word list the CoT/instruction grammar draws from, in canonical order.
const std::vector<std::string>& grammar_words();

struct RolloutFrame {
    std::vector<double> rgb;    // observation at the chunk boundary
    std::vector<double> depth;
    std::array<double, kStateDim> state;
    std::string cot;
    std::vector<Action> actions;  // exactly kChunkLen entries, zero-padded tail
};

struct Rollout {
    std::vector<RolloutFrame> frames;
    int total_steps = 0;
    bool success = false;
};

// Runs the scripted expert through the environment, snapshotting observation,
// CoT text and the next H actions at every chunk boundary.
Rollout expert_rollout(const Scene& scene, const Task& task);

}  // namespace vla
