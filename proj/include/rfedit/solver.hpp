#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "rfedit/core.hpp"
#include "rfedit/model.hpp"

namespace rfedit::solver {

// Strictly decreasing times t_N > ... > t_0 with endpoints 1 and 0.
struct TimeGrid {
    std::vector<float> times;

    static TimeGrid uniform(int steps);
    int steps() const { return static_cast<int>(times.size()) - 1; }
    void validate() const;
};

enum class Direction { Denoising, Inversion };
enum class SolverKind { Euler, SecondOrder };

using VelocityFn = std::function<LatentGrid(const LatentGrid&, float)>;

// Step-aware evaluator used by integrate. `primary` marks the evaluation at
// the step's own (x, t); the second-order midpoint probe passes false.
using StepVelocityFn = std::function<LatentGrid(const LatentGrid&, float, int, bool)>;

// Denoising-form steps (h = t_i - t_{i-1} > 0).
LatentGrid euler_step(const LatentGrid& x, float t, float h, const VelocityFn& v);
LatentGrid second_order_step(const LatentGrid& x, float t, float h, const VelocityFn& v);

struct StepRecord {
    int index = 0;
    float t = 0.0f;  // time the step's primary evaluation happened at
    LatentGrid before;
    LatentGrid after;
    int nfe = 0;
    LatentGrid velocity;  // primary post-guidance velocity, replayable
};

struct TrajectoryRecord {
    Direction direction = Direction::Denoising;
    SolverKind solver = SolverKind::Euler;
    int condition = 0;
    std::vector<StepRecord> steps;
    long total_nfe = 0;
    net::KVCache kv;  // populated when the caller's evaluator captures

    const LatentGrid& final_latent() const;
    void save(const std::filesystem::path& path) const;
    static TrajectoryRecord load(const std::filesystem::path& path);
};

// Walks the grid (1 -> 0 for denoising, 0 -> 1 with sign-flipped drift for
// inversion). Per-step NFE is 1 (Euler) or 2 (second order); total NFE
// equals the number of evaluator calls made.
TrajectoryRecord integrate(const LatentGrid& x_start, const TimeGrid& grid, Direction direction,
                           int condition, SolverKind kind, const StepVelocityFn& v);

}  // namespace rfedit::solver
