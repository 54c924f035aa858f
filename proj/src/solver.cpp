#include "rfedit/solver.hpp"

#include <fstream>

#include "rfedit/io.hpp"

namespace rfedit::solver {

TimeGrid TimeGrid::uniform(int steps) {
    if (steps <= 0) throw InputError("TimeGrid: need at least one step");
    TimeGrid g;
    g.times.resize(steps + 1);
    for (int i = 0; i <= steps; ++i)
        g.times[steps - i] = static_cast<float>(i) / static_cast<float>(steps);
    g.times.front() = 1.0f;
    g.times.back() = 0.0f;
    return g;
}

void TimeGrid::validate() const {
    if (times.size() < 2) throw InputError("TimeGrid: endpoints must be 1 and 0");
    if (times.front() != 1.0f || times.back() != 0.0f)
        throw InputError("TimeGrid: endpoints must be 1 and 0");
    for (size_t i = 1; i < times.size(); ++i)
        if (times[i] >= times[i - 1]) throw InputError("TimeGrid: times must strictly decrease");
}

namespace {

void check_finite(const LatentGrid& v, float t, const char* what) {
    if (!v.all_finite())
        throw NumericError(std::string(what) + ": non-finite velocity at t=" + std::to_string(t));
}

// One step with signed increment hs (negative for denoising);
// the second-order correction estimates d/dt v with one midpoint probe.
LatentGrid signed_step(const LatentGrid& x, float t, float hs, SolverKind kind,
                       const std::function<LatentGrid(const LatentGrid&, float, bool)>& v) {
    LatentGrid v0 = v(x, t, true);
    check_finite(v0, t, "step");
    LatentGrid out = x;
    for (size_t i = 0; i < out.values.size(); ++i) out.values[i] += hs * v0.values[i];
    if (kind == SolverKind::SecondOrder) {
        float hm = hs * 0.5f;
        LatentGrid xm = x;
        for (size_t i = 0; i < xm.values.size(); ++i) xm.values[i] += hm * v0.values[i];
        LatentGrid vm = v(xm, t + hm, false);
        check_finite(vm, t + hm, "midpoint probe");
        // dv/dt estimate (vm - v0) / hm; correction 0.5 * hs^2 * dv/dt
        float c = 0.5f * hs * hs / hm;
        for (size_t i = 0; i < out.values.size(); ++i)
            out.values[i] += c * (vm.values[i] - v0.values[i]);
    }
    return out;
}

}  // namespace

LatentGrid euler_step(const LatentGrid& x, float t, float h, const VelocityFn& v) {
    if (h <= 0.0f) throw InputError("euler_step: step size must be positive");
    return signed_step(x, t, -h, SolverKind::Euler,
                       [&](const LatentGrid& xx, float tt, bool) { return v(xx, tt); });
}

LatentGrid second_order_step(const LatentGrid& x, float t, float h, const VelocityFn& v) {
    if (h <= 0.0f) throw InputError("second_order_step: step size must be positive");
    return signed_step(x, t, -h, SolverKind::SecondOrder,
                       [&](const LatentGrid& xx, float tt, bool) { return v(xx, tt); });
}

const LatentGrid& TrajectoryRecord::final_latent() const {
    if (steps.empty()) throw InputError("TrajectoryRecord: empty");
    return steps.back().after;
}

TrajectoryRecord integrate(const LatentGrid& x_start, const TimeGrid& grid, Direction direction,
                           int condition, SolverKind kind, const StepVelocityFn& v) {
    grid.validate();
    TrajectoryRecord rec;
    rec.direction = direction;
    rec.solver = kind;
    rec.condition = condition;
    const int N = grid.steps();
    LatentGrid x = x_start;
    long nfe = 0;
    for (int s = 0; s < N; ++s) {
        // Denoising evaluates at t_N..t_1 (descending); inversion at t_0..t_{N-1}.
        float t, t_next;
        if (direction == Direction::Denoising) {
            t = grid.times[s];
            t_next = grid.times[s + 1];
        } else {
            t = grid.times[N - s];
            t_next = grid.times[N - s - 1];
        }
        float hs = t_next - t;
        int step_nfe = 0;
        LatentGrid v_primary;
        LatentGrid after;
        try {
            after = signed_step(x, t, hs, kind,
                                [&](const LatentGrid& xx, float tt, bool primary) {
                                    ++step_nfe;
                                    LatentGrid vv = v(xx, tt, s, primary);
                                    if (primary) v_primary = vv;
                                    return vv;
                                });
        } catch (const NumericError& e) {
            throw NumericError("integrate: step " + std::to_string(s) + ": " + e.what());
        }
        StepRecord sr;
        sr.index = s;
        sr.t = t;
        sr.before = std::move(x);
        sr.after = after;
        sr.nfe = step_nfe;
        sr.velocity = std::move(v_primary);
        nfe += step_nfe;
        rec.steps.push_back(std::move(sr));
        x = std::move(after);
    }
    rec.total_nfe = nfe;
    return rec;
}

// ---------------------------------------------------------------------------
// Flat binary export, same header discipline as checkpoints.

namespace {
constexpr char kTrajMagic[8] = {'R', 'F', 'E', 'T', 'R', 'A', 'J', '1'};

void write_grid(std::ostream& os, const LatentGrid& g) {
    io::write_u32_le(os, static_cast<uint32_t>(g.height));
    io::write_u32_le(os, static_cast<uint32_t>(g.width));
    io::write_u32_le(os, static_cast<uint32_t>(g.channels));
    io::write_f32_le(os, g.values.data(), g.values.size());
}

LatentGrid read_grid(std::istream& is) {
    int h = static_cast<int>(io::read_u32_le(is));
    int w = static_cast<int>(io::read_u32_le(is));
    int c = static_cast<int>(io::read_u32_le(is));
    LatentGrid g(h, w, c);
    io::read_f32_le(is, g.values.data(), g.values.size());
    return g;
}
}  // namespace

void TrajectoryRecord::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open trajectory file for writing: " + path.string());
    os.write(kTrajMagic, 8);
    io::write_u32_le(os, direction == Direction::Denoising ? 0 : 1);
    io::write_u32_le(os, solver == SolverKind::Euler ? 0 : 1);
    io::write_u32_le(os, static_cast<uint32_t>(condition));
    io::write_u32_le(os, static_cast<uint32_t>(total_nfe));
    io::write_u32_le(os, static_cast<uint32_t>(steps.size()));
    for (const auto& s : steps) {
        io::write_u32_le(os, static_cast<uint32_t>(s.index));
        float t = s.t;
        io::write_f32_le(os, &t, 1);
        io::write_u32_le(os, static_cast<uint32_t>(s.nfe));
        write_grid(os, s.before);
        write_grid(os, s.after);
        write_grid(os, s.velocity);
    }
    if (!os) throw IoError("trajectory write failed: " + path.string());
}

TrajectoryRecord TrajectoryRecord::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open trajectory file: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kTrajMagic, 8))
        throw IoError("bad trajectory magic: " + path.string());
    TrajectoryRecord rec;
    rec.direction = io::read_u32_le(is) == 0 ? Direction::Denoising : Direction::Inversion;
    rec.solver = io::read_u32_le(is) == 0 ? SolverKind::Euler : SolverKind::SecondOrder;
    rec.condition = static_cast<int>(io::read_u32_le(is));
    rec.total_nfe = io::read_u32_le(is);
    uint32_t n = io::read_u32_le(is);
    for (uint32_t i = 0; i < n; ++i) {
        StepRecord s;
        s.index = static_cast<int>(io::read_u32_le(is));
        io::read_f32_le(is, &s.t, 1);
        s.nfe = static_cast<int>(io::read_u32_le(is));
        s.before = read_grid(is);
        s.after = read_grid(is);
        s.velocity = read_grid(is);
        rec.steps.push_back(std::move(s));
    }
    return rec;
}

}  // namespace rfedit::solver
