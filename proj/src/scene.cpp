#include "rfedit/scene.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "rfedit/io.hpp"

namespace rfedit::scene {

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::Circle: return "circle";
        case Shape::Square: return "square";
        case Shape::Triangle: return "triangle";
    }
    return "?";
}

Shape shape_from_name(const std::string& name) {
    if (name == "circle") return Shape::Circle;
    if (name == "square") return Shape::Square;
    if (name == "triangle") return Shape::Triangle;
    throw InputError("unknown shape kind: " + name);
}

void anchor_center(int anchor, int canvas, int& cx, int& cy) {
    if (anchor < 0 || anchor >= kNumAnchors) throw InputError("anchor out of range");
    int q = canvas / 4;
    cx = (anchor % 2 == 0) ? q : 3 * q;
    cy = (anchor / 2 == 0) ? q : 3 * q;
}

int nearest_anchor(int cx, int cy, int canvas) {
    int best = 0;
    long best_d = -1;
    for (int a = 0; a < kNumAnchors; ++a) {
        int ax, ay;
        anchor_center(a, canvas, ax, ay);
        long d = static_cast<long>(ax - cx) * (ax - cx) + static_cast<long>(ay - cy) * (ay - cy);
        if (best_d < 0 || d < best_d) {
            best_d = d;
            best = a;
        }
    }
    return best;
}

int SceneSpec::condition_id() const {
    if (objects.empty()) throw InputError("condition_id: empty object inventory");
    const ObjectSpec& o = objects.front();
    int anchor = nearest_anchor(o.cx, o.cy, canvas);
    return static_cast<int>(o.kind) * kNumAnchors + anchor;
}

SceneSpec make_scene(Shape kind, int anchor, float intensity, int canvas) {
    int cx, cy;
    anchor_center(anchor, canvas, cx, cy);
    SceneSpec s;
    s.canvas = canvas;
    s.objects.push_back({kind, cx, cy, kDefaultScale, intensity});
    return s;
}

namespace {

bool inside_object(const ObjectSpec& o, int x, int y) {
    int dx = x - o.cx;
    int dy = y - o.cy;
    switch (o.kind) {
        case Shape::Circle:
            return dx * dx + dy * dy <= o.scale * o.scale;
        case Shape::Square:
            return std::abs(dx) <= o.scale && std::abs(dy) <= o.scale;
        case Shape::Triangle: {
            // Upright triangle: apex at cy - scale, base at cy + scale.
            if (dy < -o.scale || dy > o.scale) return false;
            // Width grows linearly from 0 at the apex to scale at the base.
            float half = o.scale * (dy + o.scale) / (2.0f * o.scale);
            return std::abs(static_cast<float>(dx)) <= half + 0.5f;
        }
    }
    return false;
}

float background_intensity(int pattern, int x, int y, int canvas) {
    float u = static_cast<float>(x) / (canvas - 1);
    float v = static_cast<float>(y) / (canvas - 1);
    // Pattern 0 is the canonical ramp used by every edit pair; patterns 1..12
    // jitter the base level and horizontal slope so the training distribution
    // over backgrounds is diffuse rather than a single deterministic image.
    float base = 0.15f, slope_u = 0.08f;
    if (pattern > 0) {
        int idx = (pattern - 1) % (kNumBackgrounds - 1);
        base += 0.030f * (static_cast<float>(idx / 3) - 1.5f);
        slope_u += 0.025f * static_cast<float>(idx % 3 - 1);
    }
    return base + slope_u * u + 0.06f * v;
}

}  // namespace

Image render(const SceneSpec& spec) {
    for (const auto& o : spec.objects) {
        if (o.cx - o.scale < 0 || o.cx + o.scale >= spec.canvas || o.cy - o.scale < 0 ||
            o.cy + o.scale >= spec.canvas)
            throw InputError("render: object extends outside the canvas");
    }
    Image img(spec.canvas, spec.canvas, 3);
    for (int y = 0; y < spec.canvas; ++y)
        for (int x = 0; x < spec.canvas; ++x) {
            float val = background_intensity(spec.background, x, y, spec.canvas);
            for (const auto& o : spec.objects)
                if (inside_object(o, x, y)) val = o.intensity;
            img.at(y, x, 0) = val;
            img.at(y, x, 1) = static_cast<float>(x) / (spec.canvas - 1);
            img.at(y, x, 2) = static_cast<float>(y) / (spec.canvas - 1);
        }
    return img;
}

EditPair make_edit_pair(const SceneSpec& src, const SceneSpec& tgt) {
    Image a = render(src);
    Image b = render(tgt);
    EditPair pair;
    pair.source = src;
    pair.target = tgt;
    pair.change_mask = TokenMap(a.height, a.width);
    // The mask covers the full silhouette of every object that is not present
    // identically in the other scene, i.e. the union of the old and new object
    // footprints, not just the pixels whose rendered values happen to differ.
    auto same = [](const ObjectSpec& p, const ObjectSpec& q) {
        return p.kind == q.kind && p.cx == q.cx && p.cy == q.cy && p.scale == q.scale &&
               p.intensity == q.intensity;
    };
    std::vector<const ObjectSpec*> changed;
    for (const auto& o : src.objects) {
        bool matched = false;
        for (const auto& p : tgt.objects) matched = matched || same(o, p);
        if (!matched) changed.push_back(&o);
    }
    for (const auto& o : tgt.objects) {
        bool matched = false;
        for (const auto& p : src.objects) matched = matched || same(o, p);
        if (!matched) changed.push_back(&o);
    }
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            bool in = false;
            for (const ObjectSpec* o : changed)
                if (inside_object(*o, x, y)) {
                    in = true;
                    break;
                }
            pair.change_mask.at(y, x) = in ? 1.0f : 0.0f;
        }
    return pair;
}

std::string SceneSpec::to_line() const {
    std::ostringstream os;
    os << "canvas=" << canvas << " background=" << background;
    for (const auto& o : objects) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", o.intensity);
        os << " object=" << shape_name(o.kind) << "," << o.cx << "," << o.cy << "," << o.scale
           << "," << buf;
    }
    return os.str();
}

SceneSpec SceneSpec::from_line(const std::string& line) {
    SceneSpec s;
    s.objects.clear();
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw IoError("malformed spec token: " + tok);
        std::string key = tok.substr(0, eq);
        std::string val = tok.substr(eq + 1);
        if (key == "canvas") {
            s.canvas = std::stoi(val);
        } else if (key == "background") {
            s.background = std::stoi(val);
        } else if (key == "object") {
            ObjectSpec o;
            std::istringstream vs(val);
            std::string part;
            std::vector<std::string> parts;
            while (std::getline(vs, part, ',')) parts.push_back(part);
            if (parts.size() != 5) throw IoError("malformed object spec: " + val);
            o.kind = shape_from_name(parts[0]);
            o.cx = std::stoi(parts[1]);
            o.cy = std::stoi(parts[2]);
            o.scale = std::stoi(parts[3]);
            o.intensity = std::stof(parts[4]);
            s.objects.push_back(o);
        } else {
            throw IoError("unknown spec key: " + key);
        }
    }
    return s;
}

Dataset make_dataset(int count, uint64_t seed) {
    if (count <= 0) throw InputError("make_dataset: count must be positive");
    Dataset ds;
    // Training intensities in [0.70, 0.97); held-out pairs use a disjoint
    // band [0.97, 0.99] so no held-out render appears in training.
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> train_int(0.70f, 0.97f);
    // Backgrounds lean on the object position: each anchor prefers its own
    // triple of patterns, so the learned prior ties background statistics to
    // the condition the way real prompts tie background to content, while the
    // uniform draws keep every combination in support.
    std::uniform_int_distribution<int> train_bg(0, kNumBackgrounds - 1);
    std::uniform_int_distribution<int> fam_bg(0, 2);
    std::bernoulli_distribution correlated(0.5);
    for (int i = 0; i < count; ++i) {
        int cond = i % kCondVocab;  // balanced inventory coverage
        Shape kind = static_cast<Shape>(cond / kNumAnchors);
        int anchor = cond % kNumAnchors;
        SceneSpec s = make_scene(kind, anchor, train_int(rng));
        s.background = correlated(rng) ? 1 + 3 * anchor + fam_bg(rng) : train_bg(rng);
        ds.train.push_back(s);
    }
    std::mt19937_64 held_rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<float> held_int(0.97f, 0.99f);
    for (int anchor = 0; anchor < kNumAnchors; ++anchor)
        for (int a = 0; a < kNumShapes; ++a)
            for (int b = 0; b < kNumShapes; ++b) {
                if (a == b) continue;
                float inten = held_int(held_rng);
                SceneSpec src = make_scene(static_cast<Shape>(a), anchor, inten);
                SceneSpec tgt = make_scene(static_cast<Shape>(b), anchor, inten);
                ds.held_out.push_back(make_edit_pair(src, tgt));
            }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "train");
    fs::create_directories(dir / "pairs");
    std::ofstream manifest(dir / "train_manifest.txt");
    if (!manifest) throw IoError("cannot write train manifest");
    for (size_t i = 0; i < ds.train.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04zu.ppm", i);
        io::write_ppm(dir / "train" / name, render(ds.train[i]));
        manifest << "file=train/" << name << " cond=" << ds.train[i].condition_id() << " "
                 << ds.train[i].to_line() << "\n";
    }
    std::ofstream pairs(dir / "pairs_manifest.txt");
    if (!pairs) throw IoError("cannot write pairs manifest");
    for (size_t i = 0; i < ds.held_out.size(); ++i) {
        char base[32];
        std::snprintf(base, sizeof(base), "pair_%03zu", i);
        const EditPair& p = ds.held_out[i];
        io::write_ppm(dir / "pairs" / (std::string(base) + "_src.ppm"), render(p.source));
        io::write_ppm(dir / "pairs" / (std::string(base) + "_tgt.ppm"), render(p.target));
        io::write_pgm(dir / "pairs" / (std::string(base) + "_mask.pgm"), p.change_mask);
        pairs << "id=" << base << " src{" << p.source.to_line() << "} tgt{" << p.target.to_line()
              << "}\n";
    }
}

Dataset read_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    std::ifstream manifest(dir / "train_manifest.txt");
    if (!manifest) throw IoError("missing train manifest in " + dir.string());
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        // Strip the file= and cond= prefix tokens; the spec line follows.
        auto pos = line.find(" canvas=");
        if (pos == std::string::npos) throw IoError("malformed manifest line: " + line);
        auto canvas_pos = line.find("canvas=", pos);
        ds.train.push_back(SceneSpec::from_line(line.substr(canvas_pos)));
    }
    std::ifstream pairs(dir / "pairs_manifest.txt");
    if (!pairs) throw IoError("missing pairs manifest in " + dir.string());
    while (std::getline(pairs, line)) {
        if (line.empty()) continue;
        auto s0 = line.find("src{");
        auto s1 = line.find('}', s0);
        auto t0 = line.find("tgt{", s1);
        auto t1 = line.find('}', t0);
        if (s0 == std::string::npos || t0 == std::string::npos)
            throw IoError("malformed pair line: " + line);
        SceneSpec src = SceneSpec::from_line(line.substr(s0 + 4, s1 - s0 - 4));
        SceneSpec tgt = SceneSpec::from_line(line.substr(t0 + 4, t1 - t0 - 4));
        ds.held_out.push_back(make_edit_pair(src, tgt));
    }
    return ds;
}

}  // namespace rfedit::scene
