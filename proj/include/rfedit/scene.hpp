#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rfedit/core.hpp"

namespace rfedit::scene {

enum class Shape { Circle, Square, Triangle };

const char* shape_name(Shape s);
Shape shape_from_name(const std::string& name);

struct ObjectSpec {
    Shape kind = Shape::Circle;
    int cx = 0;
    int cy = 0;
    int scale = 0;  // radius / half-width in pixels
    float intensity = 0.85f;
};

struct SceneSpec {
    int canvas = 64;
    int background = 0;  // background pattern id
    std::vector<ObjectSpec> objects;

    // Pure function of the object inventory (shape kind + anchor index);
    // intensity and scale jitter are nuisance variables.
    int condition_id() const;

    std::string to_line() const;
    static SceneSpec from_line(const std::string& line);
};

// Anchor grid the condition vocabulary is built over.
inline constexpr int kNumAnchors = 4;
inline constexpr int kNumShapes = 3;
inline constexpr int kCondVocab = kNumShapes * kNumAnchors;
inline constexpr int kDefaultScale = 11;
inline constexpr int kNumBackgrounds = 13;

// Anchor index -> canvas-relative center.
void anchor_center(int anchor, int canvas, int& cx, int& cy);
int nearest_anchor(int cx, int cy, int canvas);

SceneSpec make_scene(Shape kind, int anchor, float intensity, int canvas = 64);

// Hard-silhouette render, 3 channels: intensity, x ramp, y ramp.
Image render(const SceneSpec& spec);

struct EditPair {
    SceneSpec source;
    SceneSpec target;
    // Pixel-level ground truth: 1 where the two renders differ.
    TokenMap change_mask;  // canvas x canvas, values in {0,1}
};

EditPair make_edit_pair(const SceneSpec& src, const SceneSpec& tgt);

struct Dataset {
    std::vector<SceneSpec> train;
    std::vector<EditPair> held_out;
};

// Balanced coverage of the (shape, anchor) inventory for training plus a
// held-out set of edit pairs whose intensities never occur in training.
Dataset make_dataset(int count, uint64_t seed);

// Dataset on disk: images as PPM, line-oriented manifests.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace rfedit::scene
