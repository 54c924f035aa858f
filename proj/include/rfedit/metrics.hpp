#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rfedit/core.hpp"

namespace rfedit::metrics {

// Pixel-space axis-aligned box, [x0, x1) x [y0, y1).
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int area() const { return (x1 - x0) * (y1 - y0); }
};

// 10 log10(1 / MSE) with peak 1.0; identical images report +infinity.
double psnr(const Image& a, const Image& b);

// PSNR over pixels outside the subject box.
double background_psnr(const Image& a, const Image& b, const Box& subject);

// Intersection-over-union of binary pixel masks; both empty -> 1.
double mask_iou(const TokenMap& pred, const TokenMap& gt);

// Token-grid map -> pixel mask by patch replication.
TokenMap upsample_mask(const TokenMap& tokens, int canvas_h, int canvas_w);

// Bounding box of the nonzero region of a pixel mask, dilated by one patch.
Box subject_box(const TokenMap& change_mask, int patch);

struct PairResult {
    std::string id;
    double psnr = 0.0;
    double background_psnr = 0.0;
    double iou = 0.0;
};

struct EvalReport {
    std::vector<PairResult> pairs;
    double mean_psnr = 0.0;
    double mean_background_psnr = 0.0;
    double mean_iou = 0.0;
    std::string schedule_id;
    std::string model_id;

    void finalize();  // recompute aggregates from the pair list
    void write_text(const std::filesystem::path& path) const;
    void write_json(const std::filesystem::path& path) const;
};

std::string format_db(double v);  // +infinity serializes as "inf"

}  // namespace rfedit::metrics
