#include "rfedit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace rfedit::metrics {

namespace {

double mse_region(const Image& a, const Image& b, const Box* exclude) {
    double acc = 0.0;
    long count = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            if (exclude && x >= exclude->x0 && x < exclude->x1 && y >= exclude->y0 &&
                y < exclude->y1)
                continue;
            for (int c = 0; c < a.channels; ++c) {
                double e = static_cast<double>(a.at(y, x, c)) - b.at(y, x, c);
                acc += e * e;
                ++count;
            }
        }
    if (count == 0) throw InputError("psnr: empty pixel region");
    return acc / static_cast<double>(count);
}

double mse_to_db(double mse) {
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace

double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw InputError("psnr: shape mismatch");
    return mse_to_db(mse_region(a, b, nullptr));
}

double background_psnr(const Image& a, const Image& b, const Box& subject) {
    if (!a.same_shape(b)) throw InputError("background_psnr: shape mismatch");
    if (subject.x0 < 0 || subject.y0 < 0 || subject.x1 > a.width || subject.y1 > a.height)
        throw InputError("background_psnr: box outside the canvas");
    if (subject.x0 <= 0 && subject.y0 <= 0 && subject.x1 >= a.width && subject.y1 >= a.height)
        throw InputError("background_psnr: box covers the whole canvas");
    if (subject.area() <= 0) return psnr(a, b);
    return mse_to_db(mse_region(a, b, &subject));
}

double mask_iou(const TokenMap& pred, const TokenMap& gt) {
    if (!pred.same_shape(gt)) throw InputError("mask_iou: shape mismatch");
    long inter = 0, uni = 0;
    for (size_t i = 0; i < pred.values.size(); ++i) {
        bool p = pred.values[i] > 0.5f;
        bool g = gt.values[i] > 0.5f;
        inter += (p && g);
        uni += (p || g);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

TokenMap upsample_mask(const TokenMap& tokens, int canvas_h, int canvas_w) {
    if (canvas_h % tokens.height || canvas_w % tokens.width)
        throw InputError("upsample_mask: canvas not divisible by the token grid");
    int ph = canvas_h / tokens.height, pw = canvas_w / tokens.width;
    TokenMap out(canvas_h, canvas_w);
    for (int y = 0; y < canvas_h; ++y)
        for (int x = 0; x < canvas_w; ++x) out.at(y, x) = tokens.at(y / ph, x / pw);
    return out;
}

Box subject_box(const TokenMap& change_mask, int patch) {
    int x0 = change_mask.width, y0 = change_mask.height, x1 = 0, y1 = 0;
    for (int y = 0; y < change_mask.height; ++y)
        for (int x = 0; x < change_mask.width; ++x)
            if (change_mask.at(y, x) > 0.5f) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x + 1);
                y1 = std::max(y1, y + 1);
            }
    if (x1 <= x0) return {};  // empty change region
    Box b;
    b.x0 = std::max(0, x0 - patch);
    b.y0 = std::max(0, y0 - patch);
    b.x1 = std::min(change_mask.width, x1 + patch);
    b.y1 = std::min(change_mask.height, y1 + patch);
    return b;
}

std::string format_db(double v) {
    if (std::isinf(v)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

void EvalReport::finalize() {
    mean_psnr = mean_background_psnr = mean_iou = 0.0;
    if (pairs.empty()) return;
    for (const auto& p : pairs) {
        mean_psnr += p.psnr;
        mean_background_psnr += p.background_psnr;
        mean_iou += p.iou;
    }
    mean_psnr /= pairs.size();
    mean_background_psnr /= pairs.size();
    mean_iou /= pairs.size();
}

void EvalReport::write_text(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path.string());
    os << "schedule=" << schedule_id << "\nmodel=" << model_id << "\n";
    for (const auto& p : pairs)
        os << p.id << " psnr=" << format_db(p.psnr) << " bg_psnr=" << format_db(p.background_psnr)
           << " iou=" << p.iou << "\n";
    os << "mean_psnr=" << format_db(mean_psnr) << "\nmean_bg_psnr="
       << format_db(mean_background_psnr) << "\nmean_iou=" << mean_iou << "\n";
}

void EvalReport::write_json(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["schedule"] = schedule_id;
    j["model"] = model_id;
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : pairs) {
        nlohmann::json e;
        e["id"] = p.id;
        e["psnr"] = format_db(p.psnr);
        e["background_psnr"] = format_db(p.background_psnr);
        e["iou"] = p.iou;
        j["pairs"].push_back(e);
    }
    j["mean_psnr"] = format_db(mean_psnr);
    j["mean_background_psnr"] = format_db(mean_background_psnr);
    j["mean_iou"] = mean_iou;
    // reserved, requires pretrained networks
    j["lpips"] = nullptr;
    j["clip_similarity"] = nullptr;
    j["aesthetic_score"] = nullptr;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path.string());
    os << j.dump(2) << "\n";
}

}  // namespace rfedit::metrics
