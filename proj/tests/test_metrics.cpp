#include <cmath>
#include <random>

#include "doctest.h"
#include "rfedit/metrics.hpp"

using namespace rfedit;
using namespace rfedit::metrics;

namespace {

Image random_image(int h, int w, int c, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(h, w, c);
    for (float& p : img.pixels) p = u(rng);
    return img;
}

}  // namespace

TEST_CASE("identical images report infinite psnr, serialized as inf") {
    Image a = random_image(8, 8, 3, 1);
    double v = psnr(a, a);
    CHECK(std::isinf(v));
    CHECK(format_db(v) == "inf");
}

TEST_CASE("uniform squared error of 0.01 is 20 dB") {
    Image a(4, 4, 3), b(4, 4, 3);
    for (float& p : b.pixels) p = 0.1f;
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-4));
}

TEST_CASE("psnr is symmetric and decreases with noise amplitude") {
    Image a = random_image(8, 8, 3, 2);
    Image b = a;
    std::mt19937_64 rng(3);
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> dir(b.pixels.size());
    for (float& d : dir) d = n(rng);
    double prev = std::numeric_limits<double>::infinity();
    for (float amp : {0.01f, 0.03f, 0.09f}) {
        for (size_t i = 0; i < b.pixels.size(); ++i) b.pixels[i] = a.pixels[i] + amp * dir[i];
        CHECK(psnr(a, b) == doctest::Approx(psnr(b, a)));
        double v = psnr(a, b);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("psnr rejects shape mismatch") {
    Image a(4, 4, 3), b(4, 4, 1);
    CHECK_THROWS_AS(psnr(a, b), InputError);
}

TEST_CASE("background psnr ignores errors inside the subject box") {
    Image a = random_image(16, 16, 3, 5);
    Image b = a;
    Box box{4, 4, 12, 12};
    for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x)
            for (int c = 0; c < 3; ++c) b.at(y, x, c) += 0.5f;
    CHECK(std::isinf(background_psnr(a, b, box)));
    // one corrupted pixel outside the box becomes visible
    b.at(0, 0, 0) += 0.2f;
    CHECK(!std::isinf(background_psnr(a, b, box)));
}

TEST_CASE("background psnr matches a brute-force masked oracle") {
    Image a = random_image(12, 12, 3, 7);
    Image b = random_image(12, 12, 3, 8);
    Box box{2, 3, 9, 10};
    double acc = 0.0;
    long count = 0;
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            if (x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1) continue;
            for (int c = 0; c < 3; ++c) {
                double e = static_cast<double>(a.at(y, x, c)) - b.at(y, x, c);
                acc += e * e;
                ++count;
            }
        }
    double expect = 10.0 * std::log10(count / acc);
    CHECK(background_psnr(a, b, box) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("background psnr rejects degenerate boxes") {
    Image a = random_image(8, 8, 3, 9);
    CHECK_THROWS_AS(background_psnr(a, a, Box{0, 0, 8, 8}), InputError);
    CHECK_THROWS_AS(background_psnr(a, a, Box{-1, 0, 4, 4}), InputError);
    // zero-area box falls back to whole-image psnr
    CHECK(std::isinf(background_psnr(a, a, Box{3, 3, 3, 3})));
}

TEST_CASE("mask iou on hand-built overlaps") {
    TokenMap p(4, 4), g(4, 4);
    CHECK(mask_iou(p, g) == 1.0);  // both empty
    p.at(0, 0) = 1.0f;
    CHECK(mask_iou(p, g) == 0.0);
    g.at(0, 0) = 1.0f;
    CHECK(mask_iou(p, g) == 1.0);
    // pred {0,1}, gt {1,2}: intersection 1, union 3... extend pred to {0,1,2}
    p.at(0, 1) = 1.0f;
    g.at(0, 2) = 1.0f;
    CHECK(mask_iou(p, g) == doctest::Approx(1.0 / 3.0));
    CHECK(mask_iou(p, g) == doctest::Approx(mask_iou(g, p)));
}

TEST_CASE("mask iou thresholds soft values at one half") {
    TokenMap p(2, 2), g(2, 2);
    p.at(0, 0) = 0.51f;
    p.at(0, 1) = 0.49f;
    g.at(0, 0) = 1.0f;
    CHECK(mask_iou(p, g) == 1.0);
}

TEST_CASE("upsample replicates each token over its patch") {
    TokenMap t(2, 2);
    t.at(0, 1) = 1.0f;
    TokenMap up = upsample_mask(t, 6, 6);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) CHECK(up.at(y, x) == (y < 3 && x >= 3 ? 1.0f : 0.0f));
    CHECK_THROWS_AS(upsample_mask(t, 7, 6), InputError);
}

TEST_CASE("subject box bounds the change region with one patch of margin") {
    TokenMap mask(64, 64);
    for (int y = 20; y < 30; ++y)
        for (int x = 12; x < 18; ++x) mask.at(y, x) = 1.0f;
    Box b = subject_box(mask, 8);
    CHECK(b.x0 == 4);
    CHECK(b.y0 == 12);
    CHECK(b.x1 == 26);
    CHECK(b.y1 == 38);
    Box clipped = subject_box(mask, 30);
    CHECK(clipped.x0 == 0);
    CHECK(clipped.y1 == 60);
    TokenMap empty(64, 64);
    CHECK(subject_box(empty, 8).area() == 0);
}

TEST_CASE("report aggregates are the means of the pair list") {
    EvalReport r;
    r.pairs.push_back({"a", 20.0, 30.0, 0.5});
    r.pairs.push_back({"b", 40.0, 50.0, 0.7});
    r.finalize();
    CHECK(r.mean_psnr == doctest::Approx(30.0));
    CHECK(r.mean_background_psnr == doctest::Approx(40.0));
    CHECK(r.mean_iou == doctest::Approx(0.6));
}
