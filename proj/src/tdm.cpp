#include "rfedit/tdm.hpp"

#include <algorithm>
#include <cmath>

namespace rfedit::tdm {

TokenMap compute_divergence(const LatentGrid& v_tgt, const LatentGrid& v_src) {
    require_same_shape(v_tgt, v_src, "compute_divergence");
    TokenMap out(v_tgt.height, v_tgt.width);
    for (int i = 0; i < v_tgt.tokens(); ++i) {
        const float* a = v_tgt.token(i);
        const float* b = v_src.token(i);
        double s = 0.0;
        for (int c = 0; c < v_tgt.channels; ++c) {
            double e = static_cast<double>(a[c]) - b[c];
            s += e * e;
        }
        out.values[i] = static_cast<float>(std::sqrt(s));
    }
    return out;
}

TokenMap minmax_normalize(const TokenMap& d) {
    TokenMap out(d.height, d.width);
    if (d.values.empty()) return out;
    float lo = d.values[0], hi = d.values[0];
    for (float v : d.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi == lo) return out;  // no contrast, no edit signal
    float inv = 1.0f / (hi - lo);
    for (size_t i = 0; i < d.values.size(); ++i) out.values[i] = (d.values[i] - lo) * inv;
    return out;
}

TokenMap softmax_fuse(const std::vector<TokenMap>& window) {
    if (window.empty()) throw InputError("softmax_fuse: empty editing window");
    const TokenMap& first = window.front();
    for (const auto& m : window)
        if (!m.same_shape(first)) throw InputError("softmax_fuse: grid shape mismatch");
    TokenMap out(first.height, first.width);
    for (size_t i = 0; i < out.values.size(); ++i) {
        double denom = 0.0;
        for (const auto& m : window) denom += std::exp(static_cast<double>(m.values[i]));
        double acc = 0.0;
        for (const auto& m : window) {
            double w = std::exp(static_cast<double>(m.values[i])) / denom;
            acc += w * m.values[i];
        }
        out.values[i] = static_cast<float>(acc);
    }
    return out;
}

TokenMap gaussian_smooth(const TokenMap& m, float sigma) {
    if (sigma < 0.0f) throw InputError("gaussian_smooth: sigma must be non-negative");
    if (sigma == 0.0f) return m;
    int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (static_cast<double>(sigma) * sigma));
        total += kernel[i + radius];
    }
    for (double& k : kernel) k /= total;

    // reflect index (edge repeated): -1 -> 0, n -> n-1
    auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };

    TokenMap tmp(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * m.at(y, reflect(x + i, m.width));
            tmp.at(y, x) = static_cast<float>(acc);
        }
    TokenMap out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp.at(reflect(y + i, m.height), x);
            out.at(y, x) = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
        }
    return out;
}

EditMask binarize(const TokenMap& soft, float tau) {
    if (tau <= 0.0f || tau >= 1.0f) throw InputError("binarize: tau must lie in (0,1)");
    EditMask mask;
    mask.soft = soft;
    mask.tau = tau;
    mask.binary = TokenMap(soft.height, soft.width);
    for (size_t i = 0; i < soft.values.size(); ++i)
        mask.binary.values[i] = soft.values[i] > tau ? 1.0f : 0.0f;
    return mask;
}

}  // namespace rfedit::tdm
