#pragma once

#include <vector>

#include "rfedit/core.hpp"

namespace rfedit::tdm {

// Per-token L2 norm over channels of v_tgt - v_src.
TokenMap compute_divergence(const LatentGrid& v_tgt, const LatentGrid& v_src);

// (d - min) / (max - min); a constant map normalizes to all-zeros.
TokenMap minmax_normalize(const TokenMap& d);

// Softmax-weighted temporal fusion over the editing window: per token,
// weights exp(d_t) / sum_t' exp(d_t'), applied to the same values.
TokenMap softmax_fuse(const std::vector<TokenMap>& window);

// Normalized discrete Gaussian, radius ceil(3*sigma), reflect padding,
// output clamped to [0,1]. sigma = 0 is the identity.
TokenMap gaussian_smooth(const TokenMap& m, float sigma);

struct EditMask {
    TokenMap soft;
    TokenMap binary;
    float tau = 0.35f;
    float sigma = 1.0f;
};

// Strict threshold: binary = 1 where soft > tau.
EditMask binarize(const TokenMap& soft, float tau);

}  // namespace rfedit::tdm
