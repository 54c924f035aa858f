#pragma once

#include <map>
#include <string>
#include <vector>

#include "rfedit/core.hpp"
#include "rfedit/model.hpp"
#include "rfedit/solver.hpp"
#include "rfedit/tdm.hpp"

namespace rfedit::edit {

struct EditSchedule {
    int steps = 28;
    int k_front = 2;
    int k_tail = 4;
    float tau = 0.35f;
    float sigma = 1.0f;
    float guidance = 2.0f;
    std::vector<int> injection_blocks;  // empty -> model default
    float adapter_lo = 0.1f;
    float adapter_hi = 0.7f;
    float beta1 = 2.5f;
    float beta2 = 3.5f;
    bool adapter_enabled = true;
    solver::SolverKind solver = solver::SolverKind::SecondOrder;

    void validate() const;
    std::string id() const;  // compact identifier for reports
};

enum class Stage { Stage1, Stage2, Stage3 };

// First k_front steps: full source injection (mask 0); middle: TDM-guided;
// last k_tail steps: full release (mask 1).
Stage stage_for_step(int step, const EditSchedule& sched);

// Per-token convex KV blend: mask 1 selects target features, 0 inversion.
net::KVSlice blend_kv(const TokenMap& mask, const net::KVSlice& tgt, const net::KVSlice& inv);

// Identity patch encode/decode between pixel images and token latents.
LatentGrid encode_latent(const Image& img, int grid_h, int grid_w);
Image decode_image(const LatentGrid& latent, int img_channels);

enum class MaskOverride { None, ForceZeros, ForceOnes };

struct EditResult {
    LatentGrid edited_latent;
    Image edited_image;
    std::vector<TokenMap> divergence_maps;  // raw per-step maps, Stage-2 only
    tdm::EditMask final_mask;
    solver::TrajectoryRecord inversion;
    solver::TrajectoryRecord denoising;
    long total_nfe = 0;  // every velocity-evaluator call, probes included
    std::map<std::string, std::string> manifest;
};

EditResult run_edit(const net::VelocityNet& model, const Image& source, int c_src, int c_tgt,
                    const EditSchedule& sched, uint64_t seed,
                    MaskOverride override_mask = MaskOverride::None);

}  // namespace rfedit::edit
