#pragma once

#include <filesystem>
#include <vector>

#include "rfedit/core.hpp"
#include "rfedit/model.hpp"

namespace rfedit::flow {

// X_t = (1-t) x0 + t x1; x0 is the data side, x1 the Gaussian side.
LatentGrid interpolate(const LatentGrid& x0, const LatentGrid& x1, float t);

// Straight-path velocity x1 - x0.
LatentGrid target_velocity(const LatentGrid& x0, const LatentGrid& x1);

struct TrainBatch {
    std::vector<LatentGrid> clean;
    std::vector<LatentGrid> noise;
    std::vector<int> conditions;
    std::vector<float> times;
};

// Mean over all scalar elements of the squared velocity regression error.
float cfm_loss(const net::VelocityNet& model, const TrainBatch& batch);

struct TrainSample {
    LatentGrid x0;
    int cond = 0;
    TokenMap adapter_map;  // edge map of the clean image, for adapter training
};

struct TrainConfig {
    int epochs = 40;
    int batch_size = 16;
    float lr = 3e-3f;
    float cond_dropout = 0.1f;
    float adapter_prob = 0.5f;  // fraction of samples trained with the adapter on
    uint64_t seed = 1;
};

struct TrainResult {
    std::vector<float> loss_history;  // one entry per batch
    float final_loss = 0.0f;          // mean loss of the last epoch
};

// Deterministic Adam training of the CFM objective. Aborts with a
// NumericError if the loss goes non-finite.
TrainResult train(net::VelocityNet& model, const std::vector<TrainSample>& data,
                  const TrainConfig& cfg);

}  // namespace rfedit::flow
