#include "rfedit/flow.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace rfedit::flow {

LatentGrid interpolate(const LatentGrid& x0, const LatentGrid& x1, float t) {
    require_same_shape(x0, x1, "interpolate");
    if (t < 0.0f || t > 1.0f) throw InputError("interpolate: t outside [0,1]");
    LatentGrid out = x0;
    for (size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = (1.0f - t) * x0.values[i] + t * x1.values[i];
    return out;
}

LatentGrid target_velocity(const LatentGrid& x0, const LatentGrid& x1) {
    require_same_shape(x0, x1, "target_velocity");
    LatentGrid out = x0;
    for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = x1.values[i] - x0.values[i];
    return out;
}

float cfm_loss(const net::VelocityNet& model, const TrainBatch& batch) {
    size_t n = batch.clean.size();
    if (n == 0) throw InputError("cfm_loss: empty batch");
    if (batch.noise.size() != n || batch.conditions.size() != n || batch.times.size() != n)
        throw InputError("cfm_loss: batch sequences differ in length");
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        float t = batch.times[i];
        if (t <= 0.0f || t >= 1.0f) throw InputError("cfm_loss: t must lie strictly in (0,1)");
        LatentGrid xt = interpolate(batch.clean[i], batch.noise[i], t);
        LatentGrid target = target_velocity(batch.clean[i], batch.noise[i]);
        LatentGrid pred = model.forward(xt, t, batch.conditions[i]);
        double s = 0.0;
        for (size_t j = 0; j < pred.values.size(); ++j) {
            double e = pred.values[j] - target.values[j];
            s += e * e;
        }
        acc += s / static_cast<double>(pred.values.size());
    }
    return static_cast<float>(acc / static_cast<double>(n));
}

TrainResult train(net::VelocityNet& model, const std::vector<TrainSample>& data,
                  const TrainConfig& cfg) {
    if (data.empty()) throw InputError("train: empty dataset");
    TrainResult result;
    if (cfg.epochs == 0) return result;

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    std::uniform_real_distribution<float> unif(0.0f, 1.0f);
    std::uniform_real_distribution<float> beta_draw(0.5f, 4.0f);

    const auto& mc = model.config();
    std::vector<float> m(model.params().size(), 0.0f);
    std::vector<float> v(model.params().size(), 0.0f);
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    long step = 0;

    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int epoch_batches = 0;
        for (size_t base = 0; base < order.size(); base += cfg.batch_size) {
            size_t lim = std::min(order.size(), base + cfg.batch_size);
            model.zero_grads();
            double batch_loss = 0.0;
            for (size_t i = base; i < lim; ++i) {
                const TrainSample& s = data[order[i]];
                LatentGrid x1(s.x0.height, s.x0.width, s.x0.channels);
                for (float& val : x1.values) val = noise(rng);
                // keep t away from the exact endpoints
                float t = 0.001f + 0.998f * unif(rng);
                int cond = unif(rng) < cfg.cond_dropout ? mc.null_cond() : s.cond;
                net::AdapterDrive drive;
                const net::AdapterDrive* adapter = nullptr;
                float use_adapter = unif(rng);
                float bdr1 = beta_draw(rng), bdr2 = beta_draw(rng);
                if (use_adapter < cfg.adapter_prob && s.adapter_map.size() > 0) {
                    drive.input = s.adapter_map;
                    drive.beta1 = bdr1;
                    drive.beta2 = bdr2;
                    adapter = &drive;
                }
                LatentGrid xt = interpolate(s.x0, x1, t);
                LatentGrid target = target_velocity(s.x0, x1);
                batch_loss += model.train_step(xt, t, cond, target, adapter);
            }
            size_t count = lim - base;
            batch_loss /= static_cast<double>(count);
            if (!std::isfinite(batch_loss))
                throw NumericError("train: loss diverged (non-finite); reduce the learning rate");
            ++step;
            float lr_t = cfg.lr * std::sqrt(1.0f - std::pow(b2, static_cast<float>(step))) /
                         (1.0f - std::pow(b1, static_cast<float>(step)));
            auto& P = model.params();
            auto& G = model.grads();
            float inv_count = 1.0f / static_cast<float>(count);
            for (size_t j = 0; j < P.size(); ++j) {
                float g = G[j] * inv_count;
                m[j] = b1 * m[j] + (1.0f - b1) * g;
                v[j] = b2 * v[j] + (1.0f - b2) * g * g;
                P[j] -= lr_t * m[j] / (std::sqrt(v[j]) + eps);
            }
            result.loss_history.push_back(static_cast<float>(batch_loss));
            epoch_loss += batch_loss;
            ++epoch_batches;
        }
        result.final_loss = static_cast<float>(epoch_loss / epoch_batches);
    }
    return result;
}

}  // namespace rfedit::flow
