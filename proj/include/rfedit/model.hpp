#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "rfedit/core.hpp"

namespace rfedit::net {

struct ModelConfig {
    int grid_h = 8;
    int grid_w = 8;
    int channels = 192;  // per-token input/output dimension
    int blocks = 6;
    int heads = 4;
    int head_dim = 16;
    int mlp_mult = 4;
    int cond_vocab = 12;  // null (unconditional) id == cond_vocab
    std::vector<int> injection_blocks{4, 5};

    // Condition register rows appended to the token sequence; several
    // identical rows give the condition enough attention mass to compete
    // with the image tokens.
    static constexpr int kRegisterRows = 4;

    int d_model() const { return heads * head_dim; }
    int tokens() const { return grid_h * grid_w; }
    int seq_len() const { return tokens() + kRegisterRows; }
    int null_cond() const { return cond_vocab; }
    void validate() const;
};

enum class HookKind { Passthrough, Capture, InjectFull, InjectBlended };

struct AttentionHook {
    HookKind kind = HookKind::Passthrough;
    TokenMap mask;  // only for InjectBlended, values in [0,1]
};

using HookSet = std::map<int, AttentionHook>;  // block index -> hook

// One block's captured key/value tensors, [tokens * heads * head_dim].
struct KVSlice {
    std::vector<float> k;
    std::vector<float> v;
};

// block index -> slice, for a single step.
using StepKV = std::map<int, KVSlice>;

// Write-once store over (step, block).
class KVCache {
public:
    void put(int step, int block, KVSlice slice);
    const KVSlice* find(int step, int block) const;
    const StepKV* step_slices(int step) const;
    bool complete(int steps, const std::vector<int>& blocks) const;
    size_t size() const { return entries_.size(); }

private:
    std::map<int, StepKV> entries_;
};

struct AdapterDrive {
    TokenMap input;  // per-token scalar, [0,1]
    float beta1 = 0.0f;
    float beta2 = 0.0f;
};

// Small pre-LN transformer over spatial patch tokens predicting the
// transport velocity. Forward supports per-block attention hooks for KV
// capture / injection; training uses a hand-written backward pass.
class VelocityNet {
public:
    explicit VelocityNet(const ModelConfig& cfg);

    void init_params(uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::vector<float>& params() { return params_; }
    const std::vector<float>& params() const { return params_; }
    std::vector<float>& grads() { return grads_; }
    void zero_grads();

    LatentGrid forward(const LatentGrid& x, float t, int cond,
                       const HookSet& hooks = {},
                       const StepKV* external_kv = nullptr,
                       StepKV* captured = nullptr,
                       const AdapterDrive* adapter = nullptr) const;

    // Forward + squared-error backward against a target velocity;
    // returns the per-element mean squared error and accumulates grads.
    float train_step(const LatentGrid& x, float t, int cond, const LatentGrid& target,
                     const AdapterDrive* adapter = nullptr);

    void save(const std::filesystem::path& path) const;
    static VelocityNet load(const std::filesystem::path& path);

private:
    struct Workspace;
    void forward_impl(const LatentGrid& x, float t, int cond, const HookSet& hooks,
                      const StepKV* external_kv, StepKV* captured, const AdapterDrive* adapter,
                      Workspace& ws, LatentGrid& out) const;
    void backward_impl(const LatentGrid& x, float t, int cond, const AdapterDrive* adapter,
                       const Workspace& ws, const std::vector<float>& dout);

    ModelConfig cfg_;
    std::vector<float> params_;
    std::vector<float> grads_;

    // Parameter layout offsets (checkpoint order).
    struct Offsets;
    std::shared_ptr<const Offsets> off_;
};

// Per-token convex blend: tgt <- m * tgt + (1-m) * inv, mask broadcast over
// the per_token stride. Exact copies at mask values 0 and 1.
void blend_tokens(const TokenMap& mask, std::vector<float>& tgt, const std::vector<float>& inv,
                  int per_token);

// Scaled dot-product attention with externally supplied keys/values.
// q, k, v are [tokens * heads * head_dim]; output layout matches q.
std::vector<float> attention_with_kv(const std::vector<float>& q, const std::vector<float>& k,
                                     const std::vector<float>& v, int tokens, int heads,
                                     int head_dim);

// Classifier-free guidance combination: uncond + g * (cond - uncond).
LatentGrid apply_guidance(const LatentGrid& v_cond, const LatentGrid& v_uncond, float g);

// Per-token mean of central-difference gradient magnitude of the first
// image channel, max-normalized to [0,1]. Constant images map to zero.
TokenMap adapter_input_from_image(const Image& img, int grid_h, int grid_w);

}  // namespace rfedit::net
