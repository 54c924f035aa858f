#include "rfedit/edit.hpp"

#include <algorithm>
#include <sstream>

namespace rfedit::edit {

void EditSchedule::validate() const {
    if (steps <= 0) throw ConfigError("schedule: steps must be positive");
    if (k_front < 0 || k_tail < 0 || k_front + k_tail > steps)
        throw ConfigError("schedule: k_front + k_tail must not exceed steps");
    if (tau <= 0.0f || tau >= 1.0f) throw ConfigError("schedule: tau must lie in (0,1)");
    if (sigma < 0.0f) throw ConfigError("schedule: sigma must be non-negative");
    if (guidance < 0.0f) throw ConfigError("schedule: guidance must be non-negative");
    if (!(adapter_lo >= 0.0f && adapter_lo < adapter_hi && adapter_hi <= 1.0f))
        throw ConfigError("schedule: adapter interval must satisfy 0 <= lo < hi <= 1");
}

std::string EditSchedule::id() const {
    std::ostringstream os;
    os << "N" << steps << "_kf" << k_front << "_kt" << k_tail << "_g" << guidance << "_tau" << tau
       << (solver == solver::SolverKind::Euler ? "_euler" : "_rk2")
       << (adapter_enabled ? "_ad" : "_noad");
    return os.str();
}

Stage stage_for_step(int step, const EditSchedule& sched) {
    if (step < 0 || step >= sched.steps) throw InputError("stage_for_step: step out of range");
    if (step < sched.k_front) return Stage::Stage1;
    if (step >= sched.steps - sched.k_tail) return Stage::Stage3;
    return Stage::Stage2;
}

net::KVSlice blend_kv(const TokenMap& mask, const net::KVSlice& tgt, const net::KVSlice& inv) {
    if (tgt.k.size() != inv.k.size() || tgt.v.size() != inv.v.size())
        throw InputError("blend_kv: tensor size mismatch");
    if (mask.size() == 0 || tgt.k.size() % mask.size() != 0)
        throw InputError("blend_kv: mask does not tile the tensors");
    int per_token = static_cast<int>(tgt.k.size() / mask.size());
    net::KVSlice out = tgt;
    net::blend_tokens(mask, out.k, inv.k, per_token);
    net::blend_tokens(mask, out.v, inv.v, per_token);
    return out;
}

LatentGrid encode_latent(const Image& img, int grid_h, int grid_w) {
    if (img.height % grid_h || img.width % grid_w)
        throw InputError("encode_latent: image not divisible into the token grid");
    int ph = img.height / grid_h, pw = img.width / grid_w;
    LatentGrid out(grid_h, grid_w, ph * pw * img.channels);
    for (int ty = 0; ty < grid_h; ++ty)
        for (int tx = 0; tx < grid_w; ++tx) {
            float* tok = out.token(ty * grid_w + tx);
            int at = 0;
            for (int py = 0; py < ph; ++py)
                for (int px = 0; px < pw; ++px)
                    for (int c = 0; c < img.channels; ++c)
                        tok[at++] = img.at(ty * ph + py, tx * pw + px, c);
        }
    return out;
}

Image decode_image(const LatentGrid& latent, int img_channels) {
    if (latent.channels % img_channels)
        throw InputError("decode_image: channels not divisible by image channels");
    int per_patch = latent.channels / img_channels;
    int patch = static_cast<int>(std::lround(std::sqrt(static_cast<double>(per_patch))));
    if (patch * patch != per_patch) throw InputError("decode_image: non-square patch");
    Image img(latent.height * patch, latent.width * patch, img_channels);
    for (int ty = 0; ty < latent.height; ++ty)
        for (int tx = 0; tx < latent.width; ++tx) {
            const float* tok = latent.token(ty * latent.width + tx);
            int at = 0;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < img_channels; ++c)
                        img.at(ty * patch + py, tx * patch + px, c) =
                            std::clamp(tok[at++], 0.0f, 1.0f);
        }
    return img;
}

namespace {

struct GuidedEvaluator {
    const net::VelocityNet& model;
    int cond;
    float guidance;

    // The conditional and unconditional branches keep separate KV streams:
    // injecting the conditional capture into the unconditional forward would
    // make replay irreproducible even on identical latents.
    LatentGrid eval(const LatentGrid& x, float t, const net::HookSet& hooks = {},
                    const net::StepKV* ext_c = nullptr, net::StepKV* captured_c = nullptr,
                    const net::AdapterDrive* adapter = nullptr,
                    const net::StepKV* ext_u = nullptr, net::StepKV* captured_u = nullptr) const {
        LatentGrid v_c = model.forward(x, t, cond, hooks, ext_c, captured_c, adapter);
        if (guidance == 1.0f) return v_c;
        LatentGrid v_u =
            model.forward(x, t, model.config().null_cond(), hooks, ext_u, captured_u, adapter);
        return net::apply_guidance(v_c, v_u, guidance);
    }
};

}  // namespace

EditResult run_edit(const net::VelocityNet& model, const Image& source, int c_src, int c_tgt,
                    const EditSchedule& sched, uint64_t seed, MaskOverride override_mask) {
    sched.validate();
    const auto& mc = model.config();
    if (c_src < 0 || c_src > mc.cond_vocab || c_tgt < 0 || c_tgt > mc.cond_vocab)
        throw ConfigError("run_edit: condition id out of range");
    std::vector<int> inj = sched.injection_blocks.empty() ? mc.injection_blocks
                                                          : sched.injection_blocks;
    for (int b : inj)
        if (b < 0 || b >= mc.blocks) throw ConfigError("run_edit: injection block out of range");

    const int N = sched.steps;
    const auto grid = solver::TimeGrid::uniform(N);
    LatentGrid x0 = encode_latent(source, mc.grid_h, mc.grid_w);
    if (x0.channels != mc.channels) throw ConfigError("run_edit: image does not fit the model");

    EditResult res;
    long probe_nfe = 0;

    // ----- Phase A: inversion under c_src, capturing KV and velocities.
    // Captures are keyed at half-grid resolution, key = 2g for grid point g
    // and key = 2s + 1 for the midpoint of inversion step s, plus one extra
    // capture at g = N. Denoising step s replays key 2(N - s) at its start
    // and key 2(N - s) - 1 at its midpoint, so every evaluation of the
    // second-order solver sees the KV captured at the matching time.
    GuidedEvaluator src_eval{model, c_src, sched.guidance};
    net::KVCache inv_kv, inv_kv_u;
    std::vector<LatentGrid> src_velocity(N + 1);
    auto capture_at = [&](const LatentGrid& x, float t, int key) {
        net::HookSet hooks;
        for (int b : inj) hooks[b].kind = net::HookKind::Capture;
        net::StepKV cap_c, cap_u;
        LatentGrid v = src_eval.eval(x, t, hooks, nullptr, &cap_c, nullptr, nullptr, &cap_u);
        for (auto& [b, slice] : cap_c) inv_kv.put(key, b, std::move(slice));
        for (auto& [b, slice] : cap_u) inv_kv_u.put(key, b, std::move(slice));
        return v;
    };
    auto inv_fn = [&](const LatentGrid& x, float t, int step, bool primary) {
        LatentGrid v = capture_at(x, t, primary ? 2 * step : 2 * step + 1);
        if (primary) src_velocity[step] = v;
        return v;
    };
    res.inversion = solver::integrate(x0, grid, solver::Direction::Inversion, c_src, sched.solver,
                                      inv_fn);
    LatentGrid x_noise = res.inversion.final_latent();
    src_velocity[N] = capture_at(x_noise, 1.0f, 2 * N);
    probe_nfe += 1;
    res.inversion.kv = inv_kv;

    // ----- Phase B: denoising under c_tgt with scheduled injection.
    GuidedEvaluator tgt_eval{model, c_tgt, sched.guidance};
    std::vector<TokenMap> window;  // causal Stage-2 fusion window
    TokenMap zeros(mc.grid_h, mc.grid_w, 0.0f);
    TokenMap ones(mc.grid_h, mc.grid_w, 1.0f);
    tdm::EditMask final_mask;
    final_mask.soft = zeros;
    final_mask.binary = zeros;
    final_mask.tau = sched.tau;
    final_mask.sigma = sched.sigma;

    int cur_step = -1;
    TokenMap cur_mask = zeros;
    auto den_fn = [&](const LatentGrid& z, float t, int step, bool primary) {
        if (primary && step != cur_step) {
            cur_step = step;
            Stage stage = stage_for_step(step, sched);
            if (stage == Stage::Stage1) {
                cur_mask = zeros;
            } else if (stage == Stage::Stage3) {
                cur_mask = ones;
            } else {
                // plain target-conditioned probe, per-channel trajectory divergence
                LatentGrid v_probe = tgt_eval.eval(z, t);
                probe_nfe += 1;
                TokenMap div = tdm::compute_divergence(v_probe, src_velocity[N - step]);
                res.divergence_maps.push_back(div);
                window.push_back(tdm::minmax_normalize(div));
                TokenMap fused = tdm::softmax_fuse(window);
                TokenMap soft = tdm::gaussian_smooth(fused, sched.sigma);
                final_mask = tdm::binarize(soft, sched.tau);
                final_mask.sigma = sched.sigma;
                cur_mask = final_mask.binary;
            }
            if (override_mask == MaskOverride::ForceZeros) cur_mask = zeros;
            if (override_mask == MaskOverride::ForceOnes) cur_mask = ones;
        }
        net::HookSet hooks;
        for (int b : inj) {
            hooks[b].kind = net::HookKind::InjectBlended;
            hooks[b].mask = cur_mask;
        }
        int key = primary ? 2 * (N - step) : 2 * (N - step) - 1;
        const net::StepKV* ext = inv_kv.step_slices(key);
        const net::StepKV* ext_u = inv_kv_u.step_slices(key);
        if (!ext || (sched.guidance != 1.0f && !ext_u))
            throw ConfigError("run_edit: missing inversion KV for step");
        net::AdapterDrive drive;
        const net::AdapterDrive* adapter = nullptr;
        if (sched.adapter_enabled) {
            float progress = N > 1 ? static_cast<float>(step) / (N - 1) : 0.0f;
            if (progress >= sched.adapter_lo && progress <= sched.adapter_hi) {
                drive.input = net::adapter_input_from_image(source, mc.grid_h, mc.grid_w);
                drive.beta1 = sched.beta1;
                drive.beta2 = sched.beta2;
                adapter = &drive;
            }
        }
        return tgt_eval.eval(z, t, hooks, ext, nullptr, adapter, ext_u, nullptr);
    };
    res.denoising = solver::integrate(x_noise, grid, solver::Direction::Denoising, c_tgt,
                                      sched.solver, den_fn);

    res.edited_latent = res.denoising.final_latent();
    if (!res.edited_latent.all_finite())
        throw NumericError("run_edit: trajectory diverged to non-finite values");
    res.edited_image = decode_image(res.edited_latent, source.channels);
    res.final_mask = final_mask;
    res.total_nfe = res.inversion.total_nfe + res.denoising.total_nfe + probe_nfe;

    auto& man = res.manifest;
    man["steps"] = std::to_string(N);
    man["k_front"] = std::to_string(sched.k_front);
    man["k_tail"] = std::to_string(sched.k_tail);
    man["tau"] = std::to_string(sched.tau);
    man["sigma"] = std::to_string(sched.sigma);
    man["guidance"] = std::to_string(sched.guidance);
    man["beta1"] = std::to_string(sched.beta1);
    man["beta2"] = std::to_string(sched.beta2);
    man["adapter_interval"] =
        std::to_string(sched.adapter_lo) + "," + std::to_string(sched.adapter_hi);
    man["adapter_enabled"] = sched.adapter_enabled ? "1" : "0";
    man["solver"] = sched.solver == solver::SolverKind::Euler ? "euler" : "second_order";
    man["seed"] = std::to_string(seed);
    man["c_src"] = std::to_string(c_src);
    man["c_tgt"] = std::to_string(c_tgt);
    man["source_velocities"] = "replayed_from_inversion";
    man["nfe_inversion"] = std::to_string(res.inversion.total_nfe);
    man["nfe_denoising"] = std::to_string(res.denoising.total_nfe);
    man["nfe_probes"] = std::to_string(probe_nfe);
    man["nfe_total"] = std::to_string(res.total_nfe);
    {
        std::ostringstream os;
        os << "stage1=[0," << sched.k_front << ") stage2=[" << sched.k_front << ","
           << (N - sched.k_tail) << ") stage3=[" << (N - sched.k_tail) << "," << N << ")";
        man["stage_boundaries"] = os.str();
    }
    return res;
}

}  // namespace rfedit::edit
