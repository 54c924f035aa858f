#include "rfedit/model.hpp"

#include <cstring>
#include <fstream>

#include "rfedit/io.hpp"

namespace rfedit::net {

namespace {
constexpr float kLnEps = 1e-5f;
constexpr char kCkptMagic[8] = {'R', 'F', 'E', 'D', 'I', 'T', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void ModelConfig::validate() const {
    if (grid_h <= 0 || grid_w <= 0 || channels <= 0) throw ConfigError("model: bad grid shape");
    if (blocks <= 0 || heads <= 0 || head_dim <= 0) throw ConfigError("model: bad block shape");
    if (cond_vocab <= 0) throw ConfigError("model: bad condition vocabulary");
    for (int b : injection_blocks)
        if (b < 0 || b >= blocks) throw ConfigError("model: injection block out of range");
}

void KVCache::put(int step, int block, KVSlice slice) {
    auto& per_step = entries_[step];
    if (per_step.count(block)) throw InputError("KVCache: entry already recorded");
    per_step.emplace(block, std::move(slice));
}

const KVSlice* KVCache::find(int step, int block) const {
    auto it = entries_.find(step);
    if (it == entries_.end()) return nullptr;
    auto jt = it->second.find(block);
    return jt == it->second.end() ? nullptr : &jt->second;
}

const StepKV* KVCache::step_slices(int step) const {
    auto it = entries_.find(step);
    return it == entries_.end() ? nullptr : &it->second;
}

bool KVCache::complete(int steps, const std::vector<int>& blocks) const {
    for (int s = 0; s < steps; ++s)
        for (int b : blocks)
            if (!find(s, b)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Parameter layout

struct VelocityNet::Offsets {
    struct Block {
        size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        size_t ln2_g, ln2_b, w1, b1, w2, b2, ad1, ad2;
    };
    size_t w_in, b_in, pos, cond_emb;
    std::vector<Block> blk;
    size_t lnf_g, lnf_b, w_out, b_out;
    size_t total;

    explicit Offsets(const ModelConfig& c) {
        size_t at = 0;
        auto take = [&](size_t n) {
            size_t o = at;
            at += n;
            return o;
        };
        const size_t d = c.d_model(), C = c.channels, T = c.tokens(), md = d * c.mlp_mult;
        w_in = take(C * d);
        b_in = take(d);
        pos = take(T * d);
        cond_emb = take(static_cast<size_t>(c.cond_vocab + 1) * d);
        blk.resize(c.blocks);
        for (auto& b : blk) {
            b.ln1_g = take(d);
            b.ln1_b = take(d);
            b.wq = take(d * d);
            b.bq = take(d);
            b.wk = take(d * d);
            b.bk = take(d);
            b.wv = take(d * d);
            b.bv = take(d);
            b.wo = take(d * d);
            b.bo = take(d);
            b.ln2_g = take(d);
            b.ln2_b = take(d);
            b.w1 = take(d * md);
            b.b1 = take(md);
            b.w2 = take(md * d);
            b.b2 = take(d);
            b.ad1 = take(d);
            b.ad2 = take(d);
        }
        lnf_g = take(d);
        lnf_b = take(d);
        w_out = take(d * C);
        b_out = take(C);
        total = at;
    }
};

VelocityNet::VelocityNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    off_ = std::make_shared<const Offsets>(cfg_);
    params_.assign(off_->total, 0.0f);
    grads_.assign(off_->total, 0.0f);
}

void VelocityNet::init_params(uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nrm(0.0f, 0.02f);
    const auto& o = *off_;
    auto fill_nrm = [&](size_t off, size_t n) {
        for (size_t i = 0; i < n; ++i) params_[off + i] = nrm(rng);
    };
    auto fill_val = [&](size_t off, size_t n, float v) {
        for (size_t i = 0; i < n; ++i) params_[off + i] = v;
    };
    const size_t d = cfg_.d_model(), C = cfg_.channels, T = cfg_.tokens(),
                 md = d * cfg_.mlp_mult;
    fill_nrm(o.w_in, C * d);
    fill_val(o.b_in, d, 0.0f);
    fill_nrm(o.pos, T * d);
    fill_nrm(o.cond_emb, static_cast<size_t>(cfg_.cond_vocab + 1) * d);
    for (const auto& b : o.blk) {
        fill_val(b.ln1_g, d, 1.0f);
        fill_val(b.ln1_b, d, 0.0f);
        fill_nrm(b.wq, d * d);
        fill_val(b.bq, d, 0.0f);
        fill_nrm(b.wk, d * d);
        fill_val(b.bk, d, 0.0f);
        fill_nrm(b.wv, d * d);
        fill_val(b.bv, d, 0.0f);
        fill_nrm(b.wo, d * d);
        fill_val(b.bo, d, 0.0f);
        fill_val(b.ln2_g, d, 1.0f);
        fill_val(b.ln2_b, d, 0.0f);
        fill_nrm(b.w1, d * md);
        fill_val(b.b1, md, 0.0f);
        fill_nrm(b.w2, md * d);
        fill_val(b.b2, d, 0.0f);
        fill_val(b.ad1, d, 0.0f);
        fill_val(b.ad2, d, 0.0f);
    }
    fill_val(o.lnf_g, d, 1.0f);
    fill_val(o.lnf_b, d, 0.0f);
    // Zero-init output projection: the untrained field starts at zero.
    fill_val(o.w_out, d * C, 0.0f);
    fill_val(o.b_out, C, 0.0f);
}

void VelocityNet::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0f); }

// ---------------------------------------------------------------------------
// Shared kernels

namespace {

// y[T x out] = x[T x in] * W[in x out] + b
void linear_fwd(const float* x, const float* W, const float* b, float* y, int T, int in,
                int out) {
    for (int t = 0; t < T; ++t) {
        const float* xi = x + static_cast<size_t>(t) * in;
        float* yi = y + static_cast<size_t>(t) * out;
        for (int j = 0; j < out; ++j) yi[j] = b ? b[j] : 0.0f;
        for (int i = 0; i < in; ++i) {
            float xv = xi[i];
            if (xv == 0.0f) continue;
            const float* wr = W + static_cast<size_t>(i) * out;
            for (int j = 0; j < out; ++j) yi[j] += xv * wr[j];
        }
    }
}

void linear_bwd(const float* x, const float* W, const float* dy, float* dx, float* dW, float* db,
                int T, int in, int out) {
    for (int t = 0; t < T; ++t) {
        const float* xi = x + static_cast<size_t>(t) * in;
        const float* dyi = dy + static_cast<size_t>(t) * out;
        if (db)
            for (int j = 0; j < out; ++j) db[j] += dyi[j];
        for (int i = 0; i < in; ++i) {
            const float* wr = W + static_cast<size_t>(i) * out;
            float* dwr = dW + static_cast<size_t>(i) * out;
            float acc = 0.0f;
            float xv = xi[i];
            for (int j = 0; j < out; ++j) {
                dwr[j] += xv * dyi[j];
                acc += wr[j] * dyi[j];
            }
            if (dx) dx[static_cast<size_t>(t) * in + i] += acc;
        }
    }
}

void layernorm_fwd(const float* x, const float* g, const float* b, float* y, float* xhat,
                   float* istd, int T, int d) {
    for (int t = 0; t < T; ++t) {
        const float* xi = x + static_cast<size_t>(t) * d;
        float mu = 0.0f;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        float var = 0.0f;
        for (int j = 0; j < d; ++j) {
            float c = xi[j] - mu;
            var += c * c;
        }
        var /= d;
        float is = 1.0f / std::sqrt(var + kLnEps);
        istd[t] = is;
        float* xh = xhat + static_cast<size_t>(t) * d;
        float* yi = y + static_cast<size_t>(t) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mu) * is;
            yi[j] = g[j] * xh[j] + b[j];
        }
    }
}

void layernorm_bwd(const float* dy, const float* g, const float* xhat, const float* istd,
                   float* dx, float* dg, float* db, int T, int d) {
    for (int t = 0; t < T; ++t) {
        const float* dyi = dy + static_cast<size_t>(t) * d;
        const float* xh = xhat + static_cast<size_t>(t) * d;
        float m1 = 0.0f, m2 = 0.0f;
        for (int j = 0; j < d; ++j) {
            float dxh = dyi[j] * g[j];
            m1 += dxh;
            m2 += dxh * xh[j];
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
        }
        m1 /= d;
        m2 /= d;
        float* dxi = dx + static_cast<size_t>(t) * d;
        for (int j = 0; j < d; ++j) {
            float dxh = dyi[j] * g[j];
            dxi[j] += istd[t] * (dxh - m1 - xh[j] * m2);
        }
    }
}

void time_embedding(float t, int d, float* out) {
    int half = d / 2;
    for (int j = 0; j < half; ++j) {
        float freq = std::exp(-std::log(10000.0f) * static_cast<float>(j) / half);
        float a = t * 1000.0f * freq;
        out[2 * j] = std::sin(a);
        out[2 * j + 1] = std::cos(a);
    }
    if (d % 2) out[d - 1] = 0.0f;
}

// softmax(q k^T / sqrt(hd)) v over [tokens x heads x head_dim] tensors;
// probs (optional) stores heads x T x T attention weights.
void attention_core(const float* q, const float* k, const float* v, float* out, float* probs,
                    int T, int H, int hd) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<float> row(T);
    for (int h = 0; h < H; ++h) {
        for (int i = 0; i < T; ++i) {
            const float* qi = q + (static_cast<size_t>(i) * H + h) * hd;
            float mx = -1e30f;
            for (int j = 0; j < T; ++j) {
                const float* kj = k + (static_cast<size_t>(j) * H + h) * hd;
                float s = 0.0f;
                for (int u = 0; u < hd; ++u) s += qi[u] * kj[u];
                row[j] = s * scale;
                mx = std::max(mx, row[j]);
            }
            float denom = 0.0f;
            for (int j = 0; j < T; ++j) {
                row[j] = std::exp(row[j] - mx);
                denom += row[j];
            }
            float* oi = out + (static_cast<size_t>(i) * H + h) * hd;
            std::fill(oi, oi + hd, 0.0f);
            for (int j = 0; j < T; ++j) {
                float a = row[j] / denom;
                if (probs) probs[(static_cast<size_t>(h) * T + i) * T + j] = a;
                const float* vj = v + (static_cast<size_t>(j) * H + h) * hd;
                for (int u = 0; u < hd; ++u) oi[u] += a * vj[u];
            }
        }
    }
}

}  // namespace

void blend_tokens(const TokenMap& mask, std::vector<float>& tgt, const std::vector<float>& inv,
                  int per_token) {
    if (tgt.size() != inv.size()) throw InputError("blend_tokens: tensor size mismatch");
    if (mask.size() * static_cast<size_t>(per_token) != tgt.size())
        throw InputError("blend_tokens: mask does not cover the token grid");
    for (size_t tok = 0; tok < mask.size(); ++tok) {
        float m = mask.values[tok];
        if (m < 0.0f || m > 1.0f) throw InputError("blend_tokens: mask value outside [0,1]");
        if (m == 1.0f) continue;  // pure target, keep bitwise
        float* t = tgt.data() + tok * per_token;
        const float* s = inv.data() + tok * per_token;
        if (m == 0.0f) {
            std::copy(s, s + per_token, t);
        } else {
            for (int j = 0; j < per_token; ++j) t[j] = m * t[j] + (1.0f - m) * s[j];
        }
    }
}

std::vector<float> attention_with_kv(const std::vector<float>& q, const std::vector<float>& k,
                                     const std::vector<float>& v, int tokens, int heads,
                                     int head_dim) {
    size_t n = static_cast<size_t>(tokens) * heads * head_dim;
    if (q.size() != n || k.size() != n || v.size() != n)
        throw InputError("attention_with_kv: tensor size does not match tokens*heads*head_dim");
    std::vector<float> out(n);
    attention_core(q.data(), k.data(), v.data(), out.data(), nullptr, tokens, heads, head_dim);
    return out;
}

LatentGrid apply_guidance(const LatentGrid& v_cond, const LatentGrid& v_uncond, float g) {
    require_same_shape(v_cond, v_uncond, "apply_guidance");
    LatentGrid out = v_uncond;
    for (size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = v_uncond.values[i] + g * (v_cond.values[i] - v_uncond.values[i]);
    return out;
}

TokenMap adapter_input_from_image(const Image& img, int grid_h, int grid_w) {
    std::vector<float> mag(static_cast<size_t>(img.height) * img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            int xm = std::max(x - 1, 0), xp = std::min(x + 1, img.width - 1);
            int ym = std::max(y - 1, 0), yp = std::min(y + 1, img.height - 1);
            float gx = 0.5f * (img.at(y, xp, 0) - img.at(y, xm, 0));
            float gy = 0.5f * (img.at(yp, x, 0) - img.at(ym, x, 0));
            mag[static_cast<size_t>(y) * img.width + x] = std::sqrt(gx * gx + gy * gy);
        }
    TokenMap map(grid_h, grid_w);
    int ph = img.height / grid_h, pw = img.width / grid_w;
    float mx = 0.0f;
    for (int ty = 0; ty < grid_h; ++ty)
        for (int tx = 0; tx < grid_w; ++tx) {
            float acc = 0.0f;
            for (int y = ty * ph; y < (ty + 1) * ph; ++y)
                for (int x = tx * pw; x < (tx + 1) * pw; ++x)
                    acc += mag[static_cast<size_t>(y) * img.width + x];
            map.at(ty, tx) = acc / (ph * pw);
            mx = std::max(mx, map.at(ty, tx));
        }
    if (mx > 0.0f)
        for (float& v : map.values) v /= mx;
    return map;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct VelocityNet::Workspace {
    std::vector<float> emb;        // T x d
    std::vector<float> time_emb;   // d
    struct BlockActs {
        std::vector<float> n1, xhat1, istd1;
        std::vector<float> q, k, v;       // current-pass projections
        std::vector<float> att, probs;    // pre-Wo attention output, probs
        std::vector<float> h2, xhat2, istd2, n2;
        std::vector<float> mlp_pre;       // pre-ReLU
        std::vector<float> h3;            // block output
        bool injected = false;
    };
    std::vector<BlockActs> blk;
    std::vector<float> xhatf, istdf, nf;
};

void VelocityNet::forward_impl(const LatentGrid& x, float t, int cond, const HookSet& hooks,
                               const StepKV* external_kv, StepKV* captured,
                               const AdapterDrive* adapter, Workspace& ws,
                               LatentGrid& out) const {
    if (t < 0.0f || t > 1.0f) throw InputError("forward: t outside [0,1]");
    if (x.height != cfg_.grid_h || x.width != cfg_.grid_w || x.channels != cfg_.channels)
        throw InputError("forward: latent grid does not match model config");
    if (cond < 0 || cond > cfg_.cond_vocab) throw InputError("forward: condition id out of range");
    if (adapter && (adapter->input.height != cfg_.grid_h || adapter->input.width != cfg_.grid_w))
        throw InputError("forward: adapter input grid mismatch");

    const int T = cfg_.tokens(), d = cfg_.d_model(), C = cfg_.channels, H = cfg_.heads,
              hd = cfg_.head_dim, md = d * cfg_.mlp_mult;
    // The condition enters only through register rows appended to the
    // sequence; image tokens see it exclusively via attention, so KV
    // injection can gate its influence the way it gates everything else.
    const int S = cfg_.seq_len();
    const auto& o = *off_;
    const float* P = params_.data();

    ws.emb.assign(static_cast<size_t>(S) * d, 0.0f);
    ws.time_emb.assign(d, 0.0f);
    time_embedding(t, d, ws.time_emb.data());
    linear_fwd(x.values.data(), P + o.w_in, P + o.b_in, ws.emb.data(), T, C, d);
    const float* ce = P + o.cond_emb + static_cast<size_t>(cond) * d;
    for (int tok = 0; tok < T; ++tok) {
        float* e = ws.emb.data() + static_cast<size_t>(tok) * d;
        const float* pe = P + o.pos + static_cast<size_t>(tok) * d;
        for (int j = 0; j < d; ++j) e[j] += pe[j] + ws.time_emb[j];
    }
    for (int r = T; r < S; ++r) {
        float* e = ws.emb.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) e[j] = ce[j] + ws.time_emb[j];
    }

    ws.blk.resize(cfg_.blocks);
    const std::vector<float>* h_in = &ws.emb;
    for (int b = 0; b < cfg_.blocks; ++b) {
        auto& a = ws.blk[b];
        const auto& ob = o.blk[b];
        a.n1.assign(static_cast<size_t>(S) * d, 0.0f);
        a.xhat1.assign(static_cast<size_t>(S) * d, 0.0f);
        a.istd1.assign(S, 0.0f);
        layernorm_fwd(h_in->data(), P + ob.ln1_g, P + ob.ln1_b, a.n1.data(), a.xhat1.data(),
                      a.istd1.data(), S, d);
        a.q.assign(static_cast<size_t>(S) * d, 0.0f);
        a.k.assign(static_cast<size_t>(S) * d, 0.0f);
        a.v.assign(static_cast<size_t>(S) * d, 0.0f);
        linear_fwd(a.n1.data(), P + ob.wq, P + ob.bq, a.q.data(), S, d, d);
        linear_fwd(a.n1.data(), P + ob.wk, P + ob.bk, a.k.data(), S, d, d);
        linear_fwd(a.n1.data(), P + ob.wv, P + ob.bv, a.v.data(), S, d, d);

        HookKind kind = HookKind::Passthrough;
        const AttentionHook* hook = nullptr;
        if (auto it = hooks.find(b); it != hooks.end()) {
            hook = &it->second;
            kind = hook->kind;
        }
        if (kind == HookKind::Capture && captured) {
            KVSlice slice;
            slice.k = a.k;
            slice.v = a.v;
            (*captured)[b] = std::move(slice);
        }
        const float* keff = a.k.data();
        const float* veff = a.v.data();
        std::vector<float> kb, vb;
        if (kind == HookKind::InjectFull || kind == HookKind::InjectBlended) {
            a.injected = true;
            const KVSlice* ext = nullptr;
            if (external_kv) {
                auto jt = external_kv->find(b);
                if (jt != external_kv->end()) ext = &jt->second;
            }
            if (!ext) throw ConfigError("forward: injecting block " + std::to_string(b) +
                                        " has no external KV");
            if (ext->k.size() != a.k.size() || ext->v.size() != a.v.size())
                throw InputError("forward: external KV shape mismatch");
            if (kind == HookKind::InjectFull) {
                keff = ext->k.data();
                veff = ext->v.data();
            } else {
                if (hook->mask.height != cfg_.grid_h || hook->mask.width != cfg_.grid_w)
                    throw InputError("forward: blend mask shape mismatch");
                // Image rows blend per token; register rows blend with the
                // mask maximum, so an all-zeros mask anchors the condition
                // to the source and any released token frees it.
                TokenMap full(1, S);
                float mmax = 0.0f;
                for (size_t i = 0; i < hook->mask.size(); ++i) {
                    full.values[i] = hook->mask.values[i];
                    mmax = std::max(mmax, hook->mask.values[i]);
                }
                for (int r = T; r < S; ++r) full.values[r] = mmax;
                kb = a.k;
                vb = a.v;
                blend_tokens(full, kb, ext->k, d);
                blend_tokens(full, vb, ext->v, d);
                keff = kb.data();
                veff = vb.data();
            }
        }

        a.att.assign(static_cast<size_t>(S) * d, 0.0f);
        a.probs.assign(static_cast<size_t>(H) * S * S, 0.0f);
        attention_core(a.q.data(), keff, veff, a.att.data(), a.probs.data(), S, H, hd);

        std::vector<float> proj(static_cast<size_t>(S) * d, 0.0f);
        linear_fwd(a.att.data(), P + ob.wo, P + ob.bo, proj.data(), S, d, d);
        a.h2 = *h_in;
        for (size_t i = 0; i < a.h2.size(); ++i) a.h2[i] += proj[i];

        a.n2.assign(static_cast<size_t>(S) * d, 0.0f);
        a.xhat2.assign(static_cast<size_t>(S) * d, 0.0f);
        a.istd2.assign(S, 0.0f);
        layernorm_fwd(a.h2.data(), P + ob.ln2_g, P + ob.ln2_b, a.n2.data(), a.xhat2.data(),
                      a.istd2.data(), S, d);
        a.mlp_pre.assign(static_cast<size_t>(S) * md, 0.0f);
        linear_fwd(a.n2.data(), P + ob.w1, P + ob.b1, a.mlp_pre.data(), S, d, md);
        std::vector<float> relu = a.mlp_pre;
        for (float& v : relu) v = std::max(v, 0.0f);
        std::vector<float> mlp_out(static_cast<size_t>(S) * d, 0.0f);
        linear_fwd(relu.data(), P + ob.w2, P + ob.b2, mlp_out.data(), S, md, d);
        a.h3 = a.h2;
        for (size_t i = 0; i < a.h3.size(); ++i) a.h3[i] += mlp_out[i];

        if (adapter) {
            const float* ad1 = P + ob.ad1;
            const float* ad2 = P + ob.ad2;
            for (int tok = 0; tok < T; ++tok) {
                float s = adapter->input.values[tok];
                if (s == 0.0f) continue;
                float* h = a.h3.data() + static_cast<size_t>(tok) * d;
                for (int j = 0; j < d; ++j)
                    h[j] += s * (adapter->beta1 * ad1[j] + adapter->beta2 * ad2[j]);
            }
        }
        h_in = &a.h3;
    }

    ws.nf.assign(static_cast<size_t>(S) * d, 0.0f);
    ws.xhatf.assign(static_cast<size_t>(S) * d, 0.0f);
    ws.istdf.assign(S, 0.0f);
    layernorm_fwd(h_in->data(), P + o.lnf_g, P + o.lnf_b, ws.nf.data(), ws.xhatf.data(),
                  ws.istdf.data(), S, d);
    out = LatentGrid(cfg_.grid_h, cfg_.grid_w, C);
    linear_fwd(ws.nf.data(), P + o.w_out, P + o.b_out, out.values.data(), T, d, C);
}

LatentGrid VelocityNet::forward(const LatentGrid& x, float t, int cond, const HookSet& hooks,
                                const StepKV* external_kv, StepKV* captured,
                                const AdapterDrive* adapter) const {
    Workspace ws;
    LatentGrid out;
    forward_impl(x, t, cond, hooks, external_kv, captured, adapter, ws, out);
    return out;
}

void VelocityNet::backward_impl(const LatentGrid& x, float t, int cond,
                                const AdapterDrive* adapter, const Workspace& ws,
                                const std::vector<float>& dout) {
    (void)t;
    const int T = cfg_.tokens(), d = cfg_.d_model(), C = cfg_.channels, H = cfg_.heads,
              hd = cfg_.head_dim, md = d * cfg_.mlp_mult;
    const int S = cfg_.seq_len();
    const auto& o = *off_;
    const float* P = params_.data();
    float* G = grads_.data();

    // Only the image rows feed the output head; the register row's dnf stays zero.
    std::vector<float> dnf(static_cast<size_t>(S) * d, 0.0f);
    linear_bwd(ws.nf.data(), P + o.w_out, dout.data(), dnf.data(), G + o.w_out, G + o.b_out, T, d,
               C);
    std::vector<float> dh(static_cast<size_t>(S) * d, 0.0f);
    layernorm_bwd(dnf.data(), P + o.lnf_g, ws.xhatf.data(), ws.istdf.data(), dh.data(),
                  G + o.lnf_g, G + o.lnf_b, S, d);

    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    for (int b = cfg_.blocks - 1; b >= 0; --b) {
        const auto& a = ws.blk[b];
        if (a.injected) throw NumericError("backward: workspace was computed with injection");
        const auto& ob = o.blk[b];
        const float* h_in = (b == 0) ? ws.emb.data() : ws.blk[b - 1].h3.data();

        if (adapter) {
            float* dad1 = G + ob.ad1;
            float* dad2 = G + ob.ad2;
            for (int tok = 0; tok < T; ++tok) {
                float s = adapter->input.values[tok];
                if (s == 0.0f) continue;
                const float* dhT = dh.data() + static_cast<size_t>(tok) * d;
                for (int j = 0; j < d; ++j) {
                    dad1[j] += adapter->beta1 * s * dhT[j];
                    dad2[j] += adapter->beta2 * s * dhT[j];
                }
            }
        }

        // MLP branch
        std::vector<float> relu = a.mlp_pre;
        for (float& v : relu) v = std::max(v, 0.0f);
        std::vector<float> drelu(static_cast<size_t>(S) * md, 0.0f);
        linear_bwd(relu.data(), P + ob.w2, dh.data(), drelu.data(), G + ob.w2, G + ob.b2, S, md,
                   d);
        for (size_t i = 0; i < drelu.size(); ++i)
            if (a.mlp_pre[i] <= 0.0f) drelu[i] = 0.0f;
        std::vector<float> dn2(static_cast<size_t>(S) * d, 0.0f);
        linear_bwd(a.n2.data(), P + ob.w1, drelu.data(), dn2.data(), G + ob.w1, G + ob.b1, S, d,
                   md);
        layernorm_bwd(dn2.data(), P + ob.ln2_g, a.xhat2.data(), a.istd2.data(), dh.data(),
                      G + ob.ln2_g, G + ob.ln2_b, S, d);

        // Attention branch
        std::vector<float> datt(static_cast<size_t>(S) * d, 0.0f);
        linear_bwd(a.att.data(), P + ob.wo, dh.data(), datt.data(), G + ob.wo, G + ob.bo, S, d,
                   d);
        std::vector<float> dq(static_cast<size_t>(S) * d, 0.0f);
        std::vector<float> dk(static_cast<size_t>(S) * d, 0.0f);
        std::vector<float> dv(static_cast<size_t>(S) * d, 0.0f);
        std::vector<float> da(S), ds(S);
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < S; ++i) {
                const float* doi = datt.data() + (static_cast<size_t>(i) * H + h) * hd;
                const float* probs = a.probs.data() + (static_cast<size_t>(h) * S + i) * S;
                float dot = 0.0f;
                for (int j = 0; j < S; ++j) {
                    const float* vj = a.v.data() + (static_cast<size_t>(j) * H + h) * hd;
                    float s = 0.0f;
                    for (int u = 0; u < hd; ++u) s += doi[u] * vj[u];
                    da[j] = s;
                    dot += probs[j] * s;
                    float* dvj = dv.data() + (static_cast<size_t>(j) * H + h) * hd;
                    for (int u = 0; u < hd; ++u) dvj[u] += probs[j] * doi[u];
                }
                const float* qi = a.q.data() + (static_cast<size_t>(i) * H + h) * hd;
                float* dqi = dq.data() + (static_cast<size_t>(i) * H + h) * hd;
                for (int j = 0; j < S; ++j) {
                    ds[j] = probs[j] * (da[j] - dot) * scale;
                    const float* kj = a.k.data() + (static_cast<size_t>(j) * H + h) * hd;
                    float* dkj = dk.data() + (static_cast<size_t>(j) * H + h) * hd;
                    for (int u = 0; u < hd; ++u) {
                        dqi[u] += ds[j] * kj[u];
                        dkj[u] += ds[j] * qi[u];
                    }
                }
            }
        }
        std::vector<float> dn1(static_cast<size_t>(S) * d, 0.0f);
        linear_bwd(a.n1.data(), P + ob.wq, dq.data(), dn1.data(), G + ob.wq, G + ob.bq, S, d, d);
        linear_bwd(a.n1.data(), P + ob.wk, dk.data(), dn1.data(), G + ob.wk, G + ob.bk, S, d, d);
        linear_bwd(a.n1.data(), P + ob.wv, dv.data(), dn1.data(), G + ob.wv, G + ob.bv, S, d, d);
        (void)h_in;
        layernorm_bwd(dn1.data(), P + ob.ln1_g, a.xhat1.data(), a.istd1.data(), dh.data(),
                      G + ob.ln1_g, G + ob.ln1_b, S, d);
    }

    // Embedding grads: image rows feed pos + w_in, register rows feed cond_emb.
    for (int tok = 0; tok < T; ++tok) {
        const float* dhT = dh.data() + static_cast<size_t>(tok) * d;
        float* dpe = G + o.pos + static_cast<size_t>(tok) * d;
        for (int j = 0; j < d; ++j) dpe[j] += dhT[j];
    }
    {
        float* dce = G + o.cond_emb + static_cast<size_t>(cond) * d;
        for (int r = T; r < S; ++r) {
            const float* dhR = dh.data() + static_cast<size_t>(r) * d;
            for (int j = 0; j < d; ++j) dce[j] += dhR[j];
        }
    }
    linear_bwd(x.values.data(), P + o.w_in, dh.data(), nullptr, G + o.w_in, G + o.b_in, T, C, d);
}

float VelocityNet::train_step(const LatentGrid& x, float t, int cond, const LatentGrid& target,
                              const AdapterDrive* adapter) {
    require_same_shape(x, target, "train_step");
    Workspace ws;
    LatentGrid out;
    forward_impl(x, t, cond, {}, nullptr, nullptr, adapter, ws, out);
    const size_t D = out.values.size();
    double loss = 0.0;
    std::vector<float> dout(D);
    for (size_t i = 0; i < D; ++i) {
        float e = out.values[i] - target.values[i];
        loss += static_cast<double>(e) * e;
        dout[i] = 2.0f * e / static_cast<float>(D);
    }
    backward_impl(x, t, cond, adapter, ws, dout);
    return static_cast<float>(loss / static_cast<double>(D));
}

// ---------------------------------------------------------------------------
// Checkpoint

void VelocityNet::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os.write(kCkptMagic, 8);
    io::write_u32_le(os, kCkptVersion);
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.grid_h));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.grid_w));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.channels));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.blocks));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.heads));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.head_dim));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.mlp_mult));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.cond_vocab));
    io::write_u32_le(os, static_cast<uint32_t>(cfg_.injection_blocks.size()));
    for (int b : cfg_.injection_blocks) io::write_u32_le(os, static_cast<uint32_t>(b));
    io::write_u32_le(os, static_cast<uint32_t>(params_.size()));
    io::write_f32_le(os, params_.data(), params_.size());
    if (!os) throw IoError("checkpoint write failed: " + path.string());
}

VelocityNet VelocityNet::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("bad checkpoint magic: " + path.string());
    uint32_t version = io::read_u32_le(is);
    if (version != kCkptVersion) throw IoError("unsupported checkpoint version");
    ModelConfig cfg;
    cfg.grid_h = static_cast<int>(io::read_u32_le(is));
    cfg.grid_w = static_cast<int>(io::read_u32_le(is));
    cfg.channels = static_cast<int>(io::read_u32_le(is));
    cfg.blocks = static_cast<int>(io::read_u32_le(is));
    cfg.heads = static_cast<int>(io::read_u32_le(is));
    cfg.head_dim = static_cast<int>(io::read_u32_le(is));
    cfg.mlp_mult = static_cast<int>(io::read_u32_le(is));
    cfg.cond_vocab = static_cast<int>(io::read_u32_le(is));
    uint32_t ninj = io::read_u32_le(is);
    cfg.injection_blocks.clear();
    for (uint32_t i = 0; i < ninj; ++i)
        cfg.injection_blocks.push_back(static_cast<int>(io::read_u32_le(is)));
    uint32_t count = io::read_u32_le(is);
    VelocityNet net(cfg);
    if (count != net.params_.size()) throw IoError("checkpoint parameter count mismatch");
    io::read_f32_le(is, net.params_.data(), count);
    return net;
}

}  // namespace rfedit::net
