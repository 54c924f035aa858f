// End-to-end acceptance gate: one pass/fail line per criterion.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "rfedit/config.hpp"
#include "rfedit/edit.hpp"
#include "rfedit/io.hpp"
#include "rfedit/metrics.hpp"
#include "rfedit/scene.hpp"
#include "rfedit/solver.hpp"
#include "rfedit/tdm.hpp"

using namespace rfedit;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass, const std::string& detail) {
    std::cout << "criterion " << criterion << " (" << name << "): " << (pass ? "PASS" : "FAIL")
              << " — " << detail << std::endl;
    if (!pass) ++g_failures;
}

LatentGrid constant_grid(float v) {
    LatentGrid g(2, 2, 3);
    for (float& e : g.values) e = v;
    return g;
}

double fit_slope(const std::vector<double>& h, const std::vector<double>& err) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    size_t n = h.size();
    for (size_t i = 0; i < n; ++i) {
        double x = std::log(h[i]), y = std::log(err[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

double denoise_error(solver::SolverKind kind, int N, const std::function<float(float)>& v_of_t,
                     double exact_integral) {
    auto fn = [&](const LatentGrid& x, float t, int, bool) {
        LatentGrid v = x;
        for (float& e : v.values) e = v_of_t(t);
        return v;
    };
    auto rec = solver::integrate(constant_grid(1.0f), solver::TimeGrid::uniform(N),
                                 solver::Direction::Denoising, 0, kind, fn);
    double expect = 1.0 - exact_integral;
    return std::abs(static_cast<double>(rec.final_latent().values[0]) - expect);
}

// ---- criterion 1: solver order of accuracy ---------------------------------
void criterion_order() {
    const std::vector<int> ns{4, 8, 16, 32, 64};
    const float a = 0.4f, b = -0.9f;
    auto linear = [=](float t) { return a + b * t; };
    double linear_integral = a + 0.5 * b;

    std::vector<double> hs, euler_err;
    double second_max = 0.0;
    for (int N : ns) {
        hs.push_back(1.0 / N);
        euler_err.push_back(denoise_error(solver::SolverKind::Euler, N, linear, linear_integral));
        second_max = std::max(second_max, denoise_error(solver::SolverKind::SecondOrder, N, linear,
                                                        linear_integral));
    }
    double euler_slope = fit_slope(hs, euler_err);

    // The Taylor-corrected step integrates a t-linear field exactly (its
    // truncation term vanishes), so its error there sits at float roundoff
    // and carries no measurable slope; the second-order rate is fitted on a
    // curved x-independent field instead.
    auto curved = [](float t) { return std::sin(3.0f * t); };
    double curved_integral = (1.0 - std::cos(3.0)) / 3.0;
    std::vector<double> second_err;
    for (int N : ns)
        second_err.push_back(
            denoise_error(solver::SolverKind::SecondOrder, N, curved, curved_integral));
    double second_slope = fit_slope(hs, second_err);

    bool pass = euler_slope > 0.7 && euler_slope < 1.3 && second_max < 1e-5 &&
                second_slope > 1.7 && second_slope < 2.3;
    std::ostringstream os;
    os << "euler slope " << euler_slope << " on a+bt; second-order exact on a+bt (max err "
       << second_max << "), slope " << second_slope << " on sin(3t)";
    report(1, "solver order", pass, os.str());
}

// ---- criterion 2: NFE fairness ---------------------------------------------
void criterion_nfe() {
    long calls = 0;
    auto fn = [&](const LatentGrid& x, float, int, bool) {
        ++calls;
        LatentGrid v = x;
        for (float& e : v.values) e = 0.25f;
        return v;
    };
    auto rec2 = solver::integrate(constant_grid(0.0f), solver::TimeGrid::uniform(28),
                                  solver::Direction::Denoising, 0, solver::SolverKind::SecondOrder,
                                  fn);
    long calls2 = calls;
    calls = 0;
    auto rec1 = solver::integrate(constant_grid(0.0f), solver::TimeGrid::uniform(56),
                                  solver::Direction::Denoising, 0, solver::SolverKind::Euler, fn);
    bool pass = rec2.total_nfe == 56 && rec1.total_nfe == 56 && calls2 == 56 && calls == 56;
    std::ostringstream os;
    os << "28 second-order steps: NFE " << rec2.total_nfe << " (" << calls2
       << " evaluator calls); 56 Euler steps: NFE " << rec1.total_nfe << " (" << calls
       << " calls)";
    report(2, "NFE fairness", pass, os.str());
}

// ---- criterion 3: round-trip reconstruction --------------------------------
void criterion_round_trip(const net::VelocityNet& model) {
    const auto& mc = model.config();
    const auto grid = solver::TimeGrid::uniform(28);
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<float> inten(0.95f, 0.99f);
    int good = 0;
    const int total = 50;
    double worst = 1e9;
    for (int i = 0; i < total; ++i) {
        int cond = i % scene::kCondVocab;
        auto spec = scene::make_scene(static_cast<scene::Shape>(cond / scene::kNumAnchors),
                                      cond % scene::kNumAnchors, inten(rng));
        Image src = scene::render(spec);
        LatentGrid x0 = edit::encode_latent(src, mc.grid_h, mc.grid_w);
        auto fn = [&](const LatentGrid& x, float t, int, bool) {
            return model.forward(x, t, cond);
        };
        auto up = solver::integrate(x0, grid, solver::Direction::Inversion, cond,
                                    solver::SolverKind::SecondOrder, fn);
        auto down = solver::integrate(up.final_latent(), grid, solver::Direction::Denoising, cond,
                                      solver::SolverKind::SecondOrder, fn);
        Image back = edit::decode_image(down.final_latent(), src.channels);
        double db = metrics::psnr(back, src);
        worst = std::min(worst, db);
        if (db >= 30.0) ++good;
    }
    bool pass = good >= total * 9 / 10;
    std::ostringstream os;
    os << good << "/" << total << " held-out images at PSNR >= 30 dB (min "
       << metrics::format_db(worst) << " dB)";
    report(3, "round-trip reconstruction", pass, os.str());
}

// ---- criterion 4: full-injection identity ----------------------------------
void criterion_full_injection(const net::VelocityNet& model, const scene::EditPair& pair) {
    Image src = scene::render(pair.source);
    edit::EditSchedule sched;  // default published schedule
    auto forced = edit::run_edit(model, src, pair.source.condition_id(),
                                 pair.target.condition_id(), sched, 7,
                                 edit::MaskOverride::ForceZeros);
    edit::EditSchedule all_front = sched;
    all_front.k_front = sched.steps;
    all_front.k_tail = 0;
    auto recon = edit::run_edit(model, src, pair.source.condition_id(),
                                pair.target.condition_id(), all_front, 7);
    bool pass = forced.edited_latent.values.size() == recon.edited_latent.values.size();
    size_t diff = 0;
    for (size_t i = 0; pass && i < forced.edited_latent.values.size(); ++i)
        if (forced.edited_latent.values[i] != recon.edited_latent.values[i]) ++diff;
    pass = pass && diff == 0;
    std::ostringstream os;
    os << "forced all-zeros mask vs full-injection reconstruction: " << diff
       << " differing latent entries";
    report(4, "full-injection identity", pass, os.str());
}

// ---- criterion 5: TDM localization -----------------------------------------
void criterion_tdm_localization(const net::VelocityNet& model,
                                const std::vector<scene::EditPair>& pairs) {
    const auto& mc = model.config();
    int localized = 0;
    double iou_sum = 0.0;
    edit::EditSchedule sched;
    for (const auto& pair : pairs) {
        Image src = scene::render(pair.source);
        auto res = edit::run_edit(model, src, pair.source.condition_id(),
                                  pair.target.condition_id(), sched, 7);
        // token-level ground truth: a token is changed if any of its pixels is
        int patch = src.height / mc.grid_h;
        TokenMap gt_tok(mc.grid_h, mc.grid_w, 0.0f);
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                if (pair.change_mask.at(y, x) > 0.5f) gt_tok.at(y / patch, x / patch) = 1.0f;
        double in_sum = 0, out_sum = 0;
        long in_n = 0, out_n = 0;
        for (size_t i = 0; i < gt_tok.size(); ++i) {
            if (gt_tok.values[i] > 0.5f) {
                in_sum += res.final_mask.soft.values[i];
                ++in_n;
            } else {
                out_sum += res.final_mask.soft.values[i];
                ++out_n;
            }
        }
        if (in_n > 0 && out_n > 0 && in_sum / in_n > out_sum / out_n) ++localized;
        TokenMap pred = metrics::upsample_mask(res.final_mask.binary, src.height, src.width);
        iou_sum += metrics::mask_iou(pred, pair.change_mask);
    }
    double mean_iou = iou_sum / pairs.size();
    bool pass = localized * 100 >= static_cast<long>(pairs.size()) * 85 && mean_iou >= 0.4;
    std::ostringstream os;
    os << "inside mean exceeds outside mean on " << localized << "/" << pairs.size()
       << " pairs; mean mask IoU " << mean_iou;
    report(5, "TDM localization", pass, os.str());
}

// ---- criterion 6: k_front trend --------------------------------------------
void criterion_kfront_trend(const net::VelocityNet& model,
                            const std::vector<scene::EditPair>& pairs) {
    std::map<int, double> bg;
    for (int kf : {0, 1, 2, 3, 4}) {
        edit::EditSchedule sched;
        sched.k_front = kf;
        sched.adapter_enabled = false;
        double acc = 0.0;
        for (const auto& pair : pairs) {
            Image src = scene::render(pair.source);
            auto res = edit::run_edit(model, src, pair.source.condition_id(),
                                      pair.target.condition_id(), sched, 7);
            int patch = src.height / model.config().grid_h;
            metrics::Box box = metrics::subject_box(pair.change_mask, patch);
            acc += metrics::background_psnr(res.edited_image, src, box);
        }
        bg[kf] = acc / pairs.size();
    }
    bool pass = bg[2] > bg[0];
    std::ostringstream os;
    os << "mean background PSNR by k_front:";
    for (auto& [kf, v] : bg) os << " kf" << kf << "=" << metrics::format_db(v);
    os << "; kf2 > kf0 is " << (pass ? "true" : "false") << " (adapter disabled)";
    report(6, "k_front trend", pass, os.str());
}

// ---- criterion 7: TDM pipeline property suite ------------------------------
void criterion_tdm_properties() {
    auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<float> mag(0.0f, 5.0f);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::uniform_int_distribution<int> win_len(1, 6);
    std::uniform_real_distribution<float> sig(0.3f, 1.5f);
    long checked = 0, violations = 0;
    const int H = 8, W = 8;
    for (int iter = 0; iter < 1000; ++iter) {
        // normalization: range and idempotence
        TokenMap d(H, W);
        for (float& v : d.values) v = mag(rng);
        TokenMap n1 = tdm::minmax_normalize(d);
        TokenMap n2 = tdm::minmax_normalize(n1);
        for (size_t i = 0; i < n1.size(); ++i) {
            if (n1.values[i] < 0.0f || n1.values[i] > 1.0f) ++violations;
            if (std::abs(n2.values[i] - n1.values[i]) > 1e-6f) ++violations;
            ++checked;
        }
        // fusion: convexity bounds per token, weights summing to one
        int L = win_len(rng);
        std::vector<TokenMap> window;
        for (int l = 0; l < L; ++l) {
            TokenMap m(H, W);
            for (float& v : m.values) v = unit(rng);
            window.push_back(m);
        }
        TokenMap fused = tdm::softmax_fuse(window);
        for (size_t i = 0; i < fused.size(); ++i) {
            float lo = 1e9f, hi = -1e9f;
            for (const auto& m : window) {
                lo = std::min(lo, m.values[i]);
                hi = std::max(hi, m.values[i]);
            }
            if (fused.values[i] < lo - 1e-6f || fused.values[i] > hi + 1e-6f) ++violations;
            ++checked;
        }
        std::vector<TokenMap> same(L, window[0]);
        TokenMap fused_same = tdm::softmax_fuse(same);  // weight sum 1 <=> identity
        for (size_t i = 0; i < fused_same.size(); ++i) {
            if (std::abs(fused_same.values[i] - window[0].values[i]) > 1e-6f) ++violations;
            ++checked;
        }
        // smoothing: interior impulse preserves unit mass
        float sigma = sig(rng);
        int R = static_cast<int>(std::ceil(3.0f * sigma));
        TokenMap impulse(4 * R + 2, 4 * R + 2, 0.0f);
        impulse.at(2 * R, 2 * R) = 1.0f;
        TokenMap blurred = tdm::gaussian_smooth(impulse, sigma);
        double mass = 0.0;
        for (float v : blurred.values) mass += v;
        if (std::abs(mass - 1.0) > 1e-6) ++violations;
        ++checked;
        // binarization: monotone in tau
        float t1 = 0.05f + 0.45f * unit(rng);
        float t2 = t1 + 0.45f * unit(rng);
        tdm::EditMask m1 = tdm::binarize(window[0], t1);
        tdm::EditMask m2 = tdm::binarize(window[0], t2);
        for (size_t i = 0; i < m1.binary.size(); ++i) {
            if (m2.binary.values[i] > m1.binary.values[i]) ++violations;
            ++checked;
        }
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool pass = violations == 0 && secs < 30.0;
    std::ostringstream os;
    os << checked << " property checks over 1000 randomized instances, " << violations
       << " violations, " << secs << " s";
    report(7, "TDM pipeline invariants", pass, os.str());
}

// ---- criterion 8: blend/injection fixed points -----------------------------
void criterion_fixed_points(const net::VelocityNet& model) {
    const auto& mc = model.config();
    std::mt19937_64 rng(808);
    std::normal_distribution<float> n(0.0f, 1.0f);
    LatentGrid x(mc.grid_h, mc.grid_w, mc.channels), x2 = x;
    for (float& v : x.values) v = n(rng);
    for (float& v : x2.values) v = n(rng);

    net::HookSet capture;
    for (int b : mc.injection_blocks) capture[b].kind = net::HookKind::Capture;
    net::StepKV kv_self, kv_other;
    LatentGrid plain = model.forward(x, 0.5f, 3, capture, nullptr, &kv_self);
    model.forward(x2, 0.5f, 3, capture, nullptr, &kv_other);

    auto bitwise = [](const LatentGrid& a, const LatentGrid& b) {
        if (a.values.size() != b.values.size()) return false;
        for (size_t i = 0; i < a.values.size(); ++i)
            if (a.values[i] != b.values[i]) return false;
        return true;
    };

    net::HookSet inject_full;
    for (int b : mc.injection_blocks) inject_full[b].kind = net::HookKind::InjectFull;
    bool self_ok = bitwise(model.forward(x, 0.5f, 3, inject_full, &kv_self), plain);

    net::HookSet ones_hooks, zeros_hooks;
    for (int b : mc.injection_blocks) {
        ones_hooks[b].kind = net::HookKind::InjectBlended;
        ones_hooks[b].mask = TokenMap(mc.grid_h, mc.grid_w, 1.0f);
        zeros_hooks[b].kind = net::HookKind::InjectBlended;
        zeros_hooks[b].mask = TokenMap(mc.grid_h, mc.grid_w, 0.0f);
    }
    bool ones_ok = bitwise(model.forward(x, 0.5f, 3, ones_hooks, &kv_other), plain);
    bool zeros_ok = bitwise(model.forward(x, 0.5f, 3, zeros_hooks, &kv_other),
                            model.forward(x, 0.5f, 3, inject_full, &kv_other));

    // tensor-level endpoints of the blend itself
    const auto& tgt = kv_self.begin()->second;
    const auto& inv = kv_other.begin()->second;
    auto z = edit::blend_kv(TokenMap(mc.grid_h, mc.grid_w, 0.0f), tgt, inv);
    auto o = edit::blend_kv(TokenMap(mc.grid_h, mc.grid_w, 1.0f), tgt, inv);
    bool tensors_ok = z.k == inv.k && z.v == inv.v && o.k == tgt.k && o.v == tgt.v;

    bool pass = self_ok && ones_ok && zeros_ok && tensors_ok;
    std::ostringstream os;
    os << "self-injection==passthrough " << (self_ok ? "bitwise" : "DIFFERS")
       << "; ones mask==pure target " << (ones_ok ? "bitwise" : "DIFFERS")
       << "; zeros mask==pure inversion KV " << ((zeros_ok && tensors_ok) ? "bitwise" : "DIFFERS");
    report(8, "blend/injection fixed points", pass, os.str());
}

// ---- criterion 9: CLI determinism ------------------------------------------
bool run_cli(const std::string& args) {
    std::string cmd = std::string(RFEDIT_BIN) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
}

bool dirs_identical(const fs::path& a, const fs::path& b, std::string& why) {
    auto listing = [](const fs::path& root) {
        std::vector<fs::path> rel;
        for (auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), root));
        std::sort(rel.begin(), rel.end());
        return rel;
    };
    auto la = listing(a), lb = listing(b);
    if (la != lb) {
        why = "file listings differ";
        return false;
    }
    for (const auto& r : la) {
        std::ifstream fa(a / r, std::ios::binary), fb(b / r, std::ios::binary);
        std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        if (ca != cb) {
            why = "content differs: " + r.string();
            return false;
        }
    }
    return true;
}

void criterion_cli_determinism(const fs::path& work) {
    fs::path root = work / "cli";
    fs::remove_all(root);
    fs::create_directories(root);
    std::string why;
    bool pass = true;
    std::string fail_step;

    // run each command twice into the same --out (so the recorded effective
    // config is identical) and byte-compare the snapshot of the first run
    auto step = [&](const std::string& label, const std::string& args, const fs::path& out) {
        if (!pass) return;
        if (!run_cli(args)) {
            pass = false;
            fail_step = label + " exited nonzero";
            return;
        }
        fs::path snap = out.string() + "_snapshot";
        fs::remove_all(snap);
        fs::copy(out, snap, fs::copy_options::recursive);
        if (!run_cli(args)) {
            pass = false;
            fail_step = label + " exited nonzero on rerun";
            return;
        }
        if (!dirs_identical(out, snap, why)) {
            pass = false;
            fail_step = label + ": " + why;
        }
    };

    auto p = [&](const std::string& s) { return (root / s).string(); };
    std::string small = "--set dataset.count=24 --set train.epochs=2 --seed 5";
    step("gen", "gen --out " + p("gen") + " " + small, root / "gen");
    step("train", "train --out " + p("tr") + " --set run.dataset_dir=" + p("gen") + " " + small,
         root / "tr");
    step("edit",
         "edit --out " + p("ed") + " --set run.checkpoint=" + p("tr") + "/model.ckpt --source " +
             p("gen") + "/pairs/pair_000_src.ppm --c-src 0 --c-tgt 1 --seed 5",
         root / "ed");
    std::string pe = " --set run.dataset_dir=" + p("gen") + " --set run.checkpoint=" + p("tr") +
                     "/model.ckpt --seed 5";
    step("edit --pairs", "edit --out " + p("pe") + " --pairs " + p("gen") + pe, root / "pe");
    step("eval", "eval --results " + p("pe") + pe, root / "pe");

    report(9, "CLI determinism", pass,
           pass ? "gen/train/edit/eval each byte-identical across repeated runs"
                : fail_step);
}

}  // namespace

int main() {
    fs::path work = fs::temp_directory_path() / "rfedit_acceptance";
    fs::create_directories(work);

    criterion_order();
    criterion_nfe();
    criterion_tdm_properties();

    // shared trained model for the empirical criteria
    std::cerr << "[setup] generating dataset and training the velocity model...\n";
    scene::Dataset ds = scene::make_dataset(480, 1);
    config::RunConfig cfg;
    net::VelocityNet model(cfg.model);
    model.init_params(cfg.seed);
    std::vector<flow::TrainSample> samples;
    for (const auto& spec : ds.train) {
        Image img = scene::render(spec);
        flow::TrainSample s;
        s.x0 = edit::encode_latent(img, cfg.model.grid_h, cfg.model.grid_w);
        s.cond = spec.condition_id();
        s.adapter_map = net::adapter_input_from_image(img, cfg.model.grid_h, cfg.model.grid_w);
        samples.push_back(std::move(s));
    }
    flow::TrainConfig tc = cfg.train;
    tc.epochs = 120;
    tc.seed = cfg.seed;
    auto tr = flow::train(model, samples, tc);
    std::cerr << "[setup] final training loss " << tr.final_loss << "\n";

    criterion_round_trip(model);
    criterion_full_injection(model, ds.held_out.front());
    criterion_tdm_localization(model, ds.held_out);
    criterion_kfront_trend(model, ds.held_out);
    criterion_fixed_points(model);
    criterion_cli_determinism(work);

    if (g_failures == 0) {
        std::cout << "all 9 criteria passed" << std::endl;
        return 0;
    }
    std::cout << g_failures << " criteria failed" << std::endl;
    return 1;
}
