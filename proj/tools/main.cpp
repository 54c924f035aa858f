#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rfedit/config.hpp"
#include "rfedit/edit.hpp"
#include "rfedit/flow.hpp"
#include "rfedit/io.hpp"
#include "rfedit/metrics.hpp"
#include "rfedit/scene.hpp"

namespace fs = std::filesystem;
using namespace rfedit;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "config file (key=value with [sections])");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "seed override")->each([&](const std::string&) {
        opts.seed_set = true;
    });
    cmd->add_option("--set", opts.overrides, "per-field override, section.key=value");
}

config::RunConfig load_config(const CommonOpts& opts) {
    config::RunConfig cfg;
    if (!opts.config_path.empty()) cfg = config::RunConfig::from_file(opts.config_path);
    for (const auto& ov : opts.overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects section.key=value: " + ov);
        cfg.apply(ov.substr(0, eq), ov.substr(eq + 1));
    }
    if (opts.seed_set) cfg.seed = opts.seed;
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    return cfg;
}

void write_effective_config(const config::RunConfig& cfg, const fs::path& dir) {
    cfg.write_file(dir / "config.txt");
}

std::vector<flow::TrainSample> build_train_samples(const scene::Dataset& ds,
                                                   const net::ModelConfig& mc) {
    std::vector<flow::TrainSample> samples;
    for (const auto& spec : ds.train) {
        Image img = scene::render(spec);
        flow::TrainSample s;
        s.x0 = edit::encode_latent(img, mc.grid_h, mc.grid_w);
        s.cond = spec.condition_id();
        s.adapter_map = net::adapter_input_from_image(img, mc.grid_h, mc.grid_w);
        samples.push_back(std::move(s));
    }
    return samples;
}

int cmd_gen(const CommonOpts& opts) {
    auto cfg = load_config(opts);
    if (cfg.out_dir.empty()) throw ConfigError("gen: --out is required");
    scene::Dataset ds = scene::make_dataset(cfg.dataset_count, cfg.seed);
    fs::create_directories(cfg.out_dir);
    scene::write_dataset(cfg.out_dir, ds);
    write_effective_config(cfg, cfg.out_dir);
    std::cout << "wrote " << ds.train.size() << " training images, " << ds.held_out.size()
              << " held-out pairs to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_train(const CommonOpts& opts) {
    auto cfg = load_config(opts);
    if (cfg.out_dir.empty()) throw ConfigError("train: --out is required");
    if (cfg.dataset_dir.empty()) throw ConfigError("train: run.dataset_dir is required");
    scene::Dataset ds = scene::read_dataset(cfg.dataset_dir);

    net::VelocityNet model = [&] {
        if (!cfg.checkpoint.empty()) {
            if (!fs::exists(cfg.checkpoint)) throw IoError("missing checkpoint: " + cfg.checkpoint);
            return net::VelocityNet::load(cfg.checkpoint);
        }
        net::VelocityNet m(cfg.model);
        m.init_params(cfg.seed);
        return m;
    }();

    auto samples = build_train_samples(ds, model.config());
    flow::TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    flow::TrainResult result = flow::train(model, samples, tc);

    fs::create_directories(cfg.out_dir);
    model.save(fs::path(cfg.out_dir) / "model.ckpt");
    {
        std::ofstream os(fs::path(cfg.out_dir) / "loss_history.txt");
        for (float l : result.loss_history) os << l << "\n";
    }
    std::map<std::string, std::string> man;
    man["seed"] = std::to_string(cfg.seed);
    man["config_hash"] = std::to_string(cfg.hash());
    man["final_loss"] = std::to_string(result.final_loss);
    man["epochs"] = std::to_string(tc.epochs);
    man["batches"] = std::to_string(result.loss_history.size());
    io::write_manifest(fs::path(cfg.out_dir) / "run_manifest.txt", man);
    write_effective_config(cfg, cfg.out_dir);
    std::cout << "final loss " << result.final_loss << " after " << result.loss_history.size()
              << " batches\n";
    return 0;
}

void write_edit_outputs(const edit::EditResult& res, const fs::path& dir) {
    fs::create_directories(dir);
    io::write_ppm(dir / "edited.ppm", res.edited_image);
    io::write_pgm(dir / "mask.pgm", res.final_mask.binary);
    io::write_pgm(dir / "mask_soft.pgm", res.final_mask.soft);
    io::write_map_raw(dir / "mask.bin", res.final_mask.soft);
    for (size_t i = 0; i < res.divergence_maps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "div_%02zu", i);
        // PGM wants [0,1]; export the normalized view, raw keeps the values
        io::write_pgm(dir / (std::string(name) + ".pgm"),
                      tdm::minmax_normalize(res.divergence_maps[i]));
        io::write_map_raw(dir / (std::string(name) + ".bin"), res.divergence_maps[i]);
    }
    res.inversion.save(dir / "inversion.traj");
    res.denoising.save(dir / "denoising.traj");
    auto man = res.manifest;
    man["edited"] = "edited.ppm";
    man["mask"] = "mask.pgm";
    man["divergence_maps"] = std::to_string(res.divergence_maps.size());
    io::write_manifest(dir / "manifest.txt", man);
}

int cmd_edit(const CommonOpts& opts, const std::string& source_path, int c_src, int c_tgt,
             const std::string& pairs_dir, const std::string& sweep_k_front) {
    auto cfg = load_config(opts);
    if (cfg.out_dir.empty()) throw ConfigError("edit: --out is required");
    if (cfg.checkpoint.empty()) throw ConfigError("edit: run.checkpoint is required");
    if (!fs::exists(cfg.checkpoint)) throw IoError("missing checkpoint: " + cfg.checkpoint);
    net::VelocityNet model = net::VelocityNet::load(cfg.checkpoint);

    if (!pairs_dir.empty()) {
        scene::Dataset ds = scene::read_dataset(pairs_dir);
        std::vector<int> kf_values;
        if (!sweep_k_front.empty()) {
            std::istringstream is(sweep_k_front);
            std::string part;
            while (std::getline(is, part, ',')) kf_values.push_back(std::stoi(part));
        } else {
            kf_values.push_back(cfg.schedule.k_front);
        }
        for (int kf : kf_values) {
            edit::EditSchedule sched = cfg.schedule;
            sched.k_front = kf;
            fs::path base = cfg.out_dir;
            if (!sweep_k_front.empty()) base /= "sweep_kf" + std::to_string(kf);
            for (size_t i = 0; i < ds.held_out.size(); ++i) {
                const auto& pair = ds.held_out[i];
                Image src = scene::render(pair.source);
                auto res = edit::run_edit(model, src, pair.source.condition_id(),
                                          pair.target.condition_id(), sched, cfg.seed);
                char name[32];
                std::snprintf(name, sizeof(name), "pair_%03zu", i);
                write_edit_outputs(res, base / name);
            }
        }
        write_effective_config(cfg, cfg.out_dir);
        return 0;
    }

    if (source_path.empty()) throw ConfigError("edit: --source or --pairs is required");
    if (c_src < 0 || c_tgt < 0) throw ConfigError("edit: --c-src and --c-tgt are required");
    Image src = io::read_ppm(source_path);
    auto res = edit::run_edit(model, src, c_src, c_tgt, cfg.schedule, cfg.seed);
    write_edit_outputs(res, cfg.out_dir);
    write_effective_config(cfg, cfg.out_dir);
    std::cout << "edited image written, NFE total " << res.total_nfe << "\n";
    return 0;
}

metrics::EvalReport eval_dir(const config::RunConfig& cfg, const scene::Dataset& ds,
                             const fs::path& results) {
    metrics::EvalReport report;
    report.schedule_id = cfg.schedule.id();
    report.model_id = fs::path(cfg.checkpoint).filename().string();
    for (size_t i = 0; i < ds.held_out.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "pair_%03zu", i);
        fs::path dir = results / name;
        if (!fs::exists(dir / "edited.ppm")) continue;
        const auto& pair = ds.held_out[i];
        Image source = scene::render(pair.source);
        Image edited = io::read_ppm(dir / "edited.ppm");
        TokenMap pred_tok = io::read_pgm(dir / "mask.pgm");
        TokenMap pred = metrics::upsample_mask(pred_tok, source.height, source.width);
        int patch = source.height / pred_tok.height;
        metrics::Box box = metrics::subject_box(pair.change_mask, patch);
        metrics::PairResult pr;
        pr.id = name;
        pr.psnr = metrics::psnr(edited, source);
        pr.background_psnr = metrics::background_psnr(edited, source, box);
        pr.iou = metrics::mask_iou(pred, pair.change_mask);
        report.pairs.push_back(pr);
    }
    if (report.pairs.empty()) throw InputError("eval: no pair results found in " +
                                               results.string());
    report.finalize();
    return report;
}

int cmd_eval(const CommonOpts& opts, const std::string& results_dir) {
    auto cfg = load_config(opts);
    if (results_dir.empty()) throw ConfigError("eval: --results is required");
    if (cfg.dataset_dir.empty()) throw ConfigError("eval: run.dataset_dir is required");
    scene::Dataset ds = scene::read_dataset(cfg.dataset_dir);

    std::vector<fs::path> targets;
    for (const auto& entry : fs::directory_iterator(results_dir))
        if (entry.is_directory() && entry.path().filename().string().starts_with("sweep_"))
            targets.push_back(entry.path());
    std::sort(targets.begin(), targets.end());
    if (targets.empty()) targets.push_back(results_dir);

    for (const auto& dir : targets) {
        metrics::EvalReport report = eval_dir(cfg, ds, dir);
        report.write_text(dir / "report.txt");
        report.write_json(dir / "report.json");
        std::cout << dir.string() << ": mean_psnr=" << metrics::format_db(report.mean_psnr)
                  << " mean_bg_psnr=" << metrics::format_db(report.mean_background_psnr)
                  << " mean_iou=" << report.mean_iou << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rectified-flow shape editing toolkit"};
    app.require_subcommand(1);

    CommonOpts gen_opts, train_opts, edit_opts, eval_opts;
    auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
    add_common(gen, gen_opts);
    auto* train = app.add_subcommand("train", "train the velocity network");
    add_common(train, train_opts);

    auto* edit_cmd = app.add_subcommand("edit", "run inversion + scheduled KV-injection editing");
    add_common(edit_cmd, edit_opts);
    std::string source_path, pairs_dir, sweep_kf;
    int c_src = -1, c_tgt = -1;
    edit_cmd->add_option("--source", source_path, "source PPM image");
    edit_cmd->add_option("--c-src", c_src, "source condition id");
    edit_cmd->add_option("--c-tgt", c_tgt, "target condition id");
    edit_cmd->add_option("--pairs", pairs_dir, "dataset dir; edit every held-out pair");
    edit_cmd->add_option("--sweep-k-front", sweep_kf, "comma list; one run per k_front value");

    auto* eval_cmd = app.add_subcommand("eval", "score edit results against ground truth");
    add_common(eval_cmd, eval_opts);
    std::string results_dir;
    eval_cmd->add_option("--results", results_dir, "directory of edit outputs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(gen_opts);
        if (train->parsed()) return cmd_train(train_opts);
        if (edit_cmd->parsed())
            return cmd_edit(edit_opts, source_path, c_src, c_tgt, pairs_dir, sweep_kf);
        if (eval_cmd->parsed()) return cmd_eval(eval_opts, results_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
