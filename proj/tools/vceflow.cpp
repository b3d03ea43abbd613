// vceflow: synthesize contrast-enhanced CT volumes from non-contrast input
// with a rectified-flow transformer, plus the phantom benchmark around it.
//
// Subcommands: phantom, train, sample, eval, dump-features.
// Exit codes: 0 success, 2 input/format error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kernels.hpp"
#include "train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vce;

namespace {

int run_phantom(const std::string& preset_name, int count, const std::string& out_dir,
                std::uint64_t seed, double misalign_override, bool has_override) {
    PhantomPreset preset = preset_by_name(preset_name);
    const double misalign = has_override ? misalign_override : preset.misalign_vox;
    fs::create_directories(out_dir);
    for (int i = 0; i < count; ++i) {
        PhantomConfig cfg = preset.config;
        cfg.seed = seed + static_cast<std::uint64_t>(i);
        PhantomSample s = generate_phantom(cfg);
        char id[32];
        std::snprintf(id, sizeof(id), "case%04d", i);
        const std::string base = out_dir + "/" + id;
        write_ctvol(base + "_NC.ctvol", s.nc);
        write_ctvol(base + "_labels.ctvol", s.labels);
        for (auto ph : {Phase::A, Phase::V}) {
            Volume v = s.phases.at(ph);
            if (misalign > 0.0)
                v = inject_misalignment(v, misalign,
                                        cfg.seed ^ (ph == Phase::A ? 0xA0A0u : 0xF0F0u));
            write_ctvol(base + "_" + phase_name(ph) + ".ctvol", v);
        }
    }
    json meta = {{"preset", preset_name},
                 {"count", count},
                 {"seed", seed},
                 {"misalign_vox", misalign},
                 {"noise_sigma", preset.config.noise_sigma}};
    std::ofstream os(out_dir + "/phantom_meta.json");
    os << meta.dump(2) << "\n";
    std::cout << "wrote " << count << " phantom cases to " << out_dir << "\n";
    return 0;
}

TrainConfig load_train_config(const std::string& config_path) {
    TrainConfig cfg;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw FormatError("cannot open config '" + config_path + "'");
        json j;
        try {
            j = json::parse(is);
        } catch (const json::exception& e) {
            throw FormatError("config '" + config_path + "': " + e.what());
        }
        cfg = j.get<TrainConfig>();
    }
    return cfg;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, std::int64_t steps, std::uint64_t seed,
              bool seed_set) {
    TrainConfig cfg = load_train_config(config_path);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (steps > 0) cfg.max_steps = steps;
    if (seed_set) cfg.seed = seed;
    Trainer trainer(cfg);
    const auto records = trainer.run();
    std::cout << "trained " << records.size() << " steps; final total loss "
              << records.back().total << "\n";
    std::cout << "checkpoint: " << cfg.out_dir << "/final.phsr\n";
    return 0;
}

int run_sample(const std::string& ckpt_path, const std::string& nc_path,
               const std::string& labels_path, const std::string& phase_name_str,
               int steps, std::uint64_t seed, const std::string& out_path) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    DitModel<float> model = model_from_checkpoint(ck);
    const Volume nc = read_volume(nc_path);
    const Phase phase = phase_from_name(phase_name_str);

    TokenLabels labels;
    std::string lp = labels_path;
    if (lp.empty()) {
        // Default to the sibling labels file when present.
        const std::string stem = nc_path.substr(0, nc_path.rfind("_NC.ctvol"));
        const std::string candidate = stem + "_labels.ctvol";
        if (nc_path.rfind("_NC.ctvol") != std::string::npos && fs::exists(candidate))
            lp = candidate;
    }
    if (!lp.empty())
        labels = downsample_labels(read_labels(lp), model.cfg.patch_dims());

    Volume out = sample_volume(model, nc, labels, phase, steps, seed);
    write_ctvol(out_path, out);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int run_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& nc_dir, double threshold, bool teacher_distance,
             const std::string& out_path) {
    EvalOptions opts;
    opts.threshold_hu = threshold;
    opts.teacher_distance = teacher_distance;
    std::vector<std::string> mismatches;
    json report = evaluate_dirs(pred_dir, gt_dir, nc_dir, opts, &mismatches);
    const std::string text = report.dump(2) + "\n";
    if (out_path.empty() || out_path == "-") {
        std::cout << text;
    } else {
        std::ofstream os(out_path);
        os << text;
        std::cout << "wrote " << out_path << "\n";
    }
    if (!mismatches.empty()) {
        std::cerr << "skipped " << mismatches.size() << " volume(s) with missing pairs:\n";
        for (const auto& m : mismatches) std::cerr << "  " << m << "\n";
        return 2;
    }
    return 0;
}

int run_dump_features(const std::string& ckpt_path, const std::string& nc_path,
                      const std::string& ce_path, const std::string& labels_path,
                      const std::string& phase_name_str, double t, int block,
                      std::uint64_t seed, const std::string& out_path) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    DitModel<float> model = model_from_checkpoint(ck);
    const Volume nc = read_volume(nc_path);
    const Volume ce = read_volume(ce_path);
    TokenLabels labels(model.cfg.n_tokens(), 0);
    if (!labels_path.empty())
        labels = downsample_labels(read_labels(labels_path), model.cfg.patch_dims());
    const std::string csv = dump_features_csv(model, nc, ce, labels,
                                              phase_from_name(phase_name_str), t, block,
                                              seed);
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + out_path + "' for writing");
    os << csv;
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    vce::kern::tune_allocator();
    CLI::App app{"volumetric CT virtual contrast enhancement via rectified flow"};
    app.require_subcommand(1);

    // phantom
    auto* ph = app.add_subcommand("phantom", "generate synthetic multi-phase CT phantoms");
    std::string ph_preset = "easy", ph_out = "phantoms";
    int ph_count = 8;
    std::uint64_t ph_seed = 0;
    double ph_misalign = 0.0;
    ph->add_option("--preset", ph_preset, "easy or hard");
    ph->add_option("--count", ph_count, "number of cases");
    ph->add_option("--out", ph_out, "output directory");
    ph->add_option("--seed", ph_seed, "base seed (case i uses seed+i)");
    auto* mis_opt =
        ph->add_option("--misalign", ph_misalign, "override preset misalignment (voxels)");

    // train
    auto* tr = app.add_subcommand("train", "train the synthesis model");
    std::string tr_config, tr_data, tr_out = "run";
    std::int64_t tr_steps = 0;
    std::uint64_t tr_seed = 0;
    tr->add_option("--config", tr_config, "JSON TrainConfig (defaults apply field-wise)");
    tr->add_option("--data", tr_data, "directory of paired phantom volumes");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--steps", tr_steps, "override max_steps");
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "override seed");

    // sample
    auto* sa = app.add_subcommand("sample", "synthesize a contrast phase from NC input");
    std::string sa_ckpt, sa_nc, sa_labels, sa_phase = "A", sa_out = "pred.ctvol";
    int sa_steps = 20;
    std::uint64_t sa_seed = 0;
    sa->add_option("--ckpt", sa_ckpt, "checkpoint path")->required();
    sa->add_option("--nc", sa_nc, "input NC .ctvol")->required();
    sa->add_option("--labels", sa_labels,
                   "organ label .ctvol for routing (default: sibling _labels file)");
    sa->add_option("--phase", sa_phase, "target phase, A or V");
    sa->add_option("--steps", sa_steps, "Euler steps");
    sa->add_option("--seed", sa_seed, "noise seed");
    sa->add_option("--out", sa_out, "output .ctvol");

    // eval
    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    std::string ev_pred, ev_gt, ev_nc, ev_out;
    double ev_thresh = 20.0;
    bool ev_tdist = false;
    ev->add_option("--pred", ev_pred, "predictions directory")->required();
    ev->add_option("--gt", ev_gt, "ground truth directory")->required();
    ev->add_option("--nc", ev_nc, "NC directory (for enhancement masks)")->required();
    ev->add_option("--threshold", ev_thresh, "enhancement threshold in HU");
    ev->add_flag("--teacher-distance", ev_tdist,
                 "also report the teacher feature distance (not FID-comparable)");
    ev->add_option("--out", ev_out, "report path (default stdout)");

    // dump-features
    auto* df = app.add_subcommand("dump-features",
                                  "export pre/post AR-MoE token features as CSV");
    std::string df_ckpt, df_nc, df_ce, df_labels, df_phase = "A", df_out = "features.csv";
    double df_t = 0.5;
    int df_block = -1;
    std::uint64_t df_seed = 0;
    df->add_option("--ckpt", df_ckpt, "checkpoint path")->required();
    df->add_option("--nc", df_nc, "NC .ctvol")->required();
    df->add_option("--ce", df_ce, "CE .ctvol (defines the noisy state)")->required();
    df->add_option("--labels", df_labels, "label .ctvol");
    df->add_option("--phase", df_phase, "conditioning phase");
    df->add_option("--t", df_t, "timestep in [0, 1]");
    df->add_option("--block", df_block, "AR-MoE block index")->required();
    df->add_option("--seed", df_seed, "noise seed");
    df->add_option("--out", df_out, "output CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (ph->parsed())
            return run_phantom(ph_preset, ph_count, ph_out, ph_seed, ph_misalign,
                               mis_opt->count() > 0);
        if (tr->parsed())
            return run_train(tr_config, tr_data, tr_out, tr_steps, tr_seed,
                             tr_seed_opt->count() > 0);
        if (sa->parsed())
            return run_sample(sa_ckpt, sa_nc, sa_labels, sa_phase, sa_steps, sa_seed,
                              sa_out);
        if (ev->parsed()) return run_eval(ev_pred, ev_gt, ev_nc, ev_thresh, ev_tdist, ev_out);
        if (df->parsed())
            return run_dump_features(df_ckpt, df_nc, df_ce, df_labels, df_phase, df_t,
                                     df_block, df_seed, df_out);
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
