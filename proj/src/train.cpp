#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kernels.hpp"

namespace vce {

namespace fs = std::filesystem;
using nlohmann::json;

void OptimConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("optim: lr must be > 0");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
        throw ConfigError("optim: betas must be in (0, 1)");
    if (eps <= 0.0) throw ConfigError("optim: eps must be > 0");
}

void TrainConfig::validate() const {
    model.validate();
    align.validate();
    optim.validate();
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_steps < 1) throw ConfigError("train: max_steps must be >= 1");
    if (model.repa_channels != align.teacher_channels)
        throw ConfigError("train: model.repa_channels (" +
                          std::to_string(model.repa_channels) +
                          ") must equal align.teacher_channels (" +
                          std::to_string(align.teacher_channels) + ")");
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"depth", c.depth},
             {"width", c.width},
             {"heads", c.heads},
             {"patch", c.patch},
             {"token_grid", c.token_grid},
             {"moe_block_indices", c.moe_block_indices},
             {"repa_block_index", c.repa_block_index},
             {"memory_slots", c.memory_slots},
             {"organ_count", c.organ_count},
             {"ffn_mult", c.ffn_mult},
             {"repa_channels", c.repa_channels}};
}

void from_json(const json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.depth = j.value("depth", c.depth);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.patch = j.value("patch", c.patch);
    c.token_grid = j.value("token_grid", c.token_grid);
    c.moe_block_indices = j.value("moe_block_indices", c.moe_block_indices);
    c.repa_block_index = j.value("repa_block_index", c.repa_block_index);
    c.memory_slots = j.value("memory_slots", c.memory_slots);
    c.organ_count = j.value("organ_count", c.organ_count);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.repa_channels = j.value("repa_channels", c.repa_channels);
}

void to_json(json& j, const AlignConfig& c) {
    j = json{{"tau_pos", c.tau_pos},
             {"alpha_enh", c.alpha_enh},
             {"alpha_mis", c.alpha_mis},
             {"alpha_bg", c.alpha_bg},
             {"lambda_int", c.lambda_int},
             {"lambda_phase", c.lambda_phase},
             {"teacher_seed", c.teacher_seed},
             {"teacher_channels", c.teacher_channels},
             {"eps", c.eps}};
}

void from_json(const json& j, AlignConfig& c) {
    c = AlignConfig{};
    c.tau_pos = j.value("tau_pos", c.tau_pos);
    c.alpha_enh = j.value("alpha_enh", c.alpha_enh);
    c.alpha_mis = j.value("alpha_mis", c.alpha_mis);
    c.alpha_bg = j.value("alpha_bg", c.alpha_bg);
    c.lambda_int = j.value("lambda_int", c.lambda_int);
    c.lambda_phase = j.value("lambda_phase", c.lambda_phase);
    c.teacher_seed = j.value("teacher_seed", c.teacher_seed);
    c.teacher_channels = j.value("teacher_channels", c.teacher_channels);
    c.eps = j.value("eps", c.eps);
}

void to_json(json& j, const OptimConfig& c) {
    j = json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const json& j, OptimConfig& c) {
    c = OptimConfig{};
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"model", c.model},         {"align", c.align},
             {"optim", c.optim},         {"batch_size", c.batch_size},
             {"max_steps", c.max_steps}, {"seed", c.seed},
             {"data_dir", c.data_dir},   {"out_dir", c.out_dir},
             {"flip_augment", c.flip_augment}, {"ckpt_every", c.ckpt_every}};
}

void from_json(const json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("model")) j.at("model").get_to(c.model);
    if (j.contains("align")) j.at("align").get_to(c.align);
    if (j.contains("optim")) j.at("optim").get_to(c.optim);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.seed = j.value("seed", c.seed);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.flip_augment = j.value("flip_augment", c.flip_augment);
    c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
}

template <class T>
TensorPtr<T> total_loss(const TensorPtr<T>& fm, const TensorPtr<T>& l_int,
                        const TensorPtr<T>& l_phase, const AlignConfig& cfg) {
    return add(fm, add(scale(l_int, cfg.lambda_int), scale(l_phase, cfg.lambda_phase)));
}

double total_loss_value(double fm, double l_int, double l_phase, const AlignConfig& cfg) {
    return fm + cfg.lambda_int * l_int + cfg.lambda_phase * l_phase;
}

template TensorPtr<float> total_loss<float>(const TensorPtr<float>&, const TensorPtr<float>&,
                                            const TensorPtr<float>&, const AlignConfig&);
template TensorPtr<double> total_loss<double>(const TensorPtr<double>&,
                                              const TensorPtr<double>&,
                                              const TensorPtr<double>&, const AlignConfig&);

void Adam::init(const NamedParams<float>& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& [name, p] : params.items) {
        m.emplace_back(p->numel(), 0.0f);
        v.emplace_back(p->numel(), 0.0f);
    }
}

void Adam::step(NamedParams<float>& params) {
    if (m.size() != params.items.size())
        throw ConfigError("adam: optimizer state does not match parameter list");
    ++t;
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(t));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(t));
    const float lr = static_cast<float>(cfg.lr);
    const float ep = static_cast<float>(cfg.eps);
    for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
        auto& p = params.items[pi].second;
        if (p->grad.empty()) continue;
        float* mp = m[pi].data();
        float* vp = v[pi].data();
        float* w = p->data.data();
        const float* g = p->grad.data();
        const std::int64_t n = p->numel();
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i) {
            mp[i] = b1 * mp[i] + (1.0f - b1) * g[i];
            vp[i] = b2 * vp[i] + (1.0f - b2) * g[i] * g[i];
            const float mhat = mp[i] / bc1;
            const float vhat = vp[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + ep);
        }
    }
}

std::vector<CaseData> load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw FormatError("data directory '" + dir + "' not found");
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        const std::string suffix = "_NC.ctvol";
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw FormatError("no *_NC.ctvol volumes under '" + dir + "'");
    std::vector<CaseData> out;
    for (const auto& id : ids) {
        CaseData c;
        c.id = id;
        const std::string base = dir + "/" + id;
        c.nc = read_volume(base + "_NC.ctvol");
        c.arterial = read_volume(base + "_A.ctvol");
        c.venous = read_volume(base + "_V.ctvol");
        c.labels = read_labels(base + "_labels.ctvol");
        if (c.labels.shape != c.nc.shape)
            throw FormatError("case '" + id + "': label shape " + dims_str(c.labels.shape) +
                              " does not match NC " + dims_str(c.nc.shape));
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

Volume flip_volume(const Volume& v, bool fz, bool fy, bool fx) {
    if (!fz && !fy && !fx) return v;
    Volume out = v;
    const auto& s = v.shape;
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x)
                out.at(z, y, x) = v.at(fz ? s[0] - 1 - z : z, fy ? s[1] - 1 - y : y,
                                       fx ? s[2] - 1 - x : x);
    return out;
}

LabelVolume flip_labels(const LabelVolume& v, bool fz, bool fy, bool fx) {
    if (!fz && !fy && !fx) return v;
    LabelVolume out = v;
    const auto& s = v.shape;
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x)
                out.labels[(z * s[1] + y) * s[2] + x] =
                    v.at(fz ? s[0] - 1 - z : z, fy ? s[1] - 1 - y : y, fx ? s[2] - 1 - x : x);
    return out;
}

}  // namespace

std::string curves_csv(const std::vector<StepRecord>& records) {
    std::string out = "step,fm,int,phase,total\n";
    char buf[160];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(r.step), r.fm, r.l_int, r.l_phase, r.total);
        out += buf;
    }
    return out;
}

std::string curve_hash(const std::vector<StepRecord>& records) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& r : records) {
        mix(&r.fm, 4);
        mix(&r.l_int, 4);
        mix(&r.l_phase, 4);
        mix(&r.total, 4);
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Trainer::Trainer(TrainConfig cfg)
    : cfg_(std::move(cfg)), model_(DitModel<float>::init(cfg_.model, cfg_.seed)),
      rng_(cfg_.seed + 0x9e3779b97f4a7c15ull) {
    kern::tune_allocator();
    cfg_.validate();
    data_ = load_dataset(cfg_.data_dir);
    const Dims3 vol_shape = data_.front().nc.shape;
    const Dims3 grid = token_grid_for(vol_shape, cfg_.model.patch_dims());
    if (grid != cfg_.model.token_grid)
        throw ConfigError("train: data " + dims_str(vol_shape) + " with patch gives grid " +
                          dims_str(grid) + ", model expects " +
                          dims_str(cfg_.model.token_grid));
    adam_.cfg = cfg_.optim;
    adam_.init(model_.params);
}

StepRecord Trainer::step_once() {
    const PatchDims patch = cfg_.model.patch_dims();
    model_.params.zero_grads();
    double fm_acc = 0, int_acc = 0, phase_acc = 0, total_acc = 0;
    for (int bi = 0; bi < cfg_.batch_size; ++bi) {
        const auto& cs = data_[rng_.uniform_int(static_cast<std::int64_t>(data_.size()))];
        const Phase ph = rng_.coin() ? Phase::A : Phase::V;
        bool fz = false, fy = false, fx = false;
        if (cfg_.flip_augment) {
            fz = rng_.coin();
            fy = rng_.coin();
            fx = rng_.coin();
        }
        const double t = rng_.uniform();

        const Volume nc = flip_volume(cs.nc, fz, fy, fx);
        const Volume ce = flip_volume(cs.phase_volume(ph), fz, fy, fx);
        const LabelVolume lbl = flip_labels(cs.labels, fz, fy, fx);

        TokenSeq z_nc = patchify(normalize_hu(nc), nc.shape, patch);
        TokenSeq z_ce = patchify(normalize_hu(ce), ce.shape, patch);
        TokenSeq z_eps = gaussian_tokens(z_ce, rng_);
        FlowSample fs = make_flow_sample(z_ce, z_eps, t);
        const TokenLabels labels_tok = downsample_labels(lbl, patch);

        auto fwd = model_.forward(fs.z_t, z_nc, t, ph, labels_tok);
        auto l_fm = fm_loss(fwd.velocity, tokens_to_tensor(fs.v));
        TensorPtr<float> loss = l_fm;
        float li_v = 0, lp_v = 0;
        if (cfg_.align.enabled()) {
            auto tf = make_teacher_features<float>(nc, ce, patch, cfg_.align);
            auto h = model_.repa_project(fwd.tapped);
            auto li = loss_int(h, tf, cfg_.align.eps);
            auto lp = loss_phase(h, tf, cfg_.align.eps);
            li_v = li->item();
            lp_v = lp->item();
            loss = total_loss(l_fm, li, lp, cfg_.align);
        }
        if (cfg_.batch_size > 1) loss = scale(loss, 1.0 / cfg_.batch_size);
        const float fm_v = l_fm->item();
        const float total_v = loss->item() * (cfg_.batch_size > 1 ? cfg_.batch_size : 1);
        backward(loss, /*release=*/true);
        fm_acc += fm_v;
        int_acc += li_v;
        phase_acc += lp_v;
        total_acc += total_v;
    }
    adam_.step(model_.params);
    ++step_;
    StepRecord r;
    r.step = step_;
    r.fm = static_cast<float>(fm_acc / cfg_.batch_size);
    r.l_int = static_cast<float>(int_acc / cfg_.batch_size);
    r.l_phase = static_cast<float>(phase_acc / cfg_.batch_size);
    r.total = static_cast<float>(total_acc / cfg_.batch_size);
    if (!std::isfinite(r.total))
        throw NumericError("train: non-finite loss at step " + std::to_string(step_));
    return r;
}

std::vector<StepRecord> Trainer::run() {
    if (!cfg_.out_dir.empty()) fs::create_directories(cfg_.out_dir);
    std::vector<StepRecord> records;
    records.reserve(cfg_.max_steps);
    while (step_ < cfg_.max_steps) {
        try {
            records.push_back(step_once());
        } catch (const NumericError&) {
            if (!cfg_.out_dir.empty())
                save_checkpoint(cfg_.out_dir + "/debug_step" + std::to_string(step_) +
                                    ".phsr",
                                make_checkpoint());
            throw;
        }
        if (!cfg_.out_dir.empty() && cfg_.ckpt_every > 0 && step_ % cfg_.ckpt_every == 0)
            save_checkpoint(cfg_.out_dir + "/step" + std::to_string(step_) + ".phsr",
                            make_checkpoint());
    }
    if (!cfg_.out_dir.empty()) {
        save_checkpoint(cfg_.out_dir + "/final.phsr", make_checkpoint());
        std::ofstream os(cfg_.out_dir + "/curves.csv", std::ios::trunc);
        os << curves_csv(records);
    }
    return records;
}

Checkpoint Trainer::make_checkpoint() const {
    Checkpoint ck;
    ck.config = cfg_;
    ck.step = step_;
    ck.adam_t = adam_.t;
    ck.rng_state = rng_.state();
    for (const auto& [name, p] : model_.params.items) {
        CheckpointTensor t;
        t.name = name;
        t.shape = p->shape;
        t.data = p->data;
        ck.tensors.push_back(std::move(t));
    }
    for (std::size_t i = 0; i < model_.params.items.size(); ++i) {
        const auto& name = model_.params.items[i].first;
        ck.tensors.push_back({"adam.m." + name, model_.params.items[i].second->shape,
                              adam_.m[i]});
        ck.tensors.push_back({"adam.v." + name, model_.params.items[i].second->shape,
                              adam_.v[i]});
    }
    return ck;
}

void Trainer::restore(const Checkpoint& ckpt) {
    step_ = ckpt.step;
    adam_.t = ckpt.adam_t;
    rng_.restore(ckpt.rng_state);
    for (std::size_t i = 0; i < model_.params.items.size(); ++i) {
        const auto& name = model_.params.items[i].first;
        const auto* t = ckpt.find(name);
        const auto* tm = ckpt.find("adam.m." + name);
        const auto* tv = ckpt.find("adam.v." + name);
        if (!t || !tm || !tv)
            throw FormatError("checkpoint: missing tensor '" + name + "'");
        if (t->shape != model_.params.items[i].second->shape)
            throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                              shape_str(t->shape) + ", model wants " +
                              shape_str(model_.params.items[i].second->shape));
        model_.params.items[i].second->data = t->data;
        adam_.m[i] = tm->data;
        adam_.v[i] = tv->data;
    }
}

Checkpoint checkpoint_from_trainer(const Trainer& t) { return t.make_checkpoint(); }

DitModel<float> model_from_checkpoint(const Checkpoint& ckpt, TrainConfig* cfg_out) {
    TrainConfig cfg = ckpt.config.get<TrainConfig>();
    if (cfg_out) *cfg_out = cfg;
    DitModel<float> model = DitModel<float>::init(cfg.model, cfg.seed);
    for (auto& [name, p] : model.params.items) {
        const auto* t = ckpt.find(name);
        if (!t) throw FormatError("checkpoint: missing tensor '" + name + "'");
        if (t->shape != p->shape)
            throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                              shape_str(t->shape) + ", model wants " + shape_str(p->shape));
        p->data = t->data;
    }
    return model;
}

Volume sample_volume(DitModel<float>& model, const Volume& nc, const TokenLabels& labels,
                     Phase phase, int steps, std::uint64_t seed) {
    if (phase != Phase::A && phase != Phase::V)
        throw ConfigError("sample: phase must be A or V");
    const PatchDims patch = model.cfg.patch_dims();
    TokenSeq z_nc = patchify(normalize_hu(nc), nc.shape, patch);
    TokenLabels lab = labels;
    if (lab.empty()) lab.assign(model.cfg.n_tokens(), 0);

    model.set_requires_grad(false);
    VelocityModel<float> fn = [&](const TokenSeq& z, const TokenSeq& cond, double t) {
        auto fwd = model.forward(z, cond, t, phase, lab);
        TokenSeq v = z;
        v.values = fwd.velocity->data;
        return v;
    };
    TokenSeq z = euler_sample(fn, z_nc, steps, seed);
    model.set_requires_grad(true);
    return denormalize_hu(unpatchify(z, patch, nc.shape), nc.shape, nc.spacing_mm, phase);
}

nlohmann::json evaluate_dirs(const std::string& pred_dir, const std::string& gt_dir,
                             const std::string& nc_dir, const EvalOptions& opts,
                             std::vector<std::string>* mismatches) {
    if (!fs::is_directory(pred_dir))
        throw FormatError("prediction directory '" + pred_dir + "' not found");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(pred_dir))
        if (e.path().extension() == ".ctvol") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());

    json report;
    report["header"] = {{"threshold_hu", opts.threshold_hu},
                        {"psnr_data_range", kHuRange},
                        {"psnr_cap_db", kPsnrCapDb},
                        {"ssim_window", kSsimWindow},
                        {"ssim_sigma", kSsimSigma},
                        {"ssim_k1", kSsimK1},
                        {"ssim_k2", kSsimK2}};
    json per_volume = json::array();
    std::vector<double> psnrs, ssims, dices, recalls, precisions, tdists;

    for (const auto& name : names) {
        const std::string stem = name.substr(0, name.size() - 6);  // drop .ctvol
        const auto us = stem.rfind('_');
        const std::string nc_name =
            (us == std::string::npos ? stem : stem.substr(0, us)) + "_NC.ctvol";
        const std::string gt_path = gt_dir + "/" + name;
        const std::string nc_path = nc_dir + "/" + nc_name;
        if (!fs::exists(gt_path) || !fs::exists(nc_path)) {
            if (mismatches)
                mismatches->push_back(stem + " (missing " +
                                      (!fs::exists(gt_path) ? gt_path : nc_path) + ")");
            continue;
        }
        const Volume pred = read_volume(pred_dir + "/" + name);
        const Volume gt = read_volume(gt_path);
        const Volume nc = read_volume(nc_path);

        EvalReport r;
        r.id = stem;
        r.psnr_db = psnr(pred, gt);
        r.ssim = ssim3d(pred, gt);
        const auto pm = enhancement_mask(nc, pred, opts.threshold_hu);
        const auto gm = enhancement_mask(nc, gt, opts.threshold_hu);
        const auto sc = overlap_scores(pm, gm);
        r.dice = sc.dice;
        r.recall = sc.recall;
        r.precision = sc.precision;

        json jr = {{"id", r.id},         {"psnr", r.psnr_db}, {"ssim", r.ssim},
                   {"dice", r.dice},     {"recall", r.recall}, {"precision", r.precision}};
        if (opts.teacher_distance) {
            // Mean L2 distance between teacher features of pred and gt. A
            // rough distributional proxy; not comparable to Inception-based
            // distances.
            const PatchDims patch = opts.patch;
            const auto fp = teacher_extract<double>(pred, patch, opts.align);
            const auto fg = teacher_extract<double>(gt, patch, opts.align);
            double acc = 0;
            const std::int64_t ct = opts.align.teacher_channels;
            const std::int64_t n_tok = static_cast<std::int64_t>(fp.size()) / ct;
            for (std::int64_t i = 0; i < n_tok; ++i) {
                double d2 = 0;
                for (std::int64_t j = 0; j < ct; ++j) {
                    const double d = fp[i * ct + j] - fg[i * ct + j];
                    d2 += d * d;
                }
                acc += std::sqrt(d2);
            }
            const double dist = acc / std::max<std::int64_t>(1, n_tok);
            jr["teacher_feature_distance_not_fid"] = dist;
            tdists.push_back(dist);
        }
        per_volume.push_back(jr);
        psnrs.push_back(r.psnr_db);
        ssims.push_back(r.ssim);
        dices.push_back(r.dice);
        recalls.push_back(r.recall);
        precisions.push_back(r.precision);
    }
    report["per_volume"] = per_volume;

    auto agg = [](const std::vector<double>& v) {
        json j;
        if (v.empty()) return json{{"mean", nullptr}, {"std", nullptr}};
        double mean = 0;
        for (double x : v) mean += x;
        mean /= v.size();
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
        return json{{"mean", mean}, {"std", sd}};
    };
    report["aggregate"] = {{"psnr", agg(psnrs)},     {"ssim", agg(ssims)},
                           {"dice", agg(dices)},     {"recall", agg(recalls)},
                           {"precision", agg(precisions)}};
    if (opts.teacher_distance)
        report["aggregate"]["teacher_feature_distance_not_fid"] = agg(tdists);
    report["count"] = per_volume.size();
    return report;
}

std::string dump_features_csv(DitModel<float>& model, const Volume& nc, const Volume& ce,
                              const TokenLabels& labels, Phase phase, double t,
                              int block_index, std::uint64_t noise_seed) {
    const PatchDims patch = model.cfg.patch_dims();
    TokenSeq z_nc = patchify(normalize_hu(nc), nc.shape, patch);
    TokenSeq z_ce = patchify(normalize_hu(ce), ce.shape, patch);
    Rng rng(noise_seed);
    TokenSeq z_eps = gaussian_tokens(z_ce, rng);
    FlowSample fs = make_flow_sample(z_ce, z_eps, t);

    model.set_requires_grad(false);
    auto fwd = model.forward(fs.z_t, z_nc, t, phase, labels, block_index);
    model.set_requires_grad(true);

    const std::int64_t n = model.cfg.n_tokens(), c = model.cfg.width;
    std::string csv = "token,label,t";
    for (std::int64_t j = 0; j < c; ++j) csv += ",pre_" + std::to_string(j);
    for (std::int64_t j = 0; j < c; ++j) csv += ",post_" + std::to_string(j);
    csv += "\n";
    char buf[48];
    for (std::int64_t i = 0; i < n; ++i) {
        csv += std::to_string(i) + "," + std::to_string(labels[i]);
        std::snprintf(buf, sizeof(buf), ",%.9g", t);
        csv += buf;
        for (std::int64_t j = 0; j < c; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.9g", fwd.moe_pre->data[i * c + j]);
            csv += buf;
        }
        for (std::int64_t j = 0; j < c; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.9g", fwd.moe_post->data[i * c + j]);
            csv += buf;
        }
        csv += "\n";
    }
    return csv;
}

}  // namespace vce
