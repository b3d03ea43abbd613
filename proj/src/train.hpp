#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "dit.hpp"
#include "iprepa.hpp"
#include "metrics.hpp"
#include "phantom.hpp"
#include "volume_io.hpp"

namespace vce {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    void validate() const;
};

struct TrainConfig {
    ModelConfig model;
    AlignConfig align;
    OptimConfig optim;
    int batch_size = 1;
    std::int64_t max_steps = 200;
    std::uint64_t seed = 0;
    std::string data_dir;
    std::string out_dir;
    bool flip_augment = true;
    std::int64_t ckpt_every = 0;  // 0 = final checkpoint only
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AlignConfig& c);
void from_json(const nlohmann::json& j, AlignConfig& c);
void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// fm + lambda_int * l_int + lambda_phase * l_phase.
template <class T>
TensorPtr<T> total_loss(const TensorPtr<T>& fm, const TensorPtr<T>& l_int,
                        const TensorPtr<T>& l_phase, const AlignConfig& cfg);
double total_loss_value(double fm, double l_int, double l_phase, const AlignConfig& cfg);

struct Adam {
    OptimConfig cfg;
    std::int64_t t = 0;
    std::vector<std::vector<float>> m, v;

    void init(const NamedParams<float>& params);
    void step(NamedParams<float>& params);
};

struct CaseData {
    std::string id;
    Volume nc;
    Volume arterial;
    Volume venous;
    LabelVolume labels;
    const Volume& phase_volume(Phase p) const {
        if (p == Phase::A) return arterial;
        if (p == Phase::V) return venous;
        return nc;
    }
};

// Loads every <id>_NC.ctvol with its _A/_V/_labels siblings, sorted by id.
std::vector<CaseData> load_dataset(const std::string& dir);

struct StepRecord {
    std::int64_t step = 0;
    float fm = 0, l_int = 0, l_phase = 0, total = 0;
};

std::string curves_csv(const std::vector<StepRecord>& records);
// FNV-1a over the raw float bits of every record; pins golden runs.
std::string curve_hash(const std::vector<StepRecord>& records);

class Trainer {
  public:
    explicit Trainer(TrainConfig cfg);

    // One optimizer step (averages batch_size samples). Draw order per
    // sample: case index, phase coin, flip coins (when enabled), t, noise.
    StepRecord step_once();

    // Runs to max_steps, writes curves.csv and checkpoints under out_dir.
    // Saves a debug checkpoint and rethrows if the loss goes non-finite.
    std::vector<StepRecord> run();

    Checkpoint make_checkpoint() const;
    void restore(const Checkpoint& ckpt);

    DitModel<float>& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t step() const { return step_; }
    const std::vector<CaseData>& dataset() const { return data_; }

  private:
    TrainConfig cfg_;
    DitModel<float> model_;
    Adam adam_;
    Rng rng_;
    std::vector<CaseData> data_;
    std::int64_t step_ = 0;
};

// Euler-samples one volume from a trained model. Labels may be empty
// (all-background routing).
Volume sample_volume(DitModel<float>& model, const Volume& nc, const TokenLabels& labels,
                     Phase phase, int steps, std::uint64_t seed);

Checkpoint checkpoint_from_trainer(const Trainer& t);
DitModel<float> model_from_checkpoint(const Checkpoint& ckpt, TrainConfig* cfg_out = nullptr);

struct EvalOptions {
    double threshold_hu = 20.0;
    bool teacher_distance = false;  // optional feature-distance slot
    AlignConfig align;
    PatchDims patch{4, 8, 8};
};

// Per-volume reports plus mean/std aggregates; enhancement masks for pred
// and gt are both taken against the same NC volume.
nlohmann::json evaluate_dirs(const std::string& pred_dir, const std::string& gt_dir,
                             const std::string& nc_dir, const EvalOptions& opts,
                             std::vector<std::string>* mismatches = nullptr);

// Token features before/after the AR-MoE layer at block_index, as CSV.
std::string dump_features_csv(DitModel<float>& model, const Volume& nc, const Volume& ce,
                              const TokenLabels& labels, Phase phase, double t,
                              int block_index, std::uint64_t noise_seed);

}  // namespace vce
