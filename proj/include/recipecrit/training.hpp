#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "recipecrit/checkpoint.hpp"
#include "recipecrit/corpus.hpp"
#include "recipecrit/model.hpp"

namespace recipecrit {

struct TrainConfig {
    int batch_size = 32;
    double learning_rate = 1e-4;
    double dropout = 0.2;
    double mask_ratio = 0.5;
    int max_epochs = 30;
    int patience_epochs = 5;
    std::uint64_t seed = 0;
    int stage = 1;
    double clip_norm = 1.0;  // global gradient norm; 0 disables clipping
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    [[nodiscard]] std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    int stage = 1;
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    bool early_stopped = false;
    double wall_seconds = 0.0;
    std::string checkpoint;

    [[nodiscard]] std::string to_json() const;
};

// Loss became NaN or infinite.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Adam {
public:
    Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps);
    // Applies one update from the accumulated gradients.
    void step();
    [[nodiscard]] long long steps() const { return t_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Matrix> m_, v_;
    double lr_, b1_, b2_, eps_;
    long long t_ = 0;
};

// Scales the gradients so their joint L2 norm is at most max_norm; returns the norm before scaling.
double clip_global_norm(const std::vector<Parameter*>& params, double max_norm);

// Word vocabulary over titles, ingredient lines and instructions.
TokenVocab build_token_vocab(const std::vector<Recipe>& recipes, int min_count = 3);

// One fresh mask pattern per recipe, drawn in order from rng.
std::vector<NoisedRecipe> noise_epoch(const std::vector<Recipe>& recipes, double mask_ratio, std::mt19937_64& rng);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Denoising stage: encoder and ingredient predictor on L_ing. Writes a stage-1
// checkpoint to checkpoint_path when it is not empty. The model ends with the
// parameters of the best validation epoch.
TrainReport train_stage1(const Splits& data, Model& model, const TokenVocab& tokens,
                         const IngredientVocab& ingredients, const TrainConfig& cfg,
                         const std::string& checkpoint_path = "", const EpochCallback& on_epoch = {});

// Decoder stage on L_ins with the encoder frozen. Requires a model loaded from a
// stage-1 (or later) checkpoint; throws std::invalid_argument otherwise.
TrainReport train_stage2(const Splits& data, LoadedModel& loaded, const TrainConfig& cfg,
                         const std::string& checkpoint_path = "", const EpochCallback& on_epoch = {});

}  // namespace recipecrit
