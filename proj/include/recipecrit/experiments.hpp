#pragma once

// Evaluation harnesses: editing (add/remove success against the filtered-decode
// baseline), the stopping-criterion comparison and denoising reconstruction.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "recipecrit/checkpoint.hpp"
#include "recipecrit/corpus.hpp"
#include "recipecrit/critique.hpp"
#include "recipecrit/metrics.hpp"

namespace recipecrit {

// Percentages are in [0, 100]. target_id is -1 for the macro average over targets.
struct MetricsRow {
    std::string experiment;
    std::string criterion;  // pipeline or stopping criterion
    std::string direction;  // add, remove, or "-" for reconstruction
    int target_id = -1;
    int n = 0;
    double success_rate = 0.0;
    double iou = 0.0;
    double f1 = 0.0;
    double coh_p = 0.0;
    double coh_r = 0.0;
    double coh_f1 = 0.0;
    double mean_iters = 0.0;
    std::uint64_t seed = 0;
    std::string model_digest;

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;

    // Rows for the macro averages only.
    [[nodiscard]] std::vector<MetricsRow> summary() const;
    [[nodiscard]] const MetricsRow& find(const std::string& criterion, const std::string& direction) const;
    // Hex digest of the machine format.
    [[nodiscard]] std::string digest() const;
    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

struct ExperimentConfig {
    int n_targets = 10;
    int recipes_per_side = 20;
    int min_support = 50;
    std::uint64_t seed = 0;
    CritiqueConfig critique;
    SuccessRule rule = SuccessRule::ListAndText;
    double mask_ratio = 0.5;  // reconstruction noise
    // 0 uses the OpenMP default; 1 evaluates recipes serially.
    int threads = 0;

    void validate() const;
    [[nodiscard]] std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
};

// Targets from the train split, recipes sampled from validation and test. Targets
// without enough recipes on either side of the pool are skipped.
std::vector<CritiqueEvalSet> build_eval_sets(const Splits& data, const IngredientVocab& vocab,
                                             const ExperimentConfig& cfg);

// An editing pipeline maps a recipe and a critique to an edited recipe.
using EditPipeline = std::function<EditedRecipe(const Recipe&, const Critique&)>;

struct NamedPipeline {
    std::string name;
    EditPipeline run;
};

// Adds on the negative side, removes on the positive side of every eval set.
MetricsReport run_editing(const std::string& experiment, const std::vector<CritiqueEvalSet>& sets,
                          const std::vector<NamedPipeline>& pipelines, const IngredientVocab& vocab,
                          const ExperimentConfig& cfg, const std::string& model_digest = "");

// Critiquing with early stopping against the filtered-decode baseline.
MetricsReport run_rq1(LoadedModel& model, const std::vector<CritiqueEvalSet>& sets, const ExperimentConfig& cfg);
// Early stopping against the local and global threshold criteria.
MetricsReport run_rq2(LoadedModel& model, const std::vector<CritiqueEvalSet>& sets, const ExperimentConfig& cfg,
                      const std::vector<StopCriterion>& criteria = {StopCriterion::EarlyStopping,
                                                                    StopCriterion::LocalThreshold,
                                                                    StopCriterion::GlobalL1Threshold});

// A reconstruction maps a noised recipe to (ingredient set, instructions).
struct Reconstruction {
    std::vector<int> ingredients;
    std::vector<std::string> instructions;
};
using Reconstructor = std::function<Reconstruction(const NoisedRecipe&)>;

MetricsReport run_reconstruction(const std::string& name, const std::vector<Recipe>& test,
                                 const Reconstructor& reconstruct, const IngredientVocab& vocab,
                                 const ExperimentConfig& cfg, const std::string& model_digest = "");
MetricsReport run_reconstruction(LoadedModel& model, const std::vector<Recipe>& test, const ExperimentConfig& cfg);
// Predicts the |y| most frequent train ingredients for each recipe, with no instructions.
Reconstructor majority_baseline(const std::vector<Recipe>& train, int vocab_size);

enum class ReportFormat { Machine, Table };
std::string format_report(const MetricsReport& report, ReportFormat format);
MetricsReport parse_machine_report(const std::string& text);
void emit_report(const MetricsReport& report, const std::string& path, ReportFormat format);

}  // namespace recipecrit
