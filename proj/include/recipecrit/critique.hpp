#pragma once

// Gradient-based critiquing of the latent vector, and the recipe-editing
// pipelines built on top of it.

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "recipecrit/corpus.hpp"
#include "recipecrit/model.hpp"

namespace recipecrit {

enum class Direction { Add, Remove };

struct Critique {
    int ingredient = -1;
    Direction direction = Direction::Add;

    friend bool operator==(const Critique&, const Critique&) = default;
};

enum class StopCriterion { EarlyStopping, LocalThreshold, GlobalL1Threshold };
enum class Termination { PatienceExhausted, MaxIters, ThresholdMet, ZeroGradient };

std::string to_string(Direction d);
std::string to_string(StopCriterion c);
std::string to_string(Termination t);
Direction direction_from_string(const std::string& s);
StopCriterion criterion_from_string(const std::string& s);

struct CritiqueConfig {
    double alpha0 = 1.0;
    double decay = 0.9;
    int patience = 5;
    // Iterations run while t < max_iters, t starting at 1.
    int max_iters = 100;
    StopCriterion criterion = StopCriterion::EarlyStopping;
    double threshold = 0.1;

    void validate() const;
    [[nodiscard]] std::string to_json() const;
    static CritiqueConfig from_json(const std::string& text);
};

struct TraceStep {
    int t = 0;
    double alpha = 0.0;  // α_{t-1}, the step length used to reach z_t
    double loss = 0.0;   // L_ing at z_{t-1}
    std::vector<double> deltas;  // |ỹ_c − ŷ_c| at z_t, one per critique
    double progress = 0.0;       // max of deltas
    double l1 = 0.0;             // ‖C(z_t) − ỹ‖₁
    double best_val = 0.0;
    bool accepted = false;
};

struct CritiqueTrace {
    std::vector<TraceStep> steps;
    Termination reason = Termination::MaxIters;
    double initial_progress = 0.0;  // progress measure at z_0
    int returned_step = 0;          // t of the returned z, 0 for the input

    [[nodiscard]] std::string to_json() const;
};

struct CritiqueResult {
    Matrix z;
    CritiqueTrace trace;
};

class CritiqueError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ỹ: the prediction thresholded at 0.5, critiqued coordinates overwritten. EOS
// fires at the size of the positive set.
IngredientTarget build_target(const IngredientPrediction& prediction, std::span<const Critique> critiques);

// The predictor seen by the critiquing loop: probabilities of C(z) and the
// gradient of L_ing with respect to z.
struct LatentObjective {
    std::function<std::vector<double>(const Matrix& z)> probabilities;
    std::function<Matrix(const Matrix& z, const IngredientTarget& target, double* loss)> gradient;
};
LatentObjective model_objective(Model& model);

CritiqueResult critique_latent(const LatentObjective& objective, const Matrix& z, const IngredientTarget& target,
                               std::span<const Critique> critiques, const CritiqueConfig& cfg);
// Builds ỹ from C(z) and runs the loop.
CritiqueResult critique_latent(Model& model, const Matrix& z, std::span<const Critique> critiques,
                               const CritiqueConfig& cfg);

struct EditedRecipe {
    std::string base_id;
    std::vector<Critique> critiques;
    Matrix z_before, z_after;
    std::vector<int> ingredients_before;  // predicted from z_before
    std::vector<int> ingredients_after;   // the edited set, sorted
    std::vector<std::string> instructions;
    CritiqueTrace trace;
};

// Encoder input for an edit: removal critiques mask the target's lines and the
// steps mentioning it; additions use the full recipe.
EncoderInput edit_input(const Recipe& recipe, std::span<const Critique> critiques, const IngredientVocab& ingredients,
                        const TokenVocab& tokens);

// Decodes steps for z and an ingredient set.
std::vector<std::string> decode_instructions(Model& model, const Matrix& z, const std::vector<int>& ingredient_set,
                                             const TokenVocab& tokens);

EditedRecipe edit_recipe(const Recipe& recipe, std::span<const Critique> critiques, Model& model,
                         const TokenVocab& tokens, const IngredientVocab& ingredients, const CritiqueConfig& cfg);
// Same pipeline without moving z; the predicted set is edited directly.
EditedRecipe filtered_decode_baseline(const Recipe& recipe, std::span<const Critique> critiques, Model& model,
                                      const TokenVocab& tokens, const IngredientVocab& ingredients);

}  // namespace recipecrit
