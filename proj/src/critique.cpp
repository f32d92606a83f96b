#include "recipecrit/critique.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "json.hpp"

namespace recipecrit {

using json = nlohmann::json;

std::string to_string(Direction d) { return d == Direction::Add ? "add" : "remove"; }

std::string to_string(StopCriterion c) {
    switch (c) {
        case StopCriterion::EarlyStopping: return "early_stopping";
        case StopCriterion::LocalThreshold: return "local_threshold";
        case StopCriterion::GlobalL1Threshold: return "global_l1";
    }
    return "";
}

std::string to_string(Termination t) {
    switch (t) {
        case Termination::PatienceExhausted: return "patience_exhausted";
        case Termination::MaxIters: return "max_iters";
        case Termination::ThresholdMet: return "threshold_met";
        case Termination::ZeroGradient: return "zero_gradient";
    }
    return "";
}

Direction direction_from_string(const std::string& s) {
    if (s == "add") return Direction::Add;
    if (s == "remove") return Direction::Remove;
    throw std::invalid_argument("unknown critique direction: " + s);
}

StopCriterion criterion_from_string(const std::string& s) {
    if (s == "early_stopping") return StopCriterion::EarlyStopping;
    if (s == "local_threshold") return StopCriterion::LocalThreshold;
    if (s == "global_l1" || s == "global_l1_threshold") return StopCriterion::GlobalL1Threshold;
    throw std::invalid_argument("unknown stopping criterion: " + s);
}

void CritiqueConfig::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("critique config: ") + what);
    };
    need(alpha0 > 0.0 && std::isfinite(alpha0), "alpha0 must be positive");
    need(decay > 0.0 && decay <= 1.0, "decay must be in (0, 1]");
    need(patience >= 1, "patience must be positive");
    need(max_iters >= 1, "max_iters must be positive");
    need(threshold > 0.0 && threshold < 1.0, "threshold must be in (0, 1)");
}

std::string CritiqueConfig::to_json() const {
    json j{{"alpha0", alpha0},       {"decay", decay},
           {"patience", patience},   {"max_iters", max_iters},
           {"criterion", to_string(criterion)}, {"threshold", threshold}};
    return j.dump();
}

CritiqueConfig CritiqueConfig::from_json(const std::string& text) {
    CritiqueConfig c;
    try {
        const json j = json::parse(text);
        c.alpha0 = j.value("alpha0", c.alpha0);
        c.decay = j.value("decay", c.decay);
        c.patience = j.value("patience", c.patience);
        c.max_iters = j.value("max_iters", c.max_iters);
        if (j.contains("criterion")) c.criterion = criterion_from_string(j.at("criterion").get<std::string>());
        c.threshold = j.value("threshold", c.threshold);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("critique config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string CritiqueTrace::to_json() const {
    json steps_j = json::array();
    for (const auto& s : steps)
        steps_j.push_back({{"t", s.t},
                           {"alpha", s.alpha},
                           {"loss", s.loss},
                           {"deltas", s.deltas},
                           {"progress", s.progress},
                           {"l1", s.l1},
                           {"best_val", s.best_val},
                           {"accepted", s.accepted}});
    json j{{"steps", steps_j},
           {"reason", to_string(reason)},
           {"initial_progress", initial_progress},
           {"returned_step", returned_step}};
    return j.dump();
}

namespace {

void check_critiques(std::span<const Critique> critiques, int vocab_size) {
    std::set<int> add, remove;
    for (const auto& c : critiques) {
        if (c.ingredient < 0 || c.ingredient >= vocab_size)
            throw std::invalid_argument("critiqued ingredient " + std::to_string(c.ingredient) + " is out of range");
        (c.direction == Direction::Add ? add : remove).insert(c.ingredient);
    }
    for (int id : add)
        if (remove.count(id))
            throw std::invalid_argument("ingredient " + std::to_string(id) + " is both added and removed");
}

double desired(Direction d) { return d == Direction::Add ? 1.0 : 0.0; }

double l2_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

}  // namespace

IngredientTarget build_target(const IngredientPrediction& prediction, std::span<const Critique> critiques) {
    const int n = static_cast<int>(prediction.probabilities.size());
    check_critiques(critiques, n);
    IngredientTarget t;
    t.y.resize(n);
    for (int i = 0; i < n; ++i) t.y[i] = prediction.probabilities[i] > 0.5 ? 1.0 : 0.0;
    for (const auto& c : critiques) t.y[c.ingredient] = desired(c.direction);
    t.eos_step = std::max(1, static_cast<int>(t.positives().size()));
    return t;
}

LatentObjective model_objective(Model& model) {
    return {[&model](const Matrix& z) { return model.predict_ingredients(z).probabilities; },
            [&model](const Matrix& z, const IngredientTarget& target, double* loss) {
                return model.grad_ingredient_loss_wrt_z(z, target, loss);
            }};
}

CritiqueResult critique_latent(const LatentObjective& objective, const Matrix& z, const IngredientTarget& target,
                               std::span<const Critique> critiques, const CritiqueConfig& cfg) {
    cfg.validate();
    if (critiques.empty()) throw std::invalid_argument("critique_latent needs at least one critique");
    check_critiques(critiques, static_cast<int>(target.y.size()));

    auto measure = [&](const std::vector<double>& probs, TraceStep& s) {
        s.deltas.clear();
        s.progress = 0.0;
        for (const auto& c : critiques) {
            s.deltas.push_back(std::abs(desired(c.direction) - probs[c.ingredient]));
            s.progress = std::max(s.progress, s.deltas.back());
        }
        s.l1 = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) s.l1 += std::abs(probs[i] - target.y[i]);
    };

    CritiqueResult out;
    CritiqueTrace& trace = out.trace;
    {
        TraceStep s0;
        measure(objective.probabilities(z), s0);
        trace.initial_progress = s0.progress;
    }

    const bool early = cfg.criterion == StopCriterion::EarlyStopping;
    Matrix z_prev = z, z_star = z;
    double best_val = std::numeric_limits<double>::infinity();
    int patience = 0, t = 1;
    bool stopped = false;
    while ((!early || patience < cfg.patience) && t < cfg.max_iters) {
        TraceStep s;
        s.t = t;
        const Matrix g = objective.gradient(z_prev, target, &s.loss);
        const double norm = l2_norm(g);
        if (!std::isfinite(norm)) throw CritiqueError("critique gradient is not finite at t = " + std::to_string(t));
        if (norm == 0.0) {
            trace.reason = Termination::ZeroGradient;
            stopped = true;
            break;
        }
        s.alpha = cfg.alpha0 * std::pow(cfg.decay, t - 1);
        Matrix z_t = z_prev;
        for (std::size_t i = 0; i < z_t.data.size(); ++i) z_t.data[i] -= s.alpha * g.data[i] / norm;
        for (double v : z_t.data)
            if (!std::isfinite(v)) throw CritiqueError("latent vector became NaN at t = " + std::to_string(t));
        measure(objective.probabilities(z_t), s);
        if (s.progress < best_val) {
            best_val = s.progress;
            s.accepted = true;
            if (early) {
                z_star = z_t;
                trace.returned_step = t;
            }
            patience = 0;
        } else {
            ++patience;
        }
        s.best_val = best_val;
        trace.steps.push_back(s);
        z_prev = std::move(z_t);
        if ((cfg.criterion == StopCriterion::LocalThreshold && s.progress < cfg.threshold) ||
            (cfg.criterion == StopCriterion::GlobalL1Threshold && s.l1 < cfg.threshold)) {
            trace.reason = Termination::ThresholdMet;
            stopped = true;
            break;
        }
        ++t;
    }
    if (!stopped) trace.reason = early && patience >= cfg.patience ? Termination::PatienceExhausted : Termination::MaxIters;
    if (!early) {
        z_star = z_prev;
        trace.returned_step = trace.steps.empty() ? 0 : trace.steps.back().t;
    }
    out.z = std::move(z_star);
    return out;
}

CritiqueResult critique_latent(Model& model, const Matrix& z, std::span<const Critique> critiques,
                               const CritiqueConfig& cfg) {
    const IngredientTarget target = build_target(model.predict_ingredients(z), critiques);
    return critique_latent(model_objective(model), z, target, critiques, cfg);
}

namespace {

void check_removals(const Recipe& recipe, std::span<const Critique> critiques, const IngredientVocab& ingredients) {
    check_critiques(critiques, ingredients.size());
    for (const auto& c : critiques)
        if (c.direction == Direction::Remove && !recipe.has_ingredient(c.ingredient))
            throw std::invalid_argument("cannot remove " + ingredients.at(c.ingredient).canonical_name +
                                        ": not in recipe " + recipe.id);
}

}  // namespace

EncoderInput edit_input(const Recipe& recipe, std::span<const Critique> critiques, const IngredientVocab& ingredients,
                        const TokenVocab& tokens) {
    NoisedRecipe in = unmasked(recipe);
    for (const auto& c : critiques) {
        if (c.direction != Direction::Remove) continue;
        const NoisedRecipe m = mask_for_removal_critique(recipe, c.ingredient, ingredients);
        in.masked_ingredient_positions.insert(m.masked_ingredient_positions.begin(),
                                              m.masked_ingredient_positions.end());
        in.masked_instruction_positions.insert(m.masked_instruction_positions.begin(),
                                               m.masked_instruction_positions.end());
    }
    return make_encoder_input(in, tokens);
}

std::vector<std::string> decode_instructions(Model& model, const Matrix& z, const std::vector<int>& ingredient_set,
                                             const TokenVocab& tokens) {
    return split_steps(model.greedy_decode(z, ingredient_set), tokens);
}

EditedRecipe edit_recipe(const Recipe& recipe, std::span<const Critique> critiques, Model& model,
                         const TokenVocab& tokens, const IngredientVocab& ingredients, const CritiqueConfig& cfg) {
    check_removals(recipe, critiques, ingredients);
    EditedRecipe e;
    e.base_id = recipe.id;
    e.critiques.assign(critiques.begin(), critiques.end());
    e.z_before = model.encode(edit_input(recipe, critiques, ingredients, tokens));
    const IngredientPrediction before = model.predict_ingredients(e.z_before);
    e.ingredients_before = before.top_set;
    CritiqueResult r =
        critique_latent(model_objective(model), e.z_before, build_target(before, critiques), critiques, cfg);
    e.z_after = std::move(r.z);
    e.trace = std::move(r.trace);
    e.ingredients_after = model.predict_ingredients(e.z_after).top_set;
    e.instructions = decode_instructions(model, e.z_after, e.ingredients_after, tokens);
    return e;
}

EditedRecipe filtered_decode_baseline(const Recipe& recipe, std::span<const Critique> critiques, Model& model,
                                      const TokenVocab& tokens, const IngredientVocab& ingredients) {
    check_removals(recipe, critiques, ingredients);
    EditedRecipe e;
    e.base_id = recipe.id;
    e.critiques.assign(critiques.begin(), critiques.end());
    e.z_before = model.encode(edit_input(recipe, critiques, ingredients, tokens));
    e.z_after = e.z_before;
    e.ingredients_before = model.predict_ingredients(e.z_before).top_set;
    std::set<int> edited(e.ingredients_before.begin(), e.ingredients_before.end());
    for (const auto& c : critiques) {
        if (c.direction == Direction::Add)
            edited.insert(c.ingredient);
        else
            edited.erase(c.ingredient);
    }
    e.ingredients_after = sorted_ids(edited);
    e.instructions = decode_instructions(model, e.z_after, e.ingredients_after, tokens);
    return e;
}

}  // namespace recipecrit
