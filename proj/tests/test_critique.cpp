#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "kitchen.hpp"
#include "recipecrit/critique.hpp"
#include "recipecrit/training.hpp"
#include "test_util.hpp"

using namespace recipecrit;

namespace {

// C(z) = sigmoid(W z + b) with L = sum of BCE; an analytic stand-in for the predictor.
struct Logistic {
    Matrix w, b;  // n x d, n x 1

    [[nodiscard]] std::vector<double> probs(const Matrix& z) const {
        std::vector<double> p(w.rows);
        for (int i = 0; i < w.rows; ++i) {
            double s = b(i, 0);
            for (int j = 0; j < w.cols; ++j) s += w(i, j) * z(0, j);
            p[i] = 1.0 / (1.0 + std::exp(-s));
        }
        return p;
    }

    [[nodiscard]] LatentObjective objective() const {
        return {[this](const Matrix& z) { return probs(z); },
                [this](const Matrix& z, const IngredientTarget& t, double* loss) {
                    const auto p = probs(z);
                    Matrix g(1, w.cols);
                    double l = 0.0;
                    for (int i = 0; i < w.rows; ++i) {
                        const double q = std::clamp(p[i], kProbClamp, 1 - kProbClamp);
                        l -= t.y[i] * std::log(q) + (1 - t.y[i]) * std::log(1 - q);
                        for (int j = 0; j < w.cols; ++j) g(0, j) += (p[i] - t.y[i]) * w(i, j);
                    }
                    if (loss) *loss = l;
                    return g;
                }};
    }
};

Logistic random_logistic(std::mt19937_64& rng, int n, int d, double scale) {
    return {testutil::random_matrix(n, d, rng, scale), testutil::random_matrix(n, 1, rng, scale)};
}

IngredientTarget target_for(const std::vector<double>& p, const std::vector<Critique>& cs) {
    IngredientPrediction pred;
    pred.probabilities = p;
    return build_target(pred, cs);
}

double l2(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return std::sqrt(s);
}

CritiqueConfig random_config(std::mt19937_64& rng) {
    CritiqueConfig c;
    c.alpha0 = std::uniform_real_distribution<double>(1e-3, 2.0)(rng);
    c.decay = std::uniform_real_distribution<double>(0.5, 1.0)(rng);
    c.patience = std::uniform_int_distribution<int>(1, 8)(rng);
    c.max_iters = std::uniform_int_distribution<int>(1, 60)(rng);
    c.criterion = static_cast<StopCriterion>(std::uniform_int_distribution<int>(0, 2)(rng));
    c.threshold = std::uniform_real_distribution<double>(0.01, 0.5)(rng);
    return c;
}

// Replays the loop from the trace and the objective alone.
void check_contract(const Logistic& model, const Matrix& z0, const std::vector<Critique>& cs,
                    const CritiqueConfig& cfg) {
    const auto target = target_for(model.probs(z0), cs);
    const auto obj = model.objective();
    const CritiqueResult r = critique_latent(obj, z0, target, cs, cfg);
    const auto& steps = r.trace.steps;

    REQUIRE(static_cast<int>(steps.size()) <= std::max(0, cfg.max_iters - 1));
    Matrix z = z0;
    double best = std::numeric_limits<double>::infinity();
    Matrix best_z = z0;
    int best_t = 0, patience = 0;
    std::vector<Matrix> zs{z0};
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const auto& s = steps[k];
        CHECK(s.t == static_cast<int>(k) + 1);
        CHECK(s.alpha == cfg.alpha0 * std::pow(cfg.decay, s.t - 1));
        if (k > 0) CHECK(s.alpha == doctest::Approx(cfg.decay * steps[k - 1].alpha).epsilon(1e-14));
        const Matrix g = obj.gradient(z, target, nullptr);
        double gn = 0.0;
        for (double v : g.data) gn += v * v;
        gn = std::sqrt(gn);
        Matrix next = z;
        for (std::size_t i = 0; i < next.data.size(); ++i) next.data[i] -= s.alpha * g.data[i] / gn;
        CHECK(l2(next, z) == doctest::Approx(s.alpha).epsilon(1e-6));
        const auto p = model.probs(next);
        double m = 0.0;
        for (const auto& c : cs) m = std::max(m, std::abs((c.direction == Direction::Add ? 1.0 : 0.0) - p[c.ingredient]));
        CHECK(s.progress == doctest::Approx(m).epsilon(1e-12));
        CHECK(s.best_val <= best);
        CHECK(s.accepted == (s.progress < best));
        if (s.progress < best) {
            best = s.progress;
            best_z = next;
            best_t = s.t;
            patience = 0;
        } else {
            ++patience;
        }
        CHECK(s.best_val == best);
        z = next;
        zs.push_back(next);
    }
    if (cfg.criterion == StopCriterion::EarlyStopping) {
        CHECK(r.trace.returned_step == best_t);
        CHECK(testutil::max_abs_diff(r.z, best_z) < 1e-12);
        if (r.trace.reason == Termination::PatienceExhausted) CHECK(patience == cfg.patience);
        if (r.trace.reason == Termination::MaxIters) CHECK(static_cast<int>(steps.size()) == cfg.max_iters - 1);
        for (const auto& s : steps) CHECK(s.best_val >= best);
    } else {
        CHECK(testutil::max_abs_diff(r.z, zs.back()) < 1e-12);
        for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
            const double v = cfg.criterion == StopCriterion::LocalThreshold ? steps[k].progress : steps[k].l1;
            CHECK(v >= cfg.threshold);
        }
        if (r.trace.reason == Termination::ThresholdMet) {
            const double v =
                cfg.criterion == StopCriterion::LocalThreshold ? steps.back().progress : steps.back().l1;
            CHECK(v < cfg.threshold);
        } else {
            CHECK(r.trace.reason == Termination::MaxIters);
            CHECK(static_cast<int>(steps.size()) == cfg.max_iters - 1);
        }
    }
}

}  // namespace

TEST_CASE("config validation and json") {
    CritiqueConfig c;
    CHECK(c.alpha0 == 1.0);
    CHECK(c.decay == 0.9);
    CHECK(c.patience == 5);
    CHECK(c.max_iters == 100);
    CHECK(c.threshold == 0.1);
    CHECK_NOTHROW(c.validate());
    c.criterion = StopCriterion::GlobalL1Threshold;
    c.alpha0 = 0.5;
    const auto back = CritiqueConfig::from_json(c.to_json());
    CHECK(back.criterion == c.criterion);
    CHECK(back.alpha0 == 0.5);
    CritiqueConfig bad;
    bad.decay = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = {};
    bad.threshold = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS_AS(criterion_from_string("sometimes"), std::invalid_argument);
}

TEST_CASE("desired vector from a prediction") {
    const auto v = testutil::kitchen();
    IngredientPrediction pred;
    pred.probabilities.assign(v.size(), 0.1);
    for (const char* name : {"clove", "oil", "pepper", "rosemary", "salt", "tomato"})
        pred.probabilities[v.find(name)] = 0.9;

    const IngredientTarget same = build_target(pred, {});
    CHECK(same.positives().size() == 6);
    CHECK(same.eos_step == 6);

    const std::vector<Critique> add_kale{{v.find("kale"), Direction::Add}};
    const IngredientTarget t = build_target(pred, add_kale);
    std::vector<int> expected;
    for (const char* name : {"clove", "kale", "oil", "pepper", "rosemary", "salt", "tomato"})
        expected.push_back(v.find(name));
    std::sort(expected.begin(), expected.end());
    CHECK(t.positives() == expected);
    CHECK(t.eos_step == 7);

    const std::vector<Critique> add_salt{{v.find("salt"), Direction::Add}};
    CHECK(build_target(pred, add_salt).y == same.y);

    const std::vector<Critique> conflict{{v.find("salt"), Direction::Add}, {v.find("salt"), Direction::Remove}};
    CHECK_THROWS_AS(build_target(pred, conflict), std::invalid_argument);
    const std::vector<Critique> out_of_range{{v.size(), Direction::Add}};
    CHECK_THROWS_AS(build_target(pred, out_of_range), std::invalid_argument);

    const std::vector<Critique> remove_all{{v.find("salt"), Direction::Remove}};
    IngredientPrediction one;
    one.probabilities.assign(v.size(), 0.0);
    one.probabilities[v.find("salt")] = 1.0;
    CHECK(build_target(one, remove_all).eos_step == 1);
}

TEST_CASE("loop contract over random configurations") {
    std::mt19937_64 rng(2024);
    for (int c = 0; c < 200; ++c) {
        const int n = std::uniform_int_distribution<int>(3, 12)(rng);
        const int d = std::uniform_int_distribution<int>(2, 10)(rng);
        const Logistic model = random_logistic(rng, n, d, std::uniform_real_distribution<double>(0.2, 3.0)(rng));
        const Matrix z0 = testutil::random_matrix(1, d, rng);
        std::vector<Critique> cs;
        const int k = std::uniform_int_distribution<int>(1, 3)(rng);
        std::vector<int> ids(n);
        std::iota(ids.begin(), ids.end(), 0);
        std::shuffle(ids.begin(), ids.end(), rng);
        for (int i = 0; i < k && i < n; ++i)
            cs.push_back({ids[i], std::bernoulli_distribution(0.5)(rng) ? Direction::Add : Direction::Remove});
        const CritiqueConfig cfg = random_config(rng);
        CAPTURE(c);
        check_contract(model, z0, cs, cfg);
    }
}

TEST_CASE("zero gradient at the start returns the input") {
    const LatentObjective flat{[](const Matrix&) { return std::vector<double>{0.3, 0.7}; },
                               [](const Matrix& z, const IngredientTarget&, double* loss) {
                                   if (loss) *loss = 1.0;
                                   return Matrix(z.rows, z.cols);
                               }};
    Matrix z(1, 3);
    z.data = {0.1, -0.2, 0.3};
    const std::vector<Critique> cs{{0, Direction::Add}};
    IngredientTarget t;
    t.y = {1.0, 1.0};
    const auto r = critique_latent(flat, z, t, cs, CritiqueConfig{});
    CHECK(r.z == z);
    CHECK(r.trace.steps.empty());
    CHECK(r.trace.reason == Termination::ZeroGradient);
    CHECK(r.trace.returned_step == 0);
}

TEST_CASE("non-finite gradients abort") {
    const LatentObjective broken{[](const Matrix&) { return std::vector<double>{0.5}; },
                                 [](const Matrix& z, const IngredientTarget&, double*) {
                                     Matrix g(z.rows, z.cols);
                                     g.data[0] = std::nan("");
                                     return g;
                                 }};
    Matrix z(1, 2);
    IngredientTarget t;
    t.y = {1.0};
    const std::vector<Critique> cs{{0, Direction::Add}};
    CHECK_THROWS_AS(critique_latent(broken, z, t, cs, CritiqueConfig{}), CritiqueError);
    CHECK_THROWS_AS(critique_latent(broken, z, t, {}, CritiqueConfig{}), std::invalid_argument);
}

TEST_CASE("saturated target stops after patience with a bounded move") {
    std::mt19937_64 rng(3);
    Logistic model = random_logistic(rng, 5, 4, 1.0);
    for (int j = 0; j < 4; ++j) model.w(0, j) = 0.0;
    model.b(0, 0) = 60.0;  // ingredient 0 is certain
    const Matrix z = testutil::random_matrix(1, 4, rng);
    const std::vector<Critique> cs{{0, Direction::Add}};
    CritiqueConfig cfg;
    const auto r = critique_latent(model.objective(), z, target_for(model.probs(z), cs), cs, cfg);
    CHECK(r.trace.reason == Termination::PatienceExhausted);
    CHECK(static_cast<int>(r.trace.steps.size()) <= cfg.patience + 1);
    CHECK(l2(r.z, z) <= cfg.patience * cfg.alpha0);
}

TEST_CASE("unreachable local threshold runs to the cap") {
    std::mt19937_64 rng(4);
    const Logistic model = random_logistic(rng, 6, 3, 0.05);  // probabilities stay near 0.5
    const Matrix z = testutil::random_matrix(1, 3, rng);
    const std::vector<Critique> cs{{1, Direction::Add}};
    CritiqueConfig cfg;
    cfg.criterion = StopCriterion::LocalThreshold;
    cfg.threshold = 1e-9;
    cfg.max_iters = 25;
    const auto r = critique_latent(model.objective(), z, target_for(model.probs(z), cs), cs, cfg);
    CHECK(r.trace.reason == Termination::MaxIters);
    CHECK(r.trace.steps.size() == 24);
}

TEST_CASE("a small first step lowers the model loss") {
    ModelConfig mc;
    mc.hidden_dim = 16;
    mc.num_layers = 1;
    mc.num_heads = 2;
    mc.ffn_dim = 32;
    mc.latent_dim = 8;
    mc.set_decoder_steps = 6;
    mc.memory_slots = 2;
    mc.dropout = 0.0;
    mc.ingredient_vocab_size = 10;
    mc.token_vocab_size = 30;
    Model model(mc, 9);
    std::mt19937_64 rng(10);
    for (int c = 0; c < 50; ++c) {
        Matrix z = testutil::random_matrix(1, mc.latent_dim, rng, 0.5);
        const std::vector<Critique> cs{{static_cast<int>(rng() % 10), c % 2 ? Direction::Add : Direction::Remove}};
        const auto target = build_target(model.predict_ingredients(z), cs);
        CritiqueConfig cfg;
        cfg.alpha0 = 1e-3;
        cfg.max_iters = 2;
        const auto r = critique_latent(model_objective(model), z, target, cs, cfg);
        REQUIRE(r.trace.steps.size() == 1);
        const Matrix z1 = r.trace.reason == Termination::ZeroGradient ? z : r.z;
        CHECK(model.ingredient_loss_value(z1, target) < model.ingredient_loss_value(z, target));
    }
}

TEST_CASE("editing pipelines") {
    const auto ingredients = testutil::kitchen();
    const Recipe r = testutil::confit(ingredients);
    const TokenVocab tokens = build_token_vocab({r}, 1);
    ModelConfig mc;
    mc.hidden_dim = 16;
    mc.num_layers = 1;
    mc.num_heads = 2;
    mc.ffn_dim = 32;
    mc.latent_dim = 8;
    mc.set_decoder_steps = 8;
    mc.memory_slots = 2;
    mc.max_decode_tokens = 24;
    mc.dropout = 0.0;
    mc.ingredient_vocab_size = ingredients.size();
    mc.token_vocab_size = tokens.size();
    Model model(mc, 5);
    const int kale = ingredients.find("kale"), tomato = ingredients.find("tomato");

    const std::vector<Critique> remove_kale{{kale, Direction::Remove}};
    CHECK_THROWS_AS(edit_recipe(r, remove_kale, model, tokens, ingredients, CritiqueConfig{}), std::invalid_argument);
    CHECK_THROWS_AS(filtered_decode_baseline(r, remove_kale, model, tokens, ingredients), std::invalid_argument);

    const std::vector<Critique> add_kale{{kale, Direction::Add}};
    const EditedRecipe base = filtered_decode_baseline(r, add_kale, model, tokens, ingredients);
    CHECK(std::binary_search(base.ingredients_after.begin(), base.ingredients_after.end(), kale));
    CHECK(base.z_after == base.z_before);
    const std::vector<Critique> remove_tomato{{tomato, Direction::Remove}};
    const EditedRecipe base_rm = filtered_decode_baseline(r, remove_tomato, model, tokens, ingredients);
    CHECK_FALSE(std::binary_search(base_rm.ingredients_after.begin(), base_rm.ingredients_after.end(), tomato));

    const EditedRecipe e = edit_recipe(r, add_kale, model, tokens, ingredients, CritiqueConfig{});
    CHECK(e.base_id == "confit");
    CHECK(e.z_before == model.encode(make_encoder_input(r, tokens)));
    CHECK(e.ingredients_after == model.predict_ingredients(e.z_after).top_set);
    CHECK(e.instructions == decode_instructions(model, e.z_after, e.ingredients_after, tokens));
    CHECK_FALSE(e.trace.steps.empty());

    const EncoderInput masked = edit_input(r, remove_tomato, ingredients, tokens);
    const EncoderInput expected = make_encoder_input(mask_for_removal_critique(r, tomato, ingredients), tokens);
    CHECK(masked.ingredient_masked == expected.ingredient_masked);
    CHECK(masked.instruction_masked == expected.instruction_masked);
    const EditedRecipe rm = edit_recipe(r, remove_tomato, model, tokens, ingredients, CritiqueConfig{});
    CHECK(rm.z_before == model.encode(expected));
}
