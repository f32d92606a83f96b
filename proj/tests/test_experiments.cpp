#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "recipecrit/experiments.hpp"
#include "recipecrit/synthetic.hpp"
#include "recipecrit/training.hpp"

using namespace recipecrit;

namespace {

struct World {
    IngredientVocab ingredients;
    Splits splits;
    TokenVocab tokens;
};

const World& world() {
    static const World w = [] {
        const Grammar g = load_grammar(std::string(RECIPECRIT_DATA_DIR) + "/grammar.json");
        World out;
        out.ingredients = grammar_vocab(g);
        out.splits = split_corpus(generate_synthetic_corpus(g, 400, 5), {0.7, 0.15, 0.15}, 5);
        out.tokens = build_token_vocab(out.splits.train, 2);
        return out;
    }();
    return w;
}

ExperimentConfig small_cfg() {
    ExperimentConfig c;
    c.n_targets = 4;
    c.recipes_per_side = 5;
    c.min_support = 10;
    c.seed = 3;
    c.critique.max_iters = 8;
    return c;
}

// Returns the base recipe unchanged, optionally forcing the target into the list.
NamedPipeline identity(bool force_add = false) {
    return {force_add ? "forced" : "identity", [force_add](const Recipe& r, const Critique& c) {
                EditedRecipe e;
                e.base_id = r.id;
                e.ingredients_after = r.ingredient_ids;
                if (force_add && c.direction == Direction::Add) {
                    e.ingredients_after.push_back(c.ingredient);
                    std::sort(e.ingredients_after.begin(), e.ingredients_after.end());
                }
                e.instructions = r.instructions;
                return e;
            }};
}

LoadedModel tiny_model(int stage) {
    const auto& w = world();
    ModelConfig m;
    m.hidden_dim = 16;
    m.num_layers = 1;
    m.num_heads = 2;
    m.ffn_dim = 32;
    m.latent_dim = 8;
    m.set_decoder_steps = 12;
    m.memory_slots = 2;
    m.max_decode_tokens = 24;
    m.ingredient_vocab_size = w.ingredients.size();
    m.token_vocab_size = w.tokens.size();
    LoadedModel lm;
    lm.model = std::make_unique<Model>(m, 21);
    lm.tokens = w.tokens;
    lm.ingredients = w.ingredients;
    lm.stage = stage;
    return lm;
}

}  // namespace

TEST_CASE("experiment config") {
    const ExperimentConfig d;
    CHECK(d.n_targets == 10);
    CHECK(d.recipes_per_side == 20);
    ExperimentConfig c = small_cfg();
    c.rule = SuccessRule::TextOnly;
    c.critique.criterion = StopCriterion::LocalThreshold;
    const auto back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.n_targets == 4);
    CHECK(back.rule == SuccessRule::TextOnly);
    CHECK(back.critique.criterion == StopCriterion::LocalThreshold);
    CHECK(back.critique.max_iters == 8);
    c.n_targets = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("evaluation sets are balanced") {
    const auto& w = world();
    const auto sets = build_eval_sets(w.splits, w.ingredients, small_cfg());
    REQUIRE(sets.size() == 4);
    for (const auto& s : sets) {
        CHECK(s.positive.size() == 5);
        CHECK(s.negative.size() == 5);
        for (const auto& r : s.positive) CHECK(r.has_ingredient(s.target));
        for (const auto& r : s.negative) CHECK_FALSE(r.has_ingredient(s.target));
    }
}

TEST_CASE("harness sanity with an identity pipeline") {
    const auto& w = world();
    const auto cfg = small_cfg();
    auto sets = build_eval_sets(w.splits, w.ingredients, cfg);
    // Removing from recipes that never had the target succeeds vacuously.
    for (auto& s : sets) std::swap(s.positive, s.negative);
    const auto report = run_editing("sanity", sets, {identity()}, w.ingredients, cfg);
    const auto& rm = report.find("identity", "remove");
    CHECK(rm.success_rate == 100.0);
    CHECK(rm.iou == 100.0);
    CHECK(rm.f1 == 100.0);
    CHECK(rm.coh_f1 == 100.0);
    CHECK(rm.n == 20);
    // Adding to recipes that already contain the target is likewise trivial.
    CHECK(report.find("identity", "add").success_rate == 100.0);
}

TEST_CASE("list forcing without text fails the strict rule but keeps fidelity") {
    const auto& w = world();
    const auto cfg = small_cfg();
    const auto sets = build_eval_sets(w.splits, w.ingredients, cfg);
    const auto report = run_editing("forced", sets, {identity(true)}, w.ingredients, cfg);
    const auto& add = report.find("forced", "add");
    CHECK(add.success_rate == 0.0);
    CHECK(add.iou == 100.0);

    ExperimentConfig list_only = cfg;
    list_only.rule = SuccessRule::ListOnly;
    CHECK(run_editing("forced", sets, {identity(true)}, w.ingredients, list_only).find("forced", "add").success_rate ==
          100.0);
}

TEST_CASE("macro averages weight targets equally") {
    const auto& w = world();
    const auto cfg = small_cfg();
    const auto sets = build_eval_sets(w.splits, w.ingredients, cfg);
    const int first = sets.front().target;
    NamedPipeline odd{"odd", [first](const Recipe& r, const Critique& c) {
                          EditedRecipe e;
                          e.ingredients_after = r.ingredient_ids;
                          e.instructions = r.instructions;
                          // Removal works for every target but the first.
                          if (c.direction == Direction::Remove && c.ingredient != first) {
                              std::erase(e.ingredients_after, c.ingredient);
                              e.instructions.clear();
                          }
                          return e;
                      }};
    ExperimentConfig serial = cfg;
    serial.threads = 1;
    const auto report = run_editing("macro", sets, {odd}, w.ingredients, serial);
    double sum = 0.0;
    int rows = 0;
    for (const auto& r : report.rows)
        if (r.direction == "remove" && r.target_id >= 0) {
            sum += r.success_rate;
            ++rows;
            CHECK(r.n == 5);
        }
    CHECK(rows == 4);
    CHECK(report.find("odd", "remove").success_rate == doctest::Approx(sum / rows));
    CHECK(report.find("odd", "remove").success_rate == 75.0);
    CHECK(report.summary().size() == 2);
}

TEST_CASE("reconstruction harness self-test and majority baseline") {
    const auto& w = world();
    const auto cfg = small_cfg();
    const Reconstructor oracle = [](const NoisedRecipe& r) {
        return Reconstruction{r.base.ingredient_ids, r.base.instructions};
    };
    const auto perfect = run_reconstruction("oracle", w.splits.test, oracle, w.ingredients, cfg).rows.at(0);
    CHECK(perfect.iou == 100.0);
    CHECK(perfect.f1 == 100.0);
    CHECK(perfect.coh_p == 100.0);
    CHECK(perfect.coh_r == 100.0);
    CHECK(perfect.coh_f1 == 100.0);
    CHECK(perfect.n == static_cast<int>(w.splits.test.size()));

    const auto majority = majority_baseline(w.splits.train, w.ingredients.size());
    const auto df = document_frequency(w.splits.train, w.ingredients.size());
    const Recipe& r = w.splits.test.front();
    const auto guess = majority(unmasked(r)).ingredients;
    CHECK(guess.size() == r.ingredient_ids.size());
    int min_in = 1 << 30, max_out = -1;
    for (int i = 0; i < w.ingredients.size(); ++i) {
        if (std::binary_search(guess.begin(), guess.end(), i))
            min_in = std::min(min_in, df[i]);
        else
            max_out = std::max(max_out, df[i]);
    }
    CHECK(min_in >= max_out);
    const auto base = run_reconstruction("majority", w.splits.test, majority, w.ingredients, cfg).rows.at(0);
    CHECK(base.iou < 100.0);
    CHECK(base.coh_f1 == 0.0);
}

TEST_CASE("reports round trip and format") {
    MetricsReport empty;
    const std::string table = format_report(empty, ReportFormat::Table);
    CHECK(std::count(table.begin(), table.end(), '\n') == 1);
    for (const char* col : {"Succ.", "IoU", "F1", "Prec.", "Rec."}) CHECK(table.find(col) != std::string::npos);
    CHECK(format_report(empty, ReportFormat::Machine).empty());

    const auto& w = world();
    const auto cfg = small_cfg();
    const auto sets = build_eval_sets(w.splits, w.ingredients, cfg);
    const auto report = run_editing("rt", sets, {identity(true)}, w.ingredients, cfg, "abc");
    const auto back = parse_machine_report(format_report(report, ReportFormat::Machine));
    CHECK(back == report);
    CHECK(back.digest() == report.digest());
    for (const auto& r : report.rows)
        for (double v : {r.success_rate, r.iou, r.f1, r.coh_p, r.coh_r, r.coh_f1}) {
            CHECK(v >= 0.0);
            CHECK(v <= 100.0);
        }

    const auto path = std::filesystem::temp_directory_path() / "recipecrit_report.jsonl";
    emit_report(report, path.string(), ReportFormat::Machine);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(parse_machine_report(ss.str()) == report);
    CHECK_THROWS_AS(parse_machine_report("{\"experiment\": 1}"), std::invalid_argument);
}

TEST_CASE("model experiments need stage 2 and do not depend on the thread count") {
    const auto& w = world();
    ExperimentConfig cfg = small_cfg();
    cfg.n_targets = 2;
    cfg.recipes_per_side = 3;
    const auto sets = build_eval_sets(w.splits, w.ingredients, cfg);
    LoadedModel s1 = tiny_model(1);
    CHECK_THROWS_AS(run_rq1(s1, sets, cfg), std::invalid_argument);
    CHECK_THROWS_AS(run_rq2(s1, sets, cfg), std::invalid_argument);

    LoadedModel lm = tiny_model(2);
    cfg.threads = 1;
    const auto serial = run_rq1(lm, sets, cfg);
    cfg.threads = 3;
    const auto parallel = run_rq1(lm, sets, cfg);
    CHECK(serial.digest() == parallel.digest());
    CHECK(serial.summary().size() == 4);
    CHECK(serial.find("filtered_decode", "add").mean_iters == 0.0);
    CHECK(serial.find("recipecrit", "add").mean_iters > 0.0);

    const auto rq2 = run_rq2(lm, sets, cfg);
    for (const char* c : {"early_stopping", "local_threshold", "global_l1"})
        CHECK_NOTHROW((void)rq2.find(c, "add"));

    ExperimentConfig rc = cfg;
    rc.threads = 1;
    const auto r1 = run_reconstruction(lm, w.splits.test, rc);
    rc.threads = 2;
    CHECK(run_reconstruction(lm, w.splits.test, rc).digest() == r1.digest());
}
