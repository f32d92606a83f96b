#include "recipecrit/experiments.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace recipecrit {

using json = nlohmann::json;

std::vector<MetricsRow> MetricsReport::summary() const {
    std::vector<MetricsRow> out;
    for (const auto& r : rows)
        if (r.target_id < 0) out.push_back(r);
    return out;
}

const MetricsRow& MetricsReport::find(const std::string& criterion, const std::string& direction) const {
    for (const auto& r : rows)
        if (r.target_id < 0 && r.criterion == criterion && r.direction == direction) return r;
    throw std::out_of_range("no summary row for " + criterion + "/" + direction);
}

std::string MetricsReport::digest() const { return to_hex(sha256(format_report(*this, ReportFormat::Machine))); }

void ExperimentConfig::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("experiment config: ") + what);
    };
    need(n_targets >= 2 && n_targets % 2 == 0, "n_targets must be even and at least 2");
    need(recipes_per_side >= 1, "recipes_per_side must be positive");
    need(min_support >= 1, "min_support must be positive");
    need(mask_ratio >= 0.0 && mask_ratio <= 1.0, "mask_ratio must be in [0, 1]");
    need(threads >= 0, "threads must be nonnegative");
    critique.validate();
}

namespace {

std::string rule_name(SuccessRule r) {
    switch (r) {
        case SuccessRule::ListAndText: return "list_and_text";
        case SuccessRule::ListOnly: return "list_only";
        case SuccessRule::TextOnly: return "text_only";
    }
    return "";
}

SuccessRule rule_from_name(const std::string& s) {
    if (s == "list_and_text") return SuccessRule::ListAndText;
    if (s == "list_only") return SuccessRule::ListOnly;
    if (s == "text_only") return SuccessRule::TextOnly;
    throw std::invalid_argument("unknown success rule: " + s);
}

}  // namespace

std::string ExperimentConfig::to_json() const {
    json j{{"n_targets", n_targets},
           {"recipes_per_side", recipes_per_side},
           {"min_support", min_support},
           {"seed", seed},
           {"critique", json::parse(critique.to_json())},
           {"success_rule", rule_name(rule)},
           {"mask_ratio", mask_ratio},
           {"threads", threads}};
    return j.dump();
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    ExperimentConfig c;
    try {
        const json j = json::parse(text);
        c.n_targets = j.value("n_targets", c.n_targets);
        c.recipes_per_side = j.value("recipes_per_side", c.recipes_per_side);
        c.min_support = j.value("min_support", c.min_support);
        c.seed = j.value("seed", c.seed);
        if (j.contains("critique")) c.critique = CritiqueConfig::from_json(j.at("critique").dump());
        if (j.contains("success_rule")) c.rule = rule_from_name(j.at("success_rule").get<std::string>());
        c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
        c.threads = j.value("threads", c.threads);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<CritiqueEvalSet> build_eval_sets(const Splits& data, const IngredientVocab& vocab,
                                             const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<Recipe> pool = data.val;
    pool.insert(pool.end(), data.test.begin(), data.test.end());
    // Both sides of every target must be fillable from the pool.
    const std::vector<int> df = document_frequency(pool, vocab.size());
    const int n = static_cast<int>(pool.size());
    auto eligible = [&](int id) { return df[id] >= cfg.recipes_per_side && n - df[id] >= cfg.recipes_per_side; };
    std::vector<CritiqueEvalSet> out;
    for (int target : select_critique_targets(data.train, vocab, cfg.n_targets, cfg.min_support, eligible))
        out.push_back(sample_eval_set(pool, target, cfg.recipes_per_side, cfg.seed));
    return out;
}

namespace {

// Runs f(i) for i in [0, n), in parallel unless threads == 1. The first
// exception is rethrown after the loop.
template <typename F>
void parallel_for(int n, int threads, F&& f) {
    std::exception_ptr error;
    const int t = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(t)
    for (int i = 0; i < n; ++i) {
        try {
            f(i);
        } catch (...) {
#pragma omp critical(recipecrit_parallel_for)
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
}

struct Outcome {
    bool success = false;
    double iou = 0.0, f1 = 0.0;
    PRF coherence;
    double iters = 0.0;
};

std::set<int> without(const std::vector<int>& ids, int skip) {
    std::set<int> s(ids.begin(), ids.end());
    s.erase(skip);
    return s;
}

MetricsRow aggregate(const std::vector<Outcome>& outcomes) {
    MetricsRow r;
    r.n = static_cast<int>(outcomes.size());
    if (outcomes.empty()) return r;
    for (const auto& o : outcomes) {
        r.success_rate += o.success ? 1.0 : 0.0;
        r.iou += o.iou;
        r.f1 += o.f1;
        r.coh_p += o.coherence.precision;
        r.coh_r += o.coherence.recall;
        r.coh_f1 += o.coherence.f1;
        r.mean_iters += o.iters;
    }
    const double n = static_cast<double>(outcomes.size());
    for (double* v : {&r.success_rate, &r.iou, &r.f1, &r.coh_p, &r.coh_r, &r.coh_f1}) *v = 100.0 * *v / n;
    r.mean_iters /= n;
    return r;
}

// Unweighted mean over per-target rows; n is the total count.
MetricsRow macro_average(const std::vector<MetricsRow>& rows) {
    MetricsRow m;
    if (rows.empty()) return m;
    for (const auto& r : rows) {
        m.n += r.n;
        m.success_rate += r.success_rate;
        m.iou += r.iou;
        m.f1 += r.f1;
        m.coh_p += r.coh_p;
        m.coh_r += r.coh_r;
        m.coh_f1 += r.coh_f1;
        m.mean_iters += r.mean_iters;
    }
    const double k = static_cast<double>(rows.size());
    for (double* v : {&m.success_rate, &m.iou, &m.f1, &m.coh_p, &m.coh_r, &m.coh_f1, &m.mean_iters}) *v /= k;
    return m;
}

void label(MetricsRow& r, const std::string& experiment, const std::string& criterion, const std::string& direction,
           int target, std::uint64_t seed, const std::string& digest) {
    r.experiment = experiment;
    r.criterion = criterion;
    r.direction = direction;
    r.target_id = target;
    r.seed = seed;
    r.model_digest = digest;
}

}  // namespace

MetricsReport run_editing(const std::string& experiment, const std::vector<CritiqueEvalSet>& sets,
                          const std::vector<NamedPipeline>& pipelines, const IngredientVocab& vocab,
                          const ExperimentConfig& cfg, const std::string& model_digest) {
    cfg.validate();
    MetricsReport report;
    for (const auto& pipeline : pipelines) {
        for (const Direction dir : {Direction::Add, Direction::Remove}) {
            std::vector<MetricsRow> per_target;
            for (const auto& set : sets) {
                const auto& recipes = dir == Direction::Add ? set.negative : set.positive;
                const Critique critique{set.target, dir};
                std::vector<Outcome> outcomes(recipes.size());
                parallel_for(static_cast<int>(recipes.size()), cfg.threads, [&](int i) {
                    const Recipe& base = recipes[i];
                    const EditedRecipe e = pipeline.run(base, critique);
                    Outcome& o = outcomes[i];
                    o.success = success(e, critique, vocab, cfg.rule);
                    const auto edited = without(e.ingredients_after, set.target);
                    const auto original = without(base.ingredient_ids, set.target);
                    o.iou = iou(edited, original);
                    o.f1 = set_f1(edited, original);
                    o.coherence = coherence_prf(std::set<int>(e.ingredients_after.begin(), e.ingredients_after.end()),
                                                e.instructions, vocab);
                    o.iters = static_cast<double>(e.trace.steps.size());
                });
                MetricsRow row = aggregate(outcomes);
                label(row, experiment, pipeline.name, to_string(dir), set.target, cfg.seed, model_digest);
                per_target.push_back(row);
            }
            report.rows.insert(report.rows.end(), per_target.begin(), per_target.end());
            MetricsRow macro = macro_average(per_target);
            label(macro, experiment, pipeline.name, to_string(dir), -1, cfg.seed, model_digest);
            report.rows.push_back(macro);
        }
    }
    return report;
}

namespace {

void require_stage2(const LoadedModel& m) {
    if (!m.model || m.stage < 2) throw std::invalid_argument("editing experiments need a stage-2 checkpoint");
}

NamedPipeline critique_pipeline(LoadedModel& m, const std::string& name, CritiqueConfig cc) {
    return {name, [&m, cc](const Recipe& r, const Critique& c) {
                return edit_recipe(r, std::span<const Critique>(&c, 1), *m.model, m.tokens, m.ingredients, cc);
            }};
}

}  // namespace

MetricsReport run_rq1(LoadedModel& model, const std::vector<CritiqueEvalSet>& sets, const ExperimentConfig& cfg) {
    require_stage2(model);
    CritiqueConfig cc = cfg.critique;
    cc.criterion = StopCriterion::EarlyStopping;
    const std::vector<NamedPipeline> pipelines{
        critique_pipeline(model, "recipecrit", cc),
        {"filtered_decode", [&model](const Recipe& r, const Critique& c) {
             return filtered_decode_baseline(r, std::span<const Critique>(&c, 1), *model.model, model.tokens,
                                             model.ingredients);
         }}};
    return run_editing("rq1", sets, pipelines, model.ingredients, cfg, to_hex(model.digest));
}

MetricsReport run_rq2(LoadedModel& model, const std::vector<CritiqueEvalSet>& sets, const ExperimentConfig& cfg,
                      const std::vector<StopCriterion>& criteria) {
    require_stage2(model);
    if (criteria.empty()) throw std::invalid_argument("rq2 needs at least one stopping criterion");
    std::vector<NamedPipeline> pipelines;
    for (const auto crit : criteria) {
        CritiqueConfig cc = cfg.critique;
        cc.criterion = crit;
        pipelines.push_back(critique_pipeline(model, to_string(crit), cc));
    }
    return run_editing("rq2", sets, pipelines, model.ingredients, cfg, to_hex(model.digest));
}

MetricsReport run_reconstruction(const std::string& name, const std::vector<Recipe>& test,
                                 const Reconstructor& reconstruct, const IngredientVocab& vocab,
                                 const ExperimentConfig& cfg, const std::string& model_digest) {
    cfg.validate();
    std::vector<Outcome> outcomes(test.size());
    parallel_for(static_cast<int>(test.size()), cfg.threads, [&](int i) {
        // One noise stream per recipe keeps results independent of scheduling.
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                          static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(seq);
        const Recipe& r = test[i];
        const Reconstruction out = reconstruct(apply_denoising_noise(r, cfg.mask_ratio, rng));
        const std::set<int> pred(out.ingredients.begin(), out.ingredients.end());
        const std::set<int> truth(r.ingredient_ids.begin(), r.ingredient_ids.end());
        Outcome& o = outcomes[i];
        o.success = pred == truth;
        o.iou = iou(pred, truth);
        o.f1 = set_f1(pred, truth);
        o.coherence = coherence_prf(pred, out.instructions, vocab);
    });
    MetricsReport report;
    MetricsRow row = aggregate(outcomes);
    label(row, "reconstruction", name, "-", -1, cfg.seed, model_digest);
    report.rows.push_back(row);
    return report;
}

MetricsReport run_reconstruction(LoadedModel& model, const std::vector<Recipe>& test, const ExperimentConfig& cfg) {
    if (!model.model) throw std::invalid_argument("reconstruction needs a model");
    Model& m = *model.model;
    const bool decode = model.stage >= 2;
    auto rec = [&](const NoisedRecipe& noised) {
        Reconstruction out;
        const Matrix z = m.encode(make_encoder_input(noised, model.tokens));
        out.ingredients = m.predict_ingredients(z).top_set;
        if (decode) out.instructions = decode_instructions(m, z, out.ingredients, model.tokens);
        return out;
    };
    return run_reconstruction("recipecrit", test, rec, model.ingredients, cfg, to_hex(model.digest));
}

Reconstructor majority_baseline(const std::vector<Recipe>& train, int vocab_size) {
    const std::vector<int> df = document_frequency(train, vocab_size);
    std::vector<int> order(vocab_size);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return df[a] > df[b]; });
    return [order](const NoisedRecipe& r) {
        Reconstruction out;
        const auto k = std::min(order.size(), r.base.ingredient_ids.size());
        out.ingredients.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(out.ingredients.begin(), out.ingredients.end());
        return out;
    };
}

std::string format_report(const MetricsReport& report, ReportFormat format) {
    std::ostringstream os;
    if (format == ReportFormat::Machine) {
        for (const auto& r : report.rows) {
            json j{{"experiment", r.experiment},
                   {"criterion", r.criterion},
                   {"direction", r.direction},
                   {"target_id", r.target_id},
                   {"n", r.n},
                   {"success_rate", r.success_rate},
                   {"iou", r.iou},
                   {"f1", r.f1},
                   {"coh_p", r.coh_p},
                   {"coh_r", r.coh_r},
                   {"coh_f1", r.coh_f1},
                   {"mean_iters", r.mean_iters},
                   {"seed", r.seed},
                   {"model_digest", r.model_digest}};
            os << j.dump() << '\n';
        }
        return os.str();
    }
    char line[256];
    std::snprintf(line, sizeof line, "%-8s %-18s %7s %6s %6s   %6s %6s %6s %7s %5s\n", "Dir.", "Model", "% Succ.",
                  "IoU", "F1", "Prec.", "Rec.", "F1", "Iters", "n");
    os << line;
    for (const auto& r : report.summary()) {
        std::snprintf(line, sizeof line, "%-8s %-18s %7.1f %6.1f %6.1f   %6.1f %6.1f %6.1f %7.2f %5d\n",
                      r.direction.c_str(), r.criterion.c_str(), r.success_rate, r.iou, r.f1, r.coh_p, r.coh_r,
                      r.coh_f1, r.mean_iters, r.n);
        os << line;
    }
    return os.str();
}

MetricsReport parse_machine_report(const std::string& text) {
    MetricsReport report;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            MetricsRow r;
            r.experiment = j.at("experiment").get<std::string>();
            r.criterion = j.at("criterion").get<std::string>();
            r.direction = j.at("direction").get<std::string>();
            r.target_id = j.at("target_id").get<int>();
            r.n = j.at("n").get<int>();
            r.success_rate = j.at("success_rate").get<double>();
            r.iou = j.at("iou").get<double>();
            r.f1 = j.at("f1").get<double>();
            r.coh_p = j.at("coh_p").get<double>();
            r.coh_r = j.at("coh_r").get<double>();
            r.coh_f1 = j.at("coh_f1").get<double>();
            r.mean_iters = j.at("mean_iters").get<double>();
            r.seed = j.at("seed").get<std::uint64_t>();
            r.model_digest = j.at("model_digest").get<std::string>();
            report.rows.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw std::invalid_argument("report line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return report;
}

void emit_report(const MetricsReport& report, const std::string& path, ReportFormat format) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    out << format_report(report, format);
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace recipecrit
