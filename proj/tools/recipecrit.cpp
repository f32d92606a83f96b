// recipecrit command-line entry point.
//
// Exit codes: 0 success, 1 invalid input (flags, missing files, bad configs),
// 2 runtime failure.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "recipecrit/checkpoint.hpp"
#include "recipecrit/experiments.hpp"
#include "recipecrit/service.hpp"
#include "recipecrit/synthetic.hpp"
#include "recipecrit/training.hpp"

using namespace recipecrit;
using json = nlohmann::json;

namespace {

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr std::array<double, 3> kSplit{0.7, 0.15, 0.15};

struct Common {
    std::uint64_t seed = 0;
    std::string config;
    std::string checkpoint;
    std::string corpus;
    std::string out;
    bool verbose = false;
};

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw InputError(what + " is required");
    if (!std::filesystem::is_regular_file(path)) throw InputError(what + " not found: " + path);
}

std::string read_file(const std::string& path, const std::string& what) {
    require_file(path, what);
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

std::string short_digest(const std::string& text) { return to_hex(sha256(text)).substr(0, 16); }

void log_run(const std::string& cmd, std::uint64_t seed, const std::string& config_text,
             const std::string& checkpoint_digest) {
    std::cerr << "[recipecrit] " << cmd << " seed=" << seed << " config=" << short_digest(config_text)
              << " checkpoint=" << (checkpoint_digest.empty() ? "none" : checkpoint_digest) << "\n";
}

LoadedModel load_model(const std::string& path) {
    require_file(path, "checkpoint");
    return load_checkpoint(path);
}

Splits load_splits(const Common& c, const IngredientVocab& vocab) {
    require_file(c.corpus, "corpus");
    const LoadReport rep = load_jsonl(c.corpus, vocab);
    if (c.verbose)
        std::cerr << "[recipecrit] loaded " << rep.recipes.size() << " recipes (" << rep.dropped_bounds
                  << " out of bounds, " << rep.dropped_unresolved << " unresolved, " << rep.malformed_lines
                  << " malformed)\n";
    if (rep.recipes.empty()) throw InputError("no usable recipes in " + c.corpus);
    return split_corpus(rep.recipes, kSplit, c.seed);
}

// The corpus split follows the effective seed, so it matches training.
Common with_seed(Common c, std::uint64_t seed) {
    c.seed = seed;
    return c;
}

ExperimentConfig experiment_config(const Common& c, bool seed_given) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::from_json(read_file(c.config, "config"));
    if (seed_given || c.config.empty()) cfg.seed = c.seed;
    cfg.validate();
    return cfg;
}

void emit(const MetricsReport& report, const std::string& out, bool both) {
    std::cout << format_report(report, ReportFormat::Table);
    if (!out.empty()) {
        emit_report(report, out, ReportFormat::Machine);
        if (both) emit_report(report, out + ".txt", ReportFormat::Table);
    } else if (both) {
        std::cout << "\n" << format_report(report, ReportFormat::Machine);
    }
}

int cmd_gen_corpus(const Common& c, const std::string& grammar_path, int n, std::string vocab_out) {
    const std::string text = read_file(grammar_path, "grammar");
    log_run("gen-corpus", c.seed, text + "\nn=" + std::to_string(n), "");
    if (c.out.empty()) throw InputError("--out is required");
    if (n < 1) throw InputError("--n must be positive");
    const Grammar g = parse_grammar(text);
    const auto recipes = generate_synthetic_corpus(g, n, c.seed);
    save_jsonl(c.out, recipes);
    if (vocab_out.empty()) vocab_out = c.out + ".vocab.tsv";
    grammar_vocab(g).save(vocab_out);
    std::cout << "wrote " << recipes.size() << " recipes to " << c.out << " and the vocabulary to " << vocab_out
              << "\n";
    return 0;
}

int cmd_build_vocab(const Common& c, const std::string& lexicon_path, int max_size) {
    require_file(lexicon_path, "lexicon");
    log_run("build-vocab", c.seed, lexicon_path + "\nmax_size=" + std::to_string(max_size), "");
    if (c.out.empty()) throw InputError("--out is required");
    if (max_size < 1) throw InputError("--max-size must be positive");
    require_file(c.corpus, "corpus");
    const IngredientVocab lexicon = IngredientVocab::load(lexicon_path);
    const LoadReport rep = load_jsonl(c.corpus, lexicon);
    const VocabBuild vb = build_ingredient_vocab(rep.recipes, lexicon, max_size);
    vb.vocab.save(c.out);
    std::cout << "kept " << vb.vocab.size() << " ingredients covering " << vb.coverage * 100.0
              << "% of occurrences\n";
    return 0;
}

int cmd_train(const Common& c, bool seed_given, int stage, const std::string& vocab_path,
              const std::string& model_config_path, int min_count, std::string report_path) {
    if (stage != 1 && stage != 2) throw InputError("--stage must be 1 or 2");
    if (c.out.empty()) throw InputError("--out is required");
    TrainConfig tc = c.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_file(c.config, "config"));
    if (seed_given || c.config.empty()) tc.seed = c.seed;
    tc.stage = stage;
    tc.validate();
    const Common cc = with_seed(c, tc.seed);

    auto on_epoch = [](const EpochRecord& e) {
        std::cerr << "[recipecrit] epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " ("
                  << e.seconds << " s)\n";
    };
    TrainReport report;
    if (stage == 1) {
        require_file(vocab_path, "ingredient vocabulary");
        ModelConfig mc = model_config_path.empty() ? ModelConfig{}
                                                   : ModelConfig::from_json(read_file(model_config_path, "model config"));
        log_run("train", tc.seed, tc.to_json() + mc.to_json(), "");
        const IngredientVocab ingredients = IngredientVocab::load(vocab_path);
        const Splits splits = load_splits(cc, ingredients);
        const TokenVocab tokens = build_token_vocab(splits.train, min_count);
        mc.ingredient_vocab_size = ingredients.size();
        mc.token_vocab_size = tokens.size();
        mc.validate();
        Model model(mc, tc.seed);
        report = train_stage1(splits, model, tokens, ingredients, tc, c.out, on_epoch);
    } else {
        LoadedModel lm = load_model(c.checkpoint);
        log_run("train", tc.seed, tc.to_json() + lm.model->config().to_json(), to_hex(lm.digest));
        const Splits splits = load_splits(cc, lm.ingredients);
        report = train_stage2(splits, lm, tc, c.out, on_epoch);
    }
    if (report_path.empty()) report_path = c.out + ".report.json";
    write_file(report_path, report.to_json() + "\n");
    std::cout << "stage " << stage << ": best epoch " << report.best_epoch << " of " << report.epochs.size()
              << ", validation loss " << report.best_val_loss << "\n";
    std::cerr << "[recipecrit] wrote checkpoint " << c.out << " sha256=" << to_hex(load_checkpoint(c.out).digest)
              << "\n";
    return 0;
}

int cmd_reconstruct(const Common& c, bool seed_given) {
    LoadedModel lm = load_model(c.checkpoint);
    const ExperimentConfig cfg = experiment_config(c, seed_given);
    log_run("reconstruct", cfg.seed, cfg.to_json(), to_hex(lm.digest));
    const Splits splits = load_splits(with_seed(c, cfg.seed), lm.ingredients);
    MetricsReport report = run_reconstruction(lm, splits.test, cfg);
    const MetricsReport base = run_reconstruction("majority", splits.test,
                                                  majority_baseline(splits.train, lm.ingredients.size()),
                                                  lm.ingredients, cfg, to_hex(lm.digest));
    report.rows.insert(report.rows.end(), base.rows.begin(), base.rows.end());
    emit(report, c.out, false);
    return 0;
}

int resolve_ingredient(const IngredientVocab& v, const std::string& name) {
    int id = v.find(name);
    if (id < 0) id = v.find(detokenize(tokenize(name)));
    if (id < 0) id = v.resolve_line(name);
    if (id < 0) throw InputError("unknown ingredient: " + name);
    return id;
}

int cmd_critique(const Common& c, const std::string& recipe_path, const std::vector<std::string>& adds,
                 const std::vector<std::string>& removes, bool baseline) {
    LoadedModel lm = load_model(c.checkpoint);
    if (lm.stage < 2) throw InputError("critique needs a stage-2 checkpoint: " + c.checkpoint);
    CritiqueConfig cfg = c.config.empty() ? CritiqueConfig{} : CritiqueConfig::from_json(read_file(c.config, "config"));
    cfg.validate();
    log_run("critique", c.seed, cfg.to_json(), to_hex(lm.digest));
    std::string text = read_file(recipe_path, "recipe");
    if (const auto nl = text.find('\n'); nl != std::string::npos && text.find_first_not_of(" \t\r\n", nl) != std::string::npos)
        text = text.substr(0, nl);  // first record of a JSONL file
    const RecipeParse parsed = parse_recipe(text, lm.ingredients, "cli");
    if (parsed.status != RecipeParse::Status::Ok) throw InputError("recipe has no usable ingredients: " + recipe_path);
    const Recipe& r = parsed.recipe;

    std::vector<Critique> critiques;
    for (const auto& a : adds) critiques.push_back({resolve_ingredient(lm.ingredients, a), Direction::Add});
    for (const auto& a : removes) critiques.push_back({resolve_ingredient(lm.ingredients, a), Direction::Remove});
    if (critiques.empty()) throw InputError("give at least one --add or --remove");

    const EditedRecipe e = baseline ? filtered_decode_baseline(r, critiques, *lm.model, lm.tokens, lm.ingredients)
                                    : edit_recipe(r, critiques, *lm.model, lm.tokens, lm.ingredients, cfg);
    const std::set<int> before(r.ingredient_ids.begin(), r.ingredient_ids.end());
    const std::set<int> after(e.ingredients_after.begin(), e.ingredients_after.end());
    std::cout << r.title << "\n\ningredients:\n";
    for (int id : after) std::cout << (before.count(id) ? "    " : "  + ") << lm.ingredients.at(id).canonical_name << "\n";
    for (int id : before)
        if (!after.count(id)) std::cout << "  - " << lm.ingredients.at(id).canonical_name << "\n";
    std::cout << "\ninstructions:\n";
    for (std::size_t i = 0; i < e.instructions.size(); ++i) std::cout << "  " << i + 1 << ". " << e.instructions[i] << "\n";
    if (!baseline) {
        const auto& t = e.trace;
        std::cout << "\ntrace: " << t.steps.size() << " iterations, stopped by " << to_string(t.reason)
                  << ", progress " << t.initial_progress << " -> "
                  << (t.steps.empty() ? t.initial_progress : t.steps.back().progress) << "\n";
    }
    for (const auto& cr : critiques)
        std::cout << to_string(cr.direction) << " " << lm.ingredients.at(cr.ingredient).canonical_name << ": "
                  << (success(e, cr, lm.ingredients, SuccessRule::ListAndText) ? "satisfied" : "not satisfied") << "\n";
    if (!c.out.empty()) {
        json j{{"base_id", e.base_id}, {"ingredients", e.ingredients_after}, {"instructions", e.instructions},
               {"trace", baseline ? json(nullptr) : json::parse(e.trace.to_json())}};
        write_file(c.out, j.dump(2) + "\n");
    }
    return 0;
}

int cmd_rq(const Common& c, bool seed_given, bool rq2, const std::string& criteria_flag) {
    LoadedModel lm = load_model(c.checkpoint);
    if (lm.stage < 2) throw InputError((rq2 ? "rq2" : "rq1") + std::string(" needs a stage-2 checkpoint: ") + c.checkpoint);
    const ExperimentConfig cfg = experiment_config(c, seed_given);
    std::vector<StopCriterion> criteria;
    if (rq2) {
        if (criteria_flag == "all") {
            criteria = {StopCriterion::EarlyStopping, StopCriterion::LocalThreshold, StopCriterion::GlobalL1Threshold};
        } else {
            std::stringstream ss(criteria_flag);
            for (std::string name; std::getline(ss, name, ',');) {
                try {
                    criteria.push_back(criterion_from_string(name));
                } catch (const std::invalid_argument&) {
                    throw InputError("unknown stopping criterion: " + name);
                }
            }
        }
    }
    log_run(rq2 ? "rq2" : "rq1", cfg.seed, cfg.to_json() + criteria_flag, to_hex(lm.digest));
    const Splits splits = load_splits(with_seed(c, cfg.seed), lm.ingredients);
    const auto sets = build_eval_sets(splits, lm.ingredients, cfg);
    if (sets.empty()) throw InputError("no ingredient has enough held-out support for the requested sample size");
    const MetricsReport report = rq2 ? run_rq2(lm, sets, cfg, criteria) : run_rq1(lm, sets, cfg);
    emit(report, c.out, rq2);
    std::cerr << "[recipecrit] report digest " << report.digest() << "\n";
    return 0;
}

std::atomic<httplib::Server*> g_server{nullptr};

int cmd_serve(const Common& c, const std::string& host, int port, const std::string& vocab_path,
              const std::string& persist_dir) {
    require_file(c.checkpoint, "checkpoint");
    if (!vocab_path.empty()) require_file(vocab_path, "ingredient vocabulary");
    ServiceOptions opts;
    opts.persist_dir = persist_dir;
    if (!c.config.empty()) opts.default_critique = CritiqueConfig::from_json(read_file(c.config, "config"));
    log_run("serve", c.seed, opts.default_critique.to_json(), to_hex(sha256(read_file(c.checkpoint, "checkpoint"))));
    Service service(opts);
    httplib::Server server;
    service.mount(server);
    if (!server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (auto* s = g_server.load()) s->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (auto* s = g_server.load()) s->stop();
    });

    std::atomic<int> status{0};
    std::thread loader([&] {
        try {
            LoadedModel lm = vocab_path.empty()
                                 ? load_checkpoint(c.checkpoint)
                                 : load_checkpoint(c.checkpoint, TokenVocab::load(token_vocab_path(c.checkpoint)),
                                                   IngredientVocab::load(vocab_path));
            service.set_model(std::move(lm));
            std::cerr << "[recipecrit] model ready\n";
        } catch (const std::exception& e) {
            std::cerr << "recipecrit: cannot load model: " << e.what() << "\n";
            status = 2;
            server.stop();
        }
    });
    std::cerr << "[recipecrit] listening on " << host << ":" << port << "\n";
    server.listen_after_bind();
    loader.join();
    g_server = nullptr;
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"recipecrit: recipe auto-encoder with latent critiquing"};
    app.require_subcommand(1);
    Common c;
    auto shared = [&c](CLI::App* sub) {
        sub->add_option("--seed", c.seed, "Seed for every random choice");
        sub->add_option("--config", c.config, "JSON config file");
        sub->add_flag("-v,--verbose", c.verbose, "Extra logging");
    };

    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus from a grammar");
    std::string grammar = "data/grammar.json", vocab_out;
    int n = 2000;
    shared(gen);
    gen->add_option("--grammar", grammar, "Grammar file")->capture_default_str();
    gen->add_option("--n", n, "Number of recipes")->capture_default_str();
    gen->add_option("--out", c.out, "Output JSONL")->required();
    gen->add_option("--vocab-out", vocab_out, "Ingredient vocabulary output (default <out>.vocab.tsv)");

    auto* bv = app.add_subcommand("build-vocab", "Keep the most frequent ingredients of a corpus");
    std::string lexicon;
    int max_size = 1488;
    shared(bv);
    bv->add_option("--corpus", c.corpus, "Recipe JSONL")->required();
    bv->add_option("--lexicon", lexicon, "Ingredient lexicon TSV")->required();
    bv->add_option("--max-size", max_size, "Vocabulary size")->capture_default_str();
    bv->add_option("--out", c.out, "Output TSV")->required();

    auto* train = app.add_subcommand("train", "Train stage 1 (encoder and predictor) or stage 2 (decoder)");
    int stage = 1, min_count = 3;
    std::string vocab_path, model_config, report_path;
    shared(train);
    train->add_option("--stage", stage, "1 or 2")->capture_default_str();
    train->add_option("--corpus", c.corpus, "Recipe JSONL")->required();
    train->add_option("--vocab", vocab_path, "Ingredient vocabulary TSV (stage 1)");
    train->add_option("--model-config", model_config, "Model config JSON (stage 1)");
    train->add_option("--min-count", min_count, "Token frequency cutoff (stage 1)")->capture_default_str();
    train->add_option("--checkpoint", c.checkpoint, "Stage-1 checkpoint (stage 2)");
    train->add_option("--out", c.out, "Output checkpoint")->required();
    train->add_option("--report", report_path, "TrainReport JSON (default <out>.report.json)");

    auto* rec = app.add_subcommand("reconstruct", "Reconstruction on the test split against the majority baseline");
    shared(rec);
    rec->add_option("--checkpoint", c.checkpoint, "Checkpoint")->required();
    rec->add_option("--corpus", c.corpus, "Recipe JSONL")->required();
    rec->add_option("--out", c.out, "Machine-readable report");

    auto* crit = app.add_subcommand("critique", "Edit one recipe");
    std::string recipe_path;
    std::vector<std::string> adds, removes;
    bool baseline = false;
    shared(crit);
    crit->add_option("--checkpoint", c.checkpoint, "Stage-2 checkpoint")->required();
    crit->add_option("--recipe", recipe_path, "Recipe JSON")->required();
    crit->add_option("--add", adds, "Ingredient to add");
    crit->add_option("--remove", removes, "Ingredient to remove");
    crit->add_flag("--baseline", baseline, "Use filtered decoding instead of latent critiquing");
    crit->add_option("--out", c.out, "Edited recipe JSON");

    std::string criteria = "all";
    auto add_rq = [&](const char* name, const char* help, bool rq2) {
        auto* sub = app.add_subcommand(name, help);
        shared(sub);
        sub->add_option("--checkpoint", c.checkpoint, "Stage-2 checkpoint")->required();
        sub->add_option("--corpus", c.corpus, "Recipe JSONL")->required();
        sub->add_option("--out", c.out, "Machine-readable report");
        if (rq2) sub->add_option("--criteria", criteria, "all or a comma list of criteria")->capture_default_str();
        return sub;
    };
    auto* rq1 = add_rq("rq1", "Latent critiquing against the filtered-decode baseline", false);
    auto* rq2 = add_rq("rq2", "Stopping-criteria comparison", true);

    auto* serve = app.add_subcommand("serve", "HTTP service");
    std::string host = "127.0.0.1", persist_dir;
    int port = 8080;
    shared(serve);
    serve->add_option("--checkpoint", c.checkpoint, "Stage-2 checkpoint")->required();
    serve->add_option("--vocab", vocab_path, "Ingredient vocabulary TSV that must match the checkpoint");
    serve->add_option("--host", host, "Bind address")->capture_default_str();
    serve->add_option("--port", port, "Port")->capture_default_str();
    serve->add_option("--persist-dir", persist_dir, "Directory for recipes and session events");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    const auto seed_given = [](CLI::App* sub) { return sub->count("--seed") > 0; };
    try {
        if (*gen) return cmd_gen_corpus(c, grammar, n, vocab_out);
        if (*bv) return cmd_build_vocab(c, lexicon, max_size);
        if (*train) return cmd_train(c, seed_given(train), stage, vocab_path, model_config, min_count, report_path);
        if (*rec) return cmd_reconstruct(c, seed_given(rec));
        if (*crit) return cmd_critique(c, recipe_path, adds, removes, baseline);
        if (*rq1) return cmd_rq(c, seed_given(rq1), false, criteria);
        if (*rq2) return cmd_rq(c, seed_given(rq2), true, criteria);
        if (*serve) return cmd_serve(c, host, port, vocab_path, persist_dir);
    } catch (const InputError& e) {
        std::cerr << "recipecrit: " << e.what() << "\n";
        return 1;
    } catch (const CheckpointError& e) {
        std::cerr << "recipecrit: " << e.what() << "\n";
        return e.kind() == CheckpointError::Kind::Io ? 2 : 1;
    } catch (const std::invalid_argument& e) {
        // ConfigError and precondition failures on user-supplied data.
        std::cerr << "recipecrit: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "recipecrit: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
