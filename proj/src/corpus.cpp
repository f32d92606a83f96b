#include "recipecrit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace recipecrit {

using nlohmann::json;

IngredientVocab::IngredientVocab(const std::vector<std::pair<std::string, std::vector<std::string>>>& entries) {
    for (const auto& [name, extra] : entries) {
        if (name.empty()) throw std::invalid_argument("ingredient with empty canonical name");
        Ingredient ing;
        ing.id = size();
        ing.canonical_name = name;
        ing.aliases.push_back(name);
        for (const auto& a : extra)
            if (a != name && std::find(ing.aliases.begin(), ing.aliases.end(), a) == ing.aliases.end())
                ing.aliases.push_back(a);
        for (const auto& a : ing.aliases) {
            const std::string key = detokenize(tokenize(a));
            if (key.empty()) throw std::invalid_argument("empty alias for ingredient " + name);
            auto [it, fresh] = by_name_.emplace(key, ing.id);
            if (!fresh && it->second != ing.id)
                throw std::invalid_argument("alias '" + a + "' maps to two ingredients");
            auto toks = tokenize(a);
            by_first_[toks.front()].emplace_back(std::move(toks), ing.id);
        }
        ingredients_.push_back(std::move(ing));
    }
    for (auto& [first, list] : by_first_)
        std::stable_sort(list.begin(), list.end(),
                         [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
}

int IngredientVocab::find(const std::string& name) const {
    auto it = by_name_.find(detokenize(tokenize(name)));
    return it == by_name_.end() ? -1 : it->second;
}

std::vector<IngredientVocab::Match> IngredientVocab::scan(const std::vector<std::string>& tokens) const {
    std::vector<Match> out;
    const int n = static_cast<int>(tokens.size());
    int i = 0;
    while (i < n) {
        bool matched = false;
        if (auto it = by_first_.find(tokens[i]); it != by_first_.end()) {
            for (const auto& [alias, id] : it->second) {
                const int len = static_cast<int>(alias.size());
                if (i + len > n) continue;
                if (std::equal(alias.begin(), alias.end(), tokens.begin() + i)) {
                    out.push_back({i, len, id});
                    i += len;
                    matched = true;
                    break;
                }
            }
        }
        if (!matched) ++i;
    }
    return out;
}

int IngredientVocab::resolve_line(std::string_view line) const {
    const auto matches = scan(tokenize(line));
    int best = -1, best_len = 0;
    for (const auto& m : matches) {
        if (m.len > best_len) {
            best = m.id;
            best_len = m.len;
        }
    }
    return best;
}

std::set<int> IngredientVocab::mentions(std::string_view sentence) const {
    std::set<int> out;
    for (const auto& m : scan(tokenize(sentence))) out.insert(m.id);
    return out;
}

std::string IngredientVocab::to_tsv() const {
    std::string s;
    for (const auto& ing : ingredients_) {
        s += ing.canonical_name;
        s.push_back('\t');
        for (std::size_t i = 0; i < ing.aliases.size(); ++i) {
            if (i) s.push_back('|');
            s += ing.aliases[i];
        }
        s.push_back('\n');
    }
    return s;
}

Digest IngredientVocab::digest() const { return sha256(to_tsv()); }

void IngredientVocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write ingredient vocabulary: " + path);
    out << to_tsv();
}

IngredientVocab IngredientVocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read ingredient vocabulary: " + path);
    std::vector<std::pair<std::string, std::vector<std::string>>> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        std::string name = line.substr(0, tab);
        std::vector<std::string> aliases;
        if (tab != std::string::npos) {
            std::stringstream ss(line.substr(tab + 1));
            std::string a;
            while (std::getline(ss, a, '|'))
                if (!a.empty()) aliases.push_back(a);
        }
        entries.emplace_back(std::move(name), std::move(aliases));
    }
    return IngredientVocab(entries);
}

bool Recipe::has_ingredient(int id) const {
    return std::binary_search(ingredient_ids.begin(), ingredient_ids.end(), id);
}

Recipe make_recipe(std::string id, std::string title, std::vector<std::string> ingredient_lines,
                   std::vector<std::string> instructions, const IngredientVocab& vocab) {
    Recipe r;
    r.id = std::move(id);
    r.title = std::move(title);
    r.ingredient_lines = std::move(ingredient_lines);
    r.instructions = std::move(instructions);
    for (const auto& line : r.ingredient_lines) {
        const int ing = vocab.resolve_line(line);
        r.line_ingredient.push_back(ing);
        if (ing >= 0) r.ingredient_ids.push_back(ing);
    }
    std::sort(r.ingredient_ids.begin(), r.ingredient_ids.end());
    r.ingredient_ids.erase(std::unique(r.ingredient_ids.begin(), r.ingredient_ids.end()), r.ingredient_ids.end());
    return r;
}

NoisedRecipe unmasked(const Recipe& r) { return NoisedRecipe{r, {}, {}}; }

std::string recipe_to_json(const Recipe& r) {
    json j;
    j["id"] = r.id;
    j["title"] = r.title;
    j["ingredients"] = r.ingredient_lines;
    j["instructions"] = r.instructions;
    return j.dump();
}

RecipeParse parse_recipe(const std::string& text, const IngredientVocab& vocab, const std::string& default_id) {
    RecipeParse out;
    json j;
    try {
        j = json::parse(text);
        if (!j.is_object()) throw std::invalid_argument("recipe must be a JSON object");
        out.recipe.id = j.contains("id") ? j.at("id").get<std::string>() : default_id;
        out.recipe.title = j.at("title").get<std::string>();
        out.recipe.ingredient_lines = j.at("ingredients").get<std::vector<std::string>>();
        out.recipe.instructions = j.at("instructions").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed recipe: ") + e.what());
    }
    const auto& r = out.recipe;
    if (r.ingredient_lines.empty() || r.instructions.empty() ||
        static_cast<int>(r.ingredient_lines.size()) > kMaxRecipeItems ||
        static_cast<int>(r.instructions.size()) > kMaxRecipeItems) {
        out.status = RecipeParse::Status::OutOfBounds;
        return out;
    }
    out.recipe = make_recipe(r.id, r.title, r.ingredient_lines, r.instructions, vocab);
    out.status = out.recipe.ingredient_ids.empty() ? RecipeParse::Status::Unresolved : RecipeParse::Status::Ok;
    return out;
}

LoadReport load_jsonl(const std::string& path, const IngredientVocab& vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read recipe file: " + path);
    LoadReport report;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            RecipeParse p = parse_recipe(line, vocab, "r" + std::to_string(lineno));
            switch (p.status) {
                case RecipeParse::Status::OutOfBounds: ++report.dropped_bounds; break;
                case RecipeParse::Status::Unresolved: ++report.dropped_unresolved; break;
                case RecipeParse::Status::Ok: report.recipes.push_back(std::move(p.recipe)); break;
            }
        } catch (const std::invalid_argument&) {
            ++report.malformed_lines;
        }
    }
    if (report.malformed_lines > 0)
        std::cerr << "warning: " << path << ": skipped " << report.malformed_lines << " malformed line(s)\n";
    return report;
}

void save_jsonl(const std::string& path, const std::vector<Recipe>& recipes) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write recipe file: " + path);
    for (const auto& r : recipes) out << recipe_to_json(r) << '\n';
}

Splits split_corpus(const std::vector<Recipe>& recipes, std::array<double, 3> fractions, std::uint64_t seed) {
    double total = 0.0;
    for (double f : fractions) {
        if (f < 0.0 || f > 1.0) throw std::invalid_argument("split fraction outside [0, 1]");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
    std::vector<std::size_t> order(recipes.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n = static_cast<double>(recipes.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_val = std::min(recipes.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
    Splits s;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& dst = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
        dst.push_back(recipes[order[i]]);
    }
    return s;
}

std::vector<int> document_frequency(const std::vector<Recipe>& recipes, int vocab_size) {
    std::vector<int> df(vocab_size, 0);
    for (const auto& r : recipes)
        for (int id : r.ingredient_ids)
            if (id >= 0 && id < vocab_size) ++df[id];
    return df;
}

VocabBuild build_ingredient_vocab(const std::vector<Recipe>& recipes, const IngredientVocab& lexicon, int max_size) {
    if (max_size < 1) throw std::invalid_argument("max_size must be at least 1");
    const auto df = document_frequency(recipes, lexicon.size());
    std::vector<int> order;
    for (int i = 0; i < lexicon.size(); ++i)
        if (df[i] > 0) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (df[a] != df[b]) return df[a] > df[b];
        return lexicon.at(a).canonical_name < lexicon.at(b).canonical_name;
    });
    if (static_cast<int>(order.size()) > max_size) order.resize(max_size);
    std::vector<std::pair<std::string, std::vector<std::string>>> entries;
    long kept = 0;
    for (int i : order) {
        const auto& ing = lexicon.at(i);
        entries.emplace_back(ing.canonical_name, std::vector<std::string>(ing.aliases.begin() + 1, ing.aliases.end()));
        kept += df[i];
    }
    const long total = std::accumulate(df.begin(), df.end(), 0L);
    return {IngredientVocab(entries), total == 0 ? 1.0 : static_cast<double>(kept) / static_cast<double>(total)};
}

std::vector<Recipe> reresolve(const std::vector<Recipe>& recipes, const IngredientVocab& vocab) {
    std::vector<Recipe> out;
    out.reserve(recipes.size());
    for (const auto& r : recipes) out.push_back(make_recipe(r.id, r.title, r.ingredient_lines, r.instructions, vocab));
    return out;
}

namespace {
std::set<int> choose_positions(int n, double ratio, std::mt19937_64& rng) {
    const int m = static_cast<int>(std::lround(ratio * n));
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return {idx.begin(), idx.begin() + m};
}
}  // namespace

NoisedRecipe apply_denoising_noise(const Recipe& recipe, double mask_ratio, std::mt19937_64& rng) {
    if (mask_ratio < 0.0 || mask_ratio > 1.0) throw std::invalid_argument("mask_ratio outside [0, 1]");
    NoisedRecipe out{recipe, {}, {}};
    const int n_ing = static_cast<int>(recipe.ingredient_lines.size());
    const int n_ins = static_cast<int>(recipe.instructions.size());
    out.masked_ingredient_positions = choose_positions(n_ing, mask_ratio, rng);
    out.masked_instruction_positions = choose_positions(n_ins, mask_ratio, rng);
    const bool all_ing = static_cast<int>(out.masked_ingredient_positions.size()) == n_ing;
    const bool all_ins = static_cast<int>(out.masked_instruction_positions.size()) == n_ins;
    if (all_ing && all_ins && n_ins > 0) {
        std::uniform_int_distribution<int> pick(0, n_ins - 1);
        out.masked_instruction_positions.erase(pick(rng));
    }
    return out;
}

NoisedRecipe mask_for_removal_critique(const Recipe& recipe, int target, const IngredientVocab& vocab) {
    if (!recipe.has_ingredient(target))
        throw std::invalid_argument("removal target is not an ingredient of recipe " + recipe.id);
    NoisedRecipe out{recipe, {}, {}};
    for (std::size_t i = 0; i < recipe.line_ingredient.size(); ++i)
        if (recipe.line_ingredient[i] == target) out.masked_ingredient_positions.insert(static_cast<int>(i));
    for (std::size_t i = 0; i < recipe.instructions.size(); ++i)
        if (vocab.mentions(recipe.instructions[i]).contains(target))
            out.masked_instruction_positions.insert(static_cast<int>(i));
    return out;
}

std::set<int> ingredient_mentions(const std::vector<std::string>& instructions, const IngredientVocab& vocab) {
    std::set<int> out;
    for (const auto& s : instructions) out.merge(vocab.mentions(s));
    return out;
}

std::vector<int> select_critique_targets(const std::vector<Recipe>& train, const IngredientVocab& vocab, int k,
                                         int min_support, const std::function<bool(int)>& eligible) {
    if (k < 0 || k % 2 != 0) throw std::invalid_argument("number of critique targets must be even");
    if (k > vocab.size()) throw std::invalid_argument("more critique targets than ingredients");
    const auto df = document_frequency(train, vocab.size());
    std::vector<int> pool;
    for (int i = 0; i < vocab.size(); ++i)
        if (df[i] >= min_support && (!eligible || eligible(i))) pool.push_back(i);
    if (static_cast<int>(pool.size()) < k)
        throw std::invalid_argument("only " + std::to_string(pool.size()) + " ingredients eligible for " +
                                    std::to_string(k) + " critique targets");
    auto by_name = [&](int a, int b) { return vocab.at(a).canonical_name < vocab.at(b).canonical_name; };
    std::vector<int> most = pool;
    std::sort(most.begin(), most.end(), [&](int a, int b) { return df[a] != df[b] ? df[a] > df[b] : by_name(a, b); });
    std::vector<int> least = pool;
    std::sort(least.begin(), least.end(), [&](int a, int b) { return df[a] != df[b] ? df[a] < df[b] : by_name(a, b); });
    std::vector<int> out(most.begin(), most.begin() + k / 2);
    for (int id : least) {
        if (static_cast<int>(out.size()) == k) break;
        if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
    }
    return out;
}

CritiqueEvalSet sample_eval_set(const std::vector<Recipe>& recipes, int target, int n_each, std::uint64_t seed) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < recipes.size(); ++i) (recipes[i].has_ingredient(target) ? pos : neg).push_back(i);
    if (static_cast<int>(pos.size()) < n_each)
        throw std::invalid_argument("not enough recipes containing the target (positive side): " +
                                    std::to_string(pos.size()) + " < " + std::to_string(n_each));
    if (static_cast<int>(neg.size()) < n_each)
        throw std::invalid_argument("not enough recipes without the target (negative side): " +
                                    std::to_string(neg.size()) + " < " + std::to_string(n_each));
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(target + 1)));
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    CritiqueEvalSet out;
    out.target = target;
    for (int i = 0; i < n_each; ++i) {
        out.positive.push_back(recipes[pos[i]]);
        out.negative.push_back(recipes[neg[i]]);
    }
    return out;
}

}  // namespace recipecrit
