#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "recipecrit/text.hpp"

namespace recipecrit {

// Upper bound on ingredient lines and on instruction steps per recipe.
inline constexpr int kMaxRecipeItems = 20;

struct Ingredient {
    int id = 0;
    std::string canonical_name;
    std::vector<std::string> aliases;  // includes canonical_name
};

// Ingredient vocabulary I. Slot size() is reserved for the EOS label.
class IngredientVocab {
public:
    IngredientVocab() = default;
    // Entries are (canonical name, extra aliases); ids follow the given order.
    explicit IngredientVocab(const std::vector<std::pair<std::string, std::vector<std::string>>>& entries);

    [[nodiscard]] int size() const { return static_cast<int>(ingredients_.size()); }
    [[nodiscard]] int eos_index() const { return size(); }
    [[nodiscard]] const Ingredient& at(int id) const { return ingredients_.at(id); }
    [[nodiscard]] const std::vector<Ingredient>& ingredients() const { return ingredients_; }
    // -1 when the name is not a canonical name or alias.
    [[nodiscard]] int find(const std::string& name) const;

    // Ingredient id of the longest alias occurring in the line (leftmost on ties), or -1.
    [[nodiscard]] int resolve_line(std::string_view line) const;
    // Every ingredient mentioned as a whole-token alias, longest match first.
    [[nodiscard]] std::set<int> mentions(std::string_view sentence) const;

    [[nodiscard]] Digest digest() const;
    [[nodiscard]] std::string to_tsv() const;
    void save(const std::string& path) const;
    static IngredientVocab load(const std::string& path);

private:
    struct Match {
        int start = 0;
        int len = 0;
        int id = -1;
    };
    // Leftmost-longest scan over tokens.
    [[nodiscard]] std::vector<Match> scan(const std::vector<std::string>& tokens) const;

    std::vector<Ingredient> ingredients_;
    std::unordered_map<std::string, int> by_name_;
    // first alias token -> (alias tokens, id), longest first
    std::unordered_map<std::string, std::vector<std::pair<std::vector<std::string>, int>>> by_first_;
};

struct Recipe {
    std::string id;
    std::string title;
    std::vector<std::string> ingredient_lines;
    std::vector<int> line_ingredient;  // resolved id per line, -1 when unresolved
    std::vector<int> ingredient_ids;   // sorted, unique
    std::vector<std::string> instructions;

    [[nodiscard]] bool has_ingredient(int id) const;
};

// Builds a Recipe from raw text, resolving ingredient lines against the vocabulary.
Recipe make_recipe(std::string id, std::string title, std::vector<std::string> ingredient_lines,
                   std::vector<std::string> instructions, const IngredientVocab& vocab);

struct NoisedRecipe {
    Recipe base;
    std::set<int> masked_ingredient_positions;
    std::set<int> masked_instruction_positions;
};

NoisedRecipe unmasked(const Recipe& r);

struct LoadReport {
    std::vector<Recipe> recipes;
    int dropped_bounds = 0;      // more than 20 ingredients or steps, or none
    int dropped_unresolved = 0;  // no ingredient line resolved
    int malformed_lines = 0;
};

struct RecipeParse {
    enum class Status { Ok, OutOfBounds, Unresolved };
    Status status = Status::Ok;
    Recipe recipe;
};
// Parses one {id?, title, ingredients, instructions} record; throws
// std::invalid_argument when it does not match that shape.
RecipeParse parse_recipe(const std::string& text, const IngredientVocab& vocab, const std::string& default_id);

// Reads line-delimited recipe records. Throws std::runtime_error when the file cannot be read.
LoadReport load_jsonl(const std::string& path, const IngredientVocab& vocab);
void save_jsonl(const std::string& path, const std::vector<Recipe>& recipes);
std::string recipe_to_json(const Recipe& r);

struct Splits {
    std::vector<Recipe> train, val, test;
};
Splits split_corpus(const std::vector<Recipe>& recipes, std::array<double, 3> fractions, std::uint64_t seed);

struct VocabBuild {
    IngredientVocab vocab;
    double coverage = 0.0;  // fraction of ingredient occurrences kept
};
// Keeps the max_size most frequent lexicon entries (document frequency, ties by name).
// Recipe ids refer to the lexicon.
VocabBuild build_ingredient_vocab(const std::vector<Recipe>& recipes, const IngredientVocab& lexicon,
                                  int max_size);
// Re-resolves recipes against another vocabulary.
std::vector<Recipe> reresolve(const std::vector<Recipe>& recipes, const IngredientVocab& vocab);

NoisedRecipe apply_denoising_noise(const Recipe& recipe, double mask_ratio, std::mt19937_64& rng);
// Masks the target's ingredient line(s) and every step mentioning it.
NoisedRecipe mask_for_removal_critique(const Recipe& recipe, int target, const IngredientVocab& vocab);

std::set<int> ingredient_mentions(const std::vector<std::string>& instructions, const IngredientVocab& vocab);

// Document frequency of every ingredient.
std::vector<int> document_frequency(const std::vector<Recipe>& recipes, int vocab_size);

// k/2 most and k/2 least popular ingredients; the least popular must appear in
// at least min_support recipes.
// An optional predicate further restricts which ingredients are eligible.
std::vector<int> select_critique_targets(const std::vector<Recipe>& train, const IngredientVocab& vocab, int k,
                                         int min_support = 50,
                                         const std::function<bool(int)>& eligible = {});

struct CritiqueEvalSet {
    int target = -1;
    std::vector<Recipe> positive;  // contain target
    std::vector<Recipe> negative;  // do not
};
CritiqueEvalSet sample_eval_set(const std::vector<Recipe>& recipes, int target, int n_each, std::uint64_t seed);

}  // namespace recipecrit
