#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "recipecrit/corpus.hpp"
#include "recipecrit/errors.hpp"

namespace recipecrit {

// A dish role draws between min and max ingredients from one group. Each drawn
// ingredient gets its own step from `steps` ({ING} placeholder), or, when more
// than one is drawn, the role may use a `together` step ({INGS} placeholder).
struct GrammarRole {
    std::string group;
    int min = 1;
    int max = 1;
    bool main = false;  // supplies {MAIN} in the title
    std::vector<std::string> steps;
    std::vector<std::string> together;
};

struct GrammarDish {
    std::string name;
    double weight = 1.0;
    std::vector<std::string> titles;
    std::vector<std::string> intro;
    std::vector<std::string> outro;
    std::vector<GrammarRole> roles;
};

struct Grammar {
    // Ingredient at rank r (0-based) is drawn with weight 1 / (r + 1)^zipf_exponent.
    double zipf_exponent = 1.0;
    double together_probability = 0.5;
    std::vector<std::pair<std::string, std::vector<std::string>>> ingredients;
    std::vector<std::string> quantities;
    std::map<std::string, std::vector<std::string>> groups;
    std::vector<GrammarDish> dishes;
};

// Parses and validates a JSON grammar. Throws ConfigError.
Grammar parse_grammar(const std::string& text);
Grammar load_grammar(const std::string& path);

IngredientVocab grammar_vocab(const Grammar& g);

// Every recipe satisfies ingredient_mentions(instructions) == ingredient_ids.
std::vector<Recipe> generate_synthetic_corpus(const Grammar& g, int n, std::uint64_t seed);

}  // namespace recipecrit
