#pragma once

#include <set>
#include <string>
#include <vector>

#include "recipecrit/corpus.hpp"
#include "recipecrit/critique.hpp"

namespace recipecrit {

// Both empty counts as a perfect match.
double iou(const std::set<int>& a, const std::set<int>& b);
double set_f1(const std::set<int>& a, const std::set<int>& b);

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Ingredients mentioned in the steps against the predicted set.
PRF coherence_prf(const std::set<int>& predicted, const std::vector<std::string>& instructions,
                  const IngredientVocab& vocab);

// Which evidence a successful edit needs.
enum class SuccessRule { ListAndText, ListOnly, TextOnly };

bool success(const std::set<int>& edited_set, const std::vector<std::string>& edited_instructions,
             const Critique& critique, const IngredientVocab& vocab, SuccessRule rule = SuccessRule::ListAndText);
bool success(const EditedRecipe& edited, const Critique& critique, const IngredientVocab& vocab,
             SuccessRule rule = SuccessRule::ListAndText);

}  // namespace recipecrit
