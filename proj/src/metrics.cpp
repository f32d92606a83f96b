#include "recipecrit/metrics.hpp"

#include <algorithm>
#include <iterator>

namespace recipecrit {

namespace {

std::size_t intersection_size(const std::set<int>& a, const std::set<int>& b) {
    std::size_t n = 0;
    for (int x : a) n += b.count(x);
    return n;
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

double iou(const std::set<int>& a, const std::set<int>& b) {
    if (a.empty() && b.empty()) return 1.0;
    const auto inter = static_cast<double>(intersection_size(a, b));
    return inter / (static_cast<double>(a.size() + b.size()) - inter);
}

double set_f1(const std::set<int>& a, const std::set<int>& b) {
    if (a.empty() && b.empty()) return 1.0;
    // Dice form: one rounding, equal to the harmonic mean of precision and recall.
    return 2.0 * static_cast<double>(intersection_size(a, b)) / static_cast<double>(a.size() + b.size());
}

PRF coherence_prf(const std::set<int>& predicted, const std::vector<std::string>& instructions,
                  const IngredientVocab& vocab) {
    const std::set<int> mentioned = ingredient_mentions(instructions, vocab);
    if (mentioned.empty() && predicted.empty()) return {1.0, 1.0, 1.0};
    const auto inter = static_cast<double>(intersection_size(mentioned, predicted));
    PRF out;
    out.precision = mentioned.empty() ? 0.0 : inter / static_cast<double>(mentioned.size());
    out.recall = predicted.empty() ? 0.0 : inter / static_cast<double>(predicted.size());
    out.f1 = harmonic(out.precision, out.recall);
    return out;
}

bool success(const std::set<int>& edited_set, const std::vector<std::string>& edited_instructions,
             const Critique& critique, const IngredientVocab& vocab, SuccessRule rule) {
    const bool want = critique.direction == Direction::Add;
    const bool in_list = edited_set.count(critique.ingredient) > 0;
    const bool in_text = ingredient_mentions(edited_instructions, vocab).count(critique.ingredient) > 0;
    switch (rule) {
        case SuccessRule::ListOnly: return in_list == want;
        case SuccessRule::TextOnly: return in_text == want;
        case SuccessRule::ListAndText: break;
    }
    return in_list == want && in_text == want;
}

bool success(const EditedRecipe& edited, const Critique& critique, const IngredientVocab& vocab, SuccessRule rule) {
    return success(std::set<int>(edited.ingredients_after.begin(), edited.ingredients_after.end()),
                   edited.instructions, critique, vocab, rule);
}

}  // namespace recipecrit
