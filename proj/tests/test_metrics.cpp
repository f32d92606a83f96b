#include <algorithm>
#include <iterator>
#include <random>

#include "doctest.h"
#include "kitchen.hpp"
#include "mention_oracle.hpp"
#include "recipecrit/metrics.hpp"

using namespace recipecrit;

namespace {

std::set<int> random_set(std::mt19937_64& rng, int universe) {
    std::set<int> s;
    const int n = std::uniform_int_distribution<int>(0, universe)(rng);
    for (int i = 0; i < n; ++i) s.insert(std::uniform_int_distribution<int>(0, universe - 1)(rng));
    return s;
}

// Set arithmetic through the standard algorithms.
std::pair<double, double> inter_union(const std::set<int>& a, const std::set<int>& b) {
    std::vector<int> i, u;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(i));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(u));
    return {static_cast<double>(i.size()), static_cast<double>(u.size())};
}

double ref_iou(const std::set<int>& a, const std::set<int>& b) {
    auto [i, u] = inter_union(a, b);
    return u == 0 ? 1.0 : i / u;
}

// Dice form of F1.
double ref_f1(const std::set<int>& a, const std::set<int>& b) {
    if (a.empty() && b.empty()) return 1.0;
    auto [i, u] = inter_union(a, b);
    (void)u;
    return 2.0 * i / static_cast<double>(a.size() + b.size());
}

std::set<int> ref_mentions(const std::vector<std::string>& steps, const IngredientVocab& v) {
    std::set<int> out;
    for (const auto& s : steps)
        for (int id : testutil::brute_force_mentions(s, v)) out.insert(id);
    return out;
}

const std::vector<std::string> kWords{"toss", "the", "with", "and", "bake", "tomatoes", "garlic clove",
                                      "olive oil", "oil", "bell pepper", "pepper", "scallions", "kale",
                                      "cloves", "onion", "green onions", "salt", "rosemary", "kalette",
                                      "peppery", "onions,"};

std::vector<std::string> random_steps(std::mt19937_64& rng) {
    std::vector<std::string> steps;
    const int n = std::uniform_int_distribution<int>(0, 4)(rng);
    for (int i = 0; i < n; ++i) {
        std::string s;
        const int w = std::uniform_int_distribution<int>(0, 8)(rng);
        for (int j = 0; j < w; ++j) {
            if (!s.empty()) s += ' ';
            s += kWords[std::uniform_int_distribution<std::size_t>(0, kWords.size() - 1)(rng)];
        }
        steps.push_back(s);
    }
    return steps;
}

}  // namespace

TEST_CASE("iou and f1 fixed cases") {
    CHECK(iou({1, 2, 3}, {2, 3, 4}) == 0.5);
    CHECK(set_f1({1, 2, 3}, {2, 3, 4}) == doctest::Approx(2.0 / 3.0));
    CHECK(iou({5, 6}, {5, 6}) == 1.0);
    CHECK(set_f1({5, 6}, {5, 6}) == 1.0);
    CHECK(iou({1}, {2}) == 0.0);
    CHECK(set_f1({1}, {2}) == 0.0);
    CHECK(iou({}, {}) == 1.0);
    CHECK(set_f1({}, {}) == 1.0);
    CHECK(set_f1({}, {1}) == 0.0);
    CHECK(iou({}, {1}) == 0.0);
}

TEST_CASE("set metrics equal the reference and satisfy Jaccard <= Dice") {
    std::mt19937_64 rng(11);
    for (int c = 0; c < 100; ++c) {
        const auto a = random_set(rng, 8), b = random_set(rng, 8);
        CHECK(iou(a, b) == ref_iou(a, b));
        CHECK(set_f1(a, b) == ref_f1(a, b));
        CHECK(iou(a, b) == iou(b, a));
        CHECK(set_f1(a, b) == set_f1(b, a));
        CHECK(iou(a, b) <= set_f1(a, b) + 1e-15);
        CHECK((iou(a, b) == 1.0) == (a == b));
        CHECK((set_f1(a, b) == 1.0) == (a == b));
    }
}

TEST_CASE("coherence closed forms") {
    const auto v = testutil::kitchen();
    const Recipe r = testutil::confit(v);
    const std::set<int> listed{v.find("tomato"), v.find("garlic"), v.find("oil"), v.find("rosemary"), v.find("salt"),
                               v.find("pepper")};
    const PRF full = coherence_prf(listed, r.instructions, v);
    CHECK(full.precision == 1.0);
    CHECK(full.recall == 1.0);
    CHECK(full.f1 == 1.0);

    auto extra = r.instructions;
    extra.push_back("serve with kale.");
    const PRF p = coherence_prf(listed, extra, v);
    CHECK(p.precision == doctest::Approx(6.0 / 7.0));
    CHECK(p.recall == 1.0);

    CHECK(coherence_prf({}, {"stir well"}, v).f1 == 1.0);
    CHECK(coherence_prf({v.find("kale")}, {"stir well"}, v).f1 == 0.0);
    CHECK(coherence_prf({}, {"add kale"}, v).f1 == 0.0);
}

TEST_CASE("success rule") {
    const auto v = testutil::kitchen();
    const int kale = v.find("kale"), tomato = v.find("tomato");
    const Critique add{kale, Direction::Add}, remove{tomato, Direction::Remove};
    CHECK(success({kale, tomato}, {"toss kale with tomatoes and garlic"}, add, v));
    CHECK_FALSE(success({kale, tomato}, {"roast the tomatoes"}, add, v));
    CHECK(success({kale, tomato}, {"roast the tomatoes"}, add, v, SuccessRule::ListOnly));
    CHECK_FALSE(success({kale, tomato}, {"roast the tomatoes"}, add, v, SuccessRule::TextOnly));
    CHECK(success({kale}, {"wash the kale"}, remove, v));
    CHECK_FALSE(success({kale}, {"wash the kale and tomatoes"}, remove, v));
    CHECK_FALSE(success({kale, tomato}, {"wash the kale"}, remove, v));
}

TEST_CASE("mentions, coherence and success equal brute-force references") {
    const auto v = testutil::kitchen();
    std::mt19937_64 rng(5);
    for (int c = 0; c < 100; ++c) {
        const auto steps = random_steps(rng);
        const auto predicted = random_set(rng, v.size());
        const auto mentioned = ref_mentions(steps, v);
        CHECK(ingredient_mentions(steps, v) == mentioned);

        auto [i, u] = inter_union(mentioned, predicted);
        (void)u;
        double p = mentioned.empty() ? 0.0 : i / static_cast<double>(mentioned.size());
        double r = predicted.empty() ? 0.0 : i / static_cast<double>(predicted.size());
        double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
        if (mentioned.empty() && predicted.empty()) p = r = f = 1.0;
        const PRF got = coherence_prf(predicted, steps, v);
        CHECK(got.precision == p);
        CHECK(got.recall == r);
        CHECK(got.f1 == f);

        const int target = std::uniform_int_distribution<int>(0, v.size() - 1)(rng);
        const Direction d = c % 2 ? Direction::Add : Direction::Remove;
        const bool want = d == Direction::Add;
        const bool expected = (predicted.count(target) > 0) == want && (mentioned.count(target) > 0) == want;
        CHECK(success(predicted, steps, {target, d}, v) == expected);
    }
}
