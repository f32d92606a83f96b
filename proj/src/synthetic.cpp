#include "recipecrit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace recipecrit {

using nlohmann::json;

namespace {

std::vector<std::string> strings(const json& j, const char* key) {
    if (!j.contains(key)) return {};
    return j.at(key).get<std::vector<std::string>>();
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
    return s;
}

void check_generic(const std::string& text, const IngredientVocab& vocab, const std::string& where) {
    std::string stripped = replace_all(replace_all(replace_all(text, "{INGS}", " "), "{ING}", " "), "{MAIN}", " ");
    if (!vocab.mentions(stripped).empty())
        throw ConfigError(where + ": template text mentions an ingredient: \"" + text + "\"");
}

void validate(const Grammar& g) {
    if (!(g.zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent must be nonnegative");
    if (!(g.together_probability >= 0.0 && g.together_probability <= 1.0))
        throw ConfigError("together_probability must be in [0, 1]");
    if (g.ingredients.empty()) throw ConfigError("grammar defines no ingredients");
    IngredientVocab vocab;
    try {
        vocab = grammar_vocab(g);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("ingredient list: ") + e.what());
    }
    if (g.quantities.empty()) throw ConfigError("grammar defines no quantities");
    for (const auto& q : g.quantities) check_generic(q, vocab, "quantity");
    for (const auto& [name, members] : g.groups) {
        if (members.empty()) throw ConfigError("group " + name + " is empty");
        std::set<std::string> seen;
        for (const auto& m : members) {
            if (vocab.find(m) < 0 || vocab.at(vocab.find(m)).canonical_name != m)
                throw ConfigError("group " + name + " references unknown ingredient " + m);
            if (!seen.insert(m).second) throw ConfigError("group " + name + " lists " + m + " twice");
        }
    }
    if (g.dishes.size() < 2) throw ConfigError("grammar needs at least two dishes");
    for (const auto& d : g.dishes) {
        const std::string where = "dish " + d.name;
        if (!(d.weight > 0.0)) throw ConfigError(where + ": weight must be positive");
        if (d.titles.empty()) throw ConfigError(where + ": no titles");
        for (const auto& t : d.titles) {
            if (t.find("{MAIN}") == std::string::npos) throw ConfigError(where + ": title lacks {MAIN}: " + t);
            check_generic(t, vocab, where);
        }
        for (const auto& s : d.intro) check_generic(s, vocab, where);
        for (const auto& s : d.outro) check_generic(s, vocab, where);
        int mains = 0, max_ing = 0;
        for (const auto& r : d.roles) {
            auto it = g.groups.find(r.group);
            if (it == g.groups.end()) throw ConfigError(where + ": unknown group " + r.group);
            if (r.min < 0 || r.min > r.max || r.max > static_cast<int>(it->second.size()))
                throw ConfigError(where + ": bad min/max for group " + r.group);
            if (r.main) {
                ++mains;
                if (r.min < 1) throw ConfigError(where + ": main role must have min >= 1");
            }
            if (r.steps.empty()) throw ConfigError(where + ": role " + r.group + " has no steps");
            for (const auto& s : r.steps) {
                if (s.find("{ING}") == std::string::npos) throw ConfigError(where + ": step lacks {ING}: " + s);
                check_generic(s, vocab, where);
            }
            for (const auto& s : r.together) {
                if (s.find("{INGS}") == std::string::npos) throw ConfigError(where + ": step lacks {INGS}: " + s);
                check_generic(s, vocab, where);
            }
            max_ing += r.max;
        }
        if (mains != 1) throw ConfigError(where + ": exactly one main role required");
        const int max_steps = max_ing + (d.intro.empty() ? 0 : 1) + (d.outro.empty() ? 0 : 1);
        if (max_ing > kMaxRecipeItems || max_steps > kMaxRecipeItems)
            throw ConfigError(where + ": can exceed the 20 ingredient / 20 step bound");
    }
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string join_names(const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i > 0) s += i + 1 == names.size() ? " and " : ", ";
        s += names[i];
    }
    return s;
}

}  // namespace

Grammar parse_grammar(const std::string& text) {
    Grammar g;
    try {
        const json j = json::parse(text);
        g.zipf_exponent = j.value("zipf_exponent", 1.0);
        g.together_probability = j.value("together_probability", 0.5);
        for (const auto& ing : j.at("ingredients"))
            g.ingredients.emplace_back(ing.at("name").get<std::string>(), strings(ing, "aliases"));
        g.quantities = strings(j, "quantities");
        for (const auto& [name, members] : j.at("groups").items())
            g.groups[name] = members.get<std::vector<std::string>>();
        for (const auto& dj : j.at("dishes")) {
            GrammarDish d;
            d.name = dj.at("name").get<std::string>();
            d.weight = dj.value("weight", 1.0);
            d.titles = strings(dj, "titles");
            d.intro = strings(dj, "intro");
            d.outro = strings(dj, "outro");
            for (const auto& rj : dj.at("roles")) {
                GrammarRole r;
                r.group = rj.at("group").get<std::string>();
                r.min = rj.value("min", 1);
                r.max = rj.value("max", r.min);
                r.main = rj.value("main", false);
                r.steps = strings(rj, "steps");
                r.together = strings(rj, "together");
                d.roles.push_back(std::move(r));
            }
            g.dishes.push_back(std::move(d));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("grammar: ") + e.what());
    }
    validate(g);
    return g;
}

Grammar load_grammar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read grammar: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_grammar(ss.str());
}

IngredientVocab grammar_vocab(const Grammar& g) { return IngredientVocab(g.ingredients); }

std::vector<Recipe> generate_synthetic_corpus(const Grammar& g, int n, std::uint64_t seed) {
    if (n < 0) throw std::invalid_argument("corpus size must be nonnegative");
    const IngredientVocab vocab = grammar_vocab(g);
    std::vector<double> dish_weights;
    for (const auto& d : g.dishes) dish_weights.push_back(d.weight);
    std::mt19937_64 rng(seed);
    std::vector<Recipe> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const GrammarDish& dish = g.dishes[std::discrete_distribution<int>(dish_weights.begin(), dish_weights.end())(rng)];
        std::set<int> chosen;
        std::vector<std::string> lines, steps;
        std::string main_name;
        if (!dish.intro.empty()) steps.push_back(pick(dish.intro, rng));
        for (const auto& role : dish.roles) {
            std::vector<int> pool;
            for (const auto& m : g.groups.at(role.group)) {
                const int id = vocab.find(m);
                if (!chosen.contains(id)) pool.push_back(id);
            }
            const int want = std::uniform_int_distribution<int>(role.min, role.max)(rng);
            std::vector<int> drawn;
            while (static_cast<int>(drawn.size()) < want && !pool.empty()) {
                std::vector<double> w;
                for (int id : pool) w.push_back(1.0 / std::pow(id + 1.0, g.zipf_exponent));
                const int k = std::discrete_distribution<int>(w.begin(), w.end())(rng);
                drawn.push_back(pool[k]);
                pool.erase(pool.begin() + k);
            }
            if (drawn.empty()) continue;
            std::vector<std::string> surfaces;
            for (int id : drawn) {
                chosen.insert(id);
                surfaces.push_back(pick(vocab.at(id).aliases, rng));
                lines.push_back(pick(g.quantities, rng) + " " + pick(vocab.at(id).aliases, rng));
            }
            if (role.main) main_name = vocab.at(drawn.front()).canonical_name;
            const bool together = drawn.size() > 1 && !role.together.empty() &&
                                  std::bernoulli_distribution(g.together_probability)(rng);
            if (together) {
                steps.push_back(replace_all(pick(role.together, rng), "{INGS}", join_names(surfaces)));
            } else {
                for (const auto& s : surfaces) steps.push_back(replace_all(pick(role.steps, rng), "{ING}", s));
            }
        }
        if (!dish.outro.empty()) steps.push_back(pick(dish.outro, rng));
        const std::string title = replace_all(pick(dish.titles, rng), "{MAIN}", main_name);
        Recipe r = make_recipe("syn" + std::to_string(i), title, std::move(lines), std::move(steps), vocab);
        const std::vector<int> want_ids(chosen.begin(), chosen.end());
        const auto mentioned = ingredient_mentions(r.instructions, vocab);
        if (r.ingredient_ids != want_ids || std::vector<int>(mentioned.begin(), mentioned.end()) != want_ids)
            throw ConfigError("grammar produced an incoherent recipe (" + dish.name + "): " + recipe_to_json(r));
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace recipecrit
