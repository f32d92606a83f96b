#include "recipecrit/service.hpp"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "recipecrit/metrics.hpp"

namespace recipecrit {

using json = nlohmann::json;

namespace {

// Raised inside handlers and turned into an error response.
struct HttpError {
    int status;
    std::string message;
};

std::string error_code(int status) {
    switch (status) {
        case 400: return "invalid_request";
        case 404: return "not_found";
        case 405: return "method_not_allowed";
        case 409: return "conflict";
        case 415: return "unsupported_media_type";
        case 422: return "unprocessable";
        case 503: return "unavailable";
        default: return "internal";
    }
}

HttpResponse error(int status, const std::string& message) {
    return {status, json{{"code", error_code(status)}, {"message", message}}.dump()};
}

HttpResponse ok(const json& j, int status = 200) { return {status, j.dump()}; }

json parse_body(const std::string& body) {
    try {
        json j = body.empty() ? json::object() : json::parse(body);
        if (!j.is_object()) throw HttpError{400, "request body must be a JSON object"};
        return j;
    } catch (const json::exception& e) {
        throw HttpError{400, std::string("malformed JSON: ") + e.what()};
    }
}

std::int64_t now_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::string z_digest(const Matrix& z) {
    return to_hex(sha256(std::string_view(reinterpret_cast<const char*>(z.data.data()), z.data.size() * sizeof(double))));
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : path) {
        if (c == '/') {
            if (!cur.empty()) parts.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) parts.push_back(std::move(cur));
    return parts;
}

}  // namespace

Service::Service(ServiceOptions options) : options_(std::move(options)) {
    options_.default_critique.validate();
    if (!options_.persist_dir.empty()) std::filesystem::create_directories(options_.persist_dir);
}

Service::~Service() = default;

void Service::set_model(LoadedModel model) {
    {
        std::unique_lock lock(mu_);
        if (!model.model) throw std::invalid_argument("set_model needs a model");
        model_digest_ = to_hex(model.digest);
        model_ = std::make_unique<LoadedModel>(std::move(model));
    }
    restore();
}

bool Service::ready() const {
    std::shared_lock lock(mu_);
    return model_ != nullptr;
}

HttpResponse Service::handle(const std::string& method, const std::string& path, const std::string& body,
                             const std::map<std::string, std::string>& query, const std::string& content_type) {
    try {
        if (method == "POST" && !body.empty() && content_type.rfind("application/json", 0) != 0)
            return error(415, "content type must be application/json");
        return route(method, split_path(path), body, query);
    } catch (const HttpError& e) {
        return error(e.status, e.message);
    } catch (const std::invalid_argument& e) {
        return error(400, e.what());
    } catch (const std::exception& e) {
        return error(500, e.what());
    }
}

HttpResponse Service::route(const std::string& method, const std::vector<std::string>& p, const std::string& body,
                            const std::map<std::string, std::string>& query) {
    auto need = [&](const char* m) {
        if (method != m) throw HttpError{405, "use " + std::string(m) + " for this route"};
    };
    if (p.size() == 1 && p[0] == "health") {
        need("GET");
        return health();
    }
    if (p.size() == 2 && p[0] == "vocab" && p[1] == "ingredients") {
        need("GET");
        return vocab();
    }
    if (!p.empty() && p[0] == "recipes") {
        if (p.size() == 1) {
            need("POST");
            return add_recipe(body, true);
        }
        if (p.size() == 2) {
            need("GET");
            std::shared_lock lock(mu_);
            auto it = recipes_.find(p[1]);
            if (it == recipes_.end()) throw HttpError{404, "unknown recipe " + p[1]};
            json j = json::parse(recipe_to_json(it->second));
            j["ingredient_ids"] = it->second.ingredient_ids;
            return ok(j);
        }
    }
    if (!p.empty() && p[0] == "sessions") {
        if (p.size() == 1) {
            need("POST");
            return create_session(body, true);
        }
        auto s = find_session(p[1]);
        if (p.size() == 2) {
            need("GET");
            std::lock_guard lock(s->mu);
            return session_json(*s);
        }
        if (p.size() == 3 && p[2] == "critiques") {
            need("POST");
            auto it = query.find("from");
            const bool from_base = it != query.end() && it->second == "base";
            if (it != query.end() && it->second != "base" && it->second != "current")
                throw HttpError{400, "from must be base or current"};
            return critique(*s, body, from_base, true);
        }
        if (p.size() == 3 && p[2] == "undo") {
            need("POST");
            return undo(*s, true);
        }
        if (p.size() == 3 && p[2] == "replay") {
            need("GET");
            const Matrix z = replay(s->id);
            std::lock_guard lock(s->mu);
            return ok({{"session_id", s->id},
                       {"z_digest", z_digest(z)},
                       {"current_z_digest", z_digest(s->current.z)},
                       {"matches", z == s->current.z}});
        }
    }
    throw HttpError{404, "no route for " + method};
}

HttpResponse Service::health() const {
    std::shared_lock lock(mu_);
    if (!model_) return ok({{"status", "loading"}, {"model_digest", nullptr}});
    return ok({{"status", "ok"}, {"model_digest", model_digest_}, {"stage", model_->stage}});
}

HttpResponse Service::vocab() const {
    std::shared_lock lock(mu_);
    if (!model_) throw HttpError{503, "model not loaded"};
    json arr = json::array();
    for (const auto& ing : model_->ingredients.ingredients())
        arr.push_back({{"id", ing.id}, {"name", ing.canonical_name}, {"aliases", ing.aliases}});
    return ok(arr);
}

namespace {

json ingredient_list(const std::vector<int>& ids, const IngredientVocab& v) {
    json arr = json::array();
    for (int id : ids) arr.push_back({{"id", id}, {"name", v.at(id).canonical_name}});
    return arr;
}

std::string state_digest(const Matrix& z, const std::vector<int>& ids, const std::vector<std::string>& steps) {
    std::string blob(reinterpret_cast<const char*>(z.data.data()), z.data.size() * sizeof(double));
    for (int id : ids) blob += std::to_string(id) + ",";
    for (const auto& s : steps) blob += s + "\n";
    return to_hex(sha256(blob));
}

}  // namespace

HttpResponse Service::add_recipe(const std::string& body, bool persist) {
    std::unique_lock lock(mu_);
    if (!model_) throw HttpError{503, "model not loaded"};
    RecipeParse parsed;
    try {
        parsed = parse_recipe(body, model_->ingredients, "u" + std::to_string(next_recipe_));
    } catch (const std::invalid_argument& e) {
        throw HttpError{400, e.what()};
    }
    Recipe& r = parsed.recipe;
    if (parsed.status == RecipeParse::Status::OutOfBounds)
        throw HttpError{400, "a recipe needs 1 to " + std::to_string(kMaxRecipeItems) + " ingredients and steps"};
    if (parsed.status == RecipeParse::Status::Unresolved)
        throw HttpError{422, "no ingredient line matches the vocabulary"};
    if (r.id.empty()) throw HttpError{400, "recipe id must not be empty"};
    if (recipes_.count(r.id)) throw HttpError{409, "recipe " + r.id + " already exists"};
    ++next_recipe_;
    json lines = json::array();
    for (std::size_t i = 0; i < r.ingredient_lines.size(); ++i) {
        const int id = r.line_ingredient[i];
        lines.push_back({{"line", r.ingredient_lines[i]},
                         {"ingredient_id", id < 0 ? json(nullptr) : json(id)},
                         {"name", id < 0 ? json(nullptr) : json(model_->ingredients.at(id).canonical_name)}});
    }
    const std::string id = r.id;
    json resp{{"recipe_id", id}, {"ingredients", ingredient_list(r.ingredient_ids, model_->ingredients)},
              {"lines", lines}};
    const std::string record = recipe_to_json(r);
    recipes_.emplace(id, std::move(r));
    lock.unlock();
    if (persist) append_event("recipes.jsonl", record);
    return ok(resp, 201);
}

Service::State Service::base_state(const Recipe& r, std::span<const Critique> critiques) const {
    Model& m = *model_->model;
    State s;
    s.z = m.encode(edit_input(r, critiques, model_->ingredients, model_->tokens));
    s.ingredients = m.predict_ingredients(s.z).top_set;
    s.instructions = decode_instructions(m, s.z, s.ingredients, model_->tokens);
    return s;
}

HttpResponse Service::create_session(const std::string& body, bool persist, const std::string& forced_id) {
    const json j = parse_body(body);
    if (!j.contains("recipe_id") || !j.at("recipe_id").is_string()) throw HttpError{400, "recipe_id is required"};
    const std::string recipe_id = j.at("recipe_id").get<std::string>();
    CritiqueConfig cfg = options_.default_critique;
    if (j.contains("critique_config")) {
        try {
            json merged = json::parse(cfg.to_json());
            merged.update(j.at("critique_config"));
            cfg = CritiqueConfig::from_json(merged.dump());
        } catch (const std::exception& e) {
            throw HttpError{400, e.what()};
        }
    }
    auto s = std::make_shared<Session>();
    Recipe recipe;
    {
        std::shared_lock lock(mu_);
        if (!model_) throw HttpError{503, "model not loaded"};
        auto it = recipes_.find(recipe_id);
        if (it == recipes_.end()) throw HttpError{404, "unknown recipe " + recipe_id};
        recipe = it->second;
    }
    s->recipe_id = recipe_id;
    s->config = cfg;
    s->base = base_state(recipe, {});
    s->current = s->base;
    s->created = s->updated = now_seconds();
    {
        std::unique_lock lock(mu_);
        if (!forced_id.empty()) {
            s->id = forced_id;
            if (forced_id.size() > 1 && forced_id[0] == 's')
                next_session_ = std::max<std::uint64_t>(next_session_, std::stoull(forced_id.substr(1)) + 1);
        } else {
            s->id = "s" + std::to_string(next_session_++);
        }
        sessions_[s->id] = s;
    }
    if (persist)
        append_event("events.jsonl", json{{"type", "session"},
                                          {"session_id", s->id},
                                          {"recipe_id", recipe_id},
                                          {"critique_config", json::parse(cfg.to_json())}}
                                         .dump());
    const IngredientPrediction pred = model_->model->predict_ingredients(s->base.z);
    json probs = json::array();
    for (int id : s->base.ingredients)
        probs.push_back({{"id", id}, {"name", model_->ingredients.at(id).canonical_name},
                         {"probability", pred.probabilities[id]}});
    return ok({{"session_id", s->id},
               {"recipe_id", recipe_id},
               {"prediction", probs},
               {"instructions", s->base.instructions},
               {"z_digest", z_digest(s->base.z)},
               {"critique_config", json::parse(cfg.to_json())}},
              201);
}

std::shared_ptr<Service::Session> Service::find_session(const std::string& id) {
    std::shared_lock lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw HttpError{404, "unknown session " + id};
    return it->second;
}

std::string Service::apply(Session& s, const Critique& c, bool from_base, bool& noop) {
    noop = false;
    for (const auto& e : s.history) {
        if (e.critique.ingredient == c.ingredient && e.critique.direction != c.direction)
            throw HttpError{409, "ingredient was already critiqued in the opposite direction"};
    }
    const bool in_current = std::binary_search(s.current.ingredients.begin(), s.current.ingredients.end(), c.ingredient);
    bool repeated = false;
    for (const auto& e : s.history) repeated = repeated || e.critique == c;
    if (repeated && in_current == (c.direction == Direction::Add)) {
        noop = true;
        return "";
    }
    Recipe recipe;
    {
        std::shared_lock lock(mu_);
        recipe = recipes_.at(s.recipe_id);
    }
    if (c.direction == Direction::Remove && !in_current && !recipe.has_ingredient(c.ingredient))
        throw HttpError{422, "cannot remove " + model_->ingredients.at(c.ingredient).canonical_name +
                                 ": not in the recipe or the current edit"};
    const bool restart = from_base || s.history.empty();
    Matrix z0;
    if (restart) {
        // Text masking only applies to ingredients that appear in the base recipe.
        std::vector<Critique> mask;
        if (c.direction == Direction::Remove && recipe.has_ingredient(c.ingredient)) mask.push_back(c);
        z0 = model_->model->encode(edit_input(recipe, mask, model_->ingredients, model_->tokens));
    } else {
        z0 = s.current.z;
    }
    Model& m = *model_->model;
    const std::vector<Critique> cs{c};
    const IngredientTarget target = build_target(m.predict_ingredients(z0), cs);
    CritiqueResult r = critique_latent(model_objective(m), z0, target, cs, s.config);
    State next;
    next.z = std::move(r.z);
    next.ingredients = m.predict_ingredients(next.z).top_set;
    next.instructions = decode_instructions(m, next.z, next.ingredients, model_->tokens);
    s.current = std::move(next);
    return r.trace.to_json();
}

HttpResponse Service::critique(Session& s, const std::string& body, bool from_base, bool persist) {
    const json j = parse_body(body);
    if (!ready()) throw HttpError{503, "model not loaded"};
    const IngredientVocab& vocab = model_->ingredients;
    if (!j.contains("ingredient")) throw HttpError{400, "ingredient is required"};
    if (!j.contains("direction") || !j.at("direction").is_string()) throw HttpError{400, "direction is required"};
    Critique c;
    const json& ing = j.at("ingredient");
    if (ing.is_number_integer()) {
        c.ingredient = ing.get<int>();
        if (c.ingredient < 0 || c.ingredient >= vocab.size())
            throw HttpError{422, "ingredient id out of range"};
    } else if (ing.is_string()) {
        c.ingredient = vocab.find(ing.get<std::string>());
        if (c.ingredient < 0) c.ingredient = vocab.find(detokenize(tokenize(ing.get<std::string>())));
        if (c.ingredient < 0) throw HttpError{422, "unknown ingredient \"" + ing.get<std::string>() + "\""};
    } else {
        throw HttpError{400, "ingredient must be a name or an id"};
    }
    try {
        c.direction = direction_from_string(j.at("direction").get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw HttpError{400, e.what()};
    }

    std::lock_guard lock(s.mu);
    Entry entry;
    entry.critique = c;
    entry.from_base = from_base;
    entry.before = s.current;
    entry.trace_json = apply(s, c, from_base, entry.noop);
    s.history.push_back(entry);
    s.updated = now_seconds();
    if (persist)
        append_event("events.jsonl", json{{"type", "critique"},
                                          {"session_id", s.id},
                                          {"ingredient", c.ingredient},
                                          {"direction", to_string(c.direction)},
                                          {"from_base", from_base}}
                                         .dump());

    Recipe recipe;
    {
        std::shared_lock rl(mu_);
        recipe = recipes_.at(s.recipe_id);
    }
    const std::set<int> edited(s.current.ingredients.begin(), s.current.ingredients.end());
    std::set<int> base(recipe.ingredient_ids.begin(), recipe.ingredient_ids.end()), edited_wo = edited;
    base.erase(c.ingredient);
    edited_wo.erase(c.ingredient);
    const PRF coh = coherence_prf(edited, s.current.instructions, vocab);
    return ok({{"session_id", s.id},
               {"critique", {{"ingredient", c.ingredient}, {"name", vocab.at(c.ingredient).canonical_name},
                             {"direction", to_string(c.direction)}}},
               {"noop", entry.noop},
               {"from_base", from_base},
               {"ingredients", ingredient_list(s.current.ingredients, vocab)},
               {"instructions", s.current.instructions},
               {"trace", entry.trace_json.empty() ? json(nullptr) : json::parse(entry.trace_json)},
               {"success",
                {{"list", success(edited, s.current.instructions, c, vocab, SuccessRule::ListOnly)},
                 {"text", success(edited, s.current.instructions, c, vocab, SuccessRule::TextOnly)},
                 {"both", success(edited, s.current.instructions, c, vocab, SuccessRule::ListAndText)}}},
               {"coherence", {{"precision", coh.precision}, {"recall", coh.recall}, {"f1", coh.f1}}},
               {"fidelity", {{"iou", iou(edited_wo, base)}, {"f1", set_f1(edited_wo, base)}}},
               {"history_length", s.history.size()},
               {"z_digest", z_digest(s.current.z)},
               {"state_digest", state_digest(s.current.z, s.current.ingredients, s.current.instructions)}});
}

HttpResponse Service::undo(Session& s, bool persist) {
    std::lock_guard lock(s.mu);
    if (s.history.empty()) throw HttpError{409, "nothing to undo"};
    s.current = s.history.back().before;
    s.history.pop_back();
    s.updated = now_seconds();
    if (persist) append_event("events.jsonl", json{{"type", "undo"}, {"session_id", s.id}}.dump());
    return session_json(s);
}

HttpResponse Service::session_json(Session& s) const {
    std::shared_lock lock(mu_);
    const IngredientVocab& vocab = model_->ingredients;
    json history = json::array();
    for (const auto& e : s.history)
        history.push_back({{"ingredient", e.critique.ingredient},
                           {"name", vocab.at(e.critique.ingredient).canonical_name},
                           {"direction", to_string(e.critique.direction)},
                           {"from_base", e.from_base},
                           {"noop", e.noop},
                           {"trace_digest", to_hex(sha256(e.trace_json))}});
    auto state = [&](const State& st) {
        return json{{"ingredients", ingredient_list(st.ingredients, vocab)},
                    {"instructions", st.instructions},
                    {"z", st.z.data},
                    {"z_digest", z_digest(st.z)}};
    };
    return ok({{"session_id", s.id},
               {"recipe_id", s.recipe_id},
               {"critique_config", json::parse(s.config.to_json())},
               {"base", state(s.base)},
               {"current", state(s.current)},
               {"history", history},
               {"state_digest", state_digest(s.current.z, s.current.ingredients, s.current.instructions)},
               {"created", s.created},
               {"updated", s.updated}});
}

Matrix Service::replay(const std::string& session_id) {
    auto s = find_session(session_id);
    Session fresh;
    std::vector<Entry> history;
    {
        std::lock_guard lock(s->mu);
        fresh.id = s->id;
        fresh.recipe_id = s->recipe_id;
        fresh.config = s->config;
        fresh.base = s->base;
        history = s->history;
    }
    Recipe recipe;
    {
        std::shared_lock lock(mu_);
        recipe = recipes_.at(fresh.recipe_id);
    }
    fresh.base = base_state(recipe, {});
    fresh.current = fresh.base;
    for (const auto& e : history) {
        Entry replayed;
        replayed.critique = e.critique;
        replayed.from_base = e.from_base;
        replayed.before = fresh.current;
        apply(fresh, e.critique, e.from_base, replayed.noop);
        fresh.history.push_back(std::move(replayed));
    }
    return fresh.current.z;
}

void Service::append_event(const std::string& file, const std::string& line) {
    if (options_.persist_dir.empty()) return;
    std::lock_guard lock(persist_mu_);
    std::ofstream out(std::filesystem::path(options_.persist_dir) / file, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + file);
    out << line << '\n';
}

void Service::restore() {
    if (options_.persist_dir.empty()) return;
    const auto dir = std::filesystem::path(options_.persist_dir);
    std::ifstream recipes(dir / "recipes.jsonl");
    std::string line;
    while (std::getline(recipes, line))
        if (!line.empty()) add_recipe(line, false);
    std::ifstream events(dir / "events.jsonl");
    while (std::getline(events, line)) {
        if (line.empty()) continue;
        const json e = json::parse(line);
        const std::string type = e.at("type").get<std::string>();
        const std::string id = e.at("session_id").get<std::string>();
        if (type == "session") {
            json body{{"recipe_id", e.at("recipe_id")}, {"critique_config", e.at("critique_config")}};
            create_session(body.dump(), false, id);
        } else if (type == "critique") {
            json body{{"ingredient", e.at("ingredient")}, {"direction", e.at("direction")}};
            critique(*find_session(id), body.dump(), e.value("from_base", false), false);
        } else if (type == "undo") {
            undo(*find_session(id), false);
        }
    }
}

void Service::mount(httplib::Server& server) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> query;
        for (const auto& [k, v] : req.params) query[k] = v;
        const HttpResponse r = handle(req.method, req.path, req.body, query, req.get_header_value("Content-Type"));
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    server.Get(".*", handler);
    server.Post(".*", handler);
}

}  // namespace recipecrit
