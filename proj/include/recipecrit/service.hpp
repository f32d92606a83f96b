#pragma once

// JSON-over-HTTP service: recipe registry, model inference and interactive
// critiquing sessions.
//
// Sessions chain critiques: each one starts from the session's current latent
// vector, so feedback accumulates. `?from=base` restarts from the base recipe
// instead. Removal masking of the recipe text is only possible when starting
// from the base recipe (first critique or from=base); later removals act on the
// latent vector alone.

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "recipecrit/checkpoint.hpp"
#include "recipecrit/critique.hpp"

namespace httplib {
class Server;
}

namespace recipecrit {

struct ServiceOptions {
    // Append-only recipes.jsonl and events.jsonl are kept here when set; both are
    // replayed once a model is installed.
    std::string persist_dir;
    CritiqueConfig default_critique;
};

struct HttpResponse {
    int status = 200;
    std::string body;
};

class Service {
public:
    explicit Service(ServiceOptions options = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Until a model is installed /health reports "loading" and model routes return 503.
    void set_model(LoadedModel model);
    [[nodiscard]] bool ready() const;

    HttpResponse handle(const std::string& method, const std::string& path, const std::string& body,
                        const std::map<std::string, std::string>& query = {},
                        const std::string& content_type = "application/json");
    // Routes every request on the server through handle().
    void mount(httplib::Server& server);

    // Recomputes a session's latent vector from its base recipe and history.
    Matrix replay(const std::string& session_id);

private:
    struct State {
        Matrix z;
        std::vector<int> ingredients;
        std::vector<std::string> instructions;
    };
    struct Entry {
        Critique critique;
        bool from_base = false;
        bool noop = false;
        std::string trace_json;
        State before;  // restored by undo
    };
    struct Session {
        std::mutex mu;
        std::string id;
        std::string recipe_id;
        CritiqueConfig config;
        State base, current;
        std::vector<Entry> history;
        std::int64_t created = 0, updated = 0;
    };

    HttpResponse route(const std::string& method, const std::vector<std::string>& parts, const std::string& body,
                       const std::map<std::string, std::string>& query);
    HttpResponse health() const;
    HttpResponse vocab() const;
    HttpResponse add_recipe(const std::string& body, bool persist);
    HttpResponse create_session(const std::string& body, bool persist, const std::string& forced_id = "");
    HttpResponse critique(Session& s, const std::string& body, bool from_base, bool persist);
    HttpResponse undo(Session& s, bool persist);
    HttpResponse session_json(Session& s) const;

    State base_state(const Recipe& r, std::span<const Critique> critiques) const;
    // Applies one critique to a session without touching persistence.
    std::string apply(Session& s, const Critique& c, bool from_base, bool& noop);
    std::shared_ptr<Session> find_session(const std::string& id);
    void append_event(const std::string& file, const std::string& line);
    void restore();

    ServiceOptions options_;
    std::unique_ptr<LoadedModel> model_;
    std::string model_digest_;
    mutable std::shared_mutex mu_;  // guards the registries and model installation
    std::map<std::string, Recipe> recipes_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_session_ = 1;
    std::uint64_t next_recipe_ = 1;
    std::mutex persist_mu_;
};

}  // namespace recipecrit
