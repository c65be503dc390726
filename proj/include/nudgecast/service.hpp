#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "nudgecast/backend.hpp"
#include "nudgecast/corpus.hpp"
#include "nudgecast/evalkit.hpp"
#include "nudgecast/promptgen.hpp"

namespace nudgecast {

/// Environment variable overriding the configured service port.
inline constexpr const char* kPortEnv = "NUDGECAST_PORT";

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    /// Campaign state directory browsed by /api/reports.
    std::filesystem::path state_dir = ".nudgecast";
    /// Built explorer assets served at "/", when present.
    std::optional<std::filesystem::path> static_dir;
    /// Models offered to clients; the first is the default.
    std::vector<ModelRef> models;
    PromptVariant variant = PromptVariant::P4;
    std::size_t parallelism = 4;

    /// Reads {"host", "port", "state_dir", "static_dir", "models", "variant"}.
    static ServiceConfig from_json(const nlohmann::json& j);
};

/// Applies NUDGECAST_PORT when set. Throws ValidationError on a bad value.
void apply_env_overrides(ServiceConfig& config);

/// A hypothetical experiment to predict.
struct ScenarioRequest {
    StudyRecord study;
    std::optional<std::string> model;
    std::size_t n_runs = 10;
    double temperature = 1.0;
};

/// Field name -> message for every invalid field.
using FieldErrors = std::map<std::string, std::string>;

/// Parses and validates a request body. On failure returns nullopt and
/// fills `errors`; field names match the JSON keys.
std::optional<ScenarioRequest> parse_scenario_request(const nlohmann::json& body,
                                                      FieldErrors& errors);

struct RangeStats {
    std::size_t n = 0;
    double mean = 0, min = 0, max = 0;
};

struct ScenarioAggregate {
    std::optional<Direction> direction;  ///< majority; ties resolve to negative
    double vote_share = 0;               ///< majority votes / runs with a direction
    std::size_t n_direction = 0;
    std::optional<RangeStats> r;
    std::optional<RangeStats> d;

    nlohmann::json to_json() const;
};

/// Recomputable from per-run records alone.
ScenarioAggregate aggregate_predictions(std::span<const PredictionRecord> runs);

struct ScenarioResponse {
    ModelRef model;
    std::string prompt_digest;
    std::string variant;
    std::string mask;
    double temperature = 0;
    std::vector<PredictionRecord> runs;
    ScenarioAggregate aggregate;

    nlohmann::json to_json() const;
};

/// Summary and lookup of persisted reports under a state directory:
/// <state>/reports/<id>.json and every report of every campaign.
struct ReportEntry {
    std::string id;
    std::filesystem::path path;
};
std::vector<ReportEntry> list_reports(const std::filesystem::path& state_dir);

struct HttpReply {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

/// JSON API over a backend. Handlers are plain functions so they can be
/// driven without a socket; serve() binds them to HTTP routes.
class Service {
public:
    Service(Backend& backend, ServiceConfig config);
    ~Service();

    HttpReply predict(const std::string& body);
    HttpReply models() const;
    HttpReply reports() const;
    HttpReply report(const std::string& id) const;

    /// Blocks serving HTTP until stop(). Returns false if binding failed.
    bool serve();
    /// Binds to config.port (0 picks a free port) and serves on a
    /// background thread. Returns the bound port.
    int start();
    void stop();

    const ServiceConfig& config() const { return config_; }
    std::size_t cache_size() const;

private:
    struct Server;
    std::optional<ModelRef> resolve_model(const std::optional<std::string>& id) const;

    Backend& backend_;
    ServiceConfig config_;
    mutable std::shared_mutex cache_mu_;
    std::unordered_map<std::string, std::string> cache_;
    std::unique_ptr<Server> server_;
};

}  // namespace nudgecast
