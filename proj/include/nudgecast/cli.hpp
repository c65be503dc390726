#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nudgecast/corpus.hpp"
#include "nudgecast/mock_backend.hpp"
#include "nudgecast/promptgen.hpp"
#include "nudgecast/service.hpp"

namespace nudgecast {

/// Default config file looked up in the working directory.
inline constexpr std::string_view kDefaultConfigFile = "nudgecast.json";
/// Environment overrides applied on top of the config file.
inline constexpr const char* kStateDirEnv = "NUDGECAST_STATE_DIR";
inline constexpr const char* kBackendEnv = "NUDGECAST_BACKEND";

struct CliConfig {
    std::optional<std::filesystem::path> corpus;
    std::filesystem::path state_dir = ".nudgecast";
    std::string backend = "mock";  ///< "mock" or "remote"
    MockMode mock_mode = MockMode::nearest_neighbor;
    std::optional<std::string> api_base;  ///< key only ever comes from the environment
    PromptVariant variant = PromptVariant::P4;
    std::uint64_t split_seed = 0;
    SplitCounts split_counts{144, 23, 41};
    std::size_t n_runs = 10;
    double temperature = 1.0;
    std::string base_model = "gpt-3.5-turbo";
    std::size_t parallelism = 4;
    std::int64_t poll_interval_ms = 5000;
    /// Remote request rate limit; <= 0 disables it.
    double requests_per_second = 5.0;
    ServiceConfig service;

    /// Keys: corpus, state_dir, backend, mock_mode, api_base, variant,
    /// split_seed, split_counts, n_runs, temperature, base_model,
    /// parallelism, poll_interval_ms, requests_per_second, service{...}. Relative paths resolve
    /// against `base_dir`.
    static CliConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

/// Config file (explicit path, else ./nudgecast.json when present), then
/// NUDGECAST_STATE_DIR / NUDGECAST_BACKEND / NUDGECAST_API_BASE /
/// NUDGECAST_PORT. Command-line flags are applied by the caller last.
CliConfig load_cli_config(const std::optional<std::filesystem::path>& explicit_path);

/// Entry point of the `nudgecast` binary. `args` excludes the program
/// name. Exit codes: 0 success, 1 user error, 2 backend or system error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nudgecast
