#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "nudgecast/backend.hpp"

namespace nudgecast {

/// Environment variable holding the provider API key.
inline constexpr const char* kApiKeyEnv = "NUDGECAST_API_KEY";
/// Environment variable overriding the provider base URL.
inline constexpr const char* kApiBaseEnv = "NUDGECAST_API_BASE";
inline constexpr std::string_view kDefaultApiBase = "https://api.openai.com/v1";

struct RemoteConfig {
    std::string base_url = std::string(kDefaultApiBase);
    std::string api_key;
    RetryPolicy retry;
    /// Requests per second across all calls; <= 0 disables limiting.
    double requests_per_second = 5.0;
    double burst = 10.0;
    std::chrono::seconds timeout{120};
    /// Provider refuses smaller training files.
    std::size_t min_training_records = 10;
    /// Local record of submitted fine-tunes keyed by idempotency key.
    std::optional<std::filesystem::path> ledger_path;
};

/// base_url and api_key from NUDGECAST_API_BASE / NUDGECAST_API_KEY.
RemoteConfig remote_config_from_env();

/// OpenAI-style JSON-over-HTTP provider:
///   POST {base}/files                  multipart upload, purpose=fine-tune
///   POST {base}/fine_tuning/jobs       {training_file, validation_file?, model}
///   GET  {base}/fine_tuning/jobs/{id}
///   POST {base}/chat/completions       {model, messages, temperature, seed}
/// 429, 408 and 5xx responses and connection failures are retried with
/// exponential backoff. Job creation carries an Idempotency-Key header and
/// is recorded in the ledger so identical files are never submitted twice.
class RemoteBackend final : public Backend {
public:
    explicit RemoteBackend(RemoteConfig config);
    ~RemoteBackend() override;

    Provider provider() const override { return Provider::remote; }
    FineTuneJob create_finetune(const TrainingFile& training, const TrainingFile* validation,
                                std::string_view base_model) override;
    FineTuneJob poll_job(const FineTuneJob& job) override;
    std::string complete(const ModelRef& model, const ChatPrompt& prompt,
                         const CompletionOptions& options) override;
    bool knows_model(std::string_view) const override { return true; }

    const RemoteConfig& config() const { return config_; }

private:
    struct Response {
        int status = 0;
        std::string body;
    };
    Response send(const std::string& method, const std::string& path, const std::string& body,
                  const std::string& content_type, const std::string& idempotency = {});
    nlohmann::json call_json(const std::string& what, const std::string& method,
                             const std::string& path, const nlohmann::json& body,
                             const std::string& idempotency = {});
    std::string upload(const TrainingFile& file);
    FineTuneJob job_from_provider(const nlohmann::json& j, FineTuneJob base) const;
    void load_ledger();
    void save_ledger() const;

    RemoteConfig config_;
    std::string scheme_host_port_;
    std::string path_prefix_;
    TokenBucket bucket_;
    std::mutex ledger_mu_;
    std::map<std::string, FineTuneJob> ledger_;
};

}  // namespace nudgecast
