#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "nudgecast/errors.hpp"
#include "nudgecast/promptgen.hpp"

namespace nudgecast {

enum class Provider { remote, mock };
std::string_view to_string(Provider p);

/// A model that can answer completions.
struct ModelRef {
    Provider provider = Provider::mock;
    std::string model_id;
    std::string base_model;

    nlohmann::json to_json() const;
    static ModelRef from_json(const nlohmann::json& j);
    bool operator==(const ModelRef&) const = default;
};

enum class JobStatus { queued, running, succeeded, failed };
std::string_view to_string(JobStatus s);
std::optional<JobStatus> parse_job_status(std::string_view s);
bool is_terminal(JobStatus s);
/// queued -> running -> {succeeded, failed}; staying put is allowed.
bool is_forward_transition(JobStatus from, JobStatus to);

/// Provider-managed fine-tune. No hyperparameters: the provider picks them.
struct FineTuneJob {
    std::string job_id;
    JobStatus status = JobStatus::queued;
    std::string training_file_digest;
    std::string validation_file_digest;
    std::string idempotency_key;
    std::int64_t created_at = 0;  ///< unix seconds
    std::optional<std::int64_t> finished_at;
    std::optional<ModelRef> model;  ///< set once succeeded
    std::string error;              ///< provider message when failed

    nlohmann::json to_json() const;
    static FineTuneJob from_json(const nlohmann::json& j);
};

/// Key guarding against paying twice for the same fine-tune.
std::string idempotency_key(std::string_view training_digest, std::string_view validation_digest,
                            std::string_view base_model);

struct CompletionOptions {
    double temperature = 1.0;
    /// Sampling seed; reruns of one evaluation use distinct seeds.
    std::uint64_t seed = 0;
    /// Caller's identifier for the prompt, echoed in errors for resumption.
    std::string prompt_id;
};

/// Model provider. Implementations must allow concurrent complete() calls.
class Backend {
public:
    virtual ~Backend() = default;

    virtual Provider provider() const = 0;

    /// Submits a fine-tune. Resubmitting identical files returns the
    /// existing job instead of creating a second one.
    virtual FineTuneJob create_finetune(const TrainingFile& training,
                                        const TrainingFile* validation,
                                        std::string_view base_model) = 0;

    /// Refreshes a job. Terminal jobs are returned as-is without I/O.
    virtual FineTuneJob poll_job(const FineTuneJob& job) = 0;

    /// Raw completion text for a query prompt.
    virtual std::string complete(const ModelRef& model, const ChatPrompt& prompt,
                                 const CompletionOptions& options) = 0;

    /// Whether `model_id` can be served. Remote backends cannot know
    /// cheaply and return true.
    virtual bool knows_model(std::string_view model_id) const = 0;
};

struct WaitOptions {
    std::chrono::milliseconds poll_interval{1000};
    std::chrono::milliseconds timeout{std::chrono::hours(6)};
};

/// Polls until the job is terminal. Throws BackendError on timeout.
FineTuneJob wait_for_job(Backend& backend, FineTuneJob job, const WaitOptions& options = {});

// ---------------------------------------------------------------------------
// Retry and rate limiting

struct RetryPolicy {
    int max_attempts = 5;
    std::chrono::milliseconds initial_backoff{500};
    double multiplier = 2.0;
    std::chrono::milliseconds max_backoff{30000};

    /// Delay before attempt `attempt` (1-based retries): initial * multiplier^(attempt-1),
    /// capped at max_backoff.
    std::chrono::milliseconds backoff(int attempt) const;
};

/// Thrown by a retried operation to signal a transient failure.
class TransientError : public BackendError {
public:
    using BackendError::BackendError;
};

/// Runs `op`, retrying on TransientError with exponential backoff. The last
/// TransientError is rethrown as BackendError once attempts run out.
template <typename Fn>
auto with_retry(const RetryPolicy& policy, std::string_view what, Fn&& op) -> decltype(op());

/// Token bucket: `rate` tokens per second, at most `burst` stored.
class TokenBucket {
public:
    TokenBucket(double rate, double burst);
    /// Blocks until a token is available. A rate <= 0 disables limiting.
    void acquire();

private:
    using Clock = std::chrono::steady_clock;
    std::mutex mu_;
    double rate_;
    double burst_;
    double tokens_;
    Clock::time_point last_;
};

namespace detail {
void log_retry(std::string_view what, int attempt, const std::exception& e,
               std::chrono::milliseconds delay);
void sleep_for(std::chrono::milliseconds d);
}  // namespace detail

template <typename Fn>
auto with_retry(const RetryPolicy& policy, std::string_view what, Fn&& op) -> decltype(op()) {
    for (int attempt = 1;; ++attempt) {
        try {
            return op();
        } catch (const TransientError& e) {
            if (attempt >= policy.max_attempts) {
                throw BackendError(std::string(what) + ": giving up after " +
                                       std::to_string(attempt) + " attempts: " + e.what(),
                                   e.status());
            }
            auto delay = policy.backoff(attempt);
            detail::log_retry(what, attempt, e, delay);
            detail::sleep_for(delay);
        }
    }
}

}  // namespace nudgecast
