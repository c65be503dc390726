#include "nudgecast/backend.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <thread>

#include "nudgecast/digest.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

std::string_view to_string(Provider p) { return p == Provider::remote ? "remote" : "mock"; }

nlohmann::json ModelRef::to_json() const {
    return {{"provider", to_string(provider)}, {"model_id", model_id}, {"base_model", base_model}};
}

ModelRef ModelRef::from_json(const nlohmann::json& j) {
    ModelRef m;
    m.provider = j.at("provider").get<std::string>() == "remote" ? Provider::remote
                                                                   : Provider::mock;
    m.model_id = j.at("model_id").get<std::string>();
    m.base_model = j.value("base_model", "");
    return m;
}

std::string_view to_string(JobStatus s) {
    switch (s) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::succeeded: return "succeeded";
        case JobStatus::failed: return "failed";
    }
    return "queued";
}

std::optional<JobStatus> parse_job_status(std::string_view s) {
    if (s == "queued") return JobStatus::queued;
    if (s == "running") return JobStatus::running;
    if (s == "succeeded") return JobStatus::succeeded;
    if (s == "failed") return JobStatus::failed;
    return std::nullopt;
}

bool is_terminal(JobStatus s) { return s == JobStatus::succeeded || s == JobStatus::failed; }

bool is_forward_transition(JobStatus from, JobStatus to) {
    if (from == to) return true;
    switch (from) {
        case JobStatus::queued: return true;
        case JobStatus::running: return is_terminal(to);
        default: return false;
    }
}

nlohmann::json FineTuneJob::to_json() const {
    nlohmann::json j = {{"job_id", job_id},
                        {"status", to_string(status)},
                        {"training_file_digest", training_file_digest},
                        {"validation_file_digest", validation_file_digest},
                        {"idempotency_key", idempotency_key},
                        {"created_at", created_at},
                        {"error", error}};
    j["finished_at"] = finished_at ? nlohmann::json(*finished_at) : nlohmann::json(nullptr);
    j["model"] = model ? model->to_json() : nlohmann::json(nullptr);
    return j;
}

FineTuneJob FineTuneJob::from_json(const nlohmann::json& j) {
    FineTuneJob job;
    job.job_id = j.at("job_id").get<std::string>();
    auto st = parse_job_status(j.at("status").get<std::string>());
    if (!st) throw ValidationError("unknown job status in " + j.dump());
    job.status = *st;
    job.training_file_digest = j.value("training_file_digest", "");
    job.validation_file_digest = j.value("validation_file_digest", "");
    job.idempotency_key = j.value("idempotency_key", "");
    job.created_at = j.value("created_at", std::int64_t{0});
    if (j.contains("finished_at") && !j["finished_at"].is_null()) {
        job.finished_at = j["finished_at"].get<std::int64_t>();
    }
    if (j.contains("model") && !j["model"].is_null()) job.model = ModelRef::from_json(j["model"]);
    job.error = j.value("error", "");
    return job;
}

std::string idempotency_key(std::string_view training_digest, std::string_view validation_digest,
                            std::string_view base_model) {
    std::string material;
    material.append(training_digest).append("|").append(validation_digest).append("|").append(
        base_model);
    return sha256_hex(material).substr(0, 32);
}

FineTuneJob wait_for_job(Backend& backend, FineTuneJob job, const WaitOptions& options) {
    const auto deadline = std::chrono::steady_clock::now() + options.timeout;
    while (!is_terminal(job.status)) {
        if (std::chrono::steady_clock::now() > deadline) {
            throw BackendError("timed out waiting for fine-tune job " + job.job_id);
        }
        job = backend.poll_job(job);
        if (!is_terminal(job.status)) detail::sleep_for(options.poll_interval);
    }
    return job;
}

std::chrono::milliseconds RetryPolicy::backoff(int attempt) const {
    double ms = static_cast<double>(initial_backoff.count()) *
                std::pow(multiplier, std::max(0, attempt - 1));
    ms = std::min(ms, static_cast<double>(max_backoff.count()));
    return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
}

TokenBucket::TokenBucket(double rate, double burst)
    : rate_(rate), burst_(std::max(1.0, burst)), tokens_(std::max(1.0, burst)),
      last_(Clock::now()) {}

void TokenBucket::acquire() {
    if (rate_ <= 0) return;
    std::unique_lock lock(mu_);
    while (true) {
        auto now = Clock::now();
        tokens_ = std::min(burst_,
                           tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
        last_ = now;
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        auto wait = std::chrono::duration<double>((1.0 - tokens_) / rate_);
        lock.unlock();
        std::this_thread::sleep_for(wait);
        lock.lock();
    }
}

namespace detail {

void log_retry(std::string_view what, int attempt, const std::exception& e,
               std::chrono::milliseconds delay) {
    spdlog::warn("{}: attempt {} failed ({}); retrying in {} ms", what, attempt, e.what(),
                 delay.count());
}

void sleep_for(std::chrono::milliseconds d) {
    if (d.count() > 0) std::this_thread::sleep_for(d);
}

}  // namespace detail

}  // namespace nudgecast
