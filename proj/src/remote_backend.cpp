#include "nudgecast/remote_backend.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>

#include "nudgecast/digest.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace {

std::int64_t now_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

bool retryable(int status) { return status == 408 || status == 429 || status >= 500; }

std::string provider_message(const std::string& body) {
    try {
        auto j = nlohmann::json::parse(body);
        if (j.contains("error")) {
            const auto& e = j["error"];
            if (e.is_object() && e.contains("message")) return e["message"].get<std::string>();
            if (e.is_string()) return e.get<std::string>();
        }
    } catch (const nlohmann::json::exception&) {
    }
    return body.substr(0, 300);
}

}  // namespace

RemoteConfig remote_config_from_env() {
    RemoteConfig c;
    if (const char* base = std::getenv(kApiBaseEnv); base && *base) c.base_url = base;
    if (const char* key = std::getenv(kApiKeyEnv); key && *key) c.api_key = key;
    return c;
}

RemoteBackend::RemoteBackend(RemoteConfig config)
    : config_(std::move(config)), bucket_(config_.requests_per_second, config_.burst) {
    auto url = config_.base_url;
    while (!url.empty() && url.back() == '/') url.pop_back();
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ValidationError("API base URL needs a scheme: " + url);
    }
    auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
    load_ledger();
}

RemoteBackend::~RemoteBackend() = default;

void RemoteBackend::load_ledger() {
    if (!config_.ledger_path || !std::filesystem::exists(*config_.ledger_path)) return;
    auto j = nlohmann::json::parse(read_file(*config_.ledger_path));
    for (const auto& [key, job] : j.items()) ledger_[key] = FineTuneJob::from_json(job);
}

void RemoteBackend::save_ledger() const {
    if (!config_.ledger_path) return;
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, job] : ledger_) j[key] = job.to_json();
    write_file_atomic(*config_.ledger_path, j.dump(2));
}

RemoteBackend::Response RemoteBackend::send(const std::string& method, const std::string& path,
                                            const std::string& body,
                                            const std::string& content_type,
                                            const std::string& idempotency) {
    bucket_.acquire();
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(std::chrono::seconds(10));
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
    }
    if (!idempotency.empty()) headers.emplace("Idempotency-Key", idempotency);

    const auto full = path_prefix_ + path;
    httplib::Result res = method == "GET"
                              ? client.Get(full, headers)
                              : client.Post(full, headers, body, content_type);
    if (!res) {
        throw TransientError(fmt::format("{} {}: {}", method, full, httplib::to_string(res.error())));
    }
    return {res->status, res->body};
}

nlohmann::json RemoteBackend::call_json(const std::string& what, const std::string& method,
                                        const std::string& path, const nlohmann::json& body,
                                        const std::string& idempotency) {
    return with_retry(config_.retry, what, [&] {
        auto res = send(method, path, method == "GET" ? std::string() : body.dump(),
                        "application/json", idempotency);
        if (retryable(res.status)) {
            throw TransientError(fmt::format("HTTP {}: {}", res.status, provider_message(res.body)),
                                 res.status);
        }
        if (res.status == 404) {
            throw NotFoundError(fmt::format("{}: {}", what, provider_message(res.body)));
        }
        if (res.status < 200 || res.status >= 300) {
            throw BackendError(fmt::format("{} rejected by provider (HTTP {}): {}", what,
                                           res.status, provider_message(res.body)),
                               res.status);
        }
        try {
            return nlohmann::json::parse(res.body);
        } catch (const nlohmann::json::exception& e) {
            throw BackendError(fmt::format("{}: malformed provider response: {}", what, e.what()));
        }
    });
}

std::string RemoteBackend::upload(const TrainingFile& file) {
    auto contents = read_file(file.path);
    return with_retry(config_.retry, "upload " + file.path.filename().string(), [&] {
        bucket_.acquire();
        httplib::Client client(scheme_host_port_);
        client.set_read_timeout(config_.timeout);
        client.set_write_timeout(config_.timeout);
        httplib::Headers headers;
        if (!config_.api_key.empty()) {
            headers.emplace("Authorization", "Bearer " + config_.api_key);
        }
        httplib::MultipartFormDataItems items = {
            {"purpose", "fine-tune", "", ""},
            {"file", contents, file.path.filename().string(), "application/jsonl"},
        };
        auto res = client.Post(path_prefix_ + "/files", headers, items);
        if (!res) throw TransientError("upload: " + httplib::to_string(res.error()));
        if (retryable(res->status)) {
            throw TransientError(
                fmt::format("HTTP {}: {}", res->status, provider_message(res->body)), res->status);
        }
        if (res->status < 200 || res->status >= 300) {
            throw BackendError(fmt::format("file upload rejected by provider (HTTP {}): {}",
                                           res->status, provider_message(res->body)),
                               res->status);
        }
        return nlohmann::json::parse(res->body).at("id").get<std::string>();
    });
}

FineTuneJob RemoteBackend::job_from_provider(const nlohmann::json& j, FineTuneJob base) const {
    base.job_id = j.at("id").get<std::string>();
    auto status = j.value("status", std::string("queued"));
    JobStatus mapped = JobStatus::queued;
    if (status == "running") mapped = JobStatus::running;
    else if (status == "succeeded") mapped = JobStatus::succeeded;
    else if (status == "failed" || status == "cancelled") mapped = JobStatus::failed;
    if (is_forward_transition(base.status, mapped)) {
        base.status = mapped;
    } else {
        spdlog::warn("job {}: ignoring backwards status {} -> {}", base.job_id,
                     to_string(base.status), status);
    }
    if (j.contains("created_at") && j["created_at"].is_number()) {
        base.created_at = j["created_at"].get<std::int64_t>();
    }
    if (j.contains("finished_at") && j["finished_at"].is_number()) {
        base.finished_at = j["finished_at"].get<std::int64_t>();
    }
    if (base.status == JobStatus::succeeded) {
        if (!j.contains("fine_tuned_model") || !j["fine_tuned_model"].is_string()) {
            throw BackendError("job " + base.job_id + " succeeded without a fine_tuned_model");
        }
        base.model = ModelRef{Provider::remote, j["fine_tuned_model"].get<std::string>(),
                              j.value("model", std::string())};
        if (!base.finished_at) base.finished_at = now_seconds();
    }
    if (base.status == JobStatus::failed && j.contains("error") && !j["error"].is_null()) {
        base.error = j["error"].is_object() ? j["error"].value("message", j["error"].dump())
                                            : j["error"].dump();
    }
    return base;
}

FineTuneJob RemoteBackend::create_finetune(const TrainingFile& training,
                                           const TrainingFile* validation,
                                           std::string_view base_model) {
    if (training.record_count < config_.min_training_records) {
        throw ValidationError(fmt::format("provider minimum is {} training records, got {}",
                                          config_.min_training_records, training.record_count));
    }
    auto key = idempotency_key(training.digest, validation ? validation->digest : "", base_model);
    {
        std::lock_guard lock(ledger_mu_);
        if (auto it = ledger_.find(key); it != ledger_.end()) {
            if (it->second.status != JobStatus::failed) {
                spdlog::warn("fine-tune for these files already submitted as {}; not resubmitting",
                             it->second.job_id);
                return it->second;
            }
            // a failed attempt may be retried; give the provider a fresh key
            key += fmt::format("-retry{}", now_seconds());
        }
    }

    auto training_id = upload(training);
    std::string validation_id;
    if (validation) validation_id = upload(*validation);

    nlohmann::json body = {{"training_file", training_id}, {"model", base_model}};
    if (!validation_id.empty()) body["validation_file"] = validation_id;
    auto resp = call_json("create fine-tune", "POST", "/fine_tuning/jobs", body, key);

    FineTuneJob job;
    job.training_file_digest = training.digest;
    job.validation_file_digest = validation ? validation->digest : "";
    job.idempotency_key = key;
    job.created_at = now_seconds();
    job = job_from_provider(resp, job);

    std::lock_guard lock(ledger_mu_);
    ledger_[idempotency_key(training.digest, validation ? validation->digest : "", base_model)] =
        job;
    save_ledger();
    return job;
}

FineTuneJob RemoteBackend::poll_job(const FineTuneJob& job) {
    if (is_terminal(job.status)) return job;
    auto resp = call_json("poll job " + job.job_id, "GET", "/fine_tuning/jobs/" + job.job_id, {});
    auto updated = job_from_provider(resp, job);
    std::lock_guard lock(ledger_mu_);
    for (auto& [key, entry] : ledger_) {
        if (entry.job_id == updated.job_id) {
            entry = updated;
            save_ledger();
            break;
        }
    }
    return updated;
}

std::string RemoteBackend::complete(const ModelRef& model, const ChatPrompt& prompt,
                                    const CompletionOptions& options) {
    if (!prompt.is_query()) {
        throw ValidationError("completion requests take a query prompt (system + user)");
    }
    nlohmann::json body = {{"model", model.model_id},
                           {"messages", prompt.to_json()["messages"]},
                           {"temperature", options.temperature},
                           {"seed", options.seed}};
    try {
        auto resp = call_json("chat completion", "POST", "/chat/completions", body);
        return resp.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const NotFoundError&) {
        throw;
    } catch (const BackendError& e) {
        throw BackendError(fmt::format("prompt {}: {}", options.prompt_id, e.what()), e.status());
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(fmt::format("prompt {}: malformed completion response: {}",
                                       options.prompt_id, e.what()));
    }
}

}  // namespace nudgecast
