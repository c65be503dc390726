#include "nudgecast/transcript.hpp"

#include <fmt/format.h>

#include <fstream>

#include "nudgecast/digest.hpp"

namespace nudgecast {

TranscriptStore::TranscriptStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
}

std::string TranscriptStore::key(const ModelRef& model, const ChatPrompt& prompt,
                                 const CompletionOptions& options) {
    return sha256_hex(fmt::format("{}|{}|{:.17g}|{}", model.model_id, prompt.digest(),
                                  options.temperature, options.seed));
}

std::optional<std::string> TranscriptStore::get(const std::string& key) const {
    auto path = dir_ / (key + ".json");
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    try {
        return nlohmann::json::parse(read_file(path)).at("completion").get<std::string>();
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

void TranscriptStore::put(const std::string& key, const ModelRef& model, const ChatPrompt& prompt,
                          const CompletionOptions& options, const std::string& completion) {
    nlohmann::json j = {{"model", model.to_json()},
                        {"prompt_digest", prompt.digest()},
                        {"prompt", prompt.to_json()},
                        {"temperature", options.temperature},
                        {"seed", options.seed},
                        {"prompt_id", options.prompt_id},
                        {"completion", completion}};
    write_file_atomic(dir_ / (key + ".json"), j.dump(2));
}

void TranscriptStore::record_job(const FineTuneJob& job) {
    std::lock_guard lock(jobs_mu_);
    std::ofstream out(dir_ / "jobs.jsonl", std::ios::app);
    out << job.to_json().dump() << '\n';
}

RecordingBackend::RecordingBackend(Backend& inner, std::shared_ptr<TranscriptStore> store)
    : inner_(inner), store_(std::move(store)) {}

FineTuneJob RecordingBackend::create_finetune(const TrainingFile& training,
                                              const TrainingFile* validation,
                                              std::string_view base_model) {
    auto job = inner_.create_finetune(training, validation, base_model);
    store_->record_job(job);
    return job;
}

FineTuneJob RecordingBackend::poll_job(const FineTuneJob& job) {
    auto updated = inner_.poll_job(job);
    if (updated.status != job.status) store_->record_job(updated);
    return updated;
}

std::string RecordingBackend::complete(const ModelRef& model, const ChatPrompt& prompt,
                                       const CompletionOptions& options) {
    auto key = TranscriptStore::key(model, prompt, options);
    if (auto cached = store_->get(key)) {
        ++hits_;
        return *cached;
    }
    auto text = inner_.complete(model, prompt, options);
    store_->put(key, model, prompt, options, text);
    return text;
}

}  // namespace nudgecast
