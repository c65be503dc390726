#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "nudgecast/backend.hpp"

namespace nudgecast {

/// On-disk record of provider completions, one JSON file per key. Writes
/// are atomic renames, so concurrent writers of one key resolve
/// last-write-wins and readers never see partial files.
class TranscriptStore {
public:
    explicit TranscriptStore(std::filesystem::path dir);

    /// Key over (model, prompt digest, temperature, seed).
    static std::string key(const ModelRef& model, const ChatPrompt& prompt,
                           const CompletionOptions& options);

    std::optional<std::string> get(const std::string& key) const;
    void put(const std::string& key, const ModelRef& model, const ChatPrompt& prompt,
             const CompletionOptions& options, const std::string& completion);
    /// Appends a job snapshot to jobs.jsonl.
    void record_job(const FineTuneJob& job);

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    std::mutex jobs_mu_;
};

/// Decorator that answers completions from the transcript when present and
/// records every fresh provider answer.
class RecordingBackend final : public Backend {
public:
    RecordingBackend(Backend& inner, std::shared_ptr<TranscriptStore> store);

    Provider provider() const override { return inner_.provider(); }
    FineTuneJob create_finetune(const TrainingFile& training, const TrainingFile* validation,
                                std::string_view base_model) override;
    FineTuneJob poll_job(const FineTuneJob& job) override;
    std::string complete(const ModelRef& model, const ChatPrompt& prompt,
                         const CompletionOptions& options) override;
    bool knows_model(std::string_view model_id) const override {
        return inner_.knows_model(model_id);
    }

    std::size_t cache_hits() const { return hits_.load(); }

private:
    Backend& inner_;
    std::shared_ptr<TranscriptStore> store_;
    std::atomic<std::size_t> hits_{0};
};

}  // namespace nudgecast
