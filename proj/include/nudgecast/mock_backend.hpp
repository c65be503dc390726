#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nudgecast/backend.hpp"
#include "nudgecast/corpus.hpp"
#include "nudgecast/promptgen.hpp"

namespace nudgecast {

enum class MockMode { replay, nearest_neighbor };
std::string_view to_string(MockMode m);
std::optional<MockMode> parse_mock_mode(std::string_view s);

/// Weights of the nearest-neighbor similarity
///   score = 1.0*[same category] + 0.5*[same location]
///           - 0.25*|year difference|/10 - 0.25*|ln(size_query/size_candidate)|
/// Terms whose feature is missing on either side contribute 0.
struct SimilarityWeights {
    double category = 1.0;
    double location = 0.5;
    double year_per_decade = 0.25;
    double log_size = 0.25;
};

double similarity(const PromptFeatures& query, const PromptFeatures& candidate,
                  const SimilarityWeights& w = {});

/// One remembered training example of a mock model.
struct MockExample {
    std::string study_id;
    std::string user_text;
    std::string completion;
};

struct MockModel {
    std::string model_id;
    MockMode mode = MockMode::replay;
    std::vector<MockExample> examples;

    nlohmann::json to_json() const;
    static MockModel from_json(const nlohmann::json& j);
};

inline constexpr std::string_view kMockRefusal =
    "I cannot make a prediction for this experiment.";

struct MockOptions {
    /// Mode given to models created through create_finetune.
    MockMode finetune_mode = MockMode::nearest_neighbor;
    /// Ground truth used by replay models for prompts they were not trained
    /// on. Rendered under every built-in variant and named mask, with
    /// round-trip numbers so oracle answers carry the exact labels.
    std::optional<Corpus> oracle;
    /// Persist models and jobs here so other processes can use them.
    std::optional<std::filesystem::path> store_dir;
    /// Polls a job needs before it reaches succeeded (queued -> running -> done).
    int polls_to_finish = 2;
    SimilarityWeights weights;
    /// Test hook: a non-empty message makes the job for this file fail.
    std::function<std::optional<std::string>(const TrainingFile&)> reject;
};

/// Offline provider. Replay models answer seen prompts with their own
/// completion; nearest-neighbor models answer with the completion of the
/// most similar training study (ties: lowest study_id). At temperature 0
/// nearest-neighbor is an argmax; above 0 it samples candidates with
/// probability proportional to exp(score / temperature), seeded by
/// (model, prompt, seed). Replay answers ignore temperature.
class MockBackend final : public Backend {
public:
    explicit MockBackend(MockOptions options = {});

    Provider provider() const override { return Provider::mock; }
    FineTuneJob create_finetune(const TrainingFile& training, const TrainingFile* validation,
                                std::string_view base_model) override;
    FineTuneJob poll_job(const FineTuneJob& job) override;
    std::string complete(const ModelRef& model, const ChatPrompt& prompt,
                         const CompletionOptions& options) override;
    bool knows_model(std::string_view model_id) const override;

    /// Registers a model directly from records. Model id encodes the
    /// training-set digest. Throws ValidationError on empty input.
    ModelRef build_mock_model(std::span<const TrainingRecord> records, MockMode mode);

    /// Replay model over the oracle corpus alone (requires options.oracle).
    ModelRef oracle_model();

    /// Number of fine-tune jobs actually created (duplicates excluded).
    std::size_t jobs_created() const { return jobs_created_.load(); }

    std::vector<ModelRef> models() const;

private:
    std::shared_ptr<const MockModel> find_model(std::string_view id) const;
    void persist_job(const FineTuneJob& job) const;
    std::string answer(const MockModel& model, const ChatPrompt& prompt,
                       const CompletionOptions& options) const;
    const std::unordered_map<std::string, std::string>& oracle_table() const;

    MockOptions options_;
    mutable std::mutex mu_;
    mutable std::map<std::string, std::shared_ptr<const MockModel>, std::less<>> models_;
    std::map<std::string, FineTuneJob> jobs_;
    std::map<std::string, std::string> jobs_by_key_;
    std::map<std::string, int> polls_;
    std::map<std::string, std::shared_ptr<const MockModel>> pending_;
    std::map<std::string, std::string> rejections_;
    std::atomic<std::size_t> jobs_created_{0};
    mutable std::once_flag oracle_once_;
    mutable std::unordered_map<std::string, std::string> oracle_table_;
};

}  // namespace nudgecast
