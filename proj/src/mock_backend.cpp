#include "nudgecast/mock_backend.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "nudgecast/digest.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::int64_t now_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::uint64_t seed_from(std::string_view material) {
    auto hex = sha256_hex(material).substr(0, 16);
    return std::stoull(hex, nullptr, 16);
}

// Parsed features are cached next to the model for nearest-neighbor lookups.
struct PreparedModel : MockModel {
    std::vector<PromptFeatures> features;
    std::unordered_map<std::string, std::size_t> by_text;

    explicit PreparedModel(MockModel m) : MockModel(std::move(m)) {
        features.reserve(examples.size());
        for (std::size_t i = 0; i < examples.size(); ++i) {
            features.push_back(parse_prompt_features(examples[i].user_text));
            by_text.emplace(examples[i].user_text, i);
        }
    }
};

}  // namespace

std::string_view to_string(MockMode m) {
    return m == MockMode::replay ? "replay" : "nn";
}

std::optional<MockMode> parse_mock_mode(std::string_view s) {
    if (s == "replay") return MockMode::replay;
    if (s == "nn" || s == "nearest-neighbor" || s == "nearest_neighbor") {
        return MockMode::nearest_neighbor;
    }
    return std::nullopt;
}

double similarity(const PromptFeatures& q, const PromptFeatures& c, const SimilarityWeights& w) {
    double score = 0;
    if (q.category && c.category && *q.category == *c.category) score += w.category;
    if (q.location && c.location && lower(*q.location) == lower(*c.location)) {
        score += w.location;
    }
    if (q.year && c.year) score -= w.year_per_decade * std::abs(*q.year - *c.year) / 10.0;
    if (q.sample_size && c.sample_size && *q.sample_size > 0 && *c.sample_size > 0) {
        score -= w.log_size * std::fabs(std::log(static_cast<double>(*q.sample_size) /
                                                 static_cast<double>(*c.sample_size)));
    }
    return score;
}

nlohmann::json MockModel::to_json() const {
    auto ex = nlohmann::json::array();
    for (const auto& e : examples) {
        ex.push_back({{"study_id", e.study_id}, {"user", e.user_text}, {"completion", e.completion}});
    }
    return {{"model_id", model_id}, {"mode", to_string(mode)}, {"examples", std::move(ex)}};
}

MockModel MockModel::from_json(const nlohmann::json& j) {
    MockModel m;
    m.model_id = j.at("model_id").get<std::string>();
    auto mode = parse_mock_mode(j.at("mode").get<std::string>());
    if (!mode) throw ValidationError("unknown mock mode in model " + m.model_id);
    m.mode = *mode;
    for (const auto& e : j.at("examples")) {
        m.examples.push_back({e.at("study_id").get<std::string>(), e.at("user").get<std::string>(),
                              e.at("completion").get<std::string>()});
    }
    return m;
}

MockBackend::MockBackend(MockOptions options) : options_(std::move(options)) {
    if (options_.store_dir) {
        std::filesystem::create_directories(*options_.store_dir / "models");
        std::filesystem::create_directories(*options_.store_dir / "jobs");
        for (const auto& f : std::filesystem::directory_iterator(*options_.store_dir / "jobs")) {
            if (f.path().extension() != ".json") continue;
            auto job = FineTuneJob::from_json(nlohmann::json::parse(read_file(f.path())));
            if (job.status != JobStatus::failed) jobs_by_key_[job.idempotency_key] = job.job_id;
            jobs_.emplace(job.job_id, job);
        }
    }
}

ModelRef MockBackend::build_mock_model(std::span<const TrainingRecord> records, MockMode mode) {
    if (records.empty()) throw ValidationError("cannot build a mock model from zero records");
    MockModel m;
    m.mode = mode;
    for (const auto& r : records) {
        if (!r.prompt.is_training()) {
            throw ValidationError("mock model input for '" + r.study_id +
                                  "' is not a training record");
        }
        m.examples.push_back({r.study_id, r.prompt.messages[1].content,
                              r.prompt.messages[2].content});
    }
    auto digest = sha256_hex(training_jsonl(records));
    m.model_id = fmt::format("mock-{}-{}", to_string(mode), digest.substr(0, 16));
    auto prepared = std::make_shared<const PreparedModel>(m);
    {
        std::lock_guard lock(mu_);
        models_[m.model_id] = prepared;
    }
    if (options_.store_dir) {
        write_file_atomic(*options_.store_dir / "models" / (m.model_id + ".json"),
                          m.to_json().dump());
    }
    return ModelRef{Provider::mock, m.model_id, "mock"};
}

ModelRef MockBackend::oracle_model() {
    if (!options_.oracle) throw ValidationError("mock backend has no oracle corpus");
    auto id = "mock-replay-oracle-" + sha256_hex(export_corpus(*options_.oracle)).substr(0, 16);
    MockModel m;
    m.model_id = id;
    m.mode = MockMode::replay;
    std::lock_guard lock(mu_);
    models_.try_emplace(id, std::make_shared<const PreparedModel>(m));
    return ModelRef{Provider::mock, id, "mock"};
}

std::vector<ModelRef> MockBackend::models() const {
    std::vector<ModelRef> out;
    std::lock_guard lock(mu_);
    for (const auto& [id, m] : models_) out.push_back({Provider::mock, id, "mock"});
    if (options_.store_dir) {
        for (const auto& f :
             std::filesystem::directory_iterator(*options_.store_dir / "models")) {
            auto id = f.path().stem().string();
            if (f.path().extension() == ".json" && !models_.contains(id)) {
                out.push_back({Provider::mock, id, "mock"});
            }
        }
    }
    return out;
}

std::shared_ptr<const MockModel> MockBackend::find_model(std::string_view id) const {
    {
        std::lock_guard lock(mu_);
        if (auto it = models_.find(id); it != models_.end()) return it->second;
    }
    if (options_.store_dir) {
        auto path = *options_.store_dir / "models" / (std::string(id) + ".json");
        if (std::filesystem::exists(path)) {
            auto m = std::make_shared<const PreparedModel>(
                MockModel::from_json(nlohmann::json::parse(read_file(path))));
            std::lock_guard lock(mu_);
            return models_.try_emplace(std::string(id), m).first->second;
        }
    }
    return nullptr;
}

bool MockBackend::knows_model(std::string_view model_id) const {
    return find_model(model_id) != nullptr;
}

void MockBackend::persist_job(const FineTuneJob& job) const {
    if (options_.store_dir) {
        write_file_atomic(*options_.store_dir / "jobs" / (job.job_id + ".json"),
                          job.to_json().dump(2));
    }
}

FineTuneJob MockBackend::create_finetune(const TrainingFile& training,
                                         const TrainingFile* validation,
                                         std::string_view base_model) {
    const auto key = idempotency_key(training.digest, validation ? validation->digest : "",
                                     base_model);
    std::lock_guard lock(mu_);
    if (auto it = jobs_by_key_.find(key); it != jobs_by_key_.end()) {
        spdlog::warn("fine-tune for these files already submitted as {}; not resubmitting",
                     it->second);
        return jobs_.at(it->second);
    }
    auto prompts = read_training_file(training.path);
    if (prompts.empty()) throw ValidationError("empty training file");

    MockModel m;
    m.mode = options_.finetune_mode;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (!prompts[i].is_training()) {
            throw ValidationError(fmt::format("{} line {}: not a training record",
                                              training.path.string(), i + 1));
        }
        std::string id = i < training.study_ids.size() && training.study_ids.size() ==
                                                                prompts.size()
                             ? training.study_ids[i]
                             : fmt::format("line-{:05}", i + 1);
        m.examples.push_back({id, prompts[i].messages[1].content, prompts[i].messages[2].content});
    }
    m.model_id = fmt::format("mock-{}-{}", to_string(m.mode), training.digest.substr(0, 16));

    FineTuneJob job;
    std::size_t attempt = 0;
    do {
        job.job_id = fmt::format("mockjob-{}{}", key.substr(0, 16),
                                 attempt ? fmt::format("-r{}", attempt) : std::string());
        ++attempt;
    } while (jobs_.contains(job.job_id));
    job.status = JobStatus::queued;
    job.training_file_digest = training.digest;
    job.validation_file_digest = validation ? validation->digest : "";
    job.idempotency_key = key;
    job.created_at = now_seconds();

    if (options_.reject) {
        if (auto why = options_.reject(training)) rejections_[job.job_id] = *why;
    }
    pending_[job.job_id] = std::make_shared<const PreparedModel>(std::move(m));
    jobs_[job.job_id] = job;
    jobs_by_key_[key] = job.job_id;
    polls_[job.job_id] = 0;
    ++jobs_created_;
    persist_job(job);
    return job;
}

FineTuneJob MockBackend::poll_job(const FineTuneJob& job) {
    if (is_terminal(job.status)) return job;
    std::lock_guard lock(mu_);
    auto it = jobs_.find(job.job_id);
    if (it == jobs_.end()) throw NotFoundError("unknown fine-tune job '" + job.job_id + "'");
    auto& current = it->second;
    if (is_terminal(current.status)) return current;

    int polls = ++polls_[job.job_id];
    if (polls >= options_.polls_to_finish) {
        auto pending = pending_.find(job.job_id);
        if (auto r = rejections_.find(job.job_id); r != rejections_.end()) {
            current.status = JobStatus::failed;
            current.error = r->second;
            rejections_.erase(r);
            if (pending != pending_.end()) pending_.erase(pending);
        } else if (pending == pending_.end()) {
            // job loaded from disk by another process; the model file is authoritative
            current.status = JobStatus::failed;
            current.error = "mock job state lost";
        } else {
            auto model = pending->second;
            models_[model->model_id] = model;
            if (options_.store_dir) {
                write_file_atomic(*options_.store_dir / "models" / (model->model_id + ".json"),
                                  model->to_json().dump());
            }
            current.status = JobStatus::succeeded;
            current.model = ModelRef{Provider::mock, model->model_id, "mock"};
            pending_.erase(pending);
        }
        current.finished_at = now_seconds();
        if (current.status == JobStatus::failed) jobs_by_key_.erase(current.idempotency_key);
    } else {
        current.status = JobStatus::running;
    }
    persist_job(current);
    return current;
}

const std::unordered_map<std::string, std::string>& MockBackend::oracle_table() const {
    std::call_once(oracle_once_, [this] {
        if (!options_.oracle) return;
        std::vector<FeatureMask> masks = {FeatureMask::all()};
        for (int i = 1; i <= 5; ++i) masks.push_back(FeatureMask::preset(i));
        for (auto v : {PromptVariant::P1, PromptVariant::P2, PromptVariant::P3,
                       PromptVariant::P4}) {
            const auto& t = builtin_template(v);
            for (const auto& e : options_.oracle->entries()) {
                auto completion = render_completion(e.outcome, t, NumberFormat::round_trip);
                for (const auto& m : masks) {
                    oracle_table_.emplace(render_prompt(t, e.study, m).user_text(), completion);
                }
            }
        }
    });
    return oracle_table_;
}

std::string MockBackend::answer(const MockModel& base, const ChatPrompt& prompt,
                                const CompletionOptions& options) const {
    const auto& model = static_cast<const PreparedModel&>(base);
    const auto& user = prompt.user_text();

    if (model.mode == MockMode::replay) {
        if (auto it = model.by_text.find(user); it != model.by_text.end()) {
            return model.examples[it->second].completion;
        }
        const auto& table = oracle_table();
        if (auto it = table.find(user); it != table.end()) return it->second;
        return std::string(kMockRefusal);
    }

    const auto query = parse_prompt_features(user);
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(model.examples.size());
    for (std::size_t i = 0; i < model.examples.size(); ++i) {
        scored.emplace_back(similarity(query, model.features[i], options_.weights), i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return model.examples[a.second].study_id < model.examples[b.second].study_id;
    });
    if (options.temperature <= 0 || scored.size() == 1) {
        return model.examples[scored.front().second].completion;
    }

    Xorshift64Star rng(seed_from(fmt::format("{}|{}|{}", model.model_id, prompt.digest(),
                                             options.seed)));
    const double top = scored.front().first;
    std::vector<double> weights;
    double total = 0;
    for (const auto& [s, i] : scored) {
        weights.push_back(std::exp((s - top) / options.temperature));
        total += weights.back();
    }
    double u = static_cast<double>(rng.next() >> 11) * 0x1.0p-53 * total;
    for (std::size_t k = 0; k < scored.size(); ++k) {
        if (u < weights[k]) return model.examples[scored[k].second].completion;
        u -= weights[k];
    }
    return model.examples[scored.back().second].completion;
}

std::string MockBackend::complete(const ModelRef& model, const ChatPrompt& prompt,
                                  const CompletionOptions& options) {
    if (!prompt.is_query()) {
        throw ValidationError("completion requests take a query prompt (system + user)");
    }
    if (options.temperature < 0) throw ValidationError("temperature must be >= 0");
    auto m = find_model(model.model_id);
    if (!m) throw NotFoundError("unknown model '" + model.model_id + "'");
    return answer(*m, prompt, options);
}

}  // namespace nudgecast
