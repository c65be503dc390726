#include <doctest.h>

#include <cmath>
#include <set>

#include "nudgecast/evalkit.hpp"
#include "nudgecast/mock_backend.hpp"
#include "nudgecast/remote_backend.hpp"
#include "nudgecast/transcript.hpp"
#include "stub_provider.hpp"
#include "synthetic.hpp"
#include "temp_dir.hpp"

using namespace nudgecast;

namespace {

const PromptTemplate& p4() { return builtin_template(PromptVariant::P4); }

TrainingFile write_training(const std::filesystem::path& path, std::span<const Entry> entries) {
    return export_training_file(build_training_records(entries, p4(), FeatureMask::all()), path);
}

RemoteConfig stub_config(const testing::StubProvider& stub) {
    RemoteConfig c;
    c.base_url = stub.base_url();
    c.api_key = "test-key";
    c.retry.initial_backoff = std::chrono::milliseconds(1);
    c.retry.max_backoff = std::chrono::milliseconds(2);
    c.requests_per_second = 0;
    c.timeout = std::chrono::seconds(10);
    return c;
}

constexpr WaitOptions kFastWait{std::chrono::milliseconds(0), std::chrono::seconds(30)};

}  // namespace

TEST_CASE("job status transitions only move forward") {
    CHECK(is_forward_transition(JobStatus::queued, JobStatus::running));
    CHECK(is_forward_transition(JobStatus::running, JobStatus::succeeded));
    CHECK(is_forward_transition(JobStatus::running, JobStatus::running));
    CHECK_FALSE(is_forward_transition(JobStatus::succeeded, JobStatus::running));
    CHECK_FALSE(is_forward_transition(JobStatus::failed, JobStatus::succeeded));
    CHECK(is_terminal(JobStatus::failed));
    CHECK_FALSE(is_terminal(JobStatus::queued));
}

TEST_CASE("retry backoff grows geometrically up to the cap") {
    RetryPolicy p;
    CHECK(p.backoff(1) == std::chrono::milliseconds(500));
    CHECK(p.backoff(2) == std::chrono::milliseconds(1000));
    CHECK(p.backoff(3) == std::chrono::milliseconds(2000));
    CHECK(p.backoff(20) == std::chrono::milliseconds(30000));

    RetryPolicy fast;
    fast.initial_backoff = std::chrono::milliseconds(0);
    int calls = 0;
    auto v = with_retry(fast, "op", [&] {
        if (++calls < 3) throw TransientError("busy", 503);
        return 7;
    });
    CHECK(v == 7);
    CHECK(calls == 3);
    calls = 0;
    CHECK_THROWS_AS(with_retry(fast, "op", [&]() -> int { ++calls; throw TransientError("busy", 503); }),
                    BackendError);
    CHECK(calls == fast.max_attempts);
}

TEST_CASE("mock fine-tune moves queued -> running -> succeeded and dedups") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(12, 1);
    MockBackend mock;
    auto file = write_training(tmp.path() / "t.jsonl", corpus.entries());
    auto job = mock.create_finetune(file, nullptr, "base");
    CHECK(job.status == JobStatus::queued);
    auto again = mock.create_finetune(file, nullptr, "base");
    CHECK(again.job_id == job.job_id);
    CHECK(mock.jobs_created() == 1);
    job = mock.poll_job(job);
    CHECK(job.status == JobStatus::running);
    job = mock.poll_job(job);
    CHECK(job.status == JobStatus::succeeded);
    REQUIRE(job.model.has_value());
    CHECK(mock.knows_model(job.model->model_id));
    CHECK(job.model->model_id.starts_with("mock-nn-"));
}

TEST_CASE("mock rejection hook fails the job") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(12, 1);
    MockOptions opts;
    opts.reject = [](const TrainingFile&) -> std::optional<std::string> { return "bad file"; };
    MockBackend mock(opts);
    auto job = wait_for_job(mock, mock.create_finetune(write_training(tmp.path() / "t.jsonl",
                                                                      corpus.entries()),
                                                       nullptr, "base"),
                            kFastWait);
    CHECK(job.status == JobStatus::failed);
    CHECK(job.error == "bad file");
}

TEST_CASE("mock models persist through the store directory") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(12, 1);
    MockOptions opts;
    opts.store_dir = tmp.path() / "store";
    ModelRef model;
    {
        MockBackend first(opts);
        model = first.build_mock_model(
            build_training_records(corpus.entries(), p4(), FeatureMask::all()), MockMode::replay);
    }
    MockBackend second(opts);
    CHECK(second.knows_model(model.model_id));
    auto q = render_prompt(p4(), corpus[3].study, FeatureMask::all());
    CHECK(second.complete(model, q, {}) == render_completion(corpus[3].outcome, p4()));
}

TEST_CASE("unknown mock model is a NotFoundError") {
    MockBackend mock;
    auto corpus = testing::synthetic_corpus(2, 1);
    auto q = render_prompt(p4(), corpus[0].study, FeatureMask::all());
    CHECK_THROWS_AS(mock.complete(ModelRef{Provider::mock, "mock-nope", ""}, q, {}), NotFoundError);
}

TEST_CASE("replay answers unseen prompts from the oracle, else refuses") {
    auto corpus = testing::synthetic_corpus(20, 2);
    MockOptions opts;
    opts.oracle = corpus;
    MockBackend mock(opts);
    auto model = mock.build_mock_model(
        build_training_records(std::span(corpus.entries()).first(5), p4(), FeatureMask::all()),
        MockMode::replay);
    auto q = render_prompt(p4(), corpus[15].study, FeatureMask::preset(3));
    CHECK(mock.complete(model, q, {}) ==
          render_completion(corpus[15].outcome, p4(), NumberFormat::round_trip));

    MockBackend bare;
    auto m2 = bare.build_mock_model(
        build_training_records(std::span(corpus.entries()).first(5), p4(), FeatureMask::all()),
        MockMode::replay);
    CHECK(bare.complete(m2, q, {}) == kMockRefusal);
}

TEST_CASE("nearest neighbour at temperature 0 returns the most similar study") {
    auto corpus = testing::synthetic_corpus(40, 12);
    MockBackend mock;
    auto train = std::span(corpus.entries()).first(30);
    auto model = mock.build_mock_model(build_training_records(train, p4(), FeatureMask::all()),
                                       MockMode::nearest_neighbor);
    for (std::size_t i = 30; i < 40; ++i) {
        auto q = render_prompt(p4(), corpus[i].study, FeatureMask::all());
        auto qf = parse_prompt_features(q.user_text());
        double best = -1e300;
        std::string best_id;
        for (const auto& e : train) {
            auto cf = parse_prompt_features(render_prompt(p4(), e.study, FeatureMask::all()).user_text());
            double s = similarity(qf, cf);
            if (s > best || (s == best && e.study.study_id < best_id)) {
                best = s;
                best_id = e.study.study_id;
            }
        }
        auto expected = render_completion(corpus[*corpus.find(best_id)].outcome, p4());
        CompletionOptions co;
        co.temperature = 0;
        CHECK(mock.complete(model, q, co) == expected);
    }
}

TEST_CASE("nearest neighbour sampling is seeded") {
    auto corpus = testing::synthetic_corpus(30, 12);
    MockBackend mock;
    auto model = mock.build_mock_model(
        build_training_records(std::span(corpus.entries()).first(25), p4(), FeatureMask::all()),
        MockMode::nearest_neighbor);
    auto q = render_prompt(p4(), corpus[27].study, FeatureMask::all());
    std::set<std::string> answers;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        CompletionOptions co{1.0, seed, ""};
        auto a = mock.complete(model, q, co);
        CHECK(a == mock.complete(model, q, co));
        answers.insert(a);
    }
    CHECK(answers.size() > 1);
}

TEST_CASE("similarity weights follow the documented formula") {
    PromptFeatures a, b;
    a.category = b.category = InterventionCategory::nudge;
    a.location = "Germany";
    b.location = "France";
    a.year = 2000;
    b.year = 2020;
    a.sample_size = 100;
    b.sample_size = 400;
    CHECK(similarity(a, b) == doctest::Approx(1.0 - 0.25 * 2.0 - 0.25 * std::log(4.0)));
    b.location = "Germany";
    b.year.reset();
    CHECK(similarity(a, b) == doctest::Approx(1.5 - 0.25 * std::log(4.0)));
}

TEST_CASE("remote backend runs a fine-tune and completions against the stub") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(20, 3);
    testing::StubProvider stub;
    RemoteBackend remote(stub_config(stub));
    auto file = write_training(tmp.path() / "t.jsonl", std::span(corpus.entries()).first(15));
    auto job = wait_for_job(remote, remote.create_finetune(file, nullptr, "gpt-3.5-turbo"), kFastWait);
    REQUIRE(job.status == JobStatus::succeeded);
    REQUIRE(job.model.has_value());
    CHECK(job.model->provider == Provider::remote);
    CHECK(stub.uploads() == 1);
    auto q = render_prompt(p4(), corpus[17].study, FeatureMask::all());
    auto text = remote.complete(*job.model, q, {0.0, 0, "S018#run0"});
    CHECK(parse_prediction(text).direction.has_value());
    CHECK(stub.completions() == 1);
}

TEST_CASE("remote backend retries 503 responses") {
    auto corpus = testing::synthetic_corpus(20, 3);
    testing::StubOptions so;
    so.oracle = corpus;
    testing::StubProvider stub(so);
    RemoteBackend remote(stub_config(stub));
    testing::TempDir tmp;
    auto file = write_training(tmp.path() / "t.jsonl", std::span(corpus.entries()).first(12));
    stub.inject_server_errors(3);
    auto job = remote.create_finetune(file, nullptr, "base");
    CHECK_FALSE(job.job_id.empty());
    CHECK(stub.total_requests() >= 5);
    CHECK(stub.jobs_created() == 1);

    stub.inject_server_errors(100);
    CHECK_THROWS_AS(remote.poll_job(job), BackendError);
}

TEST_CASE("remote job creation is idempotent across processes") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(20, 3);
    testing::StubProvider stub;
    auto cfg = stub_config(stub);
    cfg.ledger_path = tmp.path() / "ledger.json";
    auto file = write_training(tmp.path() / "t.jsonl", std::span(corpus.entries()).first(12));
    std::string first_id;
    {
        RemoteBackend remote(cfg);
        first_id = remote.create_finetune(file, nullptr, "base").job_id;
        CHECK(remote.create_finetune(file, nullptr, "base").job_id == first_id);
    }
    RemoteBackend fresh(cfg);
    CHECK(fresh.create_finetune(file, nullptr, "base").job_id == first_id);
    CHECK(stub.uploads() == 1);
    CHECK(stub.jobs_created() == 1);
    CHECK(stub.duplicate_submissions() == 0);

    RemoteConfig no_ledger = stub_config(stub);
    RemoteBackend other(no_ledger);
    CHECK(other.create_finetune(file, nullptr, "base").job_id == first_id);
    CHECK(stub.jobs_created() == 1);
}

TEST_CASE("remote backend refuses files below the provider minimum") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(9, 3);
    testing::StubProvider stub;
    RemoteBackend remote(stub_config(stub));
    auto file = write_training(tmp.path() / "t.jsonl", corpus.entries());
    try {
        remote.create_finetune(file, nullptr, "base");
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("minimum is 10") != std::string::npos);
    }
    CHECK(stub.total_requests() == 0);
}

TEST_CASE("remote backend maps unknown models to NotFoundError") {
    auto corpus = testing::synthetic_corpus(3, 3);
    testing::StubProvider stub;
    RemoteBackend remote(stub_config(stub));
    auto q = render_prompt(p4(), corpus[0].study, FeatureMask::all());
    CHECK_THROWS_AS(remote.complete(ModelRef{Provider::remote, "ft:nope", ""}, q, {}), NotFoundError);
}

TEST_CASE("remote base URL needs a scheme") {
    RemoteConfig c;
    c.base_url = "127.0.0.1:9/v1";
    CHECK_THROWS_AS(RemoteBackend{c}, ValidationError);
}

TEST_CASE("recording backend serves repeats from the transcript") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(10, 3);
    MockOptions opts;
    opts.oracle = corpus;
    MockBackend mock(opts);
    auto store = std::make_shared<TranscriptStore>(tmp.path() / "tx");
    RecordingBackend rec(mock, store);
    auto model = mock.oracle_model();
    auto q = render_prompt(p4(), corpus[1].study, FeatureMask::all());
    auto first = rec.complete(model, q, {1.0, 4, "x"});
    CHECK(rec.cache_hits() == 0);
    CHECK(rec.complete(model, q, {1.0, 4, "x"}) == first);
    CHECK(rec.cache_hits() == 1);
    rec.complete(model, q, {1.0, 5, "x"});
    CHECK(rec.cache_hits() == 1);

    RecordingBackend reopened(mock, std::make_shared<TranscriptStore>(tmp.path() / "tx"));
    CHECK(reopened.complete(model, q, {1.0, 4, "x"}) == first);
    CHECK(reopened.cache_hits() == 1);

    auto k1 = TranscriptStore::key(model, q, {1.0, 4, ""});
    CHECK(k1 == TranscriptStore::key(model, q, {1.0, 4, "other id"}));
    CHECK(k1 != TranscriptStore::key(model, q, {0.5, 4, ""}));
}
