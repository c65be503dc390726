#include <doctest.h>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "nudgecast/errors.hpp"
#include "nudgecast/evalkit.hpp"
#include "nudgecast/mock_backend.hpp"
#include "synthetic.hpp"

using namespace nudgecast;

namespace {

struct Labelled {
    const char* text;
    std::optional<Direction> direction;
    std::optional<double> r;
    std::optional<double> d;
};

constexpr auto P = Direction::positive;
constexpr auto N = Direction::negative;
constexpr std::nullopt_t none = std::nullopt;

// Hand-labelled completions in the formats models actually produce.
const std::vector<Labelled> kLabelled = {
    {"direction: negative; r: -0.120; d: -0.242", N, -0.12, -0.242},
    {"direction: positive; r: 0.310; d: 0.652", P, 0.31, 0.652},
    {"Direction: Positive; R: 0.05; D: 0.1", P, 0.05, 0.1},
    {"direction: negative; r: -.2; d: -.41", N, -0.2, -0.41},
    {"direction: negative; r: \xE2\x88\x92" "0.150; d: \xE2\x88\x92" "0.303", N, -0.15, -0.303},
    {"direction: positive; r: +0.2; d: +0.408", P, 0.2, 0.408},
    {"direction: negative, r = -0.08, d = -0.16", N, -0.08, -0.16},
    {"direction: negative\nr: -0.3\nd: -0.629", N, -0.3, -0.629},
    {"direction=positive r=0.1 d=0.2", P, 0.1, 0.2},
    {"direction: negative; r: -0.120", N, -0.12, none},
    {"direction: negative; d: -0.242", N, none, -0.242},
    {"direction: positive", P, none, none},
    {"r: 0.2; d: 0.41", none, 0.2, 0.41},
    {"The intervention had a negative effect on the measured outcome. The r-coefficient is "
     "-0.120 and Cohen's d is -0.242.",
     N, -0.12, -0.242},
    {"The intervention had a positive effect on the measured outcome. The r-coefficient is "
     "0.250 and Cohen's d is 0.516.",
     P, 0.25, 0.516},
    {"The effect was negative. Pearson's r = -0.21, Cohen's d = -0.43.", N, -0.21, -0.43},
    {"I expect a positive effect with r of about 0.15 and d of about 0.30.", P, 0.15, 0.30},
    {"Negative effect; r \xE2\x89\x88 -0.1; d \xE2\x89\x88 -0.2", N, -0.1, -0.2},
    {"The correlation coefficient would be -0.18 and Cohen's d would be -0.37.", none, -0.18,
     -0.37},
    {"Prediction: negative. r-value: -0.09. d-value: -0.18.", N, -0.09, -0.18},
    {"The r coefficient was 0.33 and the d was 0.70; direction positive.", P, 0.33, 0.70},
    {"Direction of effect: negative (reduction). r: -0.4, d: -0.87", N, -0.4, -0.87},
    {"correlation (r): 0.12; cohen's d: 0.24; positive", P, 0.12, 0.24},
    {"cohens d: -0.5; r: -0.24; negative", N, -0.24, -0.5},
    {"Cohen\xE2\x80\x99s d is 0.35 and r is 0.17, a positive effect.", P, 0.17, 0.35},
    {"R ~ 0.07, D ~ 0.14, POSITIVE", P, 0.07, 0.14},
    {"r: 0.2 d: 0.4 direction: negative", N, 0.2, 0.4},
    {"direction: positive; r: 1e-2; d: 0.02", P, 0.01, 0.02},
    {"direction: negative; r: -0; d: -0", N, -0.0, -0.0},
    {"direction: positive; r: 0.500000; d: 1.154700", P, 0.5, 1.1547},
    {"Direction: negative. The r-coefficient is -0.06. Cohen's d is -0.12.", N, -0.06, -0.12},
    {"This would likely reduce purchases. r = -0.11 and d = -0.22.", none, -0.11, -0.22},
    {"I cannot make a prediction for this experiment.", none, none, none},
    {"", none, none, none},
    {"direction: unknown; r: n/a; d: n/a", none, none, none},
    {"The answer is unclear.", none, none, none},
    {"Order 42 red meals. Direction: positive.", P, none, none},
    {"direction: negative; radius: 3; r: -0.2; d: -0.4", N, -0.2, -0.4},
    {"direction: negative; r: -0.2; dose: 4; d: -0.4", N, -0.2, -0.4},
    {"direction: positive; r: 0.2; d: 0.4\ndirection: negative; r: -0.9; d: -4.1", P, 0.2, 0.4},
    {"the direction is positive and r is 0.04 while d is 0.08", P, 0.04, 0.08},
    {"direction: negative;r:-0.12;d:-0.24", N, -0.12, -0.24},
    {"  direction :  negative ;  r :  -0.12 ;  d :  -0.24  ", N, -0.12, -0.24},
    {"Direction - negative. r-value = -0.3. d-value = -0.63.", N, -0.3, -0.63},
    {"positive effect, Pearson r 0.2", P, none, none},
    {"Estimated correlation: -0.27. Estimated Cohen's d: -0.56. Effect is negative.", N, -0.27,
     -0.56},
    {"direction: positive; r: 0.999; d: 44.7", P, 0.999, 44.7},
    {"direction: negative; r: -0.120; d: -0.242.", N, -0.12, -0.242},
    {"Result -> direction: positive | r: 0.18 | d: 0.37", P, 0.18, 0.37},
    {"both positive and negative outcomes are plausible; r: 0.01", P, 0.01, none},
};

bool same(std::optional<double> a, std::optional<double> b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || std::fabs(*a - *b) < 1e-12;
}

Entry truth(const std::string& id, double r) {
    Entry e;
    e.study.study_id = id;
    e.outcome = outcome_from_r(r);
    return e;
}

PredictionRecord pred(const std::string& id, std::optional<Direction> dir,
                      std::optional<double> r = std::nullopt,
                      std::optional<double> d = std::nullopt) {
    PredictionRecord p;
    p.study_id = id;
    p.direction = dir;
    p.r_pred = r;
    p.d_pred = d;
    return p;
}

}  // namespace

TEST_CASE("parser agrees with the hand-labelled corpus") {
    CHECK(kLabelled.size() == 50);
    std::size_t agree = 0;
    for (const auto& c : kLabelled) {
        auto p = parse_prediction(c.text);
        bool ok = p.direction == c.direction && same(p.r_pred, c.r) && same(p.d_pred, c.d);
        CHECK_MESSAGE(ok, "text: ", c.text);
        agree += ok;
    }
    CHECK(agree == kLabelled.size());
}

TEST_CASE("parse o render is the identity up to three decimals") {
    Xorshift64Star rng(3);
    for (auto v : {PromptVariant::P1, PromptVariant::P4}) {
        for (int i = 0; i < 2000; ++i) {
            double u = static_cast<double>(rng.below(1'000'000)) / 1'000'000.0;
            double r = (u * 1.98 - 0.99);
            if (r == 0.0) continue;
            auto o = outcome_from_r(r);
            auto p = parse_prediction(render_completion(o, builtin_template(v)));
            REQUIRE(p.direction == o.direction);
            REQUIRE(p.r_pred.has_value());
            REQUIRE(p.d_pred.has_value());
            CHECK(std::fabs(*p.r_pred - o.r) <= 5e-4 + 1e-12);
            CHECK(std::fabs(*p.d_pred - o.d) <= 5e-4 + 1e-12);
        }
    }
}

TEST_CASE("round-trip completions parse back to the exact values") {
    Xorshift64Star rng(5);
    for (int i = 0; i < 2000; ++i) {
        double r = (static_cast<double>(rng.below(1u << 30)) / (1u << 30)) * 1.998 - 0.999;
        if (r == 0.0) continue;
        auto o = outcome_from_r(r);
        for (auto v : {PromptVariant::P2, PromptVariant::P4}) {
            auto p = parse_prediction(render_completion(o, builtin_template(v), NumberFormat::round_trip));
            CHECK(p.r_pred == o.r);
            CHECK(p.d_pred == o.d);
        }
    }
    auto tiny = outcome_from_r(-1e-7);
    auto p = parse_prediction(render_completion(tiny, builtin_template(PromptVariant::P4),
                                                NumberFormat::round_trip));
    CHECK(p.r_pred == tiny.r);
}

TEST_CASE("signed magnitude error compares magnitudes") {
    CHECK(signed_magnitude_error(-0.30, 0.25) == doctest::Approx(0.05));
    CHECK(signed_magnitude_error(0.1, -0.3) == doctest::Approx(-0.2));
    CHECK(signed_magnitude_error(-0.4, -0.4) == 0.0);
}

TEST_CASE("evaluate_run: coverage, accuracy and errors over defined items") {
    std::vector<Entry> truths = {truth("a", 0.2), truth("b", -0.3), truth("c", 0.1),
                                 truth("d", -0.1)};
    std::vector<PredictionRecord> preds = {
        pred("b", N, -0.4, -0.9), pred("a", P, 0.1), pred("c", N), pred("d", std::nullopt)};
    auto run = evaluate_run(preds, truths);
    CHECK(run.n_items == 4);
    CHECK(run.direction_coverage == doctest::Approx(0.75));
    CHECK(*run.direction_accuracy == doctest::Approx(2.0 / 3.0));
    CHECK(run.rd_coverage == doctest::Approx(0.25));
    CHECK(run.r_covered == 2);
    CHECK(*run.r_error_mean == doctest::Approx(((0.4 - 0.3) + (0.1 - 0.2)) / 2.0));
    CHECK(run.d_covered == 1);
    CHECK(*run.d_error_mean ==
          doctest::Approx(0.9 - std::fabs(effectstats::d_from_r(-0.3))));
}

TEST_CASE("evaluate_run rejects mismatched predictions") {
    std::vector<Entry> truths = {truth("a", 0.2), truth("b", -0.3)};
    std::vector<PredictionRecord> short_preds = {pred("a", P)};
    CHECK_THROWS_AS(evaluate_run(short_preds, truths), ValidationError);
    std::vector<PredictionRecord> unknown = {pred("a", P), pred("x", P)};
    CHECK_THROWS_AS(evaluate_run(unknown, truths), ValidationError);
    std::vector<PredictionRecord> dup = {pred("a", P), pred("a", P)};
    CHECK_THROWS_AS(evaluate_run(dup, truths), ValidationError);
}

TEST_CASE("41 items x 10 runs: mean accuracy 0.790") {
    const std::vector<int> correct = {32, 33, 32, 33, 32, 33, 32, 33, 32, 32};
    std::vector<Entry> truths;
    for (int i = 0; i < 41; ++i) truths.push_back(truth("t" + std::to_string(i), -0.2));
    std::vector<RunAggregate> runs;
    for (int k : correct) {
        std::vector<PredictionRecord> preds;
        for (int i = 0; i < 41; ++i) {
            preds.push_back(pred("t" + std::to_string(i), i < k ? N : P, -0.2, -0.408));
        }
        runs.push_back(evaluate_run(preds, truths));
    }
    auto report = aggregate_runs(runs);
    CHECK(report.n_runs == 10);
    CHECK(report.n_test == 41);
    CHECK(*report.direction_accuracy == doctest::Approx(324.0 / 410.0).epsilon(1e-12));
    CHECK(std::fabs(*report.direction_accuracy - 0.790) < 0.0005);
    CHECK(report.direction_coverage == 1.0);
}

TEST_CASE("error mean and population variance across runs") {
    std::vector<Entry> truths = {truth("a", 0.2)};
    std::vector<RunAggregate> runs;
    for (double pr : {0.3, 0.5}) {
        std::vector<PredictionRecord> preds = {pred("a", P, pr)};
        runs.push_back(evaluate_run(preds, truths));
    }
    auto report = aggregate_runs(runs);
    CHECK(*report.r_error_mean == doctest::Approx(0.2));
    CHECK(*report.r_error_var == doctest::Approx(0.01));
    CHECK_FALSE(report.d_error_mean.has_value());
    CHECK_FALSE(report.d_error_var.has_value());
}

TEST_CASE("a run without r predictions does not dilute the mean") {
    std::vector<Entry> truths = {truth("a", 0.2)};
    std::vector<PredictionRecord> with_r = {pred("a", P, 0.3)};
    std::vector<PredictionRecord> without = {pred("a", P)};
    auto report = aggregate_runs({evaluate_run(with_r, truths), evaluate_run(without, truths)});
    CHECK(*report.r_error_mean == doctest::Approx(0.1));
    CHECK(*report.r_error_var == doctest::Approx(0.0));
    CHECK(report.rd_coverage == 0.0);
}

TEST_CASE("naive estimator on a balanced set scores 0.50") {
    std::vector<Entry> test;
    for (int i = 0; i < 6; ++i) test.push_back(truth("n" + std::to_string(i), -0.1));
    for (int i = 0; i < 6; ++i) test.push_back(truth("p" + std::to_string(i), 0.1));
    effectstats::NaiveBaseline b{Direction::negative, 0.12, 0.30};
    auto report = evaluate_naive(b, test);
    CHECK(*report.direction_accuracy == doctest::Approx(0.50));
    CHECK(report.model_id == "naive-baseline");
    CHECK(*report.r_error_mean == doctest::Approx(0.02));
}

TEST_CASE("report JSON round trips and validates") {
    auto corpus = testing::synthetic_corpus(20, 2);
    MockOptions opts;
    opts.oracle = corpus;
    MockBackend mock(opts);
    EvalOptions eo;
    eo.n_runs = 3;
    auto report = evaluate_model(mock, mock.oracle_model(), corpus.entries(), eo);
    auto j = report.to_json();
    CHECK(validate_report_json(j).empty());
    CHECK(j["schema"] == kEvalReportSchema);
    auto back = EvalReport::from_json(j);
    CHECK(back.to_json() == j);

    auto broken = j;
    broken.erase("direction_coverage");
    broken["n_runs"] = -1;
    CHECK(validate_report_json(broken).size() >= 2);
    CHECK_THROWS_AS(EvalReport::from_json(broken), ValidationError);

    auto row = report_csv_row(report, "replay");
    CHECK(row.starts_with("replay,"));
    CHECK(report_csv_header().starts_with("label,model_id,variant,mask,temperature"));
}

TEST_CASE("replay of the truth scores perfectly") {
    auto corpus = testing::synthetic_corpus(20, 6);
    MockOptions opts;
    opts.oracle = corpus;
    MockBackend mock(opts);
    for (auto v : {PromptVariant::P3, PromptVariant::P4}) {
        EvalOptions eo;
        eo.tmpl = builtin_template(v);
        eo.n_runs = 2;
        auto report = evaluate_model(mock, mock.oracle_model(), corpus.entries(), eo);
        CHECK(report.direction_coverage == 1.0);
        CHECK(*report.direction_accuracy == 1.0);
        CHECK(report.rd_coverage == 1.0);
        CHECK(*report.r_error_mean == 0.0);
        CHECK(*report.d_error_mean == 0.0);
        CHECK(*report.r_error_var == 0.0);
        CHECK(*report.d_error_var == 0.0);
    }
}

namespace {

class FlakyBackend final : public Backend {
public:
    FlakyBackend(Backend& inner, std::size_t fail_after) : inner_(inner), fail_after_(fail_after) {}
    Provider provider() const override { return inner_.provider(); }
    FineTuneJob create_finetune(const TrainingFile& t, const TrainingFile* v,
                                std::string_view b) override {
        return inner_.create_finetune(t, v, b);
    }
    FineTuneJob poll_job(const FineTuneJob& job) override { return inner_.poll_job(job); }
    std::string complete(const ModelRef& model, const ChatPrompt& prompt,
                         const CompletionOptions& options) override {
        if (calls_.fetch_add(1) >= fail_after_) throw BackendError("provider unavailable", 503);
        return inner_.complete(model, prompt, options);
    }
    bool knows_model(std::string_view id) const override { return inner_.knows_model(id); }
    std::atomic<std::size_t> calls_{0};

private:
    Backend& inner_;
    std::size_t fail_after_;
};

}  // namespace

TEST_CASE("a mid-evaluation failure keeps completed runs for resumption") {
    auto corpus = testing::synthetic_corpus(10, 6);
    MockOptions opts;
    opts.oracle = corpus;
    MockBackend mock(opts);
    FlakyBackend flaky(mock, 25);
    EvalOptions eo;
    eo.n_runs = 4;
    eo.parallelism = 1;
    std::vector<std::vector<PredictionRecord>> done;
    try {
        evaluate_model(flaky, mock.oracle_model(), corpus.entries(), eo);
        FAIL("expected PartialReportError");
    } catch (const PartialReportError& e) {
        done = e.completed_runs();
    }
    CHECK(done.size() == 2);
    eo.completed_runs = done;
    FlakyBackend healthy(mock, 1000);
    auto report = evaluate_model(healthy, mock.oracle_model(), corpus.entries(), eo);
    CHECK(report.n_runs == 4);
    CHECK(healthy.calls_.load() == 20);
}
