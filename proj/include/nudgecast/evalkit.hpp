#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nudgecast/backend.hpp"
#include "nudgecast/corpus.hpp"
#include "nudgecast/effectstats.hpp"
#include "nudgecast/promptgen.hpp"

namespace nudgecast {

/// Structured reading of one completion. A field is absent exactly when the
/// text carried no parseable value of that kind.
struct PredictionRecord {
    std::string study_id;
    std::string raw_text;
    std::optional<Direction> direction;
    std::optional<double> r_pred;
    std::optional<double> d_pred;

    bool operator==(const PredictionRecord&) const = default;
};

/// Case-insensitive extraction of a direction keyword and labelled r / d
/// values from free text. Never throws.
///
/// Direction: a "direction: <word>" label wins; otherwise the first
/// whole-word "positive" or "negative". Numbers: `r` or `r-coefficient`
/// or `correlation` followed by `=`, `:`, `is`, `of` or `≈`; the same for
/// `d`, `Cohen's d` and `effect size`. Leading-dot decimals (.21) and the
/// Unicode minus sign are accepted.
PredictionRecord parse_prediction(std::string_view raw_text);
PredictionRecord parse_prediction(std::string study_id, std::string_view raw_text);

/// |pred| - |actual|. Positive means the magnitude was overestimated.
double signed_magnitude_error(double pred, double actual);

/// Metrics of one inference pass over a test slice.
struct RunAggregate {
    std::size_t n_items = 0;
    std::size_t direction_covered = 0;
    std::size_t direction_correct = 0;
    std::size_t rd_covered = 0;
    std::size_t r_covered = 0;
    std::size_t d_covered = 0;
    double direction_coverage = 0;
    std::optional<double> direction_accuracy;  ///< correct / covered
    double rd_coverage = 0;
    std::optional<double> r_error_mean;  ///< over items with r present
    std::optional<double> d_error_mean;  ///< over items with d present

    nlohmann::json to_json() const;
    static RunAggregate from_json(const nlohmann::json& j);
};

/// Records and truths are matched by study_id; both sides must hold the
/// same ids exactly once. Throws ValidationError otherwise.
RunAggregate evaluate_run(std::span<const PredictionRecord> records,
                          std::span<const Entry> truths);

inline constexpr std::string_view kEvalReportSchema = "nudgecast.eval_report/1";

/// Metrics across reruns. Each run-level metric is averaged over the runs
/// where it is defined. Error variances are population variances (divide
/// by the number of runs) of the per-run means.
struct EvalReport {
    std::string model_id;
    std::string variant;
    std::string mask;
    double temperature = 0;
    std::size_t n_test = 0;
    std::size_t n_runs = 0;
    double direction_coverage = 0;
    std::optional<double> direction_accuracy;
    double rd_coverage = 0;
    std::optional<double> r_error_mean;
    std::optional<double> r_error_var;
    std::optional<double> d_error_mean;
    std::optional<double> d_error_var;
    std::vector<RunAggregate> per_run;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// Folds per-run aggregates into a report (identity fields left empty).
EvalReport aggregate_runs(std::vector<RunAggregate> runs);

/// Problems found when checking a document against kEvalReportSchema;
/// empty when valid.
std::vector<std::string> validate_report_json(const nlohmann::json& j);

/// Spreadsheet row: header and one data line (no trailing newline).
std::string report_csv_header();
std::string report_csv_row(const EvalReport& report, std::string_view label);

struct EvalOptions {
    PromptTemplate tmpl = builtin_template(PromptVariant::P4);
    FeatureMask mask = FeatureMask::all();
    std::size_t n_runs = 10;
    double temperature = 1.0;
    /// Concurrent completion calls within a run.
    std::size_t parallelism = 4;
    /// Runs already completed by an earlier, interrupted evaluation.
    std::vector<std::vector<PredictionRecord>> completed_runs;
};

/// Thrown when the backend fails mid-evaluation; carries every run that
/// finished so the evaluation can resume from it.
class PartialReportError : public BackendError {
public:
    PartialReportError(const std::string& what,
                       std::vector<std::vector<PredictionRecord>> completed)
        : BackendError(what), completed_(std::move(completed)) {}
    const std::vector<std::vector<PredictionRecord>>& completed_runs() const {
        return completed_;
    }

private:
    std::vector<std::vector<PredictionRecord>> completed_;
};

/// Per-run prediction records of one pass; run k uses seed k.
std::vector<PredictionRecord> infer_run(Backend& backend, const ModelRef& model,
                                        std::span<const Entry> test, const EvalOptions& options,
                                        std::size_t run_index);

/// n_runs inference passes over `test`, each parsed and scored.
EvalReport evaluate_model(Backend& backend, const ModelRef& model, std::span<const Entry> test,
                          const EvalOptions& options = {});

/// Report of the naive estimator: modal direction and mean |r|, |d| of the
/// training slice predicted for every test item (one deterministic run).
EvalReport evaluate_naive(const effectstats::NaiveBaseline& baseline,
                          std::span<const Entry> test);

}  // namespace nudgecast
