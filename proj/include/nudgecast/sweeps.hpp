#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nudgecast/backend.hpp"
#include "nudgecast/corpus.hpp"
#include "nudgecast/evalkit.hpp"
#include "nudgecast/promptgen.hpp"

namespace nudgecast {

enum class ExperimentKind { prompt_variants, size_sweep, ablation, unseen_validation };
std::string_view to_string(ExperimentKind k);
std::optional<ExperimentKind> parse_experiment_kind(std::string_view s);

/// Declarative description of one campaign.
///
/// prompt_variants: one cell per variant (default P1..P4), mask all.
/// size_sweep: one cell per training size, P4, mask all. Size N trains on
///   the first N entries of train ++ validation, so every set contains the
///   previous one; sizes above the train count merge validation in.
/// ablation: one cell per mask (default all, MF1..MF5), P4.
/// unseen_validation: one P4 fine-tune on train ++ validation (or the
///   given model), evaluated on the unseen corpus in full and without
///   `exclude_category`, next to the naive baseline.
struct ExperimentPlan {
    ExperimentKind kind = ExperimentKind::prompt_variants;
    std::string name;
    std::vector<PromptVariant> variants;
    std::vector<std::string> masks;
    std::vector<std::size_t> sizes;
    SplitSpec split{0, {144, 23, 41}};
    std::string base_model = "gpt-3.5-turbo";
    std::size_t n_runs = 10;
    double temperature = 1.0;
    /// unseen_validation only.
    std::optional<std::string> unseen_path;
    std::optional<InterventionCategory> exclude_category = InterventionCategory::monetary;
    std::optional<ModelRef> model;

    nlohmann::json to_json() const;
    /// Fills defaults for omitted fields. Throws ValidationError on bad values.
    static ExperimentPlan from_json(const nlohmann::json& j);
};

ExperimentPlan load_plan(const std::filesystem::path& path);

/// Throws ValidationError unless the plan is runnable against a corpus of
/// `corpus_size` entries: split counts match, sizes ascending and within
/// [10, train + validation], masks are named presets.
void validate_plan(const ExperimentPlan& plan, std::size_t corpus_size);

/// Digest over the normalized plan and the corpus provenance. Identical
/// inputs give identical campaign directories and cell keys.
std::string plan_digest(const ExperimentPlan& plan, const Corpus& corpus);

/// One cell of a campaign as planned, before anything is submitted.
struct PlannedCell {
    std::string key;    ///< e.g. "variant-P2", "mask-MF3", "size-75"
    std::string label;  ///< row name in rendered tables, e.g. "MP2"
    PromptVariant variant = PromptVariant::P4;
    FeatureMask mask;
    std::vector<std::size_t> train;       ///< corpus indices
    std::vector<std::size_t> validation;  ///< corpus indices
    std::string training_digest;          ///< digest of the JSONL bytes to upload
};

/// Cells of a plan in execution order. Validates the plan first and
/// renders every training file in memory (so contamination surfaces here).
std::vector<PlannedCell> plan_cells(const ExperimentPlan& plan, const Corpus& corpus);

enum class CellStatus { pending, succeeded, failed };
std::string_view to_string(CellStatus s);

struct CellResult {
    std::string key;    ///< e.g. "variant-P2", "mask-MF3", "size-75"
    std::string label;  ///< row name in rendered tables, e.g. "MP2"
    CellStatus status = CellStatus::pending;
    std::string error;
    std::string variant;
    std::string mask;
    std::size_t training_records = 0;
    std::string training_digest;
    std::string validation_digest;
    std::vector<std::string> training_ids;
    std::optional<FineTuneJob> job;
    std::optional<EvalReport> report;
    std::filesystem::path dir;

    nlohmann::json to_json() const;
    static CellResult from_json(const nlohmann::json& j);
};

struct UnseenReports {
    EvalReport full;
    std::optional<EvalReport> excluded;
    EvalReport naive;
    std::size_t n_excluded = 0;
};

struct CampaignResult {
    ExperimentKind kind = ExperimentKind::prompt_variants;
    std::string plan_digest;
    std::filesystem::path dir;
    std::vector<CellResult> cells;
    std::optional<UnseenReports> unseen;

    bool all_succeeded() const;
    nlohmann::json to_json() const;
};

struct CampaignOptions {
    std::filesystem::path state_dir;
    /// Continue an existing campaign, rerunning only unfinished cells.
    bool resume = false;
    /// Discard an existing campaign directory and start over.
    bool force = false;
    WaitOptions wait{std::chrono::milliseconds(1000), std::chrono::hours(6)};
    std::size_t parallelism = 4;
};

/// Runs (or resumes) the plan's campaign under
/// <state_dir>/campaigns/<plan digest>/. Cells run sequentially; a failed
/// cell is recorded and the campaign moves on. A completed cell is never
/// re-submitted, and a cell whose job was already submitted polls that
/// job instead of submitting again.
///
/// Throws ValidationError for an invalid plan, or when the campaign
/// directory exists and neither resume nor force is set.
CampaignResult run_campaign(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                            const CampaignOptions& options);

CampaignResult run_prompt_variant_experiment(const ExperimentPlan& plan, const Corpus& corpus,
                                             Backend& backend, const CampaignOptions& options);
CampaignResult run_size_sweep(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                              const CampaignOptions& options);
CampaignResult run_ablation(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                            const CampaignOptions& options);

/// Evaluates `model` on the unseen corpus (every entry must be holdout),
/// then on the same set minus `exclude`, plus the naive baseline fitted on
/// `train`. Throws ValidationError if the filtered set is empty.
UnseenReports run_unseen_validation(Backend& backend, const ModelRef& model, const Corpus& unseen,
                                    std::span<const Entry> train,
                                    std::optional<InterventionCategory> exclude,
                                    const EvalOptions& options);

/// Entries used for training at size n: first n of train ++ validation.
std::vector<std::size_t> size_sweep_indices(const Split& split, std::size_t n);

/// Results layout: Model, direction coverage, accuracy, r/d coverage,
/// r error (variance), d error (variance). Percentages carry one decimal;
/// missing statistics render as "-".
std::string render_results_table(const std::vector<CellResult>& cells);

/// Cells against the "mask-all" cell, flagging those whose r and d error
/// means are both smaller in magnitude than the baseline's.
std::string render_ablation_comparison(const std::vector<CellResult>& cells);

/// Keys of ablation cells beating the baseline on both error means.
std::vector<std::string> cells_beating_baseline(const std::vector<CellResult>& cells);

/// N, direction accuracy, r/d error means and variances, one row per size.
std::string size_curve_csv(const std::vector<CellResult>& cells);

std::string render_unseen(const UnseenReports& reports);

}  // namespace nudgecast
