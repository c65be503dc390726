#include "nudgecast/sweeps.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "nudgecast/csv.hpp"
#include "nudgecast/digest.hpp"
#include "nudgecast/effectstats.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace fs = std::filesystem;

std::string_view to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::prompt_variants: return "prompt_variants";
        case ExperimentKind::size_sweep: return "size_sweep";
        case ExperimentKind::ablation: return "ablation";
        case ExperimentKind::unseen_validation: return "unseen_validation";
    }
    return "?";
}

std::optional<ExperimentKind> parse_experiment_kind(std::string_view s) {
    for (auto k : {ExperimentKind::prompt_variants, ExperimentKind::size_sweep,
                   ExperimentKind::ablation, ExperimentKind::unseen_validation}) {
        if (s == to_string(k)) return k;
    }
    return std::nullopt;
}

std::string_view to_string(CellStatus s) {
    switch (s) {
        case CellStatus::pending: return "pending";
        case CellStatus::succeeded: return "succeeded";
        case CellStatus::failed: return "failed";
    }
    return "?";
}

namespace {

std::optional<CellStatus> parse_cell_status(std::string_view s) {
    for (auto c : {CellStatus::pending, CellStatus::succeeded, CellStatus::failed}) {
        if (s == to_string(c)) return c;
    }
    return std::nullopt;
}

ExperimentPlan normalized(ExperimentPlan plan) {
    switch (plan.kind) {
        case ExperimentKind::prompt_variants:
            if (plan.variants.empty()) {
                plan.variants = {PromptVariant::P1, PromptVariant::P2, PromptVariant::P3,
                                 PromptVariant::P4};
            }
            plan.masks.clear();
            plan.sizes.clear();
            break;
        case ExperimentKind::ablation:
            if (plan.masks.empty()) plan.masks = {"all", "MF1", "MF2", "MF3", "MF4", "MF5"};
            plan.variants.clear();
            plan.sizes.clear();
            break;
        case ExperimentKind::size_sweep:
            plan.variants.clear();
            plan.masks.clear();
            break;
        case ExperimentKind::unseen_validation:
            plan.variants.clear();
            plan.masks.clear();
            plan.sizes.clear();
            break;
    }
    for (auto& m : plan.masks) {
        if (auto parsed = parse_mask(m)) m = mask_name(*parsed);
    }
    return plan;
}

using CellSpec = PlannedCell;

struct Context {
    const ExperimentPlan& plan;
    const Corpus& corpus;
    Backend& backend;
    const CampaignOptions& options;
    fs::path dir;
    std::vector<Entry> test;
    std::optional<Corpus> holdout;
};

void save_cell(const CellResult& cell) {
    write_file_atomic(cell.dir / "cell.json", cell.to_json().dump(2));
}

void save_partial(const fs::path& path, const std::vector<std::vector<PredictionRecord>>& runs) {
    auto j = nlohmann::json::array();
    for (const auto& run : runs) {
        auto arr = nlohmann::json::array();
        for (const auto& p : run) arr.push_back({{"study_id", p.study_id}, {"raw_text", p.raw_text}});
        j.push_back(std::move(arr));
    }
    write_file_atomic(path, j.dump());
}

std::vector<std::vector<PredictionRecord>> load_partial(const fs::path& path) {
    std::vector<std::vector<PredictionRecord>> runs;
    if (!fs::exists(path)) return runs;
    for (const auto& run : nlohmann::json::parse(read_file(path))) {
        std::vector<PredictionRecord> recs;
        for (const auto& p : run) {
            recs.push_back(parse_prediction(p.at("study_id").get<std::string>(),
                                            p.at("raw_text").get<std::string>()));
        }
        runs.push_back(std::move(recs));
    }
    return runs;
}

CellResult run_cell(const CellSpec& spec, Context& ctx) {
    CellResult cell;
    cell.key = spec.key;
    cell.label = spec.label;
    cell.variant = std::string(to_string(spec.variant));
    cell.mask = mask_name(spec.mask);
    cell.dir = ctx.dir / "cells" / spec.key;
    fs::create_directories(cell.dir);

    std::optional<CellResult> prior;
    if (fs::exists(cell.dir / "cell.json")) {
        prior = CellResult::from_json(nlohmann::json::parse(read_file(cell.dir / "cell.json")));
        prior->dir = cell.dir;
        if (prior->status == CellStatus::succeeded && fs::exists(cell.dir / "report.json")) {
            prior->report =
                EvalReport::from_json(nlohmann::json::parse(read_file(cell.dir / "report.json")));
            spdlog::info("cell {}: already complete, skipping", spec.key);
            return *prior;
        }
    }

    try {
        const auto& tmpl = builtin_template(spec.variant);
        auto train_entries = ctx.corpus.select(spec.train);
        auto records = build_training_records(train_entries, tmpl, spec.mask);
        auto training = export_training_file(records, cell.dir / "training.jsonl");
        if (ctx.holdout) guard_no_holdout(training, *ctx.holdout);
        std::optional<TrainingFile> validation;
        if (!spec.validation.empty()) {
            auto val_entries = ctx.corpus.select(spec.validation);
            auto val_records = build_training_records(val_entries, tmpl, spec.mask);
            validation = export_training_file(val_records, cell.dir / "validation.jsonl");
            if (ctx.holdout) guard_no_holdout(*validation, *ctx.holdout);
        }
        cell.training_records = training.record_count;
        cell.training_digest = training.digest;
        cell.validation_digest = validation ? validation->digest : "";
        cell.training_ids = training.study_ids;

        FineTuneJob job;
        if (prior && prior->job && prior->job->status != JobStatus::failed &&
            prior->training_digest == training.digest &&
            prior->validation_digest == cell.validation_digest) {
            spdlog::info("cell {}: resuming job {}", spec.key, prior->job->job_id);
            job = *prior->job;
        } else {
            spdlog::info("cell {}: submitting fine-tune on {} records", spec.key,
                         training.record_count);
            job = ctx.backend.create_finetune(training, validation ? &*validation : nullptr,
                                              ctx.plan.base_model);
        }
        cell.job = job;
        save_cell(cell);

        job = wait_for_job(ctx.backend, job, ctx.options.wait);
        cell.job = job;
        save_cell(cell);
        if (job.status != JobStatus::succeeded || !job.model) {
            throw BackendError(fmt::format("fine-tune job {} failed: {}", job.job_id,
                                           job.error.empty() ? "no reason given" : job.error));
        }

        EvalOptions eo;
        eo.tmpl = tmpl;
        eo.mask = spec.mask;
        eo.n_runs = ctx.plan.n_runs;
        eo.temperature = ctx.plan.temperature;
        eo.parallelism = ctx.options.parallelism;
        const auto partial_path = cell.dir / "partial_runs.json";
        eo.completed_runs = load_partial(partial_path);
        EvalReport report;
        try {
            report = evaluate_model(ctx.backend, *job.model, ctx.test, eo);
        } catch (const PartialReportError& e) {
            save_partial(partial_path, e.completed_runs());
            throw;
        }
        write_file_atomic(cell.dir / "report.json", report.to_json().dump(2));
        fs::remove(partial_path);
        cell.report = std::move(report);
        cell.status = CellStatus::succeeded;
        cell.error.clear();
    } catch (const Error& e) {
        cell.status = CellStatus::failed;
        cell.error = e.what();
        spdlog::error("cell {} failed: {}", spec.key, e.what());
    }
    save_cell(cell);
    return cell;
}

fs::path campaign_dir(const CampaignOptions& options, const std::string& digest) {
    return options.state_dir / "campaigns" / digest.substr(0, 16);
}

Context open_campaign(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                      const CampaignOptions& options, const Split& split) {
    Context ctx{plan, corpus, backend, options, campaign_dir(options, plan_digest(plan, corpus)),
                corpus.select(split.test), std::nullopt};
    if (plan.unseen_path) ctx.holdout = load_unseen(*plan.unseen_path);

    const auto summary = ctx.dir / "campaign.json";
    if (fs::exists(ctx.dir)) {
        if (options.force) {
            fs::remove_all(ctx.dir);
        } else if (!options.resume) {
            bool complete = false;
            if (fs::exists(summary)) {
                auto j = nlohmann::json::parse(read_file(summary));
                complete = j.value("all_succeeded", false);
            }
            if (!complete) {
                throw ValidationError(fmt::format(
                    "campaign {} already exists with unfinished cells; pass --resume to "
                    "continue it or --force to start over",
                    ctx.dir.string()));
            }
        }
    }
    fs::create_directories(ctx.dir / "cells");
    write_file_atomic(ctx.dir / "plan.json", normalized(plan).to_json().dump(2));
    return ctx;
}

CampaignResult finish(Context& ctx, std::vector<CellResult> cells) {
    CampaignResult result;
    result.kind = ctx.plan.kind;
    result.plan_digest = plan_digest(ctx.plan, ctx.corpus);
    result.dir = ctx.dir;
    result.cells = std::move(cells);
    return result;
}

void write_summary(const CampaignResult& result) {
    write_file_atomic(result.dir / "campaign.json", result.to_json().dump(2));
    if (result.kind == ExperimentKind::size_sweep) {
        write_file_atomic(result.dir / "curve.csv", size_curve_csv(result.cells));
    } else if (result.kind == ExperimentKind::ablation) {
        write_file_atomic(result.dir / "table.txt", render_ablation_comparison(result.cells));
    } else if (result.kind == ExperimentKind::prompt_variants) {
        write_file_atomic(result.dir / "table.txt", render_results_table(result.cells));
    } else if (result.unseen) {
        write_file_atomic(result.dir / "table.txt", render_unseen(*result.unseen));
    }
}

std::string pct(double v) { return fmt::format("{:.1f}", 100.0 * v); }

std::string with_var(const std::optional<double>& mean, const std::optional<double>& var) {
    if (!mean) return "-";
    return fmt::format("{:.3f} ({:.3f})", *mean, var.value_or(0.0));
}

std::string render_rows(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& row : rows) {
        width.resize(std::max(width.size(), row.size()));
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    std::string out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::string line;
        for (std::size_t i = 0; i < rows[r].size(); ++i) {
            if (i) line += " | ";
            line += rows[r][i];
            if (i + 1 < rows[r].size()) line.append(width[i] - rows[r][i].size(), ' ');
        }
        out += line + "\n";
        if (r == 0) {
            std::string rule;
            for (std::size_t i = 0; i < width.size(); ++i) {
                if (i) rule += "-+-";
                rule.append(width[i], '-');
            }
            out += rule + "\n";
        }
    }
    return out;
}

std::vector<std::string> report_cells(const EvalReport& r) {
    return {pct(r.direction_coverage),
            r.direction_accuracy ? pct(*r.direction_accuracy) : "-",
            pct(r.rd_coverage),
            with_var(r.r_error_mean, r.r_error_var),
            with_var(r.d_error_mean, r.d_error_var)};
}

}  // namespace

nlohmann::json ExperimentPlan::to_json() const {
    nlohmann::json j = {{"kind", to_string(kind)},
                        {"name", name},
                        {"split",
                         {{"seed", split.seed},
                          {"counts", {split.counts.train, split.counts.validation,
                                      split.counts.test}}}},
                        {"base_model", base_model},
                        {"n_runs", n_runs},
                        {"temperature", temperature}};
    auto vars = nlohmann::json::array();
    for (auto v : variants) vars.push_back(to_string(v));
    j["variants"] = vars;
    j["masks"] = masks;
    j["sizes"] = sizes;
    j["unseen_path"] = unseen_path ? nlohmann::json(*unseen_path) : nlohmann::json(nullptr);
    j["exclude_category"] =
        exclude_category ? nlohmann::json(to_string(*exclude_category)) : nlohmann::json(nullptr);
    j["model"] = model ? model->to_json() : nlohmann::json(nullptr);
    return j;
}

ExperimentPlan ExperimentPlan::from_json(const nlohmann::json& j) {
    ExperimentPlan p;
    try {
        auto kind = j.at("kind").get<std::string>();
        auto k = parse_experiment_kind(kind);
        if (!k) {
            throw ValidationError("plan: unknown kind '" + kind +
                                  "' (expected prompt_variants, size_sweep, ablation or "
                                  "unseen_validation)");
        }
        p.kind = *k;
        p.name = j.value("name", std::string());
        if (j.contains("variants")) {
            for (const auto& v : j["variants"]) {
                auto parsed = parse_variant(v.get<std::string>());
                if (!parsed) throw ValidationError("plan: unknown variant " + v.dump());
                p.variants.push_back(*parsed);
            }
        }
        if (j.contains("masks")) p.masks = j["masks"].get<std::vector<std::string>>();
        if (j.contains("sizes")) p.sizes = j["sizes"].get<std::vector<std::size_t>>();
        if (j.contains("split")) {
            const auto& s = j["split"];
            p.split.seed = s.value("seed", std::uint64_t{0});
            if (s.contains("counts")) {
                auto c = s["counts"].get<std::vector<std::size_t>>();
                if (c.size() != 3) throw ValidationError("plan: split.counts needs 3 numbers");
                p.split.counts = {c[0], c[1], c[2]};
            }
        }
        p.base_model = j.value("base_model", p.base_model);
        p.n_runs = j.value("n_runs", p.n_runs);
        p.temperature = j.value("temperature", p.temperature);
        if (j.contains("unseen_path") && !j["unseen_path"].is_null()) {
            p.unseen_path = j["unseen_path"].get<std::string>();
        }
        if (j.contains("exclude_category")) {
            if (j["exclude_category"].is_null()) {
                p.exclude_category.reset();
            } else {
                auto c = parse_category(j["exclude_category"].get<std::string>());
                if (!c) throw ValidationError("plan: unknown exclude_category");
                p.exclude_category = *c;
            }
        }
        if (j.contains("model") && !j["model"].is_null()) p.model = ModelRef::from_json(j["model"]);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("plan: ") + e.what());
    }
    return normalized(std::move(p));
}

ExperimentPlan load_plan(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError("plan file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    auto plan = ExperimentPlan::from_json(j);
    if (plan.unseen_path && fs::path(*plan.unseen_path).is_relative()) {
        plan.unseen_path = (path.parent_path() / *plan.unseen_path).lexically_normal().string();
    }
    return plan;
}

void validate_plan(const ExperimentPlan& raw, std::size_t corpus_size) {
    auto plan = normalized(raw);
    const auto& c = plan.split.counts;
    if (c.total() != corpus_size) {
        throw ValidationError(fmt::format("plan: split counts {}+{}+{} do not match corpus size {}",
                                          c.train, c.validation, c.test, corpus_size));
    }
    if (c.test == 0) throw ValidationError("plan: test split is empty");
    if (plan.n_runs == 0) throw ValidationError("plan: n_runs must be positive");
    if (!(plan.temperature >= 0)) throw ValidationError("plan: temperature must be >= 0");
    const std::size_t pool = c.train + c.validation;
    switch (plan.kind) {
        case ExperimentKind::size_sweep: {
            if (plan.sizes.empty()) throw ValidationError("plan: size_sweep needs sizes");
            for (std::size_t i = 0; i < plan.sizes.size(); ++i) {
                auto n = plan.sizes[i];
                if (n < 10 || n > pool) {
                    throw ValidationError(fmt::format(
                        "plan: size {} outside [10, {}] (provider minimum is 10 records)", n,
                        pool));
                }
                if (i > 0 && n <= plan.sizes[i - 1]) {
                    throw ValidationError("plan: sizes must be strictly ascending");
                }
            }
            break;
        }
        case ExperimentKind::ablation: {
            std::set<std::string> seen;
            for (const auto& m : plan.masks) {
                if (!parse_mask(m)) {
                    throw ValidationError("plan: unknown mask '" + m +
                                          "' (expected all or MF1..MF5)");
                }
                if (!seen.insert(m).second) throw ValidationError("plan: duplicate mask " + m);
            }
            break;
        }
        case ExperimentKind::prompt_variants: {
            std::set<PromptVariant> seen(plan.variants.begin(), plan.variants.end());
            if (seen.size() != plan.variants.size()) {
                throw ValidationError("plan: duplicate variant");
            }
            break;
        }
        case ExperimentKind::unseen_validation:
            if (!plan.unseen_path) throw ValidationError("plan: unseen_validation needs unseen_path");
            break;
    }
    if (plan.kind != ExperimentKind::unseen_validation && c.train < 10) {
        throw ValidationError("plan: training split below the provider minimum of 10 records");
    }
}

std::string plan_digest(const ExperimentPlan& plan, const Corpus& corpus) {
    auto j = normalized(plan).to_json();
    j.erase("name");
    return sha256_hex(j.dump() + "|" + corpus.provenance());
}

nlohmann::json CellResult::to_json() const {
    return {{"key", key},
            {"label", label},
            {"status", to_string(status)},
            {"error", error},
            {"variant", variant},
            {"mask", mask},
            {"training_records", training_records},
            {"training_digest", training_digest},
            {"validation_digest", validation_digest},
            {"training_ids", training_ids},
            {"job", job ? job->to_json() : nlohmann::json(nullptr)},
            {"report", report ? nlohmann::json("report.json") : nlohmann::json(nullptr)},
            {"dir", dir.string()}};
}

CellResult CellResult::from_json(const nlohmann::json& j) {
    CellResult c;
    c.key = j.at("key").get<std::string>();
    c.label = j.value("label", c.key);
    c.status = parse_cell_status(j.value("status", std::string("pending")))
                   .value_or(CellStatus::pending);
    c.error = j.value("error", std::string());
    c.variant = j.value("variant", std::string());
    c.mask = j.value("mask", std::string());
    c.training_records = j.value("training_records", std::size_t{0});
    c.training_digest = j.value("training_digest", std::string());
    c.validation_digest = j.value("validation_digest", std::string());
    c.training_ids = j.value("training_ids", std::vector<std::string>{});
    if (j.contains("job") && !j["job"].is_null()) c.job = FineTuneJob::from_json(j["job"]);
    c.dir = j.value("dir", std::string());
    return c;
}

bool CampaignResult::all_succeeded() const {
    return std::all_of(cells.begin(), cells.end(),
                       [](const CellResult& c) { return c.status == CellStatus::succeeded; });
}

nlohmann::json CampaignResult::to_json() const {
    auto cj = nlohmann::json::array();
    for (const auto& c : cells) {
        auto j = c.to_json();
        j.erase("training_ids");
        if (c.report) j["report"] = (fs::path("cells") / c.key / "report.json").string();
        cj.push_back(std::move(j));
    }
    nlohmann::json j = {{"kind", to_string(kind)},
                        {"plan_digest", plan_digest},
                        {"dir", dir.string()},
                        {"all_succeeded", all_succeeded()},
                        {"cells", cj}};
    if (unseen) {
        j["unseen"] = {{"full", "unseen-full.json"},
                       {"excluded", unseen->excluded ? nlohmann::json("unseen-excluded.json")
                                                     : nlohmann::json(nullptr)},
                       {"naive", "unseen-naive.json"},
                       {"n_excluded", unseen->n_excluded}};
    }
    return j;
}

std::vector<std::size_t> size_sweep_indices(const Split& split, std::size_t n) {
    auto pool = split.train;
    if (n > split.train.size()) pool = merge_validation_into_train(split).train;
    if (n > pool.size()) {
        throw ValidationError(fmt::format("size {} exceeds the {} available training entries", n,
                                          pool.size()));
    }
    return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<PlannedCell> plan_cells(const ExperimentPlan& raw, const Corpus& corpus) {
    auto plan = normalized(raw);
    validate_plan(plan, corpus.size());
    auto split = split_corpus(corpus, plan.split);
    std::vector<PlannedCell> cells;
    switch (plan.kind) {
        case ExperimentKind::prompt_variants:
            for (auto v : plan.variants) {
                cells.push_back({"variant-" + std::string(to_string(v)),
                                 "M" + std::string(to_string(v)), v, FeatureMask::all(),
                                 split.train, split.validation, ""});
            }
            break;
        case ExperimentKind::size_sweep:
            for (auto n : plan.sizes) {
                auto train = size_sweep_indices(split, n);
                std::set<std::size_t> used(train.begin(), train.end());
                std::vector<std::size_t> validation;
                for (auto i : split.validation) {
                    if (!used.count(i)) validation.push_back(i);
                }
                cells.push_back({fmt::format("size-{}", n), fmt::format("N={}", n),
                                 PromptVariant::P4, FeatureMask::all(), std::move(train),
                                 std::move(validation), ""});
            }
            break;
        case ExperimentKind::ablation:
            for (const auto& m : plan.masks) {
                auto mask = *parse_mask(m);
                auto name = mask_name(mask);
                cells.push_back({"mask-" + name, name == "all" ? "MP4" : name, PromptVariant::P4,
                                 mask, split.train, split.validation, ""});
            }
            break;
        case ExperimentKind::unseen_validation:
            if (!plan.model) {
                cells.push_back({"unseen-train", "MP4", PromptVariant::P4, FeatureMask::all(),
                                 merge_validation_into_train(split).train, {}, ""});
            }
            break;
    }
    for (auto& cell : cells) {
        auto entries = corpus.select(cell.train);
        auto records = build_training_records(entries, builtin_template(cell.variant), cell.mask);
        cell.training_digest = sha256_hex(training_jsonl(records));
    }
    return cells;
}

namespace {

CampaignResult run_cells(const ExperimentPlan& raw, ExperimentKind kind, const Corpus& corpus,
                         Backend& backend, const CampaignOptions& options) {
    auto plan = normalized(raw);
    if (plan.kind != kind) {
        throw ValidationError(fmt::format("plan kind is {}, expected {}", to_string(plan.kind),
                                          to_string(kind)));
    }
    auto cells = plan_cells(plan, corpus);
    auto split = split_corpus(corpus, plan.split);
    auto ctx = open_campaign(plan, corpus, backend, options, split);
    std::vector<CellResult> results;
    for (const auto& cell : cells) results.push_back(run_cell(cell, ctx));
    auto result = finish(ctx, std::move(results));
    write_summary(result);
    return result;
}

}  // namespace

CampaignResult run_prompt_variant_experiment(const ExperimentPlan& plan, const Corpus& corpus,
                                             Backend& backend, const CampaignOptions& options) {
    return run_cells(plan, ExperimentKind::prompt_variants, corpus, backend, options);
}

CampaignResult run_size_sweep(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                              const CampaignOptions& options) {
    return run_cells(plan, ExperimentKind::size_sweep, corpus, backend, options);
}

CampaignResult run_ablation(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                            const CampaignOptions& options) {
    return run_cells(plan, ExperimentKind::ablation, corpus, backend, options);
}

UnseenReports run_unseen_validation(Backend& backend, const ModelRef& model, const Corpus& unseen,
                                    std::span<const Entry> train,
                                    std::optional<InterventionCategory> exclude,
                                    const EvalOptions& options) {
    if (unseen.empty()) throw ValidationError("unseen corpus is empty");
    for (const auto& e : unseen.entries()) {
        if (!e.holdout) {
            throw ValidationError("unseen entry '" + e.study.study_id +
                                  "' is not flagged holdout; load it with load_unseen");
        }
    }
    UnseenReports out;
    out.full = evaluate_model(backend, model, unseen.entries(), options);
    if (exclude) {
        auto kept = exclude_category(unseen, *exclude);
        out.n_excluded = unseen.size() - kept.size();
        if (kept.empty()) {
            throw ValidationError(fmt::format("no unseen entries left after excluding category {}",
                                              to_string(*exclude)));
        }
        out.excluded = evaluate_model(backend, model, kept.entries(), options);
    }
    out.naive = evaluate_naive(effectstats::naive_baseline(train), unseen.entries());
    return out;
}

namespace {

CampaignResult run_unseen_campaign(const ExperimentPlan& raw, const Corpus& corpus,
                                   Backend& backend, const CampaignOptions& options) {
    auto plan = normalized(raw);
    auto planned = plan_cells(plan, corpus);
    auto split = split_corpus(corpus, plan.split);
    auto ctx = open_campaign(plan, corpus, backend, options, split);
    auto merged = merge_validation_into_train(split);
    std::vector<CellResult> cells;
    std::optional<ModelRef> model = plan.model;
    for (const auto& cell : planned) {
        cells.push_back(run_cell(cell, ctx));
        if (cells.back().status == CellStatus::succeeded) model = cells.back().job->model;
    }
    auto result = finish(ctx, std::move(cells));
    if (model) {
        EvalOptions eo;
        eo.n_runs = plan.n_runs;
        eo.temperature = plan.temperature;
        eo.parallelism = options.parallelism;
        auto train = corpus.select(merged.train);
        result.unseen =
            run_unseen_validation(backend, *model, *ctx.holdout, train, plan.exclude_category, eo);
        write_file_atomic(ctx.dir / "unseen-full.json", result.unseen->full.to_json().dump(2));
        if (result.unseen->excluded) {
            write_file_atomic(ctx.dir / "unseen-excluded.json",
                              result.unseen->excluded->to_json().dump(2));
        }
        write_file_atomic(ctx.dir / "unseen-naive.json", result.unseen->naive.to_json().dump(2));
    }
    write_summary(result);
    return result;
}

}  // namespace

CampaignResult run_campaign(const ExperimentPlan& plan, const Corpus& corpus, Backend& backend,
                            const CampaignOptions& options) {
    switch (plan.kind) {
        case ExperimentKind::prompt_variants:
            return run_prompt_variant_experiment(plan, corpus, backend, options);
        case ExperimentKind::size_sweep: return run_size_sweep(plan, corpus, backend, options);
        case ExperimentKind::ablation: return run_ablation(plan, corpus, backend, options);
        case ExperimentKind::unseen_validation:
            return run_unseen_campaign(plan, corpus, backend, options);
    }
    throw ValidationError("unknown plan kind");
}

std::string render_results_table(const std::vector<CellResult>& cells) {
    std::vector<std::vector<std::string>> rows = {{"Model", "Dir. coverage (%)", "Accuracy (%)",
                                                   "r/d coverage (%)", "r error (var)",
                                                   "d error (var)"}};
    for (const auto& c : cells) {
        std::vector<std::string> row = {c.label};
        if (c.report) {
            auto cells_ = report_cells(*c.report);
            row.insert(row.end(), cells_.begin(), cells_.end());
        } else {
            auto status = std::string(to_string(c.status));
            row.insert(row.end(), {status, "-", "-", "-", "-"});
        }
        rows.push_back(std::move(row));
    }
    return render_rows(rows);
}

std::vector<std::string> cells_beating_baseline(const std::vector<CellResult>& cells) {
    std::vector<std::string> out;
    auto base = std::find_if(cells.begin(), cells.end(),
                             [](const CellResult& c) { return c.key == "mask-all"; });
    if (base == cells.end() || !base->report || !base->report->r_error_mean ||
        !base->report->d_error_mean) {
        return out;
    }
    const auto& b = *base->report;
    for (const auto& c : cells) {
        if (c.key == base->key || !c.report || !c.report->r_error_mean || !c.report->d_error_mean) {
            continue;
        }
        if (std::fabs(*c.report->r_error_mean) < std::fabs(*b.r_error_mean) &&
            std::fabs(*c.report->d_error_mean) < std::fabs(*b.d_error_mean)) {
            out.push_back(c.key);
        }
    }
    return out;
}

std::string render_ablation_comparison(const std::vector<CellResult>& cells) {
    auto winners = cells_beating_baseline(cells);
    auto base = std::find_if(cells.begin(), cells.end(),
                             [](const CellResult& c) { return c.key == "mask-all"; });
    const EvalReport* b = base != cells.end() && base->report ? &*base->report : nullptr;
    auto delta = [](const std::optional<double>& x, const std::optional<double>* y) {
        if (!x || !y || !*y) return std::string("-");
        return fmt::format("{:+.3f}", std::fabs(*x) - std::fabs(**y));
    };
    std::vector<std::vector<std::string>> rows = {{"Model", "Mask", "Accuracy (%)",
                                                   "r error (var)", "|r err| vs base",
                                                   "d error (var)", "|d err| vs base",
                                                   "Beats baseline"}};
    for (const auto& c : cells) {
        if (!c.report) {
            rows.push_back({c.label, c.mask, std::string(to_string(c.status)), "-", "-", "-", "-",
                            ""});
            continue;
        }
        const auto& r = *c.report;
        bool wins = std::find(winners.begin(), winners.end(), c.key) != winners.end();
        rows.push_back(
            {c.label, c.mask, r.direction_accuracy ? pct(*r.direction_accuracy) : "-",
             with_var(r.r_error_mean, r.r_error_var),
             c.key == "mask-all" ? "baseline" : delta(r.r_error_mean, b ? &b->r_error_mean : nullptr),
             with_var(r.d_error_mean, r.d_error_var),
             c.key == "mask-all" ? "baseline" : delta(r.d_error_mean, b ? &b->d_error_mean : nullptr),
             wins ? "yes" : ""});
    }
    return render_rows(rows);
}

std::string size_curve_csv(const std::vector<CellResult>& cells) {
    std::string out =
        "n,status,direction_accuracy,r_error_mean,r_error_var,d_error_mean,d_error_var\n";
    auto num = [](const std::optional<double>& v) {
        return v ? fmt::format("{:.6f}", *v) : std::string();
    };
    for (const auto& c : cells) {
        std::vector<std::string> row = {c.key.starts_with("size-") ? c.key.substr(5) : c.key,
                                        std::string(to_string(c.status))};
        if (c.report) {
            const auto& r = *c.report;
            row.insert(row.end(), {num(r.direction_accuracy), num(r.r_error_mean),
                                   num(r.r_error_var), num(r.d_error_mean), num(r.d_error_var)});
        } else {
            row.insert(row.end(), {"", "", "", "", ""});
        }
        out += csv::join(row) + "\n";
    }
    return out;
}

std::string render_unseen(const UnseenReports& u) {
    std::vector<std::vector<std::string>> rows = {{"Set", "Items", "Dir. coverage (%)",
                                                   "Accuracy (%)", "r/d coverage (%)",
                                                   "r error (var)", "d error (var)"}};
    auto add = [&](std::string name, const EvalReport& r) {
        std::vector<std::string> row = {std::move(name), std::to_string(r.n_test)};
        auto cs = report_cells(r);
        row.insert(row.end(), cs.begin(), cs.end());
        rows.push_back(std::move(row));
    };
    add("unseen (all)", u.full);
    if (u.excluded) add(fmt::format("unseen (minus {} excluded)", u.n_excluded), *u.excluded);
    add("naive baseline", u.naive);
    return render_rows(rows);
}

}  // namespace nudgecast
