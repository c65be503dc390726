#include "nudgecast/evalkit.hpp"

#include <fmt/format.h>

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <regex>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "nudgecast/csv.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace {

std::string normalize(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        auto rest = text.substr(i);
        if (rest.starts_with("\xE2\x88\x92")) {  // U+2212 minus sign
            out.push_back('-');
            i += 2;
        } else if (rest.starts_with("\xE2\x80\x99") || rest.starts_with("\xE2\x80\x98")) {
            out.push_back('\'');
            i += 2;
        } else if (rest.starts_with("\xE2\x89\x88")) {  // U+2248 almost equal
            out.push_back('=');
            i += 2;
        } else {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
        }
    }
    return out;
}

constexpr const char* kNumber = R"(([-+]?(?:\d+(?:\.\d+)?|\.\d+)(?:e[-+]?\d+)?))";
constexpr const char* kConnector =
    R"(\s*(?:=|:|~|\bis\b|\bof\b|\bwas\b|\bwould be\b|\bwill be\b)\s*(?:(?:approximately|about|around|roughly)\s+)?)";

const std::regex& r_pattern() {
    static const std::regex re(
        std::string(R"((?:^|[^a-z0-9_'])(?:pearson'?s?\s+)?(?:r(?:[- ]?(?:coefficient|value))?|correlation(?:\s+coefficient)?(?:\s*\(r\))?))") +
            kConnector + kNumber,
        std::regex::ECMAScript | std::regex::optimize);
    return re;
}

const std::regex& d_pattern() {
    static const std::regex re(
        std::string(R"((?:cohen'?s\s*d|(?:^|[^a-z0-9_'])d)(?:[- ]?value)?)") + kConnector +
            kNumber,
        std::regex::ECMAScript | std::regex::optimize);
    return re;
}

const std::regex& labelled_direction() {
    static const std::regex re(R"(direction[^.;\n]{0,40}?\b(positive|negative)\b)",
                               std::regex::ECMAScript | std::regex::optimize);
    return re;
}

const std::regex& bare_direction() {
    static const std::regex re(R"(\b(positive|negative)\b)",
                               std::regex::ECMAScript | std::regex::optimize);
    return re;
}

std::optional<double> first_number(const std::string& text, const std::regex& re) {
    std::smatch m;
    if (!std::regex_search(text, m, re)) return std::nullopt;
    try {
        double v = std::stod(m[1].str());
        if (!std::isfinite(v)) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

double mean(const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double population_variance(const std::vector<double>& xs) {
    const double mu = mean(xs);
    double s = 0;
    for (double x : xs) s += (x - mu) * (x - mu);
    return s / static_cast<double>(xs.size());
}

nlohmann::json opt(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> get_opt(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
}

std::string cell(const std::optional<double>& v) {
    return v ? fmt::format("{:.6f}", *v) : std::string();
}

}  // namespace

PredictionRecord parse_prediction(std::string study_id, std::string_view raw_text) {
    PredictionRecord rec;
    rec.study_id = std::move(study_id);
    rec.raw_text = std::string(raw_text);
    try {
        const auto text = normalize(raw_text);
        std::smatch m;
        if (std::regex_search(text, m, labelled_direction()) ||
            std::regex_search(text, m, bare_direction())) {
            rec.direction = m[1].str() == "positive" ? Direction::positive : Direction::negative;
        }
        rec.r_pred = first_number(text, r_pattern());
        rec.d_pred = first_number(text, d_pattern());
    } catch (const std::exception&) {
        // regex engine limits on pathological input: leave fields absent
    }
    return rec;
}

PredictionRecord parse_prediction(std::string_view raw_text) {
    return parse_prediction(std::string(), raw_text);
}

double signed_magnitude_error(double pred, double actual) {
    return std::fabs(pred) - std::fabs(actual);
}

nlohmann::json RunAggregate::to_json() const {
    return {{"n_items", n_items},
            {"direction_covered", direction_covered},
            {"direction_correct", direction_correct},
            {"rd_covered", rd_covered},
            {"r_covered", r_covered},
            {"d_covered", d_covered},
            {"direction_coverage", direction_coverage},
            {"direction_accuracy", opt(direction_accuracy)},
            {"rd_coverage", rd_coverage},
            {"r_error_mean", opt(r_error_mean)},
            {"d_error_mean", opt(d_error_mean)}};
}

RunAggregate RunAggregate::from_json(const nlohmann::json& j) {
    RunAggregate a;
    a.n_items = j.at("n_items").get<std::size_t>();
    a.direction_covered = j.at("direction_covered").get<std::size_t>();
    a.direction_correct = j.at("direction_correct").get<std::size_t>();
    a.rd_covered = j.at("rd_covered").get<std::size_t>();
    a.r_covered = j.value("r_covered", std::size_t{0});
    a.d_covered = j.value("d_covered", std::size_t{0});
    a.direction_coverage = j.at("direction_coverage").get<double>();
    a.direction_accuracy = get_opt(j, "direction_accuracy");
    a.rd_coverage = j.at("rd_coverage").get<double>();
    a.r_error_mean = get_opt(j, "r_error_mean");
    a.d_error_mean = get_opt(j, "d_error_mean");
    return a;
}

RunAggregate evaluate_run(std::span<const PredictionRecord> records,
                          std::span<const Entry> truths) {
    if (records.size() != truths.size()) {
        throw ValidationError(fmt::format("evaluate_run: {} predictions for {} test items",
                                          records.size(), truths.size()));
    }
    std::unordered_map<std::string_view, const Entry*> by_id;
    for (const auto& t : truths) {
        if (!by_id.emplace(t.study.study_id, &t).second) {
            throw ValidationError("evaluate_run: duplicate test id '" + t.study.study_id + "'");
        }
    }
    RunAggregate a;
    a.n_items = records.size();
    double r_sum = 0, d_sum = 0;
    std::unordered_set<std::string_view> seen;
    for (const auto& rec : records) {
        auto it = by_id.find(rec.study_id);
        if (it == by_id.end()) {
            throw ValidationError("evaluate_run: prediction for unknown study '" + rec.study_id +
                                  "'");
        }
        if (!seen.insert(rec.study_id).second) {
            throw ValidationError("evaluate_run: two predictions for '" + rec.study_id + "'");
        }
        const auto& truth = it->second->outcome;
        if (rec.direction) {
            ++a.direction_covered;
            if (*rec.direction == truth.direction) ++a.direction_correct;
        }
        if (rec.r_pred && rec.d_pred) ++a.rd_covered;
        if (rec.r_pred) {
            ++a.r_covered;
            r_sum += signed_magnitude_error(*rec.r_pred, truth.r);
        }
        if (rec.d_pred) {
            ++a.d_covered;
            d_sum += signed_magnitude_error(*rec.d_pred, truth.d);
        }
    }
    if (a.n_items > 0) {
        const auto n = static_cast<double>(a.n_items);
        a.direction_coverage = static_cast<double>(a.direction_covered) / n;
        a.rd_coverage = static_cast<double>(a.rd_covered) / n;
    }
    if (a.direction_covered > 0) {
        a.direction_accuracy =
            static_cast<double>(a.direction_correct) / static_cast<double>(a.direction_covered);
    }
    if (a.r_covered > 0) a.r_error_mean = r_sum / static_cast<double>(a.r_covered);
    if (a.d_covered > 0) a.d_error_mean = d_sum / static_cast<double>(a.d_covered);
    return a;
}

EvalReport aggregate_runs(std::vector<RunAggregate> runs) {
    EvalReport rep;
    rep.n_runs = runs.size();
    if (!runs.empty()) rep.n_test = runs.front().n_items;
    std::vector<double> cov, acc, rd, r_err, d_err;
    for (const auto& run : runs) {
        cov.push_back(run.direction_coverage);
        rd.push_back(run.rd_coverage);
        if (run.direction_accuracy) acc.push_back(*run.direction_accuracy);
        if (run.r_error_mean) r_err.push_back(*run.r_error_mean);
        if (run.d_error_mean) d_err.push_back(*run.d_error_mean);
    }
    if (!cov.empty()) {
        rep.direction_coverage = mean(cov);
        rep.rd_coverage = mean(rd);
    }
    if (!acc.empty()) rep.direction_accuracy = mean(acc);
    if (!r_err.empty()) {
        rep.r_error_mean = mean(r_err);
        rep.r_error_var = population_variance(r_err);
    }
    if (!d_err.empty()) {
        rep.d_error_mean = mean(d_err);
        rep.d_error_var = population_variance(d_err);
    }
    rep.per_run = std::move(runs);
    return rep;
}

nlohmann::json EvalReport::to_json() const {
    auto runs = nlohmann::json::array();
    for (const auto& r : per_run) runs.push_back(r.to_json());
    return {{"schema", kEvalReportSchema},
            {"model_id", model_id},
            {"variant", variant},
            {"mask", mask},
            {"temperature", temperature},
            {"n_test", n_test},
            {"n_runs", n_runs},
            {"direction_coverage", direction_coverage},
            {"direction_accuracy", opt(direction_accuracy)},
            {"rd_coverage", rd_coverage},
            {"r_error_mean", opt(r_error_mean)},
            {"r_error_var", opt(r_error_var)},
            {"d_error_mean", opt(d_error_mean)},
            {"d_error_var", opt(d_error_var)},
            {"per_run", std::move(runs)}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    auto problems = validate_report_json(j);
    if (!problems.empty()) throw ValidationError("invalid eval report: " + problems.front());
    EvalReport r;
    r.model_id = j.at("model_id").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.mask = j.at("mask").get<std::string>();
    r.temperature = j.at("temperature").get<double>();
    r.n_test = j.at("n_test").get<std::size_t>();
    r.n_runs = j.at("n_runs").get<std::size_t>();
    r.direction_coverage = j.at("direction_coverage").get<double>();
    r.direction_accuracy = get_opt(j, "direction_accuracy");
    r.rd_coverage = j.at("rd_coverage").get<double>();
    r.r_error_mean = get_opt(j, "r_error_mean");
    r.r_error_var = get_opt(j, "r_error_var");
    r.d_error_mean = get_opt(j, "d_error_mean");
    r.d_error_var = get_opt(j, "d_error_var");
    for (const auto& run : j.at("per_run")) r.per_run.push_back(RunAggregate::from_json(run));
    return r;
}

std::vector<std::string> validate_report_json(const nlohmann::json& j) {
    std::vector<std::string> problems;
    if (!j.is_object()) return {"report is not a JSON object"};
    if (j.value("schema", std::string()) != kEvalReportSchema) {
        problems.push_back(fmt::format("schema must be '{}'", kEvalReportSchema));
    }
    for (const char* key : {"model_id", "variant", "mask"}) {
        if (!j.contains(key) || !j[key].is_string()) {
            problems.push_back(fmt::format("'{}' must be a string", key));
        }
    }
    for (const char* key : {"n_test", "n_runs"}) {
        if (!j.contains(key) || !j[key].is_number_unsigned()) {
            problems.push_back(fmt::format("'{}' must be a non-negative integer", key));
        }
    }
    if (!j.contains("temperature") || !j["temperature"].is_number() ||
        j["temperature"].get<double>() < 0) {
        problems.push_back("'temperature' must be a number >= 0");
    }
    auto fraction = [&](const nlohmann::json& obj, const char* key, bool nullable,
                        const std::string& where) {
        if (!obj.contains(key)) {
            problems.push_back(fmt::format("{}'{}' is missing", where, key));
            return;
        }
        const auto& v = obj[key];
        if (v.is_null() && nullable) return;
        if (!v.is_number() || v.get<double>() < 0 || v.get<double>() > 1) {
            problems.push_back(fmt::format("{}'{}' must be a fraction in [0, 1]", where, key));
        }
    };
    auto real = [&](const nlohmann::json& obj, const char* key, bool non_negative,
                    const std::string& where) {
        if (!obj.contains(key)) {
            problems.push_back(fmt::format("{}'{}' is missing", where, key));
            return;
        }
        const auto& v = obj[key];
        if (v.is_null()) return;
        if (!v.is_number() || (non_negative && v.get<double>() < 0)) {
            problems.push_back(fmt::format("{}'{}' must be {}", where, key,
                                           non_negative ? "a number >= 0" : "a number or null"));
        }
    };
    fraction(j, "direction_coverage", false, "");
    fraction(j, "direction_accuracy", true, "");
    fraction(j, "rd_coverage", false, "");
    real(j, "r_error_mean", false, "");
    real(j, "r_error_var", true, "");
    real(j, "d_error_mean", false, "");
    real(j, "d_error_var", true, "");
    if (!j.contains("per_run") || !j["per_run"].is_array()) {
        problems.push_back("'per_run' must be an array");
    } else {
        if (j.contains("n_runs") && j["n_runs"].is_number_unsigned() &&
            j["per_run"].size() != j["n_runs"].get<std::size_t>()) {
            problems.push_back("'per_run' length must equal 'n_runs'");
        }
        for (std::size_t i = 0; i < j["per_run"].size(); ++i) {
            const auto& run = j["per_run"][i];
            auto where = fmt::format("per_run[{}].", i);
            if (!run.is_object()) {
                problems.push_back(where + " must be an object");
                continue;
            }
            fraction(run, "direction_coverage", false, where);
            fraction(run, "direction_accuracy", true, where);
            fraction(run, "rd_coverage", false, where);
            real(run, "r_error_mean", false, where);
            real(run, "d_error_mean", false, where);
            if (run.contains("direction_coverage") && run["direction_coverage"] == 0 &&
                run.contains("direction_accuracy") && !run["direction_accuracy"].is_null()) {
                problems.push_back(where + "'direction_accuracy' must be null at zero coverage");
            }
        }
    }
    return problems;
}

std::string report_csv_header() {
    return "label,model_id,variant,mask,temperature,n_test,n_runs,direction_coverage,"
           "direction_accuracy,rd_coverage,r_error_mean,r_error_var,d_error_mean,d_error_var";
}

std::string report_csv_row(const EvalReport& r, std::string_view label) {
    return csv::join({std::string(label), r.model_id, r.variant, r.mask,
                      fmt::format("{}", r.temperature), std::to_string(r.n_test),
                      std::to_string(r.n_runs), fmt::format("{:.6f}", r.direction_coverage),
                      cell(r.direction_accuracy), fmt::format("{:.6f}", r.rd_coverage),
                      cell(r.r_error_mean), cell(r.r_error_var), cell(r.d_error_mean),
                      cell(r.d_error_var)});
}

std::vector<PredictionRecord> infer_run(Backend& backend, const ModelRef& model,
                                        std::span<const Entry> test, const EvalOptions& options,
                                        std::size_t run_index) {
    std::vector<PredictionRecord> out(test.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::atomic<bool> failed{false};

    auto worker = [&] {
        while (!failed.load()) {
            auto i = next.fetch_add(1);
            if (i >= test.size()) return;
            const auto& study = test[i].study;
            try {
                auto prompt = render_prompt(options.tmpl, study, options.mask);
                CompletionOptions co;
                co.temperature = options.temperature;
                co.seed = run_index;
                co.prompt_id = fmt::format("{}#run{}", study.study_id, run_index);
                out[i] = parse_prediction(study.study_id, backend.complete(model, prompt, co));
            } catch (...) {
                std::lock_guard lock(failure_mu);
                if (!failure) failure = std::current_exception();
                failed = true;
            }
        }
    };
    const auto n_workers = std::max<std::size_t>(1, std::min(options.parallelism, test.size()));
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

EvalReport evaluate_model(Backend& backend, const ModelRef& model, std::span<const Entry> test,
                          const EvalOptions& options) {
    if (test.empty()) throw ValidationError("evaluate_model: empty test slice");
    if (options.n_runs == 0) throw ValidationError("evaluate_model: n_runs must be positive");
    if (options.completed_runs.size() > options.n_runs) {
        throw ValidationError("evaluate_model: more completed runs than requested");
    }
    std::vector<std::vector<PredictionRecord>> runs = options.completed_runs;
    for (std::size_t k = runs.size(); k < options.n_runs; ++k) {
        try {
            runs.push_back(infer_run(backend, model, test, options, k));
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception& e) {
            throw PartialReportError(
                fmt::format("run {} of {} failed: {}", k + 1, options.n_runs, e.what()), runs);
        }
    }
    std::vector<RunAggregate> aggregates;
    aggregates.reserve(runs.size());
    for (const auto& run : runs) aggregates.push_back(evaluate_run(run, test));
    auto report = aggregate_runs(std::move(aggregates));
    report.model_id = model.model_id;
    report.variant = std::string(to_string(options.tmpl.variant));
    report.mask = mask_name(options.mask);
    report.temperature = options.temperature;
    return report;
}

EvalReport evaluate_naive(const effectstats::NaiveBaseline& baseline,
                          std::span<const Entry> test) {
    const double sign = baseline.modal_direction == Direction::positive ? 1.0 : -1.0;
    std::vector<PredictionRecord> preds;
    preds.reserve(test.size());
    for (const auto& e : test) {
        PredictionRecord p;
        p.study_id = e.study.study_id;
        p.direction = baseline.modal_direction;
        p.r_pred = sign * baseline.mean_abs_r;
        p.d_pred = sign * baseline.mean_abs_d;
        preds.push_back(std::move(p));
    }
    auto report = aggregate_runs({evaluate_run(preds, test)});
    report.model_id = "naive-baseline";
    report.variant = "naive";
    report.mask = "all";
    return report;
}

}  // namespace nudgecast
