#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "nudgecast/digest.hpp"
#include "nudgecast/mock_backend.hpp"
#include "nudgecast/remote_backend.hpp"
#include "nudgecast/sweeps.hpp"
#include "stub_provider.hpp"
#include "synthetic.hpp"
#include "temp_dir.hpp"

using namespace nudgecast;
namespace fs = std::filesystem;

namespace {

const std::vector<std::size_t> kSizes = {10, 25, 75, 130, 144, 167};

ExperimentPlan size_plan() {
    ExperimentPlan p;
    p.kind = ExperimentKind::size_sweep;
    p.name = "sizes";
    p.sizes = kSizes;
    p.n_runs = 2;
    return p;
}

CampaignOptions fast_options(const fs::path& state) {
    CampaignOptions o;
    o.state_dir = state;
    o.wait = {std::chrono::milliseconds(0), std::chrono::seconds(60)};
    o.parallelism = 4;
    return o;
}

RemoteConfig stub_config(const testing::StubProvider& stub, const fs::path& ledger) {
    RemoteConfig c;
    c.base_url = stub.base_url();
    c.api_key = "k";
    c.retry.initial_backoff = std::chrono::milliseconds(1);
    c.requests_per_second = 0;
    c.ledger_path = ledger;
    return c;
}

std::set<std::string> lines_of(const std::string& text) {
    std::set<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.insert(line);
    }
    return out;
}

bool subset(const std::set<std::string>& a, const std::set<std::string>& b) {
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace

TEST_CASE("plan validation rejects unrunnable sizes and splits") {
    ExperimentPlan p = size_plan();
    CHECK_NOTHROW(validate_plan(p, 208));
    p.sizes = {9, 25};
    try {
        validate_plan(p, 208);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()) ==
              "plan: size 9 outside [10, 167] (provider minimum is 10 records)");
    }
    p.sizes = {10, 168};
    CHECK_THROWS_AS(validate_plan(p, 208), ValidationError);
    p.sizes = {25, 10};
    CHECK_THROWS_AS(validate_plan(p, 208), ValidationError);
    CHECK_THROWS_AS(validate_plan(size_plan(), 207), ValidationError);

    ExperimentPlan abl;
    abl.kind = ExperimentKind::ablation;
    abl.masks = {"all", "MF9"};
    CHECK_THROWS_AS(validate_plan(abl, 208), ValidationError);
    abl.masks = {"all", "all"};
    CHECK_THROWS_AS(validate_plan(abl, 208), ValidationError);

    ExperimentPlan unseen;
    unseen.kind = ExperimentKind::unseen_validation;
    CHECK_THROWS_AS(validate_plan(unseen, 208), ValidationError);
}

TEST_CASE("plan JSON round trips with defaults filled") {
    auto j = nlohmann::json::parse(R"({"kind":"ablation","name":"abl","n_runs":3})");
    auto p = ExperimentPlan::from_json(j);
    CHECK(p.kind == ExperimentKind::ablation);
    CHECK(p.n_runs == 3);
    CHECK(p.split.counts == SplitCounts{144, 23, 41});
    auto back = ExperimentPlan::from_json(p.to_json());
    CHECK(back.to_json() == p.to_json());
    CHECK_THROWS_AS(ExperimentPlan::from_json(nlohmann::json::parse(R"({"kind":"nope"})")),
                    ValidationError);
}

TEST_CASE("load_plan resolves unseen_path against the plan file") {
    testing::TempDir tmp;
    fs::create_directories(tmp.path() / "plans");
    write_file_atomic(tmp.path() / "plans" / "u.json",
                      R"({"kind":"unseen_validation","unseen_path":"unseen.csv"})");
    auto p = load_plan(tmp.path() / "plans" / "u.json");
    REQUIRE(p.unseen_path.has_value());
    CHECK(fs::path(*p.unseen_path) == tmp.path() / "plans" / "unseen.csv");
    CHECK_THROWS_AS(load_plan(tmp.path() / "missing.json"), ValidationError);
}

TEST_CASE("size sweep training sets are nested; 167 merges validation") {
    auto corpus = testing::synthetic_corpus(208, 1);
    auto plan = size_plan();
    auto cells = plan_cells(plan, corpus);
    REQUIRE(cells.size() == kSizes.size());
    auto split = split_corpus(corpus, plan.split);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        CHECK(cells[i].key == "size-" + std::to_string(kSizes[i]));
        CHECK(cells[i].train.size() == kSizes[i]);
        if (i > 0) {
            const auto& prev = cells[i - 1].train;
            CHECK(std::equal(prev.begin(), prev.end(), cells[i].train.begin()));
        }
    }
    CHECK(cells[4].train == split.train);
    CHECK(cells[4].validation == split.validation);
    CHECK(cells[5].train == merge_validation_into_train(split).train);
    CHECK(cells[5].validation.empty());
    for (const auto& c : cells) {
        for (auto t : split.test) {
            CHECK(std::find(c.train.begin(), c.train.end(), t) == c.train.end());
        }
    }
}

TEST_CASE("plan digests and cell keys are deterministic") {
    auto corpus = testing::synthetic_corpus(208, 1);
    auto a = plan_cells(size_plan(), corpus);
    auto b = plan_cells(size_plan(), corpus);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].key == b[i].key);
        CHECK(a[i].training_digest == b[i].training_digest);
    }
    auto renamed = size_plan();
    renamed.name = "other name";
    CHECK(plan_digest(renamed, corpus) == plan_digest(size_plan(), corpus));
    auto reseeded = size_plan();
    reseeded.split.seed = 1;
    CHECK(plan_digest(reseeded, corpus) != plan_digest(size_plan(), corpus));
    auto other_corpus = testing::synthetic_corpus(208, 2);
    CHECK(plan_digest(size_plan(), other_corpus) != plan_digest(size_plan(), corpus));
}

TEST_CASE("size sweep on the stub resumes after a failure without duplicate jobs") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(208, 1);
    testing::StubOptions so;
    so.fail_jobs_with_records = {{75, 1}};
    testing::StubProvider stub(so);
    RemoteBackend remote(stub_config(stub, tmp.path() / "ledger.json"));
    auto opts = fast_options(tmp.path());

    auto first = run_campaign(size_plan(), corpus, remote, opts);
    REQUIRE(first.cells.size() == 6);
    CHECK_FALSE(first.all_succeeded());
    for (const auto& c : first.cells) {
        CHECK_MESSAGE((c.status == CellStatus::failed) == (c.key == "size-75"), c.key, " ", c.error);
    }
    CHECK(first.cells[2].error.find("injected training failure") != std::string::npos);
    CHECK(stub.jobs_created() == 6);
    CHECK(stub.uploads() == 11);

    CHECK_THROWS_AS(run_campaign(size_plan(), corpus, remote, opts), ValidationError);

    auto resume = opts;
    resume.resume = true;
    auto second = run_campaign(size_plan(), corpus, remote, resume);
    CHECK(second.all_succeeded());
    CHECK(second.dir == first.dir);
    CHECK(stub.jobs_created() == 7);
    CHECK(stub.uploads() == 13);
    CHECK(stub.duplicate_submissions() == 0);

    auto files = stub.job_training_files();
    REQUIRE(files.size() == 7);
    std::map<std::size_t, std::set<std::string>> by_size;
    for (const auto& f : files) {
        auto l = lines_of(f);
        by_size[l.size()] = l;
    }
    REQUIRE(by_size.size() == 6);
    const std::set<std::string>* prev = nullptr;
    for (const auto& [n, l] : by_size) {
        if (prev) CHECK(subset(*prev, l));
        prev = &l;
    }

    auto before = stub.total_requests();
    auto third = run_campaign(size_plan(), corpus, remote, opts);
    CHECK(third.all_succeeded());
    CHECK(stub.total_requests() == before);

    auto csv = read_file(first.dir / "curve.csv");
    CHECK(csv.starts_with("n,status,direction_accuracy,r_error_mean,r_error_var,d_error_mean,"
                          "d_error_var\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK(fs::exists(first.dir / "cells" / "size-167" / "report.json"));
    CHECK_FALSE(fs::exists(first.dir / "cells" / "size-167" / "validation.jsonl"));
}

TEST_CASE("ablation runs six cells and masked features never reach training files") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(208, 4);
    MockBackend mock;
    ExperimentPlan plan;
    plan.kind = ExperimentKind::ablation;
    plan.n_runs = 2;
    auto result = run_campaign(plan, corpus, mock, fast_options(tmp.path()));
    REQUIRE(result.cells.size() == 6);
    CHECK(result.all_succeeded());
    const std::vector<std::pair<std::string, std::string>> masked = {
        {"mask-MF1", "Title: "},      {"mask-MF2", "Location: "}, {"mask-MF3", "Year: "},
        {"mask-MF4", "Population: "}, {"mask-MF5", "Sample size: "},
    };
    CHECK(result.cells[0].key == "mask-all");
    CHECK(result.cells[0].label == "MP4");
    auto baseline = read_file(result.cells[0].dir / "training.jsonl");
    for (const auto& [key, label] : masked) {
        auto it = std::find_if(result.cells.begin(), result.cells.end(),
                               [&](const CellResult& c) { return c.key == key; });
        REQUIRE(it != result.cells.end());
        CHECK(baseline.find(label) != std::string::npos);
        for (const char* file : {"training.jsonl", "validation.jsonl"}) {
            auto text = read_file(it->dir / file);
            CHECK_MESSAGE(text.find(label) == std::string::npos, key, " leaks ", label);
        }
        auto split = split_corpus(corpus, plan.split);
        if (key == "mask-MF1") {
            auto text = read_file(it->dir / "training.jsonl");
            for (auto i : split.train) {
                CHECK(text.find(corpus[i].study.paper_title) == std::string::npos);
            }
        }
    }
    auto table = read_file(result.dir / "table.txt");
    CHECK(table.find("Beats baseline") != std::string::npos);
    for (const char* label : {"MP4", "MF1", "MF2", "MF3", "MF4", "MF5"}) {
        CHECK(table.find(label) != std::string::npos);
    }
}

TEST_CASE("prompt variant campaign with replay models is perfect and renders MP1..MP4") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(208, 5);
    MockOptions mo;
    mo.finetune_mode = MockMode::replay;
    mo.oracle = corpus;
    MockBackend mock(mo);
    ExperimentPlan plan;
    plan.n_runs = 2;
    auto result = run_campaign(plan, corpus, mock, fast_options(tmp.path()));
    REQUIRE(result.cells.size() == 4);
    for (const auto& c : result.cells) {
        REQUIRE(c.report.has_value());
        CHECK(*c.report->direction_accuracy == 1.0);
        CHECK(c.report->rd_coverage == 1.0);
        CHECK(std::fabs(*c.report->r_error_mean) <= 5e-4);
    }
    auto table = render_results_table(result.cells);
    for (const char* label : {"MP1", "MP2", "MP3", "MP4"}) {
        CHECK(table.find(label) != std::string::npos);
    }
    CHECK(table.find("100.0") != std::string::npos);
    CHECK(read_file(result.dir / "table.txt") == table);
}

TEST_CASE("holdout studies in a training corpus are refused") {
    auto corpus = testing::synthetic_corpus(208, 1);
    auto entries = corpus.entries();
    entries[0].holdout = true;
    Corpus tainted(entries, "tainted");
    CHECK_THROWS_AS(plan_cells(size_plan(), tainted), ContaminationError);
}

TEST_CASE("unseen campaign: overlap with the holdout file fails before upload") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(208, 1);
    auto split = split_corpus(corpus, {0, {144, 23, 41}});
    std::vector<Entry> overlap = {corpus[split.train[3]]};
    write_file_atomic(tmp.path() / "unseen.csv", export_corpus(Corpus(overlap, "")));
    testing::StubProvider stub;
    RemoteBackend remote(stub_config(stub, tmp.path() / "ledger.json"));
    ExperimentPlan plan;
    plan.kind = ExperimentKind::unseen_validation;
    plan.unseen_path = (tmp.path() / "unseen.csv").string();
    plan.n_runs = 1;
    auto result = run_campaign(plan, corpus, remote, fast_options(tmp.path()));
    REQUIRE(result.cells.size() == 1);
    CHECK(result.cells[0].status == CellStatus::failed);
    CHECK(result.cells[0].error.find("holdout") != std::string::npos);
    CHECK(stub.uploads() == 0);
    CHECK(stub.jobs_created() == 0);
    CHECK_FALSE(result.unseen.has_value());
}

TEST_CASE("unseen campaign reports full, excluded and naive") {
    testing::TempDir tmp;
    auto corpus = testing::synthetic_corpus(208, 1);
    auto unseen_entries = testing::synthetic_corpus(12, 77, "U").entries();
    for (std::size_t i = 0; i < unseen_entries.size(); ++i) {
        unseen_entries[i].study.intervention_category =
            i < 2 ? InterventionCategory::monetary : InterventionCategory::nudge;
    }
    write_file_atomic(tmp.path() / "unseen.csv", export_corpus(Corpus(unseen_entries, "")));
    MockBackend mock;
    ExperimentPlan plan;
    plan.kind = ExperimentKind::unseen_validation;
    plan.unseen_path = (tmp.path() / "unseen.csv").string();
    plan.n_runs = 3;
    auto result = run_campaign(plan, corpus, mock, fast_options(tmp.path()));
    REQUIRE(result.all_succeeded());
    REQUIRE(result.unseen.has_value());
    CHECK(result.cells[0].training_records == 167);
    CHECK(result.unseen->full.n_test == 12);
    REQUIRE(result.unseen->excluded.has_value());
    CHECK(result.unseen->excluded->n_test == 10);
    CHECK(result.unseen->n_excluded == 2);
    CHECK(result.unseen->naive.model_id == "naive-baseline");
    for (const char* f : {"unseen-full.json", "unseen-excluded.json", "unseen-naive.json"}) {
        CHECK(validate_report_json(nlohmann::json::parse(read_file(result.dir / f))).empty());
    }
    CHECK(render_unseen(*result.unseen).find("naive") != std::string::npos);

    std::vector<Entry> all_monetary = unseen_entries;
    for (auto& e : all_monetary) {
        e.study.intervention_category = InterventionCategory::monetary;
        e.holdout = true;
    }
    EvalOptions eo;
    eo.n_runs = 1;
    auto train = corpus.select(split_corpus(corpus, plan.split).train);
    CHECK_THROWS_AS(run_unseen_validation(mock, result.cells[0].job->model.value(),
                                          Corpus(all_monetary, ""), train,
                                          InterventionCategory::monetary, eo),
                    ValidationError);
}

namespace {

CellResult cell_with(const std::string& key, const std::string& label, double r_err, double d_err) {
    CellResult c;
    c.key = key;
    c.label = label;
    c.status = CellStatus::succeeded;
    EvalReport r;
    r.n_test = 41;
    r.n_runs = 10;
    r.direction_coverage = 1.0;
    r.direction_accuracy = 0.79;
    r.rd_coverage = 1.0;
    r.r_error_mean = r_err;
    r.r_error_var = 0.127;
    r.d_error_mean = d_err;
    r.d_error_var = 0.385;
    c.report = r;
    return c;
}

}  // namespace

TEST_CASE("results table formats percentages and error (variance) pairs") {
    std::vector<CellResult> cells = {cell_with("variant-P4", "MP4", -0.009, -0.051)};
    CellResult empty;
    empty.key = "variant-P1";
    empty.label = "MP1";
    empty.status = CellStatus::succeeded;
    EvalReport r;
    r.direction_coverage = 0.945;
    r.direction_accuracy = 0.367;
    empty.report = r;
    cells.push_back(empty);
    auto table = render_results_table(cells);
    CHECK(table.find("-0.009 (0.127)") != std::string::npos);
    CHECK(table.find("-0.051 (0.385)") != std::string::npos);
    CHECK(table.find("79.0") != std::string::npos);
    CHECK(table.find("94.5") != std::string::npos);
    CHECK(table.find("36.7") != std::string::npos);
}

TEST_CASE("ablation cells beat the baseline only on both error magnitudes") {
    std::vector<CellResult> cells = {
        cell_with("mask-all", "MP4", -0.009, -0.051), cell_with("mask-MF1", "MF1", 0.005, 0.02),
        cell_with("mask-MF2", "MF2", 0.005, -0.3),    cell_with("mask-MF3", "MF3", -0.2, 0.01),
        cell_with("mask-MF4", "MF4", -0.008, -0.05),
    };
    CHECK(cells_beating_baseline(cells) == std::vector<std::string>{"mask-MF1", "mask-MF4"});
    auto text = render_ablation_comparison(cells);
    CHECK(text.find("Beats baseline") != std::string::npos);
}
