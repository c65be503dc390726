#include "nudgecast/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>

#include "nudgecast/digest.hpp"
#include "nudgecast/effectstats.hpp"
#include "nudgecast/errors.hpp"
#include "nudgecast/evalkit.hpp"
#include "nudgecast/reference.hpp"
#include "nudgecast/remote_backend.hpp"
#include "nudgecast/sweeps.hpp"
#include "nudgecast/transcript.hpp"

namespace nudgecast {

namespace fs = std::filesystem;

CliConfig CliConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
    CliConfig c;
    auto path = [&](const std::string& p) {
        fs::path v(p);
        return v.is_relative() ? (base_dir / v).lexically_normal() : v;
    };
    try {
        if (j.contains("corpus") && !j["corpus"].is_null()) c.corpus = path(j["corpus"]);
        if (j.contains("state_dir")) c.state_dir = path(j["state_dir"]);
        c.backend = j.value("backend", c.backend);
        if (j.contains("mock_mode")) {
            auto m = parse_mock_mode(j["mock_mode"].get<std::string>());
            if (!m) throw ValidationError("config: mock_mode must be replay or nn");
            c.mock_mode = *m;
        }
        if (j.contains("api_base") && !j["api_base"].is_null()) c.api_base = j["api_base"];
        if (j.contains("api_key")) {
            throw ValidationError("config: api_key is not read from files; set " +
                                  std::string(kApiKeyEnv) + " instead");
        }
        if (j.contains("variant")) {
            auto v = parse_variant(j["variant"].get<std::string>());
            if (!v) throw ValidationError("config: unknown variant " + j["variant"].dump());
            c.variant = *v;
        }
        c.split_seed = j.value("split_seed", c.split_seed);
        if (j.contains("split_counts")) {
            auto v = j["split_counts"].get<std::vector<std::size_t>>();
            if (v.size() != 3) throw ValidationError("config: split_counts needs 3 numbers");
            c.split_counts = {v[0], v[1], v[2]};
        }
        c.n_runs = j.value("n_runs", c.n_runs);
        c.temperature = j.value("temperature", c.temperature);
        c.base_model = j.value("base_model", c.base_model);
        c.parallelism = j.value("parallelism", c.parallelism);
        c.poll_interval_ms = j.value("poll_interval_ms", c.poll_interval_ms);
        c.requests_per_second = j.value("requests_per_second", c.requests_per_second);
        if (j.contains("service")) {
            c.service = ServiceConfig::from_json(j["service"]);
            if (c.service.static_dir) c.service.static_dir = path(c.service.static_dir->string());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    if (c.backend != "mock" && c.backend != "remote") {
        throw ValidationError("config: backend must be mock or remote, got '" + c.backend + "'");
    }
    return c;
}

CliConfig load_cli_config(const std::optional<fs::path>& explicit_path) {
    CliConfig c;
    std::optional<fs::path> file = explicit_path;
    if (!file && fs::exists(kDefaultConfigFile)) file = fs::path(kDefaultConfigFile);
    if (explicit_path && !fs::exists(*explicit_path)) {
        throw ValidationError("config file not found: " + explicit_path->string());
    }
    if (file) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(*file));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(file->string() + ": " + e.what());
        }
        c = CliConfig::from_json(j, file->parent_path());
    }
    if (const char* v = std::getenv(kStateDirEnv); v && *v) c.state_dir = v;
    if (const char* v = std::getenv(kBackendEnv); v && *v) {
        c.backend = v;
        if (c.backend != "mock" && c.backend != "remote") {
            throw ValidationError(std::string(kBackendEnv) + " must be mock or remote");
        }
    }
    if (const char* v = std::getenv(kApiBaseEnv); v && *v) c.api_base = v;
    apply_env_overrides(c.service);
    return c;
}

namespace {

std::string sanitize(std::string_view s) {
    std::string out;
    for (char ch : s) {
        out.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' ||
                              ch == '.'
                          ? ch
                          : '_');
    }
    return out;
}

nlohmann::json prediction_json(const PredictionRecord& p) {
    return {{"study_id", p.study_id},
            {"raw_text", p.raw_text},
            {"direction",
             p.direction ? nlohmann::json(to_string(*p.direction)) : nlohmann::json(nullptr)},
            {"r_pred", p.r_pred ? nlohmann::json(*p.r_pred) : nlohmann::json(nullptr)},
            {"d_pred", p.d_pred ? nlohmann::json(*p.d_pred) : nlohmann::json(nullptr)}};
}

std::vector<std::size_t> parse_counts(const std::string& text) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto comma = text.find(',', pos);
        auto part = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            auto v = std::stoull(part, &used);
            if (used != part.size()) throw std::invalid_argument(part);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ValidationError("--counts: '" + part + "' is not a number (expected e.g. 144,23,41)");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

/// State directory, lazily loaded inputs and backends of one command.
class Workspace {
public:
    Workspace(CliConfig cfg, bool dry_run, bool force, std::ostream& out)
        : cfg_(std::move(cfg)), dry_run_(dry_run), force_(force), out_(out) {}

    const CliConfig& cfg() const { return cfg_; }
    bool dry_run() const { return dry_run_; }
    bool force() const { return force_; }
    std::ostream& out() { return out_; }

    fs::path state(const fs::path& rel = {}) const { return rel.empty() ? cfg_.state_dir : cfg_.state_dir / rel; }

    fs::path ensure_dir(const fs::path& rel) {
        auto p = state(rel);
        fs::create_directories(p);
        return p;
    }

    const Corpus& corpus() {
        if (!corpus_) {
            if (fs::exists(state("corpus.csv"))) {
                corpus_ = ingest_corpus(state("corpus.csv"));
            } else if (cfg_.corpus) {
                corpus_ = ingest_corpus(*cfg_.corpus);
            } else {
                throw ValidationError(
                    "no corpus: run `nudgecast ingest <file.csv>` or pass --corpus");
            }
        }
        return *corpus_;
    }

    std::optional<Corpus> unseen(const std::optional<fs::path>& path = std::nullopt) {
        if (path) return load_unseen(*path);
        if (fs::exists(state("unseen.csv"))) return load_unseen(state("unseen.csv"));
        return std::nullopt;
    }

    Split split() {
        const auto& c = corpus();
        auto path = state("split.json");
        if (!fs::exists(path)) {
            return split_corpus(c, {cfg_.split_seed, cfg_.split_counts});
        }
        auto j = nlohmann::json::parse(read_file(path));
        Split s;
        auto load = [&](const char* key, std::vector<std::size_t>& into) {
            for (const auto& id : j.at(key)) {
                auto idx = c.find(id.get<std::string>());
                if (!idx) {
                    throw ValidationError(fmt::format(
                        "split.json names study '{}' that is not in the corpus; rerun "
                        "`nudgecast split --force`",
                        id.get<std::string>()));
                }
                into.push_back(*idx);
            }
        };
        load("train", s.train);
        load("validation", s.validation);
        load("test", s.test);
        check_split(s, c.size());
        return s;
    }

    MockBackend& mock() {
        if (!mock_) {
            MockOptions o;
            o.finetune_mode = cfg_.mock_mode;
            o.store_dir = state("mock");
            auto entries = corpus().entries();
            if (auto u = unseen(); u) {
                for (const auto& e : u->entries()) {
                    if (!corpus().find(e.study.study_id)) entries.push_back(e);
                }
            }
            o.oracle = Corpus(std::move(entries), corpus().provenance());
            mock_ = std::make_unique<MockBackend>(std::move(o));
        }
        return *mock_;
    }

    Backend& remote() {
        if (dry_run_) throw std::logic_error("remote backend requested during a dry run");
        if (!remote_) {
            auto rc = remote_config_from_env();
            if (cfg_.api_base) rc.base_url = *cfg_.api_base;
            rc.requests_per_second = cfg_.requests_per_second;
            if (rc.api_key.empty()) {
                throw ValidationError(std::string(kApiKeyEnv) +
                                      " is not set; the remote backend needs an API key");
            }
            rc.ledger_path = ensure_dir("") / "remote_ledger.json";
            remote_ = std::make_unique<RemoteBackend>(std::move(rc));
            recording_ = std::make_unique<RecordingBackend>(
                *remote_, std::make_shared<TranscriptStore>(ensure_dir("transcripts")));
        }
        return *recording_;
    }

    Backend& training_backend() {
        if (cfg_.backend == "remote") return remote();
        return mock();
    }

    WaitOptions wait() const {
        WaitOptions w;
        w.poll_interval = std::chrono::milliseconds(cfg_.backend == "remote" ? cfg_.poll_interval_ms : 0);
        return w;
    }

    nlohmann::json registry() const {
        auto path = state("models.json");
        if (!fs::exists(path)) return nlohmann::json::object();
        return nlohmann::json::parse(read_file(path));
    }

    void register_model(const std::string& alias, const ModelRef& model) {
        auto j = registry();
        j[alias] = model.to_json();
        ensure_dir("");
        write_file_atomic(state("models.json"), j.dump(2));
    }

    /// Backend and model for a --model value.
    std::pair<Backend*, ModelRef> resolve(const std::string& spec) {
        if (spec == "mock:replay") return {&mock(), mock().oracle_model()};
        if (spec == "mock:nn") {
            auto s = split();
            auto train = corpus().select(s.train);
            auto records = build_training_records(train, builtin_template(cfg_.variant),
                                                  FeatureMask::all());
            return {&mock(), mock().build_mock_model(records, MockMode::nearest_neighbor)};
        }
        if (spec.starts_with("mock:")) {
            throw ValidationError("unknown mock model '" + spec + "' (use mock:replay or mock:nn)");
        }
        auto reg = registry();
        if (reg.contains(spec)) {
            auto m = ModelRef::from_json(reg[spec]);
            if (m.provider == Provider::mock) return {&mock(), m};
            return {dry_run_ ? nullptr : &remote(), m};
        }
        if (spec.starts_with("mock-")) {
            if (!mock().knows_model(spec)) throw ValidationError("unknown mock model '" + spec + "'");
            return {&mock(), ModelRef{Provider::mock, spec, ""}};
        }
        return {dry_run_ ? nullptr : &remote(), ModelRef{Provider::remote, spec, cfg_.base_model}};
    }

private:
    CliConfig cfg_;
    bool dry_run_;
    bool force_;
    std::ostream& out_;
    std::optional<Corpus> corpus_;
    std::unique_ptr<MockBackend> mock_;
    std::unique_ptr<RemoteBackend> remote_;
    std::unique_ptr<RecordingBackend> recording_;
};

void print_report(std::ostream& out, const EvalReport& r, const std::string& label) {
    CellResult cell;
    cell.key = label;
    cell.label = label;
    cell.status = CellStatus::succeeded;
    cell.report = r;
    out << render_results_table({cell});
}

/// Writes `bytes` unless an identical file exists; refuses to replace a
/// different file without --force. Returns false when nothing changed.
bool write_artifact(Workspace& ws, const fs::path& path, const std::string& bytes) {
    if (fs::exists(path)) {
        if (read_file(path) == bytes) return false;
        if (!ws.force()) {
            throw ValidationError(path.string() +
                                  " already exists with different contents; pass --force to "
                                  "replace it");
        }
    }
    fs::create_directories(path.parent_path());
    write_file_atomic(path, bytes);
    return true;
}

struct Opts {
    // shared
    std::string variant;
    std::string mask = "all";
    std::string model;
    std::optional<std::size_t> runs;
    std::optional<double> temperature;
    std::optional<std::size_t> size;
    std::string slice = "test";
    std::string label;
    // ingest
    std::string ingest_path;
    bool unseen_flag = false;
    // split
    std::optional<std::uint64_t> seed;
    std::string counts;
    // finetune
    std::optional<std::string> base_model;
    bool no_wait = false;
    // sweep
    std::string plan;
    bool resume = false;
    // unseen
    std::string unseen_path;
    std::string exclude = "monetary";
    // serve
    std::optional<int> port;
    std::optional<std::string> host;
    std::optional<std::string> static_dir;
};

PromptVariant variant_of(const Workspace& ws, const Opts& o) {
    if (o.variant.empty()) return ws.cfg().variant;
    auto v = parse_variant(o.variant);
    if (!v) throw ValidationError("--variant must be one of P1, P2, P3, P4");
    return *v;
}

FeatureMask mask_of(const Opts& o) {
    auto m = parse_mask(o.mask);
    if (!m) throw ValidationError("--mask must be all or MF1..MF5");
    return *m;
}

std::vector<std::size_t> training_indices(Workspace& ws, const Opts& o, Split& split,
                                          std::vector<std::size_t>& validation) {
    validation = split.validation;
    if (!o.size) return split.train;
    auto idx = size_sweep_indices(split, *o.size);
    if (*o.size < 10) throw ValidationError("--size must be at least 10 (provider minimum)");
    std::set<std::size_t> used(idx.begin(), idx.end());
    validation.clear();
    for (auto i : split.validation) {
        if (!used.count(i)) validation.push_back(i);
    }
    (void)ws;
    return idx;
}

int cmd_ingest(Workspace& ws, const Opts& o) {
    fs::path src(o.ingest_path);
    auto corpus = o.unseen_flag ? load_unseen(src) : ingest_corpus(src);
    std::map<std::string, int> by_cat;
    int positive = 0;
    for (const auto& e : corpus.entries()) {
        by_cat[std::string(to_string(e.study.intervention_category))]++;
        if (e.outcome.direction == Direction::positive) ++positive;
    }
    auto& out = ws.out();
    out << fmt::format("{} {} studies from {} (sha256 {})\n",
                       ws.dry_run() ? "validated" : "ingested", corpus.size(), src.string(),
                       corpus.provenance());
    out << fmt::format("  directions: {} positive, {} negative\n", positive,
                       static_cast<int>(corpus.size()) - positive);
    for (const auto& [cat, n] : by_cat) out << fmt::format("  {}: {}\n", cat, n);
    auto dest = ws.state(o.unseen_flag ? "unseen.csv" : "corpus.csv");
    if (ws.dry_run()) {
        out << "dry run: would copy to " << dest.string() << "\n";
        return 0;
    }
    ws.ensure_dir("");
    if (!write_artifact(ws, dest, read_file(src))) {
        out << "already ingested: " << dest.string() << "\n";
    } else {
        out << "wrote " << dest.string() << "\n";
    }
    return 0;
}

int cmd_split(Workspace& ws, const Opts& o) {
    const auto& corpus = ws.corpus();
    SplitSpec spec{o.seed.value_or(ws.cfg().split_seed), ws.cfg().split_counts};
    if (!o.counts.empty()) {
        auto c = parse_counts(o.counts);
        if (c.size() != 3) throw ValidationError("--counts needs three numbers: train,validation,test");
        spec.counts = {c[0], c[1], c[2]};
    }
    auto split = split_corpus(corpus, spec);
    auto ids = [&](const std::vector<std::size_t>& idx) {
        auto arr = nlohmann::json::array();
        for (auto i : idx) arr.push_back(corpus[i].study.study_id);
        return arr;
    };
    nlohmann::json j = {{"seed", spec.seed},
                        {"counts", {spec.counts.train, spec.counts.validation, spec.counts.test}},
                        {"corpus_provenance", corpus.provenance()},
                        {"train", ids(split.train)},
                        {"validation", ids(split.validation)},
                        {"test", ids(split.test)}};
    auto& out = ws.out();
    out << fmt::format("split seed {}: {} train, {} validation, {} test\n", spec.seed,
                       split.train.size(), split.validation.size(), split.test.size());
    if (ws.dry_run()) {
        out << "dry run: would write " << ws.state("split.json").string() << "\n";
        return 0;
    }
    ws.ensure_dir("");
    bool changed = write_artifact(ws, ws.state("split.json"), j.dump(2) + "\n");
    out << (changed ? "wrote " : "unchanged: ") << ws.state("split.json").string() << "\n";
    return 0;
}

int cmd_gen_prompts(Workspace& ws, const Opts& o) {
    const auto& corpus = ws.corpus();
    auto split = ws.split();
    auto variant = variant_of(ws, o);
    auto mask = mask_of(o);
    const auto& tmpl = builtin_template(variant);
    std::vector<std::size_t> validation;
    auto train = training_indices(ws, o, split, validation);
    auto train_recs = build_training_records(corpus.select(train), tmpl, mask);
    auto unseen = ws.unseen();

    auto dir_rel = fs::path("prompts") / fmt::format("{}-{}{}", to_string(variant), mask_name(mask),
                                                     o.size ? fmt::format("-n{}", *o.size) : "");
    auto& out = ws.out();
    auto report = [&](const char* name, std::size_t n, const std::string& bytes) {
        out << fmt::format("  {:<16} {:>4} records  sha256 {}\n", name, n, sha256_hex(bytes));
    };
    auto train_bytes = training_jsonl(train_recs);
    std::string val_bytes;
    std::vector<TrainingRecord> val_recs;
    if (!validation.empty()) {
        val_recs = build_training_records(corpus.select(validation), tmpl, mask);
        val_bytes = training_jsonl(val_recs);
    }
    std::string query_bytes;
    for (const auto& e : corpus.select(split.test)) {
        nlohmann::json line = render_prompt(tmpl, e.study, mask).to_json();
        line["study_id"] = e.study.study_id;
        query_bytes += line.dump() + "\n";
    }
    out << fmt::format("prompts {} / mask {} ({}):\n", to_string(variant), mask_name(mask),
                       ws.dry_run() ? "dry run, nothing written" : ws.state(dir_rel).string());
    report("training.jsonl", train_recs.size(), train_bytes);
    if (!val_recs.empty()) report("validation.jsonl", val_recs.size(), val_bytes);
    report("test_queries.jsonl", split.test.size(), query_bytes);
    if (ws.dry_run()) return 0;

    auto dir = ws.ensure_dir(dir_rel);
    auto tf = export_training_file(train_recs, dir / "training.jsonl");
    if (unseen) guard_no_holdout(tf, *unseen);
    if (!val_recs.empty()) {
        auto vf = export_training_file(val_recs, dir / "validation.jsonl");
        if (unseen) guard_no_holdout(vf, *unseen);
    }
    write_file_atomic(dir / "test_queries.jsonl", query_bytes);
    return 0;
}

int cmd_finetune(Workspace& ws, const Opts& o) {
    const auto& corpus = ws.corpus();
    auto split = ws.split();
    auto variant = variant_of(ws, o);
    auto mask = mask_of(o);
    const auto& tmpl = builtin_template(variant);
    std::vector<std::size_t> validation;
    auto train = training_indices(ws, o, split, validation);
    auto train_recs = build_training_records(corpus.select(train), tmpl, mask);
    std::vector<TrainingRecord> val_recs;
    if (!validation.empty()) val_recs = build_training_records(corpus.select(validation), tmpl, mask);
    const auto base = o.base_model.value_or(ws.cfg().base_model);
    const auto alias = fmt::format("{}-{}{}", to_string(variant), mask_name(mask),
                                   o.size ? fmt::format("-n{}", *o.size) : "");
    auto& out = ws.out();
    const auto train_digest = sha256_hex(training_jsonl(train_recs));
    out << fmt::format("fine-tune {} on {} ({} backend)\n", alias, base, ws.cfg().backend);
    out << fmt::format("  upload training.jsonl: {} records, sha256 {}\n", train_recs.size(),
                       train_digest);
    if (!val_recs.empty()) {
        out << fmt::format("  upload validation.jsonl: {} records, sha256 {}\n", val_recs.size(),
                           sha256_hex(training_jsonl(val_recs)));
    }
    if (ws.cfg().backend == "remote" && train_recs.size() < 10) {
        throw ValidationError(fmt::format("provider minimum is 10 training records, got {}",
                                          train_recs.size()));
    }
    if (ws.dry_run()) {
        out << "dry run: no files uploaded, no job submitted\n";
        return 0;
    }

    auto dir = ws.ensure_dir(fs::path("prompts") / alias);
    auto tf = export_training_file(train_recs, dir / "training.jsonl");
    std::optional<TrainingFile> vf;
    if (!val_recs.empty()) vf = export_training_file(val_recs, dir / "validation.jsonl");
    if (auto unseen = ws.unseen()) {
        guard_no_holdout(tf, *unseen);
        if (vf) guard_no_holdout(*vf, *unseen);
    }
    auto& backend = ws.training_backend();
    auto key = idempotency_key(tf.digest, vf ? vf->digest : "", base);
    auto job_path = ws.ensure_dir("jobs") / (key + ".json");
    FineTuneJob job;
    if (fs::exists(job_path)) {
        job = FineTuneJob::from_json(nlohmann::json::parse(read_file(job_path)));
        if (job.status == JobStatus::failed) {
            job = backend.create_finetune(tf, vf ? &*vf : nullptr, base);
        } else {
            out << "  already submitted as job " << job.job_id << "\n";
        }
    } else {
        job = backend.create_finetune(tf, vf ? &*vf : nullptr, base);
    }
    write_file_atomic(job_path, job.to_json().dump(2));
    out << fmt::format("  job {} {}\n", job.job_id, to_string(job.status));
    if (o.no_wait) return 0;
    job = wait_for_job(backend, job, ws.wait());
    write_file_atomic(job_path, job.to_json().dump(2));
    if (job.status != JobStatus::succeeded || !job.model) {
        throw BackendError(fmt::format("fine-tune job {} failed: {}", job.job_id, job.error));
    }
    ws.register_model(alias, *job.model);
    out << fmt::format("  model {} (alias {})\n", job.model->model_id, alias);
    return 0;
}

EvalOptions eval_options(Workspace& ws, const Opts& o) {
    EvalOptions eo;
    eo.tmpl = builtin_template(variant_of(ws, o));
    eo.mask = mask_of(o);
    eo.n_runs = o.runs.value_or(ws.cfg().n_runs);
    eo.temperature = o.temperature.value_or(ws.cfg().temperature);
    eo.parallelism = ws.cfg().parallelism;
    if (eo.n_runs == 0) throw ValidationError("--runs must be positive");
    if (eo.temperature < 0) throw ValidationError("--temperature must be >= 0");
    return eo;
}

std::vector<Entry> eval_slice(Workspace& ws, const Opts& o) {
    auto split = ws.split();
    if (o.slice == "test") return ws.corpus().select(split.test);
    if (o.slice == "validation") return ws.corpus().select(split.validation);
    throw ValidationError("--on must be test or validation");
}

int cmd_infer(Workspace& ws, const Opts& o) {
    auto eo = eval_options(ws, o);
    auto items = eval_slice(ws, o);
    auto& out = ws.out();
    if (ws.dry_run()) {
        out << fmt::format("dry run: would request {} completions ({} runs x {} {} items) from {}\n",
                           eo.n_runs * items.size(), eo.n_runs, items.size(), o.slice, o.model);
        return 0;
    }
    auto [backend, model] = ws.resolve(o.model);
    auto dir = ws.ensure_dir(fs::path("predictions") / sanitize(model.model_id) /
                             fmt::format("{}-{}-{}-t{}", o.slice, to_string(eo.tmpl.variant),
                                         mask_name(eo.mask), eo.temperature));
    for (std::size_t k = 0; k < eo.n_runs; ++k) {
        auto path = dir / fmt::format("run-{}.jsonl", k);
        if (fs::exists(path) && !ws.force()) {
            out << "exists: " << path.string() << "\n";
            continue;
        }
        auto preds = infer_run(*backend, model, items, eo, k);
        std::string bytes;
        for (const auto& p : preds) bytes += prediction_json(p).dump() + "\n";
        write_file_atomic(path, bytes);
        out << "wrote " << path.string() << "\n";
    }
    return 0;
}

int cmd_evaluate(Workspace& ws, const Opts& o) {
    auto eo = eval_options(ws, o);
    auto items = eval_slice(ws, o);
    auto& out = ws.out();
    if (ws.dry_run()) {
        out << fmt::format("dry run: would request {} completions ({} runs x {} {} items) from {}\n",
                           eo.n_runs * items.size(), eo.n_runs, items.size(), o.slice, o.model);
        return 0;
    }
    auto [backend, model] = ws.resolve(o.model);
    auto id = sanitize(o.label.empty()
                           ? fmt::format("{}-{}-{}-{}-t{}-r{}", model.model_id, o.slice,
                                         to_string(eo.tmpl.variant), mask_name(eo.mask),
                                         eo.temperature, eo.n_runs)
                           : o.label);
    auto path = ws.state("reports") / (id + ".json");
    EvalReport report;
    if (fs::exists(path) && !ws.force()) {
        report = EvalReport::from_json(nlohmann::json::parse(read_file(path)));
        out << "report already exists (pass --force to recompute): " << path.string() << "\n";
    } else {
        auto partial_path = ws.state("reports") / (id + ".partial.json");
        if (fs::exists(partial_path)) {
            for (const auto& run : nlohmann::json::parse(read_file(partial_path))) {
                std::vector<PredictionRecord> recs;
                for (const auto& p : run) {
                    recs.push_back(parse_prediction(p.at("study_id").get<std::string>(),
                                                    p.at("raw_text").get<std::string>()));
                }
                eo.completed_runs.push_back(std::move(recs));
            }
            out << fmt::format("resuming after {} completed runs\n", eo.completed_runs.size());
        }
        try {
            report = evaluate_model(*backend, model, items, eo);
        } catch (const PartialReportError& e) {
            auto j = nlohmann::json::array();
            for (const auto& run : e.completed_runs()) {
                auto arr = nlohmann::json::array();
                for (const auto& p : run) arr.push_back(prediction_json(p));
                j.push_back(std::move(arr));
            }
            ws.ensure_dir("reports");
            write_file_atomic(partial_path, j.dump());
            throw;
        }
        ws.ensure_dir("reports");
        write_file_atomic(path, report.to_json().dump(2));
        fs::remove(partial_path);
        out << "wrote " << path.string() << "\n";
    }
    print_report(out, report, model.model_id);
    return 0;
}

int cmd_sweep(Workspace& ws, const Opts& o) {
    auto plan = load_plan(o.plan);
    const auto& corpus = ws.corpus();
    auto cells = plan_cells(plan, corpus);
    auto& out = ws.out();
    out << fmt::format("campaign {} ({}), {} cells, {} runs each, plan digest {}\n",
                       plan.name.empty() ? std::string(to_string(plan.kind)) : plan.name,
                       to_string(plan.kind), cells.size(), plan.n_runs,
                       plan_digest(plan, corpus).substr(0, 16));
    for (const auto& c : cells) {
        out << fmt::format("  {:<14} {} / {:<4} train {:>3}  validation {:>3}  sha256 {}\n", c.key,
                           to_string(c.variant), mask_name(c.mask), c.train.size(),
                           c.validation.size(), c.training_digest.substr(0, 16));
    }
    if (ws.dry_run()) {
        out << "dry run: no files uploaded, no job submitted\n";
        return 0;
    }
    CampaignOptions co;
    co.state_dir = ws.state();
    co.resume = o.resume;
    co.force = ws.force();
    co.wait = ws.wait();
    co.parallelism = ws.cfg().parallelism;
    auto result = run_campaign(plan, corpus, ws.training_backend(), co);
    out << "\n";
    switch (result.kind) {
        case ExperimentKind::ablation: out << render_ablation_comparison(result.cells); break;
        case ExperimentKind::size_sweep:
            out << render_results_table(result.cells);
            out << "curve data: " << (result.dir / "curve.csv").string() << "\n";
            break;
        case ExperimentKind::unseen_validation:
            if (result.unseen) out << render_unseen(*result.unseen);
            break;
        default: out << render_results_table(result.cells); break;
    }
    out << "campaign state: " << result.dir.string() << "\n";
    std::size_t failed = 0;
    for (const auto& c : result.cells) {
        if (c.status != CellStatus::succeeded) {
            ++failed;
            out << fmt::format("cell {} failed: {}\n", c.key, c.error);
        }
    }
    if (failed) {
        out << fmt::format("{} cell(s) failed; rerun with --resume to retry them\n", failed);
        return 2;
    }
    return 0;
}

int cmd_unseen(Workspace& ws, const Opts& o) {
    auto eo = eval_options(ws, o);
    auto unseen = ws.unseen(o.unseen_path.empty() ? std::nullopt
                                                  : std::optional<fs::path>(o.unseen_path));
    if (!unseen) throw ValidationError("no unseen corpus: pass --unseen <file.csv> or ingest one with --unseen");
    std::optional<InterventionCategory> exclude;
    if (o.exclude != "none") {
        exclude = parse_category(o.exclude);
        if (!exclude) throw ValidationError("--exclude must be a category or none");
    }
    auto& out = ws.out();
    if (ws.dry_run()) {
        out << fmt::format("dry run: would request up to {} completions from {}\n",
                           2 * eo.n_runs * unseen->size(), o.model);
        return 0;
    }
    auto [backend, model] = ws.resolve(o.model);
    auto split = ws.split();
    auto train = ws.corpus().select(merge_validation_into_train(split).train);
    auto reports = run_unseen_validation(*backend, model, *unseen, train, exclude, eo);
    auto dir = ws.ensure_dir("reports");
    auto stem = sanitize("unseen-" + model.model_id);
    write_file_atomic(dir / (stem + "-full.json"), reports.full.to_json().dump(2));
    if (reports.excluded) {
        write_file_atomic(dir / (stem + "-excluded.json"), reports.excluded->to_json().dump(2));
    }
    write_file_atomic(dir / (stem + "-naive.json"), reports.naive.to_json().dump(2));
    out << render_unseen(reports);
    return 0;
}

std::atomic<Service*> g_service{nullptr};

extern "C" void on_signal(int) {
    if (auto* s = g_service.load()) s->stop();
}

int cmd_serve(Workspace& ws, const Opts& o) {
    auto sc = ws.cfg().service;
    sc.state_dir = ws.state();
    if (o.port) sc.port = *o.port;
    if (o.host) sc.host = *o.host;
    if (o.static_dir) sc.static_dir = *o.static_dir;
    auto& out = ws.out();
    std::string model_spec = o.model;
    if (model_spec.empty() && sc.models.empty()) model_spec = "mock:nn";
    out << fmt::format("serve http://{}:{} (variant {}, state {})\n", sc.host, sc.port,
                       to_string(sc.variant), sc.state_dir.string());
    if (ws.dry_run()) {
        out << "dry run: not listening\n";
        return 0;
    }
    Backend* backend = nullptr;
    if (!model_spec.empty()) {
        auto [b, m] = ws.resolve(model_spec);
        backend = b;
        sc.models.insert(sc.models.begin(), m);
    } else {
        backend = sc.models.front().provider == Provider::mock ? static_cast<Backend*>(&ws.mock())
                                                                : &ws.remote();
    }
    out << "default model: " << sc.models.front().model_id << "\n" << std::flush;
    Service service(*backend, sc);
    g_service = &service;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    bool ok = service.serve();
    g_service = nullptr;
    if (!ok) throw BackendError(fmt::format("cannot listen on {}:{}", sc.host, sc.port));
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"nudgecast: predict food-policy intervention effects with fine-tuned language models",
                 "nudgecast"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");

    std::optional<std::string> config_path, state_dir, backend_name, corpus_path;
    bool dry_run = false, force = false, verbose = false, quiet = false;
    app.add_option("--config", config_path, "Config file (default ./nudgecast.json if present)");
    app.add_option("--state-dir", state_dir, "State directory");
    app.add_option("--backend", backend_name, "mock or remote")->check(CLI::IsMember({"mock", "remote"}));
    app.add_option("--corpus", corpus_path, "Corpus CSV used when none was ingested");
    app.add_flag("--dry-run", dry_run, "Print planned actions; no network, no writes");
    app.add_flag("--force", force, "Replace existing artifacts");
    app.add_flag("-v,--verbose", verbose, "Debug logging");
    app.add_flag("-q,--quiet", quiet, "Only log errors");

    Opts o;
    auto add_eval_opts = [&](CLI::App* sub) {
        sub->add_option("--variant", o.variant, "Prompt variant P1..P4");
        sub->add_option("--mask", o.mask, "Feature mask: all or MF1..MF5");
        sub->add_option("--runs", o.runs, "Inference reruns");
        sub->add_option("--temperature", o.temperature, "Sampling temperature");
        sub->add_option("--on", o.slice, "Evaluation slice: test or validation");
    };

    auto* ingest = app.add_subcommand("ingest", "Validate a corpus CSV and copy it into the state directory");
    ingest->add_option("path", o.ingest_path, "Corpus CSV")->required();
    ingest->add_flag("--unseen", o.unseen_flag, "Holdout file of unseen studies");

    auto* split = app.add_subcommand("split", "Seeded train/validation/test split");
    split->add_option("--seed", o.seed, "Split seed");
    split->add_option("--counts", o.counts, "train,validation,test (e.g. 144,23,41)");

    auto* gen = app.add_subcommand("gen-prompts", "Render training and query prompts");
    gen->add_option("--variant", o.variant, "Prompt variant P1..P4");
    gen->add_option("--mask", o.mask, "Feature mask: all or MF1..MF5");
    gen->add_option("--size", o.size, "Train on the first N entries");

    auto* ft = app.add_subcommand("finetune", "Upload training data and fine-tune a model");
    ft->add_option("--variant", o.variant, "Prompt variant P1..P4");
    ft->add_option("--mask", o.mask, "Feature mask: all or MF1..MF5");
    ft->add_option("--size", o.size, "Train on the first N entries");
    ft->add_option("--base-model", o.base_model, "Provider base model");
    ft->add_flag("--no-wait", o.no_wait, "Return after submitting");

    auto* infer = app.add_subcommand("infer", "Query a model on the test slice");
    infer->add_option("--model", o.model, "mock:replay, mock:nn, an alias or a model id")->required();
    add_eval_opts(infer);
    infer->get_option("--runs")->default_str("1");

    auto* evaluate = app.add_subcommand("evaluate", "Score a model on the test slice");
    evaluate->add_option("--model", o.model, "mock:replay, mock:nn, an alias or a model id")->required();
    evaluate->add_option("--label", o.label, "Report id");
    add_eval_opts(evaluate);

    auto* sweep = app.add_subcommand("sweep", "Run or resume an experiment campaign");
    sweep->add_option("--plan", o.plan, "Plan JSON")->required();
    sweep->add_flag("--resume", o.resume, "Continue an unfinished campaign");

    auto* unseen = app.add_subcommand("unseen", "Validate a model on unseen studies");
    unseen->add_option("--model", o.model, "mock:replay, mock:nn, an alias or a model id")->required();
    unseen->add_option("--unseen", o.unseen_path, "Unseen corpus CSV (default: ingested one)");
    unseen->add_option("--exclude", o.exclude, "Category left out of the second report, or none");
    add_eval_opts(unseen);

    auto* serve = app.add_subcommand("serve", "Serve the scenario prediction API");
    serve->add_option("--port", o.port, "Port (overrides config and NUDGECAST_PORT)");
    serve->add_option("--host", o.host, "Bind address");
    serve->add_option("--static-dir", o.static_dir, "Explorer assets served at /");
    serve->add_option("--model", o.model, "Default model");

    auto* reference = app.add_subcommand("reference", "Print the published reference values");

    std::vector<std::string> argv_store = {"nudgecast"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    spdlog::set_level(quiet ? spdlog::level::err
                            : verbose ? spdlog::level::debug : spdlog::level::info);
    try {
        if (reference->parsed()) {
            out << reference::render_published_reference();
            return 0;
        }
        auto cfg = load_cli_config(config_path ? std::optional<fs::path>(*config_path)
                                               : std::nullopt);
        if (state_dir) cfg.state_dir = *state_dir;
        if (backend_name) cfg.backend = *backend_name;
        if (corpus_path) cfg.corpus = fs::path(*corpus_path);
        Workspace ws(std::move(cfg), dry_run, force, out);

        if (ingest->parsed()) return cmd_ingest(ws, o);
        if (split->parsed()) return cmd_split(ws, o);
        if (gen->parsed()) return cmd_gen_prompts(ws, o);
        if (ft->parsed()) return cmd_finetune(ws, o);
        if (infer->parsed()) {
            if (!o.runs) o.runs = 1;
            return cmd_infer(ws, o);
        }
        if (evaluate->parsed()) return cmd_evaluate(ws, o);
        if (sweep->parsed()) return cmd_sweep(ws, o);
        if (unseen->parsed()) return cmd_unseen(ws, o);
        if (serve->parsed()) return cmd_serve(ws, o);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const BackendError& e) {
        err << "backend error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace nudgecast
