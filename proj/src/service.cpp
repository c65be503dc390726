#include "nudgecast/service.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <thread>

#include "nudgecast/digest.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace fs = std::filesystem;

ServiceConfig ServiceConfig::from_json(const nlohmann::json& j) {
    ServiceConfig c;
    try {
        c.host = j.value("host", c.host);
        c.port = j.value("port", c.port);
        if (j.contains("state_dir")) c.state_dir = j["state_dir"].get<std::string>();
        if (j.contains("static_dir") && !j["static_dir"].is_null()) {
            c.static_dir = j["static_dir"].get<std::string>();
        }
        if (j.contains("models")) {
            for (const auto& m : j["models"]) {
                c.models.push_back(m.is_string() ? ModelRef{Provider::remote, m.get<std::string>(), ""}
                                                 : ModelRef::from_json(m));
            }
        }
        if (j.contains("variant")) {
            auto v = parse_variant(j["variant"].get<std::string>());
            if (!v) throw ValidationError("service: unknown variant " + j["variant"].dump());
            c.variant = *v;
        }
        c.parallelism = j.value("parallelism", c.parallelism);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("service config: ") + e.what());
    }
    return c;
}

void apply_env_overrides(ServiceConfig& config) {
    const char* port = std::getenv(kPortEnv);
    if (!port || !*port) return;
    char* end = nullptr;
    long v = std::strtol(port, &end, 10);
    if (*end != '\0' || v < 0 || v > 65535) {
        throw ValidationError(fmt::format("{}='{}' is not a port number", kPortEnv, port));
    }
    config.port = static_cast<int>(v);
}

namespace {

std::optional<std::string> text_field(const nlohmann::json& body, const char* key, bool required,
                                      FieldErrors& errors) {
    if (!body.contains(key) || body[key].is_null()) {
        if (required) errors[key] = fmt::format("{} is required", key);
        return std::nullopt;
    }
    if (!body[key].is_string()) {
        errors[key] = fmt::format("{} must be a string", key);
        return std::nullopt;
    }
    auto v = body[key].get<std::string>();
    if (required && v.find_first_not_of(" \t\r\n") == std::string::npos) {
        errors[key] = fmt::format("{} must not be empty", key);
        return std::nullopt;
    }
    return v;
}

std::optional<std::int64_t> int_field(const nlohmann::json& body, const char* key,
                                      FieldErrors& errors) {
    if (!body.contains(key) || body[key].is_null()) {
        errors[key] = fmt::format("{} is required", key);
        return std::nullopt;
    }
    const auto& v = body[key];
    if (v.is_number_integer()) return v.get<std::int64_t>();
    if (v.is_number_float()) {
        double x = v.get<double>();
        if (x == std::floor(x) && std::fabs(x) < 9e15) return static_cast<std::int64_t>(x);
    }
    errors[key] = fmt::format("{} must be an integer", key);
    return std::nullopt;
}

std::optional<std::int64_t> positive(const nlohmann::json& body, const char* key,
                                     FieldErrors& errors) {
    auto v = int_field(body, key, errors);
    if (v && *v < 1) {
        errors[key] = fmt::format("{} must be positive", key);
        return std::nullopt;
    }
    return v;
}

nlohmann::json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

HttpReply json_reply(int status, const nlohmann::json& j) { return {status, j.dump(), "application/json"}; }

HttpReply error_reply(int status, const std::string& message) {
    return json_reply(status, {{"error", message}});
}

bool safe_id(const std::string& id) {
    if (id.empty() || id.size() > 200) return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' ||
               c == '~';
    }) && id.find("..") == std::string::npos;
}

}  // namespace

std::optional<ScenarioRequest> parse_scenario_request(const nlohmann::json& body,
                                                      FieldErrors& errors) {
    if (!body.is_object()) {
        errors["body"] = "request body must be a JSON object";
        return std::nullopt;
    }
    ScenarioRequest req;
    auto& s = req.study;
    s.study_id = "scenario";
    if (auto v = text_field(body, "title", false, errors)) s.paper_title = *v;
    if (auto v = text_field(body, "goal", false, errors)) s.goal_summary = *v;
    if (auto v = text_field(body, "intervention_text", true, errors)) s.intervention_text = *v;
    if (auto v = text_field(body, "intervention_category", true, errors)) {
        if (auto c = parse_category(*v)) {
            s.intervention_category = *c;
        } else {
            errors["intervention_category"] =
                "intervention_category must be one of monetary, information, nudge, other";
        }
    }
    if (auto v = text_field(body, "location", true, errors)) s.location = *v;
    if (auto v = int_field(body, "year", errors)) {
        if (*v < 1950 || *v > 2100) {
            errors["year"] = "year must lie in [1950, 2100]";
        } else {
            s.year = static_cast<int>(*v);
        }
    }
    if (auto v = text_field(body, "population", true, errors)) s.population = *v;
    if (auto v = positive(body, "sample_size", errors)) s.sample_size = *v;
    if (auto v = positive(body, "treatment_n", errors)) s.treatment_n = *v;
    if (auto v = positive(body, "control_n", errors)) s.control_n = *v;

    if (body.contains("model") && !body["model"].is_null()) {
        if (auto v = text_field(body, "model", true, errors)) req.model = *v;
    }
    if (body.contains("n_runs") && !body["n_runs"].is_null()) {
        auto v = int_field(body, "n_runs", errors);
        if (v && (*v < 1 || *v > 50)) {
            errors["n_runs"] = "n_runs must lie in [1, 50]";
        } else if (v) {
            req.n_runs = static_cast<std::size_t>(*v);
        }
    }
    if (body.contains("temperature") && !body["temperature"].is_null()) {
        const auto& t = body["temperature"];
        if (!t.is_number() || !std::isfinite(t.get<double>()) || t.get<double>() < 0 ||
            t.get<double>() > 2) {
            errors["temperature"] = "temperature must be a number in [0, 2]";
        } else {
            req.temperature = t.get<double>();
        }
    }
    if (!errors.empty()) return std::nullopt;
    return req;
}

ScenarioAggregate aggregate_predictions(std::span<const PredictionRecord> runs) {
    ScenarioAggregate a;
    std::size_t pos = 0, neg = 0;
    std::vector<double> rs, ds;
    for (const auto& p : runs) {
        if (p.direction) (*p.direction == Direction::positive ? pos : neg)++;
        if (p.r_pred) rs.push_back(*p.r_pred);
        if (p.d_pred) ds.push_back(*p.d_pred);
    }
    a.n_direction = pos + neg;
    if (a.n_direction > 0) {
        a.direction = pos > neg ? Direction::positive : Direction::negative;
        a.vote_share = static_cast<double>(std::max(pos, neg)) / static_cast<double>(a.n_direction);
    }
    auto stats = [](const std::vector<double>& xs) -> std::optional<RangeStats> {
        if (xs.empty()) return std::nullopt;
        RangeStats s;
        s.n = xs.size();
        double sum = 0;
        for (double x : xs) sum += x;
        s.mean = sum / static_cast<double>(xs.size());
        auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
        s.min = *lo;
        s.max = *hi;
        return s;
    };
    a.r = stats(rs);
    a.d = stats(ds);
    return a;
}

nlohmann::json ScenarioAggregate::to_json() const {
    auto range = [](const std::optional<RangeStats>& s) -> nlohmann::json {
        if (!s) return nullptr;
        return {{"n", s->n}, {"mean", s->mean}, {"min", s->min}, {"max", s->max}};
    };
    return {{"direction", direction ? nlohmann::json(to_string(*direction)) : nlohmann::json(nullptr)},
            {"vote_share", vote_share},
            {"n_direction", n_direction},
            {"r", range(r)},
            {"d", range(d)}};
}

nlohmann::json ScenarioResponse::to_json() const {
    auto rj = nlohmann::json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& p = runs[i];
        rj.push_back({{"run", i},
                      {"seed", i},
                      {"raw_text", p.raw_text},
                      {"direction", p.direction ? nlohmann::json(to_string(*p.direction))
                                                : nlohmann::json(nullptr)},
                      {"r_pred", opt_json(p.r_pred)},
                      {"d_pred", opt_json(p.d_pred)}});
    }
    return {{"model", model.to_json()},
            {"prompt_digest", prompt_digest},
            {"variant", variant},
            {"mask", mask},
            {"temperature", temperature},
            {"n_runs", runs.size()},
            {"runs", rj},
            {"aggregate", aggregate.to_json()}};
}

std::vector<ReportEntry> list_reports(const fs::path& state_dir) {
    std::vector<ReportEntry> out;
    std::error_code ec;
    auto reports = state_dir / "reports";
    if (fs::is_directory(reports, ec)) {
        for (const auto& f : fs::directory_iterator(reports)) {
            if (f.path().extension() == ".json") out.push_back({f.path().stem().string(), f.path()});
        }
    }
    auto campaigns = state_dir / "campaigns";
    if (fs::is_directory(campaigns, ec)) {
        for (const auto& camp : fs::directory_iterator(campaigns)) {
            if (!camp.is_directory()) continue;
            const auto cid = camp.path().filename().string();
            for (const char* name : {"unseen-full", "unseen-excluded", "unseen-naive"}) {
                auto p = camp.path() / (std::string(name) + ".json");
                if (fs::exists(p)) out.push_back({cid + "~" + name, p});
            }
            auto cells = camp.path() / "cells";
            if (!fs::is_directory(cells, ec)) continue;
            for (const auto& cell : fs::directory_iterator(cells)) {
                auto p = cell.path() / "report.json";
                if (fs::exists(p)) out.push_back({cid + "~" + cell.path().filename().string(), p});
            }
        }
    }
    std::sort(out.begin(), out.end(),
              [](const ReportEntry& a, const ReportEntry& b) { return a.id < b.id; });
    return out;
}

struct Service::Server {
    httplib::Server http;
    std::thread thread;
};

Service::Service(Backend& backend, ServiceConfig config)
    : backend_(backend), config_(std::move(config)) {}

Service::~Service() { stop(); }

std::size_t Service::cache_size() const {
    std::shared_lock lock(cache_mu_);
    return cache_.size();
}

std::optional<ModelRef> Service::resolve_model(const std::optional<std::string>& id) const {
    if (!id) {
        if (config_.models.empty()) return std::nullopt;
        return config_.models.front();
    }
    for (const auto& m : config_.models) {
        if (m.model_id == *id) return m;
    }
    if (backend_.knows_model(*id)) return ModelRef{backend_.provider(), *id, ""};
    return std::nullopt;
}

HttpReply Service::predict(const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
        return json_reply(400, {{"error", "invalid request"},
                                {"fields", {{"body", "request body is not valid JSON"}}}});
    }
    FieldErrors errors;
    auto req = parse_scenario_request(j, errors);
    if (!req) return json_reply(400, {{"error", "invalid request"}, {"fields", errors}});

    auto model = resolve_model(req->model);
    if (!model) {
        return error_reply(404, req->model ? fmt::format("unknown model '{}'", *req->model)
                                           : std::string("no model configured"));
    }
    const auto& tmpl = builtin_template(config_.variant);
    const auto mask = FeatureMask::all();
    auto prompt = render_prompt(tmpl, req->study, mask);
    auto digest = prompt.digest();
    auto key = sha256_hex(fmt::format("{}|{}|{:.17g}|{}", model->model_id, digest,
                                      req->temperature, req->n_runs));
    {
        std::shared_lock lock(cache_mu_);
        if (auto it = cache_.find(key); it != cache_.end()) return {200, it->second};
    }

    ScenarioResponse resp;
    resp.model = *model;
    resp.prompt_digest = digest;
    resp.variant = std::string(to_string(tmpl.variant));
    resp.mask = mask_name(mask);
    resp.temperature = req->temperature;
    resp.runs.resize(req->n_runs);

    std::atomic<std::size_t> next{0};
    std::mutex fail_mu;
    std::exception_ptr failure;
    auto worker = [&] {
        for (auto i = next.fetch_add(1); i < req->n_runs; i = next.fetch_add(1)) {
            try {
                CompletionOptions co{req->temperature, i, fmt::format("scenario#run{}", i)};
                resp.runs[i] = parse_prediction("scenario", backend_.complete(*model, prompt, co));
            } catch (...) {
                std::lock_guard lock(fail_mu);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        auto n = std::max<std::size_t>(1, std::min(config_.parallelism, req->n_runs));
        for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    }
    if (failure) {
        try {
            std::rethrow_exception(failure);
        } catch (const NotFoundError& e) {
            return error_reply(404, e.what());
        } catch (const std::exception& e) {
            spdlog::error("predict: {}", e.what());
            return json_reply(502, {{"error", fmt::format("model backend failed: {}", e.what())},
                                    {"retryable", true}});
        }
    }
    resp.aggregate = aggregate_predictions(resp.runs);
    auto out = resp.to_json().dump();
    {
        std::unique_lock lock(cache_mu_);
        cache_[key] = out;
    }
    return {200, out};
}

HttpReply Service::models() const {
    auto arr = nlohmann::json::array();
    for (std::size_t i = 0; i < config_.models.size(); ++i) {
        auto m = config_.models[i].to_json();
        m["default"] = i == 0;
        arr.push_back(std::move(m));
    }
    return json_reply(200, {{"models", arr}, {"variant", to_string(config_.variant)}});
}

HttpReply Service::reports() const {
    auto arr = nlohmann::json::array();
    for (const auto& r : list_reports(config_.state_dir)) {
        nlohmann::json item = {{"id", r.id}};
        try {
            auto j = nlohmann::json::parse(read_file(r.path));
            for (const char* k : {"model_id", "variant", "mask", "n_test", "n_runs",
                                  "direction_coverage", "direction_accuracy", "r_error_mean",
                                  "d_error_mean"}) {
                if (j.contains(k)) item[k] = j[k];
            }
        } catch (const std::exception& e) {
            item["error"] = e.what();
        }
        arr.push_back(std::move(item));
    }
    return json_reply(200, {{"reports", arr}});
}

HttpReply Service::report(const std::string& id) const {
    if (safe_id(id)) {
        for (const auto& r : list_reports(config_.state_dir)) {
            if (r.id == id) return {200, read_file(r.path)};
        }
    }
    return error_reply(404, fmt::format("unknown report '{}'", id));
}

bool Service::serve() {
    if (start() < 0) return false;
    if (server_ && server_->thread.joinable()) server_->thread.join();
    return true;
}

int Service::start() {
    stop();
    server_ = std::make_unique<Server>();
    auto& http = server_->http;
    auto send = [](httplib::Response& res, const HttpReply& reply) {
        res.status = reply.status;
        res.set_content(reply.body, reply.content_type);
    };
    http.Post("/api/predict", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, predict(req.body));
    });
    http.Get("/api/models", [this, send](const httplib::Request&, httplib::Response& res) {
        send(res, models());
    });
    http.Get("/api/reports", [this, send](const httplib::Request&, httplib::Response& res) {
        send(res, reports());
    });
    http.Get(R"(/api/reports/([^/]+))",
             [this, send](const httplib::Request& req, httplib::Response& res) {
                 send(res, report(req.matches[1].str()));
             });
    if (config_.static_dir && fs::is_directory(*config_.static_dir)) {
        http.set_mount_point("/", config_.static_dir->string());
    }
    http.set_exception_handler(
        [](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string msg = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                msg = e.what();
            }
            res.status = 500;
            res.set_content(nlohmann::json({{"error", msg}}).dump(), "application/json");
        });

    int port = config_.port;
    if (port == 0) {
        port = http.bind_to_any_port(config_.host);
    } else if (!http.bind_to_port(config_.host, port)) {
        port = -1;
    }
    if (port < 0) {
        spdlog::error("cannot bind {}:{}", config_.host, config_.port);
        server_.reset();
        return -1;
    }
    server_->thread = std::thread([this] { server_->http.listen_after_bind(); });
    server_->http.wait_until_ready();
    spdlog::info("serving on http://{}:{}", config_.host, port);
    return port;
}

void Service::stop() {
    if (!server_) return;
    server_->http.stop();
    if (server_->thread.joinable()) server_->thread.join();
    server_.reset();
}

}  // namespace nudgecast
