#include "nudgecast/promptgen.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "nudgecast/digest.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace {

constexpr std::string_view kTemplateVersion = "nudgecast-templates/1";

// Shared by every variant so the four models see identical features.
// Each feature sits on its own labelled line; parse_prompt_features relies
// on these labels.
constexpr std::string_view kUserSkeleton =
    "Research article summary:\n"
    "Title: {title}\n"
    "Goal: {goal}\n"
    "\n"
    "Experiment setup:\n"
    "Intervention: {intervention}\n"
    "Intervention type: {category}\n"
    "Location: {location}\n"
    "Year: {year}\n"
    "\n"
    "Target audience:\n"
    "Population: {population}\n"
    "Sample size: {sample_size} (treatment group: {treatment_n}, control group: {control_n})";

constexpr std::string_view kVerboseSystem =
    "You are a research assistant specialising in behavioural food policy. You read "
    "summaries of field and laboratory experiments that tried to change what people buy, "
    "choose, eat or throw away, and you predict how the intervention changed the measured "
    "dietary outcome. Your answer states the direction of the effect on the outcome, the "
    "Pearson r-coefficient and Cohen's d.";

constexpr std::string_view kStepInstructions =
    "Work through the following steps before answering:\n"
    "1. Identify the behaviour the intervention targets and the outcome that was measured.\n"
    "2. Consider how the location, year and audience shape the likely response.\n"
    "3. Decide whether the measured outcome went up or down in the treatment group.\n"
    "4. Estimate the size of the change as an r-coefficient and as Cohen's d.";

constexpr std::string_view kGuidedVerbose =
    "Please predict the direction of the effect, the r-coefficient and Cohen's d for this "
    "experiment.";

constexpr std::string_view kGuidedSimplified = "Please predict direction, r and d.";

PromptTemplate make_template(PromptVariant v) {
    PromptTemplate t;
    t.variant = v;
    t.version = std::string(kTemplateVersion);
    t.user_skeleton = std::string(kUserSkeleton);
    t.step_instructions = std::string(kStepInstructions);
    switch (v) {
        case PromptVariant::P1:
            t.system_text = std::string(kVerboseSystem);
            t.includes_step_instructions = true;
            t.completion_format = CompletionFormat::verbose;
            break;
        case PromptVariant::P2:
            t.system_text = std::string(kVerboseSystem);
            t.completion_format = CompletionFormat::verbose;
            break;
        case PromptVariant::P3:
            t.system_text = std::string(kVerboseSystem);
            t.includes_guided_completion = true;
            t.guided_completion = std::string(kGuidedVerbose);
            t.completion_format = CompletionFormat::verbose;
            break;
        case PromptVariant::P4:
            t.system_text = std::string(kVerboseSystem);
            t.includes_guided_completion = true;
            t.guided_completion = std::string(kGuidedSimplified);
            t.completion_format = CompletionFormat::simplified;
            break;
    }
    return t;
}

std::string escape_slot(std::string_view value) {
    std::string out;
    out.reserve(value.size());
    bool pending_space = false;
    for (char c : value) {
        if (c == '\r' || c == '\n') {
            pending_space = true;
            continue;
        }
        if (pending_space) {
            if (!out.empty() && out.back() != ' ') out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
        if (c == '{' || c == '}') out.push_back(c);
    }
    return out;
}

std::string unescape_slot(std::string_view value) {
    std::string out;
    for (std::size_t i = 0; i < value.size(); ++i) {
        out.push_back(value[i]);
        if ((value[i] == '{' || value[i] == '}') && i + 1 < value.size() &&
            value[i + 1] == value[i]) {
            ++i;
        }
    }
    return out;
}

bool slot_enabled(std::string_view slot, const FeatureMask& m) {
    if (slot == "title") return m.include_title;
    if (slot == "location") return m.include_geography;
    if (slot == "year") return m.include_timeframe;
    if (slot == "population") return m.include_audience;
    if (slot == "sample_size" || slot == "treatment_n" || slot == "control_n") {
        return m.include_sample_sizes;
    }
    return true;
}

std::vector<std::string_view> slots_in(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while ((pos = line.find('{', pos)) != std::string_view::npos) {
        auto end = line.find('}', pos);
        if (end == std::string_view::npos) break;
        out.push_back(line.substr(pos + 1, end - pos - 1));
        pos = end + 1;
    }
    return out;
}

std::vector<std::string_view> split(std::string_view text, std::string_view sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = text.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(text.substr(start));
            return out;
        }
        out.push_back(text.substr(start, pos - start));
        start = pos + sep.size();
    }
}

// Fills slots in one pass; substituted values are never rescanned.
std::string fill(std::string_view line, const std::map<std::string_view, std::string>& values) {
    std::string out;
    std::size_t pos = 0;
    while (pos < line.size()) {
        auto open = line.find('{', pos);
        if (open == std::string_view::npos) break;
        auto close = line.find('}', open);
        if (close == std::string_view::npos) break;
        out.append(line.substr(pos, open - pos));
        auto name = line.substr(open + 1, close - open - 1);
        auto it = values.find(name);
        if (it == values.end()) {
            throw ValidationError(fmt::format("template slot '{{{}}}' is unknown", name));
        }
        out += it->second;
        pos = close + 1;
    }
    out.append(line.substr(pos));
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace

std::string_view to_string(PromptVariant v) {
    static constexpr std::array<std::string_view, 4> names = {"P1", "P2", "P3", "P4"};
    return names[static_cast<int>(v)];
}

std::optional<PromptVariant> parse_variant(std::string_view text) {
    if (text == "P1" || text == "p1") return PromptVariant::P1;
    if (text == "P2" || text == "p2") return PromptVariant::P2;
    if (text == "P3" || text == "p3") return PromptVariant::P3;
    if (text == "P4" || text == "p4") return PromptVariant::P4;
    return std::nullopt;
}

const PromptTemplate& builtin_template(PromptVariant v) {
    static const std::array<PromptTemplate, 4> templates = {
        make_template(PromptVariant::P1), make_template(PromptVariant::P2),
        make_template(PromptVariant::P3), make_template(PromptVariant::P4)};
    return templates[static_cast<int>(v)];
}

std::string_view template_version() { return kTemplateVersion; }

FeatureMask FeatureMask::preset(int mf) {
    FeatureMask m;
    switch (mf) {
        case 1: m.include_title = false; break;
        case 2: m.include_geography = false; break;
        case 3: m.include_timeframe = false; break;
        case 4: m.include_audience = false; break;
        case 5: m.include_sample_sizes = false; break;
        default: throw ValidationError(fmt::format("unknown feature-mask preset MF{}", mf));
    }
    return m;
}

std::optional<FeatureMask> parse_mask(std::string_view name) {
    if (name == "all" || name == "MP4" || name == "baseline") return FeatureMask::all();
    if (name.size() == 3 && (name.starts_with("MF") || name.starts_with("mf")) &&
        name[2] >= '1' && name[2] <= '5') {
        return FeatureMask::preset(name[2] - '0');
    }
    return std::nullopt;
}

std::string mask_name(const FeatureMask& mask) {
    if (mask == FeatureMask::all()) return "all";
    for (int i = 1; i <= 5; ++i) {
        if (mask == FeatureMask::preset(i)) return fmt::format("MF{}", i);
    }
    return fmt::format("custom-{}{}{}{}{}", int(mask.include_title), int(mask.include_geography),
                       int(mask.include_timeframe), int(mask.include_audience),
                       int(mask.include_sample_sizes));
}

std::string_view to_string(Role r) {
    switch (r) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

bool ChatPrompt::is_query() const {
    return messages.size() == 2 && messages[0].role == Role::system &&
           messages[1].role == Role::user;
}

bool ChatPrompt::is_training() const {
    return messages.size() == 3 && messages[0].role == Role::system &&
           messages[1].role == Role::user && messages[2].role == Role::assistant;
}

const std::string& ChatPrompt::user_text() const {
    for (const auto& m : messages) {
        if (m.role == Role::user) return m.content;
    }
    throw ValidationError("prompt has no user message");
}

nlohmann::json ChatPrompt::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& m : messages) {
        arr.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    }
    return {{"messages", std::move(arr)}};
}

ChatPrompt ChatPrompt::from_json(const nlohmann::json& j) {
    ChatPrompt p;
    if (!j.is_object() || !j.contains("messages") || !j["messages"].is_array()) {
        throw ValidationError("chat record lacks a messages array");
    }
    for (const auto& m : j["messages"]) {
        auto role = m.at("role").get<std::string>();
        ChatMessage msg;
        if (role == "system") msg.role = Role::system;
        else if (role == "user") msg.role = Role::user;
        else if (role == "assistant") msg.role = Role::assistant;
        else throw ValidationError("unknown chat role '" + role + "'");
        msg.content = m.at("content").get<std::string>();
        p.messages.push_back(std::move(msg));
    }
    return p;
}

std::string ChatPrompt::digest() const { return sha256_hex(to_json().dump()); }

ChatPrompt render_prompt(const PromptTemplate& tmpl, const StudyRecord& study,
                         const FeatureMask& mask) {
    const std::map<std::string_view, std::string> values = {
        {"title", escape_slot(study.paper_title)},
        {"goal", escape_slot(study.goal_summary)},
        {"intervention", escape_slot(study.intervention_text)},
        {"category", std::string(to_string(study.intervention_category))},
        {"location", escape_slot(study.location)},
        {"year", std::to_string(study.year)},
        {"population", escape_slot(study.population)},
        {"sample_size", std::to_string(study.sample_size)},
        {"treatment_n", std::to_string(study.treatment_n)},
        {"control_n", std::to_string(study.control_n)},
    };

    // A line naming a disabled slot disappears; a block whose slot lines all
    // disappeared loses its header as well.
    std::vector<std::string> blocks;
    for (auto block : split(tmpl.user_skeleton, "\n\n")) {
        std::vector<std::string> kept;
        bool had_slots = false, kept_slots = false;
        for (auto line : split(block, "\n")) {
            auto slots = slots_in(line);
            if (slots.empty()) {
                kept.push_back(std::string(line));
                continue;
            }
            had_slots = true;
            if (std::all_of(slots.begin(), slots.end(),
                            [&](auto s) { return slot_enabled(s, mask); })) {
                kept.push_back(fill(line, values));
                kept_slots = true;
            }
        }
        if (had_slots && !kept_slots) continue;
        std::string joined;
        for (std::size_t i = 0; i < kept.size(); ++i) {
            if (i) joined += '\n';
            joined += kept[i];
        }
        blocks.push_back(std::move(joined));
    }
    if (tmpl.includes_step_instructions) blocks.push_back(tmpl.step_instructions);
    if (tmpl.includes_guided_completion) blocks.push_back(tmpl.guided_completion);

    std::string user;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (i) user += "\n\n";
        user += blocks[i];
    }
    return ChatPrompt{{{Role::system, tmpl.system_text}, {Role::user, std::move(user)}}};
}

std::string format_3dp(double value) {
    // shortest round-trip decimal, then decimal rounding (half away from zero)
    auto text = fmt::format("{}", value);
    bool negative = text.starts_with('-');
    if (negative) text.erase(0, 1);
    if (text.find_first_of("eE") != std::string::npos) {
        // tiny or huge magnitudes: fall back to fixed notation with spare digits
        text = fmt::format("{:.20f}", std::fabs(value));
    }
    auto dot = text.find('.');
    std::string int_part = dot == std::string::npos ? text : text.substr(0, dot);
    std::string frac = dot == std::string::npos ? "" : text.substr(dot + 1);
    bool round_up = frac.size() > 3 && frac[3] >= '5';
    frac.resize(3, '0');
    std::string digits = int_part + frac;
    if (round_up) {
        int i = static_cast<int>(digits.size()) - 1;
        for (; i >= 0; --i) {
            if (digits[i] == '9') {
                digits[i] = '0';
            } else {
                ++digits[i];
                break;
            }
        }
        if (i < 0) digits.insert(digits.begin(), '1');
    }
    auto split_at = digits.size() - 3;
    std::string out = digits.substr(0, split_at) + "." + digits.substr(split_at);
    return (negative ? "-" : "") + out;
}

std::string render_completion(const EffectOutcome& outcome, const PromptTemplate& tmpl,
                              NumberFormat numbers) {
    const auto dir = to_string(outcome.direction);
    auto number = [numbers](double v) {
        return numbers == NumberFormat::round_trip ? fmt::format("{}", v) : format_3dp(v);
    };
    const auto r = number(outcome.r);
    const auto d = number(outcome.d);
    if (tmpl.completion_format == CompletionFormat::simplified) {
        return fmt::format("direction: {}; r: {}; d: {}", dir, r, d);
    }
    return fmt::format(
        "The intervention had a {} effect on the measured outcome. The r-coefficient is {} "
        "and Cohen's d is {}.",
        dir, r, d);
}

TrainingRecord build_training_record(const Entry& entry, const PromptTemplate& tmpl,
                                     const FeatureMask& mask) {
    if (entry.holdout) {
        throw ContaminationError("study '" + entry.study.study_id +
                                 "' is a holdout study and cannot be used for training");
    }
    TrainingRecord rec;
    rec.study_id = entry.study.study_id;
    rec.prompt = render_prompt(tmpl, entry.study, mask);
    rec.prompt.messages.push_back({Role::assistant, render_completion(entry.outcome, tmpl)});
    return rec;
}

std::vector<TrainingRecord> build_training_records(std::span<const Entry> entries,
                                                   const PromptTemplate& tmpl,
                                                   const FeatureMask& mask) {
    std::vector<TrainingRecord> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(build_training_record(e, tmpl, mask));
    return out;
}

std::string training_jsonl(std::span<const TrainingRecord> records) {
    std::string out;
    for (const auto& rec : records) {
        if (!rec.prompt.is_training()) {
            throw ValidationError("record for study '" + rec.study_id +
                                  "' is not a training prompt");
        }
        out += rec.prompt.to_json().dump();
        out += '\n';
    }
    return out;
}

TrainingFile export_training_file(std::span<const TrainingRecord> records,
                                  const std::filesystem::path& path) {
    if (records.empty()) throw ValidationError("empty training file");
    auto bytes = training_jsonl(records);
    write_file_atomic(path, bytes);
    TrainingFile f;
    f.path = path;
    f.digest = sha256_hex(bytes);
    f.record_count = records.size();
    for (const auto& r : records) f.study_ids.push_back(r.study_id);
    return f;
}

std::vector<ChatPrompt> read_training_file(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<ChatPrompt> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            out.push_back(ChatPrompt::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(
                fmt::format("{} line {}: {}", path.string(), line_no, e.what()));
        }
    }
    return out;
}

void guard_no_holdout(const TrainingFile& file, const Corpus& holdout) {
    for (const auto& id : file.study_ids) {
        if (auto i = holdout.find(id); i && holdout[*i].holdout) {
            throw ContaminationError("training file " + file.path.string() +
                                     " contains holdout study '" + id + "'");
        }
    }
}

PromptFeatures parse_prompt_features(std::string_view user_text) {
    PromptFeatures f;
    for (auto line : split(user_text, "\n")) {
        auto colon = line.find(": ");
        if (colon == std::string_view::npos) continue;
        auto label = line.substr(0, colon);
        auto value = trim(line.substr(colon + 2));
        if (label == "Title") {
            f.title = unescape_slot(value);
        } else if (label == "Intervention") {
            f.intervention = unescape_slot(value);
        } else if (label == "Intervention type") {
            f.category = parse_category(value);
        } else if (label == "Location") {
            f.location = unescape_slot(value);
        } else if (label == "Year") {
            int y = 0;
            if (std::from_chars(value.data(), value.data() + value.size(), y).ec == std::errc{}) {
                f.year = y;
            }
        } else if (label == "Population") {
            f.population = unescape_slot(value);
        } else if (label == "Sample size") {
            std::int64_t n = 0;
            if (std::from_chars(value.data(), value.data() + value.size(), n).ec == std::errc{}) {
                f.sample_size = n;
            }
        }
    }
    return f;
}

}  // namespace nudgecast
