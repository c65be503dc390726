#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nudgecast/corpus.hpp"

namespace nudgecast {

enum class PromptVariant { P1, P2, P3, P4 };
enum class CompletionFormat { verbose, simplified };

std::string_view to_string(PromptVariant v);
std::optional<PromptVariant> parse_variant(std::string_view text);

/// Template t of p = f_prompt(t, x).
///
/// The user message is the filled `user_skeleton`, followed (separated by a
/// blank line) by `step_instructions` when enabled and then by
/// `guided_completion` when enabled. Skeleton slots are written `{name}`;
/// known names are title, goal, intervention, category, location, year,
/// population, sample_size, treatment_n, control_n.
struct PromptTemplate {
    PromptVariant variant = PromptVariant::P4;
    std::string version;
    std::string system_text;
    std::string user_skeleton;
    std::string step_instructions;
    std::string guided_completion;
    bool includes_step_instructions = false;
    bool includes_guided_completion = false;
    CompletionFormat completion_format = CompletionFormat::simplified;
};

/// Built-in template for a variant. P1 is the verbose seed with step
/// instructions; P2 drops the steps; P3 appends guided completion; P4
/// keeps P3's body and asks for the compact numeric triple.
const PromptTemplate& builtin_template(PromptVariant v);

/// Version tag shared by the built-in templates.
std::string_view template_version();

struct FeatureMask {
    bool include_title = true;
    bool include_geography = true;
    bool include_timeframe = true;
    bool include_audience = true;
    bool include_sample_sizes = true;

    static FeatureMask all() { return {}; }
    /// Ablation presets: MF1 title, MF2 geography, MF3 timeframe,
    /// MF4 audience, MF5 sample sizes.
    static FeatureMask preset(int mf);

    bool operator==(const FeatureMask&) const = default;
};

/// "all" or "MF1".."MF5"; anything else is nullopt.
std::optional<FeatureMask> parse_mask(std::string_view name);
/// Inverse of parse_mask for the named presets; custom masks render as
/// "custom-xxxxx" with one 0/1 digit per feature.
std::string mask_name(const FeatureMask& mask);

enum class Role { system, user, assistant };
std::string_view to_string(Role r);

struct ChatMessage {
    Role role = Role::user;
    std::string content;
    bool operator==(const ChatMessage&) const = default;
};

/// Role-tagged message sequence p.
struct ChatPrompt {
    std::vector<ChatMessage> messages;

    bool is_query() const;     ///< system, user
    bool is_training() const;  ///< system, user, assistant
    const std::string& user_text() const;

    nlohmann::json to_json() const;
    static ChatPrompt from_json(const nlohmann::json& j);
    /// SHA-256 over the compact JSON form.
    std::string digest() const;

    bool operator==(const ChatPrompt&) const = default;
};

/// Query prompt: system + user message. Masked features leave no trace.
/// Slot values have braces doubled and line breaks folded to spaces.
ChatPrompt render_prompt(const PromptTemplate& tmpl, const StudyRecord& study,
                         const FeatureMask& mask);

/// Numbers carry exactly three decimals, rounded half away from zero on
/// the shortest decimal representation of the value.
std::string format_3dp(double value);

/// three_decimals is the label format of training files. round_trip
/// prints the shortest decimal that parses back to the same double; the
/// ground-truth oracle uses it so replay evaluation is exact.
enum class NumberFormat { three_decimals, round_trip };

std::string render_completion(const EffectOutcome& outcome, const PromptTemplate& tmpl,
                              NumberFormat numbers = NumberFormat::three_decimals);

/// One fine-tuning example, tagged with its study for contamination checks.
struct TrainingRecord {
    std::string study_id;
    ChatPrompt prompt;
};

/// render_prompt plus the assistant completion.
/// Throws ContaminationError for holdout entries.
TrainingRecord build_training_record(const Entry& entry, const PromptTemplate& tmpl,
                                     const FeatureMask& mask);

std::vector<TrainingRecord> build_training_records(std::span<const Entry> entries,
                                                   const PromptTemplate& tmpl,
                                                   const FeatureMask& mask);

/// Metadata of an exported JSONL training file.
struct TrainingFile {
    std::filesystem::path path;
    std::string digest;
    std::size_t record_count = 0;
    std::vector<std::string> study_ids;
};

/// Serialized JSONL bytes (one {"messages":[...]} object per line).
std::string training_jsonl(std::span<const TrainingRecord> records);

/// Writes the JSONL file and returns its digest. Throws ValidationError
/// for an empty record list or a non-training prompt.
TrainingFile export_training_file(std::span<const TrainingRecord> records,
                                  const std::filesystem::path& path);

/// Reads a JSONL training file back (study ids are not stored in the file).
std::vector<ChatPrompt> read_training_file(const std::filesystem::path& path);

/// Throws ContaminationError if any study of `file` is in `holdout`.
void guard_no_holdout(const TrainingFile& file, const Corpus& holdout);

/// Features recovered from a rendered user message. Absent when masked.
struct PromptFeatures {
    std::optional<std::string> title;
    std::optional<std::string> intervention;
    std::optional<InterventionCategory> category;
    std::optional<std::string> location;
    std::optional<int> year;
    std::optional<std::string> population;
    std::optional<std::int64_t> sample_size;
};

/// Reads the labelled feature lines every built-in template shares.
PromptFeatures parse_prompt_features(std::string_view user_text);

}  // namespace nudgecast
