#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace nudgecast {

enum class Direction { positive, negative };

enum class InterventionCategory { monetary, information, nudge, other };

std::string_view to_string(Direction d);
std::string_view to_string(InterventionCategory c);
std::optional<Direction> parse_direction(std::string_view text);
std::optional<InterventionCategory> parse_category(std::string_view text);

/// Features x of one experiment.
struct StudyRecord {
    std::string study_id;
    std::string paper_title;
    std::string goal_summary;
    std::string intervention_text;
    InterventionCategory intervention_category = InterventionCategory::other;
    std::string location;
    int year = 0;
    std::string population;
    std::int64_t sample_size = 0;
    std::int64_t treatment_n = 0;
    std::int64_t control_n = 0;

    bool operator==(const StudyRecord&) const = default;
};

/// Raw statistics an effect size was derived from.
struct TwoGroupMeans {
    double m1 = 0, m2 = 0, s1 = 0, s2 = 0;
    std::int64_t n1 = 0, n2 = 0;
    bool operator==(const TwoGroupMeans&) const = default;
};
struct PrecomputedR {
    double r = 0;
    bool operator==(const PrecomputedR&) const = default;
};
struct PrecomputedD {
    double d = 0;
    bool operator==(const PrecomputedD&) const = default;
};
using RawStats = std::variant<TwoGroupMeans, PrecomputedR, PrecomputedD>;

/// Outcome y of one experiment. `r` and `d` always satisfy d = 2r/sqrt(1-r^2).
struct EffectOutcome {
    Direction direction = Direction::positive;
    double r = 0;
    double d = 0;
    std::optional<RawStats> source;

    bool operator==(const EffectOutcome&) const = default;
};

/// Builds a consistent outcome from r alone. Throws ValidationError for
/// r == 0 or |r| >= 1.
EffectOutcome outcome_from_r(double r);
EffectOutcome outcome_from_d(double d);

struct Entry {
    StudyRecord study;
    EffectOutcome outcome;
    /// Unseen/preregistered study: never eligible for training exports.
    bool holdout = false;

    bool operator==(const Entry&) const = default;
};

/// The dataset D: ordered (x, y) pairs plus the digest of the source file.
class Corpus {
public:
    Corpus() = default;
    /// Validates id uniqueness. Throws ValidationError on duplicates.
    Corpus(std::vector<Entry> entries, std::string provenance);

    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    const std::string& provenance() const noexcept { return provenance_; }

    /// Index of a study id, if present.
    std::optional<std::size_t> find(std::string_view study_id) const;

    /// Entries at the given indices, in index order.
    std::vector<Entry> select(std::span<const std::size_t> indices) const;

    /// Same entries, ignoring provenance.
    bool same_entries(const Corpus& other) const { return entries_ == other.entries_; }

private:
    std::vector<Entry> entries_;
    std::string provenance_;
};

inline constexpr std::string_view kCorpusHeader =
    "study_id,paper_title,goal_summary,intervention_text,intervention_category,location,"
    "year,population,sample_size,treatment_n,control_n,direction,r,d";

/// Parses corpus CSV text. `provenance` is stored verbatim.
/// Errors name the data row (1-based, header excluded) and the field.
Corpus parse_corpus(std::string_view text, std::string provenance, bool holdout = false);

/// Reads and validates a corpus file. Provenance is the file's SHA-256.
Corpus ingest_corpus(const std::filesystem::path& path);

/// As ingest_corpus, with every entry flagged holdout.
Corpus load_unseen(const std::filesystem::path& path);

/// CSV text with the fixed header; r and d written with 17 significant digits.
std::string export_corpus(const Corpus& corpus);

/// Entries not matching `category`; preserves order and flags.
Corpus exclude_category(const Corpus& corpus, InterventionCategory category);

/// Parses a year cell. Ranges such as "2015-2017" collapse to the end year.
std::optional<int> parse_year(std::string_view text);

// ---------------------------------------------------------------------------
// Splits

struct SplitCounts {
    std::size_t train = 0;
    std::size_t validation = 0;
    std::size_t test = 0;
    std::size_t total() const { return train + validation + test; }
    bool operator==(const SplitCounts&) const = default;
};

struct SplitSpec {
    std::uint64_t seed = 0;
    SplitCounts counts;
};

/// Three disjoint index lists into a corpus.
struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;

    SplitCounts counts() const { return {train.size(), validation.size(), test.size()}; }
    bool operator==(const Split&) const = default;
};

/// xorshift64* seeded through one splitmix64 step. Output sequence is fixed
/// for a given seed on every platform.
class Xorshift64Star {
public:
    explicit Xorshift64Star(std::uint64_t seed);
    std::uint64_t next();
    /// Uniform integer in [0, bound) by rejection; bound must be > 0.
    std::uint64_t below(std::uint64_t bound);

private:
    std::uint64_t state_;
};

/// Seeded Fisher-Yates permutation of 0..N-1 (Xorshift64Star), then the
/// first `train` indices go to train, the next `validation` to validation,
/// the remainder to test.
Split split_corpus(const Corpus& corpus, const SplitSpec& spec);

/// train := train ++ validation; validation emptied; test unchanged.
Split merge_validation_into_train(Split split);

/// Throws ValidationError unless the split partitions 0..n-1.
void check_split(const Split& split, std::size_t n);

}  // namespace nudgecast
