#include "nudgecast/corpus.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "nudgecast/csv.hpp"
#include "nudgecast/digest.hpp"
#include "nudgecast/effectstats.hpp"
#include "nudgecast/errors.hpp"

namespace nudgecast {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
    s = trim(s);
    if (s.starts_with('+')) s.remove_prefix(1);
    T value{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(value)) return std::nullopt;
    }
    return value;
}

enum Column {
    kStudyId, kTitle, kGoal, kIntervention, kCategory, kLocation, kYear, kPopulation,
    kSampleSize, kTreatmentN, kControlN, kDirection, kR, kD, kColumnCount
};

constexpr std::array<std::string_view, kColumnCount> kColumnNames = {
    "study_id", "paper_title", "goal_summary", "intervention_text", "intervention_category",
    "location", "year", "population", "sample_size", "treatment_n", "control_n",
    "direction", "r", "d"};

[[noreturn]] void row_error(std::size_t row, const csv::Row& raw, Column col,
                            std::string_view msg) {
    throw ValidationError(fmt::format("row {} (line {}), field '{}': {}", row, raw.line,
                                      kColumnNames[col], msg));
}

Entry parse_row(const csv::Row& raw, std::size_t row_no, bool holdout) {
    if (raw.cells.size() != kColumnCount) {
        throw ValidationError(fmt::format("row {} (line {}): expected {} fields, got {}", row_no,
                                          raw.line, static_cast<int>(kColumnCount),
                                          raw.cells.size()));
    }
    const auto& c = raw.cells;
    auto required_text = [&](Column col) {
        auto v = trim(c[col]);
        if (v.empty()) row_error(row_no, raw, col, "must not be empty");
        return std::string(v);
    };
    auto positive_int = [&](Column col) {
        auto v = parse_number<std::int64_t>(c[col]);
        if (!v) row_error(row_no, raw, col, fmt::format("not an integer: '{}'", c[col]));
        if (*v < 1) row_error(row_no, raw, col, "must be positive");
        return *v;
    };

    Entry e;
    e.holdout = holdout;
    auto& s = e.study;
    s.study_id = required_text(kStudyId);
    s.paper_title = required_text(kTitle);
    s.goal_summary = required_text(kGoal);
    s.intervention_text = required_text(kIntervention);
    auto cat = parse_category(c[kCategory]);
    if (!cat) {
        row_error(row_no, raw, kCategory,
                  fmt::format("'{}' is not one of monetary, information, nudge, other",
                              c[kCategory]));
    }
    s.intervention_category = *cat;
    s.location = required_text(kLocation);
    auto year = parse_year(c[kYear]);
    if (!year) row_error(row_no, raw, kYear, fmt::format("not a year: '{}'", c[kYear]));
    if (*year < 1950 || *year > 2100) row_error(row_no, raw, kYear, "must lie in [1950, 2100]");
    s.year = *year;
    s.population = required_text(kPopulation);
    s.sample_size = positive_int(kSampleSize);
    s.treatment_n = positive_int(kTreatmentN);
    s.control_n = positive_int(kControlN);

    std::optional<double> r, d;
    if (!trim(c[kR]).empty()) {
        r = parse_number<double>(c[kR]);
        if (!r) row_error(row_no, raw, kR, fmt::format("not a number: '{}'", c[kR]));
        if (std::fabs(*r) >= 1.0) row_error(row_no, raw, kR, "must lie in (-1, 1)");
        if (*r == 0.0) row_error(row_no, raw, kR, "zero effect is not a valid outcome");
    }
    if (!trim(c[kD]).empty()) {
        d = parse_number<double>(c[kD]);
        if (!d) row_error(row_no, raw, kD, fmt::format("not a number: '{}'", c[kD]));
        if (*d == 0.0) row_error(row_no, raw, kD, "zero effect is not a valid outcome");
    }
    if (!r && !d) row_error(row_no, raw, kR, "one of r or d is required");

    if (r) {
        e.outcome = outcome_from_r(*r);
        if (d) {
            if (std::fabs(*d - e.outcome.d) > 1e-9 * std::max(1.0, std::fabs(*d))) {
                row_error(row_no, raw, kD,
                          fmt::format("inconsistent with r: expected {:.12g}", e.outcome.d));
            }
            e.outcome.d = *d;
        }
    } else {
        e.outcome = outcome_from_d(*d);
    }

    if (!trim(c[kDirection]).empty()) {
        auto dir = parse_direction(c[kDirection]);
        if (!dir) {
            row_error(row_no, raw, kDirection,
                      fmt::format("'{}' is not positive or negative", c[kDirection]));
        }
        if (*dir != e.outcome.direction) {
            row_error(row_no, raw, kDirection, "disagrees with the sign of r/d");
        }
    }
    return e;
}

}  // namespace

std::string_view to_string(Direction d) {
    return d == Direction::positive ? "positive" : "negative";
}

std::string_view to_string(InterventionCategory c) {
    switch (c) {
        case InterventionCategory::monetary: return "monetary";
        case InterventionCategory::information: return "information";
        case InterventionCategory::nudge: return "nudge";
        case InterventionCategory::other: return "other";
    }
    return "other";
}

std::optional<Direction> parse_direction(std::string_view text) {
    auto t = lower(trim(text));
    if (t == "positive") return Direction::positive;
    if (t == "negative") return Direction::negative;
    return std::nullopt;
}

std::optional<InterventionCategory> parse_category(std::string_view text) {
    auto t = lower(trim(text));
    if (t == "monetary") return InterventionCategory::monetary;
    if (t == "information") return InterventionCategory::information;
    if (t == "nudge") return InterventionCategory::nudge;
    if (t == "other") return InterventionCategory::other;
    return std::nullopt;
}

std::optional<int> parse_year(std::string_view text) {
    text = trim(text);
    // "2015-2017", "2015–2017" (en dash), "2015/16" style ranges keep the end
    for (std::string_view sep : std::array<std::string_view, 3>{"\xE2\x80\x93", "-", "/"}) {
        auto pos = text.rfind(sep);
        if (pos != std::string_view::npos && pos > 0) {
            auto start = parse_number<int>(text.substr(0, pos));
            auto end = parse_number<int>(text.substr(pos + sep.size()));
            if (!start || !end) return std::nullopt;
            int e = *end;
            if (e < 100) e += (*start / 100) * 100;  // two-digit end year
            if (e < *start) return std::nullopt;
            return e;
        }
    }
    return parse_number<int>(text);
}

EffectOutcome outcome_from_r(double r) {
    if (r == 0.0) throw ValidationError("zero effect is not a valid outcome");
    EffectOutcome o;
    o.r = r;
    o.d = effectstats::d_from_r(r);
    o.direction = r > 0 ? Direction::positive : Direction::negative;
    return o;
}

EffectOutcome outcome_from_d(double d) {
    if (d == 0.0 || !std::isfinite(d)) throw ValidationError("d must be finite and nonzero");
    EffectOutcome o;
    o.d = d;
    o.r = effectstats::r_from_d(d);
    o.direction = d > 0 ? Direction::positive : Direction::negative;
    return o;
}

Corpus::Corpus(std::vector<Entry> entries, std::string provenance)
    : entries_(std::move(entries)), provenance_(std::move(provenance)) {
    std::unordered_set<std::string_view> seen;
    for (const auto& e : entries_) {
        if (!seen.insert(e.study.study_id).second) {
            throw ValidationError("duplicate study_id '" + e.study.study_id + "'");
        }
    }
}

std::optional<std::size_t> Corpus::find(std::string_view study_id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].study.study_id == study_id) return i;
    }
    return std::nullopt;
}

std::vector<Entry> Corpus::select(std::span<const std::size_t> indices) const {
    std::vector<Entry> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(entries_.at(i));
    return out;
}

Corpus parse_corpus(std::string_view text, std::string provenance, bool holdout) {
    auto rows = csv::parse(text);
    if (rows.empty()) throw ValidationError("empty corpus");
    auto header = csv::join(rows.front().cells);
    if (header != kCorpusHeader) {
        throw ValidationError("corpus header mismatch: expected '" + std::string(kCorpusHeader) +
                              "'");
    }
    if (rows.size() == 1) throw ValidationError("empty corpus");
    std::vector<Entry> entries;
    entries.reserve(rows.size() - 1);
    std::unordered_set<std::string> ids;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        auto e = parse_row(rows[i], i, holdout);
        if (!ids.insert(e.study.study_id).second) {
            throw ValidationError(fmt::format("row {} (line {}), field 'study_id': duplicate '{}'",
                                              i, rows[i].line, e.study.study_id));
        }
        entries.push_back(std::move(e));
    }
    return Corpus(std::move(entries), std::move(provenance));
}

Corpus ingest_corpus(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw ValidationError("corpus file not found: " + path.string());
    }
    auto text = read_file(path);
    return parse_corpus(text, sha256_hex(text));
}

Corpus load_unseen(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw ValidationError("unseen file not found: " + path.string());
    }
    auto text = read_file(path);
    return parse_corpus(text, sha256_hex(text), /*holdout=*/true);
}

std::string export_corpus(const Corpus& corpus) {
    std::string out(kCorpusHeader);
    out += '\n';
    for (const auto& e : corpus.entries()) {
        const auto& s = e.study;
        out += csv::join({s.study_id, s.paper_title, s.goal_summary, s.intervention_text,
                          std::string(to_string(s.intervention_category)), s.location,
                          std::to_string(s.year), s.population, std::to_string(s.sample_size),
                          std::to_string(s.treatment_n), std::to_string(s.control_n),
                          std::string(to_string(e.outcome.direction)),
                          fmt::format("{:.17g}", e.outcome.r),
                          fmt::format("{:.17g}", e.outcome.d)});
        out += '\n';
    }
    return out;
}

Corpus exclude_category(const Corpus& corpus, InterventionCategory category) {
    std::vector<Entry> kept;
    for (const auto& e : corpus.entries()) {
        if (e.study.intervention_category != category) kept.push_back(e);
    }
    return Corpus(std::move(kept), corpus.provenance());
}

// ---------------------------------------------------------------------------

Xorshift64Star::Xorshift64Star(std::uint64_t seed) {
    // splitmix64 step; guarantees a nonzero state for every seed
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    state_ = z ? z : 0x9E3779B97F4A7C15ULL;
}

std::uint64_t Xorshift64Star::next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
}

std::uint64_t Xorshift64Star::below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t x;
    do {
        x = next();
    } while (x >= limit);
    return x % bound;
}

Split split_corpus(const Corpus& corpus, const SplitSpec& spec) {
    const auto n = corpus.size();
    if (spec.counts.total() != n) {
        throw ValidationError(fmt::format("split counts {}+{}+{} = {} do not match corpus size {}",
                                          spec.counts.train, spec.counts.validation,
                                          spec.counts.test, spec.counts.total(), n));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Xorshift64Star rng(spec.seed);
    for (std::size_t i = n; i > 1; --i) {
        auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(perm[i - 1], perm[j]);
    }
    Split s;
    auto it = perm.begin();
    s.train.assign(it, it + static_cast<std::ptrdiff_t>(spec.counts.train));
    it += static_cast<std::ptrdiff_t>(spec.counts.train);
    s.validation.assign(it, it + static_cast<std::ptrdiff_t>(spec.counts.validation));
    it += static_cast<std::ptrdiff_t>(spec.counts.validation);
    s.test.assign(it, perm.end());
    return s;
}

Split merge_validation_into_train(Split split) {
    split.train.insert(split.train.end(), split.validation.begin(), split.validation.end());
    split.validation.clear();
    return split;
}

void check_split(const Split& split, std::size_t n) {
    std::vector<char> seen(n, 0);
    for (const auto* part : {&split.train, &split.validation, &split.test}) {
        for (auto i : *part) {
            if (i >= n) throw ValidationError(fmt::format("split index {} out of range", i));
            if (seen[i]) throw ValidationError(fmt::format("split index {} assigned twice", i));
            seen[i] = 1;
        }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
        throw ValidationError("split does not cover the corpus");
    }
}

}  // namespace nudgecast
