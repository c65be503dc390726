#pragma once

#include <optional>
#include <string>
#include <vector>

namespace nudgecast::reference {

/// One row of the published prompt-variant results. Percentages and errors
/// are kept as printed; absent values are nullopt.
struct VariantRow {
    std::string model;
    std::string direction_coverage_pct;
    std::string direction_accuracy_pct;
    std::string rd_coverage_pct;
    std::optional<double> r_error;
    std::optional<double> r_error_var;
    std::optional<double> d_error;
    std::optional<double> d_error_var;
};

struct UnseenValues {
    double accuracy;
    double r_error;
    double d_error;
    double excluded_r_error;
    double excluded_d_error;
    int n_experiments;
    int n_excluded;
};

struct NaiveValues {
    double accuracy;
    double r_error;
    double d_error;
};

/// Published values, for side-by-side comparison only. They are never the
/// expected output of a backend run here.
const std::vector<VariantRow>& published_variant_rows();
const UnseenValues& published_unseen();
const NaiveValues& published_naive();

/// Text table headed "PUBLISHED REFERENCE".
std::string render_published_reference();

}  // namespace nudgecast::reference
