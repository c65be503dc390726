#include "nudgecast/reference.hpp"

#include <fmt/format.h>

namespace nudgecast::reference {

const std::vector<VariantRow>& published_variant_rows() {
    static const std::vector<VariantRow> rows = {
        {"MP1", "94.5", "36.7", "0", std::nullopt, std::nullopt, std::nullopt, std::nullopt},
        {"MP2", "68.2", "23.1", "19", 0.112, 0.134, 0.021, 0.354},
        {"MP3", "100", "79.0", "100", -0.058, 0.142, -0.151, 0.441},
        {"MP4", "100", "79.0", "100", -0.009, 0.127, -0.051, 0.385},
    };
    return rows;
}

const UnseenValues& published_unseen() {
    static const UnseenValues v{0.55, -0.088, -1.368, 0.049, 0.097, 12, 2};
    return v;
}

const NaiveValues& published_naive() {
    static const NaiveValues v{0.50, 0.12, 0.30};
    return v;
}

namespace {

std::string err(const std::optional<double>& mean, const std::optional<double>& var) {
    if (!mean) return "-";
    return fmt::format("{:.3f} ({:.3f})", *mean, *var);
}

}  // namespace

std::string render_published_reference() {
    std::string out;
    out += "PUBLISHED REFERENCE (reported values for comparison; not produced by this software)\n";
    out += "\n";
    out += "Prompt variants, 144 training / 23 validation / 41 test records, 10 runs\n";
    out += fmt::format("{:<6}| {:>17} | {:>12} | {:>16} | {:>15} | {:>15}\n", "Model",
                       "Dir. coverage (%)", "Accuracy (%)", "r/d coverage (%)", "r error (var)",
                       "d error (var)");
    out += std::string(6, '-') + "+" + std::string(19, '-') + "+" + std::string(14, '-') + "+" +
           std::string(18, '-') + "+" + std::string(17, '-') + "+" + std::string(16, '-') + "\n";
    for (const auto& r : published_variant_rows()) {
        out += fmt::format("{:<6}| {:>17} | {:>12} | {:>16} | {:>15} | {:>15}\n", r.model,
                           r.direction_coverage_pct, r.direction_accuracy_pct, r.rd_coverage_pct,
                           err(r.r_error, r.r_error_var), err(r.d_error, r.d_error_var));
    }
    const auto& u = published_unseen();
    const auto& n = published_naive();
    out += "\n";
    out += fmt::format("Unseen experiments ({} studies, model fine-tuned on 130 prompts)\n",
                       u.n_experiments);
    out += fmt::format("  direction accuracy            {:.2f}\n", u.accuracy);
    out += fmt::format("  r error                       {:.3f}\n", u.r_error);
    out += fmt::format("  d error                       {:.3f}\n", u.d_error);
    out += fmt::format("  r error, {} monetary excluded  {:.3f}\n", u.n_excluded,
                       u.excluded_r_error);
    out += fmt::format("  d error, {} monetary excluded  {:.3f}\n", u.n_excluded,
                       u.excluded_d_error);
    out += "\n";
    out += "Naive estimator on the unseen experiments\n";
    out += fmt::format("  direction accuracy            {:.2f}\n", n.accuracy);
    out += fmt::format("  r error                       {:.2f}\n", n.r_error);
    out += fmt::format("  d error                       {:.2f}\n", n.d_error);
    return out;
}

}  // namespace nudgecast::reference
