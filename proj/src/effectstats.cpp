#include "nudgecast/effectstats.hpp"

#include <cmath>
#include <string>

#include "nudgecast/errors.hpp"

namespace nudgecast::effectstats {

double d_from_r(double r) {
    if (!std::isfinite(r) || std::fabs(r) >= 1.0) {
        throw ValidationError("d_from_r: r must lie in (-1, 1), got " + std::to_string(r));
    }
    // (1-r)(1+r) keeps precision near |r| -> 1
    return 2.0 * r / std::sqrt((1.0 - r) * (1.0 + r));
}

double r_from_d(double d) {
    if (std::isinf(d)) return d > 0 ? 1.0 : -1.0;
    // hypot avoids overflow of d*d for huge d
    return d / std::hypot(d, 2.0);
}

double d_from_means(const TwoGroupMeans& raw) {
    if (!(raw.s1 > 0) || !(raw.s2 > 0)) {
        throw ValidationError("d_from_means: standard deviations must be positive");
    }
    if (raw.n1 < 2 || raw.n2 < 2) {
        throw ValidationError("d_from_means: each group needs at least 2 observations");
    }
    const double n1 = static_cast<double>(raw.n1);
    const double n2 = static_cast<double>(raw.n2);
    const double pooled_var =
        ((n1 - 1.0) * raw.s1 * raw.s1 + (n2 - 1.0) * raw.s2 * raw.s2) / (n1 + n2 - 2.0);
    const double pooled_sd = std::sqrt(pooled_var);
    if (!(pooled_sd > 0) || !std::isfinite(pooled_sd)) {
        throw ValidationError("d_from_means: degenerate pooled standard deviation");
    }
    return (raw.m1 - raw.m2) / pooled_sd;
}

double d_from_raw(const RawStats& raw) {
    struct Visitor {
        double operator()(const TwoGroupMeans& m) const { return d_from_means(m); }
        double operator()(const PrecomputedR& p) const { return d_from_r(p.r); }
        double operator()(const PrecomputedD& p) const { return p.d; }
    };
    return std::visit(Visitor{}, raw);
}

NaiveBaseline naive_baseline(std::span<const Entry> train) {
    if (train.empty()) {
        throw ValidationError("naive_baseline: empty training slice");
    }
    std::size_t positives = 0;
    double sum_r = 0, sum_d = 0;
    for (const auto& e : train) {
        if (e.outcome.direction == Direction::positive) ++positives;
        sum_r += std::fabs(e.outcome.r);
        sum_d += std::fabs(e.outcome.d);
    }
    const std::size_t negatives = train.size() - positives;
    NaiveBaseline out;
    out.modal_direction = positives > negatives ? Direction::positive : Direction::negative;
    out.mean_abs_r = sum_r / static_cast<double>(train.size());
    out.mean_abs_d = sum_d / static_cast<double>(train.size());
    return out;
}

}  // namespace nudgecast::effectstats
